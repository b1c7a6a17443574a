#pragma once

#include "ivdiff/checkpoint.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/synthetic.hpp"
#include "ivdiff/training.hpp"

#include <filesystem>
#include <memory>
#include <string>

namespace ivdiff::testing {

inline std::string temp_dir(const std::string& name) {
    const auto dir = std::filesystem::temp_directory_path() / "ivdiff_tests" / name;
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir.string();
}

inline PreparedData synthetic_dataset(std::size_t days, std::uint64_t seed,
                                      const ConditioningConfig& cfg = {}) {
    std::vector<std::string> dates;
    std::vector<Surface> raw;
    std::vector<double> ret, vix;
    for (const SyntheticDay& d : synthetic_generate(std::max<std::size_t>(days, 50), seed, GridSpec{})) {
        if (dates.size() == days) break;
        dates.push_back(d.date);
        raw.push_back(d.surface);
        ret.push_back(d.underlying_return);
        vix.push_back(d.vix_return);
    }
    return prepare_dataset(dates, raw, ret, vix, cfg);
}

/// Owns the schedule and statistics a LossContext points at.
struct TrainingSetup {
    PreparedData data;
    std::unique_ptr<NoiseSchedule> schedule;
    LossContext ctx;
    TrainConfig cfg;

    TrainingSetup(PreparedData d, int steps) : data(std::move(d)) {
        schedule = std::make_unique<NoiseSchedule>(build_cosine_schedule(steps));
        ctx.schedule = schedule.get();
        ctx.stats = &data.stats;
        cfg.diffusion_steps = steps;
    }

    std::vector<const TrainingExample*> batch(std::size_t n) const {
        std::vector<const TrainingExample*> b;
        for (std::size_t i = 0; i < n && i < data.train.size(); ++i) b.push_back(&data.train[i]);
        return b;
    }

    Checkpoint checkpoint(const ParamStore& params) const {
        Checkpoint c;
        c.unet = ctx.unet;
        c.train = cfg;
        c.pricing = ctx.pricing;
        c.schedule = *schedule;
        c.stats = data.stats;
        c.scalar_stats = data.scalar_stats;
        c.params = {params.live.clone(true), params.ema.clone(false)};
        return c;
    }
};

}  // namespace ivdiff::testing
