#pragma once

// JSON documents: the model checkpoint and the configuration sections shared
// with run-config files. Readers reject unknown keys; keys absent from a
// document keep the value of the `base` argument.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/diffusion.hpp"
#include "ivdiff/model.hpp"
#include "ivdiff/training.hpp"

#include <json.hpp>

#include <string>

namespace ivdiff {

using Json = nlohmann::json;

inline constexpr int kCheckpointVersion = 1;

struct Checkpoint {
    UNetConfig unet;
    TrainConfig train;
    PricingContext pricing;
    NoiseSchedule schedule;
    NormalizationStats stats;
    ScalarStats scalar_stats;
    ParamStore params;
    int epoch = 0;
    double best_val = 0.0;
};

Json to_json(const UNetConfig& c);
Json to_json(const TrainConfig& c);
Json to_json(const SmoothingConfig& c);
Json to_json(const ConditioningConfig& c);
Json to_json(const PricingContext& c);

UNetConfig unet_config_from_json(const Json& j, UNetConfig base = {});
TrainConfig train_config_from_json(const Json& j, TrainConfig base = {});
SmoothingConfig smoothing_config_from_json(const Json& j, SmoothingConfig base = {});
ConditioningConfig conditioning_config_from_json(const Json& j, ConditioningConfig base = {});
PricingContext pricing_from_json(const Json& j, PricingContext base = {});

std::string checkpoint_to_string(const Checkpoint& ckpt);
Checkpoint checkpoint_from_string(const std::string& text, const std::string& source = "checkpoint");

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ivdiff
