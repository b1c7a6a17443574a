#include "ivdiff/synthetic.hpp"

#include "ivdiff/errors.hpp"
#include "ivdiff/random.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

namespace ivdiff {

namespace {

constexpr double kMinLevel = 0.08, kMaxLevel = 0.6;
constexpr double kMinRatio = 0.7, kMaxRatio = 1.8;
constexpr double kMinSkew = -0.35, kMaxSkew = 0.0;
constexpr double kMinCurvature = 0.05, kMaxCurvature = 0.6;

double ar1(double x, double mean, double phi, double shock) {
    return mean + phi * (x - mean) + shock;
}

}  // namespace

Surface smile_surface(const SmileParams& p, const GridSpec& grid, const SyntheticConfig& cfg) {
    Surface s;
    for (Index j = 0; j < kGridSide; ++j) {
        const double tau = grid.tenors[j];
        const double atm =
            p.level + (p.short_ratio - 1.0) * p.level * std::exp(-tau / cfg.term_decay);
        const double decay = 1.0 / std::sqrt(1.0 + tau / cfg.smile_decay);
        for (Index i = 0; i < kGridSide; ++i) {
            const double k = std::log(grid.moneyness[i]);
            const double v = atm + decay * (p.skew * k + p.curvature * k * k);
            s(i, j) = std::clamp(v, kSyntheticMinVol, kSyntheticMaxVol);
        }
    }
    return s;
}

std::vector<std::string> business_dates(std::size_t n) {
    using namespace std::chrono;
    std::vector<std::string> out;
    out.reserve(n);
    sys_days day = sys_days{year{2000} / January / 3};
    while (out.size() < n) {
        const weekday wd{day};
        if (wd != Saturday && wd != Sunday) {
            const year_month_day ymd{day};
            char buf[16];
            std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(ymd.year()),
                          static_cast<unsigned>(ymd.month()), static_cast<unsigned>(ymd.day()));
            out.emplace_back(buf);
        }
        day += days{1};
    }
    return out;
}

std::vector<SyntheticDay> synthetic_generate(std::size_t n_days, std::uint64_t seed,
                                             const GridSpec& grid, const SyntheticConfig& cfg) {
    if (n_days < 50) {
        throw InputError("synthetic_generate: need at least 50 days, got " + std::to_string(n_days));
    }
    grid.validate();
    Rng rng(sub_seed(seed, 0));
    Rng noise_rng(sub_seed(seed, 1));
    std::normal_distribution<double> normal(0.0, 1.0);
    std::normal_distribution<double> noise_normal(0.0, 1.0);

    const auto dates = business_dates(n_days);
    const double rho = cfg.leverage;
    const double rho_c = std::sqrt(1.0 - rho * rho);
    const double log_mean_level = std::log(cfg.mean.level);

    SmileParams p = cfg.mean;
    double prev_vix_level = 0.0;
    std::vector<SyntheticDay> out;
    out.reserve(n_days);
    for (std::size_t d = 0; d < n_days; ++d) {
        const double z_ret = normal(rng);
        const double z_lvl = rho * z_ret + rho_c * normal(rng);
        const double z_ratio = 0.5 * z_lvl + std::sqrt(0.75) * normal(rng);
        const double z_skew = normal(rng);
        const double z_curv = normal(rng);

        double ret = 0.0;
        if (d > 0) {
            const double daily_vol = p.level * p.short_ratio / std::sqrt(252.0);
            ret = cfg.drift + daily_vol * z_ret;
            const double log_level =
                ar1(std::log(p.level), log_mean_level, cfg.persistence, cfg.level_vol * z_lvl);
            p.level = std::clamp(std::exp(log_level), kMinLevel, kMaxLevel);
            p.short_ratio = std::clamp(
                ar1(p.short_ratio, cfg.mean.short_ratio, cfg.persistence, cfg.ratio_vol * z_ratio),
                kMinRatio, kMaxRatio);
            p.skew = std::clamp(ar1(p.skew, cfg.mean.skew, cfg.persistence, cfg.skew_vol * z_skew),
                                kMinSkew, kMaxSkew);
            p.curvature = std::clamp(
                ar1(p.curvature, cfg.mean.curvature, cfg.persistence, cfg.curvature_vol * z_curv),
                kMinCurvature, kMaxCurvature);
        }

        const Surface clean = smile_surface(p, grid, cfg);
        Surface s = clean;
        if (cfg.observation_noise > 0.0) {
            // Bounded number of redraws; the clean surface is the fallback.
            bool accepted = false;
            for (int attempt = 0; attempt < 16 && !accepted; ++attempt) {
                Surface noisy;
                for (Index k = 0; k < kCells; ++k) {
                    const double v =
                        clean.data()[k] * std::exp(cfg.observation_noise * noise_normal(noise_rng));
                    noisy.data()[k] = std::clamp(v, kSyntheticMinVol, kSyntheticMaxVol);
                }
                if (penalty_loops(noisy, grid, cfg.pricing).total <= cfg.max_penalty) {
                    s = noisy;
                    accepted = true;
                }
            }
        }

        // VIX proxy: the one-month ATM vol of the clean surface.
        const Index atm_row = 4;
        const Index month_col = 3;
        const double vix_level = clean(atm_row, month_col);
        const double vix_ret = d > 0 ? vix_level / prev_vix_level - 1.0 : 0.0;
        prev_vix_level = vix_level;

        out.push_back({dates[d], s, ret, vix_ret});
    }
    return out;
}

}  // namespace ivdiff
