#pragma once

// Synthetic daily implied-vol surfaces and market series.
//
// Each day's smile is quadratic in log-moneyness k = log m,
//   sigma(k, tau) = a(tau) + b(tau) k + c(tau) k^2,
// with an ATM term structure a(tau) = L + (S - L) exp(-tau / T0) and skew and
// curvature decaying like 1 / sqrt(1 + tau / T1). The level L, the short/long
// ratio S / L, the skew and the curvature follow clamped AR(1) processes driven
// partly by the underlying's return shocks.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/grid.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ivdiff {

struct SmileParams {
    double level = 0.2;       // L, long-tenor ATM vol
    double short_ratio = 1.0; // S / L
    double skew = -0.15;      // b at tau = 0
    double curvature = 0.3;   // c at tau = 0
};

struct SyntheticConfig {
    double term_decay = 0.25;     // T0 in years
    double smile_decay = 0.1;     // T1 in years
    SmileParams mean;             // AR(1) attractor
    double persistence = 0.98;    // AR(1) coefficient
    double level_vol = 0.04;      // daily shock size of log L
    double ratio_vol = 0.03;
    double skew_vol = 0.01;
    double curvature_vol = 0.02;
    double leverage = -0.7;       // correlation of return and level shocks
    double drift = 0.0003;        // daily mean return
    /// Per-cell multiplicative observation noise (log-normal std); 0 gives the
    /// noiseless parametric family.
    double observation_noise = 0.05;
    /// A noisy surface whose total penalty exceeds this is redrawn.
    double max_penalty = 1e-2;
    PricingContext pricing;
};

struct SyntheticDay {
    std::string date;
    Surface surface;
    double underlying_return = 0.0;
    double vix_return = 0.0;
};

/// Lower and upper clamp applied to every generated vol.
inline constexpr double kSyntheticMinVol = 0.0101;
inline constexpr double kSyntheticMaxVol = 1.99;

Surface smile_surface(const SmileParams& p, const GridSpec& grid, const SyntheticConfig& cfg);

/// Weekday dates starting at 2000-01-03, ISO-8601.
std::vector<std::string> business_dates(std::size_t n);

/// Throws InputError for n_days < 50.
std::vector<SyntheticDay> synthetic_generate(std::size_t n_days, std::uint64_t seed,
                                             const GridSpec& grid, const SyntheticConfig& cfg = {});

}  // namespace ivdiff
