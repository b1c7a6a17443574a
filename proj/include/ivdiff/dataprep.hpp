#pragma once

// Quote smoothing, log/standardize transform, EWMA conditioning features and
// the chronological train/validation/test split.

#include "ivdiff/grid.hpp"

#include <Eigen/Core>

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace ivdiff {

struct QuoteRecord {
    std::string date;
    double moneyness = 0.0;
    double tenor = 0.0;
    double implied_vol = 0.0;
    double vega = 0.0;
};

/// Gaussian kernel bandwidths. The kernel uses them as variances:
/// k(x, y) = exp(-x^2 / (2 h1) - y^2 / (2 h2)) / (2 pi).
struct SmoothingConfig {
    double h1 = 0.002;
    double h2 = 0.046;
};

/// Per-cell mean and standard deviation of log implied volatility.
struct NormalizationStats {
    Surface mean = Surface::Zero();
    Surface std = Surface::Ones();
};

inline constexpr int kScalarFeatures = 5;
using ScalarVector = Eigen::Matrix<double, kScalarFeatures, 1>;

struct ScalarStats {
    ScalarVector mean = ScalarVector::Zero();
    ScalarVector std = ScalarVector::Ones();
};

struct ConditioningConfig {
    double alpha_trend_short = 0.156;
    double alpha_trend_long = 0.118;
    double alpha_vol_short = 0.3;
    double alpha_vol_long = 0.15;
    double surface_span_short = 5.0;
    double surface_span_long = 20.0;

    /// Observations required before the first usable date.
    std::size_t warmup() const { return static_cast<std::size_t>(surface_span_long); }
    void validate() const;
};

/// Model input for one forecast date. Rows of `channels` are the day-k
/// normalized surface, its short and long EWMAs, and a zero slot that the
/// noisy target fills at run time.
struct ConditioningBundle {
    using Channels = Eigen::Matrix<double, 4, kCells, Eigen::RowMajor>;
    Channels channels = Channels::Zero();
    ScalarVector scalars = ScalarVector::Zero();
    std::string date;
};

struct IndexRange {
    std::size_t begin = 0;
    std::size_t end = 0;
    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
};

struct SplitSpec {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

struct SplitRanges {
    IndexRange train, validation, test;
};

/// Vega- and kernel-weighted average of quote vols at every grid cell. Quotes
/// with zero vega are dropped.
Surface smooth_surface(std::span<const QuoteRecord> quotes, const GridSpec& grid,
                       const SmoothingConfig& cfg);

/// Stats of log(raw) over the given surfaces (population standard deviation).
NormalizationStats compute_normalization_stats(std::span<const Surface> raw);

/// (log(raw) - mean) / std per cell. Throws DomainError on non-positive cells.
Surface normalize(const Surface& raw, const NormalizationStats& stats);
/// exp(z * std + mean): the inverse transform back to implied volatility.
Surface denormalize(const Surface& z, const NormalizationStats& stats);

/// EWMA_k = alpha y_k + (1 - alpha) EWMA_{k-1}, seeded with EWMA_0 = y_0.
std::vector<double> ewma(std::span<const double> series, double alpha);
std::vector<Surface> ewma(std::span<const Surface> series, double alpha);
/// Standard span convention alpha = 2 / (span + 1).
double span_to_alpha(double span);

/// Unstandardized scalar features for date k: the four return EWMAs and the
/// day-k VIX return.
ScalarVector raw_scalar_features(std::size_t k, std::span<const double> returns,
                                 std::span<const double> vix_returns,
                                 const ConditioningConfig& cfg);

ScalarStats compute_scalar_stats(std::span<const ScalarVector> raw);

/// Assembles the bundle for date index k from the full normalized history.
/// Requires k >= cfg.warmup().
ConditioningBundle build_conditioning(std::size_t k, std::span<const Surface> normalized,
                                      std::span<const double> returns,
                                      std::span<const double> vix_returns,
                                      const ConditioningConfig& cfg, const ScalarStats& scalar_stats,
                                      const std::string& date = {});

/// Boundaries at floor(0.8 n) and floor(0.9 n) for the default spec.
SplitRanges chronological_split(std::size_t n, const SplitSpec& spec = {});
/// Checks that dates are strictly increasing, then splits.
SplitRanges chronological_split(std::span<const std::string> dates, const SplitSpec& spec = {});

// Prepared dataset ------------------------------------------------------------

/// One supervised pair: conditioning on day k, target surface on day k + 1.
struct TrainingExample {
    std::size_t index = 0;  // k
    ConditioningBundle bundle;
    Surface target = Surface::Zero();  // normalized day k + 1
};

struct MarketSeries {
    std::vector<std::string> dates;
    std::vector<double> underlying_returns;
    std::vector<double> vix_returns;
};

struct PreparedData {
    std::vector<std::string> dates;
    std::vector<Surface> raw;         // implied vol
    std::vector<Surface> normalized;  // standardized log vol
    std::vector<double> underlying_returns;
    std::vector<double> vix_returns;
    NormalizationStats stats;
    ScalarStats scalar_stats;
    ConditioningConfig conditioning;
    SplitRanges split;
    std::vector<TrainingExample> train, validation, test;

    /// Bundle conditioning a forecast of dates[target_index].
    const TrainingExample* example_for_target(std::size_t target_index) const;
};

/// Full pipeline from daily raw surfaces and market series (aligned by date).
/// Statistics use training dates only; examples are assigned to the split of
/// their target date and those without warm-up history are dropped.
PreparedData prepare_dataset(std::vector<std::string> dates, std::vector<Surface> raw,
                             std::vector<double> underlying_returns,
                             std::vector<double> vix_returns, const ConditioningConfig& cfg,
                             const SplitSpec& split = {});

void save_prepared(const PreparedData& data, const std::string& path);
PreparedData load_prepared(const std::string& path);

}  // namespace ivdiff
