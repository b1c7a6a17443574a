#pragma once

// Accuracy, calibration and arbitrage metrics for generated surfaces against
// realized surfaces, plus CSV / JSON report writers.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/csv_io.hpp"
#include "ivdiff/grid.hpp"

#include <optional>
#include <span>
#include <string>
#include <vector>

namespace ivdiff {

struct SliceSpec {
    std::string label;
    Index moneyness_index = 0;
    Index tenor_index = 0;
};

/// ATM (m = 1.0), OTM (m = 1.2), ITM (m = 0.8) crossed with 1-Day, 1-Week,
/// 1-Month and 3-Month tenors on the default grid.
std::vector<SliceSpec> default_slices();

/// Mean over cells of |pred - truth| / truth, as a fraction.
double surface_mape(const Surface& truth, const Surface& pred);

/// q-th percentile (q in [0, 100]) with linear interpolation between order
/// statistics.
double percentile(std::vector<double> values, double q);

struct CiStats {
    double mean_width = 0.0;
    double std_width = 0.0;
    double breach_pct = 0.0;
};

/// Minimum samples per day for percentile bands.
inline constexpr std::size_t kMinBatchForCi = 20;

/// Per-day band [(1 - level) / 2, (1 + level) / 2] percentiles of the samples at
/// the slice; a breach is truth strictly outside the band.
CiStats ci_stats(std::span<const Surface> truth, std::span<const std::vector<Surface>> batches,
                 const SliceSpec& slice, double level = 0.90);

struct Moments {
    double mean = 0.0;
    double std = 0.0;
    double skewness = 0.0;
    double kurtosis = 0.0;  // excess (normal = 0)
};

/// Population moments. Throws InputError for fewer than 4 values or zero variance.
Moments moments(std::span<const double> values);

struct SliceMetrics {
    SliceSpec slice;
    double mape_pct = 0.0;
    double ape_std_pct = 0.0;
    CiStats ci;
    std::optional<Moments> real_moments;
    std::optional<Moments> generated_moments;
};

struct DailyMetrics {
    std::string date;
    double surface_mape = 0.0;      // mean-sample surface vs truth, fraction
    double mean_phi = 0.0;          // mean penalty of the samples
    double ci_lower = 0.0;          // 5th percentile of per-sample surface MAPE
    double ci_upper = 0.0;          // 95th percentile of per-sample surface MAPE
    double median_sample_mape = 0.0;
    double truth_phi = 0.0;
};

struct MetricsReport {
    std::vector<SliceMetrics> slices;
    double overall_mape_pct = 0.0;  // mean of the daily surface MAPEs
    double mean_generated_phi = 0.0;
    double mean_truth_phi = 0.0;
    std::size_t samples_per_day = 0;
    std::vector<DailyMetrics> daily;
};

/// Groups sample rows by date (in first-appearance order) and aligns them with
/// the truth rows. Throws InputError listing sample dates without truth and
/// dates with inconsistent batch sizes.
struct AlignedData {
    std::vector<std::string> dates;
    std::vector<Surface> truth;
    std::vector<std::vector<Surface>> batches;
};
AlignedData align_samples(const std::vector<DatedSurface>& truth, const std::vector<SampleRow>& samples);

MetricsReport evaluate(std::span<const std::string> dates, std::span<const Surface> truth,
                       std::span<const std::vector<Surface>> batches,
                       const std::vector<SliceSpec>& slices, const PricingContext& ctx,
                       const GridSpec& grid = {}, double ci_level = 0.90);

void write_metrics_csv(const std::string& path, const MetricsReport& report);
void write_daily_csv(const std::string& path, const MetricsReport& report);
void write_summary_json(const std::string& path, const MetricsReport& report);

}  // namespace ivdiff
