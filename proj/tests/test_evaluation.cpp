#include "ivdiff/errors.hpp"
#include "ivdiff/evaluation.hpp"
#include "ivdiff/random.hpp"

#include <gtest/gtest.h>

#include <algorithm>
#include <random>

namespace ivdiff {
namespace {

Surface random_surface(std::mt19937_64& rng, double lo = 0.1, double hi = 0.6) {
    std::uniform_real_distribution<double> d(lo, hi);
    Surface s;
    for (Index k = 0; k < kCells; ++k) s.data()[k] = d(rng);
    return s;
}

struct Series {
    std::vector<std::string> dates;
    std::vector<Surface> truth;
    std::vector<std::vector<Surface>> batches;
};

Series noisy_series(std::size_t days, std::size_t k, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> n(0.0, 0.05);
    Series s;
    for (std::size_t d = 0; d < days; ++d) {
        s.dates.push_back("2021-01-" + std::to_string(10 + d));
        s.truth.push_back(random_surface(rng));
        std::vector<Surface> b;
        for (std::size_t i = 0; i < k; ++i) {
            Surface x = s.truth.back();
            for (Index c = 0; c < kCells; ++c) x.data()[c] *= std::exp(n(rng));
            b.push_back(x);
        }
        s.batches.push_back(b);
    }
    return s;
}

TEST(Mape, Examples) {
    std::mt19937_64 rng(1);
    const Surface t = random_surface(rng), p = random_surface(rng);
    EXPECT_EQ(surface_mape(t, t), 0.0);
    EXPECT_NEAR(surface_mape(t, Surface(1.1 * t)), 0.10, 1e-15);
    double acc = 0.0;
    for (int i = 0; i < 9; ++i)
        for (int j = 0; j < 9; ++j) acc += std::abs((p(i, j) - t(i, j)) / t(i, j));
    EXPECT_NEAR(surface_mape(t, p), acc / 81.0, 1e-15);
    EXPECT_NE(surface_mape(t, p), surface_mape(p, t));
    Surface z = t;
    z(1, 1) = 0.0;
    EXPECT_THROW(surface_mape(z, p), DomainError);
}

TEST(Percentile, LinearInterpolation) {
    const std::vector<double> v{4.0, 1.0, 3.0, 2.0, 5.0};
    EXPECT_EQ(percentile(v, 0.0), 1.0);
    EXPECT_EQ(percentile(v, 100.0), 5.0);
    EXPECT_EQ(percentile(v, 50.0), 3.0);
    EXPECT_NEAR(percentile(v, 5.0), 1.2, 1e-15);
    EXPECT_NEAR(percentile(v, 95.0), 4.8, 1e-15);
}

TEST(Ci, MedianTruthNeverBreaches) {
    Series s = noisy_series(5, 21, 2);
    for (std::size_t d = 0; d < 5; ++d) {
        std::vector<double> v;
        for (const Surface& x : s.batches[d]) v.push_back(x(4, 0));
        s.truth[d](4, 0) = percentile(v, 50.0);
    }
    EXPECT_EQ(ci_stats(s.truth, s.batches, {"ATM", 4, 0}).breach_pct, 0.0);
}

TEST(Ci, TruthAboveEverySampleAlwaysBreaches) {
    Series s = noisy_series(5, 25, 3);
    for (auto& t : s.truth) t(6, 3) = 10.0;
    EXPECT_EQ(ci_stats(s.truth, s.batches, {"OTM", 6, 3}).breach_pct, 100.0);
}

TEST(Ci, WidthsAndSmallBatch) {
    const Series s = noisy_series(6, 30, 4);
    const CiStats c = ci_stats(s.truth, s.batches, {"x", 2, 5});
    std::vector<double> w;
    for (const auto& b : s.batches) {
        std::vector<double> v;
        for (const Surface& x : b) v.push_back(x(2, 5));
        w.push_back(percentile(v, 95.0) - percentile(v, 5.0));
    }
    double mean = 0.0;
    for (double x : w) mean += x;
    EXPECT_NEAR(c.mean_width, mean / 6.0, 1e-15);
    const Series small = noisy_series(2, 19, 5);
    EXPECT_THROW(ci_stats(small.truth, small.batches, {"x", 0, 0}), InputError);
}

TEST(Ci, FullRangeBreachesNoMoreThanNinetyPercentBand) {
    const Series s = noisy_series(40, 30, 6);
    for (const SliceSpec& sl : default_slices())
        EXPECT_LE(ci_stats(s.truth, s.batches, sl, 1.0).breach_pct, ci_stats(s.truth, s.batches, sl, 0.9).breach_pct);
}

TEST(Moments, NormalAndExponentialReferences) {
    Rng rng(7);
    std::normal_distribution<double> normal;
    std::exponential_distribution<double> expo(1.0);
    std::vector<double> a(1000000), b(1000000);
    for (auto& x : a) x = normal(rng);
    for (auto& x : b) x = expo(rng);
    const Moments ma = moments(a), mb = moments(b);
    EXPECT_LT(std::abs(ma.skewness), 0.05);
    EXPECT_LT(std::abs(ma.kurtosis), 0.05);
    EXPECT_NEAR(mb.skewness, 2.0, 0.1);
    EXPECT_NEAR(mb.kurtosis, 6.0, 0.1);
    EXPECT_THROW(moments(std::vector<double>(10, 3.0)), InputError);
    EXPECT_THROW(moments(std::vector<double>{1, 2, 3}), InputError);
}

TEST(Moments, SmallSampleByHand) {
    const std::vector<double> v{1, 2, 3, 4, 10};
    double m2 = 0, m3 = 0, m4 = 0;
    for (double x : v) {
        m2 += std::pow(x - 4.0, 2) / 5;
        m3 += std::pow(x - 4.0, 3) / 5;
        m4 += std::pow(x - 4.0, 4) / 5;
    }
    const Moments m = moments(v);
    EXPECT_EQ(m.mean, 4.0);
    EXPECT_NEAR(m.std, std::sqrt(m2), 1e-15);
    EXPECT_NEAR(m.skewness, m3 / std::pow(m2, 1.5), 1e-14);
    EXPECT_NEAR(m.kurtosis, m4 / (m2 * m2) - 3.0, 1e-14);
}

TEST(Evaluate, PerfectSamplesGiveZeroErrors) {
    Series s = noisy_series(8, 20, 8);
    for (std::size_t d = 0; d < s.truth.size(); ++d) s.batches[d].assign(20, s.truth[d]);
    const MetricsReport r = evaluate(s.dates, s.truth, s.batches, default_slices(), PricingContext{});
    EXPECT_EQ(r.overall_mape_pct, 0.0);
    for (const auto& sl : r.slices) {
        EXPECT_EQ(sl.mape_pct, 0.0);
        EXPECT_EQ(sl.ci.mean_width, 0.0);
        EXPECT_EQ(sl.ci.std_width, 0.0);
        EXPECT_EQ(sl.ci.breach_pct, 0.0);
    }
    EXPECT_NEAR(r.mean_generated_phi, r.mean_truth_phi, 1e-15);
}

TEST(Evaluate, OverallIsMeanOfDaily) {
    const Series s = noisy_series(12, 20, 9);
    const MetricsReport r = evaluate(s.dates, s.truth, s.batches, default_slices(), PricingContext{});
    double acc = 0.0;
    for (const auto& d : r.daily) acc += d.surface_mape;
    EXPECT_NEAR(r.overall_mape_pct, 100.0 * acc / r.daily.size(), 1e-12);
    ASSERT_EQ(r.slices.size(), 12u);
    EXPECT_TRUE(r.slices[0].real_moments.has_value());
}

TEST(Evaluate, InvariantUnderSamplePermutation) {
    Series s = noisy_series(10, 25, 10);
    const MetricsReport a = evaluate(s.dates, s.truth, s.batches, default_slices(), PricingContext{});
    std::mt19937_64 rng(11);
    for (auto& b : s.batches) std::shuffle(b.begin(), b.end(), rng);
    const MetricsReport b = evaluate(s.dates, s.truth, s.batches, default_slices(), PricingContext{});
    EXPECT_NEAR(a.overall_mape_pct, b.overall_mape_pct, 1e-12);
    EXPECT_NEAR(a.mean_generated_phi, b.mean_generated_phi, 1e-12);
    for (std::size_t i = 0; i < a.slices.size(); ++i) {
        EXPECT_NEAR(a.slices[i].mape_pct, b.slices[i].mape_pct, 1e-10);
        EXPECT_EQ(a.slices[i].ci.breach_pct, b.slices[i].ci.breach_pct);
        EXPECT_NEAR(a.slices[i].ci.mean_width, b.slices[i].ci.mean_width, 1e-15);
    }
}

TEST(Align, GroupsByDateAndReportsOffenders) {
    std::mt19937_64 rng(12);
    std::vector<DatedSurface> truth{{"2021-01-04", random_surface(rng)}, {"2021-01-05", random_surface(rng)}};
    std::vector<SampleRow> rows;
    for (int i = 0; i < 3; ++i) rows.push_back({"2021-01-05", i, random_surface(rng)});
    for (int i = 0; i < 3; ++i) rows.push_back({"2021-01-04", i, random_surface(rng)});
    const AlignedData a = align_samples(truth, rows);
    ASSERT_EQ(a.dates.size(), 2u);
    EXPECT_EQ(a.dates[0], "2021-01-05");
    EXPECT_EQ(a.truth[0], truth[1].surface);
    EXPECT_EQ(a.batches[1][2], rows[5].surface);

    rows.push_back({"2022-02-02", 0, random_surface(rng)});
    try {
        align_samples(truth, rows);
        FAIL();
    } catch (const InputError& e) {
        EXPECT_NE(std::string(e.what()).find("2022-02-02"), std::string::npos);
    }
}

}  // namespace
}  // namespace ivdiff
