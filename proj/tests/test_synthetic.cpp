#include "ivdiff/arbitrage.hpp"
#include "ivdiff/errors.hpp"
#include "ivdiff/synthetic.hpp"

#include <gtest/gtest.h>

namespace ivdiff {
namespace {

TEST(Synthetic, SameSeedIsBitwiseIdentical) {
    const auto a = synthetic_generate(120, 9, GridSpec{});
    const auto b = synthetic_generate(120, 9, GridSpec{});
    ASSERT_EQ(a.size(), b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].date, b[i].date);
        EXPECT_EQ(a[i].surface, b[i].surface);
        EXPECT_EQ(a[i].underlying_return, b[i].underlying_return);
        EXPECT_EQ(a[i].vix_return, b[i].vix_return);
    }
    const auto c = synthetic_generate(120, 10, GridSpec{});
    EXPECT_NE(a[50].surface, c[50].surface);
}

TEST(Synthetic, ValuesInsideClampRange) {
    for (const auto& d : synthetic_generate(300, 1, GridSpec{})) {
        EXPECT_GT(d.surface.minCoeff(), 0.01);
        EXPECT_LT(d.surface.maxCoeff(), 2.0);
        EXPECT_TRUE(std::isfinite(d.underlying_return));
        EXPECT_TRUE(std::isfinite(d.vix_return));
    }
}

TEST(Synthetic, PenaltyIsBoundedButPresent) {
    const SyntheticConfig cfg;
    double total = 0.0;
    const auto days = synthetic_generate(200, 2, GridSpec{}, cfg);
    for (const auto& d : days) {
        const double phi = penalty_loops(d.surface, GridSpec{}, cfg.pricing).total;
        EXPECT_LE(phi, cfg.max_penalty);
        total += phi;
    }
    EXPECT_GT(total, 0.0);
    EXPECT_LT(total / days.size(), 0.2 * cfg.max_penalty);
}

TEST(Synthetic, DatesSkipWeekends) {
    const auto d = business_dates(7);
    EXPECT_EQ(d.front(), "2000-01-03");
    EXPECT_EQ(d[4], "2000-01-07");
    EXPECT_EQ(d[5], "2000-01-10");
}

TEST(Synthetic, TooFewDaysIsError) {
    EXPECT_THROW(synthetic_generate(49, 1, GridSpec{}), InputError);
}

}  // namespace
}  // namespace ivdiff
