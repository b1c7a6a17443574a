#include "fixtures.hpp"
#include "ivdiff/errors.hpp"
#include "ivdiff/sampling.hpp"

#include <gtest/gtest.h>

#include <limits>

namespace ivdiff {
namespace {

struct SamplingSetup {
    testing::TrainingSetup setup{testing::synthetic_dataset(60, 31), 20};
    Checkpoint ckpt = setup.checkpoint(param_init(setup.ctx.unet, 32));
    const ConditioningBundle& bundle() const { return setup.data.test.front().bundle; }
};

TEST(ReverseChain, OraclePredictorRecoversTarget) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(1);
    Eigen::MatrixXd x0(3, 81), x(3, 81);
    fill_normal(rng, x0);
    x0 = x0.cwiseMax(-3.0).cwiseMin(3.0);
    fill_normal(rng, x);
    auto oracle = [&](const Eigen::MatrixXd& xt, int t) {
        const double ab = s.alpha_bar(t);
        return Eigen::MatrixXd((xt - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab));
    };
    auto zero = [](int) { return Eigen::MatrixXd::Zero(3, 81).eval(); };
    EXPECT_LT((run_reverse_chain(x, s, oracle, zero) - x0).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(ReverseChain, NonFinitePredictionNamesStep) {
    const NoiseSchedule s = build_cosine_schedule(10);
    auto bad = [](const Eigen::MatrixXd& xt, int t) {
        Eigen::MatrixXd e = Eigen::MatrixXd::Zero(xt.rows(), xt.cols());
        if (t == 7) e(0, 0) = std::numeric_limits<double>::quiet_NaN();
        return e;
    };
    auto zero = [](int) { return Eigen::MatrixXd::Zero(1, 81).eval(); };
    try {
        run_reverse_chain(Eigen::MatrixXd::Zero(1, 81), s, bad, zero);
        FAIL() << "expected divergence";
    } catch (const DivergenceError& e) {
        EXPECT_NE(std::string(e.what()).find("t = 7"), std::string::npos);
    }
}

TEST(Sampling, SameSeedSameSurface) {
    const SamplingSetup s;
    const Surface a = sample_one(s.bundle(), s.ckpt, 5), b = sample_one(s.bundle(), s.ckpt, 5);
    EXPECT_EQ(a, b);
    EXPECT_NE(a, sample_one(s.bundle(), s.ckpt, 6));
}

TEST(Sampling, SingleChainBatchIsSampleOne) {
    const SamplingSetup s;
    const SampleBatch b = sample_batch(s.bundle(), s.ckpt, 1, 11);
    ASSERT_EQ(b.surfaces.size(), 1u);
    EXPECT_EQ(b.surfaces[0], sample_one(s.bundle(), s.ckpt, 11));
}

TEST(Sampling, BatchIsReproducibleDistinctAndPositive) {
    const SamplingSetup s;
    const SampleBatch a = sample_batch(s.bundle(), s.ckpt, 12, 3);
    const SampleBatch b = sample_batch(s.bundle(), s.ckpt, 12, 3);
    ASSERT_EQ(a.surfaces.size(), 12u);
    for (std::size_t i = 0; i < 12; ++i) {
        EXPECT_EQ(a.surfaces[i], b.surfaces[i]);
        EXPECT_GT(a.surfaces[i].minCoeff(), 0.0);
        EXPECT_EQ(a.penalties[i].total, penalty_loops(a.surfaces[i], GridSpec{}, s.ckpt.pricing).total);
        for (std::size_t j = 0; j < i; ++j) EXPECT_NE(a.surfaces[i], a.surfaces[j]);
    }
}

TEST(Sampling, ThreadCountOnlyChangesRounding) {
    const SamplingSetup s;
    const SampleBatch one = sample_batch(s.bundle(), s.ckpt, 6, 4, GridSpec{}, {1, false});
    const SampleBatch three = sample_batch(s.bundle(), s.ckpt, 6, 4, GridSpec{}, {3, false});
    for (std::size_t i = 0; i < 6; ++i)
        EXPECT_LT(((one.surfaces[i] - three.surfaces[i]).array() / one.surfaces[i].array()).abs().maxCoeff(), 1e-12);
}

TEST(Sampling, LiveWeightsDifferFromEma) {
    SamplingSetup s;
    s.ckpt.params.ema.get("out.conv.bias").mutable_data()[0] += 0.5;
    const Surface ema = sample_one(s.bundle(), s.ckpt, 9);
    const Surface live = sample_one(s.bundle(), s.ckpt, 9, GridSpec{}, {1, true});
    EXPECT_NE(ema, live);
}

TEST(Sampling, RejectsBadArguments) {
    const SamplingSetup s;
    EXPECT_THROW(sample_batch(s.bundle(), s.ckpt, 0, 1), InputError);
    ConditioningBundle bad = s.bundle();
    bad.scalars[0] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(sample_one(bad, s.ckpt, 1), InputError);
}

}  // namespace
}  // namespace ivdiff
