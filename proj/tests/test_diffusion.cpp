#include "ivdiff/diffusion.hpp"
#include "ivdiff/grid.hpp"
#include "ivdiff/random.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

namespace ivdiff {
namespace {

double cosine_f(double t, double n) {
    const double c = std::cos((t / n + 0.008) / 1.008 * std::numbers::pi / 2.0);
    return c * c;
}

SurfaceRow random_row(Rng& rng) {
    SurfaceRow r;
    fill_normal(rng, r);
    return r;
}

TEST(Schedule, CosineShape) {
    const NoiseSchedule s = build_cosine_schedule(500);
    EXPECT_EQ(s.steps(), 500);
    EXPECT_EQ(s.alpha_bar(0), 1.0);
    EXPECT_LT(s.alpha_bar(1), 1.0);
    for (int t = 2; t <= 500; ++t) EXPECT_LT(s.alpha_bar(t), s.alpha_bar(t - 1));
    EXPECT_GT(s.alpha_bar(500), 0.0);
    EXPECT_LT(s.alpha_bar(500), 0.01);
    for (int t = 1; t <= 500; ++t) {
        EXPECT_GT(s.beta(t), 0.0);
        EXPECT_LE(s.beta(t), 0.999);
    }
    EXPECT_NEAR(s.alpha_bar(250), cosine_f(250, 500) / cosine_f(0, 500), 1e-12);
    EXPECT_NEAR(s.alpha_bar(250),
                std::pow(std::cos(0.508 / 1.008 * std::numbers::pi / 2), 2) /
                    std::pow(std::cos(0.008 / 1.008 * std::numbers::pi / 2), 2),
                1e-12);
    EXPECT_THROW(s.beta(0), InputError);
    EXPECT_THROW(s.alpha_bar(501), InputError);
}

TEST(Schedule, SnrWeight) {
    const NoiseSchedule half(Eigen::VectorXd::Constant(1, 0.5));
    EXPECT_NEAR(snr_weight(1, half), 1.0, 1e-7);
    const NoiseSchedule high(Eigen::VectorXd::Constant(1, 0.01));
    EXPECT_NEAR(snr_weight(1, high), 99.0, 1e-4);
}

TEST(Forward, ZeroNoiseAndIdentityLimit) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(1);
    const SurfaceRow x0 = random_row(rng);
    const SurfaceRow zero = SurfaceRow::Zero();
    EXPECT_EQ(forward_sample(x0, 100, zero, s), SurfaceRow(std::sqrt(s.alpha_bar(100)) * x0));
    const NoiseSchedule tiny(Eigen::VectorXd::Constant(3, 1e-14));
    const SurfaceRow eps = random_row(rng);
    EXPECT_LT((forward_sample(x0, 1, eps, tiny) - x0).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Forward, DenoiseRoundTripAtRepresentativeSteps) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(2);
    for (int t : {1, 125, 250, 375}) {
        for (int n = 0; n < 20; ++n) {
            const SurfaceRow x0 = random_row(rng), eps = random_row(rng);
            const SurfaceRow xt = forward_sample(x0, t, eps, s);
            EXPECT_LT((denoised_estimate(xt, eps, t, s, false) - x0).cwiseAbs().maxCoeff(), 1e-12) << t;
        }
    }
}

TEST(Forward, DenoiseWithZeroPrediction) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(3);
    const SurfaceRow xt = random_row(rng);
    EXPECT_EQ(denoised_estimate(xt, SurfaceRow::Zero(), 5, s, false), SurfaceRow(xt / std::sqrt(s.alpha_bar(5))));
    const SurfaceRow clipped = denoised_estimate(xt * 100.0, SurfaceRow::Zero(), 400, s);
    EXPECT_LE(clipped.cwiseAbs().maxCoeff(), kClipBound);
}

TEST(Reverse, FinalStepWithOracleRecoversTarget) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(4);
    const SurfaceRow x0 = random_row(rng), eps = random_row(rng);
    const SurfaceRow x1 = forward_sample(x0, 1, eps, s);
    const SurfaceRow oracle = (x1 - std::sqrt(s.alpha_bar(1)) * x0) / std::sqrt(1.0 - s.alpha_bar(1));
    EXPECT_LT((reverse_step(x1, oracle, 1, SurfaceRow::Zero(), s) - x0).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_THROW(reverse_step(x1, oracle, 1, SurfaceRow::Ones(), s), InputError);
}

TEST(Reverse, VanishingBetaLeavesStateUnchanged) {
    const NoiseSchedule tiny(Eigen::VectorXd::Constant(4, 1e-14));
    Rng rng(5);
    const SurfaceRow x = random_row(rng), e = random_row(rng);
    EXPECT_LT((reverse_step(x, e, 3, SurfaceRow::Zero(), tiny) - x).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Reverse, OracleChainRecoversCleanSurface) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(6);
    const SurfaceRow x0 = random_row(rng).cwiseMax(-3.0).cwiseMin(3.0);
    SurfaceRow x = random_row(rng);
    for (int t = 500; t >= 1; --t) {
        const double ab = s.alpha_bar(t);
        const SurfaceRow eps_hat = (x - std::sqrt(ab) * x0) / std::sqrt(1.0 - ab);
        x = reverse_step(x, eps_hat, t, SurfaceRow::Zero(), s);
    }
    EXPECT_LT((x - x0).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Reverse, PosteriorVariance) {
    const NoiseSchedule s = build_cosine_schedule(50);
    EXPECT_EQ(s.posterior_variance(1), 0.0);
    for (int t = 2; t <= 50; ++t) {
        const double want = (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t)) * s.beta(t);
        EXPECT_NEAR(s.posterior_variance(t), want, 1e-15);
    }
}

TEST(Terminal, Formula) {
    const TerminalDiagnostic zero = terminal_diagnostic(0.0, 81.0, 81);
    EXPECT_EQ(zero.expected_kl, 0.0);
    EXPECT_EQ(zero.tv_bound, 0.0);
    const double ab = 1e-4;
    const double kl = 40.5 * (-std::log(1.0 - ab) - ab) + 0.5 * ab * 81.0;
    const TerminalDiagnostic d = terminal_diagnostic(ab, 81.0, 81);
    EXPECT_NEAR(d.expected_kl, kl, 1e-12);
    EXPECT_NEAR(d.tv_bound, std::sqrt(kl / 2.0), 1e-12);
}

TEST(Terminal, BatchUsesMeanSquaredNorm) {
    const NoiseSchedule s = build_cosine_schedule(500);
    Rng rng(7);
    Eigen::MatrixXd x(50, 81);
    fill_normal(rng, x);
    const double msq = x.rowwise().squaredNorm().mean();
    const TerminalDiagnostic a = terminal_diagnostic(x, s);
    const TerminalDiagnostic b = terminal_diagnostic(s.alpha_bar(500), msq, 81);
    EXPECT_NEAR(a.expected_kl, b.expected_kl, 1e-15);
    EXPECT_LT(a.tv_bound, 0.1);
}

}  // namespace
}  // namespace ivdiff
