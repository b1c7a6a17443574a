#include "fixtures.hpp"
#include "ivdiff/arbitrage.hpp"
#include "ivdiff/checkpoint.hpp"
#include "ivdiff/csv_io.hpp"
#include "ivdiff/errors.hpp"
#include "ivdiff/training.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <cmath>

namespace ivdiff {
namespace {

using testing::TrainingSetup;

TrainingSetup small_setup(int steps = 50) { return TrainingSetup(testing::synthetic_dataset(60, 21), steps); }

Array predict(const TrainingSetup& s, std::span<const TrainingExample* const> batch, const NoiseDraw& draw,
              const ParamSet& p) {
    const Eigen::MatrixXd x_t = noisy_targets(batch, draw, *s.schedule);
    const Index n = static_cast<Index>(batch.size());
    Eigen::VectorXd sc(n * 5);
    for (Index i = 0; i < n; ++i) sc.segment(i * 5, 5) = batch[i]->bundle.scalars;
    Tape tape(Tape::Mode::kInference);
    return unet_forward(tape, assemble_inputs(batch, x_t), draw.steps, Array({n, 5}, sc), p, s.ctx.unet);
}

TEST(Loss, ZeroLambdaIsPureMse) {
    TrainingSetup s = small_setup();
    s.cfg.lambda = 0.0;
    const auto batch = s.batch(6);
    Rng rng(1);
    const NoiseDraw draw = draw_noise(batch.size(), s.cfg.diffusion_steps, rng);
    const ParamStore p = param_init(s.ctx.unet, 2);
    Tape tape;
    const LossTerms t = composite_loss(tape, batch, draw, p.live, s.ctx, s.cfg);
    EXPECT_EQ(t.total.item(), t.mse.item());
    EXPECT_EQ(t.arb.item(), 0.0);
}

TEST(Loss, OracleNoiseLeavesOnlyArbitrageTerm) {
    TrainingSetup s = small_setup();
    const auto batch = s.batch(8);
    Rng rng(3);
    const NoiseDraw draw = draw_noise(batch.size(), s.cfg.diffusion_steps, rng);
    const Eigen::MatrixXd x_t = noisy_targets(batch, draw, *s.schedule);
    Eigen::VectorXd flat(draw.noise.size());
    for (Index i = 0; i < draw.noise.rows(); ++i) flat.segment(i * 81, 81) = draw.noise.row(i).transpose();
    Tape tape;
    const LossTerms t = loss_from_prediction(tape, Array({8, 1, 9, 9}, flat), x_t, draw, s.ctx, s.cfg, 8);
    EXPECT_EQ(t.mse.item(), 0.0);
    double want = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Surface iv = denormalize(batch[i]->target, s.data.stats);
        want += snr_weight(draw.steps[i], *s.schedule) * penalty_loops(iv, s.ctx.grid, s.ctx.pricing).total;
    }
    want *= s.cfg.lambda / 8.0;
    EXPECT_NEAR(t.total.item(), want, 1e-10 * std::max(1.0, want));
}

TEST(Loss, MatchesScalarRecomputation) {
    TrainingSetup s = small_setup();
    s.cfg.lambda = 0.5;
    const auto batch = s.batch(5);
    Rng rng(4);
    const NoiseDraw draw = draw_noise(batch.size(), s.cfg.diffusion_steps, rng);
    const ParamStore p = param_init(s.ctx.unet, 5);
    Tape tape;
    const LossTerms t = composite_loss(tape, batch, draw, p.live, s.ctx, s.cfg);

    const Array eps_hat = predict(s, batch, draw, p.live);
    double mse = 0.0, arb = 0.0;
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const int step = draw.steps[i];
        const double ab = s.schedule->alpha_bar(step);
        Surface iv;
        for (Index k = 0; k < 81; ++k) {
            const double e = draw.noise(i, k), eh = eps_hat[i * 81 + k];
            const double x0 = batch[i]->target.data()[k];
            const double xt = std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * e;
            mse += (eh - e) * (eh - e);
            double x0_hat = (xt - std::sqrt(1.0 - ab) * eh) / std::sqrt(ab);
            x0_hat = std::min(5.0, std::max(-5.0, x0_hat));
            iv.data()[k] = std::exp(x0_hat * s.data.stats.std.data()[k] + s.data.stats.mean.data()[k]);
        }
        const double w = ab / (1.0 - ab + 1e-8);
        arb += w * s.cfg.lambda * penalty_loops(iv, s.ctx.grid, s.ctx.pricing).total;
    }
    mse /= 5.0 * 81.0;
    arb /= 5.0;
    EXPECT_NEAR(t.mse.item(), mse, 1e-12 * mse);
    EXPECT_NEAR(t.arb.item(), arb, 1e-9 * std::max(arb, 1e-6));
    EXPECT_NEAR(t.total.item(), mse + arb, 1e-9 * (mse + arb));
}

TEST(Loss, ShardedGradientsMatchSingleTape) {
    TrainingSetup s = small_setup();
    const auto batch = s.batch(7);
    Rng rng(6);
    const NoiseDraw draw = draw_noise(batch.size(), s.cfg.diffusion_steps, rng);
    const ParamStore p = param_init(s.ctx.unet, 7);
    std::vector<Eigen::VectorXd> g1, g3;
    const LossValues v1 = loss_and_gradients(batch, draw, p.live, s.ctx, s.cfg, 1, g1);
    const LossValues v3 = loss_and_gradients(batch, draw, p.live, s.ctx, s.cfg, 3, g3);
    EXPECT_NEAR(v1.total, v3.total, 1e-12 * v1.total);
    for (std::size_t k = 0; k < g1.size(); ++k)
        EXPECT_LT((g1[k] - g3[k]).cwiseAbs().maxCoeff(), 1e-10 * std::max(1.0, g1[k].cwiseAbs().maxCoeff()));
    std::vector<Eigen::VectorXd> again;
    loss_and_gradients(batch, draw, p.live, s.ctx, s.cfg, 3, again);
    for (std::size_t k = 0; k < g3.size(); ++k) EXPECT_EQ(g3[k], again[k]);
}

TEST(Loss, GradientMatchesFiniteDifferencesWithPenalty) {
    TrainingSetup s = small_setup();
    s.cfg.lambda = 1.0;
    const auto batch = s.batch(3);
    Rng rng(8);
    NoiseDraw draw = draw_noise(batch.size(), s.cfg.diffusion_steps, rng);
    draw.steps = {2, 5, 11};  // high SNR, so the penalty term carries weight
    const ParamStore p = param_init(s.ctx.unet, 9);
    std::mt19937_64 pick_rng(10);
    std::vector<std::pair<std::size_t, Index>> picks;
    for (std::size_t a = 0; a < p.live.size(); ++a) {
        std::uniform_int_distribution<Index> d(0, p.live.arrays()[a].size() - 1);
        for (int k = 0; k < 3; ++k) picks.emplace_back(a, d(pick_rng));
    }
    // The penalty's value carries about 1e-13 of rounding (differences of
    // nearly equal prices), so central differences at h = 1e-4 are accurate
    // to about 1e-9 absolute; the floor admits 1e-8.
    const double err = testing::max_gradient_error(
        [&](Tape& t, const std::vector<Array>&) { return composite_loss(t, batch, draw, p.live, s.ctx, s.cfg).total; },
        p.live.arrays(), 1e-4, picks, 1e-4);
    EXPECT_LT(err, 1e-4);
}

TEST(Clip, HalvesNormPointThree) {
    std::vector<Eigen::VectorXd> g{Eigen::Vector2d(0.18, 0.0), Eigen::VectorXd::Constant(1, 0.24)};
    EXPECT_NEAR(clip_global_norm(g, 0.15), 0.30, 1e-15);
    EXPECT_NEAR(g[0][0], 0.09, 1e-15);
    EXPECT_NEAR(g[1][0], 0.12, 1e-15);
}

TEST(Clip, NeverExceedsBound) {
    std::mt19937_64 rng(11);
    std::lognormal_distribution<double> scale(0.0, 3.0);
    for (int n = 0; n < 1000; ++n) {
        std::vector<Eigen::VectorXd> g{testing::random_vector(5, rng) * scale(rng), testing::random_vector(17, rng) * scale(rng)};
        clip_global_norm(g, 0.15);
        EXPECT_LE(std::sqrt(g[0].squaredNorm() + g[1].squaredNorm()), 0.15 + 1e-12);
    }
}

ParamSet tiny_set(double v) {
    ParamSet p;
    p.add("a", Array({3}, Eigen::Vector3d::Constant(v), true));
    return p;
}

TEST(Ema, LimitsAndGeometricConvergence) {
    ParamSet ema = tiny_set(1.0), live = tiny_set(3.0);
    ema_update(ema, live, 0.0);
    EXPECT_EQ(ema.get("a").data(), live.get("a").data());
    ema = tiny_set(1.0);
    ema_update(ema, live, 1.0);
    EXPECT_EQ(ema.get("a")[0], 1.0);
    // e_k = theta + beta^k (e_0 - theta) for constant theta.
    ema = tiny_set(1.0);
    for (int k = 1; k <= 1000; ++k) {
        ema_update(ema, live, 0.995);
        EXPECT_NEAR(ema.get("a")[0], 3.0 + std::pow(0.995, k) * (1.0 - 3.0), 1e-12);
    }
}

TEST(TrainStep, ZeroGradientLeavesParameters) {
    ParamSet p = tiny_set(0.7);
    OptimizerState opt = OptimizerState::for_params(p, 1e-3);
    adamw_update(p, {Eigen::Vector3d::Zero()}, opt, TrainConfig{});
    EXPECT_EQ(p.get("a").data(), Eigen::Vector3d::Constant(0.7));
    EXPECT_EQ(opt.step, 1);
}

TEST(TrainStep, AdamFirstStepMovesByLearningRate) {
    ParamSet p = tiny_set(0.0);
    OptimizerState opt = OptimizerState::for_params(p, 1e-3);
    adamw_update(p, {Eigen::Vector3d(2.0, -0.5, 1e-3)}, opt, TrainConfig{});
    // Bias-corrected first step: -lr * g / (|g| + eps).
    EXPECT_NEAR(p.get("a")[0], -1e-3 * 2.0 / (2.0 + 1e-8), 1e-15);
    EXPECT_NEAR(p.get("a")[1], 1e-3 * 0.5 / (0.5 + 1e-8), 1e-15);
}

TEST(TrainStep, DescendsOnFixedBatch) {
    TrainingSetup s = small_setup();
    s.cfg.lambda = 0.0;
    s.cfg.lr = 1e-5;
    const auto batch = s.batch(8);
    Rng rng(12);
    const NoiseDraw draw = draw_noise(batch.size(), s.cfg.diffusion_steps, rng);
    ParamStore p = param_init(s.ctx.unet, 13);
    OptimizerState opt = OptimizerState::for_params(p.live, s.cfg.lr);
    const StepRecord r = train_step(batch, draw, p, opt, s.ctx, s.cfg, 1);
    Tape tape(Tape::Mode::kInference);
    const double after = composite_loss(tape, batch, draw, p.live, s.ctx, s.cfg).total.item();
    EXPECT_LT(after, r.loss.total);
    // EMA moved off its start but does not equal the live weights.
    EXPECT_NE(p.ema.get("enc1.conv.weight").data(), p.live.get("enc1.conv.weight").data());
}

TEST(Plateau, DecreasingHistoryKeepsRate) {
    std::vector<double> h;
    for (int i = 0; i < 1000; ++i) h.push_back(1.0 - 1e-4 * i);
    EXPECT_EQ(lr_plateau(h, 3e-4, TrainConfig{}), 3e-4);
}

TEST(Plateau, FlatEpochsAfterBestReduceOnce) {
    const TrainConfig cfg;
    EXPECT_EQ(lr_plateau(std::vector<double>(300, 1.0), 3e-4, cfg), 3e-4);
    EXPECT_NEAR(lr_plateau(std::vector<double>(301, 1.0), 3e-4, cfg), 2.4e-4, 1e-18);
    EXPECT_NEAR(lr_plateau(std::vector<double>(601, 1.0), 3e-4, cfg), 3e-4 * 0.64, 1e-18);
    EXPECT_EQ(lr_plateau(std::vector<double>(100000, 1.0), 3e-4, cfg), 1e-6);
}

TEST(Checkpoint, SaveLoadSaveIsFixedPoint) {
    TrainingSetup s = small_setup(20);
    const Checkpoint c = s.checkpoint(param_init(s.ctx.unet, 14));
    const std::string dir = testing::temp_dir("ckpt");
    save_checkpoint(c, dir + "/a.json");
    const Checkpoint back = load_checkpoint(dir + "/a.json");
    save_checkpoint(back, dir + "/b.json");
    EXPECT_EQ(read_file(dir + "/a.json"), read_file(dir + "/b.json"));
    EXPECT_EQ(back.params.live.get("dec1.conv.weight").data(), c.params.live.get("dec1.conv.weight").data());
    EXPECT_EQ(back.schedule.alpha_bars(), c.schedule.alpha_bars());
    EXPECT_THROW(checkpoint_from_string("{\"format\": \"other\"}"), InputError);
}

TEST(Fit, SmokeRunOnTenDays) {
    ConditioningConfig cc;
    cc.surface_span_short = 2.0;
    cc.surface_span_long = 5.0;
    TrainingSetup s(testing::synthetic_dataset(10, 15, cc), 20);
    ASSERT_FALSE(s.data.train.empty());
    ASSERT_FALSE(s.data.validation.empty());
    s.cfg.epochs = 1;
    const FitResult r = fit(s.data, s.cfg, s.ctx, param_init(s.ctx.unet, 16));
    ASSERT_EQ(r.history.size(), 1u);
    EXPECT_FALSE(r.divergence);
    EXPECT_EQ(r.best_epoch, 1);
    // Validation uses the EMA weights.
    EXPECT_EQ(r.history[0].val_loss, validation_loss(s.data.validation, r.best.ema, s.ctx, s.cfg,
                                                     sub_seed(s.cfg.seed, 0x7a2), 1));
    const std::string dir = testing::temp_dir("fit_smoke");
    Checkpoint c = s.checkpoint(r.best);
    save_checkpoint(c, dir + "/ckpt.json");
    EXPECT_NO_THROW(load_checkpoint(dir + "/ckpt.json"));
}

TEST(Fit, EarlyStopAfterPatience) {
    TrainingSetup s = small_setup(20);
    // Frozen weights: a vanishing step, and an EMA that is exact for equal
    // live and shadow values, so the validation loss never improves.
    s.cfg.lr = s.cfg.lr_min = 1e-300;
    s.cfg.ema_decay = 0.5;
    s.cfg.epochs = 50;
    s.cfg.early_stop_patience = 3;
    const FitResult r = fit(s.data, s.cfg, s.ctx, param_init(s.ctx.unet, 17));
    EXPECT_TRUE(r.stopped_early);
    EXPECT_EQ(r.best_epoch, 1);
    EXPECT_EQ(r.history.size(), 4u);
}

TEST(Fit, DivergenceIsReportedWithLastGoodState) {
    TrainingSetup s = small_setup(20);
    s.cfg.lambda = 0.0;
    s.cfg.lr = 1e100;
    s.cfg.epochs = 5;
    s.cfg.batch_size = 4;
    const FitResult r = fit(s.data, s.cfg, s.ctx, param_init(s.ctx.unet, 18));
    ASSERT_TRUE(r.divergence.has_value());
    for (const Array& a : r.best.live.arrays()) EXPECT_TRUE(a.data().allFinite());
}

TEST(Fit, SameSeedSameHistory) {
    TrainingSetup s = small_setup(20);
    s.cfg.epochs = 2;
    s.cfg.batch_size = 8;
    s.cfg.seed = 99;
    const FitResult a = fit(s.data, s.cfg, s.ctx, param_init(s.ctx.unet, 1));
    const FitResult b = fit(s.data, s.cfg, s.ctx, param_init(s.ctx.unet, 1));
    ASSERT_EQ(a.history.size(), b.history.size());
    for (std::size_t i = 0; i < a.history.size(); ++i) {
        EXPECT_EQ(a.history[i].train_loss, b.history[i].train_loss);
        EXPECT_EQ(a.history[i].val_loss, b.history[i].val_loss);
    }
}

}  // namespace
}  // namespace ivdiff
