#pragma once

// Composite training loss, AdamW with global-norm clipping, EMA tracking, the
// plateau learning-rate schedule, and the epoch loop with early stopping.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/diffusion.hpp"
#include "ivdiff/model.hpp"
#include "ivdiff/random.hpp"

#include <functional>
#include <limits>
#include <optional>
#include <span>
#include <vector>

namespace ivdiff {

struct TrainConfig {
    double lambda = 0.01;
    /// Per-component overrides of lambda for p1 / p2 / p3.
    std::optional<double> lambda_calendar;
    std::optional<double> lambda_spread;
    std::optional<double> lambda_butterfly;
    int epochs = 2000;
    int batch_size = 64;
    int diffusion_steps = 500;
    double lr = 3e-4;
    double plateau_factor = 0.8;
    int plateau_patience = 300;
    double lr_min = 1e-6;
    double grad_clip = 0.15;
    double ema_decay = 0.995;
    int early_stop_patience = 500;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 0.0;
    std::uint64_t seed = 0;

    double weight_calendar() const { return lambda_calendar.value_or(lambda); }
    double weight_spread() const { return lambda_spread.value_or(lambda); }
    double weight_butterfly() const { return lambda_butterfly.value_or(lambda); }
    void validate() const;
};

/// Everything the loss needs besides the parameters.
struct LossContext {
    const NoiseSchedule* schedule = nullptr;
    const NormalizationStats* stats = nullptr;
    GridSpec grid;
    PricingContext pricing;
    UNetConfig unet;
};

/// Diffusion steps and standard normal noise for a batch (one row per sample).
struct NoiseDraw {
    std::vector<int> steps;
    Eigen::MatrixXd noise;  // N x 81
};

NoiseDraw draw_noise(std::size_t n, int diffusion_steps, Rng& rng);

struct LossTerms {
    Array total;  // scalar
    Array mse;    // scalar
    Array arb;    // scalar, already multiplied by the lambdas
};

/// [N, 4, 9, 9] network input: the three conditioning channels and x_t.
Array assemble_inputs(std::span<const TrainingExample* const> batch, const Eigen::MatrixXd& x_t);

/// x_t rows for the batch targets under the draw.
Eigen::MatrixXd noisy_targets(std::span<const TrainingExample* const> batch, const NoiseDraw& draw,
                              const NoiseSchedule& schedule);

/// Loss terms given a noise prediction [N, 1, 9, 9]. `denominator` is the
/// number of samples the terms are averaged over (N for a whole batch, larger
/// for one shard of a batch).
LossTerms loss_from_prediction(Tape& tape, const Array& eps_hat, const Eigen::MatrixXd& x_t,
                               const NoiseDraw& draw, const LossContext& ctx,
                               const TrainConfig& cfg, Index denominator);

/// mean((eps - eps_hat)^2) + mean_i(w_SNR(t_i) * sum_k lambda_k p_k(InvTransform(x0_hat_i))).
LossTerms composite_loss(Tape& tape, std::span<const TrainingExample* const> batch,
                         const NoiseDraw& draw, const ParamSet& params, const LossContext& ctx,
                         const TrainConfig& cfg);

struct LossValues {
    double total = 0.0, mse = 0.0, arb = 0.0;
};

/// Loss values and parameter gradients (in ParamSet order), with the batch
/// split over `threads` tapes whose gradients are summed in shard order.
LossValues loss_and_gradients(std::span<const TrainingExample* const> batch,
                              const NoiseDraw& draw, const ParamSet& params,
                              const LossContext& ctx, const TrainConfig& cfg, int threads,
                              std::vector<Eigen::VectorXd>& grads);

/// Scales the gradients so that their joint L2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_global_norm(std::vector<Eigen::VectorXd>& grads, double max_norm);

struct OptimizerState {
    std::vector<Eigen::VectorXd> m, v;
    long step = 0;
    double lr = 3e-4;

    static OptimizerState for_params(const ParamSet& params, double lr);
};

/// One decoupled-weight-decay Adam update.
void adamw_update(ParamSet& params, const std::vector<Eigen::VectorXd>& grads,
                  OptimizerState& opt, const TrainConfig& cfg);

/// ema <- decay * ema + (1 - decay) * live.
void ema_update(ParamSet& ema, const ParamSet& live, double decay);

struct StepRecord {
    LossValues loss;
    double grad_norm = 0.0;  // before clipping
};

/// Gradient, clipping, optimizer step, then EMA update.
StepRecord train_step(std::span<const TrainingExample* const> batch, const NoiseDraw& draw,
                      ParamStore& store, OptimizerState& opt, const LossContext& ctx,
                      const TrainConfig& cfg, int threads);

/// Reduce-on-plateau with strict improvement: after `patience` consecutive
/// epochs without a new best, lr becomes max(lr * factor, lr_min) and the
/// counter restarts.
class PlateauScheduler {
public:
    PlateauScheduler(double lr, const TrainConfig& cfg)
        : lr_(lr), factor_(cfg.plateau_factor), patience_(cfg.plateau_patience), min_(cfg.lr_min) {}
    double step(double val_loss);
    double lr() const { return lr_; }

private:
    double lr_, factor_;
    int patience_;
    double min_;
    double best_ = std::numeric_limits<double>::infinity();
    int bad_epochs_ = 0;
};

/// Learning rate after replaying a validation-loss history from `lr`.
double lr_plateau(std::span<const double> history, double lr, const TrainConfig& cfg);

/// Mean squared noise-prediction error on `examples` with fixed per-example
/// draws derived from `seed`.
double validation_loss(std::span<const TrainingExample> examples, const ParamSet& params,
                       const LossContext& ctx, const TrainConfig& cfg, std::uint64_t seed,
                       int threads);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0, train_mse = 0.0, train_arb = 0.0;
    double val_loss = 0.0;
    double lr = 0.0;
};

struct FitResult {
    ParamStore best;        // live and EMA parameters at the best validation epoch
    int best_epoch = 0;
    double best_val = 0.0;
    std::vector<EpochRecord> history;
    bool stopped_early = false;
    /// Set when training hit non-finite values; `best` holds the last good state.
    std::optional<std::string> divergence;
};

struct FitOptions {
    int threads = 1;
    std::function<void(const EpochRecord&)> on_epoch;
};

FitResult fit(const PreparedData& data, const TrainConfig& cfg, const LossContext& ctx,
              ParamStore init, const FitOptions& options = {});

}  // namespace ivdiff
