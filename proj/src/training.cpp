#include "ivdiff/training.hpp"

#include "ivdiff/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <thread>

namespace ivdiff {

namespace {

/// Per-sample constant broadcast over the 81 cells of [N, 1, 9, 9].
Array per_sample(const Eigen::VectorXd& values) {
    const Index n = values.size();
    Eigen::VectorXd data(n * kCells);
    for (Index i = 0; i < n; ++i) {
        data.segment(i * kCells, kCells).setConstant(values[i]);
    }
    return Array({n, 1, kGridSide, kGridSide}, std::move(data));
}

/// A surface repeated for each of n samples, [N, 1, 9, 9].
Array tiled(const Surface& s, Index n) {
    Eigen::VectorXd data(n * kCells);
    for (Index i = 0; i < n; ++i) {
        data.segment(i * kCells, kCells) = flatten(s).transpose();
    }
    return Array({n, 1, kGridSide, kGridSide}, std::move(data));
}

Array rows_to_array(const Eigen::MatrixXd& rows) {
    const Index n = rows.rows();
    Eigen::VectorXd data(n * kCells);
    for (Index i = 0; i < n; ++i) {
        data.segment(i * kCells, kCells) = rows.row(i).transpose();
    }
    return Array({n, 1, kGridSide, kGridSide}, std::move(data));
}

void check_finite(double v, const char* component) {
    if (!std::isfinite(v)) {
        throw DivergenceError(std::string("non-finite ") + component + " loss");
    }
}

/// Contiguous shard boundaries for n items over k workers.
std::vector<std::size_t> shard_bounds(std::size_t n, int workers) {
    const std::size_t k = std::max<std::size_t>(1, std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, workers))));
    std::vector<std::size_t> b(k + 1);
    for (std::size_t i = 0; i <= k; ++i) {
        b[i] = i * n / k;
    }
    return b;
}

NoiseDraw slice_draw(const NoiseDraw& d, std::size_t begin, std::size_t end) {
    NoiseDraw s;
    s.steps.assign(d.steps.begin() + static_cast<std::ptrdiff_t>(begin),
                   d.steps.begin() + static_cast<std::ptrdiff_t>(end));
    s.noise = d.noise.middleRows(static_cast<Index>(begin), static_cast<Index>(end - begin));
    return s;
}

template <typename Fn>
void run_shards(std::size_t shards, Fn&& fn) {
    if (shards == 1) {
        fn(0);
        return;
    }
    std::vector<std::thread> workers;
    std::vector<std::exception_ptr> errors(shards);
    for (std::size_t s = 0; s < shards; ++s) {
        workers.emplace_back([&, s] {
            try {
                fn(s);
            } catch (...) {
                errors[s] = std::current_exception();
            }
        });
    }
    for (auto& w : workers) {
        w.join();
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }
}

}  // namespace

void TrainConfig::validate() const {
    for (double l : {lambda, weight_calendar(), weight_spread(), weight_butterfly()}) {
        if (!(l >= 0.0)) {
            throw InputError("TrainConfig: lambda weights must be >= 0");
        }
    }
    if (epochs < 1 || batch_size < 1 || diffusion_steps < 2) {
        throw InputError("TrainConfig: epochs, batch_size >= 1 and diffusion_steps >= 2 required");
    }
    if (!(lr > 0.0) || !(lr_min > 0.0) || lr_min > lr) {
        throw InputError("TrainConfig: need 0 < lr_min <= lr");
    }
    if (!(plateau_factor > 0.0 && plateau_factor < 1.0) || plateau_patience < 1) {
        throw InputError("TrainConfig: plateau factor in (0, 1) and patience >= 1 required");
    }
    if (!(ema_decay > 0.0 && ema_decay < 1.0)) {
        throw InputError("TrainConfig: ema_decay must lie in (0, 1)");
    }
    if (!(grad_clip > 0.0) || early_stop_patience < 1) {
        throw InputError("TrainConfig: grad_clip > 0 and early_stop_patience >= 1 required");
    }
    if (!(adam_beta1 >= 0.0 && adam_beta1 < 1.0) || !(adam_beta2 >= 0.0 && adam_beta2 < 1.0) ||
        !(adam_eps > 0.0) || weight_decay < 0.0) {
        throw InputError("TrainConfig: invalid optimizer hyperparameters");
    }
}

NoiseDraw draw_noise(std::size_t n, int diffusion_steps, Rng& rng) {
    NoiseDraw d;
    std::uniform_int_distribution<int> step_dist(1, diffusion_steps);
    d.steps.resize(n);
    for (auto& t : d.steps) {
        t = step_dist(rng);
    }
    d.noise.resize(static_cast<Index>(n), kCells);
    std::normal_distribution<double> normal(0.0, 1.0);
    // Row by row so that a sample's noise does not depend on the batch size.
    for (Index i = 0; i < d.noise.rows(); ++i) {
        for (Index k = 0; k < kCells; ++k) {
            d.noise(i, k) = normal(rng);
        }
    }
    return d;
}

Eigen::MatrixXd noisy_targets(std::span<const TrainingExample* const> batch, const NoiseDraw& draw,
                              const NoiseSchedule& schedule) {
    Eigen::MatrixXd x_t(static_cast<Index>(batch.size()), kCells);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        const Index r = static_cast<Index>(i);
        x_t.row(r) = forward_sample(flatten(batch[i]->target), draw.steps[i], draw.noise.row(r), schedule);
    }
    return x_t;
}

Array assemble_inputs(std::span<const TrainingExample* const> batch, const Eigen::MatrixXd& x_t) {
    const Index n = static_cast<Index>(batch.size());
    Eigen::VectorXd data(n * 4 * kCells);
    for (Index i = 0; i < n; ++i) {
        const auto& ch = batch[static_cast<std::size_t>(i)]->bundle.channels;
        for (Index c = 0; c < 3; ++c) {
            data.segment((i * 4 + c) * kCells, kCells) = ch.row(c).transpose();
        }
        data.segment((i * 4 + 3) * kCells, kCells) = x_t.row(i).transpose();
    }
    return Array({n, 4, kGridSide, kGridSide}, std::move(data));
}

LossTerms loss_from_prediction(Tape& tape, const Array& eps_hat, const Eigen::MatrixXd& x_t,
                               const NoiseDraw& draw, const LossContext& ctx,
                               const TrainConfig& cfg, Index denominator) {
    const NoiseSchedule& sched = *ctx.schedule;
    const Index n = x_t.rows();
    if (eps_hat.size() != n * kCells) {
        throw ShapeError("loss_from_prediction: prediction " + shape_string(eps_hat.shape()) +
                         " does not match a batch of " + std::to_string(n));
    }
    const Array eps = rows_to_array(draw.noise);
    const Array diff = sub(tape, eps_hat, eps);
    LossTerms out;
    out.mse = scale(tape, sum(tape, mul(tape, diff, diff)),
                    1.0 / static_cast<double>(denominator * kCells));

    const double lc = cfg.weight_calendar(), ls = cfg.weight_spread(), lf = cfg.weight_butterfly();
    if (lc == 0.0 && ls == 0.0 && lf == 0.0) {
        out.arb = Array::scalar(0.0);
        out.total = out.mse;
        return out;
    }

    // x0_hat = x_t / sqrt(ab) - sqrt(1 - ab) / sqrt(ab) * eps_hat, clipped.
    Eigen::VectorXd coef(n), w(n);
    Eigen::MatrixXd scaled_xt(n, kCells);
    for (Index i = 0; i < n; ++i) {
        const int t = draw.steps[static_cast<std::size_t>(i)];
        const double ab = sched.alpha_bar(t);
        coef[i] = -std::sqrt(1.0 - ab) / std::sqrt(ab);
        scaled_xt.row(i) = x_t.row(i) / std::sqrt(ab);
        w[i] = snr_weight(t, sched);
    }
    const Array x0_hat = clip(tape, add(tape, mul(tape, eps_hat, per_sample(coef)), rows_to_array(scaled_xt)),
                              -kClipBound, kClipBound);
    const Array iv = exp(tape, add(tape, mul(tape, x0_hat, tiled(ctx.stats->std, n)),
                                   tiled(ctx.stats->mean, n)));
    const PenaltyTerms pen = penalty_conv(tape, iv, ctx.grid, ctx.pricing);
    const Array weighted = add(tape, add(tape, scale(tape, pen.calendar, lc), scale(tape, pen.call_spread, ls)),
                               scale(tape, pen.butterfly, lf));
    const Array snr({n}, std::move(w));
    out.arb = scale(tape, sum(tape, mul(tape, weighted, snr)), 1.0 / static_cast<double>(denominator));
    out.total = add(tape, out.mse, out.arb);
    return out;
}

LossTerms composite_loss(Tape& tape, std::span<const TrainingExample* const> batch,
                         const NoiseDraw& draw, const ParamSet& params, const LossContext& ctx,
                         const TrainConfig& cfg) {
    if (batch.empty()) {
        throw InputError("composite_loss: empty batch");
    }
    const Eigen::MatrixXd x_t = noisy_targets(batch, draw, *ctx.schedule);
    const Array inputs = assemble_inputs(batch, x_t);
    const Index n = static_cast<Index>(batch.size());
    Eigen::VectorXd sc(n * kScalarFeatures);
    for (Index i = 0; i < n; ++i) {
        sc.segment(i * kScalarFeatures, kScalarFeatures) = batch[static_cast<std::size_t>(i)]->bundle.scalars;
    }
    const Array scalars({n, kScalarFeatures}, std::move(sc));
    const Array eps_hat = unet_forward(tape, inputs, draw.steps, scalars, params, ctx.unet);
    return loss_from_prediction(tape, eps_hat, x_t, draw, ctx, cfg, n);
}

LossValues loss_and_gradients(std::span<const TrainingExample* const> batch,
                              const NoiseDraw& draw, const ParamSet& params,
                              const LossContext& ctx, const TrainConfig& cfg, int threads,
                              std::vector<Eigen::VectorXd>& grads) {
    if (batch.empty()) {
        throw InputError("loss_and_gradients: empty batch");
    }
    const auto bounds = shard_bounds(batch.size(), threads);
    const std::size_t shards = bounds.size() - 1;
    std::vector<LossValues> values(shards);
    std::vector<std::vector<Eigen::VectorXd>> shard_grads(shards);
    const Index denom = static_cast<Index>(batch.size());

    run_shards(shards, [&](std::size_t s) {
        const auto sub = batch.subspan(bounds[s], bounds[s + 1] - bounds[s]);
        const NoiseDraw d = slice_draw(draw, bounds[s], bounds[s + 1]);
        Tape tape;
        const Eigen::MatrixXd x_t = noisy_targets(sub, d, *ctx.schedule);
        const Index n = static_cast<Index>(sub.size());
        Eigen::VectorXd sc(n * kScalarFeatures);
        for (Index i = 0; i < n; ++i) {
            sc.segment(i * kScalarFeatures, kScalarFeatures) = sub[static_cast<std::size_t>(i)]->bundle.scalars;
        }
        const Array eps_hat = unet_forward(tape, assemble_inputs(sub, x_t), d.steps,
                                           Array({n, kScalarFeatures}, std::move(sc)), params, ctx.unet);
        const LossTerms terms = loss_from_prediction(tape, eps_hat, x_t, d, ctx, cfg, denom);
        values[s] = {terms.total.item(), terms.mse.item(), terms.arb.item()};
        const GradMap g = backward(tape, terms.total);
        auto& out = shard_grads[s];
        out.reserve(params.size());
        for (const Array& p : params.arrays()) {
            out.push_back(g.grad(p));
        }
    });

    LossValues total;
    grads.assign(params.size(), Eigen::VectorXd());
    for (std::size_t s = 0; s < shards; ++s) {
        total.total += values[s].total;
        total.mse += values[s].mse;
        total.arb += values[s].arb;
        for (std::size_t k = 0; k < params.size(); ++k) {
            if (s == 0) {
                grads[k] = std::move(shard_grads[s][k]);
            } else {
                grads[k] += shard_grads[s][k];
            }
        }
    }
    check_finite(total.mse, "mse");
    check_finite(total.arb, "arbitrage");
    check_finite(total.total, "total");
    for (const auto& g : grads) {
        if (!g.allFinite()) {
            throw DivergenceError("non-finite gradient");
        }
    }
    return total;
}

double clip_global_norm(std::vector<Eigen::VectorXd>& grads, double max_norm) {
    double sq = 0.0;
    for (const auto& g : grads) {
        sq += g.squaredNorm();
    }
    const double norm = std::sqrt(sq);
    if (norm > max_norm) {
        const double f = max_norm / norm;
        for (auto& g : grads) {
            g *= f;
        }
    }
    return norm;
}

OptimizerState OptimizerState::for_params(const ParamSet& params, double lr) {
    OptimizerState s;
    s.lr = lr;
    for (const Array& p : params.arrays()) {
        s.m.push_back(Eigen::VectorXd::Zero(p.size()));
        s.v.push_back(Eigen::VectorXd::Zero(p.size()));
    }
    return s;
}

void adamw_update(ParamSet& params, const std::vector<Eigen::VectorXd>& grads,
                  OptimizerState& opt, const TrainConfig& cfg) {
    if (grads.size() != params.size() || opt.m.size() != params.size()) {
        throw ShapeError("adamw_update: gradient/state count differs from parameters");
    }
    ++opt.step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(opt.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(opt.step));
    for (std::size_t k = 0; k < params.size(); ++k) {
        Eigen::VectorXd& theta = params.arrays()[k].mutable_data();
        theta *= 1.0 - opt.lr * cfg.weight_decay;
        opt.m[k] = b1 * opt.m[k] + (1.0 - b1) * grads[k];
        opt.v[k] = b2 * opt.v[k] + (1.0 - b2) * grads[k].cwiseProduct(grads[k]);
        theta.array() -= opt.lr * (opt.m[k].array() / c1) /
                         ((opt.v[k].array() / c2).sqrt() + cfg.adam_eps);
    }
}

void ema_update(ParamSet& ema, const ParamSet& live, double decay) {
    if (ema.size() != live.size()) {
        throw ShapeError("ema_update: parameter sets differ");
    }
    for (std::size_t k = 0; k < live.size(); ++k) {
        Eigen::VectorXd& e = ema.arrays()[k].mutable_data();
        const Eigen::VectorXd& p = live.arrays()[k].data();
        if (e.size() != p.size()) {
            throw ShapeError("ema_update: shape mismatch for " + live.names()[k]);
        }
        e = decay * e + (1.0 - decay) * p;
    }
}

StepRecord train_step(std::span<const TrainingExample* const> batch, const NoiseDraw& draw,
                      ParamStore& store, OptimizerState& opt, const LossContext& ctx,
                      const TrainConfig& cfg, int threads) {
    std::vector<Eigen::VectorXd> grads;
    StepRecord rec;
    rec.loss = loss_and_gradients(batch, draw, store.live, ctx, cfg, threads, grads);
    rec.grad_norm = clip_global_norm(grads, cfg.grad_clip);
    adamw_update(store.live, grads, opt, cfg);
    ema_update(store.ema, store.live, cfg.ema_decay);
    return rec;
}

double PlateauScheduler::step(double val_loss) {
    if (val_loss < best_) {
        best_ = val_loss;
        bad_epochs_ = 0;
        return lr_;
    }
    if (++bad_epochs_ >= patience_) {
        lr_ = std::max(lr_ * factor_, min_);
        bad_epochs_ = 0;
    }
    return lr_;
}

double lr_plateau(std::span<const double> history, double lr, const TrainConfig& cfg) {
    if (history.empty()) {
        throw InputError("lr_plateau: empty validation history");
    }
    PlateauScheduler s(lr, cfg);
    for (double v : history) {
        s.step(v);
    }
    return s.lr();
}

double validation_loss(std::span<const TrainingExample> examples, const ParamSet& params,
                       const LossContext& ctx, const TrainConfig& cfg, std::uint64_t seed,
                       int threads) {
    if (examples.empty()) {
        throw InputError("validation_loss: no validation examples");
    }
    std::vector<const TrainingExample*> ptrs;
    NoiseDraw draw;
    draw.noise.resize(static_cast<Index>(examples.size()), kCells);
    for (std::size_t i = 0; i < examples.size(); ++i) {
        ptrs.push_back(&examples[i]);
        Rng rng(sub_seed(seed, i));
        const NoiseDraw one = draw_noise(1, cfg.diffusion_steps, rng);
        draw.steps.push_back(one.steps[0]);
        draw.noise.row(static_cast<Index>(i)) = one.noise.row(0);
    }
    const auto bounds = shard_bounds(ptrs.size(), threads);
    const std::size_t shards = bounds.size() - 1;
    std::vector<double> sums(shards, 0.0);
    TrainConfig mse_only = cfg;
    mse_only.lambda = 0.0;
    mse_only.lambda_calendar = mse_only.lambda_spread = mse_only.lambda_butterfly = 0.0;
    run_shards(shards, [&](std::size_t s) {
        Tape tape(Tape::Mode::kInference);
        const std::span<const TrainingExample* const> all(ptrs);
        const auto sub = all.subspan(bounds[s], bounds[s + 1] - bounds[s]);
        const LossTerms t = composite_loss(tape, sub, slice_draw(draw, bounds[s], bounds[s + 1]),
                                           params, ctx, mse_only);
        sums[s] = t.mse.item() * static_cast<double>(sub.size());
    });
    double total = 0.0;
    for (double v : sums) {
        total += v;
    }
    const double loss = total / static_cast<double>(examples.size());
    check_finite(loss, "validation");
    return loss;
}

FitResult fit(const PreparedData& data, const TrainConfig& cfg, const LossContext& ctx,
              ParamStore init, const FitOptions& options) {
    cfg.validate();
    if (data.train.empty() || data.validation.empty()) {
        throw InputError("fit: training and validation splits must be non-empty (got " +
                         std::to_string(data.train.size()) + " and " +
                         std::to_string(data.validation.size()) + " examples)");
    }
    if (ctx.schedule == nullptr || ctx.stats == nullptr ||
        ctx.schedule->steps() != cfg.diffusion_steps) {
        throw InputError("fit: loss context does not match the configured diffusion steps");
    }
    ParamStore store = std::move(init);
    OptimizerState opt = OptimizerState::for_params(store.live, cfg.lr);
    PlateauScheduler plateau(cfg.lr, cfg);
    Rng rng(sub_seed(cfg.seed, 0x7a1));
    const std::uint64_t val_seed = sub_seed(cfg.seed, 0x7a2);

    FitResult result;
    result.best = {store.live.clone(false), store.ema.clone(false)};
    result.best_val = std::numeric_limits<double>::infinity();
    std::vector<std::size_t> order(data.train.size());
    std::vector<const TrainingExample*> batch;
    int since_best = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::shuffle(order.begin(), order.end(), rng);
        EpochRecord rec;
        rec.epoch = epoch;
        rec.lr = opt.lr;
        std::size_t batches = 0;
        try {
            for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
                const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
                batch.clear();
                for (std::size_t i = start; i < end; ++i) {
                    batch.push_back(&data.train[order[i]]);
                }
                const NoiseDraw draw = draw_noise(batch.size(), cfg.diffusion_steps, rng);
                const StepRecord s = train_step(batch, draw, store, opt, ctx, cfg, options.threads);
                rec.train_loss += s.loss.total;
                rec.train_mse += s.loss.mse;
                rec.train_arb += s.loss.arb;
                ++batches;
            }
            rec.train_loss /= static_cast<double>(batches);
            rec.train_mse /= static_cast<double>(batches);
            rec.train_arb /= static_cast<double>(batches);
            rec.val_loss = validation_loss(data.validation, store.ema, ctx, cfg, val_seed, options.threads);
        } catch (const DivergenceError& e) {
            result.divergence = "epoch " + std::to_string(epoch) + ": " + e.what();
            return result;
        }
        result.history.push_back(rec);
        if (options.on_epoch) {
            options.on_epoch(rec);
        }
        if (rec.val_loss < result.best_val) {
            result.best_val = rec.val_loss;
            result.best_epoch = epoch;
            result.best = {store.live.clone(false), store.ema.clone(false)};
            since_best = 0;
        } else if (++since_best >= cfg.early_stop_patience) {
            result.stopped_early = true;
            break;
        }
        opt.lr = plateau.step(rec.val_loss);
    }
    return result;
}

}  // namespace ivdiff
