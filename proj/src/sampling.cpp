#include "ivdiff/sampling.hpp"

#include "ivdiff/errors.hpp"
#include "ivdiff/model.hpp"

#include <thread>

namespace ivdiff {

namespace {

/// Runs chains [begin, end) of a batch in one batched reverse pass.
Eigen::MatrixXd run_chains(const ConditioningBundle& bundle, const Checkpoint& ckpt,
                           const ParamSet& params, std::uint64_t seed, int begin, int end) {
    const int k = end - begin;
    std::vector<Rng> rngs;
    rngs.reserve(static_cast<std::size_t>(k));
    Eigen::MatrixXd x(k, kCells);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (int i = 0; i < k; ++i) {
        rngs.emplace_back(sub_seed(seed, static_cast<std::uint64_t>(begin + i)));
        for (Index c = 0; c < kCells; ++c) {
            x(i, c) = normal(rngs.back());
            normal.reset();
        }
    }

    Eigen::VectorXd base(static_cast<Index>(k) * 4 * kCells);
    Eigen::VectorXd scalars(static_cast<Index>(k) * kScalarFeatures);
    for (Index i = 0; i < k; ++i) {
        for (Index c = 0; c < 3; ++c) {
            base.segment((i * 4 + c) * kCells, kCells) = bundle.channels.row(c).transpose();
        }
        scalars.segment(i * kScalarFeatures, kScalarFeatures) = bundle.scalars;
    }
    const Array scalar_array({k, kScalarFeatures}, scalars);

    auto predict = [&](const Eigen::MatrixXd& x_t, int t) {
        Eigen::VectorXd in = base;
        for (Index i = 0; i < k; ++i) {
            in.segment((i * 4 + 3) * kCells, kCells) = x_t.row(i).transpose();
        }
        Tape tape(Tape::Mode::kInference);
        const std::vector<int> steps(static_cast<std::size_t>(k), t);
        const Array eps = unet_forward(tape, Array({k, 4, kGridSide, kGridSide}, std::move(in)),
                                       steps, scalar_array, params, ckpt.unet);
        return Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>(
                   eps.data().data(), k, kCells)
            .eval();
    };
    auto noise = [&](int) {
        Eigen::MatrixXd z(k, kCells);
        for (int i = 0; i < k; ++i) {
            for (Index c = 0; c < kCells; ++c) {
                z(i, c) = normal(rngs[static_cast<std::size_t>(i)]);
                normal.reset();
            }
        }
        return z;
    };
    return run_reverse_chain(std::move(x), ckpt.schedule, predict, noise);
}

}  // namespace

SampleBatch sample_batch(const ConditioningBundle& bundle, const Checkpoint& ckpt, int k,
                         std::uint64_t seed, const GridSpec& grid, const SampleOptions& options) {
    if (k < 1) {
        throw InputError("sample_batch: k must be >= 1, got " + std::to_string(k));
    }
    if (!bundle.channels.allFinite() || !bundle.scalars.allFinite()) {
        throw InputError("sample_batch: conditioning bundle for " + bundle.date + " is not finite");
    }
    const ParamSet& params = options.use_live_weights ? ckpt.params.live : ckpt.params.ema;
    const int workers = std::max(1, std::min(options.threads, k));
    std::vector<Eigen::MatrixXd> parts(static_cast<std::size_t>(workers));
    std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
    auto work = [&](int w) {
        try {
            const int begin = w * k / workers;
            const int end = (w + 1) * k / workers;
            parts[static_cast<std::size_t>(w)] = run_chains(bundle, ckpt, params, seed, begin, end);
        } catch (...) {
            errors[static_cast<std::size_t>(w)] = std::current_exception();
        }
    };
    if (workers == 1) {
        work(0);
    } else {
        std::vector<std::thread> pool;
        for (int w = 0; w < workers; ++w) {
            pool.emplace_back(work, w);
        }
        for (auto& th : pool) {
            th.join();
        }
    }
    for (auto& e : errors) {
        if (e) {
            std::rethrow_exception(e);
        }
    }

    SampleBatch out;
    out.date = bundle.date;
    out.seed = seed;
    for (const auto& part : parts) {
        for (Index i = 0; i < part.rows(); ++i) {
            const Surface iv = denormalize(unflatten(part.row(i)), ckpt.stats);
            if (!(iv.array() > 0.0).all() || !iv.allFinite()) {
                throw DivergenceError("sampling: generated surface is not strictly positive and finite");
            }
            out.surfaces.push_back(iv);
            out.penalties.push_back(penalty_loops(iv, grid, ckpt.pricing));
        }
    }
    return out;
}

Surface sample_one(const ConditioningBundle& bundle, const Checkpoint& ckpt, std::uint64_t seed,
                   const GridSpec& grid, const SampleOptions& options) {
    return sample_batch(bundle, ckpt, 1, seed, grid, options).surfaces.front();
}

}  // namespace ivdiff
