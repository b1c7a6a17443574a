#pragma once

// Ancestral sampling of implied-vol surfaces from a trained checkpoint.
//
// Chain i of a batch draws its starting noise and every z from its own
// generator seeded with sub_seed(seed, i), so a batch of k chains is the same
// as k single-chain calls and does not depend on the thread count.

#include "ivdiff/arbitrage.hpp"
#include "ivdiff/checkpoint.hpp"
#include "ivdiff/dataprep.hpp"
#include "ivdiff/diffusion.hpp"
#include "ivdiff/random.hpp"

#include <cstdint>
#include <string>
#include <vector>

namespace ivdiff {

struct SampleBatch {
    std::string date;
    std::vector<Surface> surfaces;             // implied vol
    std::vector<PenaltyBreakdown> penalties;   // per surface
    std::uint64_t seed = 0;
};

struct SampleOptions {
    int threads = 1;
    /// Debug only: sample with the live weights instead of the EMA copy.
    bool use_live_weights = false;
};

/// Runs t = n..1 on the rows of `x` (standardized space). `predict(x_t, t)`
/// returns the noise prediction with the same shape; `noise(t)` returns the z
/// rows for step t > 1. Throws DivergenceError naming t on non-finite values.
template <typename Predict, typename Noise>
Eigen::MatrixXd run_reverse_chain(Eigen::MatrixXd x, const NoiseSchedule& schedule,
                                  Predict&& predict, Noise&& noise) {
    for (int t = schedule.steps(); t >= 1; --t) {
        const Eigen::MatrixXd eps_hat = predict(x, t);
        if (!eps_hat.allFinite()) {
            throw DivergenceError("sampling: non-finite noise prediction at t = " + std::to_string(t));
        }
        if (t > 1) {
            x = reverse_step(x, eps_hat, t, noise(t), schedule);
        } else {
            x = reverse_step(x, eps_hat, t, Eigen::MatrixXd::Zero(x.rows(), x.cols()), schedule);
        }
        if (!x.allFinite()) {
            throw DivergenceError("sampling: non-finite state at t = " + std::to_string(t));
        }
    }
    return x;
}

/// k surfaces for one conditioning bundle, with their penalties attached.
SampleBatch sample_batch(const ConditioningBundle& bundle, const Checkpoint& ckpt, int k,
                         std::uint64_t seed, const GridSpec& grid = {},
                         const SampleOptions& options = {});

/// A single chain; equal to sample_batch(..., k = 1, ...).surfaces[0].
Surface sample_one(const ConditioningBundle& bundle, const Checkpoint& ckpt, std::uint64_t seed,
                   const GridSpec& grid = {}, const SampleOptions& options = {});

}  // namespace ivdiff
