#pragma once

// Variance-preserving diffusion: cosine noise schedule, closed-form forward
// perturbation, denoised estimate, ancestral reverse step and the terminal
// KL / total-variation diagnostic.
//
// The per-step functions are free templates over Eigen dense expressions, so
// they take a single surface, a flat 81-vector or a whole batch alike.

#include "ivdiff/errors.hpp"

#include <Eigen/Core>

#include <cmath>
#include <span>
#include <string>

namespace ivdiff {

/// Bound on x0 estimates and reverse-step means, in standardized units.
inline constexpr double kClipBound = 5.0;
/// Stabilizer in the SNR weight denominator.
inline constexpr double kSnrEps = 1e-8;
inline constexpr double kCosineOffset = 0.008;
inline constexpr double kMaxBeta = 0.999;

class NoiseSchedule {
public:
    NoiseSchedule() = default;
    /// Tables indexed by t - 1 for t = 1..n.
    NoiseSchedule(Eigen::VectorXd beta);

    int steps() const { return static_cast<int>(beta_.size()); }
    double beta(int t) const { return beta_[check(t)]; }
    double alpha(int t) const { return 1.0 - beta(t); }
    /// Cumulative product of alpha; alpha_bar(0) = 1.
    double alpha_bar(int t) const { return t == 0 ? 1.0 : alpha_bar_[check(t)]; }
    /// Posterior variance ((1 - alpha_bar(t-1)) / (1 - alpha_bar(t))) beta(t).
    double posterior_variance(int t) const;

    const Eigen::VectorXd& betas() const { return beta_; }
    const Eigen::VectorXd& alpha_bars() const { return alpha_bar_; }

private:
    Eigen::Index check(int t) const {
        if (t < 1 || t > steps()) {
            throw InputError("diffusion step " + std::to_string(t) + " outside 1.." +
                             std::to_string(steps()));
        }
        return t - 1;
    }
    Eigen::VectorXd beta_;
    Eigen::VectorXd alpha_bar_;
};

/// alpha_bar from f(t) = cos^2(((t / n + s) / (1 + s)) pi / 2), beta clipped at
/// 0.999 and alpha_bar re-accumulated from the clipped betas.
NoiseSchedule build_cosine_schedule(int n);

/// alpha_bar / (1 - alpha_bar + 1e-8).
double snr_weight(int t, const NoiseSchedule& schedule);

/// sqrt(alpha_bar) x0 + sqrt(1 - alpha_bar) eps.
template <typename D1, typename D2>
typename D1::PlainObject forward_sample(const Eigen::MatrixBase<D1>& x0, int t,
                                        const Eigen::MatrixBase<D2>& eps,
                                        const NoiseSchedule& schedule) {
    if (x0.rows() != eps.rows() || x0.cols() != eps.cols()) {
        throw ShapeError("forward_sample: noise shape differs from x0");
    }
    const double ab = schedule.alpha_bar(t);
    return std::sqrt(ab) * x0 + std::sqrt(1.0 - ab) * eps;
}

/// (x_t - sqrt(1 - alpha_bar) eps_hat) / sqrt(alpha_bar), optionally clipped
/// to [-kClipBound, kClipBound].
template <typename D1, typename D2>
typename D1::PlainObject denoised_estimate(const Eigen::MatrixBase<D1>& x_t,
                                           const Eigen::MatrixBase<D2>& eps_hat, int t,
                                           const NoiseSchedule& schedule, bool clip = true) {
    if (x_t.rows() != eps_hat.rows() || x_t.cols() != eps_hat.cols()) {
        throw ShapeError("denoised_estimate: prediction shape differs from x_t");
    }
    const double ab = schedule.alpha_bar(t);
    typename D1::PlainObject x0 = (x_t - std::sqrt(1.0 - ab) * eps_hat) / std::sqrt(ab);
    if (clip) {
        x0 = x0.cwiseMax(-kClipBound).cwiseMin(kClipBound);
    }
    return x0;
}

/// Clipped mean (x_t - beta / sqrt(1 - alpha_bar) eps_hat) / sqrt(alpha).
template <typename D1, typename D2>
typename D1::PlainObject reverse_mean(const Eigen::MatrixBase<D1>& x_t,
                                      const Eigen::MatrixBase<D2>& eps_hat, int t,
                                      const NoiseSchedule& schedule) {
    if (x_t.rows() != eps_hat.rows() || x_t.cols() != eps_hat.cols()) {
        throw ShapeError("reverse_step: prediction shape differs from x_t");
    }
    const double coef = schedule.beta(t) / std::sqrt(1.0 - schedule.alpha_bar(t));
    typename D1::PlainObject mu = (x_t - coef * eps_hat) / std::sqrt(schedule.alpha(t));
    return mu.cwiseMax(-kClipBound).cwiseMin(kClipBound);
}

/// x_{t-1} = reverse_mean + sqrt(posterior_variance) z. At t = 1 the variance
/// is zero and z must be zero; anything else throws InputError.
template <typename D1, typename D2, typename D3>
typename D1::PlainObject reverse_step(const Eigen::MatrixBase<D1>& x_t,
                                      const Eigen::MatrixBase<D2>& eps_hat, int t,
                                      const Eigen::MatrixBase<D3>& z,
                                      const NoiseSchedule& schedule) {
    if (x_t.rows() != z.rows() || x_t.cols() != z.cols()) {
        throw ShapeError("reverse_step: noise shape differs from x_t");
    }
    if (t == 1 && !z.isZero(0.0)) {
        throw InputError("reverse_step: the final step (t = 1) requires z = 0");
    }
    typename D1::PlainObject mu = reverse_mean(x_t, eps_hat, t, schedule);
    if (t > 1) {
        mu += std::sqrt(schedule.posterior_variance(t)) * z;
    }
    return mu;
}

struct TerminalDiagnostic {
    double expected_kl = 0.0;
    double tv_bound = 0.0;
};

/// E[KL] = (d / 2)(-log(1 - ab) - ab) + (ab / 2) mean ||x0||^2 and the Pinsker
/// bound sqrt(E[KL] / 2), for terminal cumulative product `alpha_bar_n`.
TerminalDiagnostic terminal_diagnostic(double alpha_bar_n, double mean_sq_norm, int dim);

/// Same on a batch (one sample per row) under the schedule's final step.
TerminalDiagnostic terminal_diagnostic(const Eigen::Ref<const Eigen::MatrixXd>& x0_rows,
                                       const NoiseSchedule& schedule);

}  // namespace ivdiff
