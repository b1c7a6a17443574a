#include "ivdiff/diffusion.hpp"

#include <numbers>

namespace ivdiff {

NoiseSchedule::NoiseSchedule(Eigen::VectorXd beta) : beta_(std::move(beta)) {
    if (beta_.size() < 1) {
        throw InputError("noise schedule needs at least one step");
    }
    alpha_bar_.resize(beta_.size());
    double acc = 1.0;
    for (Eigen::Index i = 0; i < beta_.size(); ++i) {
        if (!(beta_[i] > 0.0 && beta_[i] < 1.0)) {
            throw InputError("noise schedule: beta must lie in (0, 1)");
        }
        acc *= 1.0 - beta_[i];
        alpha_bar_[i] = acc;
    }
}

double NoiseSchedule::posterior_variance(int t) const {
    return (1.0 - alpha_bar(t - 1)) / (1.0 - alpha_bar(t)) * beta(t);
}

NoiseSchedule build_cosine_schedule(int n) {
    if (n < 2) {
        throw InputError("cosine schedule needs n >= 2, got " + std::to_string(n));
    }
    const double s = kCosineOffset;
    auto f = [&](int t) {
        const double c = std::cos((static_cast<double>(t) / n + s) / (1.0 + s) * std::numbers::pi / 2.0);
        return c * c;
    };
    const double f0 = f(0);
    Eigen::VectorXd beta(n);
    for (int t = 1; t <= n; ++t) {
        const double ab = f(t) / f0;
        const double ab_prev = f(t - 1) / f0;
        beta[t - 1] = std::min(1.0 - ab / ab_prev, kMaxBeta);
    }
    return NoiseSchedule(std::move(beta));
}

double snr_weight(int t, const NoiseSchedule& schedule) {
    const double ab = schedule.alpha_bar(t);
    return ab / (1.0 - ab + kSnrEps);
}

TerminalDiagnostic terminal_diagnostic(double alpha_bar_n, double mean_sq_norm, int dim) {
    if (!(alpha_bar_n >= 0.0 && alpha_bar_n < 1.0)) {
        throw InputError("terminal_diagnostic: alpha_bar must lie in [0, 1)");
    }
    TerminalDiagnostic d;
    d.expected_kl = 0.5 * dim * (-std::log1p(-alpha_bar_n) - alpha_bar_n) +
                    0.5 * alpha_bar_n * mean_sq_norm;
    d.tv_bound = std::sqrt(0.5 * d.expected_kl);
    return d;
}

TerminalDiagnostic terminal_diagnostic(const Eigen::Ref<const Eigen::MatrixXd>& x0_rows,
                                       const NoiseSchedule& schedule) {
    if (x0_rows.rows() == 0) {
        throw InputError("terminal_diagnostic: empty batch");
    }
    const double mean_sq = x0_rows.rowwise().squaredNorm().mean();
    return terminal_diagnostic(schedule.alpha_bar(schedule.steps()), mean_sq,
                               static_cast<int>(x0_rows.cols()));
}

}  // namespace ivdiff
