#include "ivdiff/arbitrage.hpp"

#include "ivdiff/errors.hpp"

#include <cmath>
#include <numbers>
#include <string>

namespace ivdiff {

namespace {

void check_positive(double sigma, Index cell) {
    if (!(sigma > 0.0) || !std::isfinite(sigma)) {
        throw DomainError("implied volatility must be positive and finite, got " +
                          std::to_string(sigma) + " at cell " + std::to_string(cell));
    }
}

struct D1D2 {
    double d1, d2, total_vol;
};

D1D2 d_terms(double m, double tau, double sigma, const PricingContext& ctx) {
    const double sv = sigma * std::sqrt(tau);
    if (sv < kMinTotalVol) {
        return {0.0, 0.0, sv};
    }
    const double d1 = (-std::log(m) + (ctx.rate - ctx.dividend) * tau) / sv + 0.5 * sv;
    return {d1, d1 - sv, sv};
}

void check_args(double m, double tau, double sigma) {
    if (!(m > 0.0) || !(tau > 0.0) || !(sigma > 0.0) || !std::isfinite(m) ||
        !std::isfinite(tau) || !std::isfinite(sigma)) {
        throw DomainError("bs_relative_call: arguments must be positive and finite (m=" +
                          std::to_string(m) + ", tau=" + std::to_string(tau) +
                          ", sigma=" + std::to_string(sigma) + ")");
    }
}

}  // namespace

double normal_cdf(double x) { return 0.5 * std::erfc(-x / std::numbers::sqrt2); }

double normal_pdf(double x) {
    return std::exp(-0.5 * x * x) / std::sqrt(2.0 * std::numbers::pi);
}

double bs_relative_call(double m, double tau, double sigma, const PricingContext& ctx) {
    check_args(m, tau, sigma);
    const double disc_r = std::exp(-ctx.rate * tau);
    const double disc_q = std::exp(-ctx.dividend * tau);
    const D1D2 d = d_terms(m, tau, sigma, ctx);
    if (d.total_vol < kMinTotalVol) {
        return std::max(0.0, disc_q - m * disc_r);
    }
    return disc_q * normal_cdf(d.d1) - m * disc_r * normal_cdf(d.d2);
}

double bs_relative_vega(double m, double tau, double sigma, const PricingContext& ctx) {
    check_args(m, tau, sigma);
    const D1D2 d = d_terms(m, tau, sigma, ctx);
    if (d.total_vol < kMinTotalVol) {
        return 0.0;
    }
    return std::exp(-ctx.dividend * tau) * normal_pdf(d.d1) * std::sqrt(tau);
}

Surface relative_call_surface(const Surface& iv, const GridSpec& grid, const PricingContext& ctx) {
    Surface c;
    for (Index i = 0; i < kGridSide; ++i) {
        for (Index j = 0; j < kGridSide; ++j) {
            check_positive(iv(i, j), i * kGridSide + j);
            c(i, j) = bs_relative_call(grid.moneyness[i], grid.tenors[j], iv(i, j), ctx);
        }
    }
    return c;
}

PenaltyBreakdown penalty_loops(const Surface& iv, const GridSpec& grid, const PricingContext& ctx) {
    return penalty_from_call_prices<double>(relative_call_surface(iv, grid, ctx), grid);
}

Array relative_call(Tape& tape, const Array& iv, const GridSpec& grid, const PricingContext& ctx) {
    if (iv.size() % kCells != 0 || iv.rank() < 2 || iv.dim(iv.rank() - 1) != kGridSide ||
        iv.dim(iv.rank() - 2) != kGridSide) {
        throw ShapeError("relative_call: expects trailing 9x9 grid, got " + shape_string(iv.shape()));
    }
    const Index n = iv.size();
    Eigen::VectorXd price(n);
    Eigen::VectorXd vega(n);
    for (Index k = 0; k < n; ++k) {
        const Index cell = k % kCells;
        const double m = grid.moneyness[cell / kGridSide];
        const double tau = grid.tenors[cell % kGridSide];
        check_positive(iv[k], cell);
        price[k] = bs_relative_call(m, tau, iv[k], ctx);
        vega[k] = bs_relative_vega(m, tau, iv[k], ctx);
    }
    return tape.emit(iv.shape(), std::move(price), {iv},
                     [vega](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         *gi[0] += g.cwiseProduct(vega);
                     });
}

PenaltyTerms penalty_conv(Tape& tape, const Array& iv, const GridSpec& grid,
                          const PricingContext& ctx) {
    const Array prices_any = relative_call(tape, iv, grid, ctx);
    const Index n = iv.size() / kCells;
    const Array prices = reshape(tape, prices_any, {n, 1, kGridSide, kGridSide});

    // Spacing arrays matching the difference outputs; the kernels stay integer.
    Eigen::VectorXd dtau(n * kGridSide * (kGridSide - 1));
    Eigen::VectorXd dm(n * (kGridSide - 1) * kGridSide);
    for (Index s = 0; s < n; ++s) {
        for (Index i = 0; i < kGridSide; ++i) {
            for (Index j = 0; j + 1 < kGridSide; ++j) {
                dtau[(s * kGridSide + i) * (kGridSide - 1) + j] = grid.tenors[j + 1] - grid.tenors[j];
                dm[(s * (kGridSide - 1) + j) * kGridSide + i] = grid.moneyness[j + 1] - grid.moneyness[j];
            }
        }
    }
    const Array tenor_step({n, 1, kGridSide, kGridSide - 1}, std::move(dtau));
    const Array money_step({n, 1, kGridSide - 1, kGridSide}, std::move(dm));

    // c(i, j) - c(i, j + 1)
    const Array calendar_kernel({1, 1, 1, 2}, Eigen::Vector2d(1.0, -1.0));
    // c(i + 1, j) - c(i, j)
    const Array spread_kernel({1, 1, 2, 1}, Eigen::Vector2d(-1.0, 1.0));
    // slope(i - 1) - slope(i)
    const Array fly_kernel({1, 1, 2, 1}, Eigen::Vector2d(1.0, -1.0));

    const Array calendar_diff = div(tape, conv2d(tape, prices, calendar_kernel, 0, 1), tenor_step);
    const Array slope = div(tape, conv2d(tape, prices, spread_kernel, 0, 1), money_step);
    const Array fly = conv2d(tape, slope, fly_kernel, 0, 1);

    PenaltyTerms out;
    out.calendar = sum_per_row(tape, relu(tape, calendar_diff));
    out.call_spread = sum_per_row(tape, relu(tape, slope));
    out.butterfly = sum_per_row(tape, relu(tape, fly));
    out.total = add(tape, add(tape, out.calendar, out.call_spread), out.butterfly);
    return out;
}

PenaltyBreakdown penalty_conv(const Surface& iv, const GridSpec& grid, const PricingContext& ctx) {
    Tape tape(Tape::Mode::kInference);
    const Surface one[1] = {iv};
    const PenaltyTerms t = penalty_conv(tape, surfaces_to_array(one), grid, ctx);
    return {t.calendar[0], t.call_spread[0], t.butterfly[0], t.total[0]};
}

}  // namespace ivdiff
