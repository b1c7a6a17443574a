#pragma once

// Relative Black-Scholes call prices and the calendar / call-spread / butterfly
// penalties on the fixed grid. penalty_loops is the direct nested-loop form;
// penalty_conv runs the same sums through fixed difference kernels on the tape
// so that the training loss can differentiate them.

#include "ivdiff/grid.hpp"
#include "ivdiff/gridmath.hpp"

#include <cmath>

namespace ivdiff {

struct PricingContext {
    double rate = 0.02;      // continuously compounded, annualized
    double dividend = 0.0;   // continuous yield
};

struct PenaltyBreakdown {
    double calendar = 0.0;     // p1
    double call_spread = 0.0;  // p2
    double butterfly = 0.0;    // p3
    double total = 0.0;        // p1 + p2 + p3
};

/// Below this value of sigma * sqrt(tau) the price is the discounted intrinsic value.
inline constexpr double kMinTotalVol = 1e-12;

double normal_cdf(double x);
double normal_pdf(double x);

/// c(m, tau) = e^{-q tau} N(d1) - m e^{-r tau} N(d2), the call price divided by spot.
double bs_relative_call(double m, double tau, double sigma, const PricingContext& ctx);
/// dc/dsigma.
double bs_relative_vega(double m, double tau, double sigma, const PricingContext& ctx);

/// Relative call prices for every cell of an implied-vol surface.
Surface relative_call_surface(const Surface& iv, const GridSpec& grid, const PricingContext& ctx);

/// The three penalty sums evaluated directly on call prices, with (x)^+ = max(0, x).
template <typename Scalar>
PenaltyBreakdown penalty_from_call_prices(const SurfaceT<Scalar>& c, const GridSpec& grid) {
    using std::max;
    const auto& m = grid.moneyness;
    const auto& tau = grid.tenors;
    Scalar p1(0), p2(0), p3(0);
    for (Index i = 0; i < kGridSide; ++i) {
        for (Index j = 0; j + 1 < kGridSide; ++j) {
            p1 += max(Scalar(0), (c(i, j) - c(i, j + 1)) / Scalar(tau[j + 1] - tau[j]));
        }
    }
    for (Index i = 0; i + 1 < kGridSide; ++i) {
        for (Index j = 0; j < kGridSide; ++j) {
            p2 += max(Scalar(0), (c(i + 1, j) - c(i, j)) / Scalar(m[i + 1] - m[i]));
        }
    }
    for (Index i = 1; i + 1 < kGridSide; ++i) {
        for (Index j = 0; j < kGridSide; ++j) {
            const Scalar left = (c(i, j) - c(i - 1, j)) / Scalar(m[i] - m[i - 1]);
            const Scalar right = (c(i + 1, j) - c(i, j)) / Scalar(m[i + 1] - m[i]);
            p3 += max(Scalar(0), left - right);
        }
    }
    PenaltyBreakdown out;
    out.calendar = static_cast<double>(p1);
    out.call_spread = static_cast<double>(p2);
    out.butterfly = static_cast<double>(p3);
    out.total = static_cast<double>(p1 + p2 + p3);
    return out;
}

/// Reference penalties of an implied-vol surface. Throws DomainError on
/// non-positive cells.
PenaltyBreakdown penalty_loops(const Surface& iv, const GridSpec& grid, const PricingContext& ctx);

/// Per-sample penalty terms, each of shape [N].
struct PenaltyTerms {
    Array calendar;
    Array call_spread;
    Array butterfly;
    Array total;
};

/// Differentiable relative call prices of an implied-vol array [N, 1, 9, 9].
Array relative_call(Tape& tape, const Array& iv, const GridSpec& grid, const PricingContext& ctx);

/// Penalties of an implied-vol array [N, 1, 9, 9] via difference kernels.
PenaltyTerms penalty_conv(Tape& tape, const Array& iv, const GridSpec& grid,
                          const PricingContext& ctx);
/// Convenience wrapper on a single surface (no gradient).
PenaltyBreakdown penalty_conv(const Surface& iv, const GridSpec& grid, const PricingContext& ctx);

}  // namespace ivdiff
