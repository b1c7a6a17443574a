#pragma once

#include "ivdiff/gridmath.hpp"

#include <Eigen/Core>

#include <array>
#include <span>
#include <vector>

namespace ivdiff {

inline constexpr Index kGridSide = 9;
inline constexpr Index kCells = kGridSide * kGridSide;

/// Values over the fixed grid: row i = moneyness m_i, column j = tenor tau_j.
/// Row-major storage gives the cell order used by every surface file.
template <typename Scalar>
using SurfaceT = Eigen::Matrix<Scalar, kGridSide, kGridSide, Eigen::RowMajor>;
using Surface = SurfaceT<double>;

/// Flat row-major view of a surface, one row per cell.
using SurfaceRow = Eigen::Matrix<double, 1, kCells>;

struct GridSpec {
    std::array<double, kGridSide> moneyness{0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2, 1.3, 1.4};
    std::array<double, kGridSide> tenors{1.0 / 252, 1.0 / 52, 2.0 / 52, 1.0 / 12, 1.0 / 6,
                                         1.0 / 4,   1.0 / 2,  3.0 / 4,  1.0};

    /// Throws InputError unless both axes are strictly increasing and positive.
    void validate() const;
};

inline SurfaceRow flatten(const Surface& s) {
    return Eigen::Map<const SurfaceRow>(s.data());
}

inline Surface unflatten(const Eigen::Ref<const SurfaceRow>& row) {
    Surface s;
    Eigen::Map<SurfaceRow>(s.data()) = row;
    return s;
}

/// Packs surfaces into an array of shape [N, 1, 9, 9].
Array surfaces_to_array(std::span<const Surface> surfaces, bool requires_grad = false);
/// Inverse of surfaces_to_array for any [N, ..., 81-cell] layout with one channel.
std::vector<Surface> array_to_surfaces(const Array& a);

}  // namespace ivdiff
