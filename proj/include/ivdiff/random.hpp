#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>

namespace ivdiff {

using Rng = std::mt19937_64;

/// SplitMix64 finalizer.
inline std::uint64_t mix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Independent stream seed for item `index` of a run seeded with `seed`.
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t index) {
    return mix64(mix64(seed) ^ mix64(index + 0x632be59bd9b4e019ULL));
}

/// Fills `n` standard normal draws into `out` (any Eigen dense expression).
template <typename Derived>
void fill_normal(Rng& rng, Eigen::DenseBase<Derived>& out) {
    std::normal_distribution<double> dist(0.0, 1.0);
    for (Eigen::Index i = 0; i < out.size(); ++i) {
        out.derived().data()[i] = dist(rng);
    }
}

}  // namespace ivdiff
