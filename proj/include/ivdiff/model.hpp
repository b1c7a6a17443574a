#pragma once

// Conditional noise predictor: a one-level U-Net over [N, 4, 9, 9] inputs.
//
//   enc1   conv3x3  4 -> C        9x9
//   enc2   conv3x3  C -> C        9x9   (skip)
//   down   conv3x3  C -> B  s2    5x5
//   bottle conv3x3  B -> B        5x5
//   up     nearest 5 -> 9, conv3x3 B -> C
//   dec1   conv3x3  [up, skip] 2C -> C
//   dec2   conv3x3  C -> C
//   out    conv1x1  C -> 1
//
// Every block except `out` is conv -> bias -> FiLM -> SiLU. Each FiLM block has
// its own MLP (SiLU hidden layers) from the joint embedding, the concatenation
// of a sinusoidal time embedding and an MLP embedding of the scalar features.
// The MLP emits (gamma - 1, beta), so a zero output is the identity modulation.

#include "ivdiff/gridmath.hpp"

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

namespace ivdiff {

struct UNetConfig {
    Index in_channels = 4;
    Index out_channels = 1;
    Index enc_channels = 16;
    Index bottle_channels = 30;
    Index time_embed_dim = 10;
    Index scalar_dim = 5;
    Index scalar_embed_dim = 10;
    Index film_hidden1 = 10;
    Index film_hidden2 = 10;

    Index joint_embed_dim() const { return time_embed_dim + scalar_embed_dim; }
    void validate() const;
};

/// Named parameter arrays in insertion order.
class ParamSet {
public:
    void add(const std::string& name, Array value);
    const Array& get(const std::string& name) const;
    Array& get(const std::string& name);
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t size() const { return arrays_.size(); }
    const std::vector<std::string>& names() const { return names_; }
    const std::vector<Array>& arrays() const { return arrays_; }
    std::vector<Array>& arrays() { return arrays_; }
    Index total_count() const;

    /// Independent deep copy; every array gets the given requires_grad flag.
    ParamSet clone(bool requires_grad) const;

private:
    std::vector<std::string> names_;
    std::vector<Array> arrays_;
    std::unordered_map<std::string, std::size_t> index_;
};

struct ParamStore {
    ParamSet live;  // trainable, requires_grad
    ParamSet ema;   // shadow average, no gradient
};

/// Sizes of every parameter for a configuration, in canonical order.
std::vector<std::pair<std::string, Shape>> param_layout(const UNetConfig& cfg);

/// Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights and biases; FiLM output
/// layers scaled down by 10. The EMA copy starts equal to the live copy.
ParamStore param_init(const UNetConfig& cfg, std::uint64_t seed);

/// (sin(w_k t), cos(w_k t)) for w_k = 10000^(-k / (dim/2 - 1)), k = 0..dim/2-1,
/// laid out as all sines then all cosines.
Eigen::VectorXd sinusoidal_embed(double t, Index dim);

/// Time embeddings for a batch of steps, shape [N, dim].
Array time_embedding(std::span<const int> steps, Index dim);

/// gamma * F + beta with (gamma - 1, beta) produced by block `block`'s MLP from
/// the joint embedding [N, E].
Array film_modulate(Tape& tape, const Array& features, const Array& embedding,
                    const ParamSet& params, const std::string& block);

/// Predicted noise [N, 1, 9, 9] for inputs [N, 4, 9, 9], steps t (length N) and
/// standardized scalars [N, 5]. Throws DomainError on non-finite inputs.
Array unet_forward(Tape& tape, const Array& channels, std::span<const int> steps,
                   const Array& scalars, const ParamSet& params, const UNetConfig& cfg);

}  // namespace ivdiff
