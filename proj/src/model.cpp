#include "ivdiff/model.hpp"

#include "ivdiff/errors.hpp"
#include "ivdiff/random.hpp"

#include <cmath>

namespace ivdiff {

namespace {

struct ConvBlock {
    const char* name;
    Index in, out, kernel, stride, padding;
};

std::vector<ConvBlock> conv_blocks(const UNetConfig& c) {
    const Index e = c.enc_channels, b = c.bottle_channels;
    return {
        {"enc1", c.in_channels, e, 3, 1, 1},
        {"enc2", e, e, 3, 1, 1},
        {"down", e, b, 3, 2, 1},
        {"bottle", b, b, 3, 1, 1},
        {"up", b, e, 3, 1, 1},
        {"dec1", 2 * e, e, 3, 1, 1},
        {"dec2", e, e, 3, 1, 1},
    };
}

Index conv_out(Index size, Index kernel, Index stride, Index padding) {
    return (size + 2 * padding - kernel) / stride + 1;
}

Array conv_block(Tape& tape, const Array& x, const Array& emb, const ParamSet& p,
                 const ConvBlock& b) {
    const std::string n(b.name);
    Array h = conv2d(tape, x, p.get(n + ".conv.weight"), b.padding, b.stride);
    h = bias_add(tape, h, p.get(n + ".conv.bias"));
    h = film_modulate(tape, h, emb, p, n);
    return silu(tape, h);
}

void check_finite(const Array& a, const char* what) {
    if (!a.data().allFinite()) {
        throw DomainError(std::string("unet_forward: non-finite values in ") + what);
    }
}

}  // namespace

void UNetConfig::validate() const {
    for (Index v : {in_channels, out_channels, enc_channels, bottle_channels, time_embed_dim,
                    scalar_dim, scalar_embed_dim, film_hidden1, film_hidden2}) {
        if (v <= 0) {
            throw InputError("UNetConfig: all sizes must be positive");
        }
    }
    if (time_embed_dim % 2 != 0 || time_embed_dim < 4) {
        throw InputError("UNetConfig: time_embed_dim must be even and at least 4");
    }
}

// ParamSet --------------------------------------------------------------------

void ParamSet::add(const std::string& name, Array value) {
    if (index_.count(name) > 0) {
        throw InputError("duplicate parameter name " + name);
    }
    index_.emplace(name, arrays_.size());
    names_.push_back(name);
    arrays_.push_back(std::move(value));
}

const Array& ParamSet::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
        throw InputError("unknown parameter " + name);
    }
    return arrays_[it->second];
}

Array& ParamSet::get(const std::string& name) {
    return const_cast<Array&>(static_cast<const ParamSet&>(*this).get(name));
}

Index ParamSet::total_count() const {
    Index n = 0;
    for (const Array& a : arrays_) {
        n += a.size();
    }
    return n;
}

ParamSet ParamSet::clone(bool requires_grad) const {
    ParamSet out;
    for (std::size_t i = 0; i < arrays_.size(); ++i) {
        out.add(names_[i], Array(arrays_[i].shape(), arrays_[i].data(), requires_grad));
    }
    return out;
}

// Construction ----------------------------------------------------------------

std::vector<std::pair<std::string, Shape>> param_layout(const UNetConfig& cfg) {
    cfg.validate();
    std::vector<std::pair<std::string, Shape>> out;
    const Index emb = cfg.joint_embed_dim();
    out.push_back({"scalar.l1.weight", {cfg.scalar_embed_dim, cfg.scalar_dim}});
    out.push_back({"scalar.l1.bias", {cfg.scalar_embed_dim}});
    out.push_back({"scalar.l2.weight", {cfg.scalar_embed_dim, cfg.scalar_embed_dim}});
    out.push_back({"scalar.l2.bias", {cfg.scalar_embed_dim}});
    for (const ConvBlock& b : conv_blocks(cfg)) {
        const std::string n(b.name);
        out.push_back({n + ".conv.weight", {b.out, b.in, b.kernel, b.kernel}});
        out.push_back({n + ".conv.bias", {b.out}});
        out.push_back({n + ".film.l1.weight", {cfg.film_hidden1, emb}});
        out.push_back({n + ".film.l1.bias", {cfg.film_hidden1}});
        out.push_back({n + ".film.l2.weight", {cfg.film_hidden2, cfg.film_hidden1}});
        out.push_back({n + ".film.l2.bias", {cfg.film_hidden2}});
        out.push_back({n + ".film.gamma.weight", {b.out, cfg.film_hidden2}});
        out.push_back({n + ".film.gamma.bias", {b.out}});
        out.push_back({n + ".film.beta.weight", {b.out, cfg.film_hidden2}});
        out.push_back({n + ".film.beta.bias", {b.out}});
    }
    out.push_back({"out.conv.weight", {cfg.out_channels, cfg.enc_channels, 1, 1}});
    out.push_back({"out.conv.bias", {cfg.out_channels}});
    return out;
}

ParamStore param_init(const UNetConfig& cfg, std::uint64_t seed) {
    Rng rng(sub_seed(seed, 0x5eed));
    ParamStore store;
    const auto layout = param_layout(cfg);
    for (std::size_t i = 0; i < layout.size(); ++i) {
        const auto& [name, shape] = layout[i];
        // Biases share the fan-in of the weight that precedes them.
        const Shape& wshape = shape.size() == 1 ? layout[i - 1].second : shape;
        Index fan_in = 1;
        for (std::size_t d = 1; d < wshape.size(); ++d) {
            fan_in *= wshape[d];
        }
        double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
        if (name.find(".film.gamma.") != std::string::npos ||
            name.find(".film.beta.") != std::string::npos) {
            bound *= 0.1;
        }
        std::uniform_real_distribution<double> dist(-bound, bound);
        Eigen::VectorXd v(shape_size(shape));
        for (Index k = 0; k < v.size(); ++k) {
            v[k] = dist(rng);
        }
        store.live.add(name, Array(shape, std::move(v), true));
    }
    store.ema = store.live.clone(false);
    return store;
}

// Embeddings and FiLM ---------------------------------------------------------

Eigen::VectorXd sinusoidal_embed(double t, Index dim) {
    if (dim % 2 != 0 || dim < 4) {
        throw InputError("sinusoidal_embed: dimension must be even and at least 4");
    }
    const Index half = dim / 2;
    Eigen::VectorXd e(dim);
    for (Index k = 0; k < half; ++k) {
        const double w = std::pow(10000.0, -static_cast<double>(k) / static_cast<double>(half - 1));
        e[k] = std::sin(w * t);
        e[half + k] = std::cos(w * t);
    }
    return e;
}

Array time_embedding(std::span<const int> steps, Index dim) {
    const Index n = static_cast<Index>(steps.size());
    Eigen::VectorXd data(n * dim);
    for (Index i = 0; i < n; ++i) {
        data.segment(i * dim, dim) = sinusoidal_embed(steps[static_cast<std::size_t>(i)], dim);
    }
    return Array({n, dim}, std::move(data));
}

Array film_modulate(Tape& tape, const Array& features, const Array& embedding,
                    const ParamSet& p, const std::string& block) {
    if (features.rank() != 4 || embedding.rank() != 2 || embedding.dim(0) != features.dim(0)) {
        throw ShapeError("film_modulate: features " + shape_string(features.shape()) +
                         " and embedding " + shape_string(embedding.shape()) + " disagree");
    }
    const std::string n = block + ".film.";
    Array h = silu(tape, linear(tape, embedding, p.get(n + "l1.weight"), p.get(n + "l1.bias")));
    h = silu(tape, linear(tape, h, p.get(n + "l2.weight"), p.get(n + "l2.bias")));
    const Array gamma_delta = linear(tape, h, p.get(n + "gamma.weight"), p.get(n + "gamma.bias"));
    const Array beta = linear(tape, h, p.get(n + "beta.weight"), p.get(n + "beta.bias"));
    if (gamma_delta.dim(1) != features.dim(1)) {
        throw ShapeError("film_modulate: block " + block + " emits " +
                         std::to_string(gamma_delta.dim(1)) + " channels for features with " +
                         std::to_string(features.dim(1)));
    }
    const Array gamma = add(tape, gamma_delta, Array::scalar(1.0));
    return film(tape, features, gamma, beta);
}

// Forward ---------------------------------------------------------------------

Array unet_forward(Tape& tape, const Array& channels, std::span<const int> steps,
                   const Array& scalars, const ParamSet& p, const UNetConfig& cfg) {
    if (channels.rank() != 4 || channels.dim(1) != cfg.in_channels) {
        throw ShapeError("unet_forward: expected [N, " + std::to_string(cfg.in_channels) +
                         ", H, W] input, got " + shape_string(channels.shape()));
    }
    const Index n = channels.dim(0);
    if (static_cast<Index>(steps.size()) != n || scalars.rank() != 2 || scalars.dim(0) != n ||
        scalars.dim(1) != cfg.scalar_dim) {
        throw ShapeError("unet_forward: batch of " + std::to_string(n) + " needs " +
                         std::to_string(n) + " steps and scalars [N, " +
                         std::to_string(cfg.scalar_dim) + "], got " +
                         std::to_string(steps.size()) + " and " + shape_string(scalars.shape()));
    }
    check_finite(channels, "channels");
    check_finite(scalars, "scalars");

    const Array t_emb = time_embedding(steps, cfg.time_embed_dim);
    Array s_emb = silu(tape, linear(tape, scalars, p.get("scalar.l1.weight"), p.get("scalar.l1.bias")));
    s_emb = linear(tape, s_emb, p.get("scalar.l2.weight"), p.get("scalar.l2.bias"));
    const Array joint = reshape(
        tape,
        concat_channels(tape, reshape(tape, t_emb, {n, cfg.time_embed_dim, 1, 1}),
                        reshape(tape, s_emb, {n, cfg.scalar_embed_dim, 1, 1})),
        {n, cfg.joint_embed_dim()});

    const auto blocks = conv_blocks(cfg);
    const Index h = channels.dim(2), w = channels.dim(3);
    const Index hd = conv_out(h, blocks[2].kernel, blocks[2].stride, blocks[2].padding);
    const Index wd = conv_out(w, blocks[2].kernel, blocks[2].stride, blocks[2].padding);

    Array x = conv_block(tape, channels, joint, p, blocks[0]);
    const Array skip = conv_block(tape, x, joint, p, blocks[1]);
    x = conv_block(tape, skip, joint, p, blocks[2]);
    if (x.dim(2) != hd || x.dim(3) != wd) {
        throw ShapeError("unet_forward: downsampling produced " + shape_string(x.shape()));
    }
    x = conv_block(tape, x, joint, p, blocks[3]);
    x = upsample_nearest(tape, x, h, w);
    x = conv_block(tape, x, joint, p, blocks[4]);
    x = concat_channels(tape, x, skip);
    x = conv_block(tape, x, joint, p, blocks[5]);
    x = conv_block(tape, x, joint, p, blocks[6]);
    x = conv2d(tape, x, p.get("out.conv.weight"), 0, 1);
    return bias_add(tape, x, p.get("out.conv.bias"));
}

}  // namespace ivdiff
