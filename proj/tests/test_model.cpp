#include "ivdiff/errors.hpp"
#include "ivdiff/model.hpp"
#include "ivdiff/random.hpp"
#include "test_util.hpp"

#include <gtest/gtest.h>

#include <limits>

namespace ivdiff {
namespace {

using testing::random_array;

struct Inputs {
    Array channels, scalars;
    std::vector<int> steps;
};

Inputs random_inputs(Index n, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    Inputs in;
    Eigen::VectorXd c(n * 4 * 81), s(n * 5);
    std::normal_distribution<double> d;
    for (Index i = 0; i < c.size(); ++i) c[i] = d(rng);
    for (Index i = 0; i < s.size(); ++i) s[i] = d(rng);
    in.channels = Array({n, 4, 9, 9}, c);
    in.scalars = Array({n, 5}, s);
    std::uniform_int_distribution<int> t(1, 500);
    for (Index i = 0; i < n; ++i) in.steps.push_back(t(rng));
    return in;
}

Array forward(const Inputs& in, const ParamSet& p, Tape& tape) {
    return unet_forward(tape, in.channels, in.steps, in.scalars, p, UNetConfig{});
}

// Per-block sizes written out from the layer table: conv weights and bias,
// then the FiLM MLP (joint embedding 20 -> 10 -> 10 -> gamma, beta).
Index expected_count() {
    auto film = [](Index c) { return (20 * 10 + 10) + (10 * 10 + 10) + 2 * (10 * c + c); };
    auto block = [&](Index in, Index out) { return out * in * 9 + out + film(out); };
    const Index scalar_mlp = 5 * 10 + 10 + 10 * 10 + 10;
    return scalar_mlp + block(4, 16) + block(16, 16) + block(16, 30) + block(30, 30) + block(30, 16) +
           block(32, 16) + block(16, 16) + (16 + 1);
}

TEST(Model, ParameterCountIsPinned) {
    const ParamStore s = param_init(UNetConfig{}, 1);
    EXPECT_EQ(expected_count(), 32179);
    EXPECT_EQ(s.live.total_count(), 32179);
    EXPECT_EQ(s.live.size(), param_layout(UNetConfig{}).size());
}

TEST(Model, InitIsSeededAndEmaStartsEqual) {
    const ParamStore a = param_init(UNetConfig{}, 5), b = param_init(UNetConfig{}, 5), c = param_init(UNetConfig{}, 6);
    for (std::size_t i = 0; i < a.live.size(); ++i) {
        EXPECT_EQ(a.live.arrays()[i].data(), b.live.arrays()[i].data());
        EXPECT_EQ(a.live.arrays()[i].data(), a.ema.arrays()[i].data());
        EXPECT_NE(a.live.arrays()[i].id(), a.ema.arrays()[i].id());
        EXPECT_TRUE(a.live.arrays()[i].requires_grad());
        EXPECT_FALSE(a.ema.arrays()[i].requires_grad());
    }
    EXPECT_NE(a.live.get("enc1.conv.weight").data(), c.live.get("enc1.conv.weight").data());
}

TEST(Model, SinusoidalEmbedding) {
    const Eigen::VectorXd zero = sinusoidal_embed(0.0, 10);
    EXPECT_TRUE(zero.head(5).isZero(0.0));
    EXPECT_TRUE(zero.tail(5).isOnes(0.0));
    std::vector<Eigen::VectorXd> all;
    for (int t = 1; t <= 500; ++t) {
        all.push_back(sinusoidal_embed(t, 10));
        EXPECT_LE(all.back().cwiseAbs().maxCoeff(), 1.0);
    }
    for (std::size_t i = 0; i < all.size(); ++i)
        for (std::size_t j = i + 1; j < all.size(); ++j) EXPECT_NE(all[i], all[j]) << i + 1 << " vs " << j + 1;
    EXPECT_THROW(sinusoidal_embed(1.0, 9), InputError);
}

TEST(Model, FilmModulateIdentityAndConstant) {
    ParamStore s = param_init(UNetConfig{}, 2);
    ParamSet& p = s.live;
    for (const char* n : {"enc1.film.gamma.weight", "enc1.film.gamma.bias", "enc1.film.beta.weight", "enc1.film.beta.bias"})
        p.get(n).mutable_data().setZero();
    std::mt19937_64 rng(3);
    const Array f = random_array({2, 16, 9, 9}, rng, false);
    const Array emb = random_array({2, 20}, rng, false);
    Tape tape;
    EXPECT_EQ(film_modulate(tape, f, emb, p, "enc1").data(), f.data());

    // gamma - 1 = -1 and beta = b_c through the head biases.
    p.get("enc1.film.gamma.bias").mutable_data().setConstant(-1.0);
    for (Index c = 0; c < 16; ++c) p.get("enc1.film.beta.bias").mutable_data()[c] = 0.1 * c;
    const Array y = film_modulate(tape, f, emb, p, "enc1");
    for (Index n = 0; n < 2; ++n)
        for (Index c = 0; c < 16; ++c)
            for (Index k = 0; k < 81; ++k) EXPECT_NEAR(y[(n * 16 + c) * 81 + k], 0.1 * c, 1e-15);

    EXPECT_THROW(film_modulate(tape, f, random_array({2, 19}, rng, false), p, "enc1"), ShapeError);
}

TEST(Model, ForwardShapeAndDeterminism) {
    const ParamStore s = param_init(UNetConfig{}, 4);
    Inputs in = random_inputs(3, 7);
    for (int t : {1, 2, 250, 499, 500}) {
        in.steps = {t, t, t};
        Tape a(Tape::Mode::kInference), b(Tape::Mode::kInference);
        const Array ya = forward(in, s.live, a), yb = forward(in, s.live, b);
        EXPECT_EQ(ya.shape(), (Shape{3, 1, 9, 9}));
        EXPECT_EQ(ya.data(), yb.data());
    }
}

TEST(Model, BatchRowsAreIndependent) {
    const ParamStore s = param_init(UNetConfig{}, 8);
    const Inputs in = random_inputs(3, 9);
    Tape tape(Tape::Mode::kInference);
    const Array all = forward(in, s.live, tape);
    Inputs one;
    one.channels = Array({1, 4, 9, 9}, in.channels.data().segment(324, 324));
    one.scalars = Array({1, 5}, in.scalars.data().segment(5, 5));
    one.steps = {in.steps[1]};
    const Array single = forward(one, s.live, tape);
    EXPECT_LT((single.data() - all.data().segment(81, 81)).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(Model, ScalarConditioningIsLive) {
    const ParamStore s = param_init(UNetConfig{}, 10);
    Inputs in = random_inputs(2, 11);
    Tape tape(Tape::Mode::kInference);
    const Array base = forward(in, s.live, tape);
    in.scalars = Array::zeros({2, 5});
    const Array zeroed = forward(in, s.live, tape);
    EXPECT_GT((base.data() - zeroed.data()).cwiseAbs().maxCoeff(), 0.0);
}

TEST(Model, NonFiniteInputIsDomainError) {
    const ParamStore s = param_init(UNetConfig{}, 12);
    Inputs in = random_inputs(1, 13);
    in.channels.mutable_data()[17] = std::numeric_limits<double>::quiet_NaN();
    Tape tape;
    EXPECT_THROW(forward(in, s.live, tape), DomainError);
    in = random_inputs(1, 13);
    in.scalars.mutable_data()[2] = std::numeric_limits<double>::infinity();
    EXPECT_THROW(forward(in, s.live, tape), DomainError);
}

TEST(Model, InitialOutputsAreModerate) {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const ParamStore s = param_init(UNetConfig{}, seed);
        const Inputs in = random_inputs(1, 1000 + seed);
        Tape tape(Tape::Mode::kInference);
        EXPECT_LT(forward(in, s.live, tape).data().cwiseAbs().maxCoeff(), 10.0) << seed;
    }
}

TEST(Model, GradientOfOutputSumMatchesFiniteDifferences) {
    const ParamStore s = param_init(UNetConfig{}, 14);
    const Inputs in = random_inputs(2, 15);
    const ParamSet& p = s.live;
    // Four sampled elements per parameter tensor.
    std::mt19937_64 rng(16);
    std::vector<std::pair<std::size_t, Index>> picks;
    for (std::size_t a = 0; a < p.size(); ++a) {
        std::uniform_int_distribution<Index> d(0, p.arrays()[a].size() - 1);
        for (int k = 0; k < 4; ++k) picks.emplace_back(a, d(rng));
    }
    const double err = testing::max_gradient_error(
        [&](Tape& t, const std::vector<Array>&) { return sum(t, forward(in, p, t)); }, p.arrays(), 1e-4, picks);
    EXPECT_LT(err, 1e-4);
}

}  // namespace
}  // namespace ivdiff
