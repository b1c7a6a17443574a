#pragma once

// Dense row-major arrays with tape-based reverse-mode differentiation.
//
// Arrays are handles: copying an Array shares its storage, which is what gives
// an array an identity on the tape. Use clone() for an independent copy.
// Operations take the Tape they record onto as their first argument. A tape in
// inference mode records nothing, so the same forward code serves training
// and sampling.

#include <Eigen/Core>

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

namespace ivdiff {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

std::string shape_string(const Shape& shape);
Index shape_size(const Shape& shape);

class Array {
public:
    Array();
    Array(Shape shape, Eigen::VectorXd data, bool requires_grad = false);

    static Array zeros(Shape shape, bool requires_grad = false);
    static Array constant(Shape shape, double value);
    static Array scalar(double value, bool requires_grad = false);

    const Shape& shape() const { return st_->shape; }
    Index dim(std::size_t i) const { return st_->shape.at(i); }
    std::size_t rank() const { return st_->shape.size(); }
    Index size() const { return st_->data.size(); }

    const Eigen::VectorXd& data() const { return st_->data; }
    /// Direct write access, for optimizer updates. Never use on arrays that are
    /// inputs of a live tape.
    Eigen::VectorXd& mutable_data() { return st_->data; }

    double operator[](Index i) const { return st_->data[i]; }
    double item() const;

    bool requires_grad() const { return st_->requires_grad; }
    /// True when gradients flow into this array (a leaf requiring grad or the
    /// output of a recorded operation).
    bool tracked() const { return st_->tracked; }
    const void* id() const { return st_.get(); }

    Array clone() const;
    /// Same data viewed under a new shape (shares storage, not recorded).
    Array detach() const;

private:
    friend class Tape;
    struct Storage {
        Shape shape;
        Eigen::VectorXd data;
        bool requires_grad = false;
        bool tracked = false;
    };
    std::shared_ptr<Storage> st_;
};

/// Gradients keyed by array identity. Absent entries read as zero.
class GradMap {
public:
    Eigen::VectorXd grad(const Array& a) const;
    bool contains(const Array& a) const { return grads_.count(a.id()) > 0; }
    Eigen::VectorXd* find(const void* id);
    Eigen::VectorXd& slot(const void* id, Index size);

private:
    std::unordered_map<const void*, Eigen::VectorXd> grads_;
};

/// Backward closure: receives dL/doutput and one accumulator per input
/// (nullptr for inputs that take no gradient). Implementations add into the
/// accumulators.
using BackwardFn =
    std::function<void(const Eigen::VectorXd& grad_out, std::span<Eigen::VectorXd*> grad_in)>;

class Tape {
public:
    enum class Mode { kRecord, kInference };

    explicit Tape(Mode mode = Mode::kRecord) : mode_(mode) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    bool recording() const { return mode_ == Mode::kRecord; }
    std::size_t size() const { return entries_.size(); }

    /// Creates the output array of an operation and, if any input is tracked,
    /// records the backward closure.
    Array emit(Shape shape, Eigen::VectorXd data, std::vector<Array> inputs, BackwardFn fn);

    GradMap backward(const Array& loss) const;

private:
    struct Entry {
        std::vector<Array> inputs;
        Array output;
        BackwardFn fn;
    };
    Mode mode_;
    std::vector<Entry> entries_;
};

/// dL/d(every tracked array) for a scalar loss recorded on the tape.
GradMap backward(const Tape& tape, const Array& loss);

// Elementwise -----------------------------------------------------------------

enum class ElementwiseKind { kAdd, kSub, kMul, kDiv, kSilu, kExp, kLog, kNegate, kScale, kRelu };

/// Binary kinds need `b` with the same shape as `a` or a single element.
/// kScale multiplies by `factor`.
Array elementwise(Tape& tape, ElementwiseKind kind, const Array& a, const Array* b = nullptr,
                  double factor = 1.0);

Array add(Tape& tape, const Array& a, const Array& b);
Array sub(Tape& tape, const Array& a, const Array& b);
Array mul(Tape& tape, const Array& a, const Array& b);
Array div(Tape& tape, const Array& a, const Array& b);
Array silu(Tape& tape, const Array& a);
Array exp(Tape& tape, const Array& a);
/// Throws DomainError on non-positive entries.
Array log(Tape& tape, const Array& a);
Array negate(Tape& tape, const Array& a);
Array scale(Tape& tape, const Array& a, double factor);
/// max(0, x); gradient 0 at x <= 0.
Array relu(Tape& tape, const Array& a);
/// Clamp to [lo, hi]; gradient passes only strictly inside the interval.
Array clip(Tape& tape, const Array& a, double lo, double hi);

// Reductions and reshaping ----------------------------------------------------

Array sum(Tape& tape, const Array& a);
Array mean(Tape& tape, const Array& a);
/// Sums over every axis except the leading one: [N, ...] -> [N].
Array sum_per_row(Tape& tape, const Array& a);
Array reshape(Tape& tape, const Array& a, Shape shape);
/// [N, Ca, H, W] ++ [N, Cb, H, W] -> [N, Ca + Cb, H, W].
Array concat_channels(Tape& tape, const Array& a, const Array& b);
/// Nearest-neighbour resize of [N, C, H, W]: source row = floor(i * H / out_h).
Array upsample_nearest(Tape& tape, const Array& a, Index out_h, Index out_w);

// Layers ----------------------------------------------------------------------

/// Cross-correlation with zero padding. Input [C_in, H, W] or [N, C_in, H, W],
/// kernels [C_out, C_in, kh, kw].
Array conv2d(Tape& tape, const Array& input, const Array& kernels, Index padding, Index stride);
/// Adds bias[c] to every element of channel c of [N, C, H, W] (or [C, H, W]).
Array bias_add(Tape& tape, const Array& input, const Array& bias);
/// input [d_in] or [N, d_in], weight [d_out, d_in], bias [d_out].
Array linear(Tape& tape, const Array& input, const Array& weight, const Array& bias);
/// gamma * F + beta per channel. F [N, C, H, W], gamma/beta [N, C].
Array film(Tape& tape, const Array& features, const Array& gamma, const Array& beta);

}  // namespace ivdiff
