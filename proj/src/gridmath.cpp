#include "ivdiff/gridmath.hpp"

#include "ivdiff/errors.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace ivdiff {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ConstRowMap = Eigen::Map<const RowMatrix>;

double sigmoid(double x) {
    if (x >= 0.0) {
        return 1.0 / (1.0 + std::exp(-x));
    }
    const double e = std::exp(x);
    return e / (1.0 + e);
}

void require(bool ok, const std::string& what) {
    if (!ok) {
        throw ShapeError(what);
    }
}

// Splits a rank-3 or rank-4 image shape into (N, C, H, W).
struct ImageDims {
    Index n, c, h, w;
    bool batched;
};

ImageDims image_dims(const Array& a, const char* op) {
    if (a.rank() == 4) {
        return {a.dim(0), a.dim(1), a.dim(2), a.dim(3), true};
    }
    if (a.rank() == 3) {
        return {1, a.dim(0), a.dim(1), a.dim(2), false};
    }
    throw ShapeError(std::string(op) + ": expected [C,H,W] or [N,C,H,W], got " +
                     shape_string(a.shape()));
}

}  // namespace

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        os << (i ? "x" : "") << shape[i];
    }
    os << ']';
    return os.str();
}

Index shape_size(const Shape& shape) {
    Index n = 1;
    for (Index d : shape) {
        n *= d;
    }
    return n;
}

// Array -----------------------------------------------------------------------

Array::Array() : st_(std::make_shared<Storage>()) {}

Array::Array(Shape shape, Eigen::VectorXd data, bool requires_grad)
    : st_(std::make_shared<Storage>()) {
    for (Index d : shape) {
        require(d >= 0, "negative dimension in " + shape_string(shape));
    }
    require(shape_size(shape) == data.size(), "shape " + shape_string(shape) + " does not match " +
                                                  std::to_string(data.size()) + " values");
    st_->shape = std::move(shape);
    st_->data = std::move(data);
    st_->requires_grad = requires_grad;
    st_->tracked = requires_grad;
}

Array Array::zeros(Shape shape, bool requires_grad) {
    const Index n = shape_size(shape);
    return Array(std::move(shape), Eigen::VectorXd::Zero(n), requires_grad);
}

Array Array::constant(Shape shape, double value) {
    const Index n = shape_size(shape);
    return Array(std::move(shape), Eigen::VectorXd::Constant(n, value));
}

Array Array::scalar(double value, bool requires_grad) {
    return Array({1}, Eigen::VectorXd::Constant(1, value), requires_grad);
}

double Array::item() const {
    if (size() != 1) {
        throw ShapeError("item() on array of shape " + shape_string(shape()));
    }
    return st_->data[0];
}

Array Array::clone() const { return Array(st_->shape, st_->data, st_->requires_grad); }

Array Array::detach() const { return Array(st_->shape, st_->data, false); }

// GradMap ---------------------------------------------------------------------

Eigen::VectorXd GradMap::grad(const Array& a) const {
    auto it = grads_.find(a.id());
    if (it == grads_.end()) {
        return Eigen::VectorXd::Zero(a.size());
    }
    return it->second;
}

Eigen::VectorXd* GradMap::find(const void* id) {
    auto it = grads_.find(id);
    return it == grads_.end() ? nullptr : &it->second;
}

Eigen::VectorXd& GradMap::slot(const void* id, Index size) {
    auto [it, inserted] = grads_.try_emplace(id);
    if (inserted) {
        it->second = Eigen::VectorXd::Zero(size);
    }
    return it->second;
}

// Tape ------------------------------------------------------------------------

Array Tape::emit(Shape shape, Eigen::VectorXd data, std::vector<Array> inputs, BackwardFn fn) {
    Array out(std::move(shape), std::move(data), false);
    if (!recording()) {
        return out;
    }
    const bool any_tracked =
        std::any_of(inputs.begin(), inputs.end(), [](const Array& a) { return a.tracked(); });
    if (!any_tracked) {
        return out;
    }
    out.st_->tracked = true;
    entries_.push_back(Entry{std::move(inputs), out, std::move(fn)});
    return out;
}

GradMap Tape::backward(const Array& loss) const {
    if (loss.size() != 1) {
        throw ShapeError("backward: loss must be a scalar, got " + shape_string(loss.shape()));
    }
    auto last = std::find_if(entries_.rbegin(), entries_.rend(),
                             [&](const Entry& e) { return e.output.id() == loss.id(); });
    if (last == entries_.rend()) {
        throw GraphError("backward: loss was not produced on this tape");
    }
    GradMap grads;
    grads.slot(loss.id(), 1)[0] = 1.0;
    std::vector<Eigen::VectorXd*> slots;
    for (auto it = last; it != entries_.rend(); ++it) {
        Eigen::VectorXd* grad_out = grads.find(it->output.id());
        if (grad_out == nullptr) {
            continue;
        }
        slots.assign(it->inputs.size(), nullptr);
        for (std::size_t k = 0; k < it->inputs.size(); ++k) {
            const Array& in = it->inputs[k];
            if (in.tracked()) {
                slots[k] = &grads.slot(in.id(), in.size());
            }
        }
        it->fn(*grad_out, slots);
    }
    return grads;
}

GradMap backward(const Tape& tape, const Array& loss) { return tape.backward(loss); }

// Elementwise -----------------------------------------------------------------

Array elementwise(Tape& tape, ElementwiseKind kind, const Array& a, const Array* b, double factor) {
    using K = ElementwiseKind;
    const bool binary = kind == K::kAdd || kind == K::kSub || kind == K::kMul || kind == K::kDiv;
    if (binary) {
        if (b == nullptr) {
            throw ShapeError("elementwise: binary operation without second operand");
        }
        const bool same = b->shape() == a.shape();
        if (!same && b->size() != 1) {
            throw ShapeError("elementwise: shapes " + shape_string(a.shape()) + " and " +
                             shape_string(b->shape()) + " are not broadcast-compatible");
        }
        const Array rhs = *b;
        const Eigen::VectorXd bv = same ? rhs.data() : Eigen::VectorXd::Constant(a.size(), rhs[0]);
        const Eigen::VectorXd& av = a.data();
        Eigen::VectorXd out;
        switch (kind) {
            case K::kAdd: out = av + bv; break;
            case K::kSub: out = av - bv; break;
            case K::kMul: out = av.cwiseProduct(bv); break;
            default: out = av.cwiseQuotient(bv); break;
        }
        auto reduce = [same](Eigen::VectorXd* slot, const Eigen::VectorXd& g) {
            if (same) {
                *slot += g;
            } else {
                (*slot)[0] += g.sum();
            }
        };
        Eigen::VectorXd out_copy = kind == K::kDiv ? out : Eigen::VectorXd();
        return tape.emit(a.shape(), std::move(out), {a, rhs},
                         [kind, a, bv, out_copy, reduce](const Eigen::VectorXd& g,
                                                         std::span<Eigen::VectorXd*> gi) {
                             const Eigen::VectorXd& av = a.data();
                             switch (kind) {
                                 case K::kAdd:
                                     if (gi[0]) *gi[0] += g;
                                     if (gi[1]) reduce(gi[1], g);
                                     break;
                                 case K::kSub:
                                     if (gi[0]) *gi[0] += g;
                                     if (gi[1]) reduce(gi[1], -g);
                                     break;
                                 case K::kMul:
                                     if (gi[0]) *gi[0] += g.cwiseProduct(bv);
                                     if (gi[1]) reduce(gi[1], g.cwiseProduct(av));
                                     break;
                                 default:
                                     if (gi[0]) *gi[0] += g.cwiseQuotient(bv);
                                     if (gi[1]) {
                                         reduce(gi[1], -g.cwiseProduct(out_copy).cwiseQuotient(bv));
                                     }
                                     break;
                             }
                         });
    }

    const Eigen::VectorXd& av = a.data();
    switch (kind) {
        case K::kSilu: {
            Eigen::VectorXd sig = av.unaryExpr([](double x) { return sigmoid(x); });
            Eigen::VectorXd out = av.cwiseProduct(sig);
            return tape.emit(a.shape(), std::move(out), {a},
                             [av = av, sig](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                                 // d/dx x*s(x) = s + x*s*(1-s)
                                 Eigen::ArrayXd s = sig.array();
                                 *gi[0] += (g.array() * (s + av.array() * s * (1.0 - s))).matrix();
                             });
        }
        case K::kExp: {
            Eigen::VectorXd out = av.array().exp().matrix();
            Eigen::VectorXd keep = out;
            return tape.emit(a.shape(), std::move(out), {a},
                             [keep](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                                 *gi[0] += g.cwiseProduct(keep);
                             });
        }
        case K::kLog: {
            for (Index i = 0; i < av.size(); ++i) {
                if (!(av[i] > 0.0)) {
                    throw DomainError("log of non-positive value " + std::to_string(av[i]) +
                                      " at index " + std::to_string(i));
                }
            }
            Eigen::VectorXd out = av.array().log().matrix();
            return tape.emit(a.shape(), std::move(out), {a},
                             [av = av](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                                 *gi[0] += g.cwiseQuotient(av);
                             });
        }
        case K::kNegate:
            return tape.emit(a.shape(), -av, {a},
                             [](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) { *gi[0] -= g; });
        case K::kScale:
            return tape.emit(a.shape(), av * factor, {a},
                             [factor](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                                 *gi[0] += factor * g;
                             });
        case K::kRelu: {
            Eigen::VectorXd out = av.cwiseMax(0.0);
            return tape.emit(a.shape(), std::move(out), {a},
                             [av = av](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                                 *gi[0] += (av.array() > 0.0).select(g, 0.0).matrix();
                             });
        }
        default:
            throw ShapeError("elementwise: unary operation called with an operand kind mismatch");
    }
}

Array add(Tape& t, const Array& a, const Array& b) { return elementwise(t, ElementwiseKind::kAdd, a, &b); }
Array sub(Tape& t, const Array& a, const Array& b) { return elementwise(t, ElementwiseKind::kSub, a, &b); }
Array mul(Tape& t, const Array& a, const Array& b) { return elementwise(t, ElementwiseKind::kMul, a, &b); }
Array div(Tape& t, const Array& a, const Array& b) { return elementwise(t, ElementwiseKind::kDiv, a, &b); }
Array silu(Tape& t, const Array& a) { return elementwise(t, ElementwiseKind::kSilu, a); }
Array exp(Tape& t, const Array& a) { return elementwise(t, ElementwiseKind::kExp, a); }
Array log(Tape& t, const Array& a) { return elementwise(t, ElementwiseKind::kLog, a); }
Array negate(Tape& t, const Array& a) { return elementwise(t, ElementwiseKind::kNegate, a); }
Array relu(Tape& t, const Array& a) { return elementwise(t, ElementwiseKind::kRelu, a); }
Array scale(Tape& t, const Array& a, double factor) {
    return elementwise(t, ElementwiseKind::kScale, a, nullptr, factor);
}

Array clip(Tape& tape, const Array& a, double lo, double hi) {
    const Eigen::VectorXd& av = a.data();
    Eigen::VectorXd out = av.cwiseMax(lo).cwiseMin(hi);
    return tape.emit(a.shape(), std::move(out), {a},
                     [av = av, lo, hi](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         *gi[0] += (av.array() > lo && av.array() < hi).select(g, 0.0).matrix();
                     });
}

// Reductions ------------------------------------------------------------------

Array sum(Tape& tape, const Array& a) {
    return tape.emit({1}, Eigen::VectorXd::Constant(1, a.data().sum()), {a},
                     [](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         gi[0]->array() += g[0];
                     });
}

Array mean(Tape& tape, const Array& a) {
    if (a.size() == 0) {
        throw ShapeError("mean of an empty array");
    }
    const double inv = 1.0 / static_cast<double>(a.size());
    return tape.emit({1}, Eigen::VectorXd::Constant(1, a.data().sum() * inv), {a},
                     [inv](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         gi[0]->array() += g[0] * inv;
                     });
}

Array sum_per_row(Tape& tape, const Array& a) {
    if (a.rank() < 1 || a.dim(0) == 0) {
        throw ShapeError("sum_per_row: needs a non-empty leading axis");
    }
    const Index rows = a.dim(0);
    const Index cols = a.size() / rows;
    ConstRowMap m(a.data().data(), rows, cols);
    Eigen::VectorXd out = m.rowwise().sum();
    return tape.emit({rows}, std::move(out), {a},
                     [rows, cols](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         Eigen::Map<RowMatrix> dst(gi[0]->data(), rows, cols);
                         dst.colwise() += g;
                     });
}

Array reshape(Tape& tape, const Array& a, Shape shape) {
    if (shape_size(shape) != a.size()) {
        throw ShapeError("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
    }
    return tape.emit(std::move(shape), a.data(), {a},
                     [](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) { *gi[0] += g; });
}

Array concat_channels(Tape& tape, const Array& a, const Array& b) {
    require(a.rank() == 4 && b.rank() == 4, "concat_channels: expects rank-4 arrays");
    require(a.dim(0) == b.dim(0) && a.dim(2) == b.dim(2) && a.dim(3) == b.dim(3),
            "concat_channels: " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
    const Index n = a.dim(0);
    const Index sa = a.size() / n;
    const Index sb = b.size() / n;
    Eigen::VectorXd out(a.size() + b.size());
    for (Index i = 0; i < n; ++i) {
        out.segment(i * (sa + sb), sa) = a.data().segment(i * sa, sa);
        out.segment(i * (sa + sb) + sa, sb) = b.data().segment(i * sb, sb);
    }
    return tape.emit({n, a.dim(1) + b.dim(1), a.dim(2), a.dim(3)}, std::move(out), {a, b},
                     [n, sa, sb](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         for (Index i = 0; i < n; ++i) {
                             if (gi[0]) gi[0]->segment(i * sa, sa) += g.segment(i * (sa + sb), sa);
                             if (gi[1]) gi[1]->segment(i * sb, sb) += g.segment(i * (sa + sb) + sa, sb);
                         }
                     });
}

Array upsample_nearest(Tape& tape, const Array& a, Index out_h, Index out_w) {
    require(a.rank() == 4, "upsample_nearest: expects [N,C,H,W]");
    const Index nc = a.dim(0) * a.dim(1);
    const Index h = a.dim(2);
    const Index w = a.dim(3);
    std::vector<Index> src(static_cast<std::size_t>(out_h * out_w));
    for (Index i = 0; i < out_h; ++i) {
        for (Index j = 0; j < out_w; ++j) {
            src[static_cast<std::size_t>(i * out_w + j)] = (i * h / out_h) * w + (j * w / out_w);
        }
    }
    const Index in_plane = h * w;
    const Index out_plane = out_h * out_w;
    Eigen::VectorXd out(nc * out_plane);
    for (Index p = 0; p < nc; ++p) {
        for (Index q = 0; q < out_plane; ++q) {
            out[p * out_plane + q] = a.data()[p * in_plane + src[static_cast<std::size_t>(q)]];
        }
    }
    return tape.emit({a.dim(0), a.dim(1), out_h, out_w}, std::move(out), {a},
                     [src, nc, in_plane, out_plane](const Eigen::VectorXd& g,
                                                    std::span<Eigen::VectorXd*> gi) {
                         for (Index p = 0; p < nc; ++p) {
                             for (Index q = 0; q < out_plane; ++q) {
                                 (*gi[0])[p * in_plane + src[static_cast<std::size_t>(q)]] +=
                                     g[p * out_plane + q];
                             }
                         }
                     });
}

// Layers ----------------------------------------------------------------------

Array conv2d(Tape& tape, const Array& input, const Array& kernels, Index padding, Index stride) {
    const ImageDims d = image_dims(input, "conv2d");
    require(kernels.rank() == 4, "conv2d: kernels must be [C_out,C_in,kh,kw], got " +
                                     shape_string(kernels.shape()));
    const Index c_out = kernels.dim(0);
    const Index kh = kernels.dim(2);
    const Index kw = kernels.dim(3);
    if (kernels.dim(1) != d.c) {
        throw ShapeError("conv2d: input has " + std::to_string(d.c) + " channels, kernels expect " +
                         std::to_string(kernels.dim(1)));
    }
    require(stride >= 1 && padding >= 0, "conv2d: stride must be >= 1 and padding >= 0");
    const Index out_h = (d.h + 2 * padding - kh) / stride + 1;
    const Index out_w = (d.w + 2 * padding - kw) / stride + 1;
    require(out_h > 0 && out_w > 0, "conv2d: kernel larger than padded input");

    const Index k_rows = d.c * kh * kw;
    const Index plane = out_h * out_w;
    const Index cols_n = d.n * plane;
    auto cols = std::make_shared<Eigen::MatrixXd>(Eigen::MatrixXd::Zero(k_rows, cols_n));
    const double* x = input.data().data();
    for (Index n = 0; n < d.n; ++n) {
        for (Index c = 0; c < d.c; ++c) {
            for (Index ki = 0; ki < kh; ++ki) {
                for (Index kj = 0; kj < kw; ++kj) {
                    const Index row = (c * kh + ki) * kw + kj;
                    for (Index oy = 0; oy < out_h; ++oy) {
                        const Index iy = oy * stride - padding + ki;
                        if (iy < 0 || iy >= d.h) continue;
                        for (Index ox = 0; ox < out_w; ++ox) {
                            const Index ix = ox * stride - padding + kj;
                            if (ix < 0 || ix >= d.w) continue;
                            (*cols)(row, n * plane + oy * out_w + ox) =
                                x[((n * d.c + c) * d.h + iy) * d.w + ix];
                        }
                    }
                }
            }
        }
    }

    ConstRowMap weights(kernels.data().data(), c_out, k_rows);
    Eigen::MatrixXd prod = weights * (*cols);
    Eigen::VectorXd out(c_out * cols_n);
    for (Index n = 0; n < d.n; ++n) {
        for (Index co = 0; co < c_out; ++co) {
            out.segment((n * c_out + co) * plane, plane) =
                prod.row(co).segment(n * plane, plane).transpose();
        }
    }

    Shape shape = d.batched ? Shape{d.n, c_out, out_h, out_w} : Shape{c_out, out_h, out_w};
    return tape.emit(
        std::move(shape), std::move(out), {input, kernels},
        [cols, kernels, d, c_out, kh, kw, out_h, out_w, padding, stride, k_rows, plane,
         cols_n](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
            Eigen::MatrixXd g_mat(c_out, cols_n);
            for (Index n = 0; n < d.n; ++n) {
                for (Index co = 0; co < c_out; ++co) {
                    g_mat.row(co).segment(n * plane, plane) =
                        g.segment((n * c_out + co) * plane, plane).transpose();
                }
            }
            if (gi[1]) {
                RowMatrix dw = g_mat * cols->transpose();
                *gi[1] += Eigen::Map<const Eigen::VectorXd>(dw.data(), dw.size());
            }
            if (gi[0]) {
                ConstRowMap weights(kernels.data().data(), c_out, k_rows);
                Eigen::MatrixXd dcols = weights.transpose() * g_mat;
                double* dx = gi[0]->data();
                for (Index n = 0; n < d.n; ++n) {
                    for (Index c = 0; c < d.c; ++c) {
                        for (Index ki = 0; ki < kh; ++ki) {
                            for (Index kj = 0; kj < kw; ++kj) {
                                const Index row = (c * kh + ki) * kw + kj;
                                for (Index oy = 0; oy < out_h; ++oy) {
                                    const Index iy = oy * stride - padding + ki;
                                    if (iy < 0 || iy >= d.h) continue;
                                    for (Index ox = 0; ox < out_w; ++ox) {
                                        const Index ix = ox * stride - padding + kj;
                                        if (ix < 0 || ix >= d.w) continue;
                                        dx[((n * d.c + c) * d.h + iy) * d.w + ix] +=
                                            dcols(row, n * plane + oy * out_w + ox);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
}

Array bias_add(Tape& tape, const Array& input, const Array& bias) {
    const ImageDims d = image_dims(input, "bias_add");
    if (bias.rank() != 1 || bias.dim(0) != d.c) {
        throw ShapeError("bias_add: bias " + shape_string(bias.shape()) + " for " +
                         std::to_string(d.c) + " channels");
    }
    const Index plane = d.h * d.w;
    Eigen::VectorXd out = input.data();
    for (Index n = 0; n < d.n; ++n) {
        for (Index c = 0; c < d.c; ++c) {
            out.segment((n * d.c + c) * plane, plane).array() += bias[c];
        }
    }
    return tape.emit(input.shape(), std::move(out), {input, bias},
                     [d, plane](const Eigen::VectorXd& g, std::span<Eigen::VectorXd*> gi) {
                         if (gi[0]) *gi[0] += g;
                         if (gi[1]) {
                             for (Index n = 0; n < d.n; ++n) {
                                 for (Index c = 0; c < d.c; ++c) {
                                     (*gi[1])[c] += g.segment((n * d.c + c) * plane, plane).sum();
                                 }
                             }
                         }
                     });
}

Array linear(Tape& tape, const Array& input, const Array& weight, const Array& bias) {
    require(weight.rank() == 2, "linear: weight must be [d_out,d_in]");
    const Index d_out = weight.dim(0);
    const Index d_in = weight.dim(1);
    const bool batched = input.rank() == 2;
    require(input.rank() == 1 || batched, "linear: input must be [d_in] or [N,d_in]");
    const Index n = batched ? input.dim(0) : 1;
    const Index in_dim = batched ? input.dim(1) : input.dim(0);
    if (in_dim != d_in || bias.rank() != 1 || bias.dim(0) != d_out) {
        throw ShapeError("linear: input " + shape_string(input.shape()) + ", weight " +
                         shape_string(weight.shape()) + ", bias " + shape_string(bias.shape()));
    }
    ConstRowMap x(input.data().data(), n, d_in);
    ConstRowMap w(weight.data().data(), d_out, d_in);
    RowMatrix y = x * w.transpose();
    y.rowwise() += bias.data().transpose();
    Eigen::VectorXd out = Eigen::Map<const Eigen::VectorXd>(y.data(), y.size());
    Shape shape = batched ? Shape{n, d_out} : Shape{d_out};
    return tape.emit(std::move(shape), std::move(out), {input, weight, bias},
                     [input, weight, n, d_in, d_out](const Eigen::VectorXd& g,
                                                     std::span<Eigen::VectorXd*> gi) {
                         ConstRowMap gm(g.data(), n, d_out);
                         if (gi[0]) {
                             ConstRowMap w(weight.data().data(), d_out, d_in);
                             RowMatrix dx = gm * w;
                             *gi[0] += Eigen::Map<const Eigen::VectorXd>(dx.data(), dx.size());
                         }
                         if (gi[1]) {
                             ConstRowMap x(input.data().data(), n, d_in);
                             RowMatrix dw = gm.transpose() * x;
                             *gi[1] += Eigen::Map<const Eigen::VectorXd>(dw.data(), dw.size());
                         }
                         if (gi[2]) {
                             *gi[2] += gm.colwise().sum().transpose();
                         }
                     });
}

Array film(Tape& tape, const Array& features, const Array& gamma, const Array& beta) {
    require(features.rank() == 4, "film: features must be [N,C,H,W]");
    const Index n = features.dim(0);
    const Index c = features.dim(1);
    const Shape coeff{n, c};
    if (gamma.shape() != coeff || beta.shape() != coeff) {
        throw ShapeError("film: gamma " + shape_string(gamma.shape()) + " / beta " +
                         shape_string(beta.shape()) + " for features " +
                         shape_string(features.shape()));
    }
    const Index plane = features.dim(2) * features.dim(3);
    Eigen::VectorXd out(features.size());
    for (Index i = 0; i < n * c; ++i) {
        out.segment(i * plane, plane) =
            (gamma[i] * features.data().segment(i * plane, plane).array() + beta[i]).matrix();
    }
    return tape.emit(features.shape(), std::move(out), {features, gamma, beta},
                     [features, gamma, n, c, plane](const Eigen::VectorXd& g,
                                                    std::span<Eigen::VectorXd*> gi) {
                         for (Index i = 0; i < n * c; ++i) {
                             auto gs = g.segment(i * plane, plane);
                             if (gi[0]) gi[0]->segment(i * plane, plane) += gamma[i] * gs;
                             if (gi[1]) (*gi[1])[i] += gs.dot(features.data().segment(i * plane, plane));
                             if (gi[2]) (*gi[2])[i] += gs.sum();
                         }
                     });
}

}  // namespace ivdiff
