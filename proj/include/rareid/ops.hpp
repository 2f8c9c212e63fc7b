#pragma once

#include <cmath>
#include <cstddef>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "rareid/tensor.hpp"

// Differentiable operators. Every op takes the tape first; when the tape is
// recording and an operand requires grad, the op records a closure that
// accumulates (+=) into the operand gradients.

namespace rareid {

namespace detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

inline Tensor make_output(Shape shape, bool track) {
    Tensor out(std::move(shape));
    out.set_requires_grad(track);
    return out;
}

/// Per-output-element offsets into two broadcast operands.
struct BroadcastPlan {
    Shape out;
    std::vector<std::size_t> stride_a;
    std::vector<std::size_t> stride_b;
    bool same = false;
};

inline Shape broadcast_shape(const Shape& a, const Shape& b) {
    const std::size_t rank = std::max(a.size(), b.size());
    Shape out(rank);
    for (std::size_t i = 0; i < rank; ++i) {
        const std::size_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
        const std::size_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError("incompatible broadcast between " + to_string(a) + " and " + to_string(b));
        }
        out[i] = std::max(ea, eb);
    }
    return out;
}

inline std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    const std::size_t rank = out.size();
    std::vector<std::size_t> strides(rank, 0);
    std::size_t stride = 1;
    for (std::size_t k = 0; k < in.size(); ++k) {
        const std::size_t in_axis = in.size() - 1 - k;
        const std::size_t out_axis = rank - 1 - k;
        strides[out_axis] = in[in_axis] == 1 ? 0 : stride;
        stride *= in[in_axis];
    }
    return strides;
}

inline BroadcastPlan plan_broadcast(const Shape& a, const Shape& b) {
    BroadcastPlan plan;
    plan.out = broadcast_shape(a, b);
    plan.same = a == b;
    plan.stride_a = broadcast_strides(a, plan.out);
    plan.stride_b = broadcast_strides(b, plan.out);
    return plan;
}

/// Calls fn(out_index, a_offset, b_offset) in row-major output order.
template <typename Fn>
void for_each_broadcast(const BroadcastPlan& plan, Fn&& fn) {
    const std::size_t total = numel_of(plan.out);
    if (plan.same) {
        for (std::size_t i = 0; i < total; ++i) fn(i, i, i);
        return;
    }
    const std::size_t rank = plan.out.size();
    const std::size_t inner = plan.out[rank - 1];
    const std::size_t sa = plan.stride_a[rank - 1];
    const std::size_t sb = plan.stride_b[rank - 1];
    std::vector<std::size_t> idx(rank, 0);
    std::size_t base_a = 0;
    std::size_t base_b = 0;
    for (std::size_t i = 0; i < total; i += inner) {
        for (std::size_t j = 0; j < inner; ++j) fn(i + j, base_a + j * sa, base_b + j * sb);
        // odometer over the outer dimensions
        for (std::size_t axis = rank - 1; axis-- > 0;) {
            ++idx[axis];
            base_a += plan.stride_a[axis];
            base_b += plan.stride_b[axis];
            if (idx[axis] < plan.out[axis]) break;
            base_a -= plan.stride_a[axis] * idx[axis];
            base_b -= plan.stride_b[axis] * idx[axis];
            idx[axis] = 0;
        }
    }
}

template <typename Forward, typename Derivative>
Tensor unary(Tape& tape, const Tensor& x, const char* name, Forward f, Derivative df) {
    const bool track = tape.tracks({&x});
    Tensor out = make_output(x.shape(), track);
    auto xs = x.data();
    auto os = out.data();
    for (std::size_t i = 0; i < xs.size(); ++i) os[i] = f(xs[i]);
    if (track) {
        tape.record(name, [x = x, out, df]() mutable {
            auto g = out.grad();
            auto xs = x.data();
            auto os = out.data();
            auto gx = x.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i] * df(xs[i], os[i]);
        });
    }
    return out;
}

inline double stable_sigmoid(double v) {
    if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
    const double e = std::exp(v);
    return e / (1.0 + e);
}

inline std::size_t channel_axis(const Tensor& x) {
    if (x.rank() == 3) return 0;
    if (x.rank() == 4) return 1;
    throw ShapeError("expected a C×H×W or N×C×H×W tensor, got " + to_string(x.shape()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Pointwise

inline Tensor sigmoid(Tape& tape, const Tensor& x) {
    return detail::unary(
        tape, x, "sigmoid", [](double v) { return detail::stable_sigmoid(v); },
        [](double, double s) { return s * (1.0 - s); });
}

inline Tensor relu(Tape& tape, const Tensor& x) {
    return detail::unary(
        tape, x, "relu", [](double v) { return v > 0.0 ? v : 0.0; },
        [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

/// 1 − x, the reverse of a mask.
inline Tensor sub_from_one(Tape& tape, const Tensor& x) {
    return detail::unary(
        tape, x, "sub_from_one", [](double v) { return 1.0 - v; }, [](double, double) { return -1.0; });
}

inline Tensor scale(Tape& tape, const Tensor& x, double factor) {
    return detail::unary(
        tape, x, "scale", [factor](double v) { return v * factor; }, [factor](double, double) { return factor; });
}

inline Tensor add(Tape& tape, const Tensor& a, const Tensor& b) {
    const auto plan = detail::plan_broadcast(a.shape(), b.shape());
    const bool track = tape.tracks({&a, &b});
    Tensor out = detail::make_output(plan.out, track);
    {
        auto as = a.data();
        auto bs = b.data();
        auto os = out.data();
        detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { os[i] = as[ia] + bs[ib]; });
    }
    if (track) {
        tape.record("add", [a = a, b = b, out, plan]() mutable {
            auto g = out.grad();
            if (a.requires_grad()) {
                auto ga = a.grad();
                detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t) { ga[ia] += g[i]; });
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t, std::size_t ib) { gb[ib] += g[i]; });
            }
        });
    }
    return out;
}

/// Elementwise product with trailing-dimension broadcasting.
inline Tensor mul(Tape& tape, const Tensor& a, const Tensor& b) {
    const auto plan = detail::plan_broadcast(a.shape(), b.shape());
    const bool track = tape.tracks({&a, &b});
    Tensor out = detail::make_output(plan.out, track);
    {
        auto as = a.data();
        auto bs = b.data();
        auto os = out.data();
        detail::for_each_broadcast(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) { os[i] = as[ia] * bs[ib]; });
    }
    if (track) {
        tape.record("mul", [a = a, b = b, out, plan]() mutable {
            auto g = out.grad();
            auto as = a.data();
            auto bs = b.data();
            if (a.requires_grad()) {
                auto ga = a.grad();
                detail::for_each_broadcast(plan,
                                           [&](std::size_t i, std::size_t ia, std::size_t ib) { ga[ia] += g[i] * bs[ib]; });
            }
            if (b.requires_grad()) {
                auto gb = b.grad();
                detail::for_each_broadcast(plan,
                                           [&](std::size_t i, std::size_t ia, std::size_t ib) { gb[ib] += g[i] * as[ia]; });
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Reductions and reshaping

inline Tensor sum(Tape& tape, const Tensor& x) {
    const bool track = tape.tracks({&x});
    Tensor out = detail::make_output(Shape{1}, track);
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    out[0] = acc;
    if (track) {
        tape.record("sum", [x = x, out]() mutable {
            const double g = out.grad()[0];
            for (double& gx : x.grad()) gx += g;
        });
    }
    return out;
}

inline Tensor mean(Tape& tape, const Tensor& x) {
    return scale(tape, sum(tape, x), 1.0 / static_cast<double>(x.numel()));
}

inline Tensor reshape(Tape& tape, const Tensor& x, Shape shape) {
    if (numel_of(shape) != x.numel()) {
        throw ShapeError("cannot reshape " + to_string(x.shape()) + " to " + to_string(shape));
    }
    const bool track = tape.tracks({&x});
    Tensor out = detail::make_output(std::move(shape), track);
    std::copy(x.data().begin(), x.data().end(), out.data().begin());
    if (track) {
        tape.record("reshape", [x = x, out]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += g[i];
        });
    }
    return out;
}

/// N×C×1×1 (or any N×...) to N×F.
inline Tensor flatten(Tape& tape, const Tensor& x) {
    const std::size_t n = x.dim(0);
    return reshape(tape, x, Shape{n, x.numel() / n});
}

/// Σ_k weights[k]·terms[k] over scalar terms. Zero weights still propagate
/// (zero) gradients so every upstream tensor receives a grad buffer.
inline Tensor weighted_sum(Tape& tape, const std::vector<Tensor>& terms, const std::vector<double>& weights) {
    if (terms.size() != weights.size() || terms.empty()) {
        throw std::invalid_argument("weighted_sum needs one weight per term");
    }
    bool track = false;
    for (const auto& t : terms) {
        if (t.numel() != 1) throw ShapeError("weighted_sum terms must be scalars, got " + to_string(t.shape()));
        track = track || tape.tracks({&t});
    }
    Tensor out = detail::make_output(Shape{1}, track);
    double acc = 0.0;
    for (std::size_t k = 0; k < terms.size(); ++k) acc += weights[k] * terms[k][0];
    out[0] = acc;
    if (track) {
        tape.record("weighted_sum", [terms = terms, weights, out]() mutable {
            const double g = out.grad()[0];
            for (std::size_t k = 0; k < terms.size(); ++k) {
                if (terms[k].requires_grad()) terms[k].grad()[0] += g * weights[k];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Split / concat along an axis

inline Tensor concat(Tape& tape, const std::vector<Tensor>& parts, std::size_t axis) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    const Shape& first = parts.front().shape();
    if (axis >= first.size()) throw ShapeError("concat axis out of range for " + to_string(first));
    Shape out_shape = first;
    out_shape[axis] = 0;
    bool track = false;
    for (const auto& p : parts) {
        const Shape& s = p.shape();
        if (s.size() != first.size()) throw ShapeError("concat rank mismatch: " + to_string(first) + " vs " + to_string(s));
        for (std::size_t d = 0; d < s.size(); ++d) {
            if (d != axis && s[d] != first[d]) {
                throw ShapeError("concat extent mismatch at dimension " + std::to_string(d) + ": " + to_string(first) +
                                 " vs " + to_string(s));
            }
        }
        out_shape[axis] += s[axis];
        track = track || tape.tracks({&p});
    }
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
    const std::size_t out_row = out_shape[axis] * inner;

    Tensor out = detail::make_output(out_shape, track);
    auto os = out.data();
    std::size_t offset = 0;
    for (const auto& p : parts) {
        const std::size_t row = p.shape()[axis] * inner;
        auto ps = p.data();
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(ps.begin() + o * row, row, os.begin() + o * out_row + offset);
        offset += row;
    }
    if (track) {
        tape.record("concat", [parts = parts, out, outer, inner, out_row, axis]() mutable {
            auto g = out.grad();
            std::size_t offset = 0;
            for (auto& p : parts) {
                const std::size_t row = p.shape()[axis] * inner;
                if (p.requires_grad()) {
                    auto gp = p.grad();
                    for (std::size_t o = 0; o < outer; ++o) {
                        for (std::size_t k = 0; k < row; ++k) gp[o * row + k] += g[o * out_row + offset + k];
                    }
                }
                offset += row;
            }
        });
    }
    return out;
}

/// Splits into `groups` equal contiguous slices along `axis`.
inline std::vector<Tensor> split(Tape& tape, const Tensor& x, std::size_t axis, std::size_t groups) {
    if (groups == 0) throw std::invalid_argument("split into zero groups");
    const std::size_t extent = x.dim(axis);
    if (extent % groups != 0) {
        throw ShapeError("cannot split extent " + std::to_string(extent) + " of dimension " + std::to_string(axis) +
                         " into " + std::to_string(groups) + " equal groups");
    }
    const Shape& shape = x.shape();
    std::size_t outer = 1;
    for (std::size_t d = 0; d < axis; ++d) outer *= shape[d];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < shape.size(); ++d) inner *= shape[d];
    const std::size_t in_row = extent * inner;
    const std::size_t row = extent / groups * inner;
    const bool track = tape.tracks({&x});

    std::vector<Tensor> parts;
    parts.reserve(groups);
    auto xs = x.data();
    for (std::size_t g = 0; g < groups; ++g) {
        Shape part_shape = shape;
        part_shape[axis] = extent / groups;
        Tensor part = detail::make_output(part_shape, track);
        auto ps = part.data();
        for (std::size_t o = 0; o < outer; ++o) std::copy_n(xs.begin() + o * in_row + g * row, row, ps.begin() + o * row);
        if (track) {
            tape.record("split", [x = x, part, g, outer, in_row, row]() mutable {
                auto gp = part.grad();
                auto gx = x.grad();
                for (std::size_t o = 0; o < outer; ++o) {
                    for (std::size_t k = 0; k < row; ++k) gx[o * in_row + g * row + k] += gp[o * row + k];
                }
            });
        }
        parts.push_back(std::move(part));
    }
    return parts;
}

/// Channel split for C×H×W or N×C×H×W input.
inline std::vector<Tensor> split_channels(Tape& tape, const Tensor& x, std::size_t groups) {
    return split(tape, x, detail::channel_axis(x), groups);
}

inline Tensor concat_channels(Tape& tape, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat of zero tensors");
    return concat(tape, parts, detail::channel_axis(parts.front()));
}

// ---------------------------------------------------------------------------
// Pooling

/// Mean over the spatial extent: C×H×W → C×1×1, N×C×H×W → N×C×1×1.
inline Tensor global_avg_pool(Tape& tape, const Tensor& x) {
    const std::size_t axis = detail::channel_axis(x);
    Shape out_shape = x.shape();
    const std::size_t hw = out_shape[axis + 1] * out_shape[axis + 2];
    out_shape[axis + 1] = 1;
    out_shape[axis + 2] = 1;
    const std::size_t planes = x.numel() / hw;
    const bool track = tape.tracks({&x});
    Tensor out = detail::make_output(out_shape, track);
    auto xs = x.data();
    auto os = out.data();
    const double inv = 1.0 / static_cast<double>(hw);
    for (std::size_t p = 0; p < planes; ++p) {
        double acc = 0.0;
        for (std::size_t k = 0; k < hw; ++k) acc += xs[p * hw + k];
        os[p] = acc * inv;
    }
    if (track) {
        tape.record("global_avg_pool", [x = x, out, planes, hw, inv]() mutable {
            auto g = out.grad();
            auto gx = x.grad();
            for (std::size_t p = 0; p < planes; ++p) {
                const double v = g[p] * inv;
                for (std::size_t k = 0; k < hw; ++k) gx[p * hw + k] += v;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Linear

/// out[n,o] = Σ_f input[n,f]·weight[o,f] + bias[o]. bias may be undefined.
inline Tensor linear(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias = {}) {
    if (input.rank() != 2 || weight.rank() != 2) {
        throw ShapeError("linear expects N×F input and O×F weight, got " + to_string(input.shape()) + " and " +
                         to_string(weight.shape()));
    }
    const std::size_t n = input.dim(0);
    const std::size_t fin = input.dim(1);
    const std::size_t fout = weight.dim(0);
    if (weight.dim(1) != fin) {
        throw ShapeError("linear input features " + std::to_string(fin) + " do not match weight input features " +
                         std::to_string(weight.dim(1)));
    }
    if (bias.defined() && (bias.numel() != fout)) {
        throw ShapeError("linear bias length " + std::to_string(bias.numel()) + " does not match output features " +
                         std::to_string(fout));
    }
    const bool track = tape.tracks({&input, &weight, &bias});
    Tensor out = detail::make_output(Shape{n, fout}, track);
    {
        detail::ConstMatMap x(input.data().data(), n, fin);
        detail::ConstMatMap w(weight.data().data(), fout, fin);
        detail::MatMap y(out.data().data(), n, fout);
        // Row by row so a sample's output does not depend on its batch position.
        for (std::size_t r = 0; r < n; ++r) y.row(r).noalias() = x.row(r) * w.transpose();
        if (bias.defined()) {
            auto bs = bias.data();
            for (std::size_t r = 0; r < n; ++r)
                for (std::size_t o = 0; o < fout; ++o) y(r, o) += bs[o];
        }
    }
    if (track) {
        tape.record("linear", [input = input, weight = weight, bias = bias, out, n, fin, fout]() mutable {
            detail::ConstMatMap g(out.grad().data(), n, fout);
            if (input.requires_grad()) {
                detail::MatMap gx(input.grad().data(), n, fin);
                detail::ConstMatMap w(weight.data().data(), fout, fin);
                gx.noalias() += g * w;
            }
            if (weight.requires_grad()) {
                detail::MatMap gw(weight.grad().data(), fout, fin);
                detail::ConstMatMap x(input.data().data(), n, fin);
                gw.noalias() += g.transpose() * x;
            }
            if (bias.defined() && bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::size_t r = 0; r < n; ++r)
                    for (std::size_t o = 0; o < fout; ++o) gb[o] += g(r, o);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Convolution

struct Pad2 {
    std::size_t h = 0;
    std::size_t w = 0;
};
struct Stride2 {
    std::size_t h = 1;
    std::size_t w = 1;
};

namespace detail {

struct ConvGeometry {
    std::size_t n, cin, h, w, cout, kh, kw, ph, pw, sh, sw, oh, ow;
    std::size_t k() const { return cin * kh * kw; }
    std::size_t p() const { return oh * ow; }
    bool pointwise() const { return kh == 1 && kw == 1 && ph == 0 && pw == 0 && sh == 1 && sw == 1; }
};

// col has K rows and N·P columns; column n·P + p holds the receptive field of
// output position p of sample n.
inline void im2col(const ConvGeometry& g, const double* x, double* col) {
    const std::size_t np = g.n * g.p();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                double* row = col + ((c * g.kh + i) * g.kw + j) * np;
                for (std::size_t s = 0; s < g.n; ++s) {
                    const double* plane = x + (s * g.cin + c) * g.h * g.w;
                    double* dst = row + s * g.p();
                    for (std::size_t oy = 0; oy < g.oh; ++oy) {
                        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
                        for (std::size_t ox = 0; ox < g.ow; ++ox) {
                            const std::ptrdiff_t xx =
                                static_cast<std::ptrdiff_t>(ox * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
                            const bool inside = y >= 0 && y < static_cast<std::ptrdiff_t>(g.h) && xx >= 0 &&
                                                xx < static_cast<std::ptrdiff_t>(g.w);
                            dst[oy * g.ow + ox] = inside ? plane[y * g.w + xx] : 0.0;
                        }
                    }
                }
            }
        }
    }
}

inline void col2im_add(const ConvGeometry& g, const double* col, double* dx) {
    const std::size_t np = g.n * g.p();
    for (std::size_t c = 0; c < g.cin; ++c) {
        for (std::size_t i = 0; i < g.kh; ++i) {
            for (std::size_t j = 0; j < g.kw; ++j) {
                const double* row = col + ((c * g.kh + i) * g.kw + j) * np;
                for (std::size_t s = 0; s < g.n; ++s) {
                    double* plane = dx + (s * g.cin + c) * g.h * g.w;
                    const double* src = row + s * g.p();
                    for (std::size_t oy = 0; oy < g.oh; ++oy) {
                        const std::ptrdiff_t y = static_cast<std::ptrdiff_t>(oy * g.sh + i) - static_cast<std::ptrdiff_t>(g.ph);
                        if (y < 0 || y >= static_cast<std::ptrdiff_t>(g.h)) continue;
                        for (std::size_t ox = 0; ox < g.ow; ++ox) {
                            const std::ptrdiff_t xx =
                                static_cast<std::ptrdiff_t>(ox * g.sw + j) - static_cast<std::ptrdiff_t>(g.pw);
                            if (xx < 0 || xx >= static_cast<std::ptrdiff_t>(g.w)) continue;
                            plane[y * g.w + xx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

// [N,C,P] <-> [C, N·P]
inline void nchw_to_cnp(const double* src, double* dst, std::size_t n, std::size_t c, std::size_t p) {
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(src + (s * c + ch) * p, p, dst + ch * n * p + s * p);
}
inline void cnp_to_nchw(const double* src, double* dst, std::size_t n, std::size_t c, std::size_t p) {
    for (std::size_t s = 0; s < n; ++s)
        for (std::size_t ch = 0; ch < c; ++ch) std::copy_n(src + ch * n * p + s * p, p, dst + (s * c + ch) * p);
}

}  // namespace detail

/**
 * 2-D cross-correlation (no kernel flip) over C×H×W or N×C×H×W input with
 * weight C_out×C_in×kH×kW. Output extent is floor((H + 2·pad − k)/stride) + 1.
 */
inline Tensor conv2d(Tape& tape, const Tensor& input, const Tensor& weight, const Tensor& bias = {}, Pad2 pad = {},
                     Stride2 stride = {}) {
    const bool batched = input.rank() == 4;
    if (input.rank() != 3 && !batched) {
        throw ShapeError("conv2d expects C×H×W or N×C×H×W input, got " + to_string(input.shape()));
    }
    if (weight.rank() != 4) throw ShapeError("conv2d weight must be C_out×C_in×kH×kW, got " + to_string(weight.shape()));
    if (stride.h == 0 || stride.w == 0) throw std::invalid_argument("conv2d stride must be positive");
    detail::ConvGeometry g{};
    g.n = batched ? input.dim(0) : 1;
    g.cin = input.dim(batched ? 1 : 0);
    g.h = input.dim(batched ? 2 : 1);
    g.w = input.dim(batched ? 3 : 2);
    g.cout = weight.dim(0);
    g.kh = weight.dim(2);
    g.kw = weight.dim(3);
    g.ph = pad.h;
    g.pw = pad.w;
    g.sh = stride.h;
    g.sw = stride.w;
    if (weight.dim(1) != g.cin) {
        throw ShapeError("conv2d input channels (C_in) mismatch: input has " + std::to_string(g.cin) + ", weight expects " +
                         std::to_string(weight.dim(1)));
    }
    if (g.kh > g.h + 2 * g.ph) {
        throw ShapeError("conv2d kernel height " + std::to_string(g.kh) + " exceeds padded input height " +
                         std::to_string(g.h + 2 * g.ph));
    }
    if (g.kw > g.w + 2 * g.pw) {
        throw ShapeError("conv2d kernel width " + std::to_string(g.kw) + " exceeds padded input width " +
                         std::to_string(g.w + 2 * g.pw));
    }
    if (bias.defined() && bias.numel() != g.cout) {
        throw ShapeError("conv2d bias length " + std::to_string(bias.numel()) + " does not match C_out " +
                         std::to_string(g.cout));
    }
    g.oh = (g.h + 2 * g.ph - g.kh) / g.sh + 1;
    g.ow = (g.w + 2 * g.pw - g.kw) / g.sw + 1;

    const bool track = tape.tracks({&input, &weight, &bias});
    Shape out_shape = batched ? Shape{g.n, g.cout, g.oh, g.ow} : Shape{g.cout, g.oh, g.ow};
    Tensor out = detail::make_output(out_shape, track);

    const std::size_t np = g.n * g.p();
    std::vector<double> col(g.k() * np);
    if (g.pointwise()) {
        detail::nchw_to_cnp(input.data().data(), col.data(), g.n, g.cin, g.p());
    } else {
        detail::im2col(g, input.data().data(), col.data());
    }
    std::vector<double> result(g.cout * np);
    {
        detail::ConstMatMap w(weight.data().data(), g.cout, g.k());
        detail::ConstMatMap c(col.data(), g.k(), np);
        detail::MatMap y(result.data(), g.cout, np);
        // One product per sample so a sample's output does not depend on its batch position.
        const std::size_t p = g.p();
        for (std::size_t s = 0; s < g.n; ++s) y.middleCols(s * p, p).noalias() = w * c.middleCols(s * p, p);
        if (bias.defined()) {
            auto bs = bias.data();
            for (std::size_t o = 0; o < g.cout; ++o) y.row(o).array() += bs[o];
        }
    }
    detail::cnp_to_nchw(result.data(), out.data().data(), g.n, g.cout, g.p());

    if (track) {
        tape.record("conv2d", [input = input, weight = weight, bias = bias, out, g]() mutable {
            const std::size_t np = g.n * g.p();
            std::vector<double> gy(g.cout * np);
            detail::nchw_to_cnp(out.grad().data(), gy.data(), g.n, g.cout, g.p());
            detail::ConstMatMap dy(gy.data(), g.cout, np);
            if (weight.requires_grad()) {
                std::vector<double> col(g.k() * np);
                if (g.pointwise()) {
                    detail::nchw_to_cnp(input.data().data(), col.data(), g.n, g.cin, g.p());
                } else {
                    detail::im2col(g, input.data().data(), col.data());
                }
                detail::ConstMatMap c(col.data(), g.k(), np);
                detail::MatMap dw(weight.grad().data(), g.cout, g.k());
                dw.noalias() += dy * c.transpose();
            }
            if (bias.defined() && bias.requires_grad()) {
                auto gb = bias.grad();
                for (std::size_t o = 0; o < g.cout; ++o) gb[o] += dy.row(o).sum();
            }
            if (input.requires_grad()) {
                std::vector<double> dcol(g.k() * np);
                detail::ConstMatMap w(weight.data().data(), g.cout, g.k());
                detail::MatMap dc(dcol.data(), g.k(), np);
                dc.noalias() = w.transpose() * dy;
                if (g.pointwise()) {
                    std::vector<double> dx(input.numel());
                    detail::cnp_to_nchw(dcol.data(), dx.data(), g.n, g.cin, g.p());
                    auto gx = input.grad();
                    for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += dx[i];
                } else {
                    detail::col2im_add(g, dcol.data(), input.grad().data());
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Batch normalization

enum class Mode { train, eval };

/// Running statistics of one batch-norm layer. batches_tracked counts the
/// train-mode updates; zero means the statistics were never populated.
struct RunningStats {
    Tensor mean;
    Tensor var;
    Tensor batches_tracked;

    explicit RunningStats(std::size_t channels = 1)
        : mean(Shape{channels}, 0.0), var(Shape{channels}, 1.0), batches_tracked(Shape{1}, 0.0) {}

    bool populated() const { return batches_tracked[0] > 0.0; }
};

inline constexpr double kBatchNormMomentum = 0.1;
inline constexpr double kBatchNormEps = 1e-5;

/**
 * Per-channel normalization over every axis except dim 1 (N×C, N×C×H×W).
 *
 * Train mode uses biased batch statistics for normalization and folds the
 * unbiased variance into the running estimate with the given momentum.
 * Eval mode normalizes with the running statistics.
 */
inline Tensor batchnorm(Tape& tape, const Tensor& input, const Tensor& gamma, const Tensor& beta, RunningStats& stats,
                        Mode mode, double momentum = kBatchNormMomentum, double eps = kBatchNormEps) {
    if (input.rank() < 2) throw ShapeError("batchnorm expects at least N×C input, got " + to_string(input.shape()));
    if (!(eps > 0.0)) throw std::invalid_argument("batchnorm eps must be positive");
    const std::size_t n = input.dim(0);
    const std::size_t c = input.dim(1);
    if (gamma.numel() != c || beta.numel() != c || stats.mean.numel() != c || stats.var.numel() != c) {
        throw ShapeError("batchnorm parameter length does not match channel extent " + std::to_string(c));
    }
    const std::size_t inner = input.numel() / (n * c);
    const std::size_t m = n * inner;
    if (mode == Mode::train && m < 2) {
        throw std::invalid_argument("batchnorm in train mode needs more than one value per channel (variance undefined)");
    }

    std::vector<double> mu(c), inv_std(c);
    auto xs = input.data();
    if (mode == Mode::train) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            double s = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t k = 0; k < inner; ++k) s += xs[(b * c + ch) * inner + k];
            const double mean = s / static_cast<double>(m);
            double ss = 0.0;
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t k = 0; k < inner; ++k) {
                    const double d = xs[(b * c + ch) * inner + k] - mean;
                    ss += d * d;
                }
            const double var = ss / static_cast<double>(m);
            mu[ch] = mean;
            inv_std[ch] = 1.0 / std::sqrt(var + eps);
            stats.mean[ch] = (1.0 - momentum) * stats.mean[ch] + momentum * mean;
            stats.var[ch] = (1.0 - momentum) * stats.var[ch] +
                            momentum * var * static_cast<double>(m) / static_cast<double>(m - 1);
        }
        stats.batches_tracked[0] += 1.0;
    } else {
        for (std::size_t ch = 0; ch < c; ++ch) {
            mu[ch] = stats.mean[ch];
            inv_std[ch] = 1.0 / std::sqrt(stats.var[ch] + eps);
        }
    }

    const bool track = tape.tracks({&input, &gamma, &beta});
    Tensor out = detail::make_output(input.shape(), track);
    Tensor xhat(input.shape());
    {
        auto os = out.data();
        auto hs = xhat.data();
        auto gs = gamma.data();
        auto bs = beta.data();
        for (std::size_t b = 0; b < n; ++b)
            for (std::size_t ch = 0; ch < c; ++ch)
                for (std::size_t k = 0; k < inner; ++k) {
                    const std::size_t i = (b * c + ch) * inner + k;
                    hs[i] = (xs[i] - mu[ch]) * inv_std[ch];
                    os[i] = gs[ch] * hs[i] + bs[ch];
                }
    }
    if (track) {
        tape.record("batchnorm", [input = input, gamma = gamma, beta = beta, out, xhat, inv_std, n, c, inner, m, mode]() mutable {
            auto g = out.grad();
            auto hs = xhat.data();
            std::vector<double> sum_g(c, 0.0), sum_gh(c, 0.0);
            for (std::size_t b = 0; b < n; ++b)
                for (std::size_t ch = 0; ch < c; ++ch)
                    for (std::size_t k = 0; k < inner; ++k) {
                        const std::size_t i = (b * c + ch) * inner + k;
                        sum_g[ch] += g[i];
                        sum_gh[ch] += g[i] * hs[i];
                    }
            if (gamma.requires_grad()) {
                auto gg = gamma.grad();
                for (std::size_t ch = 0; ch < c; ++ch) gg[ch] += sum_gh[ch];
            }
            if (beta.requires_grad()) {
                auto gb = beta.grad();
                for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += sum_g[ch];
            }
            if (input.requires_grad()) {
                auto gx = input.grad();
                auto gs = gamma.data();
                const double md = static_cast<double>(m);
                for (std::size_t b = 0; b < n; ++b)
                    for (std::size_t ch = 0; ch < c; ++ch) {
                        const double a = gs[ch] * inv_std[ch];
                        for (std::size_t k = 0; k < inner; ++k) {
                            const std::size_t i = (b * c + ch) * inner + k;
                            if (mode == Mode::train) {
                                gx[i] += a * (g[i] - sum_g[ch] / md - hs[i] * sum_gh[ch] / md);
                            } else {
                                gx[i] += a * g[i];
                            }
                        }
                    }
            }
        });
    }
    return out;
}

}  // namespace rareid
