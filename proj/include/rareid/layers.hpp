#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <string>

#include "rareid/ops.hpp"
#include "rareid/rng.hpp"
#include "rareid/tensor.hpp"

namespace rareid {

/// Callback receiving (hierarchical name, tensor, is_buffer). Parameters are
/// learnable; buffers are running statistics.
using TensorVisitor = std::function<void(const std::string&, Tensor&, bool)>;

namespace detail {

inline Tensor uniform_tensor(Shape shape, double bound, Rng& rng) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(-bound, bound);
    t.set_requires_grad(true);
    return t;
}

inline Tensor param_tensor(Shape shape, double fill) {
    Tensor t(std::move(shape), fill);
    t.set_requires_grad(true);
    return t;
}

}  // namespace detail

struct Conv2d {
    Tensor weight;
    Tensor bias;  // undefined when bias-free
    Pad2 pad;
    Stride2 stride;

    Conv2d() = default;
    Conv2d(std::size_t cin, std::size_t cout, std::size_t kh, std::size_t kw, Pad2 pad_, Stride2 stride_, bool with_bias,
           Rng& rng)
        : pad(pad_), stride(stride_) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(cin * kh * kw));
        weight = detail::uniform_tensor(Shape{cout, cin, kh, kw}, bound, rng);
        if (with_bias) bias = detail::uniform_tensor(Shape{cout}, bound, rng);
    }

    Tensor forward(Tape& tape, const Tensor& x) const { return conv2d(tape, x, weight, bias, pad, stride); }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        fn(prefix + ".weight", weight, false);
        if (bias.defined()) fn(prefix + ".bias", bias, false);
    }
};

struct Linear {
    Tensor weight;
    Tensor bias;  // undefined when bias-free

    Linear() = default;
    Linear(std::size_t fin, std::size_t fout, bool with_bias, Rng& rng) {
        const double bound = 1.0 / std::sqrt(static_cast<double>(fin));
        weight = detail::uniform_tensor(Shape{fout, fin}, bound, rng);
        if (with_bias) bias = detail::uniform_tensor(Shape{fout}, bound, rng);
    }

    Tensor forward(Tape& tape, const Tensor& x) const { return linear(tape, x, weight, bias); }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        fn(prefix + ".weight", weight, false);
        if (bias.defined()) fn(prefix + ".bias", bias, false);
    }
};

struct BatchNorm {
    Tensor gamma;
    Tensor beta;
    RunningStats stats;

    BatchNorm() = default;
    explicit BatchNorm(std::size_t channels)
        : gamma(detail::param_tensor(Shape{channels}, 1.0)), beta(detail::param_tensor(Shape{channels}, 0.0)),
          stats(channels) {}

    Tensor forward(Tape& tape, const Tensor& x, Mode mode) { return batchnorm(tape, x, gamma, beta, stats, mode); }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        fn(prefix + ".gamma", gamma, false);
        fn(prefix + ".beta", beta, false);
        fn(prefix + ".running_mean", stats.mean, true);
        fn(prefix + ".running_var", stats.var, true);
        fn(prefix + ".batches_tracked", stats.batches_tracked, true);
    }
};

}  // namespace rareid
