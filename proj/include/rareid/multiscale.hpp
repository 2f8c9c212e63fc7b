#pragma once

#include <array>
#include <cstddef>
#include <string>
#include <vector>

#include "rareid/layers.hpp"
#include "rareid/ops.hpp"

namespace rareid {

/// Directional kernel of one channel group: extent and "same" padding.
struct DirectionalKernel {
    std::size_t kh;
    std::size_t kw;
    Pad2 pad;
};

/// Group order is fixed: 1×3, 3×1, 1×5, 5×1.
inline constexpr std::array<DirectionalKernel, 4> kMultiScaleKernels{{
    {1, 3, {0, 1}},
    {3, 1, {1, 0}},
    {1, 5, {0, 2}},
    {5, 1, {2, 0}},
}};

/**
 * Multi-scale layer: the channels are split into four contiguous groups,
 * each group goes through its own directional convolution (C/4 → C/4,
 * extent preserved) and a ReLU, and the groups are concatenated back in
 * their original order.
 */
struct MultiScale {
    std::array<Conv2d, 4> groups;
    std::size_t channels = 0;

    MultiScale() = default;
    MultiScale(std::size_t channels_, Rng& rng) : channels(channels_) {
        if (channels == 0 || channels % 4 != 0) {
            throw ShapeError("multi-scale layer needs a channel count divisible by 4, got " + std::to_string(channels));
        }
        const std::size_t width = channels / 4;
        for (std::size_t g = 0; g < 4; ++g) {
            const auto& k = kMultiScaleKernels[g];
            groups[g] = Conv2d(width, width, k.kh, k.kw, k.pad, {}, true, rng);
        }
    }

    Tensor forward(Tape& tape, const Tensor& m) const {
        const std::size_t axis = detail::channel_axis(m);
        if (m.dim(axis) % 4 != 0) {
            throw ShapeError("multi-scale input channels " + std::to_string(m.dim(axis)) + " not divisible by 4");
        }
        if (m.dim(axis) != channels) {
            throw ShapeError("multi-scale layer expects " + std::to_string(channels) + " channels, got " +
                             std::to_string(m.dim(axis)));
        }
        std::vector<Tensor> parts = split_channels(tape, m, 4);
        for (std::size_t g = 0; g < 4; ++g) parts[g] = relu(tape, groups[g].forward(tape, parts[g]));
        return concat_channels(tape, parts);
    }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        for (std::size_t g = 0; g < 4; ++g) groups[g].visit(prefix + ".group" + std::to_string(g), fn);
    }
};

}  // namespace rareid
