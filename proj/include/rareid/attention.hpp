#pragma once

#include <cstddef>
#include <string>

#include "rareid/layers.hpp"
#include "rareid/ops.hpp"

namespace rareid {

/// Pre-sigmoid logits plus the attention mask and its complement.
struct AttentionMaskPair {
    Tensor logits;
    Tensor att;
    Tensor att_reverse;
};

enum class MaskSide { forward, reverse };

namespace detail {

inline void check_reduction(std::size_t channels, std::size_t r) {
    if (r == 0) throw std::invalid_argument("attention reduction ratio must be at least 1");
    if (channels % r != 0) {
        throw ShapeError("attention channels " + std::to_string(channels) + " not divisible by reduction ratio " +
                         std::to_string(r));
    }
}

// Runs a batched block on a single C×H×W sample by adding a leading unit axis.
template <typename Fn>
Tensor with_batch_axis(Tape& tape, const Tensor& m, Fn&& fn) {
    if (m.rank() == 4) return fn(m);
    if (m.rank() != 3) throw ShapeError("expected a C×H×W or N×C×H×W feature map, got " + to_string(m.shape()));
    Shape batched{1, m.dim(0), m.dim(1), m.dim(2)};
    Tensor out = fn(reshape(tape, m, batched));
    Shape single(out.shape().begin() + 1, out.shape().end());
    return reshape(tape, out, single);
}

}  // namespace detail

/// Pool → reduce (C → C/r) → ReLU → expand (C/r → C) → BN.
struct ChannelAttention {
    Linear reduce;
    Linear expand;
    BatchNorm bn;
    std::size_t channels = 0;
    std::size_t r = 1;

    ChannelAttention() = default;
    ChannelAttention(std::size_t channels_, std::size_t r_, Rng& rng) : channels(channels_), r(r_) {
        detail::check_reduction(channels, r);
        reduce = Linear(channels, channels / r, true, rng);
        expand = Linear(channels / r, channels, true, rng);
        bn = BatchNorm(channels);
    }

    std::size_t hidden() const { return channels / r; }

    /// Channel logits, C×1×1 per sample.
    Tensor forward(Tape& tape, const Tensor& m, Mode mode) {
        return detail::with_batch_axis(tape, m, [&](const Tensor& x) {
            if (x.dim(1) != channels) {
                throw ShapeError("channel attention expects " + std::to_string(channels) + " channels, got " +
                                 std::to_string(x.dim(1)));
            }
            const std::size_t n = x.dim(0);
            Tensor pooled = flatten(tape, global_avg_pool(tape, x));
            Tensor hidden = relu(tape, reduce.forward(tape, pooled));
            Tensor logits = bn.forward(tape, expand.forward(tape, hidden), mode);
            return reshape(tape, logits, Shape{n, channels, 1, 1});
        });
    }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        reduce.visit(prefix + ".reduce", fn);
        expand.visit(prefix + ".expand", fn);
        bn.visit(prefix + ".bn", fn);
    }
};

/// 1×1 reduce to C/r → 3×3 → ReLU → 3×3 → 1×1 reduce to one channel → BN.
struct SpatialAttention {
    Conv2d reduce1;
    Conv2d conv_a;
    Conv2d conv_b;
    Conv2d reduce2;
    BatchNorm bn;
    std::size_t channels = 0;
    std::size_t r = 1;

    SpatialAttention() = default;
    SpatialAttention(std::size_t channels_, std::size_t r_, Rng& rng) : channels(channels_), r(r_) {
        detail::check_reduction(channels, r);
        const std::size_t mid = channels / r;
        reduce1 = Conv2d(channels, mid, 1, 1, {}, {}, true, rng);
        conv_a = Conv2d(mid, mid, 3, 3, {1, 1}, {}, true, rng);
        conv_b = Conv2d(mid, mid, 3, 3, {1, 1}, {}, true, rng);
        reduce2 = Conv2d(mid, 1, 1, 1, {}, {}, true, rng);
        bn = BatchNorm(1);
    }

    /// Spatial logits, 1×H×W per sample.
    Tensor forward(Tape& tape, const Tensor& m, Mode mode) {
        return detail::with_batch_axis(tape, m, [&](const Tensor& x) {
            Tensor s = reduce1.forward(tape, x);
            s = relu(tape, conv_a.forward(tape, s));
            s = conv_b.forward(tape, s);
            s = reduce2.forward(tape, s);
            return bn.forward(tape, s, mode);
        });
    }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        reduce1.visit(prefix + ".reduce1", fn);
        conv_a.visit(prefix + ".conv1", fn);
        conv_b.visit(prefix + ".conv2", fn);
        reduce2.visit(prefix + ".reduce2", fn);
        bn.visit(prefix + ".bn", fn);
    }
};

/// logits = att_c ⊙ att_s (broadcast), att = σ(logits), att_reverse = 1 − att.
inline AttentionMaskPair combine_masks(Tape& tape, const Tensor& att_c, const Tensor& att_s) {
    AttentionMaskPair pair;
    pair.logits = mul(tape, att_c, att_s);
    pair.att = sigmoid(tape, pair.logits);
    pair.att_reverse = sub_from_one(tape, pair.att);
    return pair;
}

inline Tensor apply_attention(Tape& tape, const Tensor& m, const AttentionMaskPair& pair, MaskSide side) {
    const Tensor& mask = side == MaskSide::forward ? pair.att : pair.att_reverse;
    if (mask.shape() != m.shape()) {
        throw ShapeError("attention mask " + to_string(mask.shape()) + " does not match feature map " +
                         to_string(m.shape()));
    }
    return mul(tape, m, mask);
}

/// Channel and spatial attention of one backbone stage.
struct AttentionBlock {
    ChannelAttention channel;
    SpatialAttention spatial;

    AttentionBlock() = default;
    AttentionBlock(std::size_t channels, std::size_t r, Rng& rng) : channel(channels, r, rng), spatial(channels, r, rng) {}

    AttentionMaskPair forward(Tape& tape, const Tensor& m, Mode mode) {
        Tensor att_c = channel.forward(tape, m, mode);
        Tensor att_s = spatial.forward(tape, m, mode);
        return combine_masks(tape, att_c, att_s);
    }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        channel.visit(prefix + ".channel", fn);
        spatial.visit(prefix + ".spatial", fn);
    }
};

}  // namespace rareid
