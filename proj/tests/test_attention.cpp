#include <gtest/gtest.h>

#include <cmath>

#include "rareid/attention.hpp"
#include "rareid/gradcheck.hpp"
#include "test_util.hpp"

using namespace rareid;
using rareid::testing::max_abs_diff;
using rareid::testing::random_tensor;

namespace {

template <typename Module>
void fill_params(Module& m, double value) {
    m.visit("", [value](const std::string&, Tensor& t, bool is_buffer) {
        if (!is_buffer) std::fill(t.data().begin(), t.data().end(), value);
    });
}

template <typename Module>
NamedTensors params_of(Module& m) {
    NamedTensors out;
    m.visit("m", [&](const std::string& name, Tensor& t, bool is_buffer) {
        if (!is_buffer) out.emplace_back(name, t);
    });
    return out;
}

}  // namespace

TEST(ChannelAttention, ZeroInputGivesZeroLogits) {
    Rng rng(0);
    ChannelAttention ca(16, 4, rng);
    std::fill(ca.reduce.bias.data().begin(), ca.reduce.bias.data().end(), 0.0);
    std::fill(ca.expand.bias.data().begin(), ca.expand.bias.data().end(), 0.0);
    Tape tape;
    Tensor out = ca.forward(tape, Tensor(Shape{2, 16, 3, 3}), Mode::train);
    ASSERT_EQ(out.shape(), (Shape{2, 16, 1, 1}));
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(ChannelAttention, DefaultReductionRatioGivesWidthOne) {
    Rng rng(0);
    ChannelAttention ca(16, 16, rng);
    EXPECT_EQ(ca.hidden(), 1u);
    EXPECT_EQ(ca.reduce.weight.shape(), (Shape{1, 16}));
    EXPECT_EQ(ca.expand.weight.shape(), (Shape{16, 1}));
}

TEST(ChannelAttention, IndivisibleChannelsRejected) {
    Rng rng(0);
    EXPECT_THROW(ChannelAttention(15, 16, rng), ShapeError);
    EXPECT_THROW(SpatialAttention(20, 16, rng), ShapeError);
}

TEST(ChannelAttention, MatchesPrimitiveComposition) {
    Rng rng(1);
    ChannelAttention ca(8, 2, rng);
    Tensor m = random_tensor({3, 8, 4, 2}, rng);
    RunningStats oracle_stats(8);
    Tape tape;
    Tensor got = ca.forward(tape, m, Mode::train);

    Tape t2;
    Tensor pooled = reshape(t2, global_avg_pool(t2, m), Shape{3, 8});
    Tensor h = relu(t2, linear(t2, pooled, ca.reduce.weight, ca.reduce.bias));
    Tensor e = linear(t2, h, ca.expand.weight, ca.expand.bias);
    Tensor want = batchnorm(t2, e, ca.bn.gamma, ca.bn.beta, oracle_stats, Mode::train);
    EXPECT_LT(max_abs_diff(got, want), 1e-14);
    EXPECT_TRUE(ca.bn.stats.mean.equals(oracle_stats.mean));
}

TEST(ChannelAttention, SingleSampleShape) {
    Rng rng(2);
    ChannelAttention ca(16, 16, rng);
    Tape tape;
    EXPECT_EQ(ca.forward(tape, random_tensor({16, 5, 3}, rng), Mode::eval).shape(), (Shape{16, 1, 1}));
}

TEST(SpatialAttention, ZeroWeightsGiveZeroLogits) {
    Rng rng(0);
    SpatialAttention sa(16, 4, rng);
    fill_params(sa, 0.0);
    Tape tape;
    Tensor out = sa.forward(tape, random_tensor({2, 16, 4, 4}, rng), Mode::train);
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(SpatialAttention, PaddingPreservesExtent) {
    Rng rng(3);
    SpatialAttention sa(16, 16, rng);
    Tape tape;
    EXPECT_EQ(sa.forward(tape, random_tensor({16, 4, 4}, rng), Mode::eval).shape(), (Shape{1, 4, 4}));
    EXPECT_EQ(sa.forward(tape, random_tensor({2, 16, 2, 1}, rng), Mode::train).shape(), (Shape{2, 1, 2, 1}));
}

TEST(SpatialAttention, MatchesPrimitiveComposition) {
    Rng rng(4);
    SpatialAttention sa(8, 2, rng);
    Tensor m = random_tensor({2, 8, 5, 3}, rng);
    RunningStats oracle_stats(1);
    Tape tape;
    Tensor got = sa.forward(tape, m, Mode::train);
    Tape t2;
    Tensor s = conv2d(t2, m, sa.reduce1.weight, sa.reduce1.bias);
    s = relu(t2, conv2d(t2, s, sa.conv_a.weight, sa.conv_a.bias, {1, 1}));
    s = conv2d(t2, s, sa.conv_b.weight, sa.conv_b.bias, {1, 1});
    s = conv2d(t2, s, sa.reduce2.weight, sa.reduce2.bias);
    Tensor want = batchnorm(t2, s, sa.bn.gamma, sa.bn.beta, oracle_stats, Mode::train);
    ASSERT_EQ(got.shape(), (Shape{2, 1, 5, 3}));
    EXPECT_LT(max_abs_diff(got, want), 1e-14);
}

TEST(CombineMasks, ZeroLogitsGiveHalf) {
    Tape tape;
    auto pair = combine_masks(tape, Tensor(Shape{4, 1, 1}), Tensor(Shape{1, 3, 2}));
    ASSERT_EQ(pair.att.shape(), (Shape{4, 3, 2}));
    for (std::size_t i = 0; i < pair.att.numel(); ++i) {
        EXPECT_EQ(pair.att[i], 0.5);
        EXPECT_EQ(pair.att_reverse[i], 0.5);
    }
}

TEST(CombineMasks, LogThreeGivesThreeQuarters) {
    Tape tape;
    Tensor att_c = Tensor::of({2, 1, 1}, {std::log(3.0), 0.0});
    auto pair = combine_masks(tape, att_c, Tensor::full({1, 2, 2}, 1.0));
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(pair.att[i], 0.75, 1e-15);
    for (std::size_t i = 4; i < 8; ++i) EXPECT_EQ(pair.att[i], 0.5);
}

TEST(CombineMasks, ComplementAndRangeProperty) {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t c = 1 + rng.below(8), h = 1 + rng.below(6), w = 1 + rng.below(6);
        Tape tape;
        auto pair = combine_masks(tape, random_tensor({c, 1, 1}, rng, -5, 5), random_tensor({1, h, w}, rng, -5, 5));
        ASSERT_EQ(pair.logits.shape(), (Shape{c, h, w}));
        for (std::size_t i = 0; i < pair.att.numel(); ++i) {
            EXPECT_GT(pair.att[i], 0.0);
            EXPECT_LT(pair.att[i], 1.0);
            EXPECT_NEAR(pair.att[i] + pair.att_reverse[i], 1.0, 1e-12);
        }
    }
}

TEST(ApplyAttention, ForwardPlusReverseReconstructs) {
    Rng rng(6);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor m = random_tensor({4, 3, 5}, rng, -10, 10);
        Tape tape;
        auto pair = combine_masks(tape, random_tensor({4, 1, 1}, rng, -3, 3), random_tensor({1, 3, 5}, rng, -3, 3));
        Tensor sum_masks = add(tape, apply_attention(tape, m, pair, MaskSide::forward),
                               apply_attention(tape, m, pair, MaskSide::reverse));
        EXPECT_LT(max_abs_diff(sum_masks, m), 1e-12);
    }
}

TEST(ApplyAttention, UniformHalfMaskHalves) {
    Rng rng(7);
    Tensor m = random_tensor({3, 2, 2}, rng);
    Tape tape;
    auto pair = combine_masks(tape, Tensor(Shape{3, 1, 1}), Tensor(Shape{1, 2, 2}));
    Tensor out = apply_attention(tape, m, pair, MaskSide::forward);
    for (std::size_t i = 0; i < m.numel(); ++i) EXPECT_EQ(out[i], m[i] / 2.0);
}

TEST(ApplyAttention, MatchesIndexLoop) {
    Rng rng(8);
    Tensor m = random_tensor({3, 4, 2}, rng);
    Tensor ac = random_tensor({3, 1, 1}, rng, -2, 2), as = random_tensor({1, 4, 2}, rng, -2, 2);
    Tape tape;
    auto pair = combine_masks(tape, ac, as);
    Tensor fwd = apply_attention(tape, m, pair, MaskSide::forward);
    Tensor rev = apply_attention(tape, m, pair, MaskSide::reverse);
    for (std::size_t c = 0; c < 3; ++c)
        for (std::size_t p = 0; p < 8; ++p) {
            const double s = 1.0 / (1.0 + std::exp(-ac[c] * as[p]));
            EXPECT_NEAR(fwd[c * 8 + p], m[c * 8 + p] * s, 1e-15);
            EXPECT_NEAR(rev[c * 8 + p], m[c * 8 + p] * (1.0 - s), 1e-15);
        }
    EXPECT_THROW(apply_attention(tape, random_tensor({3, 4, 3}, rng), pair, MaskSide::forward), ShapeError);
}

TEST(AttentionBlock, GradientsPassForBothMaskSides) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        AttentionBlock block(8, 2, rng);
        Tensor m = random_tensor({3, 8, 3, 2}, rng);
        Tensor probe = random_tensor({3, 8, 3, 2}, rng);
        auto params = params_of(block);
        params.emplace_back("m", m);
        for (MaskSide side : {MaskSide::forward, MaskSide::reverse}) {
            auto f = [&](Tape& t) {
                auto pair = block.forward(t, m, Mode::train);
                return sum(t, mul(t, apply_attention(t, m, pair, side), probe));
            };
            auto report = grad_check(f, params);
            EXPECT_TRUE(report.passed()) << "seed " << seed << " max rel " << report.max_rel_error;
        }
    }
}
