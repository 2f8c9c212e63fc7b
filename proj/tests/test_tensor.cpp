#include <gtest/gtest.h>

#include <cmath>
#include <limits>
#include <sstream>

#include "rareid/gradcheck.hpp"
#include "rareid/ops.hpp"
#include "rareid/rng.hpp"
#include "rareid/serialize.hpp"
#include "rareid/tensor.hpp"
#include "test_util.hpp"

using namespace rareid;
using rareid::testing::conv2d_oracle;
using rareid::testing::max_abs_diff;
using rareid::testing::random_tensor;

namespace {

GradCheckReport check(const std::function<Tensor(Tape&)>& f, NamedTensors params) {
    GradCheckOptions opts;
    opts.step = 1e-5;
    opts.tol = 1e-4;
    return grad_check(f, std::move(params), opts);
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor basics

TEST(Tensor, ShapeInvariants) {
    Tensor t(Shape{2, 3, 4});
    EXPECT_EQ(t.numel(), 24u);
    EXPECT_FALSE(t.has_grad());
    t.grad();
    EXPECT_EQ(t.grad().size(), t.numel());
    EXPECT_THROW(Tensor(Shape{1, 0, 3}), ShapeError);
    EXPECT_THROW(Tensor(Shape{2, 2}, std::vector<double>{1, 2, 3}), ShapeError);
}

TEST(Rng, MatchesStandardEngineStream) {
    // The standard fixes the 10000th output of a default-seeded mt19937_64.
    Rng rng(5489u);
    std::uint64_t v = 0;
    for (int i = 0; i < 10000; ++i) v = rng.next_u64();
    EXPECT_EQ(v, 9981545732273789042ULL);
}

TEST(Rng, SameSeedSameStream) {
    Rng a(42), b(42);
    for (int i = 0; i < 1000; ++i) {
        ASSERT_EQ(a.uniform(), b.uniform());
        ASSERT_EQ(a.normal(), b.normal());
        ASSERT_EQ(a.below(7), b.below(7));
    }
}

// ---------------------------------------------------------------------------
// conv2d

TEST(Conv2d, ScalarProduct) {
    Tape tape;
    Tensor out = conv2d(tape, Tensor::of({1, 1, 1}, {2}), Tensor::of({1, 1, 1, 1}, {3}));
    ASSERT_EQ(out.shape(), (Shape{1, 1, 1}));
    EXPECT_EQ(out[0], 6.0);
}

TEST(Conv2d, PaddedOnesCenterAndCorner) {
    Tape tape;
    Tensor out = conv2d(tape, Tensor::full({1, 3, 3}, 1.0), Tensor::full({1, 1, 3, 3}, 1.0), {}, {1, 1});
    ASSERT_EQ(out.shape(), (Shape{1, 3, 3}));
    EXPECT_EQ(out[4], 9.0);
    EXPECT_EQ(out[0], 4.0);
    EXPECT_EQ(out[8], 4.0);
}

TEST(Conv2d, HorizontalDifferenceKernel) {
    Tape tape;
    Tensor out = conv2d(tape, Tensor::of({1, 1, 5}, {1, 2, 3, 4, 5}), Tensor::of({1, 1, 1, 3}, {1, 0, -1}), {}, {0, 1});
    const std::vector<double> expected{-2, -2, -2, -2, 4};
    ASSERT_EQ(out.numel(), 5u);
    for (std::size_t i = 0; i < 5; ++i) EXPECT_EQ(out[i], expected[i]);
}

TEST(Conv2d, MatchesSlidingWindowOracle) {
    Rng rng(7);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(3), cin = 1 + rng.below(4), cout = 1 + rng.below(4);
        const std::size_t kh = 1 + rng.below(3), kw = 1 + rng.below(5);
        const std::size_t ph = rng.below(3), pw = rng.below(3), sh = 1 + rng.below(2), sw = 1 + rng.below(2);
        const std::size_t h = kh + rng.below(5), w = kw + rng.below(5);
        Tensor x = random_tensor({n, cin, h, w}, rng);
        Tensor wt = random_tensor({cout, cin, kh, kw}, rng);
        Tensor b = rng.bernoulli(0.5) ? random_tensor({cout}, rng) : Tensor{};
        Tape tape;
        Tensor got = conv2d(tape, x, wt, b, {ph, pw}, {sh, sw});
        Tensor want = conv2d_oracle(x, wt, b, ph, pw, sh, sw);
        ASSERT_EQ(got.shape(), want.shape());
        EXPECT_LT(max_abs_diff(got, want), 1e-12);
    }
}

TEST(Conv2d, ShapeErrorsNameTheDimension) {
    Tape tape;
    try {
        conv2d(tape, Tensor(Shape{2, 4, 4}), Tensor(Shape{1, 3, 3, 3}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("C_in"), std::string::npos);
    }
    try {
        conv2d(tape, Tensor(Shape{1, 2, 2}), Tensor(Shape{1, 1, 3, 3}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        EXPECT_NE(std::string(e.what()).find("height"), std::string::npos);
    }
}

TEST(Conv2d, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor({2, 2, 5, 4}, rng);
        Tensor w = random_tensor({3, 2, 3, 2}, rng);
        Tensor b = random_tensor({3}, rng);
        Tensor probe = random_tensor({2, 3, 3, 5}, rng);
        auto f = [&](Tape& t) { return sum(t, mul(t, conv2d(t, x, w, b, {1, 1}, {2, 1}), probe)); };
        auto report = check(f, {{"x", x}, {"w", w}, {"b", b}});
        EXPECT_TRUE(report.passed()) << "seed " << seed << " max rel " << report.max_rel_error;
    }
}

// ---------------------------------------------------------------------------
// linear

TEST(Linear, IdentityWeight) {
    Rng rng(1);
    Tensor x = random_tensor({3, 4}, rng);
    Tensor eye(Shape{4, 4});
    for (std::size_t i = 0; i < 4; ++i) eye[i * 4 + i] = 1.0;
    Tape tape;
    EXPECT_TRUE(linear(tape, x, eye, Tensor(Shape{4})).equals(x));
}

TEST(Linear, Summation) {
    Tape tape;
    Tensor out = linear(tape, Tensor::of({1, 2}, {1, 1}), Tensor::of({1, 2}, {1, 1}), Tensor::of({1}, {0}));
    EXPECT_EQ(out.item(), 2.0);
}

TEST(Linear, MatchesTripleLoop) {
    Rng rng(3);
    Tensor x = random_tensor({2, 3}, rng), w = random_tensor({4, 3}, rng), b = random_tensor({4}, rng);
    Tape tape;
    Tensor out = linear(tape, x, w, b);
    for (std::size_t n = 0; n < 2; ++n)
        for (std::size_t o = 0; o < 4; ++o) {
            double acc = b[o];
            for (std::size_t f = 0; f < 3; ++f) acc += x[n * 3 + f] * w[o * 3 + f];
            EXPECT_NEAR(out[n * 4 + o], acc, 1e-14);
        }
}

TEST(Linear, DimensionMismatch) {
    Tape tape;
    EXPECT_THROW(linear(tape, Tensor(Shape{2, 3}), Tensor(Shape{4, 2})), ShapeError);
}

TEST(Linear, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor({3, 5}, rng), w = random_tensor({2, 5}, rng), b = random_tensor({2}, rng);
        Tensor probe = random_tensor({3, 2}, rng);
        auto f = [&](Tape& t) { return sum(t, mul(t, linear(t, x, w, b), probe)); };
        EXPECT_TRUE(check(f, {{"x", x}, {"w", w}, {"b", b}}).passed()) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------
// batchnorm

TEST(BatchNorm, NormalizedInputIsFixedPoint) {
    // Two rows per channel at ±1: zero mean, unit (biased) variance.
    Tensor x = Tensor::of({2, 3}, {1, -1, 1, -1, 1, -1});
    RunningStats stats(3);
    Tape tape;
    Tensor out = batchnorm(tape, x, Tensor::full({3}, 1.0), Tensor::full({3}, 0.0), stats, Mode::train);
    EXPECT_LT(max_abs_diff(out, x), 1e-5);
}

TEST(BatchNorm, ZeroGammaCollapsesToBeta) {
    Rng rng(2);
    Tensor x = random_tensor({4, 3, 2, 2}, rng);
    Tensor beta = Tensor::of({3}, {0.5, -1.0, 2.0});
    RunningStats stats(3);
    Tape tape;
    Tensor out = batchnorm(tape, x, Tensor::full({3}, 0.0), beta, stats, Mode::train);
    for (std::size_t i = 0; i < out.numel(); ++i) EXPECT_EQ(out[i], beta[(i / 4) % 3]);
}

TEST(BatchNorm, RandomBatchStatistics) {
    Rng rng(11);
    Tensor x = random_tensor({8, 4}, rng, -3.0, 5.0);
    RunningStats stats(4);
    Tape tape;
    Tensor out = batchnorm(tape, x, Tensor::full({4}, 1.0), Tensor::full({4}, 0.0), stats, Mode::train);
    for (std::size_t c = 0; c < 4; ++c) {
        double m = 0.0, v = 0.0;
        for (std::size_t n = 0; n < 8; ++n) m += out[n * 4 + c];
        m /= 8.0;
        for (std::size_t n = 0; n < 8; ++n) v += (out[n * 4 + c] - m) * (out[n * 4 + c] - m);
        v /= 8.0;
        EXPECT_LT(std::abs(m), 1e-6);
        EXPECT_NEAR(v, 1.0, 1e-4);
    }
}

TEST(BatchNorm, RunningStatsAndEvalMode) {
    Tensor x = Tensor::of({4, 1}, {1, 2, 3, 4});
    RunningStats stats(1);
    Tape tape;
    batchnorm(tape, x, Tensor::full({1}, 1.0), Tensor::full({1}, 0.0), stats, Mode::train);
    // mean 2.5, unbiased variance 5/3, momentum 0.1
    EXPECT_DOUBLE_EQ(stats.mean[0], 0.25);
    EXPECT_DOUBLE_EQ(stats.var[0], 0.9 + 0.1 * 5.0 / 3.0);
    EXPECT_TRUE(stats.populated());
    Tensor out = batchnorm(tape, Tensor::of({1, 1}, {0.25}), Tensor::full({1}, 2.0), Tensor::full({1}, 1.0), stats,
                           Mode::eval);
    EXPECT_DOUBLE_EQ(out[0], 1.0);
}

TEST(BatchNorm, SingleElementTrainBatchIsAnError) {
    RunningStats stats(2);
    Tape tape;
    EXPECT_THROW(batchnorm(tape, Tensor(Shape{1, 2}), Tensor::full({2}, 1.0), Tensor::full({2}, 0.0), stats, Mode::train),
                 std::invalid_argument);
    // A zero-variance channel is fine.
    Tensor out = batchnorm(tape, Tensor::full({3, 2}, 4.0), Tensor::full({2}, 1.0), Tensor::full({2}, 0.0), stats,
                           Mode::train);
    for (double v : out.data()) EXPECT_EQ(v, 0.0);
}

TEST(BatchNorm, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor({3, 2, 2, 2}, rng);
        Tensor gamma = random_tensor({2}, rng, 0.5, 1.5), beta = random_tensor({2}, rng);
        Tensor probe = random_tensor({3, 2, 2, 2}, rng);
        RunningStats stats(2);
        auto train = [&](Tape& t) { return sum(t, mul(t, batchnorm(t, x, gamma, beta, stats, Mode::train), probe)); };
        EXPECT_TRUE(check(train, {{"x", x}, {"gamma", gamma}, {"beta", beta}}).passed()) << "seed " << seed;
        auto eval = [&](Tape& t) { return sum(t, mul(t, batchnorm(t, x, gamma, beta, stats, Mode::eval), probe)); };
        EXPECT_TRUE(check(eval, {{"x", x}, {"gamma", gamma}, {"beta", beta}}).passed()) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------
// pooling

TEST(GlobalAvgPool, ConstantChannel) {
    Tape tape;
    Tensor out = global_avg_pool(tape, Tensor::full({2, 3, 5}, 7.0));
    ASSERT_EQ(out.shape(), (Shape{2, 1, 1}));
    EXPECT_EQ(out[0], 7.0);
    EXPECT_EQ(out[1], 7.0);
}

TEST(GlobalAvgPool, DegenerateAndArithmeticMean) {
    Tape tape;
    Tensor x = Tensor::of({3, 1, 1}, {1, -2, 5});
    EXPECT_TRUE(global_avg_pool(tape, x).equals(x));
    EXPECT_EQ(global_avg_pool(tape, Tensor::of({1, 2, 2}, {1, 2, 3, 4})).item(), 2.5);
}

TEST(GlobalAvgPool, SpatiallyConstantProperty) {
    Rng rng(4);
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t n = 1 + rng.below(3), c = 1 + rng.below(5), h = 1 + rng.below(6), w = 1 + rng.below(6);
        Tensor x(Shape{n, c, h, w});
        std::vector<double> values(n * c);
        for (auto& v : values) v = rng.uniform(-3, 3);
        for (std::size_t i = 0; i < x.numel(); ++i) x[i] = values[i / (h * w)];
        Tape tape;
        Tensor out = global_avg_pool(tape, x);
        for (std::size_t i = 0; i < n * c; ++i) EXPECT_NEAR(out[i], values[i], 1e-14);
    }
}

// ---------------------------------------------------------------------------
// elementwise

TEST(Elementwise, SigmoidSymmetryPoint) {
    Tape tape;
    EXPECT_EQ(sigmoid(tape, Tensor::scalar(0.0)).item(), 0.5);
}

TEST(Elementwise, SigmoidComplement) {
    Rng rng(5);
    Tensor x = random_tensor({4, 5}, rng, -20, 20);
    Tape tape;
    Tensor s = sigmoid(tape, x);
    Tensor total = add(tape, sub_from_one(tape, s), s);
    for (double v : total.data()) EXPECT_NEAR(v, 1.0, 1e-15);
}

TEST(Elementwise, BroadcastMulMatchesIndexLoop) {
    Rng rng(6);
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t c = 1 + rng.below(5), h = 1 + rng.below(5), w = 1 + rng.below(5);
        Tensor mask = random_tensor({c, 1, 1}, rng);
        Tensor map = random_tensor({c, h, w}, rng);
        Tensor spatial = random_tensor({1, h, w}, rng);
        Tape tape;
        Tensor a = mul(tape, mask, map);
        Tensor b = mul(tape, map, mask);
        Tensor outer = mul(tape, mask, spatial);
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t y = 0; y < h; ++y)
                for (std::size_t x = 0; x < w; ++x) {
                    const std::size_t i = (ch * h + y) * w + x;
                    EXPECT_EQ(a[i], mask[ch] * map[i]);
                    EXPECT_EQ(outer[i], mask[ch] * spatial[y * w + x]);
                }
        EXPECT_TRUE(a.equals(b));
    }
}

TEST(Elementwise, IncompatibleBroadcastListsShapes) {
    Tape tape;
    try {
        mul(tape, Tensor(Shape{3, 2}), Tensor(Shape{4, 2}));
        FAIL() << "expected ShapeError";
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        EXPECT_NE(msg.find("[3x2]"), std::string::npos);
        EXPECT_NE(msg.find("[4x2]"), std::string::npos);
    }
}

TEST(Elementwise, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor a = random_tensor({2, 3, 1, 1}, rng, -2, 2);
        Tensor b = random_tensor({2, 1, 4, 3}, rng, -2, 2);
        Tensor c = random_tensor({2, 3, 4, 3}, rng, 0.2, 1.0);
        auto f = [&](Tape& t) {
            Tensor logits = mul(t, a, b);
            Tensor s = sigmoid(t, logits);
            Tensor mixed = add(t, mul(t, s, c), mul(t, sub_from_one(t, s), relu(t, c)));
            return mean(t, scale(t, mixed, 3.0));
        };
        EXPECT_TRUE(check(f, {{"a", a}, {"b", b}, {"c", c}}).passed()) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------
// split / concat

TEST(SplitConcat, PartitionAndRoundTrip) {
    Rng rng(8);
    Tensor x = random_tensor({2, 8, 3, 3}, rng);
    Tape tape;
    auto parts = split_channels(tape, x, 4);
    ASSERT_EQ(parts.size(), 4u);
    for (const auto& p : parts) EXPECT_EQ(p.shape(), (Shape{2, 2, 3, 3}));
    EXPECT_TRUE(concat_channels(tape, parts).equals(x));
    EXPECT_THROW(split_channels(tape, x, 3), ShapeError);
}

TEST(SplitConcat, RoundTripForEveryDivisor) {
    Rng rng(9);
    for (std::size_t c : {1u, 4u, 6u, 12u}) {
        Tensor x = random_tensor({c, 2, 3}, rng);
        for (std::size_t g = 1; g <= c; ++g) {
            if (c % g) continue;
            Tape tape;
            EXPECT_TRUE(concat_channels(tape, split_channels(tape, x, g)).equals(x)) << c << "/" << g;
        }
    }
}

TEST(SplitConcat, PooledStageWidths) {
    Tape tape;
    std::vector<Tensor> pooled;
    for (std::size_t c : {16u, 32u, 64u, 128u}) pooled.push_back(Tensor(Shape{2, c}));
    EXPECT_EQ(concat(tape, pooled, 1).shape(), (Shape{2, 240}));
}

TEST(SplitConcat, GradientsMatchFiniteDifferences) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        Rng rng(seed);
        Tensor x = random_tensor({2, 4, 2, 2}, rng);
        Tensor probe = random_tensor({2, 4, 2, 2}, rng);
        auto f = [&](Tape& t) {
            auto parts = split_channels(t, x, 2);
            std::swap(parts[0], parts[1]);
            parts[0] = mul(t, parts[0], parts[0]);
            return sum(t, mul(t, concat_channels(t, parts), probe));
        };
        EXPECT_TRUE(check(f, {{"x", x}}).passed()) << "seed " << seed;
    }
}

// ---------------------------------------------------------------------------
// backward / tape

TEST(Backward, SumGivesOnes) {
    Rng rng(10);
    Tensor x = random_tensor({3, 4}, rng);
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(tape, x));
    for (double g : x.grad()) EXPECT_EQ(g, 1.0);
    EXPECT_TRUE(tape.empty());
}

TEST(Backward, SigmoidSlopeAtZero) {
    Tensor w = Tensor::scalar(0.0);
    w.set_requires_grad(true);
    const double c = 3.0;
    Tape tape;
    tape.backward(scale(tape, sigmoid(tape, w), c));
    EXPECT_EQ(w.grad()[0], 0.25 * c);
}

TEST(Backward, SharedUsesAccumulate) {
    Tensor x = Tensor::of({3}, {1, -2, 0.5});
    x.set_requires_grad(true);
    Tape tape;
    tape.backward(sum(tape, mul(tape, x, x)));
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, Errors) {
    Tensor x = Tensor::of({2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape;
    Tensor y = scale(tape, x, 2.0);
    EXPECT_THROW(tape.backward(y), ShapeError);
    Tape empty;
    EXPECT_THROW(empty.backward(Tensor::scalar(1.0).set_requires_grad(true)), std::logic_error);
}

TEST(Backward, DisabledTapeRecordsNothing) {
    Tensor x = Tensor::of({2}, {1, 2});
    x.set_requires_grad(true);
    Tape tape = Tape::disabled();
    Tensor y = sum(tape, x);
    EXPECT_TRUE(tape.empty());
    EXPECT_FALSE(y.requires_grad());
}

// ---------------------------------------------------------------------------
// grad_check itself

TEST(GradCheck, SquaredNorm) {
    Rng rng(12);
    Tensor x = random_tensor({10}, rng);
    auto f = [&](Tape& t) { return sum(t, mul(t, x, x)); };
    GradCheckOptions opts;
    opts.tol = 1e-6;
    auto report = grad_check(f, {{"x", x}}, opts);
    EXPECT_TRUE(report.passed());
    EXPECT_LT(report.max_rel_error, 1e-6);
}

TEST(GradCheck, ReluAwayFromKink) {
    Tensor x = Tensor::of({4}, {-1.0, -0.3, 0.4, 2.0});
    auto f = [&](Tape& t) { return sum(t, mul(t, relu(t, x), x)); };
    EXPECT_TRUE(check(f, {{"x", x}}).passed());
}

TEST(GradCheck, DetectsWrongGradient) {
    Tensor x = Tensor::of({3}, {0.5, 1.0, -2.0});
    // A "sigmoid" whose recorded derivative is off by a factor of two.
    auto f = [&](Tape& t) {
        auto bad = detail::unary(
            t, x, "bad", [](double v) { return detail::stable_sigmoid(v); },
            [](double, double s) { return 2.0 * s * (1.0 - s); });
        return sum(t, bad);
    };
    EXPECT_FALSE(check(f, {{"x", x}}).passed());
}

TEST(GradCheck, ReportsNonFiniteDifferences) {
    Tensor x = Tensor::of({2}, {1.0, 2.0});
    const double base = x[0];
    auto f = [&](Tape& t) {
        Tensor s = sum(t, x);
        if (x[0] != base) s[0] = std::numeric_limits<double>::quiet_NaN();
        return s;
    };
    auto report = check(f, {{"x", x}});
    EXPECT_GT(report.nonfinite, 0u);
    EXPECT_FALSE(report.passed());
}

// ---------------------------------------------------------------------------
// serialization

TEST(Serialize, ExactByteLayout) {
    std::ostringstream os;
    write_tensor(os, Tensor::of({1, 2}, {1.0, -2.0}));
    const std::string bytes = os.str();
    ASSERT_EQ(bytes.size(), 4u + 4u + 16u + 16u);
    EXPECT_EQ(bytes.substr(0, 4), "TNSR");
    const std::string rank("\x02\x00\x00\x00", 4);
    EXPECT_EQ(bytes.substr(4, 4), rank);
    EXPECT_EQ(bytes.substr(8, 8), std::string("\x01\0\0\0\0\0\0\0", 8));
    EXPECT_EQ(bytes.substr(16, 8), std::string("\x02\0\0\0\0\0\0\0", 8));
    // 1.0 = 0x3FF0000000000000, -2.0 = 0xC000000000000000
    EXPECT_EQ(bytes.substr(24, 8), std::string("\0\0\0\0\0\0\xF0\x3F", 8));
    EXPECT_EQ(bytes.substr(32, 8), std::string("\0\0\0\0\0\0\0\xC0", 8));
}

TEST(Serialize, RoundTripProperty) {
    Rng rng(13);
    for (int trial = 0; trial < 25; ++trial) {
        Shape shape(1 + rng.below(4));
        for (auto& e : shape) e = 1 + rng.below(5);
        Tensor t = random_tensor(shape, rng, -1e6, 1e6);
        std::stringstream ss;
        write_tensor(ss, t);
        EXPECT_TRUE(read_tensor(ss).equals(t));
    }
}

TEST(Serialize, RejectsMalformedRecords) {
    std::stringstream bad_magic("TNSX\x01\0\0\0");
    EXPECT_THROW(read_tensor(bad_magic), FormatError);
    std::ostringstream os;
    write_tensor(os, Tensor::of({3}, {1, 2, 3}));
    std::string truncated = os.str();
    truncated.resize(truncated.size() - 3);
    std::stringstream ts(truncated);
    EXPECT_THROW(read_tensor(ts), FormatError);
}
