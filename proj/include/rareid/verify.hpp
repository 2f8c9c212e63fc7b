#pragma once

#include <array>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "rareid/attention.hpp"
#include "rareid/gradcheck.hpp"
#include "rareid/losses.hpp"
#include "rareid/multiscale.hpp"
#include "rareid/network.hpp"

// Finite-difference checks of each trainable block on small fixed-seed
// instances. Shared by the CLI and the test suites.

namespace rareid {

namespace detail {

inline Tensor uniform_fill(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

template <typename Module>
NamedTensors learnable(Module& m, const std::string& prefix) {
    NamedTensors out;
    m.visit(prefix, [&](const std::string& name, Tensor& t, bool is_buffer) {
        if (!is_buffer) out.emplace_back(name, t);
    });
    return out;
}

inline void merge(GradCheckReport& into, const GradCheckReport& from) {
    into.entries.insert(into.entries.end(), from.entries.begin(), from.entries.end());
    into.max_rel_error = std::max(into.max_rel_error, from.max_rel_error);
    into.nonfinite += from.nonfinite;
    into.tol = from.tol;
}

}  // namespace detail

/// Channel and spatial attention feeding both the forward and the reverse mask.
inline GradCheckReport gradcheck_attention(const GradCheckOptions& opts = {}) {
    Rng rng(opts.seed + 1);
    AttentionBlock block(16, 16, rng);
    Tensor m = detail::uniform_fill({3, 16, 3, 2}, rng);
    Tensor probe = detail::uniform_fill({3, 16, 3, 2}, rng);
    NamedTensors params = detail::learnable(block, "att");
    params.emplace_back("input", m);
    GradCheckReport report;
    for (MaskSide side : {MaskSide::forward, MaskSide::reverse}) {
        auto f = [&](Tape& t) {
            auto pair = block.forward(t, m, Mode::train);
            return sum(t, mul(t, apply_attention(t, m, pair, side), probe));
        };
        detail::merge(report, grad_check(f, params, opts));
    }
    return report;
}

inline GradCheckReport gradcheck_multiscale(const GradCheckOptions& opts = {}) {
    Rng rng(opts.seed + 2);
    MultiScale ms(8, rng);
    // Redraw the input until no pre-activation sits within the probe step of the ReLU kink.
    Tensor x;
    for (bool clear = false; !clear;) {
        x = detail::uniform_fill({2, 8, 4, 5}, rng);
        Tape tape(false);
        auto parts = split_channels(tape, x, 4);
        clear = true;
        for (std::size_t g = 0; g < 4 && clear; ++g) {
            const Tensor pre = ms.groups[g].forward(tape, parts[g]);
            for (double v : pre.data())
                if (std::abs(v) < 10.0 * opts.step) clear = false;
        }
    }
    Tensor probe = detail::uniform_fill({2, 8, 4, 5}, rng);
    NamedTensors params = detail::learnable(ms, "ms");
    params.emplace_back("input", x);
    return grad_check([&](Tape& t) { return sum(t, mul(t, ms.forward(t, x), probe)); }, params, opts);
}

/// Ranked list loss under both positive-weighting settings, and smoothed cross-entropy.
inline GradCheckReport gradcheck_losses(const GradCheckOptions& opts = {}) {
    Rng rng(opts.seed + 3);
    const std::vector<int> labels{0, 0, 1, 1, 2, 2};
    Tensor emb = detail::uniform_fill({6, 3}, rng, -0.7, 0.7);
    Tensor logits = detail::uniform_fill({6, 5}, rng, -3.0, 3.0);
    GradCheckReport report;
    for (auto pw : {PositiveWeighting::as_written, PositiveWeighting::uniform}) {
        RllParams p;
        p.positive_weighting = pw;
        detail::merge(report, grad_check([&](Tape& t) { return rll_loss(t, emb, labels, p); }, {{"embedding", emb}}, opts));
    }
    detail::merge(report, grad_check([&](Tape& t) { return smoothed_ce_loss(t, logits, labels, 0.1); },
                                     {{"logits", logits}}, opts));
    return report;
}

/// The five-loss objective through the whole training network on a 4-image batch of 8×4 inputs.
inline GradCheckReport gradcheck_network(GradCheckOptions opts = {}) {
    Rng rng(opts.seed + 13);
    NetworkConfig c;
    c.backbone.stage_channels = {16, 16, 32, 32};
    c.backbone.blocks_per_stage = 1;
    c.backbone.input_height = 8;
    c.backbone.input_width = 4;
    c.num_classes = 3;
    ReidNetwork net(c, rng);
    Tensor images = detail::uniform_fill({4, 3, 8, 4}, rng);
    const std::vector<int> labels{0, 0, 1, 1};
    const LossWeights w;
    const RllParams rp;
    auto objective = [&](Tape& t) {
        auto out = net.forward_train(t, images, Mode::train);
        LossTerms terms;
        terms.l_rll = rll_loss(t, out.embedding, labels, rp);
        terms.l_id1 = smoothed_ce_loss(t, out.logits1, labels, 0.1);
        terms.l_id2 = smoothed_ce_loss(t, out.logits2, labels, 0.1);
        terms.l_id3 = smoothed_ce_loss(t, out.logits3, labels, 0.1);
        terms.l_id4 = smoothed_ce_loss(t, out.logits4, labels, 0.1);
        return total_loss(t, terms, w);
    };
    if (opts.max_probes_per_param == 0) opts.max_probes_per_param = 8;
    return grad_check(objective, net.parameters(), opts);
}

struct GradCheckBlock {
    const char* name;
    std::function<GradCheckReport(const GradCheckOptions&)> run;
};

inline const std::array<GradCheckBlock, 4>& gradcheck_blocks() {
    static const std::array<GradCheckBlock, 4> blocks{{
        {"attention", [](const GradCheckOptions& o) { return gradcheck_attention(o); }},
        {"multiscale", [](const GradCheckOptions& o) { return gradcheck_multiscale(o); }},
        {"losses", [](const GradCheckOptions& o) { return gradcheck_losses(o); }},
        {"network", [](const GradCheckOptions& o) { return gradcheck_network(o); }},
    }};
    return blocks;
}

}  // namespace rareid
