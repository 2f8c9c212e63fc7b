#pragma once

#include <array>
#include <cstddef>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/attention.hpp"
#include "rareid/gradcheck.hpp"
#include "rareid/layers.hpp"
#include "rareid/multiscale.hpp"
#include "rareid/ops.hpp"

namespace rareid {

inline constexpr std::size_t kNumStages = 4;
inline constexpr std::size_t kBottleneckExpansion = 4;

/// Raised when a model state cannot serve the requested computation.
class StateError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct BackboneConfig {
    std::array<std::size_t, kNumStages> stage_channels{16, 32, 64, 128};
    std::array<std::size_t, kNumStages> stage_strides{1, 2, 2, 1};
    std::size_t blocks_per_stage = 2;
    std::size_t input_height = 64;
    std::size_t input_width = 32;
};

struct NetworkConfig {
    BackboneConfig backbone;
    std::size_t reduction = 16;
    std::size_t num_classes = 8;
    bool reverse_attention_on = true;
    bool multiscale_supervision_on = true;

    void validate() const {
        const auto& b = backbone;
        if (reduction == 0) throw std::invalid_argument("attention.reduction must be at least 1");
        if (b.blocks_per_stage == 0) throw std::invalid_argument("backbone.blocks_per_stage must be positive");
        if (b.input_height == 0 || b.input_width == 0) throw std::invalid_argument("input size must be positive");
        if (b.stage_strides[kNumStages - 1] != 1) throw std::invalid_argument("backbone.stage_strides: last stage stride must be 1");
        for (std::size_t k = 0; k < kNumStages; ++k) {
            const std::size_t c = b.stage_channels[k];
            if (b.stage_strides[k] == 0) throw std::invalid_argument("backbone.stage_strides must be positive");
            if (c == 0 || c % reduction != 0) {
                throw std::invalid_argument("backbone.stage_channels[" + std::to_string(k) + "] = " + std::to_string(c) +
                                            " is not divisible by the reduction ratio " + std::to_string(reduction));
            }
            if (c % 4 != 0) {
                throw std::invalid_argument("backbone.stage_channels[" + std::to_string(k) + "] = " + std::to_string(c) +
                                            " is not divisible by 4");
            }
        }
        if (num_classes == 0) throw std::invalid_argument("num_classes must be positive");
    }

    std::size_t embedding_dim() const { return backbone.stage_channels[kNumStages - 1]; }
    std::size_t concat_width() const {
        std::size_t w = 0;
        for (std::size_t c : backbone.stage_channels) w += c;
        return w;
    }
};

/// 1×1 → 3×3 (strided) → 1×1 residual block with a projection shortcut
/// when the extent or width changes.
struct Bottleneck {
    Conv2d conv1, conv2, conv3;
    BatchNorm bn1, bn2, bn3;
    bool has_projection = false;
    Conv2d projection;
    BatchNorm projection_bn;

    Bottleneck() = default;
    Bottleneck(std::size_t cin, std::size_t cout, std::size_t stride, Rng& rng) {
        const std::size_t mid = cout / kBottleneckExpansion;
        conv1 = Conv2d(cin, mid, 1, 1, {}, {}, false, rng);
        bn1 = BatchNorm(mid);
        conv2 = Conv2d(mid, mid, 3, 3, {1, 1}, {stride, stride}, false, rng);
        bn2 = BatchNorm(mid);
        conv3 = Conv2d(mid, cout, 1, 1, {}, {}, false, rng);
        bn3 = BatchNorm(cout);
        has_projection = cin != cout || stride != 1;
        if (has_projection) {
            projection = Conv2d(cin, cout, 1, 1, {}, {stride, stride}, false, rng);
            projection_bn = BatchNorm(cout);
        }
    }

    Tensor forward(Tape& tape, const Tensor& x, Mode mode) {
        Tensor y = relu(tape, bn1.forward(tape, conv1.forward(tape, x), mode));
        y = relu(tape, bn2.forward(tape, conv2.forward(tape, y), mode));
        y = bn3.forward(tape, conv3.forward(tape, y), mode);
        Tensor shortcut = has_projection ? projection_bn.forward(tape, projection.forward(tape, x), mode) : x;
        return relu(tape, add(tape, y, shortcut));
    }

    void visit(const std::string& prefix, const TensorVisitor& fn) {
        conv1.visit(prefix + ".conv1", fn);
        bn1.visit(prefix + ".bn1", fn);
        conv2.visit(prefix + ".conv2", fn);
        bn2.visit(prefix + ".bn2", fn);
        conv3.visit(prefix + ".conv3", fn);
        bn3.visit(prefix + ".bn3", fn);
        if (has_projection) {
            projection.visit(prefix + ".projection", fn);
            projection_bn.visit(prefix + ".projection_bn", fn);
        }
    }
};

struct Stage {
    std::vector<Bottleneck> blocks;
    AttentionBlock attention;
};

/// Raw features, masks, and attended output of one backbone stage.
struct StageTrace {
    Tensor features;
    AttentionMaskPair masks;
    Tensor output;
};

struct ForwardOutputs {
    Tensor embedding;   // branch-2 global feature, B×D
    Tensor bn_feature;  // branch-3 feature after its BN, B×D
    Tensor logits1;     // reverse-attention branch (absent when ablated)
    Tensor logits2;     // global branch
    Tensor logits3;     // stage-2 deep supervision (absent when ablated)
    Tensor logits4;     // stage-3 deep supervision (absent when ablated)
    std::vector<StageTrace> stages;
};

/**
 * Four-stage residual backbone with per-stage attention plus the auxiliary
 * training heads. Only the trunk, the attention blocks and the branch-3 BN
 * are needed at inference; everything else is "auxiliary" and may be absent.
 */
class ReidNetwork {
public:
    ReidNetwork(const NetworkConfig& config, Rng& rng) : config_(config) {
        config_.validate();
        const auto& b = config_.backbone;
        const std::size_t c0 = b.stage_channels[0];
        stem_conv_ = Conv2d(3, c0, 3, 3, {1, 1}, {}, false, rng);
        stem_bn_ = BatchNorm(c0);
        std::size_t cin = c0;
        for (std::size_t k = 0; k < kNumStages; ++k) {
            const std::size_t cout = b.stage_channels[k];
            for (std::size_t i = 0; i < b.blocks_per_stage; ++i) {
                stages_[k].blocks.emplace_back(i == 0 ? cin : cout, cout, i == 0 ? b.stage_strides[k] : 1, rng);
            }
            stages_[k].attention = AttentionBlock(cout, config_.reduction, rng);
            cin = cout;
        }
        neck_bn_ = BatchNorm(config_.embedding_dim());
        global_classifier_ = Linear(config_.embedding_dim(), config_.num_classes, false, rng);
        if (config_.reverse_attention_on) {
            reverse_classifier_ = Linear(config_.concat_width(), config_.num_classes, false, rng);
        }
        if (config_.multiscale_supervision_on) {
            for (std::size_t s = 0; s < 2; ++s) {
                const std::size_t width = b.stage_channels[s + 1];
                deep_[s] = DeepSupervision{MultiScale(width, rng), Linear(width, config_.num_classes, false, rng)};
            }
        }
    }

    const NetworkConfig& config() const { return config_; }

    bool has_reverse_branch() const { return reverse_classifier_.has_value(); }
    bool has_deep_supervision() const { return deep_[0].has_value() && deep_[1].has_value(); }
    bool has_global_classifier() const { return global_classifier_.has_value(); }
    bool has_auxiliary() const { return has_reverse_branch() || has_deep_supervision() || has_global_classifier(); }

    /// Drops every tensor not needed by forward_infer.
    void strip_auxiliary() {
        reverse_classifier_.reset();
        global_classifier_.reset();
        deep_[0].reset();
        deep_[1].reset();
    }

    /// Residual blocks, attention, and the gated output of stage `k` (0-based).
    StageTrace backbone_stage(Tape& tape, const Tensor& x, std::size_t k, Mode mode) {
        if (k >= kNumStages) throw std::out_of_range("stage index out of range");
        const std::size_t expected = k == 0 ? config_.backbone.stage_channels[0] : config_.backbone.stage_channels[k - 1];
        if (x.rank() != 4 || x.dim(1) != expected) {
            throw ShapeError("stage " + std::to_string(k + 1) + " expects N×" + std::to_string(expected) +
                             "×H×W input, got " + to_string(x.shape()));
        }
        StageTrace trace;
        Tensor y = x;
        for (auto& block : stages_[k].blocks) y = block.forward(tape, y, mode);
        trace.features = y;
        trace.masks = stages_[k].attention.forward(tape, y, mode);
        trace.output = apply_attention(tape, y, trace.masks, MaskSide::forward);
        return trace;
    }

    ForwardOutputs forward_train(Tape& tape, const Tensor& images, Mode mode = Mode::train) {
        ForwardOutputs out = run_trunk(tape, images, mode);
        if (!global_classifier_) throw StateError("global classifier missing; state was stripped for inference");
        out.logits2 = global_classifier_->forward(tape, out.bn_feature);
        if (config_.reverse_attention_on) {
            if (!reverse_classifier_) throw StateError("reverse-attention branch missing from this state");
            std::vector<Tensor> pooled;
            for (const auto& s : out.stages) {
                Tensor rev = apply_attention(tape, s.features, s.masks, MaskSide::reverse);
                pooled.push_back(flatten(tape, global_avg_pool(tape, rev)));
            }
            out.logits1 = reverse_classifier_->forward(tape, concat(tape, pooled, 1));
        }
        if (config_.multiscale_supervision_on) {
            if (!has_deep_supervision()) throw StateError("deep-supervision branches missing from this state");
            for (std::size_t s = 0; s < 2; ++s) {
                Tensor ms = deep_[s]->layer.forward(tape, out.stages[s + 1].output);
                Tensor logits = deep_[s]->classifier.forward(tape, flatten(tape, global_avg_pool(tape, ms)));
                (s == 0 ? out.logits3 : out.logits4) = logits;
            }
        }
        return out;
    }

    /// Branch-3 embedding in eval mode. Never touches auxiliary tensors.
    Tensor forward_infer(const Tensor& images) {
        std::string missing;
        visit_inference([&](const std::string& name, Tensor& t, bool is_buffer) {
            if (is_buffer && name.ends_with(".batches_tracked") && t[0] <= 0.0 && missing.empty()) missing = name;
        });
        if (!missing.empty()) throw StateError("running statistics never populated: " + missing);
        Tape tape = Tape::disabled();
        return run_trunk(tape, images, Mode::eval).bn_feature;
    }

    /// Trunk, attention and branch-3 BN tensors.
    void visit_inference(const TensorVisitor& fn) {
        stem_conv_.visit("stem.conv", fn);
        stem_bn_.visit("stem.bn", fn);
        for (std::size_t k = 0; k < kNumStages; ++k) {
            const std::string prefix = "stage" + std::to_string(k + 1);
            for (std::size_t i = 0; i < stages_[k].blocks.size(); ++i) {
                stages_[k].blocks[i].visit(prefix + ".block" + std::to_string(i), fn);
            }
            stages_[k].attention.visit(prefix + ".att", fn);
        }
        neck_bn_.visit("branch3.bn", fn);
    }

    void visit_auxiliary(const TensorVisitor& fn) {
        if (global_classifier_) global_classifier_->visit("branch3.classifier", fn);
        if (reverse_classifier_) reverse_classifier_->visit("branch1.classifier", fn);
        for (std::size_t s = 0; s < 2; ++s) {
            if (!deep_[s]) continue;
            const std::string prefix = "branch" + std::to_string(s + 4);
            deep_[s]->layer.visit(prefix + ".ms", fn);
            deep_[s]->classifier.visit(prefix + ".classifier", fn);
        }
    }

    void visit(const TensorVisitor& fn) {
        visit_inference(fn);
        visit_auxiliary(fn);
    }

    /// Learnable tensors in a fixed deterministic order.
    NamedTensors parameters() {
        NamedTensors out;
        visit([&](const std::string& name, Tensor& t, bool is_buffer) {
            if (!is_buffer) out.emplace_back(name, t);
        });
        return out;
    }

    std::size_t parameter_count() {
        std::size_t n = 0;
        for (auto& [name, t] : parameters()) n += t.numel();
        return n;
    }

private:
    struct DeepSupervision {
        MultiScale layer;
        Linear classifier;
    };

    ForwardOutputs run_trunk(Tape& tape, const Tensor& images, Mode mode) {
        if (images.rank() != 4 || images.dim(1) != 3) {
            throw ShapeError("network expects B×3×H×W images, got " + to_string(images.shape()));
        }
        ForwardOutputs out;
        Tensor x = relu(tape, stem_bn_.forward(tape, stem_conv_.forward(tape, images), mode));
        for (std::size_t k = 0; k < kNumStages; ++k) {
            out.stages.push_back(backbone_stage(tape, x, k, mode));
            x = out.stages.back().output;
        }
        out.embedding = flatten(tape, global_avg_pool(tape, x));
        out.bn_feature = neck_bn_.forward(tape, out.embedding, mode);
        return out;
    }

    NetworkConfig config_;
    Conv2d stem_conv_;
    BatchNorm stem_bn_;
    std::array<Stage, kNumStages> stages_;
    BatchNorm neck_bn_;
    std::optional<Linear> global_classifier_;
    std::optional<Linear> reverse_classifier_;
    std::array<std::optional<DeepSupervision>, 2> deep_;
};

/// Fan-in-scaled uniform init for convs and linears, BN gamma = 1, beta = 0.
inline ReidNetwork init_parameters(const NetworkConfig& config, Rng& rng) { return ReidNetwork(config, rng); }

}  // namespace rareid
