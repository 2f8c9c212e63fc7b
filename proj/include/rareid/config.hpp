#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "rareid/datapipe.hpp"
#include "rareid/losses.hpp"
#include "rareid/network.hpp"
#include "rareid/optim.hpp"

namespace rareid {

using Json = nlohmann::json;

/// Invalid configuration; the message names the offending field.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct SamplerConfig {
    std::size_t p = 8;
    std::size_t k = 4;
};

struct TrainLoopConfig {
    std::size_t iterations = 200;
    std::size_t iterations_per_epoch = 20;
    std::size_t checkpoint_interval = 0;  // 0: only the final checkpoint
};

struct Config {
    std::uint64_t seed = 0;
    std::string output_dir = "run";
    SyntheticDatasetSpec dataset;
    NetworkConfig network;  // num_classes follows dataset.num_identities
    RllParams rll;
    double smoothing_epsilon = 0.1;
    LossWeights loss_weights;
    LrSchedule schedule;
    AdamParams adam;
    AugmentParams augment;
    SamplerConfig sampler;
    TrainLoopConfig train;

    void validate() const {
        auto wrap = [](const std::function<void()>& check) {
            try {
                check();
            } catch (const std::invalid_argument& e) {
                throw ConfigError(e.what());
            }
        };
        wrap([&] { dataset.validate(); });
        wrap([&] { network.validate(); });
        wrap([&] { rll.validate(); });
        wrap([&] { SmoothingParams{smoothing_epsilon, network.num_classes}.validate(); });
        wrap([&] { loss_weights.validate(); });
        wrap([&] { schedule.validate(); });
        wrap([&] { adam.validate(); });
        wrap([&] { augment.validate(); });
        if (network.num_classes != dataset.num_identities) {
            throw ConfigError("network classes must equal dataset.num_identities");
        }
        if (network.backbone.input_height != dataset.height || network.backbone.input_width != dataset.width) {
            throw ConfigError("network input size must equal the dataset image size");
        }
        if (sampler.p < 2) throw ConfigError("sampler.P must be at least 2");
        if (sampler.k < 2) throw ConfigError("sampler.K must be at least 2");
        if (sampler.p > dataset.num_identities) {
            throw ConfigError("sampler.P = " + std::to_string(sampler.p) + " exceeds dataset.num_identities = " +
                              std::to_string(dataset.num_identities));
        }
        const std::size_t train_images =
            dataset.images_per_identity - dataset.query_per_identity - dataset.gallery_per_identity;
        if (sampler.k > train_images) {
            throw ConfigError("sampler.K = " + std::to_string(sampler.k) + " exceeds the " +
                              std::to_string(train_images) + " training images per identity");
        }
        if (train.iterations_per_epoch == 0) throw ConfigError("train.iterations_per_epoch must be positive");
    }
};

namespace detail {

inline std::string join_path(const std::string& prefix, const std::string& key) {
    return prefix.empty() ? key : prefix + "." + key;
}

// Visits the members of one JSON object, rejecting unknown keys by name.
class ObjectReader {
public:
    ObjectReader(const Json& j, std::string path) : j_(j), path_(std::move(path)) {
        if (!j_.is_object()) throw ConfigError(label() + " must be an object");
    }

    template <typename Fn>
    ObjectReader& field(const std::string& key, Fn&& fn) {
        known_.push_back(key);
        if (auto it = j_.find(key); it != j_.end()) fn(*it, join_path(path_, key));
        return *this;
    }

    void finish() const {
        for (const auto& [key, value] : j_.items()) {
            if (std::find(known_.begin(), known_.end(), key) == known_.end()) {
                throw ConfigError("unknown field '" + join_path(path_, key) + "'");
            }
        }
    }

private:
    std::string label() const { return path_.empty() ? "config" : "'" + path_ + "'"; }

    const Json& j_;
    std::string path_;
    std::vector<std::string> known_;
};

inline auto as_size(std::size_t& out) {
    return [&out](const Json& v, const std::string& path) {
        if (!v.is_number_unsigned()) throw ConfigError("field '" + path + "' must be a nonnegative integer");
        out = v.get<std::size_t>();
    };
}

inline auto as_u64(std::uint64_t& out) {
    return [&out](const Json& v, const std::string& path) {
        if (!v.is_number_unsigned()) throw ConfigError("field '" + path + "' must be a nonnegative integer");
        out = v.get<std::uint64_t>();
    };
}

inline auto as_double(double& out) {
    return [&out](const Json& v, const std::string& path) {
        if (!v.is_number()) throw ConfigError("field '" + path + "' must be a number");
        out = v.get<double>();
    };
}

inline auto as_bool(bool& out) {
    return [&out](const Json& v, const std::string& path) {
        if (!v.is_boolean()) throw ConfigError("field '" + path + "' must be true or false");
        out = v.get<bool>();
    };
}

inline auto as_string(std::string& out) {
    return [&out](const Json& v, const std::string& path) {
        if (!v.is_string()) throw ConfigError("field '" + path + "' must be a string");
        out = v.get<std::string>();
    };
}

template <std::size_t N>
auto as_size_array(std::array<std::size_t, N>& out) {
    return [&out](const Json& v, const std::string& path) {
        if (!v.is_array() || v.size() != N) {
            throw ConfigError("field '" + path + "' must be an array of " + std::to_string(N) + " integers");
        }
        for (std::size_t i = 0; i < N; ++i) as_size(out[i])(v[i], path + "[" + std::to_string(i) + "]");
    };
}

inline auto as_pair(double& lo, double& hi) {
    return [&lo, &hi](const Json& v, const std::string& path) {
        if (!v.is_array() || v.size() != 2) throw ConfigError("field '" + path + "' must be an array [min, max]");
        as_double(lo)(v[0], path + "[0]");
        as_double(hi)(v[1], path + "[1]");
    };
}

template <typename Fn>
auto as_object(Fn&& fill) {
    return [fill](const Json& v, const std::string& path) {
        ObjectReader r(v, path);
        fill(r);
        r.finish();
    };
}

}  // namespace detail

/// Builds a validated Config from JSON; omitted fields keep their defaults.
inline Config config_from_json(const Json& j) {
    using namespace detail;
    Config c;
    ObjectReader root(j, "");
    root.field("seed", as_u64(c.seed))
        .field("output_dir", as_string(c.output_dir))
        .field("dataset", as_object([&](ObjectReader& r) {
                   auto& d = c.dataset;
                   r.field("num_identities", as_size(d.num_identities))
                       .field("images_per_identity", as_size(d.images_per_identity))
                       .field("height", as_size(d.height))
                       .field("width", as_size(d.width))
                       .field("cameras", as_size(d.cameras))
                       .field("noise_level", as_double(d.noise_level))
                       .field("seed", as_u64(d.seed))
                       .field("query_per_identity", as_size(d.query_per_identity))
                       .field("gallery_per_identity", as_size(d.gallery_per_identity));
               }))
        .field("backbone", as_object([&](ObjectReader& r) {
                   auto& b = c.network.backbone;
                   r.field("stage_channels", as_size_array(b.stage_channels))
                       .field("stage_strides", as_size_array(b.stage_strides))
                       .field("blocks_per_stage", as_size(b.blocks_per_stage));
               }))
        .field("attention", as_object([&](ObjectReader& r) { r.field("reduction", as_size(c.network.reduction)); }))
        .field("ablation", as_object([&](ObjectReader& r) {
                   r.field("reverse_attention_on", as_bool(c.network.reverse_attention_on))
                       .field("multiscale_supervision_on", as_bool(c.network.multiscale_supervision_on));
               }))
        .field("rll", as_object([&](ObjectReader& r) {
                   r.field("alpha", as_double(c.rll.alpha))
                       .field("margin", as_double(c.rll.margin))
                       .field("temperature", as_double(c.rll.temperature))
                       .field("lambda_balance", as_double(c.rll.lambda_balance))
                       .field("positive_weighting", [&](const Json& v, const std::string& path) {
                           std::string s;
                           as_string(s)(v, path);
                           if (s == "as_written") c.rll.positive_weighting = PositiveWeighting::as_written;
                           else if (s == "uniform") c.rll.positive_weighting = PositiveWeighting::uniform;
                           else throw ConfigError("field '" + path + "' must be \"as_written\" or \"uniform\"");
                       });
               }))
        .field("smoothing", as_object([&](ObjectReader& r) { r.field("epsilon", as_double(c.smoothing_epsilon)); }))
        .field("loss_weights", as_object([&](ObjectReader& r) {
                   auto& w = c.loss_weights;
                   r.field("lambda1", as_double(w.lambda1))
                       .field("lambda2", as_double(w.lambda2))
                       .field("lambda3", as_double(w.lambda3))
                       .field("lambda4", as_double(w.lambda4))
                       .field("lambda5", as_double(w.lambda5));
               }))
        .field("schedule", as_object([&](ObjectReader& r) {
                   auto& s = c.schedule;
                   r.field("warmup_epochs", as_size(s.warmup_epochs))
                       .field("warmup_peak", as_double(s.warmup_peak))
                       .field("pieces", [&](const Json& v, const std::string& path) {
                           if (!v.is_array()) throw ConfigError("field '" + path + "' must be an array");
                           s.pieces.clear();
                           for (std::size_t i = 0; i < v.size(); ++i) {
                               LrSchedule::Piece p{};
                               as_object([&](ObjectReader& pr) {
                                   pr.field("last_epoch", as_size(p.last_epoch)).field("lr", as_double(p.lr));
                               })(v[i], path + "[" + std::to_string(i) + "]");
                               s.pieces.push_back(p);
                           }
                       });
               }))
        .field("adam", as_object([&](ObjectReader& r) {
                   r.field("beta1", as_double(c.adam.beta1))
                       .field("beta2", as_double(c.adam.beta2))
                       .field("eps", as_double(c.adam.eps));
               }))
        .field("augment", as_object([&](ObjectReader& r) {
                   auto& a = c.augment;
                   r.field("flip_probability", as_double(a.flip_probability))
                       .field("erase_probability", as_double(a.erase_probability))
                       .field("erase_area_range", as_pair(a.erase_area_min, a.erase_area_max))
                       .field("erase_aspect_range", as_pair(a.erase_aspect_min, a.erase_aspect_max))
                       .field("erase_fill", as_double(a.erase_fill))
                       .field("erase_attempts", as_size(a.erase_attempts));
               }))
        .field("sampler", as_object([&](ObjectReader& r) { r.field("P", as_size(c.sampler.p)).field("K", as_size(c.sampler.k)); }))
        .field("train", as_object([&](ObjectReader& r) {
                   r.field("iterations", as_size(c.train.iterations))
                       .field("iterations_per_epoch", as_size(c.train.iterations_per_epoch))
                       .field("checkpoint_interval", as_size(c.train.checkpoint_interval));
               }));
    root.finish();
    c.network.num_classes = c.dataset.num_identities;
    c.network.backbone.input_height = c.dataset.height;
    c.network.backbone.input_width = c.dataset.width;
    c.validate();
    return c;
}

/// Effective configuration with every default resolved. Feeding it back to
/// config_from_json reproduces the same Config.
inline Json config_to_json(const Config& c) {
    Json pieces = Json::array();
    for (const auto& p : c.schedule.pieces) pieces.push_back({{"last_epoch", p.last_epoch}, {"lr", p.lr}});
    const auto& d = c.dataset;
    const auto& b = c.network.backbone;
    const auto& a = c.augment;
    return Json{
        {"seed", c.seed},
        {"output_dir", c.output_dir},
        {"dataset",
         {{"num_identities", d.num_identities},
          {"images_per_identity", d.images_per_identity},
          {"height", d.height},
          {"width", d.width},
          {"cameras", d.cameras},
          {"noise_level", d.noise_level},
          {"seed", d.seed},
          {"query_per_identity", d.query_per_identity},
          {"gallery_per_identity", d.gallery_per_identity}}},
        {"backbone",
         {{"stage_channels", b.stage_channels}, {"stage_strides", b.stage_strides}, {"blocks_per_stage", b.blocks_per_stage}}},
        {"attention", {{"reduction", c.network.reduction}}},
        {"ablation",
         {{"reverse_attention_on", c.network.reverse_attention_on},
          {"multiscale_supervision_on", c.network.multiscale_supervision_on}}},
        {"rll",
         {{"alpha", c.rll.alpha},
          {"margin", c.rll.margin},
          {"temperature", c.rll.temperature},
          {"lambda_balance", c.rll.lambda_balance},
          {"positive_weighting", c.rll.positive_weighting == PositiveWeighting::as_written ? "as_written" : "uniform"}}},
        {"smoothing", {{"epsilon", c.smoothing_epsilon}}},
        {"loss_weights",
         {{"lambda1", c.loss_weights.lambda1},
          {"lambda2", c.loss_weights.lambda2},
          {"lambda3", c.loss_weights.lambda3},
          {"lambda4", c.loss_weights.lambda4},
          {"lambda5", c.loss_weights.lambda5}}},
        {"schedule", {{"warmup_epochs", c.schedule.warmup_epochs}, {"warmup_peak", c.schedule.warmup_peak}, {"pieces", pieces}}},
        {"adam", {{"beta1", c.adam.beta1}, {"beta2", c.adam.beta2}, {"eps", c.adam.eps}}},
        {"augment",
         {{"flip_probability", a.flip_probability},
          {"erase_probability", a.erase_probability},
          {"erase_area_range", {a.erase_area_min, a.erase_area_max}},
          {"erase_aspect_range", {a.erase_aspect_min, a.erase_aspect_max}},
          {"erase_fill", a.erase_fill},
          {"erase_attempts", a.erase_attempts}}},
        {"sampler", {{"P", c.sampler.p}, {"K", c.sampler.k}}},
        {"train",
         {{"iterations", c.train.iterations},
          {"iterations_per_epoch", c.train.iterations_per_epoch},
          {"checkpoint_interval", c.train.checkpoint_interval}}},
    };
}

/// Applies one "a.b.c=value" override. The value is parsed as JSON when it
/// parses, otherwise taken as a string.
inline void apply_override(Json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' must look like key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string raw = assignment.substr(eq + 1);
    Json value = Json::parse(raw, nullptr, false);
    if (value.is_discarded()) value = raw;

    Json* node = &j;
    std::stringstream ss(key);
    std::string part;
    std::vector<std::string> parts;
    while (std::getline(ss, part, '.')) parts.push_back(part);
    for (std::size_t i = 0; i < parts.size(); ++i) {
        if (parts[i].empty()) throw ConfigError("override key '" + key + "' has an empty component");
        if (!node->is_object()) throw ConfigError("override key '" + key + "' descends into a non-object");
        if (i + 1 == parts.size()) {
            (*node)[parts[i]] = value;
        } else {
            node = &(*node)[parts[i]];
            if (node->is_null()) *node = Json::object();
        }
    }
}

/// Reads a JSON config file; an empty or whitespace-only file is `{}`.
inline Json read_config_file(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot read config file " + path.string());
    std::stringstream buf;
    buf << in.rdbuf();
    const std::string text = buf.str();
    if (text.find_first_not_of(" \t\r\n") == std::string::npos) return Json::object();
    Json j = Json::parse(text, nullptr, false);
    if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
    return j;
}

}  // namespace rareid
