#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/config.hpp"
#include "rareid/network.hpp"
#include "rareid/serialize.hpp"

// Checkpoint directory layout:
//   manifest.txt        "rareid-checkpoint 1", kind, iteration, seed, config JSON, tensor list
//   tensors/<name>.tnsr one record per parameter or BN buffer

namespace rareid {

/// A checkpoint cannot serve the requested network (missing or mismatched tensors).
class ArtifactError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

enum class CheckpointKind { full, inference };

struct CheckpointInfo {
    CheckpointKind kind = CheckpointKind::full;
    std::size_t iteration = 0;
    std::uint64_t seed = 0;
    Config config;
    std::vector<std::string> tensor_names;
};

inline void save_checkpoint(const std::filesystem::path& dir, ReidNetwork& net, const Config& config,
                            std::size_t iteration, CheckpointKind kind) {
    std::filesystem::create_directories(dir / "tensors");
    std::vector<std::string> names;
    auto write = [&](const std::string& name, Tensor& t, bool) {
        save_tensor(dir / "tensors" / (name + ".tnsr"), t);
        names.push_back(name);
    };
    if (kind == CheckpointKind::full) {
        net.visit(write);
    } else {
        net.visit_inference(write);
    }
    std::ofstream m(dir / "manifest.txt");
    if (!m) throw std::runtime_error("cannot write " + (dir / "manifest.txt").string());
    m << "rareid-checkpoint 1\n";
    m << "kind " << (kind == CheckpointKind::full ? "full" : "inference") << '\n';
    m << "iteration " << iteration << '\n';
    m << "seed " << config.seed << '\n';
    // The output directory says where a run wrote, not what it learned.
    Json echo = config_to_json(config);
    echo.erase("output_dir");
    m << "config " << echo.dump() << '\n';
    for (const auto& n : names) m << "tensor " << n << '\n';
    if (!m) throw std::runtime_error("failed writing checkpoint manifest");
}

inline CheckpointInfo read_manifest(const std::filesystem::path& dir) {
    std::ifstream m(dir / "manifest.txt");
    if (!m) throw ArtifactError("checkpoint manifest missing: " + (dir / "manifest.txt").string());
    std::string line;
    std::getline(m, line);
    if (line != "rareid-checkpoint 1") throw ArtifactError("unrecognised checkpoint header '" + line + "'");
    CheckpointInfo info;
    bool have_config = false;
    while (std::getline(m, line)) {
        const auto sp = line.find(' ');
        const std::string key = line.substr(0, sp);
        const std::string value = sp == std::string::npos ? "" : line.substr(sp + 1);
        if (key == "kind") {
            if (value == "full") info.kind = CheckpointKind::full;
            else if (value == "inference") info.kind = CheckpointKind::inference;
            else throw ArtifactError("unknown checkpoint kind '" + value + "'");
        } else if (key == "iteration") {
            info.iteration = std::stoull(value);
        } else if (key == "seed") {
            info.seed = std::stoull(value);
        } else if (key == "config") {
            Json j = Json::parse(value, nullptr, false);
            if (j.is_discarded()) throw ArtifactError("checkpoint config is not valid JSON");
            info.config = config_from_json(j);
            have_config = true;
        } else if (key == "tensor") {
            info.tensor_names.push_back(value);
        } else if (!key.empty()) {
            throw ArtifactError("unknown checkpoint manifest entry '" + key + "'");
        }
    }
    if (!have_config) throw ArtifactError("checkpoint manifest lacks a config line");
    return info;
}

namespace detail {

inline void load_into(const std::filesystem::path& dir, const std::string& name, Tensor& t) {
    const auto path = dir / "tensors" / (name + ".tnsr");
    if (!std::filesystem::exists(path)) throw ArtifactError("checkpoint is missing tensor '" + name + "'");
    Tensor stored = load_tensor(path);
    if (stored.shape() != t.shape()) {
        throw ArtifactError("tensor '" + name + "' has shape " + to_string(stored.shape()) + ", expected " +
                            to_string(t.shape()));
    }
    std::copy(stored.data().begin(), stored.data().end(), t.data().begin());
}

}  // namespace detail

/// Network for inference only: trunk, attention and branch-3 BN. Works on
/// full and inference checkpoints alike.
inline ReidNetwork load_inference_network(const std::filesystem::path& dir, CheckpointInfo* info_out = nullptr) {
    CheckpointInfo info = read_manifest(dir);
    Rng unused(0);
    ReidNetwork net(info.config.network, unused);
    net.strip_auxiliary();
    net.visit_inference([&](const std::string& name, Tensor& t, bool) { detail::load_into(dir, name, t); });
    if (info_out) *info_out = std::move(info);
    return net;
}

/// Every tensor, including the auxiliary training heads.
inline ReidNetwork load_full_network(const std::filesystem::path& dir, CheckpointInfo* info_out = nullptr) {
    CheckpointInfo info = read_manifest(dir);
    if (info.kind != CheckpointKind::full) throw ArtifactError("an inference checkpoint cannot restore training heads");
    Rng unused(0);
    ReidNetwork net(info.config.network, unused);
    net.visit([&](const std::string& name, Tensor& t, bool) { detail::load_into(dir, name, t); });
    if (info_out) *info_out = std::move(info);
    return net;
}

}  // namespace rareid
