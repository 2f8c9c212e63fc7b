#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "rareid/checkpoint.hpp"
#include "rareid/config.hpp"
#include "rareid/datapipe.hpp"
#include "rareid/serialize.hpp"
#include "rareid/trainer.hpp"
#include "rareid/verify.hpp"

// Subcommand bodies. Each returns a process exit code; main() only parses
// arguments.

namespace rareid::cli {

enum ExitCode : int {
    kOk = 0,
    kFailure = 1,
    kConfigError = 2,
    kTrainingAbort = 3,
    kArtifactMismatch = 4,
    kVerificationFailure = 5,
};

struct TrainArgs {
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> out;
    std::optional<std::uint64_t> seed;
    std::vector<std::string> overrides;
};

struct EvalArgs {
    std::filesystem::path checkpoint;
    std::optional<std::filesystem::path> config;
    std::optional<std::filesystem::path> dataset;  // exported dataset directory
    std::optional<std::filesystem::path> out;
    std::vector<std::string> overrides;
};

struct InferArgs {
    std::filesystem::path checkpoint;
    std::filesystem::path image;
};

struct GradCheckArgs {
    std::string scope = "all";
    std::uint64_t seed = 0;
    double tol = 1e-4;
};

/// File, then --set overrides, then the dedicated --seed / --out flags.
inline Config resolve_config(const TrainArgs& a) {
    Json j = a.config ? read_config_file(*a.config) : Json::object();
    if (!j.is_object()) throw ConfigError("config file must hold a JSON object");
    for (const auto& o : a.overrides) apply_override(j, o);
    if (a.seed) j["seed"] = *a.seed;
    if (a.out) j["output_dir"] = a.out->string();
    return config_from_json(j);
}

namespace detail {

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("cannot write " + path.string());
    f << text;
    if (!f) throw std::runtime_error("failed writing " + path.string());
}

template <typename Fn>
int guarded(std::ostream& err, Fn&& body) {
    try {
        return body();
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kConfigError;
    } catch (const NonFiniteLossError& e) {
        err << "training aborted: " << e.what() << '\n';
        return kTrainingAbort;
    } catch (const ArtifactError& e) {
        err << "artifact error: " << e.what() << '\n';
        return kArtifactMismatch;
    } catch (const FormatError& e) {
        err << "artifact error: " << e.what() << '\n';
        return kArtifactMismatch;
    } catch (const std::exception& e) {
        err << "error: " << e.what() << '\n';
        return kFailure;
    }
}

inline std::string shape_text(const Shape& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "x" : "") + std::to_string(s[i]);
    return out;
}

inline void check_image(const Tensor& image, const NetworkConfig& nc, const std::string& what) {
    const Shape expected{3, nc.backbone.input_height, nc.backbone.input_width};
    if (image.shape() != expected) {
        throw ArtifactError(what + " has shape " + shape_text(image.shape()) + ", checkpoint expects " +
                            shape_text(expected));
    }
}

}  // namespace detail

/**
 * Writes under the output directory:
 *   effective_config.json  every default resolved; feeding it back reproduces the run
 *   train_log.csv          one row per iteration
 *   checkpoint/            full network after the last iteration
 *   inference/             the branch-3 inference subset of the same weights
 *   checkpoints/iter_N/    intermediate full checkpoints when checkpoint_interval > 0
 */
inline int cmd_train(const TrainArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const Config config = resolve_config(args);
        const std::filesystem::path dir = config.output_dir;
        std::filesystem::create_directories(dir);
        detail::write_text(dir / "effective_config.json", config_to_json(config).dump(2) + "\n");

        const Dataset dataset = generate_dataset(config.dataset);
        Trainer trainer(config, dataset);
        std::ofstream log(dir / "train_log.csv", std::ios::binary);
        if (!log) throw std::runtime_error("cannot write " + (dir / "train_log.csv").string());
        log << log_header(config.network) << '\n';

        const auto start = std::chrono::steady_clock::now();
        for (std::size_t i = 1; i <= config.train.iterations; ++i) {
            TrainLogRow row;
            try {
                row = trainer.step();
            } catch (const NonFiniteLossError&) {
                log.flush();
                throw;
            }
            log << log_line(row) << '\n';
            if (i % config.train.iterations_per_epoch == 0 || i == config.train.iterations) {
                out << "iter " << row.iter << " epoch " << row.epoch << " lr " << format_double(row.lr) << " total "
                    << format_double(row.total) << '\n';
            }
            const std::size_t every = config.train.checkpoint_interval;
            if (every > 0 && i % every == 0 && i != config.train.iterations) {
                char name[32];
                std::snprintf(name, sizeof name, "iter_%06zu", i);
                save_checkpoint(dir / "checkpoints" / name, trainer.network(), config, i, CheckpointKind::full);
            }
        }
        log.close();

        for (const char* sub : {"checkpoint", "inference"}) std::filesystem::remove_all(dir / sub);
        save_checkpoint(dir / "checkpoint", trainer.network(), config, trainer.iteration(), CheckpointKind::full);
        save_checkpoint(dir / "inference", trainer.network(), config, trainer.iteration(), CheckpointKind::inference);
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        out << "trained " << trainer.iteration() << " iterations in " << secs << " s; wrote " << dir.string() << '\n';
        return kOk;
    });
}

/// Embeds query and gallery with the inference network only and writes eval_report.json.
inline int cmd_eval(const EvalArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        CheckpointInfo info;
        ReidNetwork net = load_inference_network(args.checkpoint, &info);

        Dataset dataset;
        if (args.dataset) {
            if (args.config || !args.overrides.empty()) {
                throw ConfigError("--dataset cannot be combined with --config or --set");
            }
            dataset = import_dataset(*args.dataset);
        } else {
            Json j = config_to_json(info.config);
            if (args.config) j.merge_patch(read_config_file(*args.config));
            for (const auto& o : args.overrides) apply_override(j, o);
            dataset = generate_dataset(config_from_json(j).dataset);
        }
        for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
            if (dataset.samples[i].split == Split::train) continue;
            detail::check_image(dataset.samples[i].image, info.config.network, "image " + std::to_string(i));
        }

        const EvalReport report = evaluate_network(net, dataset);
        Json ap = Json::array();
        for (const auto& v : report.per_query_ap) ap.push_back(v ? Json(*v) : Json(nullptr));
        const Json j = {{"map", report.map},
                        {"cmc", report.cmc},
                        {"rank1", report.rank(1)},
                        {"rank5", report.rank(5)},
                        {"excluded_queries", report.excluded_queries},
                        {"per_query_ap", ap}};
        const std::filesystem::path dir = args.out ? *args.out : args.checkpoint.parent_path();
        if (!dir.empty()) std::filesystem::create_directories(dir);
        detail::write_text(dir / "eval_report.json", j.dump(2) + "\n");

        out << "mAP " << format_double(report.map) << '\n';
        out << "Rank-1 " << format_double(report.rank(1)) << '\n';
        out << "Rank-5 " << format_double(report.rank(5)) << '\n';
        if (!report.excluded_queries.empty()) out << "excluded queries " << report.excluded_queries.size() << '\n';
        return kOk;
    });
}

/// Prints the embedding of one 3×H×W tensor file as a single line.
inline int cmd_infer(const InferArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        CheckpointInfo info;
        ReidNetwork net = load_inference_network(args.checkpoint, &info);
        const Tensor image = load_tensor(args.image);
        detail::check_image(image, info.config.network, args.image.string());
        const Tensor emb = net.forward_infer(stack_images({image}));
        std::string line;
        for (std::size_t i = 0; i < emb.numel(); ++i) line += (i ? " " : "") + format_double(emb[i]);
        out << line << '\n';
        return kOk;
    });
}

inline std::string gradcheck_scope_names() {
    std::string names;
    for (const auto& b : gradcheck_blocks()) names += std::string(b.name) + ", ";
    return names + "all";
}

inline int cmd_gradcheck(const GradCheckArgs& args, std::ostream& out, std::ostream& err) {
    bool known = args.scope == "all";
    for (const auto& b : gradcheck_blocks()) known = known || args.scope == b.name;
    if (!known) {
        err << "unknown gradcheck scope '" << args.scope << "'; valid: " << gradcheck_scope_names() << '\n';
        return kConfigError;
    }
    return detail::guarded(err, [&] {
        GradCheckOptions opts;
        opts.seed = args.seed;
        opts.tol = args.tol;
        if (!(opts.tol > 0.0)) throw ConfigError("gradcheck tolerance must be positive");
        std::vector<std::string> failed;
        char line[160];
        std::snprintf(line, sizeof line, "%-12s %14s %8s %8s  %s\n", "block", "max_rel_error", "probes", "seconds", "result");
        out << line;
        for (const auto& b : gradcheck_blocks()) {
            if (args.scope != "all" && args.scope != b.name) continue;
            const auto start = std::chrono::steady_clock::now();
            const GradCheckReport r = b.run(opts);
            const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
            std::size_t probes = 0;
            for (const auto& e : r.entries) probes += e.probes;
            const bool ok = r.passed();
            if (!ok) failed.push_back(b.name);
            std::snprintf(line, sizeof line, "%-12s %14.3e %8zu %8.2f  %s\n", b.name, r.max_rel_error, probes, secs,
                          ok ? "pass" : "FAIL");
            out << line;
        }
        if (failed.empty()) return static_cast<int>(kOk);
        std::string names;
        for (const auto& f : failed) names += (names.empty() ? "" : ", ") + f;
        err << "gradcheck failed: " << names << '\n';
        return static_cast<int>(kVerificationFailure);
    });
}

}  // namespace rareid::cli
