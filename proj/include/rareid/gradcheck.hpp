#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "rareid/rng.hpp"
#include "rareid/tensor.hpp"

namespace rareid {

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct GradCheckOptions {
    double step = 1e-5;
    double tol = 1e-4;
    /// Denominator floor of the relative error |a − n| / max(|a|, |n|, floor).
    double floor = 1e-3;
    /// Coordinates probed per parameter; 0 probes every coordinate.
    std::size_t max_probes_per_param = 0;
    std::uint64_t seed = 0;
};

struct GradCheckEntry {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t probes = 0;
    std::size_t nonfinite = 0;
};

struct GradCheckReport {
    std::vector<GradCheckEntry> entries;
    double max_rel_error = 0.0;
    std::size_t nonfinite = 0;
    double tol = 0.0;
    bool passed() const { return nonfinite == 0 && max_rel_error < tol; }
};

inline double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

/**
 * Compares reverse-mode gradients of a scalar function against central
 * finite differences.
 *
 * `f` builds the scalar on the given tape from the tensors in `params`
 * (captured by the caller); the check perturbs parameter data in place and
 * restores it afterwards. Non-finite differences are counted and fail the
 * report instead of throwing.
 */
inline GradCheckReport grad_check(const std::function<Tensor(Tape&)>& f, NamedTensors params,
                                  const GradCheckOptions& opts = {}) {
    if (!(opts.step > 0.0)) throw std::invalid_argument("grad_check step must be positive");
    for (auto& [name, p] : params) {
        p.set_requires_grad(true);
        p.clear_grad();
    }
    {
        Tape tape;
        Tensor loss = f(tape);
        tape.backward(loss);
    }

    auto evaluate = [&f]() {
        Tape probe = Tape::disabled();
        return f(probe).item();
    };

    GradCheckReport report;
    report.tol = opts.tol;
    Rng rng(opts.seed);
    for (auto& [name, p] : params) {
        GradCheckEntry entry{name};
        const std::vector<double> analytic = p.has_grad() ? std::vector<double>(p.grad().begin(), p.grad().end())
                                                          : std::vector<double>(p.numel(), 0.0);
        std::vector<std::size_t> coords(p.numel());
        for (std::size_t i = 0; i < coords.size(); ++i) coords[i] = i;
        if (opts.max_probes_per_param && coords.size() > opts.max_probes_per_param) {
            for (std::size_t i = 0; i < opts.max_probes_per_param; ++i) {
                std::swap(coords[i], coords[i + rng.below(coords.size() - i)]);
            }
            coords.resize(opts.max_probes_per_param);
        }
        auto data = p.data();
        for (std::size_t i : coords) {
            const double saved = data[i];
            data[i] = saved + opts.step;
            const double up = evaluate();
            data[i] = saved - opts.step;
            const double down = evaluate();
            data[i] = saved;
            const double numeric = (up - down) / (2.0 * opts.step);
            ++entry.probes;
            if (!std::isfinite(numeric) || !std::isfinite(analytic[i])) {
                ++entry.nonfinite;
                continue;
            }
            entry.max_rel_error = std::max(entry.max_rel_error, relative_error(analytic[i], numeric, opts.floor));
        }
        report.max_rel_error = std::max(report.max_rel_error, entry.max_rel_error);
        report.nonfinite += entry.nonfinite;
        report.entries.push_back(std::move(entry));
    }
    return report;
}

}  // namespace rareid
