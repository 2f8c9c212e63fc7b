#pragma once

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/gradcheck.hpp"
#include "rareid/tensor.hpp"

namespace rareid {

/// Piecewise learning rate over epochs: linear warmup, then constant pieces.
struct LrSchedule {
    struct Piece {
        std::size_t last_epoch;  // inclusive
        double lr;
    };

    std::size_t warmup_epochs = 10;
    double warmup_peak = 3.5e-5;
    std::vector<Piece> pieces{{40, 3.5e-4}, {70, 3.5e-5}, {120, 3.5e-6}};

    void validate() const {
        if (!(warmup_peak > 0.0)) throw std::invalid_argument("schedule.warmup_peak must be positive");
        std::size_t prev = warmup_epochs;
        for (const auto& p : pieces) {
            if (p.last_epoch <= prev) throw std::invalid_argument("schedule.pieces must have increasing epochs after warmup");
            if (!(p.lr > 0.0)) throw std::invalid_argument("schedule.pieces learning rates must be positive");
            prev = p.last_epoch;
        }
        if (warmup_epochs == 0 && pieces.empty()) throw std::invalid_argument("schedule has no pieces");
    }

    /// Learning rate at epoch t ≥ 1. Past the last piece the last value holds.
    double at(std::size_t t) const {
        if (t < 1) throw std::invalid_argument("epoch index must be at least 1");
        if (t <= warmup_epochs) return warmup_peak * static_cast<double>(t) / static_cast<double>(warmup_epochs);
        for (const auto& p : pieces)
            if (t <= p.last_epoch) return p.lr;
        return pieces.empty() ? warmup_peak : pieces.back().lr;
    }
};

struct AdamParams {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;

    void validate() const {
        if (!(beta1 >= 0.0 && beta1 < 1.0)) throw std::invalid_argument("adam.beta1 must lie in [0, 1)");
        if (!(beta2 >= 0.0 && beta2 < 1.0)) throw std::invalid_argument("adam.beta2 must lie in [0, 1)");
        if (!(eps > 0.0)) throw std::invalid_argument("adam.eps must be positive");
    }
};

/// Bias-corrected Adam over a fixed, ordered parameter list.
class Adam {
public:
    Adam(NamedTensors params, AdamParams hp = {}) : params_(std::move(params)), hp_(hp) {
        hp_.validate();
        for (const auto& [name, p] : params_) {
            m_.emplace_back(p.shape(), 0.0);
            v_.emplace_back(p.shape(), 0.0);
        }
    }

    void step(double lr) {
        for (const auto& [name, p] : params_) {
            if (!p.has_grad()) throw std::logic_error("missing gradient for parameter " + name);
        }
        ++t_;
        const double c1 = 1.0 - std::pow(hp_.beta1, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(hp_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Tensor& p = params_[i].second;
            auto g = p.grad();
            auto m = m_[i].data();
            auto v = v_[i].data();
            auto x = p.data();
            for (std::size_t k = 0; k < x.size(); ++k) {
                m[k] = hp_.beta1 * m[k] + (1.0 - hp_.beta1) * g[k];
                v[k] = hp_.beta2 * v[k] + (1.0 - hp_.beta2) * g[k] * g[k];
                x[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + hp_.eps);
            }
        }
    }

    void zero_grad() {
        for (auto& [name, p] : params_) p.clear_grad();
    }

    std::size_t steps() const { return t_; }
    const NamedTensors& parameters() const { return params_; }
    std::vector<Tensor>& first_moments() { return m_; }
    std::vector<Tensor>& second_moments() { return v_; }
    void set_steps(std::size_t t) { t_ = t; }

private:
    NamedTensors params_;
    AdamParams hp_;
    std::vector<Tensor> m_;
    std::vector<Tensor> v_;
    std::size_t t_ = 0;
};

}  // namespace rareid
