#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <span>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/ops.hpp"
#include "rareid/tensor.hpp"

namespace rareid {

enum class PositiveWeighting { as_written, uniform };

/// Ranked list loss hyperparameters: negatives are pushed beyond `alpha`,
/// positives pulled within `alpha − margin`.
struct RllParams {
    double alpha = 1.2;
    double margin = 0.4;
    double temperature = 10.0;
    double lambda_balance = 1.0;
    PositiveWeighting positive_weighting = PositiveWeighting::as_written;

    void validate() const {
        if (!(margin > 0.0)) throw std::invalid_argument("rll.margin must be positive");
        if (!(alpha > margin)) throw std::invalid_argument("rll.alpha must exceed rll.margin");
        if (!(temperature >= 0.0)) throw std::invalid_argument("rll.temperature must be nonnegative");
    }
};

struct LossWeights {
    double lambda1 = 0.4;   // L_RLL
    double lambda2 = 0.1;   // L_ID1, reverse-attention branch
    double lambda3 = 1.0;   // L_ID2, global branch
    double lambda4 = 0.03;  // L_ID3, stage-2 deep supervision
    double lambda5 = 0.03;  // L_ID4, stage-3 deep supervision

    void validate() const {
        for (double w : {lambda1, lambda2, lambda3, lambda4, lambda5}) {
            if (!(w >= 0.0)) throw std::invalid_argument("loss weights must be nonnegative");
        }
    }
};

struct SmoothingParams {
    double epsilon = 0.1;
    std::size_t num_classes = 1;

    void validate() const {
        if (!(epsilon >= 0.0 && epsilon < 1.0)) throw std::invalid_argument("smoothing.epsilon must lie in [0, 1)");
        if (num_classes == 0) throw std::invalid_argument("smoothing needs at least one class");
    }
};

// ---------------------------------------------------------------------------
// Pairwise distances

/// d[i,j] = ‖e_i − e_j‖₂ for B×D embeddings. The gradient at coincident
/// points (d = 0) is taken as zero.
inline Tensor pairwise_distances(Tape& tape, const Tensor& embeddings) {
    if (embeddings.rank() != 2) throw ShapeError("embeddings must be B×D, got " + to_string(embeddings.shape()));
    const std::size_t b = embeddings.dim(0);
    const std::size_t d = embeddings.dim(1);
    if (b < 2) throw ShapeError("pairwise distances need at least two embeddings");
    const bool track = tape.tracks({&embeddings});
    Tensor out = detail::make_output(Shape{b, b}, track);
    auto es = embeddings.data();
    auto os = out.data();
    for (std::size_t i = 0; i < b; ++i) {
        for (std::size_t j = i + 1; j < b; ++j) {
            double ss = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = es[i * d + k] - es[j * d + k];
                ss += diff * diff;
            }
            os[i * b + j] = os[j * b + i] = std::sqrt(ss);
        }
    }
    if (track) {
        tape.record("pairwise_distances", [embeddings = embeddings, out, b, d]() mutable {
            auto g = out.grad();
            auto es = embeddings.data();
            auto ds = out.data();
            auto ge = embeddings.grad();
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < b; ++j) {
                    if (i == j || ds[i * b + j] <= 0.0) continue;
                    const double coef = g[i * b + j] / ds[i * b + j];
                    if (coef == 0.0) continue;
                    for (std::size_t k = 0; k < d; ++k) {
                        const double diff = es[i * d + k] - es[j * d + k];
                        ge[i * d + k] += coef * diff;
                        ge[j * d + k] -= coef * diff;
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Ranked list loss pieces

/// Hinge of one pair: [α − d]_+ for negatives, [d − (α − m)]_+ for positives.
inline double pairwise_margin_loss(double distance, bool same_identity, const RllParams& p) {
    if (same_identity) return std::max(0.0, distance - (p.alpha - p.margin));
    return std::max(0.0, p.alpha - distance);
}

inline double pair_weight(double distance, const RllParams& p) { return std::exp(p.temperature * (p.alpha - distance)); }

struct NontrivialSets {
    std::vector<std::size_t> positives;
    std::vector<std::size_t> negatives;
};

/// Positives j ≠ i with d > α − m; negatives with d < α.
inline NontrivialSets mine_nontrivial(std::size_t query, std::span<const int> labels, const Tensor& distances,
                                      const RllParams& p) {
    const std::size_t b = labels.size();
    if (query >= b) throw std::out_of_range("query index out of range");
    if (distances.rank() != 2 || distances.dim(0) != b || distances.dim(1) != b) {
        throw ShapeError("distance matrix " + to_string(distances.shape()) + " does not match " + std::to_string(b) +
                         " labels");
    }
    NontrivialSets sets;
    for (std::size_t j = 0; j < b; ++j) {
        if (j == query) continue;
        const double dij = distances[query * b + j];
        if (labels[j] == labels[query]) {
            if (dij > p.alpha - p.margin) sets.positives.push_back(j);
        } else if (dij < p.alpha) {
            sets.negatives.push_back(j);
        }
    }
    return sets;
}

inline void check_pk_batch(std::span<const int> labels) {
    std::map<int, std::size_t> counts;
    for (int l : labels) ++counts[l];
    for (const auto& [label, count] : counts) {
        if (count < 2) {
            throw std::invalid_argument("degenerate batch: identity " + std::to_string(label) + " has a single sample");
        }
    }
}

namespace detail {

// Weighted mean of hinge values over one nontrivial set, and its derivative
// with respect to each member distance. Weights are shifted by their max
// exponent before exponentiation; the normalized weights are unchanged.
struct SetTerm {
    double value = 0.0;
    std::vector<double> d_value;
};

inline SetTerm weighted_set_term(std::span<const double> dist, bool positive, bool weighted, const RllParams& p) {
    SetTerm term;
    const std::size_t k = dist.size();
    term.d_value.assign(k, 0.0);
    if (k == 0) return term;
    std::vector<double> w(k, 1.0), loss(k), dloss(k);
    double max_exp = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < k; ++j) max_exp = std::max(max_exp, p.temperature * (p.alpha - dist[j]));
    double wsum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        if (weighted) w[j] = std::exp(p.temperature * (p.alpha - dist[j]) - max_exp);
        wsum += w[j];
        loss[j] = pairwise_margin_loss(dist[j], positive, p);
        dloss[j] = positive ? (loss[j] > 0.0 ? 1.0 : 0.0) : (loss[j] > 0.0 ? -1.0 : 0.0);
    }
    double acc = 0.0;
    for (std::size_t j = 0; j < k; ++j) acc += w[j] * loss[j];
    term.value = acc / wsum;
    const double dw_scale = weighted ? -p.temperature : 0.0;
    for (std::size_t j = 0; j < k; ++j) {
        const double dw = dw_scale * w[j];
        term.d_value[j] = (dw * (loss[j] - term.value) + w[j] * dloss[j]) / wsum;
    }
    return term;
}

}  // namespace detail

/**
 * Ranked list loss over a batch: per query, the weight-normalized hinge over
 * its nontrivial positives plus λ times the same over its nontrivial
 * negatives, averaged over all queries. A query with both sets empty adds 0.
 */
inline Tensor rll_loss(Tape& tape, const Tensor& embeddings, std::span<const int> labels, const RllParams& p) {
    if (embeddings.rank() != 2 || embeddings.dim(0) != labels.size()) {
        throw ShapeError("embeddings " + to_string(embeddings.shape()) + " do not match " +
                         std::to_string(labels.size()) + " labels");
    }
    check_pk_batch(labels);
    const std::size_t b = labels.size();
    Tensor dist = pairwise_distances(tape, embeddings);
    const bool track = tape.tracks({&dist});
    Tensor out = detail::make_output(Shape{1}, track);
    std::vector<double> ddist(b * b, 0.0);
    const double inv_b = 1.0 / static_cast<double>(b);
    const bool weight_positives = p.positive_weighting == PositiveWeighting::as_written;
    double total = 0.0;
    for (std::size_t i = 0; i < b; ++i) {
        const NontrivialSets sets = mine_nontrivial(i, labels, dist, p);
        auto gather = [&](const std::vector<std::size_t>& idx) {
            std::vector<double> v(idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) v[k] = dist[i * b + idx[k]];
            return v;
        };
        const auto pos = detail::weighted_set_term(gather(sets.positives), true, weight_positives, p);
        const auto neg = detail::weighted_set_term(gather(sets.negatives), false, true, p);
        total += pos.value + p.lambda_balance * neg.value;
        for (std::size_t k = 0; k < sets.positives.size(); ++k) ddist[i * b + sets.positives[k]] += pos.d_value[k] * inv_b;
        for (std::size_t k = 0; k < sets.negatives.size(); ++k) {
            ddist[i * b + sets.negatives[k]] += p.lambda_balance * neg.d_value[k] * inv_b;
        }
    }
    out[0] = total * inv_b;
    if (track) {
        tape.record("rll_loss", [dist, out, ddist]() mutable {
            const double g = out.grad()[0];
            auto gd = dist.grad();
            for (std::size_t k = 0; k < gd.size(); ++k) gd[k] += g * ddist[k];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Label smoothing and classification loss

/// q_y = 1 − (N−1)ε/N, q_i = ε/N otherwise.
inline std::vector<double> smooth_labels(std::size_t y, const SmoothingParams& sp) {
    sp.validate();
    if (y >= sp.num_classes) {
        throw std::out_of_range("class index " + std::to_string(y) + " out of range for " +
                                std::to_string(sp.num_classes) + " classes");
    }
    const double n = static_cast<double>(sp.num_classes);
    std::vector<double> q(sp.num_classes, sp.epsilon / n);
    q[y] = 1.0 - (n - 1.0) * sp.epsilon / n;
    return q;
}

/// Mean over the batch of Σ_i −q_i·log softmax(logits)_i.
inline Tensor smoothed_ce_loss(Tape& tape, const Tensor& logits, std::span<const int> labels, double epsilon) {
    if (logits.rank() != 2 || logits.dim(0) != labels.size()) {
        throw ShapeError("logits " + to_string(logits.shape()) + " do not match " + std::to_string(labels.size()) +
                         " labels");
    }
    const std::size_t b = logits.dim(0);
    const std::size_t n = logits.dim(1);
    const SmoothingParams sp{epsilon, n};
    const bool track = tape.tracks({&logits});
    Tensor out = detail::make_output(Shape{1}, track);
    std::vector<double> dlogits(b * n);
    auto ls = logits.data();
    const double inv_b = 1.0 / static_cast<double>(b);
    double total = 0.0;
    for (std::size_t r = 0; r < b; ++r) {
        if (labels[r] < 0) throw std::out_of_range("negative class label");
        const auto q = smooth_labels(static_cast<std::size_t>(labels[r]), sp);
        const double* row = ls.data() + r * n;
        const double mx = *std::max_element(row, row + n);
        double z = 0.0;
        for (std::size_t c = 0; c < n; ++c) z += std::exp(row[c] - mx);
        const double log_z = std::log(z);
        for (std::size_t c = 0; c < n; ++c) {
            const double log_p = row[c] - mx - log_z;
            total -= q[c] * log_p;
            dlogits[r * n + c] = (std::exp(log_p) - q[c]) * inv_b;
        }
    }
    out[0] = total * inv_b;
    if (track) {
        tape.record("smoothed_ce_loss", [logits = logits, out, dlogits]() mutable {
            const double g = out.grad()[0];
            auto gl = logits.grad();
            for (std::size_t k = 0; k < gl.size(); ++k) gl[k] += g * dlogits[k];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Composite objective

/// The five loss terms; ablated branches leave their term empty.
struct LossTerms {
    Tensor l_rll;
    Tensor l_id1;
    Tensor l_id2;
    Tensor l_id3;
    Tensor l_id4;
};

/// λ₁L_RLL + λ₂L_ID1 + λ₃L_ID2 + λ₄L_ID3 + λ₅L_ID4 over the present terms.
inline Tensor total_loss(Tape& tape, const LossTerms& terms, const LossWeights& w) {
    std::vector<Tensor> present;
    std::vector<double> weights;
    auto push = [&](const Tensor& t, double lambda) {
        if (t.defined()) {
            present.push_back(t);
            weights.push_back(lambda);
        }
    };
    push(terms.l_rll, w.lambda1);
    push(terms.l_id1, w.lambda2);
    push(terms.l_id2, w.lambda3);
    push(terms.l_id3, w.lambda4);
    push(terms.l_id4, w.lambda5);
    return weighted_sum(tape, present, weights);
}

/// Scalar form; absent terms are passed as std::nullopt.
inline double total_loss(double l_rll, std::optional<double> l_id1, double l_id2, std::optional<double> l_id3,
                         std::optional<double> l_id4, const LossWeights& w) {
    double acc = w.lambda1 * l_rll;
    if (l_id1) acc += w.lambda2 * *l_id1;
    acc += w.lambda3 * l_id2;
    if (l_id3) acc += w.lambda4 * *l_id3;
    if (l_id4) acc += w.lambda5 * *l_id4;
    return acc;
}

}  // namespace rareid
