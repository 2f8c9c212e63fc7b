#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "rareid/tensor.hpp"

namespace rareid {

struct RetrievalMeta {
    std::vector<int> ids;
    std::vector<int> cameras;

    std::size_t size() const { return ids.size(); }
};

struct EvalReport {
    double map = 0.0;
    std::vector<double> cmc;                         // cmc[k-1] = rank-k accuracy
    std::vector<std::optional<double>> per_query_ap;  // empty for excluded queries
    std::vector<std::size_t> excluded_queries;

    double rank(std::size_t k) const {
        if (cmc.empty() || k == 0) return 0.0;
        return cmc[std::min(k, cmc.size()) - 1];
    }
};

/// Euclidean distances between the rows of two N×D / M×D matrices, row-major N×M.
inline std::vector<double> euclidean_distances(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1)) {
        throw ShapeError("distance inputs must be N×D and M×D, got " + to_string(a.shape()) + " and " +
                         to_string(b.shape()));
    }
    const std::size_t n = a.dim(0), m = b.dim(0), d = a.dim(1);
    std::vector<double> out(n * m);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < d; ++k) {
                const double diff = a[i * d + k] - b[j * d + k];
                s += diff * diff;
            }
            out[i * m + j] = std::sqrt(s);
        }
    return out;
}

/**
 * Single-query mAP and CMC from a row-major query×gallery distance matrix.
 * Gallery items sharing both identity and camera with the query are
 * dropped from its ranking; ties are ordered by gallery index. Queries with
 * no remaining positive are left out of the averages and listed in
 * excluded_queries.
 */
inline EvalReport evaluate_distances(const std::vector<double>& dist, const RetrievalMeta& query,
                                     const RetrievalMeta& gallery) {
    const std::size_t nq = query.size(), ng = gallery.size();
    if (query.cameras.size() != nq || gallery.cameras.size() != ng) {
        throw std::invalid_argument("identity and camera label counts differ");
    }
    if (dist.size() != nq * ng) throw ShapeError("distance matrix does not match query and gallery sizes");
    if (ng == 0) throw std::invalid_argument("empty gallery");

    EvalReport report;
    report.cmc.assign(ng, 0.0);
    report.per_query_ap.resize(nq);
    std::size_t valid = 0;
    double ap_sum = 0.0;
    std::vector<std::size_t> order;
    for (std::size_t q = 0; q < nq; ++q) {
        order.clear();
        for (std::size_t g = 0; g < ng; ++g) {
            if (gallery.ids[g] == query.ids[q] && gallery.cameras[g] == query.cameras[q]) continue;
            order.push_back(g);
        }
        if (order.empty()) {
            throw std::invalid_argument("query " + std::to_string(q) + " has an empty gallery after camera exclusion");
        }
        const double* row = dist.data() + q * ng;
        std::stable_sort(order.begin(), order.end(), [row](std::size_t a, std::size_t b) { return row[a] < row[b]; });

        // Extended precision so short hand-checkable cases round to the exact fraction.
        std::size_t hits = 0;
        long double ap = 0.0L;
        std::size_t first_hit = 0;
        for (std::size_t r = 0; r < order.size(); ++r) {
            if (gallery.ids[order[r]] != query.ids[q]) continue;
            ++hits;
            ap += static_cast<long double>(hits) / static_cast<long double>(r + 1);
            if (hits == 1) first_hit = r + 1;
        }
        if (hits == 0) {
            report.excluded_queries.push_back(q);
            continue;
        }
        const double q_ap = static_cast<double>(ap / static_cast<long double>(hits));
        report.per_query_ap[q] = q_ap;
        ap_sum += q_ap;
        ++valid;
        for (std::size_t k = first_hit; k <= ng; ++k) report.cmc[k - 1] += 1.0;
    }
    if (valid > 0) {
        report.map = ap_sum / static_cast<double>(valid);
        for (double& c : report.cmc) c /= static_cast<double>(valid);
    }
    return report;
}

inline EvalReport evaluate(const Tensor& query_embeddings, const RetrievalMeta& query, const Tensor& gallery_embeddings,
                           const RetrievalMeta& gallery) {
    if (query_embeddings.rank() != 2 || query_embeddings.dim(0) != query.size()) {
        throw ShapeError("query embeddings " + to_string(query_embeddings.shape()) + " do not match " +
                         std::to_string(query.size()) + " query labels");
    }
    if (gallery_embeddings.rank() != 2 || gallery_embeddings.dim(0) != gallery.size()) {
        throw ShapeError("gallery embeddings " + to_string(gallery_embeddings.shape()) + " do not match " +
                         std::to_string(gallery.size()) + " gallery labels");
    }
    return evaluate_distances(euclidean_distances(query_embeddings, gallery_embeddings), query, gallery);
}

}  // namespace rareid
