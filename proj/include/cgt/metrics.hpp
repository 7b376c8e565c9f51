#pragma once

// Evaluation metrics: accuracy, hard-clustering modularity and conductance,
// and the per-degree-bucket fairness report.

#include <cgt/graph.hpp>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <vector>

namespace cgt {

/// Argmax per row.
inline std::vector<int> row_argmax(const std::vector<double>& mat, std::size_t rows, std::size_t cols) {
    std::vector<int> out(rows, 0);
    for (std::size_t i = 0; i < rows; ++i) {
        const double* r = mat.data() + i * cols;
        int best = 0;
        for (std::size_t j = 1; j < cols; ++j)
            if (r[j] > r[best]) best = static_cast<int>(j);
        out[i] = best;
    }
    return out;
}

inline double accuracy(const std::vector<int>& preds, const std::vector<int>& labels,
                       const std::vector<int>& indices) {
    if (indices.empty()) return 0.0;
    std::size_t hit = 0;
    for (int i : indices)
        if (preds[i] == labels[i]) hit++;
    return static_cast<double>(hit) / static_cast<double>(indices.size());
}

/// Newman modularity of a hard assignment, in [-0.5, 1].
inline double modularity_metric(const Graph& g, const std::vector<int>& assign, std::size_t m_clusters) {
    const double two_m = 2.0 * static_cast<double>(g.num_edges());
    if (two_m == 0.0) throw std::invalid_argument("modularity_metric: graph has no edges");
    const std::vector<int> deg = degrees(g);
    std::vector<double> vol(m_clusters, 0.0);
    for (std::size_t i = 0; i < g.n; ++i) vol[assign[i]] += deg[i];
    double within = 0.0;
    for (auto [u, v] : g.edges)
        if (assign[u] == assign[v]) within += 2.0;  // both ordered directions
    double expected = 0.0;
    for (double v : vol) expected += v * v;
    return within / two_m - expected / (two_m * two_m);
}

/// Average over non-empty clusters of cut(S)/min(vol(S), vol(V\S)); 0/0 := 0.
inline double conductance_metric(const Graph& g, const std::vector<int>& assign, std::size_t m_clusters) {
    const std::vector<int> deg = degrees(g);
    std::vector<double> vol(m_clusters, 0.0), cut(m_clusters, 0.0);
    std::vector<std::size_t> size(m_clusters, 0);
    double total_vol = 0.0;
    for (std::size_t i = 0; i < g.n; ++i) {
        vol[assign[i]] += deg[i];
        size[assign[i]]++;
        total_vol += deg[i];
    }
    for (auto [u, v] : g.edges)
        if (assign[u] != assign[v]) {
            cut[assign[u]] += 1.0;
            cut[assign[v]] += 1.0;
        }
    double acc = 0.0;
    std::size_t nonempty = 0;
    for (std::size_t c = 0; c < m_clusters; ++c) {
        if (size[c] == 0) continue;
        nonempty++;
        const double denom = std::min(vol[c], total_vol - vol[c]);
        if (cut[c] > 0.0 && denom > 0.0)
            acc += cut[c] / denom;
        // cut == 0 contributes 0 even when the denominator vanishes
    }
    return nonempty == 0 ? 0.0 : acc / static_cast<double>(nonempty);
}

struct FairnessRow {
    int threshold = 0;       // bucket is degree <= threshold
    std::size_t count = 0;   // test nodes in the bucket
    double error_pct = 0.0;
    double bias_pct = 0.0;   // error - overall error
};

struct FairnessReport {
    std::vector<FairnessRow> rows;
    double overall_error_pct = 0.0;
    std::vector<int> omitted_thresholds;  // empty buckets
};

inline FairnessReport fairness_report(const std::vector<int>& preds, const std::vector<int>& labels,
                                      const std::vector<int>& node_degrees,
                                      const std::vector<int>& test_indices,
                                      const std::vector<int>& thresholds = {2, 4, 6, 8, 10}) {
    if (test_indices.empty()) throw std::invalid_argument("fairness_report: empty test set");
    FairnessReport rep;
    std::size_t wrong = 0;
    for (int i : test_indices)
        if (preds[i] != labels[i]) wrong++;
    rep.overall_error_pct = 100.0 * static_cast<double>(wrong) / static_cast<double>(test_indices.size());
    for (int t : thresholds) {
        std::size_t count = 0, bucket_wrong = 0;
        for (int i : test_indices) {
            if (node_degrees[i] > t) continue;
            count++;
            if (preds[i] != labels[i]) bucket_wrong++;
        }
        if (count == 0) {
            rep.omitted_thresholds.push_back(t);
            continue;
        }
        FairnessRow row;
        row.threshold = t;
        row.count = count;
        row.error_pct = 100.0 * static_cast<double>(bucket_wrong) / static_cast<double>(count);
        row.bias_pct = row.error_pct - rep.overall_error_pct;
        rep.rows.push_back(row);
    }
    return rep;
}

}  // namespace cgt
