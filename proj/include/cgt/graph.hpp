#pragma once

// Undirected graph data model plus the random-walk machinery derived from it:
// degrees, row-stochastic transition matrices and their powers, k-hop
// neighborhoods, and log-scale transition targets.

#include <cgt/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <optional>
#include <queue>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace cgt {

struct Graph {
    std::size_t n = 0;
    std::vector<std::pair<int, int>> edges;  // canonical u < v, sorted, unique
    std::vector<std::vector<int>> adj;       // sorted neighbor lists
    std::vector<double> features;            // n x feature_dim, row-major
    std::size_t feature_dim = 0;
    std::optional<std::vector<int>> labels;

    Graph() = default;
    Graph(std::size_t n_, std::vector<std::pair<int, int>> edge_list,
          std::vector<double> x = {}, std::size_t d0 = 0,
          std::optional<std::vector<int>> y = std::nullopt)
        : n(n_), features(std::move(x)), feature_dim(d0), labels(std::move(y)) {
        for (auto& [u, v] : edge_list) {
            if (u == v) throw std::invalid_argument("graph: self-loop at node " + std::to_string(u));
            if (u < 0 || v < 0 || static_cast<std::size_t>(u) >= n || static_cast<std::size_t>(v) >= n)
                throw std::invalid_argument("graph: edge endpoint out of range: (" + std::to_string(u) +
                                            "," + std::to_string(v) + ") with n=" + std::to_string(n));
            if (u > v) std::swap(u, v);
        }
        std::sort(edge_list.begin(), edge_list.end());
        for (std::size_t i = 1; i < edge_list.size(); ++i)
            if (edge_list[i] == edge_list[i - 1])
                throw std::invalid_argument("graph: duplicate edge (" + std::to_string(edge_list[i].first) +
                                            "," + std::to_string(edge_list[i].second) + ")");
        edges = std::move(edge_list);
        adj.assign(n, {});
        for (auto [u, v] : edges) {
            adj[u].push_back(v);
            adj[v].push_back(u);
        }
        for (auto& nb : adj) std::sort(nb.begin(), nb.end());
        if (feature_dim != 0 && features.size() != n * feature_dim)
            throw std::invalid_argument("graph: feature matrix size " + std::to_string(features.size()) +
                                        " != n*d0 = " + std::to_string(n * feature_dim));
        if (labels) {
            if (labels->size() != n)
                throw std::invalid_argument("graph: " + std::to_string(labels->size()) + " labels for " +
                                            std::to_string(n) + " nodes");
            for (int c : *labels)
                if (c < 0) throw std::invalid_argument("graph: negative class label");
        }
    }

    std::size_t num_edges() const { return edges.size(); }
    std::size_t num_classes() const {
        if (!labels) return 0;
        int mx = -1;
        for (int c : *labels) mx = std::max(mx, c);
        return static_cast<std::size_t>(mx + 1);
    }
    bool has_edge(int u, int v) const {
        const auto& nb = adj[u];
        return std::binary_search(nb.begin(), nb.end(), v);
    }
};

inline std::vector<int> degrees(const Graph& g) {
    std::vector<int> d(g.n, 0);
    for (auto [u, v] : g.edges) {
        d[u]++;
        d[v]++;
    }
    return d;
}

/// Dense symmetric 0/1 adjacency, zero diagonal.
inline std::vector<double> adjacency_dense(const Graph& g) {
    std::vector<double> a(g.n * g.n, 0.0);
    for (auto [u, v] : g.edges) {
        a[static_cast<std::size_t>(u) * g.n + v] = 1.0;
        a[static_cast<std::size_t>(v) * g.n + u] = 1.0;
    }
    return a;
}

struct TransitionMatrix {
    std::size_t n = 0;
    int k = 1;                   // power applied relative to the one-step walk
    std::vector<double> values;  // n x n row-major

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

/// One-step random walk P = D^{-1} A. Rows of isolated nodes are all zero.
inline TransitionMatrix transition_matrix(const Graph& g) {
    TransitionMatrix p;
    p.n = g.n;
    p.k = 1;
    p.values.assign(g.n * g.n, 0.0);
    for (std::size_t u = 0; u < g.n; ++u) {
        const auto& nb = g.adj[u];
        if (nb.empty()) continue;
        const double w = 1.0 / static_cast<double>(nb.size());
        for (int v : nb) p.values[u * g.n + v] = w;
    }
    return p;
}

/// Matrix power P^k of the given transition matrix.
inline TransitionMatrix k_step(const TransitionMatrix& p, int k) {
    if (k < 1) throw std::invalid_argument("k_step: k must be >= 1, got " + std::to_string(k));
    TransitionMatrix out;
    out.n = p.n;
    out.k = p.k * k;
    out.values = p.values;
    std::vector<double> tmp(p.n * p.n);
    for (int step = 1; step < k; ++step) {
        gemm(out.values.data(), p.n, p.n, false, p.values.data(), p.n, p.n, false, tmp.data());
        out.values.swap(tmp);
    }
    return out;
}

/// Nodes within hop distance <= k of v (unweighted BFS).
inline std::vector<int> khop_set(const Graph& g, int v, int k, bool include_self) {
    if (v < 0 || static_cast<std::size_t>(v) >= g.n)
        throw std::invalid_argument("khop_set: node " + std::to_string(v) + " out of range");
    if (k < 1) throw std::invalid_argument("khop_set: k must be >= 1");
    std::vector<int> dist(g.n, -1);
    std::queue<int> q;
    dist[v] = 0;
    q.push(v);
    std::vector<int> out;
    while (!q.empty()) {
        const int u = q.front();
        q.pop();
        if (u != v || include_self) out.push_back(u);
        if (dist[u] == k) continue;
        for (int w : g.adj[u])
            if (dist[w] < 0) {
                dist[w] = dist[u] + 1;
                q.push(w);
            }
    }
    std::sort(out.begin(), out.end());
    return out;
}

struct LogTransitionSet {
    double eps = 1e-6;
    std::vector<std::vector<double>> mats;  // mats[p-1] = log(P^p + eps), n x n
    std::size_t n = 0;
};

inline LogTransitionSet log_transitions(const TransitionMatrix& p, int p_max, double eps = 1e-6) {
    if (p_max < 1) throw std::invalid_argument("log_transitions: p_max must be >= 1");
    if (!(eps > 0.0)) throw std::invalid_argument("log_transitions: eps must be positive");
    LogTransitionSet out;
    out.eps = eps;
    out.n = p.n;
    std::vector<double> cur = p.values;
    std::vector<double> tmp(p.n * p.n);
    for (int step = 1; step <= p_max; ++step) {
        std::vector<double> m(p.n * p.n);
        const std::size_t total = m.size();
#pragma omp parallel for schedule(static) if (total > 65536)
        for (std::size_t i = 0; i < total; ++i) m[i] = std::log(cur[i] + eps);
        out.mats.push_back(std::move(m));
        if (step < p_max) {
            gemm(cur.data(), p.n, p.n, false, p.values.data(), p.n, p.n, false, tmp.data());
            cur.swap(tmp);
        }
    }
    return out;
}

}  // namespace cgt
