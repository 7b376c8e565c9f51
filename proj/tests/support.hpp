#pragma once

// Shared test fixtures: small named graphs, random graph generators, an SBM
// with heavy-tailed degrees, and independent brute-force oracles.

#include <cgt/graph.hpp>
#include <cgt/tensor.hpp>

#include <algorithm>
#include <cmath>
#include <map>
#include <queue>
#include <set>
#include <vector>

namespace cgt::testing {

inline Graph path3() { return Graph(3, {{0, 1}, {1, 2}}); }
inline Graph triangle() { return Graph(3, {{0, 1}, {1, 2}, {0, 2}}); }
inline Graph cycle4() { return Graph(4, {{0, 1}, {1, 2}, {2, 3}, {0, 3}}); }

/// Two disconnected triangles {0,1,2} and {3,4,5} with component-indicator
/// features and component labels.
inline Graph two_triangles(double feature_noise = 0.0, std::uint64_t seed = 0) {
    Rng rng(seed);
    std::vector<double> x;
    std::vector<int> labels;
    for (int i = 0; i < 6; ++i) {
        const int comp = i / 3;
        x.push_back(comp == 0 ? 1.0 : 0.0);
        x.push_back(comp == 1 ? 1.0 : 0.0);
        x.push_back(feature_noise > 0.0 ? feature_noise * uniform01(rng) : 0.0);
        labels.push_back(comp);
    }
    return Graph(6, {{0, 1}, {1, 2}, {0, 2}, {3, 4}, {4, 5}, {3, 5}}, x, 3, labels);
}

inline Graph erdos_renyi(std::size_t n, double p, Rng& rng) {
    std::vector<std::pair<int, int>> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (uniform01(rng) < p) edges.emplace_back(static_cast<int>(i), static_cast<int>(j));
    return Graph(n, std::move(edges));
}

/// Degree-corrected SBM with power-law-ish expected degrees, block-indicator
/// features plus noise, and block labels.
inline Graph sbm_powerlaw(std::size_t n, std::size_t blocks, double p_in, double p_out,
                          std::size_t d0, std::uint64_t seed, double feature_noise = 0.3) {
    Rng rng(seed);
    std::vector<int> block(n);
    for (std::size_t i = 0; i < n; ++i) block[i] = static_cast<int>(i % blocks);
    std::vector<double> w(n);
    for (auto& v : w) v = std::pow(uniform01(rng), -0.5);  // heavy tail
    double wmax = 0.0;
    for (double v : w) wmax = std::max(wmax, v);
    std::vector<std::pair<int, int>> edges;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double base = block[i] == block[j] ? p_in : p_out;
            const double prob = std::min(1.0, base * w[i] * w[j] / wmax);
            if (uniform01(rng) < prob) edges.emplace_back(static_cast<int>(i), static_cast<int>(j));
        }
    std::vector<double> x(n * d0);
    std::vector<int> labels(n);
    for (std::size_t i = 0; i < n; ++i) {
        labels[i] = block[i];
        for (std::size_t t = 0; t < d0; ++t)
            x[i * d0 + t] = (t % blocks == static_cast<std::size_t>(block[i]) ? 1.0 : 0.0) +
                            feature_noise * uniform01(rng);
    }
    return Graph(n, std::move(edges), std::move(x), d0, std::move(labels));
}

/// BFS oracle: nodes within hop distance <= k, straight textbook queue.
inline std::set<int> bfs_oracle(const Graph& g, int src, int k, bool include_self) {
    std::set<int> out;
    std::map<int, int> dist;
    std::queue<int> q;
    dist[src] = 0;
    q.push(src);
    while (!q.empty()) {
        int u = q.front();
        q.pop();
        if (u != src || include_self) out.insert(u);
        if (dist[u] >= k) continue;
        for (int v : g.adj[u])
            if (!dist.count(v) && v != src) {
                dist[v] = dist[u] + 1;
                q.push(v);
            }
    }
    return out;
}

/// Walk-enumeration oracle for transition powers: sums probability products
/// over every length-k walk, recursively, never multiplying matrices.
inline double walk_prob_oracle(const Graph& g, int from, int to, int k) {
    if (k == 0) return from == to ? 1.0 : 0.0;
    const auto& nb = g.adj[from];
    if (nb.empty()) return 0.0;
    double acc = 0.0;
    for (int u : nb) acc += walk_prob_oracle(g, u, to, k - 1);
    return acc / static_cast<double>(nb.size());
}

}  // namespace cgt::testing
