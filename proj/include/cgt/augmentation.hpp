#pragma once

// Learnable edge perturbation: community/k-hop context sets, the inverse-degree
// bias matrix, the blended probability matrix, and differentiable edge sampling
// through a binary Gumbel-Softmax relaxation with straight-through hard samples.

#include <cgt/graph.hpp>
#include <cgt/kmeans.hpp>
#include <cgt/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <stdexcept>
#include <utility>
#include <vector>

namespace cgt {

/// Context nodes of v: same cluster, within k hops, excluding v itself.
inline std::vector<int> context_nodes(const Graph& g, const ClusterAssignment& c, int v, int k) {
    std::vector<int> out;
    for (int u : khop_set(g, v, k, /*include_self=*/false))
        if (same_cluster(c, v, u)) out.push_back(u);
    return out;
}

inline std::vector<std::vector<int>> context_sets(const Graph& g, const ClusterAssignment& c, int k) {
    std::vector<std::vector<int>> out(g.n);
    for (std::size_t v = 0; v < g.n; ++v) out[v] = context_nodes(g, c, static_cast<int>(v), k);
    return out;
}

/// Dense n x n degree-bias matrix: 1/sqrt(d_i d_j) over mutual context pairs,
/// zero elsewhere (and on the diagonal).
inline std::vector<double> degree_bias_matrix(const Graph& g, const std::vector<std::vector<int>>& ctx) {
    const std::size_t n = g.n;
    const std::vector<int> deg = degrees(g);
    std::vector<std::vector<char>> member(n, std::vector<char>(n, 0));
    for (std::size_t v = 0; v < n; ++v)
        for (int u : ctx[v]) member[v][u] = 1;
    std::vector<double> d(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            if (!member[i][j] || !member[j][i]) continue;
            if (deg[i] == 0 || deg[j] == 0) continue;
            const double s = 1.0 / std::sqrt(static_cast<double>(deg[i]) * static_cast<double>(deg[j]));
            d[i * n + j] = s;
            d[j * n + i] = s;
        }
    return d;
}

struct BlendedMatrix {
    std::size_t n = 0;
    double xi = 0.0;
    double zeta = 0.0;
    std::vector<double> values;  // n x n, entries in [0,1], zero diagonal

    double at(std::size_t i, std::size_t j) const { return values[i * n + j]; }
};

inline BlendedMatrix blend(const std::vector<double>& a_dense, std::size_t n,
                           const std::vector<double>& d_bias, double xi, double zeta) {
    if (xi < 0.0 || zeta < 0.0)
        throw std::invalid_argument("blend: xi and zeta must be non-negative");
    if (a_dense.size() != n * n || d_bias.size() != n * n)
        throw std::invalid_argument("blend: matrix size mismatch");
    BlendedMatrix b;
    b.n = n;
    b.xi = xi;
    b.zeta = zeta;
    b.values.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            if (i == j) continue;
            const double v = xi * a_dense[i * n + j] + zeta * d_bias[i * n + j];
            b.values[i * n + j] = std::min(std::max(v, 0.0), 1.0);
        }
    return b;
}

/// Pair bookkeeping for one blended matrix. Pairs with probability strictly
/// inside (0,1) are sampled; probability-1 pairs are always present and
/// probability-0 pairs always absent. Mutual-context pairs carry a trainable
/// logit offset; original edges outside any context keep a fixed probability.
struct EdgeSampler {
    std::size_t n = 0;
    std::vector<std::pair<int, int>> pairs;       // sampled pairs, i < j
    std::vector<double> probs;                    // blended probability per pair
    std::vector<int> theta_index;                 // offset parameter slot, -1 if none
    std::size_t theta_count = 0;
    std::vector<std::pair<int, int>> fixed_present;  // probability exactly 1
};

inline EdgeSampler make_edge_sampler(const BlendedMatrix& b, const std::vector<double>& d_bias) {
    EdgeSampler s;
    s.n = b.n;
    for (std::size_t i = 0; i < b.n; ++i)
        for (std::size_t j = i + 1; j < b.n; ++j) {
            const double p = b.at(i, j);
            if (p <= 0.0) continue;
            if (p >= 1.0) {
                s.fixed_present.emplace_back(static_cast<int>(i), static_cast<int>(j));
                continue;
            }
            s.pairs.emplace_back(static_cast<int>(i), static_cast<int>(j));
            s.probs.push_back(p);
            if (d_bias[i * b.n + j] > 0.0)
                s.theta_index.push_back(static_cast<int>(s.theta_count++));
            else
                s.theta_index.push_back(-1);
        }
    return s;
}

/// Fresh Gumbel-difference noise, one value per sampled pair (g1 - g2).
inline std::vector<double> draw_pair_noise(const EdgeSampler& s, std::uint64_t seed) {
    Rng rng(seed);
    std::vector<double> noise(s.pairs.size());
    for (double& v : noise) {
        const double g1 = gumbel(rng);
        const double g2 = gumbel(rng);
        v = g1 - g2;
    }
    return noise;
}

/// Relaxed symmetric sample: soft_ij = sigmoid((logit(p) + theta + noise)/tau)
/// over sampled pairs, 1 on fixed-present pairs, 0 elsewhere. Differentiable in
/// both the per-pair probabilities and the logit offsets.
inline Tensor edge_soft_sample(const EdgeSampler& s, const Tensor& atilde_pairs, const Tensor& theta,
                               const std::vector<double>& noise, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("edge_soft_sample: tau must be positive");
    if (atilde_pairs.numel() != s.pairs.size())
        throw std::invalid_argument("edge_soft_sample: pair probability count mismatch");
    if (noise.size() != s.pairs.size())
        throw std::invalid_argument("edge_soft_sample: noise count mismatch");
    if (s.theta_count > 0 && (!theta.defined() || theta.numel() != s.theta_count))
        throw std::invalid_argument("edge_soft_sample: theta parameter count mismatch");
    const std::size_t n = s.n;
    std::vector<double> out(n * n, 0.0);
    for (auto [i, j] : s.fixed_present) {
        out[static_cast<std::size_t>(i) * n + j] = 1.0;
        out[static_cast<std::size_t>(j) * n + i] = 1.0;
    }
    const std::size_t np = s.pairs.size();
    for (std::size_t p = 0; p < np; ++p) {
        const double a = atilde_pairs.values()[p];
        double l = std::log(a / (1.0 - a)) + noise[p];
        if (s.theta_index[p] >= 0) l += theta.values()[s.theta_index[p]];
        const double v = stable_sigmoid(l / tau);
        const auto [i, j] = s.pairs[p];
        out[static_cast<std::size_t>(i) * n + j] = v;
        out[static_cast<std::size_t>(j) * n + i] = v;
    }
    std::vector<Tensor> inputs = {atilde_pairs};
    const bool has_theta = theta.defined();
    if (has_theta) inputs.push_back(theta);
    // copies for the closure; EdgeSampler may outlive or predecease the tape
    auto pairs = std::make_shared<std::vector<std::pair<int, int>>>(s.pairs);
    auto tidx = std::make_shared<std::vector<int>>(s.theta_index);
    return make_op({n, n}, std::move(out), std::move(inputs),
                   [pairs, tidx, n, tau, has_theta](TensorNode& o) {
                       auto pa = o.parents[0];
                       auto pt = has_theta ? o.parents[1] : nullptr;
                       if (pa->requires_grad) pa->ensure_grad();
                       if (pt && pt->requires_grad) pt->ensure_grad();
                       const std::size_t np = pairs->size();
                       for (std::size_t p = 0; p < np; ++p) {
                           const auto [i, j] = (*pairs)[p];
                           const double v = o.values[static_cast<std::size_t>(i) * n + j];
                           const double g = o.grad[static_cast<std::size_t>(i) * n + j] +
                                            o.grad[static_cast<std::size_t>(j) * n + i];
                           const double common = g * v * (1.0 - v) / tau;
                           if (pt && pt->requires_grad && (*tidx)[p] >= 0) pt->grad[(*tidx)[p]] += common;
                           if (pa->requires_grad) {
                               const double a = pa->values[p];
                               pa->grad[p] += common / (a * (1.0 - a));
                           }
                       }
                   });
}

struct AugmentedAdjacency {
    Tensor soft;  // n x n relaxed sample in [0,1]
    Tensor hard;  // n x n straight-through 0/1 sample
    double tau = 1.0;
    std::uint64_t seed = 0;
};

/// One full sample of the augmented adjacency. `theta` may be undefined when
/// the sampler has no trainable offsets. Deterministic mode skips the noise,
/// giving the maximum-likelihood edge set for evaluation.
inline AugmentedAdjacency sample_edges(const EdgeSampler& s, const Tensor& theta, double tau,
                                       std::uint64_t seed, bool deterministic = false) {
    AugmentedAdjacency out;
    out.tau = tau;
    out.seed = seed;
    Tensor probs = Tensor::from({s.pairs.size()}, s.probs, false);
    std::vector<double> noise = deterministic ? std::vector<double>(s.pairs.size(), 0.0)
                                              : draw_pair_noise(s, seed);
    out.soft = edge_soft_sample(s, probs, theta, noise, tau);
    out.hard = straight_through(out.soft);
    return out;
}

/// Convenience overload matching the plain (no trainable offset) contract.
inline AugmentedAdjacency sample_edges(const BlendedMatrix& b, double tau, std::uint64_t seed) {
    std::vector<double> no_bias(b.n * b.n, 0.0);
    EdgeSampler s = make_edge_sampler(b, no_bias);
    return sample_edges(s, Tensor(), tau, seed);
}

}  // namespace cgt
