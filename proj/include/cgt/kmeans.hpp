#pragma once

// K-means partitioning used to define communities. k-means++ seeding, fixed
// RNG seed, nearest-centroid ties broken toward the lowest cluster index,
// empty clusters repaired by reseeding to the farthest point.

#include <cgt/graph.hpp>
#include <cgt/tensor.hpp>

#include <cmath>
#include <cstddef>
#include <limits>
#include <stdexcept>
#include <vector>

namespace cgt {

struct ClusterAssignment {
    std::size_t m = 0;
    std::size_t dim = 0;
    std::vector<int> assign;         // length n, values in [0, m)
    std::vector<double> centroids;   // m x dim
    double inertia = 0.0;            // sum of squared distances at termination
};

inline bool same_cluster(const ClusterAssignment& c, int i, int j) {
    return c.assign.at(i) == c.assign.at(j);
}

namespace detail {

inline double sq_dist(const double* a, const double* b, std::size_t d) {
    double s = 0.0;
    for (std::size_t t = 0; t < d; ++t) {
        const double diff = a[t] - b[t];
        s += diff * diff;
    }
    return s;
}

}  // namespace detail

inline ClusterAssignment kmeans(const std::vector<double>& points, std::size_t n, std::size_t d,
                                std::size_t m, std::uint64_t seed, int max_iter = 100,
                                double tol = 1e-6) {
    if (m < 1 || m > n)
        throw std::invalid_argument("kmeans: M=" + std::to_string(m) + " outside [1, n=" +
                                    std::to_string(n) + "]");
    if (max_iter < 1) throw std::invalid_argument("kmeans: max_iter must be >= 1");
    if (points.size() != n * d) throw std::invalid_argument("kmeans: bad point matrix size");
    for (double v : points)
        if (!std::isfinite(v)) throw std::invalid_argument("kmeans: non-finite input point");

    Rng rng(seed);
    ClusterAssignment out;
    out.m = m;
    out.dim = d;
    out.assign.assign(n, 0);
    out.centroids.assign(m * d, 0.0);

    // k-means++ seeding
    std::vector<double> min_sq(n, std::numeric_limits<double>::max());
    {
        std::uniform_int_distribution<std::size_t> first(0, n - 1);
        std::size_t pick = first(rng);
        std::copy_n(points.data() + pick * d, d, out.centroids.data());
        for (std::size_t c = 1; c < m; ++c) {
            double total = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                const double ds = detail::sq_dist(points.data() + i * d,
                                                  out.centroids.data() + (c - 1) * d, d);
                min_sq[i] = std::min(min_sq[i], ds);
                total += min_sq[i];
            }
            if (total <= 0.0) {
                // all remaining points coincide with chosen centroids
                pick = first(rng);
            } else {
                double r = uniform01(rng) * total;
                pick = n - 1;
                for (std::size_t i = 0; i < n; ++i) {
                    r -= min_sq[i];
                    if (r <= 0.0) {
                        pick = i;
                        break;
                    }
                }
            }
            std::copy_n(points.data() + pick * d, d, out.centroids.data() + c * d);
        }
    }

    std::vector<double> sums(m * d);
    std::vector<std::size_t> counts(m);
    for (int iter = 0; iter < max_iter; ++iter) {
        // assignment step
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::max();
            int best_c = 0;
            for (std::size_t c = 0; c < m; ++c) {
                const double ds = detail::sq_dist(points.data() + i * d, out.centroids.data() + c * d, d);
                if (ds < best) {
                    best = ds;
                    best_c = static_cast<int>(c);
                }
            }
            out.assign[i] = best_c;
            inertia += best;
        }
        out.inertia = inertia;

        // update step
        std::fill(sums.begin(), sums.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (std::size_t i = 0; i < n; ++i) {
            const int c = out.assign[i];
            counts[c]++;
            for (std::size_t t = 0; t < d; ++t) sums[c * d + t] += points[i * d + t];
        }
        double shift = 0.0;
        for (std::size_t c = 0; c < m; ++c) {
            if (counts[c] == 0) {
                // reseed to the point farthest from its assigned centroid
                double far_d = -1.0;
                std::size_t far_i = 0;
                for (std::size_t i = 0; i < n; ++i) {
                    const double ds = detail::sq_dist(points.data() + i * d,
                                                      out.centroids.data() + out.assign[i] * d, d);
                    if (ds > far_d) {
                        far_d = ds;
                        far_i = i;
                    }
                }
                shift = std::numeric_limits<double>::max();  // force another iteration
                std::copy_n(points.data() + far_i * d, d, out.centroids.data() + c * d);
                continue;
            }
            double cs = 0.0;
            for (std::size_t t = 0; t < d; ++t) {
                const double nc = sums[c * d + t] / static_cast<double>(counts[c]);
                const double diff = nc - out.centroids[c * d + t];
                cs += diff * diff;
                out.centroids[c * d + t] = nc;
            }
            shift = std::max(shift, std::sqrt(cs));
        }
        if (shift < tol) break;
    }

    // final assignment, then snap centroids to exact member means
    for (std::size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::max();
        int best_c = 0;
        for (std::size_t c = 0; c < m; ++c) {
            const double ds = detail::sq_dist(points.data() + i * d, out.centroids.data() + c * d, d);
            if (ds < best) {
                best = ds;
                best_c = static_cast<int>(c);
            }
        }
        out.assign[i] = best_c;
    }
    std::fill(sums.begin(), sums.end(), 0.0);
    std::fill(counts.begin(), counts.end(), 0);
    for (std::size_t i = 0; i < n; ++i) {
        const int c = out.assign[i];
        counts[c]++;
        for (std::size_t t = 0; t < d; ++t) sums[c * d + t] += points[i * d + t];
    }
    for (std::size_t c = 0; c < m; ++c)
        if (counts[c] > 0)
            for (std::size_t t = 0; t < d; ++t)
                out.centroids[c * d + t] = sums[c * d + t] / static_cast<double>(counts[c]);
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i)
        inertia += detail::sq_dist(points.data() + i * d, out.centroids.data() + out.assign[i] * d, d);
    out.inertia = inertia;
    return out;
}

/// Default community count: number of label classes when labels exist,
/// ceil(sqrt(n)) otherwise.
inline std::size_t default_community_count(const Graph& g) {
    if (g.labels && g.num_classes() > 0) return g.num_classes();
    return static_cast<std::size_t>(std::ceil(std::sqrt(static_cast<double>(g.n))));
}

}  // namespace cgt
