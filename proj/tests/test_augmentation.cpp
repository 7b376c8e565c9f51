#include <cgt/augmentation.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace cgt;
using namespace cgt::testing;

namespace {

ClusterAssignment manual_clusters(std::vector<int> assign, std::size_t m) {
    ClusterAssignment c;
    c.m = m;
    c.assign = std::move(assign);
    return c;
}

}  // namespace

TEST_CASE("context nodes on the path", "[augmentation]") {
    Graph p = path3();
    ClusterAssignment same = manual_clusters({0, 0, 0}, 1);
    REQUIRE(context_nodes(p, same, 0, 2) == std::vector<int>({1, 2}));
    ClusterAssignment split = manual_clusters({0, 1, 0}, 2);  // b elsewhere
    REQUIRE(context_nodes(p, split, 0, 2) == std::vector<int>({2}));
    Graph iso(4, {{0, 1}});
    ClusterAssignment one = manual_clusters({0, 0, 0, 0}, 1);
    REQUIRE(context_nodes(iso, one, 3, 3).empty());
}

TEST_CASE("degree-bias scores are exact inverse-sqrt products", "[augmentation]") {
    // two nodes of degree 1
    Graph pair(2, {{0, 1}});
    ClusterAssignment c2 = manual_clusters({0, 0}, 1);
    auto d2 = degree_bias_matrix(pair, context_sets(pair, c2, 1));
    REQUIRE(d2[0 * 2 + 1] == Catch::Approx(1.0));

    // star: center degree 4, leaves degree 1
    Graph star(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}});
    ClusterAssignment c5 = manual_clusters({0, 0, 0, 0, 0}, 1);
    auto d5 = degree_bias_matrix(star, context_sets(star, c5, 1));
    REQUIRE(d5[0 * 5 + 1] == Catch::Approx(0.5));

    // degrees 2 and 8
    std::vector<std::pair<int, int>> edges = {{0, 1}, {0, 2}};
    for (int leaf = 3; leaf <= 9; ++leaf) edges.emplace_back(1, leaf);
    Graph deg28(10, edges);  // deg(0)=2, deg(1)=8
    REQUIRE(degrees(deg28)[0] == 2);
    REQUIRE(degrees(deg28)[1] == 8);
    ClusterAssignment c10 = manual_clusters(std::vector<int>(10, 0), 1);
    auto d10 = degree_bias_matrix(deg28, context_sets(deg28, c10, 1));
    REQUIRE(d10[0 * 10 + 1] == Catch::Approx(0.25));
}

TEST_CASE("degree-bias matrix is symmetric and masked to mutual context", "[augmentation]") {
    Rng rng(13);
    for (int trial = 0; trial < 5; ++trial) {
        Graph g = erdos_renyi(50, 0.06, rng);
        std::vector<int> assign(50);
        for (auto& a : assign) a = static_cast<int>(uniform01(rng) * 4) % 4;
        ClusterAssignment c = manual_clusters(assign, 4);
        auto ctx = context_sets(g, c, 2);
        auto d = degree_bias_matrix(g, ctx);
        const std::vector<int> deg = degrees(g);
        std::vector<std::set<int>> ctx_set(50);
        for (int v = 0; v < 50; ++v) ctx_set[v] = std::set<int>(ctx[v].begin(), ctx[v].end());
        for (int i = 0; i < 50; ++i) {
            REQUIRE(d[i * 50 + i] == 0.0);
            for (int j = 0; j < 50; ++j) {
                REQUIRE(d[i * 50 + j] == d[j * 50 + i]);
                const bool mutual = ctx_set[i].count(j) && ctx_set[j].count(i);
                if (mutual && deg[i] > 0 && deg[j] > 0) {
                    REQUIRE(d[i * 50 + j] ==
                            Catch::Approx(1.0 / std::sqrt(double(deg[i]) * double(deg[j]))));
                    REQUIRE(d[i * 50 + j] > 0.0);
                    REQUIRE(d[i * 50 + j] <= 1.0);
                } else {
                    REQUIRE(d[i * 50 + j] == 0.0);
                }
            }
        }
    }
}

TEST_CASE("lower degrees earn strictly higher bias", "[augmentation]") {
    // deg pairs (1,1), (1,4), (4,4) inside one component/cluster
    const double d11 = 1.0, d14 = 0.5, d44 = 0.25;
    REQUIRE(d11 > d14);
    REQUIRE(d14 > d44);
    // realized on an actual graph: center-leaf vs leaf-leaf on a star with a source pair
    Graph star(5, {{0, 1}, {0, 2}, {0, 3}, {0, 4}});
    ClusterAssignment c = manual_clusters(std::vector<int>(5, 0), 1);
    auto d = degree_bias_matrix(star, context_sets(star, c, 2));
    REQUIRE(d[1 * 5 + 2] == Catch::Approx(1.0));   // leaf-leaf, degrees 1,1 (2 hops)
    REQUIRE(d[0 * 5 + 1] == Catch::Approx(0.5));    // center-leaf, degrees 4,1
    REQUIRE(d[1 * 5 + 2] > d[0 * 5 + 1]);
}

TEST_CASE("blend arithmetic and clamping", "[augmentation]") {
    const std::size_t n = 2;
    std::vector<double> a = {0, 1, 1, 0};
    std::vector<double> d = {0, 0.5, 0.5, 0};
    BlendedMatrix ident = blend(a, n, std::vector<double>(4, 0.0), 1.0, 0.0);
    REQUIRE(ident.at(0, 1) == Catch::Approx(1.0));
    REQUIRE(ident.at(0, 0) == 0.0);
    BlendedMatrix mix = blend(a, n, d, 0.5, 0.3);
    REQUIRE(mix.at(0, 1) == Catch::Approx(0.65));
    BlendedMatrix clamped = blend(a, n, {0, 1, 1, 0}, 0.8, 0.5);
    REQUIRE(clamped.at(0, 1) == 1.0);
    REQUIRE_THROWS_AS(blend(a, n, d, -0.1, 0.3), std::invalid_argument);
    REQUIRE_THROWS_AS(blend(a, n, d, 0.1, -0.3), std::invalid_argument);
}

TEST_CASE("boundary probabilities are never sampled", "[augmentation]") {
    const std::size_t n = 3;
    std::vector<double> atilde = {0, 1, 0, 1, 0, 0.5, 0, 0.5, 0};
    BlendedMatrix b;
    b.n = n;
    b.values = atilde;
    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        AugmentedAdjacency aug = sample_edges(b, 0.5, seed);
        REQUIRE(aug.hard.at(0, 1) == 1.0);  // probability 1: always present
        REQUIRE(aug.soft.at(0, 1) == 1.0);
        REQUIRE(aug.hard.at(0, 2) == 0.0);  // probability 0: always absent
        REQUIRE(aug.soft.at(0, 2) == 0.0);
        REQUIRE(aug.hard.at(0, 0) == 0.0);  // diagonal stays empty
    }
}

TEST_CASE("hard-edge frequency matches the Bernoulli probability", "[augmentation]") {
    const std::size_t n = 2;
    for (double prob : {0.1, 0.5, 0.9}) {
        BlendedMatrix b;
        b.n = n;
        b.values = {0, prob, prob, 0};
        int hits = 0;
        const int trials = 10000;
        for (int s = 0; s < trials; ++s) {
            AugmentedAdjacency aug = sample_edges(b, 0.1, 1000 + s);
            if (aug.hard.at(0, 1) > 0.5) hits++;
        }
        const double freq = static_cast<double>(hits) / trials;
        REQUIRE(std::abs(freq - prob) < 0.02);
    }
}

TEST_CASE("soft and hard samples are exactly symmetric", "[augmentation]") {
    Rng rng(19);
    Graph g = erdos_renyi(30, 0.1, rng);
    std::vector<int> assign(30);
    for (auto& a : assign) a = static_cast<int>(uniform01(rng) * 3) % 3;
    ClusterAssignment c = manual_clusters(assign, 3);
    auto d = degree_bias_matrix(g, context_sets(g, c, 2));
    BlendedMatrix b = blend(adjacency_dense(g), 30, d, 0.9, 0.3);
    EdgeSampler sampler = make_edge_sampler(b, d);
    Tensor theta = rand_uniform({sampler.theta_count}, -0.5, 0.5, rng, true);
    AugmentedAdjacency aug = sample_edges(sampler, theta, 0.7, 99);
    for (std::size_t i = 0; i < 30; ++i)
        for (std::size_t j = 0; j < 30; ++j) {
            REQUIRE(aug.soft.at(i, j) == aug.soft.at(j, i));
            REQUIRE(aug.hard.at(i, j) == aug.hard.at(j, i));
            REQUIRE(aug.hard.at(i, j) == (aug.soft.at(i, j) > 0.5 ? 1.0 : 0.0));
        }
}

TEST_CASE("soft sample differentiates through probabilities and offsets", "[augmentation]") {
    Rng rng(21);
    Graph g = erdos_renyi(12, 0.25, rng);
    ClusterAssignment c = manual_clusters(std::vector<int>(12, 0), 1);
    auto d = degree_bias_matrix(g, context_sets(g, c, 2));
    BlendedMatrix b = blend(adjacency_dense(g), 12, d, 0.7, 0.3);
    EdgeSampler sampler = make_edge_sampler(b, d);
    REQUIRE(sampler.pairs.size() > 4);
    std::vector<double> noise = draw_pair_noise(sampler, 7);

    Tensor probs0 = Tensor::from({sampler.pairs.size()}, sampler.probs);
    Tensor theta0 = rand_uniform({sampler.theta_count}, -0.3, 0.3, rng);
    const double tau = 0.8;
    double err_probs = grad_check(
        [&](const Tensor& p) { return mean(edge_soft_sample(sampler, p, theta0, noise, tau)); },
        probs0, 1e-5);
    REQUIRE(err_probs < 1e-4);
    double err_theta = grad_check(
        [&](const Tensor& t) { return mean(edge_soft_sample(sampler, probs0, t, noise, tau)); },
        theta0, 1e-5);
    REQUIRE(err_theta < 1e-4);
    REQUIRE_THROWS_AS(edge_soft_sample(sampler, probs0, theta0, noise, 0.0), std::invalid_argument);
}

TEST_CASE("new hard edges only connect mutual context pairs", "[augmentation]") {
    Rng rng(27);
    for (int trial = 0; trial < 5; ++trial) {
        Graph g = erdos_renyi(40, 0.07, rng);
        std::vector<int> assign(40);
        for (auto& a : assign) a = static_cast<int>(uniform01(rng) * 3) % 3;
        ClusterAssignment c = manual_clusters(assign, 3);
        auto d = degree_bias_matrix(g, context_sets(g, c, 2));
        BlendedMatrix b = blend(adjacency_dense(g), 40, d, 0.9, 0.5);
        EdgeSampler sampler = make_edge_sampler(b, d);
        Tensor theta = Tensor::zeros({sampler.theta_count}, true);
        AugmentedAdjacency aug = sample_edges(sampler, theta, 0.5, 1000 + trial);
        for (std::size_t i = 0; i < 40; ++i)
            for (std::size_t j = 0; j < 40; ++j)
                if (aug.hard.at(i, j) > 0.5 && !g.has_edge(static_cast<int>(i), static_cast<int>(j)))
                    REQUIRE(d[i * 40 + j] > 0.0);
    }
}

TEST_CASE("deterministic sampling mode has no noise", "[augmentation]") {
    Rng rng(33);
    Graph g = erdos_renyi(15, 0.2, rng);
    ClusterAssignment c = manual_clusters(std::vector<int>(15, 0), 1);
    auto d = degree_bias_matrix(g, context_sets(g, c, 2));
    BlendedMatrix b = blend(adjacency_dense(g), 15, d, 0.6, 0.2);
    EdgeSampler sampler = make_edge_sampler(b, d);
    Tensor theta = Tensor::zeros({sampler.theta_count}, true);
    AugmentedAdjacency a1 = sample_edges(sampler, theta, 0.5, 1, /*deterministic=*/true);
    AugmentedAdjacency a2 = sample_edges(sampler, theta, 0.5, 2, /*deterministic=*/true);
    REQUIRE(a1.hard.values() == a2.hard.values());
    for (std::size_t p = 0; p < sampler.pairs.size(); ++p) {
        auto [i, j] = sampler.pairs[p];
        REQUIRE(a1.hard.at(i, j) == (sampler.probs[p] > 0.5 ? 1.0 : 0.0));
    }
}
