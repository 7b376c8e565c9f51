#include <cgt/objectives.hpp>
#include <cgt/training.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace cgt;
using namespace cgt::testing;

TEST_CASE("cosine similarity matrix structure", "[objectives]") {
    Tensor same = Tensor::from({3, 2}, {1, 2, 1, 2, 1, 2});
    Tensor all1 = cosine_similarity_matrix(same);
    for (double v : all1.values()) REQUIRE(v == Catch::Approx(1.0));

    Tensor ortho = Tensor::from({2, 2}, {1, 0, 0, 1});
    Tensor id = cosine_similarity_matrix(ortho);
    REQUIRE(id.at(0, 0) == Catch::Approx(1.0));
    REQUIRE(id.at(0, 1) == Catch::Approx(0.0).margin(1e-15));

    Tensor anti = Tensor::from({2, 2}, {1, 2, -1, -2});
    REQUIRE(cosine_similarity_matrix(anti).at(0, 1) == Catch::Approx(-1.0));

    Rng rng(3);
    Tensor z = rand_uniform({6, 4}, -2, 2, rng);
    Tensor c = cosine_similarity_matrix(z);
    for (std::size_t i = 0; i < 6; ++i) {
        REQUIRE(c.at(i, i) == Catch::Approx(1.0));
        for (std::size_t j = 0; j < 6; ++j) {
            REQUIRE(c.at(i, j) == Catch::Approx(c.at(j, i)));
            REQUIRE(c.at(i, j) >= -1.0 - 1e-12);
            REQUIRE(c.at(i, j) <= 1.0 + 1e-12);
        }
    }
}

TEST_CASE("transition preservation loss", "[objectives]") {
    // perfect match is zero
    LogTransitionSet ms;
    ms.n = 2;
    ms.mats = {{-0.5, -1.0, -1.0, -0.5}};
    Tensor match = Tensor::from({2, 2}, ms.mats[0]);
    REQUIRE(transition_preservation_loss(ms, match).item() == Catch::Approx(0.0).margin(1e-15));

    // 1x1 arithmetic: M = 2, Z* = 0, one step -> 4/1
    LogTransitionSet one;
    one.n = 1;
    one.mats = {{2.0}};
    REQUIRE(transition_preservation_loss(one, Tensor::zeros({1, 1})).item() == Catch::Approx(4.0));

    // path graph targets against a zero matrix equal the mean squared entries
    Graph p3 = path3();
    LogTransitionSet logs = log_transitions(transition_matrix(p3), 1, 1e-6);
    double expect = 0.0;
    for (double v : logs.mats[0]) expect += v * v;
    expect /= 9.0;
    REQUIRE(transition_preservation_loss(logs, Tensor::zeros({3, 3})).item() == Catch::Approx(expect));
}

TEST_CASE("transition loss is invariant under simultaneous permutation", "[objectives]") {
    Rng rng(5);
    Graph g = erdos_renyi(12, 0.25, rng);
    LogTransitionSet logs = log_transitions(transition_matrix(g), 2, 1e-6);
    Tensor z = rand_uniform({12, 5}, -1, 1, rng);
    Tensor zstar = cosine_rows(z);
    const double base = transition_preservation_loss(logs, zstar).item();

    std::vector<int> perm(12);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    LogTransitionSet plogs = logs;
    std::vector<double> pz(zstar.numel());
    for (int i = 0; i < 12; ++i)
        for (int j = 0; j < 12; ++j) {
            for (std::size_t s = 0; s < logs.mats.size(); ++s)
                plogs.mats[s][perm[i] * 12 + perm[j]] = logs.mats[s][i * 12 + j];
            pz[perm[i] * 12 + perm[j]] = zstar.at(i, j);
        }
    const double permuted = transition_preservation_loss(plogs, Tensor::from({12, 12}, pz)).item();
    REQUIRE(permuted == Catch::Approx(base).epsilon(1e-12));
}

TEST_CASE("feature reconstruction loss", "[objectives]") {
    Tensor x = Tensor::from({1, 2}, {3, 4});
    REQUIRE(feature_reconstruction_loss(x, Tensor::from(x.shape(), x.values())).item() ==
            Catch::Approx(0.0).margin(1e-12));
    REQUIRE(feature_reconstruction_loss(x, Tensor::zeros({1, 2})).item() == Catch::Approx(5.0));

    Rng rng(7);
    Tensor a = rand_uniform({4, 3}, -2, 2, rng);
    Tensor b = rand_uniform({4, 3}, -2, 2, rng);
    double fro = 0.0;
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const double d = a.values()[i] - b.values()[i];
        fro += d * d;
    }
    REQUIRE(feature_reconstruction_loss(a, b).item() == Catch::Approx(std::sqrt(fro) / 4.0));
}

TEST_CASE("augmentation BCE values", "[objectives]") {
    // perfect match is ~0 (exactly 0 with the clamped log)
    auto a = std::make_shared<const std::vector<double>>(std::vector<double>{0, 1, 1, 0});
    Tensor soft_match = Tensor::from({2, 2}, {0, 1, 1, 0});
    REQUIRE(augmentation_bce(a, soft_match).item() >= 0.0);
    REQUIRE(augmentation_bce(a, soft_match).item() < 1e-6);

    // one-half everywhere costs ln 2 per pair
    Tensor half = Tensor::from({2, 2}, std::vector<double>(4, 0.5));
    REQUIRE(augmentation_bce(a, half).item() == Catch::Approx(std::log(2.0)).epsilon(1e-6));

    // a present edge sampled at 0.9 costs -ln(0.9) on that pair
    REQUIRE(-std::log(0.9) == Catch::Approx(0.1054).margin(1e-4));
    Tensor soft9 = Tensor::from({2, 2}, {0, 0.9, 0.9, 0});
    REQUIRE(augmentation_bce(a, soft9).item() ==
            Catch::Approx(2.0 * -std::log(0.9 + 1e-7) / 4.0).epsilon(1e-9));
}

TEST_CASE("BCE descends to the original adjacency", "[objectives]") {
    // gradient descent on the relaxed sample alone, parameterized by logits
    Rng rng(11);
    Graph g = erdos_renyi(50, 0.08, rng);
    auto a = std::make_shared<const std::vector<double>>(adjacency_dense(g));
    Tensor logits = rand_uniform({g.n, g.n}, -1.5, 1.5, rng, true);
    AdamOptimizer opt({logits}, 0.05);
    for (int step = 0; step < 400; ++step) {
        Tensor loss = augmentation_bce(a, sigmoid(logits));
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    NoGrad ng;
    Tensor soft = sigmoid(logits);
    double mean_abs = 0.0;
    for (std::size_t i = 0; i < soft.numel(); ++i) mean_abs += std::abs(soft.values()[i] - (*a)[i]);
    mean_abs /= static_cast<double>(soft.numel());
    REQUIRE(mean_abs < 0.05);
}

TEST_CASE("total SSL loss combination", "[objectives]") {
    Tensor l1t = Tensor::scalar(1.0), l1f = Tensor::scalar(1.0), l2 = Tensor::scalar(1.0);
    SslLoss all_ones = total_ssl_loss(l1t, l1f, l2, LossWeights{1, 1, 1, 1});
    REQUIRE(all_ones.total.item() == Catch::Approx(3.0));

    SslLoss no_l2 = total_ssl_loss(Tensor::scalar(0.7), Tensor::scalar(0.3), l2, LossWeights{2, 0, 1, 1});
    REQUIRE(no_l2.total.item() == Catch::Approx(2.0 * (0.7 + 0.3)));
    SslLoss only_l2 = total_ssl_loss(l1t, l1f, Tensor::scalar(0.9), LossWeights{0, 3, 1, 1});
    REQUIRE(only_l2.total.item() == Catch::Approx(2.7));

    Rng rng(13);
    for (int t = 0; t < 10; ++t) {
        LossWeights w{uniform01(rng), uniform01(rng), uniform01(rng), uniform01(rng)};
        double c1 = uniform01(rng), c2 = uniform01(rng), c3 = uniform01(rng);
        SslLoss out = total_ssl_loss(Tensor::scalar(c1), Tensor::scalar(c2), Tensor::scalar(c3), w);
        REQUIRE(out.breakdown.total ==
                Catch::Approx(w.alpha1 * (w.beta1 * c1 + w.beta2 * c2) + w.alpha2 * c3).margin(1e-12));
        REQUIRE(out.breakdown.total >= 0.0);
    }
    REQUIRE_THROWS_AS(total_ssl_loss(l1t, l1f, l2, LossWeights{-1, 0, 0, 0}), std::invalid_argument);
}

TEST_CASE("modularity loss on reference partitions", "[objectives]") {
    Graph two = two_triangles();
    auto a = std::make_shared<const std::vector<double>>(adjacency_dense(two));
    ModularityContext ctx = make_modularity_context(two, a);

    // correct hard partition scores -0.5 (modularity 0.5, zero collapse penalty)
    std::vector<double> correct(6 * 2, 0.0);
    for (int i = 0; i < 6; ++i) correct[i * 2 + (i / 3)] = 1.0;
    REQUIRE(modularity_loss(ctx, Tensor::from({6, 2}, correct)).item() == Catch::Approx(-0.5));

    // brute force over all 2-partitions confirms 0.5 is the maximum modularity
    double best = -1.0;
    for (int bits = 0; bits < 64; ++bits) {
        std::vector<int> assign(6);
        for (int i = 0; i < 6; ++i) assign[i] = (bits >> i) & 1;
        best = std::max(best, modularity_metric(two, assign, 2));
    }
    REQUIRE(best == Catch::Approx(0.5));

    // uniform soft assignment: modularity term vanishes, loss equals the
    // collapse value (itself zero at perfect uniformity)
    Tensor uniform = Tensor::from({6, 2}, std::vector<double>(12, 0.5));
    REQUIRE(modularity_loss(ctx, uniform).item() == Catch::Approx(0.0).margin(1e-12));

    // a single clique in one cluster has modularity 0
    Graph k3 = triangle();
    auto ak = std::make_shared<const std::vector<double>>(adjacency_dense(k3));
    ModularityContext ck = make_modularity_context(k3, ak);
    Tensor ones = Tensor::from({3, 1}, std::vector<double>(3, 1.0));
    REQUIRE(modularity_loss(ck, ones).item() == Catch::Approx(0.0).margin(1e-12));

    Graph empty(3, {});
    auto ae = std::make_shared<const std::vector<double>>(adjacency_dense(empty));
    ModularityContext ce = make_modularity_context(empty, ae);
    REQUIRE_THROWS_AS(modularity_loss(ce, ones), std::invalid_argument);
}

TEST_CASE("classification loss values", "[objectives]") {
    // perfect one-hot logits with a huge margin
    Tensor confident = Tensor::from({2, 3}, {50, 0, 0, 0, 50, 0});
    std::vector<int> labels = {0, 1};
    REQUIRE(classification_loss(confident, labels, {0, 1}).item() < 1e-12);

    Tensor flat = Tensor::zeros({2, 5});
    REQUIRE(classification_loss(flat, labels, {0, 1}).item() == Catch::Approx(std::log(5.0)));

    const double gap = 1.3;
    Tensor two = Tensor::from({1, 2}, {gap, 0.0});
    REQUIRE(classification_loss(two, {0}, {0}).item() ==
            Catch::Approx(std::log(1.0 + std::exp(-gap))));

    REQUIRE_THROWS_AS(classification_loss(two, {0}, {}), std::invalid_argument);
    REQUIRE_THROWS_AS(classification_loss(two, {7}, {0}), std::invalid_argument);
}

TEST_CASE("loss components are non-negative and differentiable", "[objectives]") {
    Rng rng(17);
    Graph g = erdos_renyi(10, 0.3, rng);
    auto a = std::make_shared<const std::vector<double>>(adjacency_dense(g));
    LogTransitionSet logs = log_transitions(transition_matrix(g), 2, 1e-6);
    auto logs_ptr = std::make_shared<const LogTransitionSet>(logs);
    ModularityContext mctx = make_modularity_context(g, a);
    std::vector<int> labels(10), idx;
    for (int i = 0; i < 10; ++i) {
        labels[i] = i % 3;
        if (i % 2 == 0) idx.push_back(i);
    }

    for (int t = 0; t < 5; ++t) {
        Tensor z = rand_uniform({10, 4}, -1, 1, rng);
        Tensor target = rand_uniform({10, 4}, -1, 1, rng);
        Tensor soft = rand_uniform({10, 10}, 0.05, 0.95, rng);
        Tensor logits = rand_uniform({10, 3}, -1, 1, rng);
        REQUIRE(transition_preservation_loss(logs_ptr, cosine_rows(z)).item() >= 0.0);
        REQUIRE(feature_reconstruction_loss(z, target).item() >= 0.0);
        REQUIRE(augmentation_bce(a, soft).item() >= 0.0);
        REQUIRE(classification_loss(logits, labels, idx).item() >= 0.0);

        REQUIRE(grad_check(
                    [&](const Tensor& zz) {
                        return transition_preservation_loss(logs_ptr, cosine_rows(zz));
                    },
                    z, 1e-5) < 1e-4);
        REQUIRE(grad_check(
                    [&](const Tensor& zz) { return feature_reconstruction_loss(target, zz); }, z,
                    1e-5) < 1e-4);
        REQUIRE(grad_check([&](const Tensor& s) { return augmentation_bce(a, s); }, soft, 1e-5) < 1e-4);
        REQUIRE(grad_check([&](const Tensor& l) { return classification_loss(l, labels, idx); },
                           logits, 1e-5) < 1e-4);
        REQUIRE(grad_check(
                    [&](const Tensor& c) { return modularity_loss(mctx, row_softmax(c)); },
                    rand_uniform({10, 3}, -1, 1, rng), 1e-5) < 1e-4);
    }
}
