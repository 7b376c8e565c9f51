#include <cgt/training.hpp>

#include <catch2/catch_amalgamated.hpp>

#include "support.hpp"

using namespace cgt;
using namespace cgt::testing;

namespace {

TrainConfig small_config(std::uint64_t seed) {
    TrainConfig cfg;
    cfg.seed = seed;
    cfg.hidden = 16;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.epochs_pretrain = 30;
    cfg.epochs_finetune = 80;
    cfg.epochs_cluster = 80;
    cfg.patience = 40;
    return cfg;
}

}  // namespace

TEST_CASE("split sizes and determinism", "[training]") {
    Split s = split(10, std::nullopt, 0.6, 0.2, 0.2, 5);
    REQUIRE(s.train.size() == 6);
    REQUIRE(s.val.size() == 2);
    REQUIRE(s.test.size() == 2);

    Split again = split(10, std::nullopt, 0.6, 0.2, 0.2, 5);
    REQUIRE(s.train == again.train);
    REQUIRE(s.val == again.val);
    REQUIRE(s.test == again.test);

    // disjoint and exhaustive
    std::set<int> all;
    for (const auto* part : {&s.train, &s.val, &s.test})
        for (int i : *part) REQUIRE(all.insert(i).second);
    REQUIRE(all.size() == 10);

    REQUIRE_THROWS_AS(split(10, std::nullopt, 0.6, 0.3, 0.2, 5), std::invalid_argument);
}

TEST_CASE("split stratifies by label", "[training]") {
    std::vector<int> labels = {0, 0, 0, 0, 0, 1, 1, 1, 1, 1};
    Split s = split(10, labels, 0.6, 0.2, 0.2, 7);
    REQUIRE(s.stratified);
    for (const auto* part : {&s.train, &s.val, &s.test}) {
        int c0 = 0, c1 = 0;
        for (int i : *part) (labels[i] == 0 ? c0 : c1)++;
        if (part == &s.train) {
            REQUIRE(c0 == 3);
            REQUIRE(c1 == 3);
        } else {
            REQUIRE(c0 == 1);
            REQUIRE(c1 == 1);
        }
    }

    // a class with fewer than 3 nodes falls back to unstratified
    std::vector<int> tiny = {0, 0, 0, 0, 0, 0, 0, 0, 1, 1};
    Split u = split(10, tiny, 0.6, 0.2, 0.2, 7);
    REQUIRE_FALSE(u.stratified);
    REQUIRE(u.train.size() + u.val.size() + u.test.size() == 10);
}

TEST_CASE("adam descends a quadratic", "[training]") {
    Tensor x = Tensor::from({3}, {5.0, -4.0, 2.0}, true);
    AdamOptimizer opt({x}, 0.1);
    for (int i = 0; i < 300; ++i) {
        Tensor loss = frobenius_sq(x);
        opt.zero_grad();
        backward(loss);
        opt.step();
    }
    for (double v : x.values()) REQUIRE(std::abs(v) < 1e-2);
}

TEST_CASE("pretrain loss descends on an eight-node two-triangle graph", "[training]") {
    // two triangles plus two pendant nodes
    Graph base = two_triangles(0.2, 3);
    std::vector<std::pair<int, int>> edges = base.edges;
    edges.emplace_back(0, 6);
    edges.emplace_back(3, 7);
    std::vector<double> x = base.features;
    Rng rng(4);
    for (int i = 0; i < 2; ++i)
        for (int t = 0; t < 3; ++t) x.push_back(uniform01(rng));
    Graph g(8, edges, x, 3);

    TrainConfig cfg = small_config(9);
    cfg.epochs_pretrain = 200;
    cfg.communities = 2;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    PretrainResult res = pretrain(pg, params, cfg);
    REQUIRE_FALSE(res.diverged);
    REQUIRE(res.history.size() == 200);
    REQUIRE(res.history.back().total < res.history.front().total);
    // descent over the first ten epochs
    REQUIRE(res.history[9].total < res.history[0].total);
}

TEST_CASE("zero loss weights leave parameters untouched", "[training]") {
    Graph g = two_triangles(0.2, 5);
    TrainConfig cfg = small_config(11);
    cfg.alpha1 = 0.0;
    cfg.alpha2 = 0.0;
    cfg.epochs_pretrain = 5;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    const auto before = snapshot_params(const_cast<ModelParams&>(params).all());
    pretrain(pg, params, cfg);
    const auto after = snapshot_params(const_cast<ModelParams&>(params).all());
    REQUIRE(before == after);
}

TEST_CASE("BCE-only pretraining pulls the sample toward the original graph", "[training]") {
    Rng rng(13);
    Graph g = erdos_renyi(40, 0.1, rng);
    std::vector<double> x(40 * 4);
    for (auto& v : x) v = uniform01(rng);
    Graph gx(40, g.edges, x, 4);

    TrainConfig cfg = small_config(17);
    cfg.alpha1 = 0.0;
    cfg.alpha2 = 1.0;
    cfg.epochs_pretrain = 400;
    cfg.lr = 5e-2;
    cfg.xi = 0.6;  // leave room for both directions
    cfg.zeta = 0.4;
    cfg.communities = 2;
    PreparedGraph pg = prepare_graph(gx, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    REQUIRE(params.theta.defined());
    // random initial offsets
    {
        Rng trng(23);
        auto& tv = params.theta.mutable_values();
        for (auto& v : tv) v = 2.0 * uniform01(trng) - 1.0;
    }
    PretrainResult res = pretrain(pg, params, cfg);
    REQUIRE_FALSE(res.diverged);
    NoGrad ng;
    EpochSample s = sample_for_epoch(pg, params, cfg.tau_end, 0, true, true);
    double mean_abs = 0.0;
    for (std::size_t i = 0; i < s.aug.soft.numel(); ++i)
        mean_abs += std::abs(s.aug.soft.values()[i] - (*pg.a_dense)[i]);
    mean_abs /= static_cast<double>(s.aug.soft.numel());
    REQUIRE(mean_abs < 0.05);
}

TEST_CASE("separable two-triangle classification reaches full accuracy", "[training]") {
    Graph g = two_triangles(0.1, 7);
    TrainConfig cfg = small_config(21);
    cfg.communities = 2;
    cfg.train_frac = 0.34;
    cfg.val_frac = 0.33;
    cfg.test_frac = 0.33;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    pretrain(pg, params, cfg);
    Split sp = split(g.n, g.labels, cfg.train_frac, cfg.val_frac, cfg.test_frac, cfg.seed);
    ClassifyResult res = finetune_classify(pg, params, cfg, sp);
    REQUIRE(res.test_accuracy == 1.0);
}

TEST_CASE("randomly permuted labels give chance-level accuracy", "[training]") {
    Graph g = sbm_powerlaw(200, 4, 0.2, 0.01, 8, 31);
    // shuffle the labels so structure and target are independent
    Rng rng(33);
    std::vector<int> shuffled = *g.labels;
    std::shuffle(shuffled.begin(), shuffled.end(), rng);
    Graph gx(g.n, g.edges, g.features, g.feature_dim, shuffled);

    TrainConfig cfg = small_config(37);
    cfg.use_pretrain = false;
    cfg.epochs_finetune = 40;
    cfg.patience = 15;
    PreparedGraph pg = prepare_graph(gx, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    Split sp = split(gx.n, gx.labels, 0.6, 0.2, 0.2, cfg.seed);
    ClassifyResult res = finetune_classify(pg, params, cfg, sp);
    REQUIRE(res.test_accuracy > 0.25 - 0.15);
    REQUIRE(res.test_accuracy < 0.25 + 0.15);
}

TEST_CASE("fairness report arithmetic", "[training]") {
    // ten test nodes with degrees 1..10, errors concentrated on low degrees
    std::vector<int> labels(10, 0), preds(10, 0), deg(10), test_idx(10);
    for (int i = 0; i < 10; ++i) {
        deg[i] = i + 1;
        test_idx[i] = i;
    }
    SECTION("all correct") {
        FairnessReport rep = fairness_report(preds, labels, deg, test_idx);
        REQUIRE(rep.overall_error_pct == 0.0);
        for (const auto& r : rep.rows) {
            REQUIRE(r.error_pct == 0.0);
            REQUIRE(r.bias_pct == 0.0);
        }
    }
    SECTION("errors only on low degrees") {
        preds[0] = preds[1] = 1;  // degrees 1 and 2 wrong
        FairnessReport rep = fairness_report(preds, labels, deg, test_idx);
        REQUIRE(rep.overall_error_pct == Catch::Approx(20.0));
        REQUIRE(rep.rows[0].threshold == 2);
        REQUIRE(rep.rows[0].error_pct == Catch::Approx(100.0));
        for (std::size_t r = 1; r < rep.rows.size(); ++r)
            REQUIRE(rep.rows[r].bias_pct < rep.rows[r - 1].bias_pct);
        for (const auto& r : rep.rows)
            REQUIRE(r.bias_pct == Catch::Approx(r.error_pct - rep.overall_error_pct).margin(1e-9));
    }
    SECTION("empty buckets are omitted with a note") {
        std::vector<int> high_deg(10, 50);
        FairnessReport rep = fairness_report(preds, labels, high_deg, test_idx);
        REQUIRE(rep.rows.empty());
        REQUIRE(rep.omitted_thresholds == std::vector<int>({2, 4, 6, 8, 10}));
    }
}

TEST_CASE("clustering on reference graphs", "[training]") {
    SECTION("two disconnected triangles") {
        Graph g = two_triangles(0.05, 41);
        TrainConfig cfg = small_config(43);
        cfg.communities = 2;
        cfg.cluster_heads = 2;
        cfg.epochs_cluster = 150;
        PreparedGraph pg = prepare_graph(g, cfg);
        ModelParams params = init_for_graph(pg, cfg);
        ClusterResult res = train_cluster(pg, params, cfg);
        REQUIRE(res.modularity_pct == Catch::Approx(50.0).margin(1e-9));
        REQUIRE(res.conductance_pct == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("single clique with one head") {
        Graph k3 = triangle();
        std::vector<double> x = {1, 0, 0, 1, 1, 0};
        Graph g(3, k3.edges, x, 2);
        TrainConfig cfg = small_config(47);
        cfg.communities = 1;
        cfg.cluster_heads = 1;
        cfg.epochs_cluster = 5;
        cfg.epochs_pretrain = 5;
        PreparedGraph pg = prepare_graph(g, cfg);
        ModelParams params = init_for_graph(pg, cfg);
        ClusterResult res = train_cluster(pg, params, cfg);
        REQUIRE(res.modularity_pct == Catch::Approx(0.0).margin(1e-9));
    }
    SECTION("two cliques bridged by one edge have the hand-computed conductance") {
        // two K4s, bridge 0-4; per-clique volume 13, cut 1
        std::vector<std::pair<int, int>> edges;
        for (int a = 0; a < 4; ++a)
            for (int b = a + 1; b < 4; ++b) {
                edges.emplace_back(a, b);
                edges.emplace_back(a + 4, b + 4);
            }
        edges.emplace_back(0, 4);
        std::vector<double> x;
        std::vector<int> labels;
        Rng rng(49);
        for (int i = 0; i < 8; ++i) {
            const int c = i / 4;
            x.push_back(c == 0 ? 1.0 : 0.0);
            x.push_back(c == 1 ? 1.0 : 0.0);
            x.push_back(0.05 * uniform01(rng));
            labels.push_back(c);
        }
        Graph g(8, edges, x, 3, labels);
        TrainConfig cfg = small_config(53);
        cfg.communities = 2;
        cfg.cluster_heads = 2;
        cfg.epochs_cluster = 200;
        PreparedGraph pg = prepare_graph(g, cfg);
        ModelParams params = init_for_graph(pg, cfg);
        ClusterResult res = train_cluster(pg, params, cfg);
        REQUIRE(res.conductance_pct == Catch::Approx(100.0 / 13.0).margin(1e-9));
    }
}

TEST_CASE("identical config and seed reproduce bit-identical metrics", "[training]") {
    Graph g = sbm_powerlaw(60, 3, 0.3, 0.02, 6, 59);
    TrainConfig cfg = small_config(61);
    cfg.epochs_pretrain = 10;
    cfg.epochs_finetune = 20;
    auto run = [&]() {
        PreparedGraph pg = prepare_graph(g, cfg);
        ModelParams params = init_for_graph(pg, cfg);
        pretrain(pg, params, cfg);
        Split sp = split(g.n, g.labels, 0.6, 0.2, 0.2, cfg.seed);
        return finetune_classify(pg, params, cfg, sp);
    };
    ClassifyResult a = run();
    ClassifyResult b = run();
    REQUIRE(a.test_accuracy == b.test_accuracy);
    REQUIRE(a.predictions == b.predictions);
    REQUIRE(a.train_loss_history == b.train_loss_history);
}

TEST_CASE("ablation ordering on a power-law SBM", "[training][ablation]") {
    // full model vs the all-off variant, mean accuracy over 10 seeds
    double full_sum = 0.0, off_sum = 0.0;
    const int seeds = 10;
    for (int s = 0; s < seeds; ++s) {
        Graph g = sbm_powerlaw(90, 3, 0.28, 0.02, 6, 100 + s);
        TrainConfig cfg = small_config(200 + s);
        cfg.epochs_pretrain = 15;
        cfg.epochs_finetune = 40;
        cfg.patience = 20;
        auto run_with = [&](bool on) {
            TrainConfig c = cfg;
            c.use_pretrain = on;
            c.use_augmentation = on;
            c.use_community_attention = on;
            PreparedGraph pg = prepare_graph(g, c);
            ModelParams params = init_for_graph(pg, c);
            if (c.use_pretrain) pretrain(pg, params, c);
            Split sp = split(g.n, g.labels, 0.6, 0.2, 0.2, c.seed);
            return finetune_classify(pg, params, c, sp).test_accuracy;
        };
        full_sum += run_with(true);
        off_sum += run_with(false);
    }
    REQUIRE(full_sum / seeds >= off_sum / seeds - 1e-12);
}

TEST_CASE("divergence aborts with the last finite parameters", "[training]") {
    Graph g = two_triangles(0.1, 67);
    TrainConfig cfg = small_config(71);
    cfg.lr = 1e6;  // guaranteed blow-up
    cfg.epochs_pretrain = 50;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    PretrainResult res = pretrain(pg, params, cfg);
    for (const Tensor& p : params.all())
        for (double v : p.values()) REQUIRE(std::isfinite(v));
    if (res.diverged) REQUIRE(res.history.size() < 50);
}

TEST_CASE("structural community space and the post-FFN residual variant", "[training]") {
    Graph g = sbm_powerlaw(40, 2, 0.3, 0.03, 5, 81);
    TrainConfig cfg = small_config(83);
    cfg.community_space = "structural";
    cfg.post_ffn_residual = true;
    cfg.epochs_pretrain = 8;
    cfg.epochs_finetune = 25;
    PreparedGraph pg = prepare_graph(g, cfg);
    REQUIRE(pg.clusters.m == 2);
    ModelParams params = init_for_graph(pg, cfg);
    PretrainResult pre = pretrain(pg, params, cfg);
    REQUIRE_FALSE(pre.diverged);
    REQUIRE(pre.history.back().total < pre.history.front().total);
    Split sp = split(g.n, g.labels, 0.6, 0.2, 0.2, cfg.seed);
    ClassifyResult res = finetune_classify(pg, params, cfg, sp);
    REQUIRE(res.test_accuracy > 0.5);
}

TEST_CASE("post-FFN residual layer passes gradient checks", "[training]") {
    Rng rng(89);
    Graph g = erdos_renyi(5, 0.4, rng);
    ModelDims dims{3, 4, 2, 1, 2};
    ModelParams params = init_model_params(dims, 0, 0, 0, rng);
    AttentionContext ctx;
    ctx.n = g.n;
    ctx.scales = 2;
    ctx.prox = std::make_shared<const ProximityTensor>(multiscale_proximity(g, 2));
    std::vector<std::vector<int>> sets(g.n);
    for (std::size_t v = 0; v < g.n; ++v) sets[v] = khop_set(g, static_cast<int>(v), 2, false);
    ctx.d_bias = std::make_shared<const std::vector<double>>(degree_bias_matrix(g, sets));
    std::vector<double> mv = adjacency_dense(g);
    for (std::size_t i = 0; i < g.n; ++i) mv[i * g.n + i] = 1.0;
    Tensor mask = Tensor::from({g.n, g.n}, mv);
    auto idx = build_attention_index(mask.values(), g.n, {});
    Tensor target = rand_uniform({g.n, 4}, -1, 1, rng);
    double err = grad_check(
        [&](const Tensor& h) {
            Tensor out = attention_layer(params.layers[0], ctx, idx, h, mask, true,
                                         /*post_ffn_residual=*/true);
            return frobenius_sq(sub(out, target));
        },
        rand_uniform({g.n, 4}, -1, 1, rng), 1e-5);
    REQUIRE(err < 1e-4);
}

TEST_CASE("freezing the backbone trains only the classifier head", "[training]") {
    Graph g = sbm_powerlaw(40, 2, 0.3, 0.03, 5, 91);
    TrainConfig cfg = small_config(93);
    cfg.freeze_backbone = true;
    cfg.use_augmentation = false;  // otherwise theta would also stay frozen anyway
    cfg.epochs_pretrain = 5;
    cfg.epochs_finetune = 15;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    pretrain(pg, params, cfg);
    const std::vector<double> w0_before = params.w0.values();
    const std::vector<double> cls_before = params.cls_w2.values();
    Split sp = split(g.n, g.labels, 0.6, 0.2, 0.2, cfg.seed);
    finetune_classify(pg, params, cfg, sp);
    REQUIRE(params.w0.values() == w0_before);
    REQUIRE(params.cls_w2.values() != cls_before);
}

TEST_CASE("isolated nodes survive the full pipeline", "[training]") {
    // SBM plus two isolated nodes appended
    Graph base = sbm_powerlaw(30, 2, 0.35, 0.03, 5, 95);
    std::vector<double> x = base.features;
    std::vector<int> labels = *base.labels;
    Rng rng(97);
    for (int extra = 0; extra < 2; ++extra) {
        for (int t = 0; t < 5; ++t) x.push_back(uniform01(rng));
        labels.push_back(extra % 2);
    }
    Graph g(32, base.edges, x, 5, labels);
    REQUIRE(degrees(g)[31] == 0);
    TrainConfig cfg = small_config(99);
    cfg.epochs_pretrain = 6;
    cfg.epochs_finetune = 12;
    PreparedGraph pg = prepare_graph(g, cfg);
    ModelParams params = init_for_graph(pg, cfg);
    PretrainResult pre = pretrain(pg, params, cfg);
    REQUIRE_FALSE(pre.diverged);
    Split sp = split(g.n, g.labels, 0.6, 0.2, 0.2, cfg.seed);
    ClassifyResult res = finetune_classify(pg, params, cfg, sp);
    for (double v : res.train_loss_history) REQUIRE(std::isfinite(v));
}
