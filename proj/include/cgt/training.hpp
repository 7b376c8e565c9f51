#pragma once

// Training orchestration: stratified splits, the Adam optimizer, SSL
// pretraining, supervised fine-tuning with early stopping, joint clustering
// training, and the degree-bucket fairness evaluation.

#include <cgt/augmentation.hpp>
#include <cgt/graph.hpp>
#include <cgt/kmeans.hpp>
#include <cgt/metrics.hpp>
#include <cgt/model.hpp>
#include <cgt/objectives.hpp>
#include <cgt/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <iostream>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace cgt {

struct TrainConfig {
    std::uint64_t seed = 1;

    int epochs_pretrain = 30;
    int epochs_finetune = 200;
    int epochs_cluster = 150;
    int patience = 50;

    double lr = 1e-3;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double weight_decay = 5e-4;

    double train_frac = 0.6;
    double val_frac = 0.2;
    double test_frac = 0.2;

    double xi = 0.9;
    double zeta = 0.3;
    int khop = 2;       // context range k
    double tau_start = 1.0;
    double tau_end = 0.1;

    int p_max = 3;      // log-transition steps
    int scales = 3;     // proximity scales K

    int hidden = 64;
    int heads = 4;
    int layers = 2;

    int communities = 0;              // 0 = label classes, else ceil(sqrt(n))
    std::string community_space = "features";  // or "structural"
    int kmeans_max_iter = 100;
    double kmeans_tol = 1e-6;

    double alpha1 = 1.0;
    double alpha2 = 0.5;
    double beta1 = 1.0;
    double beta2 = 0.5;

    int cluster_heads = 0;            // 0 = same as communities
    double cluster_weight = 1.0;      // modularity loss coefficient

    bool use_pretrain = true;
    bool use_augmentation = true;
    bool use_community_attention = true;
    bool post_ffn_residual = false;
    bool freeze_backbone = false;

    void validate() const {
        if (epochs_pretrain < 1 || epochs_finetune < 1 || epochs_cluster < 1)
            throw std::invalid_argument("config: epoch counts must be >= 1");
        if (!(lr > 0.0)) throw std::invalid_argument("config: lr must be positive");
        if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
            throw std::invalid_argument("config: split fractions must sum to 1");
        if (xi < 0.0 || zeta < 0.0) throw std::invalid_argument("config: xi/zeta must be non-negative");
        if (khop < 1 || p_max < 1 || scales < 1)
            throw std::invalid_argument("config: khop/p_max/scales must be >= 1");
        if (!(tau_start > 0.0) || !(tau_end > 0.0))
            throw std::invalid_argument("config: tau schedule must stay positive");
        if (hidden < 1 || heads < 1 || layers < 1 || hidden % heads != 0)
            throw std::invalid_argument("config: hidden must be a positive multiple of heads");
        if (alpha1 < 0 || alpha2 < 0 || beta1 < 0 || beta2 < 0)
            throw std::invalid_argument("config: loss weights must be non-negative");
        if (community_space != "features" && community_space != "structural")
            throw std::invalid_argument("config: community_space must be 'features' or 'structural'");
    }
};

// ---------------------------------------------------------------------------
// Splits

struct Split {
    std::vector<int> train, val, test;
    bool stratified = false;
};

inline Split split(std::size_t n, const std::optional<std::vector<int>>& labels, double train_frac,
                   double val_frac, double test_frac, std::uint64_t seed) {
    if (std::abs(train_frac + val_frac + test_frac - 1.0) > 1e-9)
        throw std::invalid_argument("split: fractions must sum to 1");
    Rng rng(seed);
    Split out;

    std::vector<std::vector<int>> groups;
    bool stratified = false;
    if (labels) {
        int classes = 0;
        for (int c : *labels) classes = std::max(classes, c + 1);
        std::vector<std::vector<int>> by_class(classes);
        for (std::size_t i = 0; i < n; ++i) by_class[(*labels)[i]].push_back(static_cast<int>(i));
        stratified = true;
        for (const auto& grp : by_class)
            if (grp.size() < 3) stratified = false;
        if (stratified)
            groups = std::move(by_class);
        else
            std::cerr << "split: a class has fewer than 3 nodes, falling back to unstratified\n";
    }
    if (groups.empty()) {
        groups.emplace_back();
        for (std::size_t i = 0; i < n; ++i) groups[0].push_back(static_cast<int>(i));
    }
    out.stratified = stratified;

    for (auto& grp : groups) {
        std::shuffle(grp.begin(), grp.end(), rng);
        const std::size_t sz = grp.size();
        std::size_t n_tr = static_cast<std::size_t>(std::llround(train_frac * static_cast<double>(sz)));
        std::size_t n_va = static_cast<std::size_t>(std::llround(val_frac * static_cast<double>(sz)));
        n_tr = std::min(n_tr, sz);
        n_va = std::min(n_va, sz - n_tr);
        for (std::size_t i = 0; i < sz; ++i) {
            if (i < n_tr)
                out.train.push_back(grp[i]);
            else if (i < n_tr + n_va)
                out.val.push_back(grp[i]);
            else
                out.test.push_back(grp[i]);
        }
    }
    std::sort(out.train.begin(), out.train.end());
    std::sort(out.val.begin(), out.val.end());
    std::sort(out.test.begin(), out.test.end());
    return out;
}

// ---------------------------------------------------------------------------
// Optimizer

/// Adam with bias correction; L2 weight decay applies to weight matrices only
/// (rank >= 2), not to biases, norms, or scalar offsets. Parameters whose
/// grad buffer is empty this step are skipped.
class AdamOptimizer {
public:
    AdamOptimizer(std::vector<Tensor> params, double lr, double beta1 = 0.9, double beta2 = 0.999,
                  double eps = 1e-8, double weight_decay = 0.0)
        : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {
        for (auto& p : params) {
            if (!p.defined()) continue;
            Slot s;
            s.p = p;
            s.m.assign(p.numel(), 0.0);
            s.v.assign(p.numel(), 0.0);
            s.decay = p.rank() >= 2;
            slots_.push_back(std::move(s));
        }
    }

    void zero_grad() {
        for (auto& s : slots_) {
            s.p.node()->grad.clear();
            s.p.node()->grad.shrink_to_fit();
        }
    }

    void step() {
        ++t_;
        const double c1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
        const double c2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
        for (auto& s : slots_) {
            if (!s.p.has_grad()) continue;
            auto& val = s.p.mutable_values();
            const auto& grad = s.p.grad();
            for (std::size_t i = 0; i < val.size(); ++i) {
                double g = grad[i];
                if (s.decay) g += wd_ * val[i];
                s.m[i] = b1_ * s.m[i] + (1.0 - b1_) * g;
                s.v[i] = b2_ * s.v[i] + (1.0 - b2_) * g * g;
                val[i] -= lr_ * (s.m[i] / c1) / (std::sqrt(s.v[i] / c2) + eps_);
            }
        }
    }

private:
    struct Slot {
        Tensor p;
        std::vector<double> m, v;
        bool decay = false;
    };
    std::vector<Slot> slots_;
    double lr_, b1_, b2_, eps_, wd_;
    long t_ = 0;
};

inline std::vector<std::vector<double>> snapshot_params(const std::vector<Tensor>& ps) {
    std::vector<std::vector<double>> out;
    for (const auto& p : ps) out.push_back(p.values());
    return out;
}

inline void restore_params(std::vector<Tensor>& ps, const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i].mutable_values() = snap[i];
}

// ---------------------------------------------------------------------------
// Run preparation

/// All structural precomputation for one graph + config: transition targets,
/// proximity tensor, communities, degree-bias matrix, blended probabilities,
/// and the edge sampler.
struct PreparedGraph {
    const Graph* g = nullptr;
    std::shared_ptr<const std::vector<double>> a_dense;
    std::shared_ptr<const LogTransitionSet> log_trans;
    std::shared_ptr<const ProximityTensor> prox;
    std::shared_ptr<const std::vector<double>> d_bias;
    ClusterAssignment clusters;
    BlendedMatrix blended;
    EdgeSampler sampler;
    AttentionContext attn_ctx;
    Tensor x;              // node features, constant
    Tensor mask_original;  // A + I, constant
    Tensor eye;            // identity, constant
    std::shared_ptr<const AttentionIndex> index_original;  // support of A + I
};

inline PreparedGraph prepare_graph(const Graph& g, const TrainConfig& cfg) {
    cfg.validate();
    if (g.feature_dim == 0) throw std::invalid_argument("prepare_graph: graph has no features");
    PreparedGraph pg;
    pg.g = &g;
    const std::size_t n = g.n;
    pg.a_dense = std::make_shared<const std::vector<double>>(adjacency_dense(g));
    TransitionMatrix p1 = transition_matrix(g);
    pg.log_trans = std::make_shared<const LogTransitionSet>(log_transitions(p1, cfg.p_max));
    pg.prox = std::make_shared<const ProximityTensor>(
        multiscale_proximity(g, cfg.scales));

    std::size_t m = cfg.communities > 0 ? static_cast<std::size_t>(cfg.communities)
                                        : default_community_count(g);
    m = std::min(m, n);
    std::vector<double> points;
    std::size_t dim = 0;
    if (cfg.community_space == "structural") {
        // rows of P^khop concatenated with raw features
        TransitionMatrix pk = k_step(p1, cfg.khop);
        dim = n + g.feature_dim;
        points.resize(n * dim);
        for (std::size_t i = 0; i < n; ++i) {
            std::copy_n(pk.values.data() + i * n, n, points.data() + i * dim);
            std::copy_n(g.features.data() + i * g.feature_dim, g.feature_dim,
                        points.data() + i * dim + n);
        }
    } else {
        points = g.features;
        dim = g.feature_dim;
    }
    pg.clusters = kmeans(points, n, dim, m, cfg.seed, cfg.kmeans_max_iter, cfg.kmeans_tol);

    auto ctx_sets = context_sets(g, pg.clusters, cfg.khop);
    pg.d_bias = std::make_shared<const std::vector<double>>(degree_bias_matrix(g, ctx_sets));
    pg.blended = blend(*pg.a_dense, n, *pg.d_bias, cfg.xi, cfg.zeta);
    pg.sampler = make_edge_sampler(pg.blended, *pg.d_bias);

    pg.attn_ctx = AttentionContext{n, static_cast<std::size_t>(cfg.scales), pg.prox, pg.d_bias};
    pg.x = Tensor::from({n, g.feature_dim}, g.features, false);

    std::vector<double> eye(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) eye[i * n + i] = 1.0;
    pg.eye = Tensor::from({n, n}, eye, false);
    std::vector<double> mask = *pg.a_dense;
    for (std::size_t i = 0; i < n; ++i) mask[i * n + i] = 1.0;
    pg.mask_original = Tensor::from({n, n}, std::move(mask), false);
    pg.index_original = build_attention_index(pg.mask_original.values(), n, {});
    return pg;
}

inline ModelParams init_for_graph(const PreparedGraph& pg, const TrainConfig& cfg) {
    ModelDims dims;
    dims.d0 = pg.g->feature_dim;
    dims.d = static_cast<std::size_t>(cfg.hidden);
    dims.heads = static_cast<std::size_t>(cfg.heads);
    dims.layers = static_cast<std::size_t>(cfg.layers);
    dims.scales = static_cast<std::size_t>(cfg.scales);
    std::size_t m_head = cfg.cluster_heads > 0 ? static_cast<std::size_t>(cfg.cluster_heads)
                                               : pg.clusters.m;
    const std::size_t theta_count = cfg.use_augmentation ? pg.sampler.theta_count : 0;
    Rng rng(cfg.seed ^ 0x9e3779b97f4a7c15ull);
    return init_model_params(dims, pg.g->num_classes(), m_head, theta_count, rng);
}

struct EpochSample {
    AugmentedAdjacency aug;  // undefined tensors when augmentation is off
    Tensor mask;             // attention mask (hard adjacency + self, or A + I)
    std::shared_ptr<const AttentionIndex> index;
};

inline EpochSample sample_for_epoch(const PreparedGraph& pg, const ModelParams& params, double tau,
                                    std::uint64_t noise_seed, bool deterministic,
                                    bool use_augmentation) {
    EpochSample s;
    if (!use_augmentation) {
        s.mask = pg.mask_original;
        s.index = pg.index_original;
        return s;
    }
    s.aug = sample_edges(pg.sampler, params.theta, tau, noise_seed, deterministic);
    s.mask = add(s.aug.hard, pg.eye);
    s.index = build_attention_index(s.mask.values(), pg.g->n, pg.sampler.pairs);
    return s;
}

inline double tau_at(const TrainConfig& cfg, int epoch, int total_epochs) {
    if (total_epochs <= 1) return cfg.tau_end;
    const double f = static_cast<double>(epoch) / static_cast<double>(total_epochs - 1);
    return cfg.tau_start + (cfg.tau_end - cfg.tau_start) * f;
}

// ---------------------------------------------------------------------------
// Pretraining

struct PretrainResult {
    std::vector<LossBreakdown> history;
    bool diverged = false;
    int epochs_run = 0;
};

inline SslLoss ssl_loss_for_sample(const PreparedGraph& pg, const ModelParams& params,
                                   const TrainConfig& cfg, const EpochSample& s) {
    Tensor z = encode(params, pg.attn_ctx, s.index, pg.x, s.mask, cfg.use_community_attention,
                      cfg.post_ffn_residual);
    Tensor l_trans, l_feat, l_bce;
    if (cfg.alpha1 > 0.0 && cfg.beta1 > 0.0)
        l_trans = transition_preservation_loss(pg.log_trans, cosine_rows(z));
    if (cfg.alpha1 > 0.0 && cfg.beta2 > 0.0)
        l_feat = feature_reconstruction_loss(pg.x, reconstruct_features(params, z));
    if (cfg.alpha2 > 0.0 && cfg.use_augmentation && s.aug.soft.defined())
        l_bce = augmentation_bce(pg.a_dense, s.aug.soft);
    LossWeights w{cfg.alpha1, cfg.alpha2, cfg.beta1, cfg.beta2};
    return total_ssl_loss(l_trans, l_feat, l_bce, w);
}

inline PretrainResult pretrain(const PreparedGraph& pg, ModelParams& params, const TrainConfig& cfg) {
    PretrainResult res;
    std::vector<Tensor> ps = params.all();
    AdamOptimizer opt(ps, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    std::vector<std::vector<double>> last_good = snapshot_params(ps);
    for (int epoch = 0; epoch < cfg.epochs_pretrain; ++epoch) {
        const double tau = tau_at(cfg, epoch, cfg.epochs_pretrain);
        EpochSample s = sample_for_epoch(pg, params, tau, cfg.seed + 7919 * (epoch + 1),
                                         /*deterministic=*/false, cfg.use_augmentation);
        SslLoss loss = ssl_loss_for_sample(pg, params, cfg, s);
        if (!std::isfinite(loss.breakdown.total)) {
            restore_params(ps, last_good);
            res.diverged = true;
            break;
        }
        last_good = snapshot_params(ps);
        res.history.push_back(loss.breakdown);
        if (loss.total.requires_grad()) {
            opt.zero_grad();
            backward(loss.total);
            opt.step();
        }
        res.epochs_run = epoch + 1;
    }
    return res;
}

// ---------------------------------------------------------------------------
// Classification

struct ClassifyResult {
    double test_accuracy = 0.0;
    double best_val_accuracy = 0.0;
    int best_epoch = -1;
    int epochs_run = 0;
    bool diverged = false;
    FairnessReport fairness;
    std::vector<int> predictions;       // all nodes, from the best checkpoint
    std::vector<double> train_loss_history;
    std::vector<double> val_acc_history;
};

inline std::vector<int> predict_all(const PreparedGraph& pg, const ModelParams& params,
                                    const TrainConfig& cfg) {
    NoGrad ng;
    EpochSample s = sample_for_epoch(pg, params, cfg.tau_end, 0, /*deterministic=*/true,
                                     cfg.use_augmentation);
    Tensor z = encode(params, pg.attn_ctx, s.index, pg.x, s.mask, cfg.use_community_attention,
                      cfg.post_ffn_residual);
    Tensor logits = classifier_logits(params, z);
    return row_argmax(logits.values(), logits.rows(), logits.cols());
}

inline ClassifyResult finetune_classify(const PreparedGraph& pg, ModelParams& params,
                                        const TrainConfig& cfg, const Split& sp) {
    if (!pg.g->labels) throw std::invalid_argument("finetune_classify: graph has no labels");
    const std::vector<int>& labels = *pg.g->labels;
    ClassifyResult res;

    std::vector<Tensor> trainable;
    if (cfg.freeze_backbone) {
        for (const Tensor& t : {params.cls_w1, params.cls_b1, params.cls_w2, params.cls_b2})
            if (t.defined()) trainable.push_back(t);
    } else {
        trainable = params.all();
    }
    AdamOptimizer opt(trainable, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps,
                      cfg.weight_decay);

    std::vector<Tensor> ps = params.all();
    std::vector<std::vector<double>> best = snapshot_params(ps);
    std::vector<std::vector<double>> last_good = best;
    double best_val = -1.0;
    int since_best = 0;
    for (int epoch = 0; epoch < cfg.epochs_finetune; ++epoch) {
        EpochSample s = sample_for_epoch(pg, params, cfg.tau_end, cfg.seed + 104729 * (epoch + 1),
                                         /*deterministic=*/false, cfg.use_augmentation);
        Tensor z = encode(params, pg.attn_ctx, s.index, pg.x, s.mask, cfg.use_community_attention,
                          cfg.post_ffn_residual);
        Tensor loss = classification_loss(classifier_logits(params, z), labels, sp.train);
        if (!std::isfinite(loss.item())) {
            restore_params(ps, last_good);
            res.diverged = true;
            break;
        }
        last_good = snapshot_params(ps);
        res.train_loss_history.push_back(loss.item());
        opt.zero_grad();
        backward(loss);
        opt.step();
        res.epochs_run = epoch + 1;

        const std::vector<int> preds = predict_all(pg, params, cfg);
        const double val_acc = accuracy(preds, labels, sp.val);
        res.val_acc_history.push_back(val_acc);
        if (val_acc > best_val) {
            best_val = val_acc;
            best = snapshot_params(ps);
            res.best_epoch = epoch;
            since_best = 0;
        } else {
            if (val_acc == best_val) {
                // ties keep the later checkpoint but still count toward patience
                best = snapshot_params(ps);
                res.best_epoch = epoch;
            }
            if (++since_best >= cfg.patience) break;
        }
    }
    restore_params(ps, best);
    res.best_val_accuracy = best_val;
    res.predictions = predict_all(pg, params, cfg);
    res.test_accuracy = accuracy(res.predictions, labels, sp.test);
    if (!sp.test.empty()) res.fairness = fairness_report(res.predictions, labels, degrees(*pg.g), sp.test);
    return res;
}

// ---------------------------------------------------------------------------
// Clustering

struct ClusterResult {
    double conductance_pct = 0.0;
    double modularity_pct = 0.0;
    std::size_t empty_clusters = 0;
    std::vector<int> assignment;
    std::vector<LossBreakdown> ssl_history;
    std::vector<double> joint_loss_history;
    bool diverged = false;
};

inline ClusterResult train_cluster(const PreparedGraph& pg, ModelParams& params,
                                   const TrainConfig& cfg) {
    if (!params.clu_w.defined()) throw std::invalid_argument("train_cluster: no cluster head");
    ClusterResult res;
    ModularityContext mctx = make_modularity_context(*pg.g, pg.a_dense);

    if (cfg.use_pretrain) {
        PretrainResult pre = pretrain(pg, params, cfg);
        res.ssl_history = pre.history;
        res.diverged = pre.diverged;
    }

    std::vector<Tensor> ps = params.all();
    AdamOptimizer opt(ps, cfg.lr, cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay);
    std::vector<std::vector<double>> last_good = snapshot_params(ps);
    for (int epoch = 0; epoch < cfg.epochs_cluster && !res.diverged; ++epoch) {
        EpochSample s = sample_for_epoch(pg, params, cfg.tau_end, cfg.seed + 15485863 * (epoch + 1),
                                         /*deterministic=*/false, cfg.use_augmentation);
        Tensor z = encode(params, pg.attn_ctx, s.index, pg.x, s.mask, cfg.use_community_attention,
                          cfg.post_ffn_residual);
        Tensor l_trans, l_feat, l_bce;
        if (cfg.alpha1 > 0.0 && cfg.beta1 > 0.0)
            l_trans = transition_preservation_loss(pg.log_trans, cosine_rows(z));
        if (cfg.alpha1 > 0.0 && cfg.beta2 > 0.0)
            l_feat = feature_reconstruction_loss(pg.x, reconstruct_features(params, z));
        if (cfg.alpha2 > 0.0 && cfg.use_augmentation && s.aug.soft.defined())
            l_bce = augmentation_bce(pg.a_dense, s.aug.soft);
        SslLoss ssl = total_ssl_loss(l_trans, l_feat, l_bce,
                                     LossWeights{cfg.alpha1, cfg.alpha2, cfg.beta1, cfg.beta2});
        Tensor mod = modularity_loss(mctx, cluster_assignment_soft(params, z));
        Tensor joint = add(ssl.total, scale(mod, cfg.cluster_weight));
        if (!std::isfinite(joint.item())) {
            restore_params(ps, last_good);
            res.diverged = true;
            break;
        }
        last_good = snapshot_params(ps);
        res.joint_loss_history.push_back(joint.item());
        if (joint.requires_grad()) {
            opt.zero_grad();
            backward(joint);
            opt.step();
        }
    }

    {
        NoGrad ng;
        EpochSample s = sample_for_epoch(pg, params, cfg.tau_end, 0, /*deterministic=*/true,
                                         cfg.use_augmentation);
        Tensor z = encode(params, pg.attn_ctx, s.index, pg.x, s.mask, cfg.use_community_attention,
                          cfg.post_ffn_residual);
        Tensor soft = cluster_assignment_soft(params, z);
        res.assignment = row_argmax(soft.values(), soft.rows(), soft.cols());
        const std::size_t m_head = soft.cols();
        std::vector<std::size_t> sizes(m_head, 0);
        for (int a : res.assignment) sizes[a]++;
        for (std::size_t c = 0; c < m_head; ++c)
            if (sizes[c] == 0) res.empty_clusters++;
        if (res.empty_clusters > 0)
            std::cerr << "train_cluster: " << res.empty_clusters << " empty cluster(s) in final assignment\n";
        res.modularity_pct = 100.0 * modularity_metric(*pg.g, res.assignment, m_head);
        res.conductance_pct = 100.0 * conductance_metric(*pg.g, res.assignment, m_head);
    }
    return res;
}

}  // namespace cgt
