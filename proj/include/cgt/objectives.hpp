#pragma once

// Self-supervised losses (transition preservation, feature reconstruction,
// augmentation BCE), the downstream heads, cross-entropy classification, and
// the soft modularity clustering loss with its collapse regularizer.

#include <cgt/graph.hpp>
#include <cgt/model.hpp>
#include <cgt/tensor.hpp>

#include <cmath>
#include <memory>
#include <stdexcept>
#include <vector>

namespace cgt {

inline Tensor cosine_similarity_matrix(const Tensor& z) { return cosine_rows(z); }

/// sum_p ||M^(p) - Z*||_F^2 / n^2 against fixed log-transition targets.
inline Tensor transition_preservation_loss(const std::shared_ptr<const LogTransitionSet>& ms,
                                           const Tensor& zstar) {
    const std::size_t n = ms->n;
    if (zstar.rows() != n || zstar.cols() != n)
        throw std::invalid_argument("transition_preservation_loss: Z* shape " + shape_str(zstar.shape()) +
                                    " vs targets " + std::to_string(n));
    const double inv_n2 = 1.0 / static_cast<double>(n * n);
    double loss = 0.0;
    for (const auto& m : ms->mats) {
#pragma omp parallel for schedule(static) reduction(+ : loss) if (n > 256)
        for (std::size_t i = 0; i < n * n; ++i) {
            const double diff = m[i] - zstar.values()[i];
            loss += diff * diff;
        }
    }
    loss *= inv_n2;
    return make_op({1}, {loss}, {zstar}, [ms, n, inv_n2](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = o.grad[0] * 2.0 * inv_n2;
        for (const auto& m : ms->mats) {
#pragma omp parallel for schedule(static) if (n > 256)
            for (std::size_t i = 0; i < n * n; ++i) p->grad[i] += g * (p->values[i] - m[i]);
        }
    });
}

inline Tensor transition_preservation_loss(const LogTransitionSet& ms, const Tensor& zstar) {
    return transition_preservation_loss(std::make_shared<const LogTransitionSet>(ms), zstar);
}

/// (1/n) * Frobenius norm of X - Xhat.
inline Tensor feature_reconstruction_loss(const Tensor& x, const Tensor& xhat) {
    require_same_shape(x, xhat, "feature_reconstruction_loss");
    const double inv_n = 1.0 / static_cast<double>(x.rows());
    return scale(sqrt_guarded(frobenius_sq(sub(x, xhat))), inv_n);
}

/// Binary cross-entropy of the relaxed sample against the original adjacency,
/// averaged over all ordered pairs (diagonal included as 0-targets). The log
/// argument is clamped to <= 1 so a perfect match scores exactly zero.
inline Tensor augmentation_bce(const std::shared_ptr<const std::vector<double>>& a_dense,
                               const Tensor& soft, double eps = 1e-7) {
    const std::size_t total = soft.numel();
    if (a_dense->size() != total)
        throw std::invalid_argument("augmentation_bce: adjacency/sample size mismatch");
    const double inv = 1.0 / static_cast<double>(total);
    double loss = 0.0;
#pragma omp parallel for schedule(static) reduction(+ : loss) if (total > 65536)
    for (std::size_t i = 0; i < total; ++i) {
        const double a = (*a_dense)[i];
        const double s = soft.values()[i];
        loss -= a * std::log(std::min(s + eps, 1.0)) + (1.0 - a) * std::log(std::min(1.0 - s + eps, 1.0));
    }
    loss *= inv;
    return make_op({1}, {loss}, {soft}, [a_dense, total, inv, eps](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = o.grad[0] * inv;
#pragma omp parallel for schedule(static) if (total > 65536)
        for (std::size_t i = 0; i < total; ++i) {
            const double a = (*a_dense)[i];
            const double s = p->values[i];
            double d = 0.0;
            if (s + eps < 1.0) d -= a / (s + eps);
            if (1.0 - s + eps < 1.0) d += (1.0 - a) / (1.0 - s + eps);
            p->grad[i] += g * d;
        }
    });
}

struct LossWeights {
    double alpha1 = 1.0;
    double alpha2 = 0.5;
    double beta1 = 1.0;
    double beta2 = 0.5;
};

struct LossBreakdown {
    double l1_transition = 0.0;
    double l1_feature = 0.0;
    double l2_bce = 0.0;
    double total = 0.0;
    LossWeights weights;
};

struct SslLoss {
    Tensor total;  // scalar on the tape
    LossBreakdown breakdown;
};

/// L = alpha1 (beta1 L_trans + beta2 L_feat) + alpha2 L_bce. Undefined
/// components count as zero (e.g. no BCE when augmentation is off).
inline SslLoss total_ssl_loss(const Tensor& transition, const Tensor& feature, const Tensor& bce,
                              const LossWeights& w) {
    if (w.alpha1 < 0 || w.alpha2 < 0 || w.beta1 < 0 || w.beta2 < 0)
        throw std::invalid_argument("total_ssl_loss: weights must be non-negative");
    SslLoss out;
    out.breakdown.weights = w;
    Tensor acc;
    auto add_term = [&acc](const Tensor& t, double c) {
        if (!t.defined() || c == 0.0) return;  // zero weight contributes no gradient
        Tensor term = scale(t, c);
        acc = acc.defined() ? add(acc, term) : term;
    };
    add_term(transition, w.alpha1 * w.beta1);
    add_term(feature, w.alpha1 * w.beta2);
    add_term(bce, w.alpha2);
    out.total = acc.defined() ? acc : Tensor::scalar(0.0);
    out.breakdown.l1_transition = transition.defined() ? transition.item() : 0.0;
    out.breakdown.l1_feature = feature.defined() ? feature.item() : 0.0;
    out.breakdown.l2_bce = bce.defined() ? bce.item() : 0.0;
    out.breakdown.total = out.total.item();
    return out;
}

/// Mean cross-entropy of the logit rows selected by `indices`.
inline Tensor classification_loss(const Tensor& logits, const std::vector<int>& labels,
                                  const std::vector<int>& indices) {
    require_rank2(logits, "classification_loss");
    if (indices.empty()) throw std::invalid_argument("classification_loss: empty index set");
    const std::size_t c = logits.cols();
    for (int i : indices) {
        if (i < 0 || static_cast<std::size_t>(i) >= logits.rows())
            throw std::invalid_argument("classification_loss: index out of range");
        if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c)
            throw std::invalid_argument("classification_loss: label out of range");
    }
    const double inv = 1.0 / static_cast<double>(indices.size());
    double loss = 0.0;
    for (int i : indices) {
        const double* row = logits.values().data() + static_cast<std::size_t>(i) * c;
        double mx = row[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
        loss += (std::log(z) + mx) - row[labels[i]];
    }
    loss *= inv;
    auto idx = std::make_shared<std::vector<int>>(indices);
    auto labs = std::make_shared<std::vector<int>>(labels);
    return make_op({1}, {loss}, {logits}, [idx, labs, c, inv](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = o.grad[0] * inv;
        for (int i : *idx) {
            const double* row = p->values.data() + static_cast<std::size_t>(i) * c;
            double* grow = p->grad.data() + static_cast<std::size_t>(i) * c;
            double mx = row[0];
            for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            double z = 0.0;
            for (std::size_t j = 0; j < c; ++j) z += std::exp(row[j] - mx);
            for (std::size_t j = 0; j < c; ++j) {
                double soft = std::exp(row[j] - mx) / z;
                grow[j] += g * (soft - (static_cast<std::size_t>((*labs)[i]) == j ? 1.0 : 0.0));
            }
        }
    });
}

/// Structural constants for the modularity loss.
struct ModularityContext {
    std::shared_ptr<const std::vector<double>> a_dense;  // n x n
    std::vector<double> deg;                             // n, as doubles
    std::size_t n = 0;
    double m = 0.0;  // edge count
};

inline ModularityContext make_modularity_context(const Graph& g,
                                                 std::shared_ptr<const std::vector<double>> a_dense) {
    ModularityContext ctx;
    ctx.a_dense = std::move(a_dense);
    ctx.n = g.n;
    ctx.m = static_cast<double>(g.num_edges());
    for (int d : degrees(g)) ctx.deg.push_back(static_cast<double>(d));
    return ctx;
}

/// -(1/2m) tr(C^T (A - d d^T / 2m) C) + (sqrt(M)/n) ||colsum(C)|| - 1.
inline Tensor modularity_loss(const ModularityContext& ctx, const Tensor& c_soft) {
    require_rank2(c_soft, "modularity_loss");
    if (ctx.m <= 0.0) throw std::invalid_argument("modularity_loss: graph has no edges");
    const std::size_t n = ctx.n, mclus = c_soft.cols();
    if (c_soft.rows() != n) throw std::invalid_argument("modularity_loss: assignment rows != n");
    const double two_m = 2.0 * ctx.m;

    auto ac = std::make_shared<std::vector<double>>(n * mclus);
    gemm(ctx.a_dense->data(), n, n, false, c_soft.values().data(), n, mclus, false, ac->data());
    std::vector<double> dc(mclus, 0.0), colsum(mclus, 0.0);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t k = 0; k < mclus; ++k) {
            dc[k] += ctx.deg[i] * c_soft.values()[i * mclus + k];
            colsum[k] += c_soft.values()[i * mclus + k];
        }
    double trace = 0.0;
    for (std::size_t i = 0; i < n * mclus; ++i) trace += c_soft.values()[i] * (*ac)[i];
    double dterm = 0.0;
    for (std::size_t k = 0; k < mclus; ++k) dterm += dc[k] * dc[k];
    const double mod_term = -(trace - dterm / two_m) / two_m;
    double csnorm = 0.0;
    for (double v : colsum) csnorm += v * v;
    csnorm = std::sqrt(csnorm);
    const double reg_scale = std::sqrt(static_cast<double>(mclus)) / static_cast<double>(n);
    const double loss = mod_term + reg_scale * csnorm - 1.0;

    auto deg = std::make_shared<std::vector<double>>(ctx.deg);
    auto dcv = std::make_shared<std::vector<double>>(dc);
    auto csv = std::make_shared<std::vector<double>>(colsum);
    return make_op({1}, {loss}, {c_soft},
                   [ac, deg, dcv, csv, n, mclus, two_m, reg_scale, csnorm](TensorNode& o) {
                       auto& p = o.parents[0];
                       if (!p->requires_grad) return;
                       p->ensure_grad();
                       const double g = o.grad[0];
                       const double inv_norm = 1.0 / std::max(csnorm, 1e-12);
                       for (std::size_t i = 0; i < n; ++i)
                           for (std::size_t k = 0; k < mclus; ++k) {
                               const double mod_g =
                                   -((*ac)[i * mclus + k] - (*deg)[i] * (*dcv)[k] / two_m) * 2.0 / two_m;
                               const double reg_g = reg_scale * (*csv)[k] * inv_norm;
                               p->grad[i * mclus + k] += g * (mod_g + reg_g);
                           }
                   });
}

// ---------------------------------------------------------------------------
// Heads

inline Tensor reconstruct_features(const ModelParams& p, const Tensor& z) {
    return add_bias(matmul(z, p.recon_w, false, true), p.recon_b);
}

inline Tensor classifier_logits(const ModelParams& p, const Tensor& z) {
    Tensor h = relu(add_bias(matmul(z, p.cls_w1, false, true), p.cls_b1));
    return add_bias(matmul(h, p.cls_w2, false, true), p.cls_b2);
}

inline Tensor cluster_assignment_soft(const ModelParams& p, const Tensor& z) {
    return row_softmax(add_bias(matmul(z, p.clu_w, false, true), p.clu_b));
}

}  // namespace cgt
