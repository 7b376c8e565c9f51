#pragma once

// Community-aware graph transformer: input projection, multi-scale Jaccard
// proximity, degree-role bias, masked multi-head attention over the augmented
// adjacency, and the FFN block. Attention scores fold the pairwise proximity
// terms into a rank-K factorization so no n x n x d intermediate is ever built.

#include <cgt/augmentation.hpp>
#include <cgt/graph.hpp>
#include <cgt/tensor.hpp>

#include <cmath>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <vector>

namespace cgt {

// ---------------------------------------------------------------------------
// Multi-scale proximity

struct ProximityTensor {
    std::size_t n = 0;
    std::size_t scales = 0;
    std::vector<std::vector<double>> sims;  // sims[k-1] is n x n

    double at(std::size_t k, std::size_t i, std::size_t j) const { return sims[k][i * n + j]; }
};

/// Jaccard similarity of self-inclusive k-hop neighborhoods for k = 1..K.
/// Isolated nodes contribute empty sets, so their rows (diagonal included)
/// are zero by the 0/0 := 0 rule.
inline ProximityTensor multiscale_proximity(const Graph& g, int K) {
    if (K < 1) throw std::invalid_argument("multiscale_proximity: K must be >= 1");
    const std::size_t n = g.n;
    const std::size_t words = (n + 63) / 64;
    ProximityTensor out;
    out.n = n;
    out.scales = static_cast<std::size_t>(K);

    std::vector<std::uint64_t> reach(n * words, 0);
    for (std::size_t v = 0; v < n; ++v)
        if (!g.adj[v].empty()) reach[v * words + v / 64] |= (std::uint64_t{1} << (v % 64));

    std::vector<std::uint64_t> next(n * words);
    for (int k = 1; k <= K; ++k) {
        next = reach;
#pragma omp parallel for schedule(static)
        for (std::size_t v = 0; v < n; ++v) {
            std::uint64_t* dst = next.data() + v * words;
            for (int u : g.adj[v]) {
                const std::uint64_t* src = reach.data() + static_cast<std::size_t>(u) * words;
                for (std::size_t w = 0; w < words; ++w) dst[w] |= src[w];
            }
        }
        reach.swap(next);

        std::vector<int> counts(n, 0);
        for (std::size_t v = 0; v < n; ++v) {
            int c = 0;
            for (std::size_t w = 0; w < words; ++w) c += __builtin_popcountll(reach[v * words + w]);
            counts[v] = c;
        }
        std::vector<double> sim(n * n, 0.0);
#pragma omp parallel for schedule(dynamic, 16)
        for (std::size_t i = 0; i < n; ++i) {
            const std::uint64_t* ri = reach.data() + i * words;
            if (counts[i] == 0) continue;
            sim[i * n + i] = 1.0;
            for (std::size_t j = i + 1; j < n; ++j) {
                if (counts[j] == 0) continue;
                const std::uint64_t* rj = reach.data() + j * words;
                int inter = 0;
                for (std::size_t w = 0; w < words; ++w) inter += __builtin_popcountll(ri[w] & rj[w]);
                const int uni = counts[i] + counts[j] - inter;
                const double s = uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
                sim[i * n + j] = s;
                sim[j * n + i] = s;
            }
        }
        out.sims.push_back(std::move(sim));
    }
    return out;
}

/// Per-pair proximity embedding s_ij = F sim_ij + b (affine K -> d).
inline Tensor proximity_encode(const Tensor& f_w, const Tensor& f_b, const Tensor& sim_vec) {
    return add(matvec(f_w, sim_vec), f_b);
}

/// phi = w * D + b as a dense matrix op (the attention kernel folds this in;
/// this standalone form exists for direct inspection).
inline Tensor degree_role_bias(const Tensor& wphi, const Tensor& bphi,
                               const std::shared_ptr<const std::vector<double>>& d_bias, std::size_t n) {
    const double w = wphi.item(), b = bphi.item();
    std::vector<double> out(n * n);
    for (std::size_t i = 0; i < n * n; ++i) out[i] = w * (*d_bias)[i] + b;
    return make_op({n, n}, std::move(out), {wphi, bphi}, [d_bias, n](TensorNode& o) {
        double gw = 0.0, gb = 0.0;
        for (std::size_t i = 0; i < n * n; ++i) {
            gw += o.grad[i] * (*d_bias)[i];
            gb += o.grad[i];
        }
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            o.parents[0]->grad[0] += gw;
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            o.parents[1]->grad[0] += gb;
        }
    });
}

// ---------------------------------------------------------------------------
// Parameters

struct ModelDims {
    std::size_t d0 = 0;      // input feature width
    std::size_t d = 64;      // hidden width
    std::size_t heads = 4;
    std::size_t layers = 2;
    std::size_t scales = 3;  // proximity scales K
    std::size_t head_dim() const {
        if (d % heads != 0)
            throw std::invalid_argument("model: hidden width " + std::to_string(d) +
                                        " not divisible by " + std::to_string(heads) + " heads");
        return d / heads;
    }
};

struct HeadParams {
    Tensor wq_n, ws_q, wk_n, ws_k, v;  // each head_dim x d
    Tensor wphi, bphi;                 // scalar role-bias affine
};

struct LayerParams {
    std::vector<HeadParams> heads;
    Tensor o_h;               // d x d output projection
    Tensor f_w, f_b;          // proximity projection, d x K and d
    Tensor ffn_w1, ffn_w2;    // 2d x d and d x 2d
    Tensor ln1_g, ln1_b;      // pre-FFN layer norm affine
    Tensor ln2_g, ln2_b;      // post-FFN variant only
};

struct ModelParams {
    ModelDims dims;
    Tensor w0, b0;  // input projection d x d0, d
    std::vector<LayerParams> layers;
    Tensor recon_w, recon_b;                 // reconstruction head d0 x d, d0
    Tensor cls_w1, cls_b1, cls_w2, cls_b2;   // classifier stack d->d->classes
    Tensor clu_w, clu_b;                     // cluster head m_head x d, m_head
    Tensor theta;                            // augmentation logit offsets (optional)

    std::vector<Tensor> all() const {
        std::vector<Tensor> ps = {w0, b0};
        for (const auto& l : layers) {
            for (const auto& h : l.heads) {
                ps.insert(ps.end(), {h.wq_n, h.ws_q, h.wk_n, h.ws_k, h.v, h.wphi, h.bphi});
            }
            ps.insert(ps.end(), {l.o_h, l.f_w, l.f_b, l.ffn_w1, l.ffn_w2, l.ln1_g, l.ln1_b, l.ln2_g, l.ln2_b});
        }
        for (const Tensor& t : {recon_w, recon_b, cls_w1, cls_b1, cls_w2, cls_b2, clu_w, clu_b, theta})
            if (t.defined()) ps.push_back(t);
        return ps;
    }
};

inline ModelParams init_model_params(const ModelDims& dims, std::size_t num_classes,
                                     std::size_t m_head, std::size_t theta_count, Rng& rng) {
    const std::size_t d = dims.d, dk = dims.head_dim(), K = dims.scales;
    ModelParams p;
    p.dims = dims;
    p.w0 = init_weight(d, dims.d0, rng);
    p.b0 = init_bias(d);
    for (std::size_t l = 0; l < dims.layers; ++l) {
        LayerParams lp;
        for (std::size_t h = 0; h < dims.heads; ++h) {
            HeadParams hp;
            hp.wq_n = init_weight(dk, d, rng);
            hp.ws_q = init_weight(dk, d, rng);
            hp.wk_n = init_weight(dk, d, rng);
            hp.ws_k = init_weight(dk, d, rng);
            hp.v = init_weight(dk, d, rng);
            hp.wphi = Tensor::from({1}, {1.0}, true);
            hp.bphi = Tensor::from({1}, {0.0}, true);
            lp.heads.push_back(std::move(hp));
        }
        lp.o_h = init_weight(d, d, rng);
        lp.f_w = init_weight(d, K, rng);
        lp.f_b = init_bias(d);
        lp.ffn_w1 = init_weight(2 * d, d, rng);
        lp.ffn_w2 = init_weight(d, 2 * d, rng);
        lp.ln1_g = Tensor::from({d}, std::vector<double>(d, 1.0), true);
        lp.ln1_b = init_bias(d);
        lp.ln2_g = Tensor::from({d}, std::vector<double>(d, 1.0), true);
        lp.ln2_b = init_bias(d);
        p.layers.push_back(std::move(lp));
    }
    p.recon_w = init_weight(dims.d0, d, rng);
    p.recon_b = init_bias(dims.d0);
    if (num_classes > 0) {
        p.cls_w1 = init_weight(d, d, rng);
        p.cls_b1 = init_bias(d);
        p.cls_w2 = init_weight(num_classes, d, rng);
        p.cls_b2 = init_bias(num_classes);
    }
    if (m_head > 0) {
        p.clu_w = init_weight(m_head, d, rng);
        p.clu_b = init_bias(m_head);
    }
    if (theta_count > 0) p.theta = Tensor::zeros({theta_count}, true);
    return p;
}

// ---------------------------------------------------------------------------
// Fused attention

/// Structural constants shared by every layer and head.
struct AttentionContext {
    std::size_t n = 0;
    std::size_t scales = 0;
    std::shared_ptr<const ProximityTensor> prox;
    std::shared_ptr<const std::vector<double>> d_bias;  // n x n degree-bias matrix
};

/// Masked attention weights for one head. Scores follow
///   a_ij = <Wq h_i + Ws^Q s_ij, Wk h_j + Ws^K s_ij>/sqrt(dk) + phi_ij
/// with s_ij = F sim_ij + f_b folded in as Gq = Ws^Q F, cq = Ws^Q f_b (and the
/// K-side analogues), so the pair term reduces to rank-K row/column mixes plus
/// a K x K quadratic form. The 0/1 mask acts as a multiplicative gate inside
/// the softmax and receives gradients, which is what lets task losses reach
/// the augmentation offsets through the straight-through hard sample.
inline Tensor community_attention_weights(const AttentionContext& ctx, const Tensor& qn,
                                          const Tensor& kn, const Tensor& mask, const Tensor& gq,
                                          const Tensor& gk, const Tensor& cq, const Tensor& ck,
                                          const Tensor& wphi, const Tensor& bphi, bool community) {
    const std::size_t n = ctx.n;
    const std::size_t dk = qn.cols();
    const std::size_t K = ctx.scales;
    if (qn.rows() != n || kn.rows() != n || kn.cols() != dk)
        throw std::invalid_argument("attention: projection shape mismatch " + shape_str(qn.shape()) +
                                    " vs " + shape_str(kn.shape()));
    if (mask.rows() != n || mask.cols() != n)
        throw std::invalid_argument("attention: mask shape " + shape_str(mask.shape()));
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));

    auto alpha = std::make_shared<std::vector<double>>(n * n);
    gemm(qn.values().data(), n, dk, false, kn.values().data(), n, dk, true, alpha->data());

    std::vector<double> rmat, cmat, mq, rho, evec, fvec;
    double g0 = 0.0, wphi_v = 0.0, bphi_v = 0.0;
    if (community) {
        rmat.resize(n * K);
        cmat.resize(n * K);
        mq.resize(K * K);
        rho.resize(K);
        evec.resize(n);
        fvec.resize(n);
        gemm(qn.values().data(), n, dk, false, gk.values().data(), dk, K, false, rmat.data());
        gemm(kn.values().data(), n, dk, false, gq.values().data(), dk, K, false, cmat.data());
        gemm(gq.values().data(), dk, K, true, gk.values().data(), dk, K, false, mq.data());
        for (std::size_t k = 0; k < K; ++k) {
            double s = 0.0;
            for (std::size_t t = 0; t < dk; ++t)
                s += gq.values()[t * K + k] * ck.values()[t] + gk.values()[t * K + k] * cq.values()[t];
            rho[k] = s;
        }
        for (std::size_t i = 0; i < n; ++i) {
            double e = 0.0, f = 0.0;
            for (std::size_t t = 0; t < dk; ++t) {
                e += qn.values()[i * dk + t] * ck.values()[t];
                f += kn.values()[i * dk + t] * cq.values()[t];
            }
            evec[i] = e;
            fvec[i] = f;
        }
        for (std::size_t t = 0; t < dk; ++t) g0 += cq.values()[t] * ck.values()[t];
        wphi_v = wphi.item();
        bphi_v = bphi.item();
    }

    const std::vector<double>* sims = community ? ctx.prox->sims.data() : nullptr;
    const double* dbias = community ? ctx.d_bias->data() : nullptr;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        double* arow = alpha->data() + i * n;
        if (community) {
            for (std::size_t j = 0; j < n; ++j) {
                double v = arow[j] + evec[i] + fvec[j] + g0;
                for (std::size_t k = 0; k < K; ++k) {
                    const double s = sims[k][i * n + j];
                    v += s * (rmat[i * K + k] + cmat[j * K + k] + rho[k]);
                    for (std::size_t l = 0; l < K; ++l) v += mq[k * K + l] * s * sims[l][i * n + j];
                }
                arow[j] = v * inv_sqrt_dk + wphi_v * dbias[i * n + j] + bphi_v;
            }
        } else {
            for (std::size_t j = 0; j < n; ++j) arow[j] *= inv_sqrt_dk;
        }
    }

    // masked softmax rows
    std::vector<double> out(n * n, 0.0);
    int empty_row = 0;
#pragma omp parallel for schedule(static)
    for (std::size_t i = 0; i < n; ++i) {
        const double* arow = alpha->data() + i * n;
        const double* mrow = mask.values().data() + i * n;
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t j = 0; j < n; ++j)
            if (mrow[j] > 0.0) mx = std::max(mx, arow[j]);
        if (!std::isfinite(mx)) {
#pragma omp atomic write
            empty_row = 1;
            continue;
        }
        double z = 0.0;
        double* orow = out.data() + i * n;
        for (std::size_t j = 0; j < n; ++j)
            if (mrow[j] > 0.0) {
                orow[j] = mrow[j] * std::exp(arow[j] - mx);
                z += orow[j];
            }
        const double inv_z = 1.0 / z;
        for (std::size_t j = 0; j < n; ++j) orow[j] *= inv_z;
    }
    if (empty_row)
        throw std::logic_error("attention: some node has an empty attention set (mask must include self)");

    std::vector<Tensor> inputs = {qn, kn, mask};
    if (community) inputs.insert(inputs.end(), {gq, gk, cq, ck, wphi, bphi});
    auto prox = ctx.prox;
    auto dbias_ptr = ctx.d_bias;
    return make_op({n, n}, std::move(out), std::move(inputs),
                   [n, dk, K, inv_sqrt_dk, community, alpha, prox, dbias_ptr](TensorNode& o) {
        auto p_qn = o.parents[0];
        auto p_kn = o.parents[1];
        auto p_mask = o.parents[2];
        std::shared_ptr<TensorNode> p_gq, p_gk, p_cq, p_ck, p_wphi, p_bphi;
        if (community) {
            p_gq = o.parents[3];
            p_gk = o.parents[4];
            p_cq = o.parents[5];
            p_ck = o.parents[6];
            p_wphi = o.parents[7];
            p_bphi = o.parents[8];
        }
        const bool need_mask_grad = p_mask->requires_grad;
        const std::vector<double>* sims = community ? prox->sims.data() : nullptr;
        const double* dbias = community ? dbias_ptr->data() : nullptr;

        // softmax backward: ga_ij = p_ij (g_ij - dot_i) on gated entries,
        // gm_ij = (E_ij / Z_i)(g_ij - dot_i) everywhere (E from saved scores)
        std::vector<double> ga(n * n, 0.0);
        if (need_mask_grad) p_mask->ensure_grad();
#pragma omp parallel for schedule(static)
        for (std::size_t i = 0; i < n; ++i) {
            const double* prow = o.values.data() + i * n;
            const double* grow = o.grad.data() + i * n;
            const double* mrow = p_mask->values.data() + i * n;
            const double* arow = alpha->data() + i * n;
            double dot = 0.0;
            for (std::size_t j = 0; j < n; ++j) dot += prow[j] * grow[j];
            double* garow = ga.data() + i * n;
            for (std::size_t j = 0; j < n; ++j) garow[j] = prow[j] * (grow[j] - dot);
            if (need_mask_grad) {
                double mx = -std::numeric_limits<double>::infinity();
                for (std::size_t j = 0; j < n; ++j)
                    if (mrow[j] > 0.0) mx = std::max(mx, arow[j]);
                double z = 0.0;
                for (std::size_t j = 0; j < n; ++j)
                    if (mrow[j] > 0.0) z += mrow[j] * std::exp(arow[j] - mx);
                double* gmrow = p_mask->grad.data() + i * n;
                for (std::size_t j = 0; j < n; ++j) {
                    const double e = std::exp(std::min(arow[j] - mx, 500.0));
                    gmrow[j] += (e / z) * (grow[j] - dot);
                }
            }
        }

        // content gradients (scores scale 1/sqrt(dk); phi terms use raw ga)
        if (p_qn->requires_grad) {
            p_qn->ensure_grad();
            gemm(ga.data(), n, n, false, p_kn->values.data(), n, dk, false, p_qn->grad.data(),
                 inv_sqrt_dk, 1.0);
        }
        if (p_kn->requires_grad) {
            p_kn->ensure_grad();
            gemm(ga.data(), n, n, true, p_qn->values.data(), n, dk, false, p_kn->grad.data(),
                 inv_sqrt_dk, 1.0);
        }
        if (!community) return;

        const int nthreads = omp_get_max_threads();
        std::vector<double> grmat(n * K, 0.0), gcmat_tls(static_cast<std::size_t>(nthreads) * n * K, 0.0);
        std::vector<double> gmq_tls(static_cast<std::size_t>(nthreads) * K * K, 0.0);
        std::vector<double> gevec(n, 0.0), gfvec_tls(static_cast<std::size_t>(nthreads) * n, 0.0);
        std::vector<double> scal_tls(static_cast<std::size_t>(nthreads) * 2, 0.0);  // gwphi, gbphi
#pragma omp parallel
        {
            const int tid = omp_get_thread_num();
            double* gcmat = gcmat_tls.data() + static_cast<std::size_t>(tid) * n * K;
            double* gmq = gmq_tls.data() + static_cast<std::size_t>(tid) * K * K;
            double* gfvec = gfvec_tls.data() + static_cast<std::size_t>(tid) * n;
            double* scal = scal_tls.data() + static_cast<std::size_t>(tid) * 2;
#pragma omp for schedule(static)
            for (std::size_t i = 0; i < n; ++i) {
                const double* garow = ga.data() + i * n;
                double gei = 0.0;
                for (std::size_t j = 0; j < n; ++j) {
                    const double w = garow[j] * inv_sqrt_dk;
                    if (w != 0.0) {
                        gei += w;
                        gfvec[j] += w;
                        for (std::size_t k = 0; k < K; ++k) {
                            const double s = sims[k][i * n + j];
                            grmat[i * K + k] += w * s;
                            gcmat[j * K + k] += w * s;
                            for (std::size_t l = 0; l < K; ++l) gmq[k * K + l] += w * s * sims[l][i * n + j];
                        }
                        scal[0] += garow[j] * dbias[i * n + j];
                        scal[1] += garow[j];
                    }
                }
                gevec[i] = gei;
            }
        }
        std::vector<double> gcmat(n * K, 0.0), gmq(K * K, 0.0), gfvec(n, 0.0);
        double gwphi = 0.0, gbphi = 0.0;
        for (int t = 0; t < nthreads; ++t) {
            for (std::size_t i = 0; i < n * K; ++i) gcmat[i] += gcmat_tls[t * n * K + i];
            for (std::size_t i = 0; i < K * K; ++i) gmq[i] += gmq_tls[t * K * K + i];
            for (std::size_t i = 0; i < n; ++i) gfvec[i] += gfvec_tls[t * n + i];
            gwphi += scal_tls[t * 2];
            gbphi += scal_tls[t * 2 + 1];
        }
        std::vector<double> grho(K, 0.0);
        double gg0 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            gg0 += gevec[i];
            for (std::size_t k = 0; k < K; ++k) grho[k] += grmat[i * K + k];
        }

        if (p_qn->requires_grad) {
            gemm(grmat.data(), n, K, false, p_gk->values.data(), dk, K, true, p_qn->grad.data(), 1.0, 1.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_qn->grad[i * dk + t] += gevec[i] * p_ck->values[t];
        }
        if (p_kn->requires_grad) {
            gemm(gcmat.data(), n, K, false, p_gq->values.data(), dk, K, true, p_kn->grad.data(), 1.0, 1.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_kn->grad[i * dk + t] += gfvec[i] * p_cq->values[t];
        }
        if (p_gq->requires_grad) {
            p_gq->ensure_grad();
            gemm(p_kn->values.data(), n, dk, true, gcmat.data(), n, K, false, p_gq->grad.data(), 1.0, 1.0);
            gemm(p_gk->values.data(), dk, K, false, gmq.data(), K, K, true, p_gq->grad.data(), 1.0, 1.0);
            for (std::size_t t = 0; t < dk; ++t)
                for (std::size_t k = 0; k < K; ++k) p_gq->grad[t * K + k] += p_ck->values[t] * grho[k];
        }
        if (p_gk->requires_grad) {
            p_gk->ensure_grad();
            gemm(p_qn->values.data(), n, dk, true, grmat.data(), n, K, false, p_gk->grad.data(), 1.0, 1.0);
            gemm(p_gq->values.data(), dk, K, false, gmq.data(), K, K, false, p_gk->grad.data(), 1.0, 1.0);
            for (std::size_t t = 0; t < dk; ++t)
                for (std::size_t k = 0; k < K; ++k) p_gk->grad[t * K + k] += p_cq->values[t] * grho[k];
        }
        if (p_cq->requires_grad) {
            p_cq->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_cq->grad[t] += p_kn->values[i * dk + t] * gfvec[i];
            for (std::size_t t = 0; t < dk; ++t) {
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += p_gk->values[t * K + k] * grho[k];
                p_cq->grad[t] += s + gg0 * p_ck->values[t];
            }
        }
        if (p_ck->requires_grad) {
            p_ck->ensure_grad();
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_ck->grad[t] += p_qn->values[i * dk + t] * gevec[i];
            for (std::size_t t = 0; t < dk; ++t) {
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += p_gq->values[t * K + k] * grho[k];
                p_ck->grad[t] += s + gg0 * p_cq->values[t];
            }
        }
        if (p_wphi->requires_grad) {
            p_wphi->ensure_grad();
            p_wphi->grad[0] += gwphi;
        }
        if (p_bphi->requires_grad) {
            p_bphi->ensure_grad();
            p_bphi->grad[0] += gbphi;
        }
    });
}

// ---------------------------------------------------------------------------
// Sparse-support attention

/// Column index over which one epoch's attention work happens: the union of
/// the mask support (gated softmax entries) and the sampler's candidate pairs
/// (entries whose mask gradient can actually reach a trainable offset).
/// Scores are only ever evaluated here; everything else is exactly zero.
struct AttentionIndex {
    std::size_t n = 0;
    std::vector<std::size_t> row_ptr;  // n + 1
    std::vector<int> cols;
    std::vector<char> in_support;      // mask > 0 at this entry
    std::size_t nnz() const { return cols.size(); }
};

inline std::shared_ptr<const AttentionIndex> build_attention_index(
    const std::vector<double>& mask_values, std::size_t n,
    const std::vector<std::pair<int, int>>& candidates) {
    auto idx = std::make_shared<AttentionIndex>();
    idx->n = n;
    std::vector<std::vector<int>> extra(n);
    for (auto [i, j] : candidates) {
        if (mask_values[static_cast<std::size_t>(i) * n + j] <= 0.0) extra[i].push_back(j);
        if (mask_values[static_cast<std::size_t>(j) * n + i] <= 0.0) extra[j].push_back(i);
    }
    idx->row_ptr.assign(n + 1, 0);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t count = extra[i].size();
        const double* mrow = mask_values.data() + i * n;
        for (std::size_t j = 0; j < n; ++j)
            if (mrow[j] > 0.0) count++;
        idx->row_ptr[i + 1] = idx->row_ptr[i] + count;
    }
    idx->cols.resize(idx->row_ptr[n]);
    idx->in_support.resize(idx->row_ptr[n]);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t at = idx->row_ptr[i];
        const double* mrow = mask_values.data() + i * n;
        for (std::size_t j = 0; j < n; ++j)
            if (mrow[j] > 0.0) {
                idx->cols[at] = static_cast<int>(j);
                idx->in_support[at] = 1;
                ++at;
            }
        for (int j : extra[i]) {
            idx->cols[at] = j;
            idx->in_support[at] = 0;
            ++at;
        }
    }
    return idx;
}

/// One attention head fused end to end: scores on the index, gated softmax
/// over the support, and the weighted value aggregation, returning the n x dk
/// head output. Mathematically identical to applying
/// community_attention_weights and multiplying by vh; cost is O(nnz) not
/// O(n^2).
inline Tensor masked_attention_head(const AttentionContext& ctx,
                                    const std::shared_ptr<const AttentionIndex>& idx,
                                    const Tensor& qn, const Tensor& kn, const Tensor& vh,
                                    const Tensor& mask, const Tensor& gq, const Tensor& gk,
                                    const Tensor& cq, const Tensor& ck, const Tensor& wphi,
                                    const Tensor& bphi, bool community) {
    const std::size_t n = ctx.n;
    const std::size_t dk = qn.cols();
    const std::size_t K = ctx.scales;
    if (qn.rows() != n || kn.rows() != n || vh.rows() != n || vh.cols() != dk)
        throw std::invalid_argument("attention: projection shapes disagree");
    const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
    const std::size_t nnz = idx->nnz();

    // factorized pair-term coefficients (see community_attention_weights)
    std::vector<double> rmat, cmat, mq, rho, evec, fvec;
    double g0 = 0.0, wphi_v = 0.0, bphi_v = 0.0;
    if (community) {
        rmat.resize(n * K);
        cmat.resize(n * K);
        mq.resize(K * K);
        rho.resize(K);
        evec.resize(n);
        fvec.resize(n);
        gemm(qn.values().data(), n, dk, false, gk.values().data(), dk, K, false, rmat.data());
        gemm(kn.values().data(), n, dk, false, gq.values().data(), dk, K, false, cmat.data());
        gemm(gq.values().data(), dk, K, true, gk.values().data(), dk, K, false, mq.data());
        for (std::size_t k = 0; k < K; ++k) {
            double s = 0.0;
            for (std::size_t t = 0; t < dk; ++t)
                s += gq.values()[t * K + k] * ck.values()[t] + gk.values()[t * K + k] * cq.values()[t];
            rho[k] = s;
        }
        for (std::size_t i = 0; i < n; ++i) {
            double e = 0.0, f = 0.0;
            for (std::size_t t = 0; t < dk; ++t) {
                e += qn.values()[i * dk + t] * ck.values()[t];
                f += kn.values()[i * dk + t] * cq.values()[t];
            }
            evec[i] = e;
            fvec[i] = f;
        }
        for (std::size_t t = 0; t < dk; ++t) g0 += cq.values()[t] * ck.values()[t];
        wphi_v = wphi.item();
        bphi_v = bphi.item();
    }

    auto alpha = std::make_shared<std::vector<double>>(nnz);
    auto atilde = std::make_shared<std::vector<double>>(nnz, 0.0);
    auto rowmax = std::make_shared<std::vector<double>>(n, 0.0);
    auto rowz = std::make_shared<std::vector<double>>(n, 0.0);
    std::vector<double> out(n * dk, 0.0);
    const std::vector<double>* sims = community ? ctx.prox->sims.data() : nullptr;
    const double* dbias = community ? ctx.d_bias->data() : nullptr;
    int empty_row = 0;
#pragma omp parallel for schedule(dynamic, 64)
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t b = idx->row_ptr[i], e = idx->row_ptr[i + 1];
        const double* ui = qn.values().data() + i * dk;
        for (std::size_t p = b; p < e; ++p) {
            const std::size_t j = static_cast<std::size_t>(idx->cols[p]);
            const double* vj = kn.values().data() + j * dk;
            double dot = 0.0;
            for (std::size_t t = 0; t < dk; ++t) dot += ui[t] * vj[t];
            if (community) {
                double v = dot + evec[i] + fvec[j] + g0;
                for (std::size_t k = 0; k < K; ++k) {
                    const double s = sims[k][i * n + j];
                    v += s * (rmat[i * K + k] + cmat[j * K + k] + rho[k]);
                    for (std::size_t l = 0; l < K; ++l) v += mq[k * K + l] * s * sims[l][i * n + j];
                }
                (*alpha)[p] = v * inv_sqrt_dk + wphi_v * dbias[i * n + j] + bphi_v;
            } else {
                (*alpha)[p] = dot * inv_sqrt_dk;
            }
        }
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t p = b; p < e; ++p)
            if (idx->in_support[p]) mx = std::max(mx, (*alpha)[p]);
        if (!std::isfinite(mx)) {
#pragma omp atomic write
            empty_row = 1;
            continue;
        }
        double z = 0.0;
        const double* mrow = mask.values().data() + i * n;
        for (std::size_t p = b; p < e; ++p)
            if (idx->in_support[p]) {
                const double w = mrow[idx->cols[p]] * std::exp((*alpha)[p] - mx);
                (*atilde)[p] = w;
                z += w;
            }
        (*rowmax)[i] = mx;
        (*rowz)[i] = z;
        const double inv_z = 1.0 / z;
        double* orow = out.data() + i * dk;
        for (std::size_t p = b; p < e; ++p) {
            if (!idx->in_support[p]) continue;
            (*atilde)[p] *= inv_z;
            const double* vrow = vh.values().data() + static_cast<std::size_t>(idx->cols[p]) * dk;
            const double a = (*atilde)[p];
            for (std::size_t t = 0; t < dk; ++t) orow[t] += a * vrow[t];
        }
    }
    if (empty_row)
        throw std::logic_error("attention: some node has an empty attention set (mask must include self)");

    std::vector<Tensor> inputs = {qn, kn, vh, mask};
    if (community) inputs.insert(inputs.end(), {gq, gk, cq, ck, wphi, bphi});
    return make_op({n, dk}, std::move(out), std::move(inputs),
                   [n, dk, K, inv_sqrt_dk, community, idx, alpha, atilde, rowmax, rowz,
                    prox = ctx.prox, dbias_ptr = ctx.d_bias](TensorNode& o) {
        auto p_qn = o.parents[0];
        auto p_kn = o.parents[1];
        auto p_vh = o.parents[2];
        auto p_mask = o.parents[3];
        std::shared_ptr<TensorNode> p_gq, p_gk, p_cq, p_ck, p_wphi, p_bphi;
        if (community) {
            p_gq = o.parents[4];
            p_gk = o.parents[5];
            p_cq = o.parents[6];
            p_ck = o.parents[7];
            p_wphi = o.parents[8];
            p_bphi = o.parents[9];
        }
        const bool need_mask_grad = p_mask->requires_grad;
        const std::vector<double>* sims = community ? prox->sims.data() : nullptr;
        const double* dbias = community ? dbias_ptr->data() : nullptr;
        const std::size_t nnz = idx->nnz();

        if (p_qn->requires_grad) p_qn->ensure_grad();
        if (p_kn->requires_grad) p_kn->ensure_grad();
        if (p_vh->requires_grad) p_vh->ensure_grad();
        if (need_mask_grad) p_mask->ensure_grad();
        for (auto& pp : {p_gq, p_gk, p_cq, p_ck, p_wphi, p_bphi})
            if (pp && pp->requires_grad) pp->ensure_grad();

        const int nthreads = omp_get_max_threads();
        std::vector<double> ga(nnz, 0.0);
        std::vector<double> grmat, gevec, gcmat_tls, gmq_tls, gfvec_tls, scal_tls;
        if (community) {
            grmat.assign(n * K, 0.0);
            gevec.assign(n, 0.0);
            gcmat_tls.assign(static_cast<std::size_t>(nthreads) * n * K, 0.0);
            gmq_tls.assign(static_cast<std::size_t>(nthreads) * K * K, 0.0);
            gfvec_tls.assign(static_cast<std::size_t>(nthreads) * n, 0.0);
            scal_tls.assign(static_cast<std::size_t>(nthreads) * 2, 0.0);
        }
        std::vector<double> gkn_tls(static_cast<std::size_t>(nthreads) * n * dk, 0.0);
        std::vector<double> gvh_tls(p_vh->requires_grad ? static_cast<std::size_t>(nthreads) * n * dk : 0,
                                    0.0);
#pragma omp parallel
        {
            const int tid = omp_get_thread_num();
            double* gkn_loc = gkn_tls.data() + static_cast<std::size_t>(tid) * n * dk;
            double* gvh_loc = p_vh->requires_grad
                                  ? gvh_tls.data() + static_cast<std::size_t>(tid) * n * dk
                                  : nullptr;
            double* gcmat = community ? gcmat_tls.data() + static_cast<std::size_t>(tid) * n * K : nullptr;
            double* gmq = community ? gmq_tls.data() + static_cast<std::size_t>(tid) * K * K : nullptr;
            double* gfvec = community ? gfvec_tls.data() + static_cast<std::size_t>(tid) * n : nullptr;
            double* scal = community ? scal_tls.data() + static_cast<std::size_t>(tid) * 2 : nullptr;
#pragma omp for schedule(dynamic, 64)
            for (std::size_t i = 0; i < n; ++i) {
                const std::size_t b = idx->row_ptr[i], e = idx->row_ptr[i + 1];
                const double* grow = o.grad.data() + i * dk;
                // d(loss)/d(atilde_ij) = <gout_i, vh_j>, then softmax backward
                double dot = 0.0;
                for (std::size_t p = b; p < e; ++p) {
                    if (!idx->in_support[p]) continue;
                    const double* vrow =
                        p_vh->values.data() + static_cast<std::size_t>(idx->cols[p]) * dk;
                    double gat = 0.0;
                    for (std::size_t t = 0; t < dk; ++t) gat += grow[t] * vrow[t];
                    ga[p] = gat;  // reuse as scratch for gatilde
                    dot += gat * (*atilde)[p];
                }
                for (std::size_t p = b; p < e; ++p) {
                    if (!idx->in_support[p]) continue;
                    const double a = (*atilde)[p];
                    if (gvh_loc) {
                        double* gvrow = gvh_loc + static_cast<std::size_t>(idx->cols[p]) * dk;
                        for (std::size_t t = 0; t < dk; ++t) gvrow[t] += a * grow[t];
                    }
                    ga[p] = a * (ga[p] - dot);
                }
                if (need_mask_grad) {
                    const double mx = (*rowmax)[i];
                    const double z = (*rowz)[i];
                    double* gmrow = p_mask->grad.data() + i * n;
                    for (std::size_t p = b; p < e; ++p) {
                        const std::size_t j = static_cast<std::size_t>(idx->cols[p]);
                        const double* vrow = p_vh->values.data() + j * dk;
                        double gat = 0.0;
                        for (std::size_t t = 0; t < dk; ++t) gat += grow[t] * vrow[t];
                        const double eexp = std::exp(std::min((*alpha)[p] - mx, 500.0));
                        gmrow[j] += (eexp / z) * (gat - dot);
                    }
                }
                // content gradients at support entries
                const double* ui = p_qn->values.data() + i * dk;
                double* gui = p_qn->requires_grad ? p_qn->grad.data() + i * dk : nullptr;
                double gei = 0.0;
                for (std::size_t p = b; p < e; ++p) {
                    const double w = ga[p];
                    if (w == 0.0 || !idx->in_support[p]) continue;
                    const std::size_t j = static_cast<std::size_t>(idx->cols[p]);
                    const double ws = w * inv_sqrt_dk;
                    const double* vj = p_kn->values.data() + j * dk;
                    if (gui)
                        for (std::size_t t = 0; t < dk; ++t) gui[t] += ws * vj[t];
                    double* gvj = gkn_loc + j * dk;
                    for (std::size_t t = 0; t < dk; ++t) gvj[t] += ws * ui[t];
                    if (community) {
                        gei += ws;
                        gfvec[j] += ws;
                        for (std::size_t k = 0; k < K; ++k) {
                            const double s = sims[k][i * n + j];
                            grmat[i * K + k] += ws * s;
                            gcmat[j * K + k] += ws * s;
                            for (std::size_t l = 0; l < K; ++l) gmq[k * K + l] += ws * s * sims[l][i * n + j];
                        }
                        scal[0] += w * dbias[i * n + j];
                        scal[1] += w;
                    }
                }
                if (community) gevec[i] = gei;
            }
        }
        if (p_kn->requires_grad)
            for (int t = 0; t < nthreads; ++t)
                for (std::size_t i = 0; i < n * dk; ++i)
                    p_kn->grad[i] += gkn_tls[static_cast<std::size_t>(t) * n * dk + i];
        if (p_vh->requires_grad)
            for (int t = 0; t < nthreads; ++t)
                for (std::size_t i = 0; i < n * dk; ++i)
                    p_vh->grad[i] += gvh_tls[static_cast<std::size_t>(t) * n * dk + i];
        if (!community) return;

        std::vector<double> gcmat(n * K, 0.0), gmq(K * K, 0.0), gfvec(n, 0.0);
        double gwphi = 0.0, gbphi = 0.0;
        for (int t = 0; t < nthreads; ++t) {
            for (std::size_t i = 0; i < n * K; ++i) gcmat[i] += gcmat_tls[t * n * K + i];
            for (std::size_t i = 0; i < K * K; ++i) gmq[i] += gmq_tls[t * K * K + i];
            for (std::size_t i = 0; i < n; ++i) gfvec[i] += gfvec_tls[t * n + i];
            gwphi += scal_tls[t * 2];
            gbphi += scal_tls[t * 2 + 1];
        }
        std::vector<double> grho(K, 0.0);
        double gg0 = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            gg0 += gevec[i];
            for (std::size_t k = 0; k < K; ++k) grho[k] += grmat[i * K + k];
        }
        if (p_qn->requires_grad) {
            gemm(grmat.data(), n, K, false, p_gk->values.data(), dk, K, true, p_qn->grad.data(), 1.0, 1.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_qn->grad[i * dk + t] += gevec[i] * p_ck->values[t];
        }
        if (p_kn->requires_grad) {
            gemm(gcmat.data(), n, K, false, p_gq->values.data(), dk, K, true, p_kn->grad.data(), 1.0, 1.0);
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_kn->grad[i * dk + t] += gfvec[i] * p_cq->values[t];
        }
        if (p_gq->requires_grad) {
            gemm(p_kn->values.data(), n, dk, true, gcmat.data(), n, K, false, p_gq->grad.data(), 1.0, 1.0);
            gemm(p_gk->values.data(), dk, K, false, gmq.data(), K, K, true, p_gq->grad.data(), 1.0, 1.0);
            for (std::size_t t = 0; t < dk; ++t)
                for (std::size_t k = 0; k < K; ++k) p_gq->grad[t * K + k] += p_ck->values[t] * grho[k];
        }
        if (p_gk->requires_grad) {
            gemm(p_qn->values.data(), n, dk, true, grmat.data(), n, K, false, p_gk->grad.data(), 1.0, 1.0);
            gemm(p_gq->values.data(), dk, K, false, gmq.data(), K, K, false, p_gk->grad.data(), 1.0, 1.0);
            for (std::size_t t = 0; t < dk; ++t)
                for (std::size_t k = 0; k < K; ++k) p_gk->grad[t * K + k] += p_cq->values[t] * grho[k];
        }
        if (p_cq->requires_grad) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_cq->grad[t] += p_kn->values[i * dk + t] * gfvec[i];
            for (std::size_t t = 0; t < dk; ++t) {
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += p_gk->values[t * K + k] * grho[k];
                p_cq->grad[t] += s + gg0 * p_ck->values[t];
            }
        }
        if (p_ck->requires_grad) {
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t t = 0; t < dk; ++t) p_ck->grad[t] += p_qn->values[i * dk + t] * gevec[i];
            for (std::size_t t = 0; t < dk; ++t) {
                double s = 0.0;
                for (std::size_t k = 0; k < K; ++k) s += p_gq->values[t * K + k] * grho[k];
                p_ck->grad[t] += s + gg0 * p_cq->values[t];
            }
        }
        if (p_wphi->requires_grad) p_wphi->grad[0] += gwphi;
        if (p_bphi->requires_grad) p_bphi->grad[0] += gbphi;
    });
}

// ---------------------------------------------------------------------------
// Layers

inline Tensor input_projection(const ModelParams& p, const Tensor& x) {
    return add_bias(matmul(x, p.w0, false, true), p.b0);
}

inline Tensor attention_layer(const LayerParams& lp, const AttentionContext& ctx,
                              const std::shared_ptr<const AttentionIndex>& idx, const Tensor& h,
                              const Tensor& mask, bool community, bool post_ffn_residual) {
    std::vector<Tensor> head_outs;
    for (const auto& hp : lp.heads) {
        Tensor qn = matmul(h, hp.wq_n, false, true);
        Tensor kn = matmul(h, hp.wk_n, false, true);
        Tensor vh = matmul(h, hp.v, false, true);
        if (community) {
            Tensor gq = matmul(hp.ws_q, lp.f_w);  // dk x K
            Tensor gk = matmul(hp.ws_k, lp.f_w);
            Tensor cq = matvec(hp.ws_q, lp.f_b);  // dk
            Tensor ck = matvec(hp.ws_k, lp.f_b);
            head_outs.push_back(masked_attention_head(ctx, idx, qn, kn, vh, mask, gq, gk, cq, ck,
                                                      hp.wphi, hp.bphi, true));
        } else {
            head_outs.push_back(masked_attention_head(ctx, idx, qn, kn, vh, mask, Tensor(), Tensor(),
                                                      Tensor(), Tensor(), Tensor(), Tensor(), false));
        }
    }
    Tensor hhat = matmul(concat_last_dim(head_outs), lp.o_h, false, true);
    Tensor normed = layer_norm(add(h, hhat), lp.ln1_g, lp.ln1_b);
    Tensor ffn = matmul(relu(matmul(normed, lp.ffn_w1, false, true)), lp.ffn_w2, false, true);
    if (post_ffn_residual) return layer_norm(add(normed, ffn), lp.ln2_g, lp.ln2_b);
    return ffn;
}

/// Full encoder: projection then L transformer layers; returns n x d states.
inline Tensor encode(const ModelParams& p, const AttentionContext& ctx,
                     const std::shared_ptr<const AttentionIndex>& idx, const Tensor& x,
                     const Tensor& mask, bool community, bool post_ffn_residual) {
    Tensor h = input_projection(p, x);
    for (const auto& lp : p.layers)
        h = attention_layer(lp, ctx, idx, h, mask, community, post_ffn_residual);
    return h;
}

}  // namespace cgt
