#pragma once

// Dense fp64 tensors with reverse-mode automatic differentiation.
// Every learnable computation in the library runs through these nodes;
// matmul is delegated to BLAS, everything else is plain loops.

#include <cblas.h>
#include <omp.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace cgt {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ")";
    return os.str();
}

struct TensorNode {
    Shape shape;
    std::vector<double> values;
    bool requires_grad = false;
    bool consumed = false;
    std::vector<double> grad;
    std::vector<std::shared_ptr<TensorNode>> parents;
    std::function<void(TensorNode&)> backward_fn;

    std::size_t numel() const { return values.size(); }
    void ensure_grad() {
        if (grad.size() != values.size()) grad.assign(values.size(), 0.0);
    }
};

/// Shared handle to a tensor node. Copies alias the same storage.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

    static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false) {
        if (shape_numel(shape) != values.size())
            throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                        std::to_string(values.size()) + " values");
        auto n = std::make_shared<TensorNode>();
        n->shape = std::move(shape);
        n->values = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(n);
    }
    static Tensor zeros(Shape shape, bool requires_grad = false) {
        std::vector<double> v(shape_numel(shape), 0.0);
        return from(std::move(shape), std::move(v), requires_grad);
    }
    static Tensor scalar(double v, bool requires_grad = false) {
        return from({1}, {v}, requires_grad);
    }

    bool defined() const { return node_ != nullptr; }
    const Shape& shape() const { return node_->shape; }
    std::size_t numel() const { return node_->values.size(); }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t rows() const { return node_->shape.at(0); }
    std::size_t cols() const { return node_->shape.at(1); }
    bool requires_grad() const { return node_->requires_grad; }

    const std::vector<double>& values() const { return node_->values; }
    std::vector<double>& mutable_values() { return node_->values; }
    const std::vector<double>& grad() const { return node_->grad; }
    bool has_grad() const { return !node_->grad.empty(); }
    void zero_grad() { node_->grad.assign(node_->values.size(), 0.0); }

    double item() const {
        if (numel() != 1) throw std::invalid_argument("item: tensor " + shape_str(shape()) + " is not scalar");
        return node_->values[0];
    }
    double at(std::size_t i, std::size_t j) const { return node_->values[i * cols() + j]; }

    std::shared_ptr<TensorNode>& node() { return node_; }
    const std::shared_ptr<TensorNode>& node() const { return node_; }

private:
    std::shared_ptr<TensorNode> node_;
};

inline bool& grad_mode_flag() {
    thread_local bool enabled = true;
    return enabled;
}

/// RAII guard suppressing tape recording, for evaluation-only forwards.
struct NoGrad {
    bool prev;
    NoGrad() : prev(grad_mode_flag()) { grad_mode_flag() = false; }
    ~NoGrad() { grad_mode_flag() = prev; }
    NoGrad(const NoGrad&) = delete;
    NoGrad& operator=(const NoGrad&) = delete;
};

inline bool any_requires_grad(const std::vector<Tensor>& ts) {
    if (!grad_mode_flag()) return false;
    for (const auto& t : ts)
        if (t.defined() && t.requires_grad()) return true;
    return false;
}

/// Record a new operation node. `backward` receives the output node with its
/// grad populated and must accumulate into parent grads (guarding on
/// requires_grad). Recorded only when some input needs gradients.
inline Tensor make_op(Shape out_shape, std::vector<double> out_values,
                      std::vector<Tensor> inputs,
                      std::function<void(TensorNode&)> backward) {
    Tensor out = Tensor::from(std::move(out_shape), std::move(out_values), any_requires_grad(inputs));
    if (out.requires_grad()) {
        for (auto& t : inputs)
            if (t.defined()) out.node()->parents.push_back(t.node());
        out.node()->backward_fn = std::move(backward);
    }
    return out;
}

// ---------------------------------------------------------------------------
// BLAS

/// C(m x n) = alpha * op(A) * op(B) + beta * C, all row-major.
/// A stored ar x ac; op(A) = A^T when ta.
inline void gemm(const double* a, std::size_t ar, std::size_t ac, bool ta,
                 const double* b, std::size_t br, std::size_t bc, bool tb,
                 double* c, double alpha = 1.0, double beta = 0.0) {
    const std::size_t m = ta ? ac : ar;
    const std::size_t ka = ta ? ar : ac;
    const std::size_t kb = tb ? bc : br;
    const std::size_t n = tb ? br : bc;
    if (ka != kb)
        throw std::invalid_argument("gemm: inner dimensions disagree");
    cblas_dgemm(CblasRowMajor, ta ? CblasTrans : CblasNoTrans, tb ? CblasTrans : CblasNoTrans,
                static_cast<int>(m), static_cast<int>(n), static_cast<int>(ka), alpha, a,
                static_cast<int>(ac), b, static_cast<int>(bc), beta, c, static_cast<int>(n));
}

// ---------------------------------------------------------------------------
// Primitives

inline void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2)
        throw std::invalid_argument(std::string(op) + ": expected rank-2 tensor, got " + shape_str(t.shape()));
}

inline Tensor matmul(const Tensor& a, const Tensor& b, bool trans_a = false, bool trans_b = false) {
    require_rank2(a, "matmul");
    require_rank2(b, "matmul");
    const std::size_t ar = a.rows(), ac = a.cols(), br = b.rows(), bc = b.cols();
    const std::size_t m = trans_a ? ac : ar;
    const std::size_t k = trans_a ? ar : ac;
    const std::size_t kb = trans_b ? bc : br;
    const std::size_t n = trans_b ? br : bc;
    if (k != kb)
        throw std::invalid_argument("matmul: inner dimensions of " + shape_str(a.shape()) +
                                    (trans_a ? "^T" : "") + " and " + shape_str(b.shape()) +
                                    (trans_b ? "^T" : "") + " disagree");
    std::vector<double> out(m * n);
    gemm(a.values().data(), ar, ac, trans_a, b.values().data(), br, bc, trans_b, out.data());
    return make_op({m, n}, std::move(out), {a, b}, [=](TensorNode& o) {
        const double* g = o.grad.data();
        auto pa = o.parents[0];
        auto pb = o.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            if (!trans_a)  // gA = G * op(B)^T
                gemm(g, m, n, false, pb->values.data(), br, bc, !trans_b, pa->grad.data(), 1.0, 1.0);
            else  // gA (k x m raw) = op(B) * G^T
                gemm(pb->values.data(), br, bc, trans_b, g, m, n, true, pa->grad.data(), 1.0, 1.0);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            if (!trans_b)  // gB = op(A)^T * G
                gemm(pa->values.data(), ar, ac, !trans_a, g, m, n, false, pb->grad.data(), 1.0, 1.0);
            else  // gB (n x k raw) = G^T * op(A)
                gemm(g, m, n, true, pa->values.data(), ar, ac, trans_a, pb->grad.data(), 1.0, 1.0);
        }
    });
}

/// y = A x for rank-2 A and rank-1 x.
inline Tensor matvec(const Tensor& a, const Tensor& x) {
    require_rank2(a, "matvec");
    if (x.rank() != 1 || x.numel() != a.cols())
        throw std::invalid_argument("matvec: " + shape_str(a.shape()) + " vs " + shape_str(x.shape()));
    const std::size_t p = a.rows(), q = a.cols();
    std::vector<double> out(p, 0.0);
    for (std::size_t i = 0; i < p; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < q; ++j) s += a.values()[i * q + j] * x.values()[j];
        out[i] = s;
    }
    return make_op({p}, std::move(out), {a, x}, [=](TensorNode& o) {
        auto pa = o.parents[0];
        auto px = o.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j) pa->grad[i * q + j] += o.grad[i] * px->values[j];
        }
        if (px->requires_grad) {
            px->ensure_grad();
            for (std::size_t i = 0; i < p; ++i)
                for (std::size_t j = 0; j < q; ++j) px->grad[j] += pa->values[i * q + j] * o.grad[i];
        }
    });
}

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

inline Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] + b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [n](TensorNode& o) {
        for (int p = 0; p < 2; ++p) {
            auto& par = o.parents[p];
            if (!par->requires_grad) continue;
            par->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) par->grad[i] += o.grad[i];
        }
    });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] - b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [n](TensorNode& o) {
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) o.parents[0]->grad[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) o.parents[1]->grad[i] -= o.grad[i];
        }
    });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
#pragma omp parallel for schedule(static) if (n > 65536)
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * b.values()[i];
    return make_op(a.shape(), std::move(out), {a, b}, [n](TensorNode& o) {
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) o.parents[0]->grad[i] += o.grad[i] * o.parents[1]->values[i];
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) o.parents[1]->grad[i] += o.grad[i] * o.parents[0]->values[i];
        }
    });
}

inline Tensor scale(const Tensor& a, double c) {
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] * c;
    return make_op(a.shape(), std::move(out), {a}, [n, c](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[i] * c;
    });
}

/// Row-broadcast bias: out[i][j] = a[i][j] + b[j].
inline Tensor add_bias(const Tensor& a, const Tensor& b) {
    require_rank2(a, "add_bias");
    if (b.rank() != 1 || b.numel() != a.cols())
        throw std::invalid_argument("add_bias: bias " + shape_str(b.shape()) + " vs matrix " + shape_str(a.shape()));
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = a.values()[i * c + j] + b.values()[j];
    return make_op(a.shape(), std::move(out), {a, b}, [r, c](TensorNode& o) {
        if (o.parents[0]->requires_grad) {
            o.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < r * c; ++i) o.parents[0]->grad[i] += o.grad[i];
        }
        if (o.parents[1]->requires_grad) {
            o.parents[1]->ensure_grad();
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) o.parents[1]->grad[j] += o.grad[i * c + j];
        }
    });
}

inline Tensor relu(const Tensor& a) {
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = a.values()[i] > 0.0 ? a.values()[i] : 0.0;
    return make_op(a.shape(), std::move(out), {a}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i)
            if (o.values[i] > 0.0) p->grad[i] += o.grad[i];
    });
}

inline double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = stable_sigmoid(a.values()[i]);
    return make_op(a.shape(), std::move(out), {a}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[i] * o.values[i] * (1.0 - o.values[i]);
    });
}

/// Elementwise log(x + eps). eps = 0 demands strictly positive inputs.
inline Tensor log_guarded(const Tensor& a, double eps = 1e-6) {
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) {
        const double x = a.values()[i] + eps;
        if (x <= 0.0)
            throw std::domain_error("log: non-positive argument " + std::to_string(a.values()[i]) +
                                    " at index " + std::to_string(i) + " (eps=" + std::to_string(eps) + ")");
        out[i] = std::log(x);
    }
    return make_op(a.shape(), std::move(out), {a}, [n, eps](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[i] / (p->values[i] + eps);
    });
}

/// Elementwise sqrt with a guarded derivative at 0.
inline Tensor sqrt_guarded(const Tensor& a) {
    std::vector<double> out(a.numel());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = std::sqrt(std::max(a.values()[i], 0.0));
    return make_op(a.shape(), std::move(out), {a}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[i] * 0.5 / std::max(o.values[i], 1e-12);
    });
}

inline Tensor row_softmax(const Tensor& a) {
    require_rank2(a, "row_softmax");
    const std::size_t r = a.rows(), c = a.cols();
    std::vector<double> out(r * c);
#pragma omp parallel for schedule(static) if (r * c > 65536)
    for (std::size_t i = 0; i < r; ++i) {
        const double* x = a.values().data() + i * c;
        double* y = out.data() + i * c;
        double mx = x[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, x[j]);
        double z = 0.0;
        for (std::size_t j = 0; j < c; ++j) {
            y[j] = std::exp(x[j] - mx);
            z += y[j];
        }
        for (std::size_t j = 0; j < c; ++j) y[j] /= z;
    }
    return make_op(a.shape(), std::move(out), {a}, [r, c](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
#pragma omp parallel for schedule(static) if (r * c > 65536)
        for (std::size_t i = 0; i < r; ++i) {
            const double* y = o.values.data() + i * c;
            const double* g = o.grad.data() + i * c;
            double dot = 0.0;
            for (std::size_t j = 0; j < c; ++j) dot += y[j] * g[j];
            double* gp = p->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) gp[j] += y[j] * (g[j] - dot);
        }
    });
}

/// Per-row normalization with affine parameters; population variance.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-12) {
    require_rank2(x, "layer_norm");
    const std::size_t r = x.rows(), c = x.cols();
    if (gamma.numel() != c || beta.numel() != c)
        throw std::invalid_argument("layer_norm: affine params " + shape_str(gamma.shape()) + "/" +
                                    shape_str(beta.shape()) + " vs features " + shape_str(x.shape()));
    std::vector<double> out(r * c);
    for (std::size_t i = 0; i < r; ++i) {
        const double* xi = x.values().data() + i * c;
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += xi[j];
        mu /= static_cast<double>(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
        var /= static_cast<double>(c);
        const double inv = 1.0 / std::sqrt(var + eps);
        for (std::size_t j = 0; j < c; ++j)
            out[i * c + j] = gamma.values()[j] * ((xi[j] - mu) * inv) + beta.values()[j];
    }
    return make_op(x.shape(), std::move(out), {x, gamma, beta}, [r, c, eps](TensorNode& o) {
        auto px = o.parents[0];
        auto pg = o.parents[1];
        auto pb = o.parents[2];
        if (px->requires_grad) px->ensure_grad();
        if (pg->requires_grad) pg->ensure_grad();
        if (pb->requires_grad) pb->ensure_grad();
        std::vector<double> xhat(c), d(c);
        for (std::size_t i = 0; i < r; ++i) {
            const double* xi = px->values.data() + i * c;
            const double* gi = o.grad.data() + i * c;
            double mu = 0.0;
            for (std::size_t j = 0; j < c; ++j) mu += xi[j];
            mu /= static_cast<double>(c);
            double var = 0.0;
            for (std::size_t j = 0; j < c; ++j) var += (xi[j] - mu) * (xi[j] - mu);
            var /= static_cast<double>(c);
            const double inv = 1.0 / std::sqrt(var + eps);
            for (std::size_t j = 0; j < c; ++j) xhat[j] = (xi[j] - mu) * inv;
            if (pg->requires_grad)
                for (std::size_t j = 0; j < c; ++j) pg->grad[j] += gi[j] * xhat[j];
            if (pb->requires_grad)
                for (std::size_t j = 0; j < c; ++j) pb->grad[j] += gi[j];
            if (px->requires_grad) {
                double mean_d = 0.0, mean_dx = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    d[j] = gi[j] * pg->values[j];
                    mean_d += d[j];
                    mean_dx += d[j] * xhat[j];
                }
                mean_d /= static_cast<double>(c);
                mean_dx /= static_cast<double>(c);
                double* gx = px->grad.data() + i * c;
                for (std::size_t j = 0; j < c; ++j) gx[j] += inv * (d[j] - mean_d - xhat[j] * mean_dx);
            }
        }
    });
}

/// Concatenate rank-2 tensors along the last (column) dimension.
inline Tensor concat_last_dim(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_last_dim: no inputs");
    const std::size_t r = parts[0].rows();
    std::size_t total = 0;
    std::vector<std::size_t> widths;
    for (const auto& t : parts) {
        require_rank2(t, "concat_last_dim");
        if (t.rows() != r)
            throw std::invalid_argument("concat_last_dim: row mismatch " + shape_str(parts[0].shape()) +
                                        " vs " + shape_str(t.shape()));
        widths.push_back(t.cols());
        total += t.cols();
    }
    std::vector<double> out(r * total);
    std::size_t off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        const std::size_t w = widths[p];
        for (std::size_t i = 0; i < r; ++i)
            std::copy_n(parts[p].values().data() + i * w, w, out.data() + i * total + off);
        off += w;
    }
    return make_op({r, total}, std::move(out), parts, [r, total, widths](TensorNode& o) {
        std::size_t off = 0;
        for (std::size_t p = 0; p < o.parents.size(); ++p) {
            const std::size_t w = widths[p];
            auto& par = o.parents[p];
            if (par->requires_grad) {
                par->ensure_grad();
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < w; ++j) par->grad[i * w + j] += o.grad[i * total + off + j];
            }
            off += w;
        }
    });
}

inline Tensor frobenius_sq(const Tensor& a) {
    double s = 0.0;
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) s += a.values()[i] * a.values()[i];
    return make_op({1}, {s}, {a}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = o.grad[0];
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += 2.0 * g * p->values[i];
    });
}

inline Tensor sum(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    const std::size_t n = a.numel();
    return make_op({1}, {s}, {a}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[0];
    });
}

inline Tensor mean(const Tensor& a) {
    double s = 0.0;
    for (double v : a.values()) s += v;
    const std::size_t n = a.numel();
    return make_op({1}, {s / static_cast<double>(n)}, {a}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        const double g = o.grad[0] / static_cast<double>(n);
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += g;
    });
}

/// Pairwise cosine similarity of rows: out[i][j] = <z_i,z_j>/(|z_i||z_j|),
/// norms guarded below by 1e-12.
inline Tensor cosine_rows(const Tensor& z) {
    require_rank2(z, "cosine_rows");
    const std::size_t n = z.rows(), d = z.cols();
    auto norms = std::make_shared<std::vector<double>>(n);
    for (std::size_t i = 0; i < n; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            const double v = z.values()[i * d + j];
            s += v * v;
        }
        (*norms)[i] = std::max(std::sqrt(s), 1e-12);
    }
    std::vector<double> out(n * n);
    gemm(z.values().data(), n, d, false, z.values().data(), n, d, true, out.data());
#pragma omp parallel for schedule(static) if (n > 128)
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= (*norms)[i] * (*norms)[j];
    return make_op({n, n}, std::move(out), {z}, [n, d, norms](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        // dZ = S Z - diag(c) Z with S_ij = (g_ij + g_ji)/(r_i r_j),
        // c_i = sum_j (g_ij + g_ji) out_ij / r_i^2
        std::vector<double> s(n * n), c(n, 0.0);
#pragma omp parallel for schedule(static) if (n > 128)
        for (std::size_t i = 0; i < n; ++i) {
            double ci = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
                const double gsym = o.grad[i * n + j] + o.grad[j * n + i];
                s[i * n + j] = gsym / ((*norms)[i] * (*norms)[j]);
                ci += gsym * o.values[i * n + j];
            }
            c[i] = ci / ((*norms)[i] * (*norms)[i]);
        }
        std::vector<double> sz(n * d);
        gemm(s.data(), n, n, false, p->values.data(), n, d, false, sz.data());
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j)
                p->grad[i * d + j] += sz[i * d + j] - c[i] * p->values[i * d + j];
    });
}

/// Forward thresholds at 0.5, backward passes gradients straight through.
inline Tensor straight_through(const Tensor& soft) {
    std::vector<double> out(soft.numel());
    const std::size_t n = out.size();
    for (std::size_t i = 0; i < n; ++i) out[i] = soft.values()[i] > 0.5 ? 1.0 : 0.0;
    return make_op(soft.shape(), std::move(out), {soft}, [n](TensorNode& o) {
        auto& p = o.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) p->grad[i] += o.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Tape and backward

/// Recorded operations reachable from a root, in forward-topological order
/// (every node's inputs precede it). Consumed by a single backward sweep.
class Tape {
public:
    explicit Tape(const Tensor& root) : root_(root.node()) {
        if (!root_) throw std::invalid_argument("tape: undefined root");
        std::unordered_set<TensorNode*> visited;
        std::vector<std::pair<std::shared_ptr<TensorNode>, std::size_t>> stack;
        stack.emplace_back(root_, 0);
        visited.insert(root_.get());
        while (!stack.empty()) {
            auto node = stack.back().first;
            const std::size_t next = stack.back().second;
            if (next < node->parents.size()) {
                stack.back().second++;
                auto child = node->parents[next];
                if (child->requires_grad && !visited.count(child.get())) {
                    visited.insert(child.get());
                    stack.emplace_back(child, 0);
                }
            } else {
                order_.push_back(node);
                stack.pop_back();
            }
        }
    }

    const std::vector<std::shared_ptr<TensorNode>>& order() const { return order_; }

    /// Seed d(root)/d(root) = 1 and sweep in reverse order. Interior grads are
    /// released once consumed; leaf (parameter) grads survive. The tape is
    /// single-use: nodes are marked consumed and their closures dropped.
    void backward() {
        if (root_->numel() != 1)
            throw std::invalid_argument("backward: loss must be scalar, got " + shape_str(root_->shape));
        if (root_->consumed) throw std::logic_error("backward: tape already consumed");
        for (auto& n : order_)
            if (n->consumed) throw std::logic_error("backward: graph contains consumed nodes");
        root_->ensure_grad();
        root_->grad[0] += 1.0;
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            TensorNode& n = **it;
            if (!n.backward_fn) continue;  // leaf
            n.ensure_grad();
            n.backward_fn(n);
            n.backward_fn = nullptr;
            n.parents.clear();
            n.consumed = true;
            if (&n != root_.get()) {
                n.grad.clear();
                n.grad.shrink_to_fit();
            }
        }
    }

private:
    std::shared_ptr<TensorNode> root_;
    std::vector<std::shared_ptr<TensorNode>> order_;
};

inline void backward(const Tensor& loss) {
    Tape tape(loss);
    tape.backward();
}

// ---------------------------------------------------------------------------
// Gradient checking

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|)
/// for a scalar-valued function of one tensor.
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& point, double eps) {
    if (!(eps > 0.0 && eps <= 1e-3))
        throw std::invalid_argument("grad_check: eps must lie in (0, 1e-3]");
    Tensor x = Tensor::from(point.shape(), point.values(), true);
    Tensor loss = f(x);
    if (loss.numel() != 1) throw std::invalid_argument("grad_check: function must be scalar-valued");
    backward(loss);
    const std::vector<double> analytic =
        x.has_grad() ? x.grad() : std::vector<double>(point.numel(), 0.0);
    auto eval_at = [&](std::size_t i, double delta) {
        std::vector<double> v = point.values();
        v[i] += delta;
        return f(Tensor::from(point.shape(), std::move(v), false)).item();
    };
    double max_rel = 0.0;
    for (std::size_t i = 0; i < point.numel(); ++i) {
        const double numeric = (eval_at(i, eps) - eval_at(i, -eps)) / (2.0 * eps);
        if (!std::isfinite(analytic[i]) || !std::isfinite(numeric))
            throw std::runtime_error("grad_check: non-finite gradient at coordinate " + std::to_string(i) +
                                     " (analytic=" + std::to_string(analytic[i]) +
                                     ", numeric=" + std::to_string(numeric) + ")");
        max_rel = std::max(max_rel, std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i])));
    }
    return max_rel;
}

// ---------------------------------------------------------------------------
// RNG

using Rng = std::mt19937_64;

/// Uniform draw in the open interval (0, 1).
inline double uniform01(Rng& rng) {
    std::uniform_real_distribution<double> dist(0.0, 1.0);
    double u;
    do {
        u = dist(rng);
    } while (u <= 0.0 || u >= 1.0);
    return u;
}

/// Standard Gumbel noise: -log(-log(u)).
inline double gumbel(Rng& rng) { return -std::log(-std::log(uniform01(rng))); }

inline Tensor rand_uniform(Shape shape, double lo, double hi, Rng& rng, bool requires_grad = false) {
    std::vector<double> v(shape_numel(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (double& x : v) x = dist(rng);
    return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

/// Weight init: uniform +-sqrt(1/fan_in).
inline Tensor init_weight(std::size_t fan_out, std::size_t fan_in, Rng& rng) {
    const double b = std::sqrt(1.0 / static_cast<double>(fan_in));
    return rand_uniform({fan_out, fan_in}, -b, b, rng, true);
}

inline Tensor init_bias(std::size_t n) { return Tensor::zeros({n}, true); }

}  // namespace cgt
