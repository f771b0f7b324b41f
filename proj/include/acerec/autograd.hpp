#pragma once

// Minimal reverse-mode autodiff over row-major 2-D tensors. Ops work on whole
// matrices, so a training batch is a graph of a few hundred nodes. The
// scalar type is a template parameter: float for training, double for the
// finite-difference harness.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numbers>
#include <span>
#include <string>
#include <unordered_set>
#include <vector>

#include <Eigen/Core>

#include "acerec/error.hpp"

namespace acerec::ag {

inline thread_local bool grad_enabled = true;

// Disables graph recording for the lifetime of the guard.
class NoGradGuard {
public:
    NoGradGuard() : prev_(grad_enabled) { grad_enabled = false; }
    ~NoGradGuard() { grad_enabled = prev_; }
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
    bool prev_;
};

template <typename T>
struct Node {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<T> value;
    std::vector<T> grad;
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward;

    std::vector<T>& grad_buffer() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

template <typename T>
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node<T>> node) : node_(std::move(node)) {}

    static Tensor zeros(std::size_t rows, std::size_t cols, bool requires_grad = false) {
        auto n = std::make_shared<Node<T>>();
        n->rows = rows;
        n->cols = cols;
        n->value.assign(rows * cols, T(0));
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(std::size_t rows, std::size_t cols, std::vector<T> values, bool requires_grad = false) {
        if (values.size() != rows * cols) throw ShapeError("tensor value count does not match shape");
        auto n = std::make_shared<Node<T>>();
        n->rows = rows;
        n->cols = cols;
        n->value = std::move(values);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    std::size_t rows() const { return node_->rows; }
    std::size_t cols() const { return node_->cols; }
    std::size_t size() const { return node_->value.size(); }
    bool defined() const { return static_cast<bool>(node_); }
    bool requires_grad() const { return node_->requires_grad; }

    std::span<T> data() { return node_->value; }
    std::span<const T> data() const { return node_->value; }
    const T* row(std::size_t r) const { return node_->value.data() + r * node_->cols; }
    T& at(std::size_t r, std::size_t c) { return node_->value[r * node_->cols + c]; }
    T at(std::size_t r, std::size_t c) const { return node_->value[r * node_->cols + c]; }
    T item() const {
        if (size() != 1) throw ShapeError("item() on a non-scalar tensor");
        return node_->value[0];
    }

    // Empty span until a backward pass has reached this node.
    std::span<const T> grad() const { return node_->grad; }
    std::span<T> mutable_grad() { return node_->grad_buffer(); }
    void zero_grad() { node_->grad.clear(); }

    Node<T>* node() const { return node_.get(); }
    const std::shared_ptr<Node<T>>& shared() const { return node_; }

private:
    std::shared_ptr<Node<T>> node_;
};

namespace detail {

template <typename T>
Tensor<T> make_result(std::size_t rows, std::size_t cols, std::vector<T> value,
                      std::initializer_list<const Tensor<T>*> inputs, std::function<void(Node<T>&)> backward) {
    auto n = std::make_shared<Node<T>>();
    n->rows = rows;
    n->cols = cols;
    n->value = std::move(value);
    if (grad_enabled) {
        bool any = false;
        for (const auto* in : inputs) any = any || in->requires_grad();
        if (any) {
            n->requires_grad = true;
            for (const auto* in : inputs) n->parents.push_back(in->shared());
            n->backward = std::move(backward);
        }
    }
    return Tensor<T>(std::move(n));
}

template <typename T>
void check_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" +
                         std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

template <typename T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using ConstMap = Eigen::Map<const RowMat<T>, 0, Eigen::OuterStride<>>;
template <typename T>
using MutMap = Eigen::Map<RowMat<T>, 0, Eigen::OuterStride<>>;

template <typename T>
ConstMap<T> cmap(const T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return ConstMap<T>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(stride)));
}

template <typename T>
MutMap<T> mmap(T* p, std::size_t rows, std::size_t cols, std::size_t stride) {
    return MutMap<T>(p, Eigen::Index(rows), Eigen::Index(cols), Eigen::OuterStride<>(Eigen::Index(stride)));
}

// C[n x m] += A[n x k] * B[k x m]
template <typename T>
void gemm_nn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    mmap(c, n, m, m).noalias() += cmap(a, n, k, k) * cmap(b, k, m, m);
}

// C[k x m] += A[n x k]^T * B[n x m]
template <typename T>
void gemm_tn(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    mmap(c, k, m, m).noalias() += cmap(a, n, k, k).transpose() * cmap(b, n, m, m);
}

// C[n x m] += A[n x k] * B[m x k]^T
template <typename T>
void gemm_nt(const T* a, const T* b, T* c, std::size_t n, std::size_t k, std::size_t m) {
    mmap(c, n, m, m).noalias() += cmap(a, n, k, k) * cmap(b, m, k, k).transpose();
}

template <typename T>
std::vector<T> transpose(const T* a, std::size_t rows, std::size_t cols) {
    std::vector<T> t(rows * cols);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t c = 0; c < cols; ++c) t[c * rows + r] = a[r * cols + c];
    return t;
}

template <typename T>
T dot(const T* a, const T* b, std::size_t n) {
    T s = T(0);
    for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

}  // namespace detail

// Runs reverse accumulation from a scalar. Gradients accumulate into every
// reachable node that requires them; call zero_grad on leaves between steps.
template <typename T>
void backward(const Tensor<T>& loss) {
    if (loss.size() != 1) throw ShapeError("backward() needs a scalar");
    if (!loss.requires_grad()) return;
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> visited;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{loss.node(), 0}};
    visited.insert(loss.node());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node<T>* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    loss.node()->grad_buffer()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && !n->grad.empty()) n->backward(*n);
    }
}

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::check_same_shape(a, b, "add");
    std::vector<T> out(a.data().begin(), a.data().end());
    const auto bv = b.data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {&a, &b}, [pa, pb](Node<T>& self) {
        for (auto* p : {pa, pb}) {
            if (!p->requires_grad) continue;
            auto& g = p->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.data().begin(), a.data().end());
    for (auto& v : out) v *= s;
    auto pa = a.node();
    return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {&a}, [pa, s](Node<T>& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * self.grad[i];
    });
}

// a [n x c] + row [1 x c] broadcast over rows.
template <typename T>
Tensor<T> add_row(const Tensor<T>& a, const Tensor<T>& row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: bias shape mismatch");
    std::vector<T> out(a.data().begin(), a.data().end());
    const std::size_t c = a.cols();
    const auto rv = row.data();
    for (std::size_t i = 0; i < a.rows(); ++i)
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] += rv[j];
    auto pa = a.node(), pr = row.node();
    return detail::make_result<T>(a.rows(), c, std::move(out), {&a, &row}, [pa, pr, c](Node<T>& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        }
        if (pr->requires_grad) {
            auto& g = pr->grad_buffer();
            for (std::size_t i = 0; i < self.rows; ++i)
                for (std::size_t j = 0; j < c; ++j) g[j] += self.grad[i * c + j];
        }
    });
}

template <typename T>
Tensor<T> sum(const Tensor<T>& a) {
    T s = T(0);
    for (auto v : a.data()) s += v;
    auto pa = a.node();
    return detail::make_result<T>(1, 1, {s}, {&a}, [pa](Node<T>& self) {
        auto& g = pa->grad_buffer();
        for (auto& v : g) v += self.grad[0];
    });
}

// a [n x k] * b [k x m]
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.rows()) throw ShapeError("matmul: inner dimensions differ");
    const std::size_t n = a.rows(), k = a.cols(), m = b.cols();
    std::vector<T> out(n * m, T(0));
    detail::gemm_nn(a.data().data(), b.data().data(), out.data(), n, k, m);
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(n, m, std::move(out), {&a, &b}, [pa, pb, n, k, m](Node<T>& self) {
        if (pa->requires_grad) detail::gemm_nt(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), n, m, k);
        if (pb->requires_grad) detail::gemm_tn(pa->value.data(), self.grad.data(), pb->grad_buffer().data(), n, k, m);
    });
}

// a [n x k] * b[m x k]^T
template <typename T>
Tensor<T> matmul_nt(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("matmul_nt: inner dimensions differ");
    const std::size_t n = a.rows(), k = a.cols(), m = b.rows();
    std::vector<T> out(n * m, T(0));
    detail::gemm_nt(a.data().data(), b.data().data(), out.data(), n, k, m);
    auto pa = a.node(), pb = b.node();
    return detail::make_result<T>(n, m, std::move(out), {&a, &b}, [pa, pb, n, k, m](Node<T>& self) {
        if (pa->requires_grad) detail::gemm_nn(self.grad.data(), pb->value.data(), pa->grad_buffer().data(), n, m, k);
        if (pb->requires_grad) detail::gemm_tn(self.grad.data(), pa->value.data(), pb->grad_buffer().data(), n, m, k);
    });
}

// x * W + b, the usual affine layer with W stored [in x out].
template <typename T>
Tensor<T> linear(const Tensor<T>& x, const Tensor<T>& w, const Tensor<T>& b) {
    return add_row(matmul(x, w), b);
}

template <typename T>
Tensor<T> gelu(const Tensor<T>& a) {
    std::vector<T> out(a.size());
    const auto av = a.data();
    constexpr double inv_sqrt2 = 0.70710678118654752440;
    for (std::size_t i = 0; i < out.size(); ++i) {
        const double x = av[i];
        out[i] = static_cast<T>(0.5 * x * (1.0 + std::erf(x * inv_sqrt2)));
    }
    auto pa = a.node();
    return detail::make_result<T>(a.rows(), a.cols(), std::move(out), {&a}, [pa](Node<T>& self) {
        auto& g = pa->grad_buffer();
        constexpr double inv_sqrt2 = 0.70710678118654752440;
        const double inv_sqrt_2pi = 0.5 * std::numbers::inv_sqrtpi * std::numbers::sqrt2;
        for (std::size_t i = 0; i < g.size(); ++i) {
            const double x = pa->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
            g[i] += static_cast<T>(self.grad[i] * (cdf + x * pdf));
        }
    });
}

// Row-wise layer normalization with learned gain and bias [1 x c].
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias, T eps = T(1e-5)) {
    const std::size_t n = x.rows(), c = x.cols();
    if (gain.size() != c || bias.size() != c) throw ShapeError("layer_norm: parameter shape mismatch");
    auto xhat = std::make_shared<std::vector<T>>(n * c);
    auto inv_std = std::make_shared<std::vector<T>>(n);
    std::vector<T> out(n * c);
    const auto xv = x.data();
    const auto gv = gain.data();
    const auto bv = bias.data();
    for (std::size_t i = 0; i < n; ++i) {
        T mean = T(0);
        for (std::size_t j = 0; j < c; ++j) mean += xv[i * c + j];
        mean /= T(c);
        T var = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T d = xv[i * c + j] - mean;
            var += d * d;
        }
        var /= T(c);
        const T is = T(1) / std::sqrt(var + eps);
        (*inv_std)[i] = is;
        for (std::size_t j = 0; j < c; ++j) {
            const T h = (xv[i * c + j] - mean) * is;
            (*xhat)[i * c + j] = h;
            out[i * c + j] = h * gv[j] + bv[j];
        }
    }
    auto px = x.node(), pg = gain.node(), pb = bias.node();
    return detail::make_result<T>(n, c, std::move(out), {&x, &gain, &bias},
                                  [px, pg, pb, xhat, inv_std, n, c](Node<T>& self) {
        const auto& dy = self.grad;
        if (pg->requires_grad || pb->requires_grad) {
            auto* dg = pg->requires_grad ? pg->grad_buffer().data() : nullptr;
            auto* db = pb->requires_grad ? pb->grad_buffer().data() : nullptr;
            for (std::size_t i = 0; i < n; ++i)
                for (std::size_t j = 0; j < c; ++j) {
                    if (dg) dg[j] += dy[i * c + j] * (*xhat)[i * c + j];
                    if (db) db[j] += dy[i * c + j];
                }
        }
        if (!px->requires_grad) return;
        auto& dx = px->grad_buffer();
        std::vector<T> dxh(c);
        for (std::size_t i = 0; i < n; ++i) {
            T mean_d = T(0), mean_dx = T(0);
            for (std::size_t j = 0; j < c; ++j) {
                dxh[j] = dy[i * c + j] * pg->value[j];
                mean_d += dxh[j];
                mean_dx += dxh[j] * (*xhat)[i * c + j];
            }
            mean_d /= T(c);
            mean_dx /= T(c);
            for (std::size_t j = 0; j < c; ++j)
                dx[i * c + j] += (*inv_std)[i] * (dxh[j] - mean_d - (*xhat)[i * c + j] * mean_dx);
        }
    });
}

// y = x / (||x|| + eps) per row.
template <typename T>
Tensor<T> normalize_rows(const Tensor<T>& x, T eps = T(1e-12)) {
    const std::size_t n = x.rows(), c = x.cols();
    auto norms = std::make_shared<std::vector<T>>(n);
    std::vector<T> out(n * c);
    const auto xv = x.data();
    for (std::size_t i = 0; i < n; ++i) {
        const T nr = std::sqrt(detail::dot(xv.data() + i * c, xv.data() + i * c, c));
        (*norms)[i] = nr;
        for (std::size_t j = 0; j < c; ++j) out[i * c + j] = xv[i * c + j] / (nr + eps);
    }
    auto px = x.node();
    return detail::make_result<T>(n, c, std::move(out), {&x}, [px, norms, n, c, eps](Node<T>& self) {
        auto& dx = px->grad_buffer();
        for (std::size_t i = 0; i < n; ++i) {
            const T nr = (*norms)[i];
            const T denom = nr + eps;
            const T* xi = px->value.data() + i * c;
            const T* gi = self.grad.data() + i * c;
            const T proj = nr > T(0) ? detail::dot(xi, gi, c) / (nr * denom * denom) : T(0);
            for (std::size_t j = 0; j < c; ++j) dx[i * c + j] += gi[j] / denom - xi[j] * proj;
        }
    });
}

// Mean over consecutive groups of `group` rows: [n*group x c] -> [n x c].
template <typename T>
Tensor<T> group_mean(const Tensor<T>& x, std::size_t group) {
    if (group == 0 || x.rows() % group != 0) throw ShapeError("group_mean: rows not divisible by group");
    const std::size_t n = x.rows() / group, c = x.cols();
    std::vector<T> out(n * c, T(0));
    const auto xv = x.data();
    const T inv = T(1) / T(group);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t g = 0; g < group; ++g)
            for (std::size_t j = 0; j < c; ++j) out[i * c + j] += xv[(i * group + g) * c + j];
    for (auto& v : out) v *= inv;
    auto px = x.node();
    return detail::make_result<T>(n, c, std::move(out), {&x}, [px, n, c, group, inv](Node<T>& self) {
        auto& dx = px->grad_buffer();
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t g = 0; g < group; ++g)
                for (std::size_t j = 0; j < c; ++j) dx[(i * group + g) * c + j] += inv * self.grad[i * c + j];
    });
}

// out row r = src row idx[r]; gradients scatter-add back.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, std::shared_ptr<const std::vector<std::uint32_t>> idx) {
    const std::size_t c = src.cols();
    std::vector<T> out(idx->size() * c);
    const auto sv = src.data();
    for (std::size_t r = 0; r < idx->size(); ++r) {
        const auto s = (*idx)[r];
        if (s >= src.rows()) throw ShapeError("gather_rows: index out of range");
        std::copy_n(sv.data() + s * c, c, out.data() + r * c);
    }
    auto ps = src.node();
    return detail::make_result<T>(idx->size(), c, std::move(out), {&src}, [ps, idx, c](Node<T>& self) {
        auto& g = ps->grad_buffer();
        for (std::size_t r = 0; r < idx->size(); ++r) {
            T* dst = g.data() + (*idx)[r] * c;
            const T* from = self.grad.data() + r * c;
            for (std::size_t j = 0; j < c; ++j) dst[j] += from[j];
        }
    });
}

template <typename T>
Tensor<T> gather_rows(const Tensor<T>& src, std::vector<std::uint32_t> idx) {
    return gather_rows(src, std::make_shared<const std::vector<std::uint32_t>>(std::move(idx)));
}

template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.cols() != b.cols()) throw ShapeError("concat_rows: column mismatch");
    std::vector<T> out(a.data().begin(), a.data().end());
    out.insert(out.end(), b.data().begin(), b.data().end());
    auto pa = a.node(), pb = b.node();
    const std::size_t na = a.size();
    return detail::make_result<T>(a.rows() + b.rows(), a.cols(), std::move(out), {&a, &b},
                                  [pa, pb, na](Node<T>& self) {
        if (pa->requires_grad) {
            auto& g = pa->grad_buffer();
            for (std::size_t i = 0; i < na; ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            auto& g = pb->grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[na + i];
        }
    });
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& a, std::size_t rows, std::size_t cols) {
    if (rows * cols != a.size()) throw ShapeError("reshape: element count changes");
    std::vector<T> out(a.data().begin(), a.data().end());
    auto pa = a.node();
    return detail::make_result<T>(rows, cols, std::move(out), {&a}, [pa](Node<T>& self) {
        auto& g = pa->grad_buffer();
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// Sum over rows of -log softmax(logits[r])[target[r]].
template <typename T>
Tensor<T> cross_entropy_sum(const Tensor<T>& logits, std::shared_ptr<const std::vector<std::uint32_t>> targets) {
    const std::size_t n = logits.rows(), c = logits.cols();
    if (targets->size() != n) throw ShapeError("cross_entropy_sum: one target per row required");
    auto probs = std::make_shared<std::vector<T>>(n * c);
    const auto lv = logits.data();
    T total = T(0);
    for (std::size_t i = 0; i < n; ++i) {
        const T* li = lv.data() + i * c;
        const auto t = (*targets)[i];
        if (t >= c) throw ShapeError("cross_entropy_sum: target out of range");
        T mx = li[0];
        for (std::size_t j = 1; j < c; ++j) mx = std::max(mx, li[j]);
        T z = T(0);
        for (std::size_t j = 0; j < c; ++j) {
            const T e = std::exp(li[j] - mx);
            (*probs)[i * c + j] = e;
            z += e;
        }
        for (std::size_t j = 0; j < c; ++j) (*probs)[i * c + j] /= z;
        total += -(li[t] - mx - std::log(z));
    }
    auto pl = logits.node();
    return detail::make_result<T>(1, 1, {total}, {&logits}, [pl, probs, targets, n, c](Node<T>& self) {
        auto& g = pl->grad_buffer();
        const T up = self.grad[0];
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t j = 0; j < c; ++j) g[i * c + j] += up * (*probs)[i * c + j];
            g[i * c + (*targets)[i]] -= up;
        }
    });
}

// Per-digit logits: row p*m+j of `queries` scored against rows j*M..j*M+M-1
// of `codewords`. Output is [P*m x M].
template <typename T>
Tensor<T> digit_logits(const Tensor<T>& queries, const Tensor<T>& codewords, std::size_t m, std::size_t M) {
    const std::size_t d = queries.cols();
    if (codewords.cols() != d || codewords.rows() != m * M || queries.rows() % m != 0)
        throw ShapeError("digit_logits: shape mismatch");
    const std::size_t rows = queries.rows(), P = rows / m;
    std::vector<T> out(rows * M, T(0));
    // digit j: rows j, j+m, j+2m, ... of queries against codebook block j
    for (std::size_t j = 0; j < m; ++j)
        detail::mmap(out.data() + j * M, P, M, m * M).noalias() +=
            detail::cmap(queries.data().data() + j * d, P, d, m * d) *
            detail::cmap(codewords.data().data() + j * M * d, M, d, d).transpose();
    auto pq = queries.node(), pe = codewords.node();
    return detail::make_result<T>(rows, M, std::move(out), {&queries, &codewords}, [pq, pe, m, M, d, P](Node<T>& self) {
        for (std::size_t j = 0; j < m; ++j) {
            const auto g = detail::cmap(self.grad.data() + j * M, P, M, m * M);
            if (pq->requires_grad)
                detail::mmap(pq->grad_buffer().data() + j * d, P, d, m * d).noalias() +=
                    g * detail::cmap(pe->value.data() + j * M * d, M, d, d);
            if (pe->requires_grad)
                detail::mmap(pe->grad_buffer().data() + j * M * d, M, d, d).noalias() +=
                    g.transpose() * detail::cmap(pq->value.data() + j * d, P, d, m * d);
        }
    });
}

// One attention problem inside a batched call: query rows [q0, q0+nq) attend
// to key/value rows [k0, k0+nk). `mask`, when set, is nq x nk with 1 = allowed.
struct AttnSegment {
    std::size_t q0 = 0, nq = 0, k0 = 0, nk = 0;
    std::shared_ptr<const std::vector<std::uint8_t>> mask;
};

template <typename T>
struct AttentionOutput {
    Tensor<T> out;
    // Softmax weights: for segment s, head h, query i, key j at
    // offsets[s] + (h * nq + i) * nk + j. Masked entries are 0.
    std::shared_ptr<const std::vector<T>> probs;
    std::vector<std::size_t> offsets;
};

// Multi-head scaled dot-product attention over pre-projected q, k, v.
template <typename T>
AttentionOutput<T> attention(const Tensor<T>& q, const Tensor<T>& k, const Tensor<T>& v, std::size_t heads,
                             std::shared_ptr<const std::vector<AttnSegment>> segments) {
    const std::size_t d = q.cols();
    if (k.cols() != d || v.cols() != d || k.rows() != v.rows()) throw ShapeError("attention: q/k/v shape mismatch");
    if (heads == 0 || d % heads != 0) throw ShapeError("attention: model dim not divisible by heads");
    const std::size_t dh = d / heads;
    const T scale = T(1) / std::sqrt(T(dh));

    std::vector<std::size_t> offsets;
    std::size_t total = 0;
    for (const auto& s : *segments) {
        if (s.q0 + s.nq > q.rows() || s.k0 + s.nk > k.rows()) throw ShapeError("attention: segment out of range");
        if (s.mask && s.mask->size() != s.nq * s.nk) throw ShapeError("attention: mask shape mismatch");
        offsets.push_back(total);
        total += heads * s.nq * s.nk;
    }
    auto probs = std::make_shared<std::vector<T>>(total, T(0));
    std::vector<T> out(q.rows() * d, T(0));
    const T* qv = q.data().data();
    const T* kv = k.data().data();
    const T* vv = v.data().data();
    constexpr T neg_inf = -std::numeric_limits<T>::infinity();

    for (std::size_t si = 0; si < segments->size(); ++si) {
        const auto& s = (*segments)[si];
        if (s.nq == 0 || s.nk == 0) continue;
        const std::uint8_t* mask = s.mask ? s.mask->data() : nullptr;
        for (std::size_t h = 0; h < heads; ++h) {
            T* pbase = probs->data() + offsets[si] + h * s.nq * s.nk;
            auto S = detail::mmap(pbase, s.nq, s.nk, s.nk);
            S.noalias() = detail::cmap(qv + s.q0 * d + h * dh, s.nq, dh, d) *
                          detail::cmap(kv + s.k0 * d + h * dh, s.nk, dh, d).transpose();
            for (std::size_t i = 0; i < s.nq; ++i) {
                T* p = pbase + i * s.nk;
                const std::uint8_t* mi = mask ? mask + i * s.nk : nullptr;
                T mx = neg_inf;
                for (std::size_t j = 0; j < s.nk; ++j) {
                    if (mi && !mi[j]) continue;
                    p[j] *= scale;
                    mx = std::max(mx, p[j]);
                }
                if (mx == neg_inf) {  // nothing visible: zero output
                    std::fill_n(p, s.nk, T(0));
                    continue;
                }
                T z = T(0);
                for (std::size_t j = 0; j < s.nk; ++j) {
                    if (mi && !mi[j]) {
                        p[j] = T(0);
                        continue;
                    }
                    p[j] = std::exp(p[j] - mx);
                    z += p[j];
                }
                for (std::size_t j = 0; j < s.nk; ++j) p[j] /= z;
            }
            detail::mmap(out.data() + s.q0 * d + h * dh, s.nq, dh, d).noalias() +=
                detail::cmap(pbase, s.nq, s.nk, s.nk) * detail::cmap(vv + s.k0 * d + h * dh, s.nk, dh, d);
        }
    }

    auto pq = q.node(), pk = k.node(), pv = v.node();
    auto offs = std::make_shared<std::vector<std::size_t>>(offsets);
    auto result = detail::make_result<T>(q.rows(), d, std::move(out), {&q, &k, &v},
                                         [pq, pk, pv, probs, offs, segments, heads, dh, d, scale](Node<T>& self) {
        T* gq = pq->requires_grad ? pq->grad_buffer().data() : nullptr;
        T* gk = pk->requires_grad ? pk->grad_buffer().data() : nullptr;
        T* gv = pv->requires_grad ? pv->grad_buffer().data() : nullptr;
        detail::RowMat<T> ds;
        for (std::size_t si = 0; si < segments->size(); ++si) {
            const auto& s = (*segments)[si];
            if (s.nq == 0 || s.nk == 0) continue;
            for (std::size_t h = 0; h < heads; ++h) {
                const auto P = detail::cmap(probs->data() + (*offs)[si] + h * s.nq * s.nk, s.nq, s.nk, s.nk);
                const auto G = detail::cmap(self.grad.data() + s.q0 * d + h * dh, s.nq, dh, d);
                const auto Q = detail::cmap(pq->value.data() + s.q0 * d + h * dh, s.nq, dh, d);
                const auto K = detail::cmap(pk->value.data() + s.k0 * d + h * dh, s.nk, dh, d);
                const auto V = detail::cmap(pv->value.data() + s.k0 * d + h * dh, s.nk, dh, d);
                if (gv) detail::mmap(gv + s.k0 * d + h * dh, s.nk, dh, d).noalias() += P.transpose() * G;
                if (!gq && !gk) continue;
                ds.noalias() = G * V.transpose();
                for (Eigen::Index i = 0; i < ds.rows(); ++i) {
                    T acc = T(0);
                    for (Eigen::Index j = 0; j < ds.cols(); ++j) acc += P(i, j) * ds(i, j);
                    for (Eigen::Index j = 0; j < ds.cols(); ++j) ds(i, j) = P(i, j) * (ds(i, j) - acc) * scale;
                }
                if (gq) detail::mmap(gq + s.q0 * d + h * dh, s.nq, dh, d).noalias() += ds * K;
                if (gk) detail::mmap(gk + s.k0 * d + h * dh, s.nk, dh, d).noalias() += ds.transpose() * Q;
            }
        }
    });
    return {std::move(result), std::move(probs), std::move(offsets)};
}

}  // namespace acerec::ag
