#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "relpos/error.hpp"
#include "relpos/rng.hpp"

namespace relpos {

using Shape = std::vector<std::int64_t>;

inline std::int64_t shape_numel(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << 'x';
        os << s[i];
    }
    os << ']';
    return os.str();
}

template <typename T>
struct Node {
    Shape shape;
    std::vector<T> value;
    std::vector<T> grad;  // empty until backward touches this node
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node<T>>> parents;
    std::function<void(Node<T>&)> backward;

    std::vector<T>& ensure_grad() {
        if (grad.empty()) grad.assign(value.size(), T(0));
        return grad;
    }
};

// Value-semantics handle over a graph node. Copies share the node, matching
// how results flow through a compute graph; the underlying buffer is treated
// as immutable after construction except for grad accumulation.
template <typename T>
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value.assign(static_cast<std::size_t>(shape_numel(t.n_->shape)), T(0));
        return t;
    }

    static Tensor full(Shape shape, T v) {
        Tensor t = zeros(std::move(shape));
        std::fill(t.n_->value.begin(), t.n_->value.end(), v);
        return t;
    }

    static Tensor scalar(T v) { return full({1}, v); }

    static Tensor from_data(Shape shape, std::vector<T> data) {
        if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
            throw ShapeError("from_data: shape " + shape_str(shape) + " does not match " +
                             std::to_string(data.size()) + " values");
        }
        Tensor t;
        t.n_ = std::make_shared<Node<T>>();
        t.n_->shape = std::move(shape);
        t.n_->value = std::move(data);
        return t;
    }

    static Tensor randn(Shape shape, Rng& rng, T stddev) {
        Tensor t = zeros(std::move(shape));
        for (auto& v : t.n_->value) v = static_cast<T>(rng.next_normal()) * stddev;
        return t;
    }

    bool defined() const { return n_ != nullptr; }

    Tensor& set_requires_grad(bool b = true) {
        n_->requires_grad = b;
        return *this;
    }
    bool requires_grad() const { return n_->requires_grad; }

    const Shape& shape() const { return n_->shape; }
    int rank() const { return static_cast<int>(n_->shape.size()); }
    std::int64_t dim(int i) const {
        if (i < 0) i += rank();
        return n_->shape[static_cast<std::size_t>(i)];
    }
    std::int64_t numel() const { return static_cast<std::int64_t>(n_->value.size()); }

    const std::vector<T>& values() const { return n_->value; }
    // In-place mutation is reserved for leaf tensors (parameter updates,
    // finite-difference probes); mutating an interior node invalidates
    // nothing structurally but breaks recorded backward closures.
    std::vector<T>& mutable_values() { return n_->value; }

    bool has_grad() const { return !n_->grad.empty(); }
    const std::vector<T>& grad() const {
        if (n_->grad.empty()) throw ContractError("grad accessed before backward populated it");
        return n_->grad;
    }
    void zero_grad() { n_->grad.clear(); }

    T item() const {
        if (numel() != 1) throw ContractError("item() on non-scalar tensor " + shape_str(shape()));
        return n_->value[0];
    }

    T at(std::initializer_list<std::int64_t> idx) const {
        if (static_cast<int>(idx.size()) != rank()) {
            throw IndexError("at(): rank mismatch for " + shape_str(shape()));
        }
        std::int64_t flat = 0;
        int i = 0;
        for (auto v : idx) {
            const auto d = n_->shape[static_cast<std::size_t>(i)];
            if (v < 0 || v >= d) throw IndexError("at(): index out of range");
            flat = flat * d + v;
            ++i;
        }
        return n_->value[static_cast<std::size_t>(flat)];
    }

    // Reverse-mode sweep from a scalar root. Gradients along multiple paths
    // accumulate by addition; traversal is exact reverse topological order.
    void backward() const {
        if (numel() != 1) {
            throw ContractError("backward() requires a scalar root, got " + shape_str(shape()));
        }
        if (!n_->requires_grad) {
            throw ContractError("backward() on a graph with no differentiable leaves");
        }
        std::vector<Node<T>*> topo;
        std::unordered_set<Node<T>*> visited;
        std::vector<std::pair<Node<T>*, std::size_t>> stack;
        visited.insert(n_.get());
        stack.emplace_back(n_.get(), 0);
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                Node<T>* p = node->parents[next++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                topo.push_back(node);
                stack.pop_back();
            }
        }
        n_->ensure_grad()[0] = T(1);
        for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
            if ((*it)->backward) (*it)->backward(**it);
        }
    }

    std::shared_ptr<Node<T>> node() const { return n_; }

    static Tensor wrap(std::shared_ptr<Node<T>> n) {
        Tensor t;
        t.n_ = std::move(n);
        return t;
    }

  private:
    std::shared_ptr<Node<T>> n_;
};

template <typename T>
void check_finite(const Tensor<T>& t, const char* context) {
    for (const T v : t.values()) {
        if (!std::isfinite(static_cast<double>(v))) {
            throw NumericError(std::string("non-finite value in ") + context);
        }
    }
}

namespace detail {

template <typename T>
std::shared_ptr<Node<T>> make_result(Shape shape, std::vector<std::shared_ptr<Node<T>>> parents) {
    auto n = std::make_shared<Node<T>>();
    n->shape = std::move(shape);
    n->value.assign(static_cast<std::size_t>(shape_numel(n->shape)), T(0));
    for (const auto& p : parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) n->parents = std::move(parents);
    return n;
}

// One slice of C[m x n] (+)= A'[m x K] * B'[K x n], where A' is the stored A
// optionally transposed (stored [K x m] when ta) and likewise for B
// (stored [n x K] when tb). Row-parallel safe: each output row is written by
// exactly one iteration with a fixed inner accumulation order.
template <typename T>
void mm_slice(const T* A, const T* B, T* C, std::int64_t m, std::int64_t K, std::int64_t n,
              bool ta, bool tb, bool accumulate) {
    const bool par = m * K * n >= 16384;
    (void)par;
    if (!ta && !tb) {
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t i = 0; i < m; ++i) {
            T* crow = C + i * n;
            if (!accumulate) std::fill(crow, crow + n, T(0));
            const T* arow = A + i * K;
            for (std::int64_t p = 0; p < K; ++p) {
                const T a = arow[p];
                if (a == T(0)) continue;
                const T* brow = B + p * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    } else if (!ta && tb) {
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t i = 0; i < m; ++i) {
            const T* arow = A + i * K;
            T* crow = C + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* brow = B + j * K;
                T acc = T(0);
                for (std::int64_t p = 0; p < K; ++p) acc += arow[p] * brow[p];
                if (accumulate) {
                    crow[j] += acc;
                } else {
                    crow[j] = acc;
                }
            }
        }
    } else if (ta && !tb) {
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t i = 0; i < m; ++i) {
            T* crow = C + i * n;
            if (!accumulate) std::fill(crow, crow + n, T(0));
            for (std::int64_t p = 0; p < K; ++p) {
                const T a = A[p * m + i];
                if (a == T(0)) continue;
                const T* brow = B + p * n;
                for (std::int64_t j = 0; j < n; ++j) crow[j] += a * brow[j];
            }
        }
    } else {
#pragma omp parallel for schedule(static) if (par)
        for (std::int64_t i = 0; i < m; ++i) {
            T* crow = C + i * n;
            for (std::int64_t j = 0; j < n; ++j) {
                const T* brow = B + j * K;
                T acc = T(0);
                for (std::int64_t p = 0; p < K; ++p) acc += A[p * m + i] * brow[p];
                if (accumulate) {
                    crow[j] += acc;
                } else {
                    crow[j] = acc;
                }
            }
        }
    }
}

struct MatmulDims {
    std::int64_t batch;  // product of leading dims of a
    std::int64_t m, K, n;
    bool b_batched;
};

}  // namespace detail

// Matrix product over the last two dimensions. `a` may carry leading batch
// dimensions; `b` is either a plain matrix (shared across the batch) or
// carries identical leading dimensions. trans_a / trans_b multiply by the
// transpose without materializing it.
template <typename T>
Tensor<T> matmul(const Tensor<T>& a, const Tensor<T>& b, bool trans_a = false,
                 bool trans_b = false) {
    if (a.rank() < 2 || b.rank() < 2) {
        throw ShapeError("matmul: ranks must be >= 2, got " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    if (b.rank() != 2 && b.rank() != a.rank()) {
        throw ShapeError("matmul: b must be 2-d or match a's rank, got " + shape_str(a.shape()) +
                         " and " + shape_str(b.shape()));
    }
    const bool b_batched = b.rank() == a.rank() && a.rank() > 2;
    if (b_batched) {
        for (int i = 0; i < a.rank() - 2; ++i) {
            if (a.dim(i) != b.dim(i)) {
                throw ShapeError("matmul: batch dims differ, " + shape_str(a.shape()) + " vs " +
                                 shape_str(b.shape()));
            }
        }
    }
    const std::int64_t a_rows = a.dim(-2), a_cols = a.dim(-1);
    const std::int64_t b_rows = b.dim(-2), b_cols = b.dim(-1);
    const std::int64_t m = trans_a ? a_cols : a_rows;
    const std::int64_t K = trans_a ? a_rows : a_cols;
    const std::int64_t Kb = trans_b ? b_cols : b_rows;
    const std::int64_t n = trans_b ? b_rows : b_cols;
    if (K != Kb) {
        throw ShapeError("matmul: inner dimensions disagree, " + shape_str(a.shape()) +
                         (trans_a ? "^T" : "") + " vs " + shape_str(b.shape()) +
                         (trans_b ? "^T" : ""));
    }
    Shape out_shape(a.shape().begin(), a.shape().end() - 2);
    out_shape.push_back(m);
    out_shape.push_back(n);
    std::int64_t batch = 1;
    for (int i = 0; i < a.rank() - 2; ++i) batch *= a.dim(i);

    auto out = detail::make_result<T>(std::move(out_shape), {a.node(), b.node()});
    const T* A = a.values().data();
    const T* B = b.values().data();
    T* C = out->value.data();
    const std::int64_t a_sz = a_rows * a_cols, b_sz = b_rows * b_cols, c_sz = m * n;
    for (std::int64_t s = 0; s < batch; ++s) {
        detail::mm_slice(A + s * a_sz, B + (b_batched ? s * b_sz : 0), C + s * c_sz, m, K, n,
                         trans_a, trans_b, false);
    }

    if (out->requires_grad) {
        const detail::MatmulDims dims{batch, m, K, n, b_batched};
        out->backward = [dims, trans_a, trans_b, a_sz, b_sz, c_sz](Node<T>& self) {
            auto& an = *self.parents[0];
            auto& bn = *self.parents[1];
            const T* dC = self.grad.data();
            const T* Av = an.value.data();
            const T* Bv = bn.value.data();
            if (an.requires_grad) {
                T* dA = an.ensure_grad().data();
                for (std::int64_t s = 0; s < dims.batch; ++s) {
                    const T* dCs = dC + s * c_sz;
                    const T* Bs = Bv + (dims.b_batched ? s * b_sz : 0);
                    T* dAs = dA + s * a_sz;
                    if (!trans_a) {
                        // dA[m x K] += dC[m x n] * B'^T[n x K]
                        detail::mm_slice(dCs, Bs, dAs, dims.m, dims.n, dims.K, false, !trans_b,
                                         true);
                    } else {
                        // dA stored [K x m] += B'[K x n] * dC^T[n x m]
                        detail::mm_slice(Bs, dCs, dAs, dims.K, dims.n, dims.m, trans_b, true,
                                         true);
                    }
                }
            }
            if (bn.requires_grad) {
                T* dB = bn.ensure_grad().data();
                for (std::int64_t s = 0; s < dims.batch; ++s) {
                    const T* dCs = dC + s * c_sz;
                    const T* As = Av + s * a_sz;
                    T* dBs = dB + (dims.b_batched ? s * b_sz : 0);
                    if (!trans_b) {
                        // dB[K x n] += A'^T[K x m] * dC[m x n]
                        detail::mm_slice(As, dCs, dBs, dims.K, dims.m, dims.n, !trans_a, false,
                                         true);
                    } else {
                        // dB stored [n x K] += dC^T[n x m] * A'[m x K]
                        detail::mm_slice(dCs, As, dBs, dims.n, dims.m, dims.K, true, trans_a,
                                         true);
                    }
                }
            }
        };
    }
    return Tensor<T>::wrap(out);
}

namespace detail {

template <typename T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape()) {
        throw ShapeError(std::string(op) + ": shapes differ, " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
    }
}

}  // namespace detail

template <typename T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    auto out = detail::make_result<T>(a.shape(), {a.node(), b.node()});
    const std::int64_t n = a.numel();
    const T* av = a.values().data();
    const T* bv = b.values().data();
    T* ov = out->value.data();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] + bv[i];
    if (out->requires_grad) {
        out->backward = [](Node<T>& self) {
            for (auto& p : self.parents) {
                if (!p->requires_grad) continue;
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    auto out = detail::make_result<T>(a.shape(), {a.node(), b.node()});
    const std::int64_t n = a.numel();
    const T* av = a.values().data();
    const T* bv = b.values().data();
    T* ov = out->value.data();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] - bv[i];
    if (out->requires_grad) {
        out->backward = [](Node<T>& self) {
            auto& a0 = *self.parents[0];
            auto& b0 = *self.parents[1];
            if (a0.requires_grad) {
                auto& g = a0.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (b0.requires_grad) {
                auto& g = b0.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] -= self.grad[i];
            }
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    auto out = detail::make_result<T>(a.shape(), {a.node(), b.node()});
    const std::int64_t n = a.numel();
    const T* av = a.values().data();
    const T* bv = b.values().data();
    T* ov = out->value.data();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * bv[i];
    if (out->requires_grad) {
        out->backward = [](Node<T>& self) {
            auto& a0 = *self.parents[0];
            auto& b0 = *self.parents[1];
            if (a0.requires_grad) {
                auto& g = a0.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * b0.value[i];
            }
            if (b0.requires_grad) {
                auto& g = b0.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * a0.value[i];
            }
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> scale(const Tensor<T>& a, T c) {
    auto out = detail::make_result<T>(a.shape(), {a.node()});
    const std::int64_t n = a.numel();
    const T* av = a.values().data();
    T* ov = out->value.data();
    for (std::int64_t i = 0; i < n; ++i) ov[i] = av[i] * c;
    if (out->requires_grad) {
        out->backward = [c](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * c;
        };
    }
    return Tensor<T>::wrap(out);
}

// x[..., C] + bias[C], bias broadcast over every leading dimension.
template <typename T>
Tensor<T> add_bias(const Tensor<T>& x, const Tensor<T>& bias) {
    if (bias.rank() != 1 || bias.dim(0) != x.dim(-1)) {
        throw ShapeError("add_bias: bias " + shape_str(bias.shape()) + " does not match last dim of " +
                         shape_str(x.shape()));
    }
    auto out = detail::make_result<T>(x.shape(), {x.node(), bias.node()});
    const std::int64_t C = x.dim(-1);
    const std::int64_t rows = x.numel() / C;
    const T* xv = x.values().data();
    const T* bv = bias.values().data();
    T* ov = out->value.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        for (std::int64_t c = 0; c < C; ++c) ov[r * C + c] = xv[r * C + c] + bv[c];
    }
    if (out->requires_grad) {
        out->backward = [C, rows](Node<T>& self) {
            auto& xn = *self.parents[0];
            auto& bn = *self.parents[1];
            if (xn.requires_grad) {
                auto& g = xn.ensure_grad();
                for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
            }
            if (bn.requires_grad) {
                auto& g = bn.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < C; ++c) g[static_cast<std::size_t>(c)] +=
                        self.grad[static_cast<std::size_t>(r * C + c)];
                }
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Row gather: out[r, :] = table[ids[r], :], with the output's leading shape
// given by `lead_shape` (ids.size() == numel(lead_shape)). Duplicate ids are
// allowed; their gradients accumulate.
template <typename T>
Tensor<T> gather_rows(const Tensor<T>& table, const std::vector<std::int64_t>& ids,
                      Shape lead_shape) {
    if (table.rank() != 2) throw ShapeError("gather_rows: table must be 2-d");
    if (shape_numel(lead_shape) != static_cast<std::int64_t>(ids.size())) {
        throw ShapeError("gather_rows: lead shape does not match id count");
    }
    const std::int64_t R = table.dim(0), C = table.dim(1);
    for (auto id : ids) {
        if (id < 0 || id >= R) {
            throw IndexError("gather_rows: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(R) + ")");
        }
    }
    Shape out_shape = std::move(lead_shape);
    out_shape.push_back(C);
    auto out = detail::make_result<T>(std::move(out_shape), {table.node()});
    const T* tv = table.values().data();
    T* ov = out->value.data();
    const std::int64_t N = static_cast<std::int64_t>(ids.size());
#pragma omp parallel for schedule(static) if (N * C >= 16384)
    for (std::int64_t r = 0; r < N; ++r) {
        std::memcpy(ov + r * C, tv + ids[static_cast<std::size_t>(r)] * C,
                    static_cast<std::size_t>(C) * sizeof(T));
    }
    if (out->requires_grad) {
        out->backward = [ids, C](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            // scatter-add must stay serial: duplicate ids share rows
            for (std::size_t r = 0; r < ids.size(); ++r) {
                const T* src = self.grad.data() + static_cast<std::int64_t>(r) * C;
                T* dst = g.data() + ids[r] * C;
                for (std::int64_t c = 0; c < C; ++c) dst[c] += src[c];
            }
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> reshape(const Tensor<T>& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel()) {
        throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " +
                         shape_str(new_shape));
    }
    auto out = detail::make_result<T>(std::move(new_shape), {x.node()});
    out->value = x.values();
    if (out->requires_grad) {
        out->backward = [](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> slice_last(const Tensor<T>& x, std::int64_t offset, std::int64_t len) {
    const std::int64_t C = x.dim(-1);
    if (offset < 0 || len <= 0 || offset + len > C) {
        throw ShapeError("slice_last: [" + std::to_string(offset) + ", " +
                         std::to_string(offset + len) + ") out of " + shape_str(x.shape()));
    }
    Shape out_shape = x.shape();
    out_shape.back() = len;
    auto out = detail::make_result<T>(std::move(out_shape), {x.node()});
    const std::int64_t rows = x.numel() / C;
    const T* xv = x.values().data();
    T* ov = out->value.data();
    for (std::int64_t r = 0; r < rows; ++r) {
        std::memcpy(ov + r * len, xv + r * C + offset, static_cast<std::size_t>(len) * sizeof(T));
    }
    if (out->requires_grad) {
        out->backward = [offset, len, C, rows](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t r = 0; r < rows; ++r) {
                for (std::int64_t c = 0; c < len; ++c) {
                    g[static_cast<std::size_t>(r * C + offset + c)] +=
                        self.grad[static_cast<std::size_t>(r * len + c)];
                }
            }
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> concat_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("concat_last: no inputs");
    Shape lead(parts[0].shape().begin(), parts[0].shape().end() - 1);
    std::int64_t C = 0;
    std::vector<std::int64_t> widths;
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& p : parts) {
        Shape pl(p.shape().begin(), p.shape().end() - 1);
        if (pl != lead) throw ShapeError("concat_last: leading dims differ");
        widths.push_back(p.dim(-1));
        C += p.dim(-1);
        parents.push_back(p.node());
    }
    Shape out_shape = lead;
    out_shape.push_back(C);
    auto out = detail::make_result<T>(std::move(out_shape), std::move(parents));
    const std::int64_t rows = shape_numel(lead);
    T* ov = out->value.data();
    std::int64_t off = 0;
    for (std::size_t pi = 0; pi < parts.size(); ++pi) {
        const T* pv = parts[pi].values().data();
        const std::int64_t w = widths[pi];
        for (std::int64_t r = 0; r < rows; ++r) {
            std::memcpy(ov + r * C + off, pv + r * w, static_cast<std::size_t>(w) * sizeof(T));
        }
        off += w;
    }
    if (out->requires_grad) {
        out->backward = [widths, C, rows](Node<T>& self) {
            std::int64_t off = 0;
            for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                const std::int64_t w = widths[pi];
                auto& p = *self.parents[pi];
                if (p.requires_grad) {
                    auto& g = p.ensure_grad();
                    for (std::int64_t r = 0; r < rows; ++r) {
                        for (std::int64_t c = 0; c < w; ++c) {
                            g[static_cast<std::size_t>(r * w + c)] +=
                                self.grad[static_cast<std::size_t>(r * C + off + c)];
                        }
                    }
                }
                off += w;
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Stacks same-shape tensors along a new trailing axis:
// out[..., l] = parts[l][...].
template <typename T>
Tensor<T> stack_last(const std::vector<Tensor<T>>& parts) {
    if (parts.empty()) throw ContractError("stack_last: no inputs");
    const Shape lead = parts[0].shape();
    std::vector<std::shared_ptr<Node<T>>> parents;
    for (const auto& p : parts) {
        if (p.shape() != lead) throw ShapeError("stack_last: shapes differ");
        parents.push_back(p.node());
    }
    const std::int64_t P = static_cast<std::int64_t>(parts.size());
    Shape out_shape = lead;
    out_shape.push_back(P);
    auto out = detail::make_result<T>(std::move(out_shape), std::move(parents));
    const std::int64_t rows = shape_numel(lead);
    T* ov = out->value.data();
    for (std::int64_t l = 0; l < P; ++l) {
        const T* pv = parts[static_cast<std::size_t>(l)].values().data();
        for (std::int64_t r = 0; r < rows; ++r) ov[r * P + l] = pv[r];
    }
    if (out->requires_grad) {
        out->backward = [P, rows](Node<T>& self) {
            for (std::int64_t l = 0; l < P; ++l) {
                auto& p = *self.parents[static_cast<std::size_t>(l)];
                if (!p.requires_grad) continue;
                auto& g = p.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    g[static_cast<std::size_t>(r)] += self.grad[static_cast<std::size_t>(r * P + l)];
                }
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Concatenates 2-d tensors along rows; a 1-d tensor counts as a single row.
template <typename T>
Tensor<T> concat_rows(const Tensor<T>& a, const Tensor<T>& b) {
    const auto rows_of = [](const Tensor<T>& t) {
        return t.rank() == 1 ? std::int64_t(1) : t.dim(0);
    };
    const auto cols_of = [](const Tensor<T>& t) { return t.dim(-1); };
    if (a.rank() > 2 || b.rank() > 2 || cols_of(a) != cols_of(b)) {
        throw ShapeError("concat_rows: incompatible " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
    }
    const std::int64_t C = cols_of(a);
    const std::int64_t ra = rows_of(a), rb = rows_of(b);
    auto out = detail::make_result<T>({ra + rb, C}, {a.node(), b.node()});
    std::memcpy(out->value.data(), a.values().data(), a.values().size() * sizeof(T));
    std::memcpy(out->value.data() + ra * C, b.values().data(), b.values().size() * sizeof(T));
    if (out->requires_grad) {
        out->backward = [ra, rb, C](Node<T>& self) {
            auto& an = *self.parents[0];
            auto& bn = *self.parents[1];
            if (an.requires_grad) {
                auto& g = an.ensure_grad();
                for (std::int64_t i = 0; i < ra * C; ++i) g[static_cast<std::size_t>(i)] +=
                    self.grad[static_cast<std::size_t>(i)];
            }
            if (bn.requires_grad) {
                auto& g = bn.ensure_grad();
                for (std::int64_t i = 0; i < rb * C; ++i) g[static_cast<std::size_t>(i)] +=
                    self.grad[static_cast<std::size_t>(ra * C + i)];
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Softmax along `axis` (negative axes count from the end), numerically
// stabilized by max subtraction.
template <typename T>
Tensor<T> softmax(const Tensor<T>& x, int axis = -1) {
    if (axis < 0) axis += x.rank();
    if (axis < 0 || axis >= x.rank()) throw ShapeError("softmax: bad axis for " + shape_str(x.shape()));
    const std::int64_t n = x.dim(axis);
    std::int64_t outer = 1, inner = 1;
    for (int i = 0; i < axis; ++i) outer *= x.dim(i);
    for (int i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
    auto out = detail::make_result<T>(x.shape(), {x.node()});
    const T* xv = x.values().data();
    T* ov = out->value.data();
#pragma omp parallel for schedule(static) if (outer * inner * n >= 16384)
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            const std::int64_t base = o * n * inner + i;
            T mx = xv[base];
            for (std::int64_t j = 1; j < n; ++j) mx = std::max(mx, xv[base + j * inner]);
            T sum = T(0);
            for (std::int64_t j = 0; j < n; ++j) {
                const T e = std::exp(xv[base + j * inner] - mx);
                ov[base + j * inner] = e;
                sum += e;
            }
            const T inv = T(1) / sum;
            for (std::int64_t j = 0; j < n; ++j) ov[base + j * inner] *= inv;
        }
    }
    if (out->requires_grad) {
        out->backward = [outer, inner, n](Node<T>& self) {
            auto& xn = *self.parents[0];
            auto& g = xn.ensure_grad();
            const T* y = self.value.data();
            const T* dy = self.grad.data();
#pragma omp parallel for schedule(static) if (outer * inner * n >= 16384)
            for (std::int64_t o = 0; o < outer; ++o) {
                for (std::int64_t i = 0; i < inner; ++i) {
                    const std::int64_t base = o * n * inner + i;
                    T dot = T(0);
                    for (std::int64_t j = 0; j < n; ++j) dot += dy[base + j * inner] * y[base + j * inner];
                    for (std::int64_t j = 0; j < n; ++j) {
                        g[static_cast<std::size_t>(base + j * inner)] +=
                            y[base + j * inner] * (dy[base + j * inner] - dot);
                    }
                }
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Exact GELU, x * Phi(x).
template <typename T>
Tensor<T> gelu(const Tensor<T>& x) {
    auto out = detail::make_result<T>(x.shape(), {x.node()});
    const std::int64_t n = x.numel();
    const T* xv = x.values().data();
    T* ov = out->value.data();
    constexpr T kInvSqrt2 = T(0.70710678118654752440);
#pragma omp parallel for schedule(static) if (n >= 16384)
    for (std::int64_t i = 0; i < n; ++i) {
        ov[i] = T(0.5) * xv[i] * (T(1) + std::erf(xv[i] * kInvSqrt2));
    }
    if (out->requires_grad) {
        out->backward = [n](Node<T>& self) {
            auto& xn = *self.parents[0];
            auto& g = xn.ensure_grad();
            const T* xv = xn.value.data();
            constexpr T kInvSqrt2 = T(0.70710678118654752440);
            constexpr T kInvSqrt2Pi = T(0.39894228040143267794);
            for (std::int64_t i = 0; i < n; ++i) {
                const T x = xv[i];
                const T phi = T(0.5) * (T(1) + std::erf(x * kInvSqrt2));
                const T pdf = kInvSqrt2Pi * std::exp(T(-0.5) * x * x);
                g[static_cast<std::size_t>(i)] += self.grad[static_cast<std::size_t>(i)] * (phi + x * pdf);
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Layer normalization over the last dimension with learned gain and bias.
template <typename T>
Tensor<T> layer_norm(const Tensor<T>& x, const Tensor<T>& gain, const Tensor<T>& bias,
                     T eps = T(1e-5)) {
    const std::int64_t C = x.dim(-1);
    if (gain.rank() != 1 || gain.dim(0) != C || bias.rank() != 1 || bias.dim(0) != C) {
        throw ShapeError("layer_norm: gain/bias must be [C] for x " + shape_str(x.shape()));
    }
    const std::int64_t rows = x.numel() / C;
    auto out = detail::make_result<T>(x.shape(), {x.node(), gain.node(), bias.node()});
    const T* xv = x.values().data();
    const T* gv = gain.values().data();
    const T* bv = bias.values().data();
    T* ov = out->value.data();
    auto xhat = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows * C));
    auto rstd = std::make_shared<std::vector<T>>(static_cast<std::size_t>(rows));
#pragma omp parallel for schedule(static) if (rows * C >= 16384)
    for (std::int64_t r = 0; r < rows; ++r) {
        const T* xr = xv + r * C;
        T mean = T(0);
        for (std::int64_t c = 0; c < C; ++c) mean += xr[c];
        mean /= static_cast<T>(C);
        T var = T(0);
        for (std::int64_t c = 0; c < C; ++c) {
            const T d = xr[c] - mean;
            var += d * d;
        }
        var /= static_cast<T>(C);
        const T rs = T(1) / std::sqrt(var + eps);
        (*rstd)[static_cast<std::size_t>(r)] = rs;
        for (std::int64_t c = 0; c < C; ++c) {
            const T xh = (xr[c] - mean) * rs;
            (*xhat)[static_cast<std::size_t>(r * C + c)] = xh;
            ov[r * C + c] = gv[c] * xh + bv[c];
        }
    }
    if (out->requires_grad) {
        out->backward = [rows, C, xhat, rstd](Node<T>& self) {
            auto& xn = *self.parents[0];
            auto& gn = *self.parents[1];
            auto& bn = *self.parents[2];
            const T* dy = self.grad.data();
            const T* gv = gn.value.data();
            if (xn.requires_grad) {
                auto& g = xn.ensure_grad();
#pragma omp parallel for schedule(static) if (rows * C >= 16384)
                for (std::int64_t r = 0; r < rows; ++r) {
                    const T* dyr = dy + r * C;
                    const T* xh = xhat->data() + r * C;
                    T m1 = T(0), m2 = T(0);
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T dxh = dyr[c] * gv[c];
                        m1 += dxh;
                        m2 += dxh * xh[c];
                    }
                    m1 /= static_cast<T>(C);
                    m2 /= static_cast<T>(C);
                    const T rs = (*rstd)[static_cast<std::size_t>(r)];
                    for (std::int64_t c = 0; c < C; ++c) {
                        const T dxh = dyr[c] * gv[c];
                        g[static_cast<std::size_t>(r * C + c)] += rs * (dxh - m1 - xh[c] * m2);
                    }
                }
            }
            if (gn.requires_grad) {
                auto& g = gn.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < C; ++c) {
                        g[static_cast<std::size_t>(c)] +=
                            dy[r * C + c] * (*xhat)[static_cast<std::size_t>(r * C + c)];
                    }
                }
            }
            if (bn.requires_grad) {
                auto& g = bn.ensure_grad();
                for (std::int64_t r = 0; r < rows; ++r) {
                    for (std::int64_t c = 0; c < C; ++c) g[static_cast<std::size_t>(c)] += dy[r * C + c];
                }
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Inverted dropout with a caller-owned RNG; the mask is drawn in index order
// so a reseeded RNG reproduces it exactly. p == 0 returns the input tensor.
template <typename T>
Tensor<T> dropout(const Tensor<T>& x, double p, Rng& rng) {
    if (p < 0.0 || p >= 1.0) throw ConfigError("dropout: p must be in [0, 1)");
    if (p == 0.0) return x;
    auto out = detail::make_result<T>(x.shape(), {x.node()});
    const std::int64_t n = x.numel();
    auto mask = std::make_shared<std::vector<T>>(static_cast<std::size_t>(n));
    const T keep_scale = static_cast<T>(1.0 / (1.0 - p));
    const T* xv = x.values().data();
    T* ov = out->value.data();
    for (std::int64_t i = 0; i < n; ++i) {
        const T m = rng.next_real() >= p ? keep_scale : T(0);
        (*mask)[static_cast<std::size_t>(i)] = m;
        ov[i] = xv[i] * m;
    }
    if (out->requires_grad) {
        out->backward = [mask, n](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            for (std::int64_t i = 0; i < n; ++i) {
                g[static_cast<std::size_t>(i)] +=
                    self.grad[static_cast<std::size_t>(i)] * (*mask)[static_cast<std::size_t>(i)];
            }
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> sum_all(const Tensor<T>& x) {
    auto out = detail::make_result<T>({1}, {x.node()});
    T acc = T(0);
    for (const T v : x.values()) acc += v;
    out->value[0] = acc;
    if (out->requires_grad) {
        out->backward = [](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            const T go = self.grad[0];
            for (auto& v : g) v += go;
        };
    }
    return Tensor<T>::wrap(out);
}

template <typename T>
Tensor<T> mean_all(const Tensor<T>& x) {
    auto out = detail::make_result<T>({1}, {x.node()});
    T acc = T(0);
    for (const T v : x.values()) acc += v;
    const T inv = T(1) / static_cast<T>(x.numel());
    out->value[0] = acc * inv;
    if (out->requires_grad) {
        out->backward = [inv](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            const T go = self.grad[0] * inv;
            for (auto& v : g) v += go;
        };
    }
    return Tensor<T>::wrap(out);
}

// Mean cross-entropy of row-wise class logits against integer targets.
// logits is [..., C] flattened to [N, C]; targets.size() must equal N.
// Fused log-softmax keeps the loss finite for any finite logits.
template <typename T>
Tensor<T> cross_entropy_mean(const Tensor<T>& logits, const std::vector<std::int64_t>& targets) {
    const std::int64_t C = logits.dim(-1);
    const std::int64_t N = logits.numel() / C;
    if (static_cast<std::int64_t>(targets.size()) != N) {
        throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                         std::to_string(N) + " rows");
    }
    for (auto t : targets) {
        if (t < 0 || t >= C) {
            throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(C) + ")");
        }
    }
    auto out = detail::make_result<T>({1}, {logits.node()});
    const T* lv = logits.values().data();
    auto probs = std::make_shared<std::vector<T>>(static_cast<std::size_t>(N * C));
    T total = T(0);
    for (std::int64_t r = 0; r < N; ++r) {
        const T* row = lv + r * C;
        T mx = row[0];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, row[c]);
        T sum = T(0);
        for (std::int64_t c = 0; c < C; ++c) {
            const T e = std::exp(row[c] - mx);
            (*probs)[static_cast<std::size_t>(r * C + c)] = e;
            sum += e;
        }
        const T inv = T(1) / sum;
        for (std::int64_t c = 0; c < C; ++c) (*probs)[static_cast<std::size_t>(r * C + c)] *= inv;
        const T lse = mx + std::log(sum);
        total += lse - row[targets[static_cast<std::size_t>(r)]];
    }
    out->value[0] = total / static_cast<T>(N);
    if (out->requires_grad) {
        auto tgt = std::make_shared<std::vector<std::int64_t>>(targets);
        out->backward = [probs, tgt, N, C](Node<T>& self) {
            auto& g = self.parents[0]->ensure_grad();
            const T go = self.grad[0] / static_cast<T>(N);
            for (std::int64_t r = 0; r < N; ++r) {
                for (std::int64_t c = 0; c < C; ++c) {
                    g[static_cast<std::size_t>(r * C + c)] +=
                        go * (*probs)[static_cast<std::size_t>(r * C + c)];
                }
                g[static_cast<std::size_t>(r * C + (*tgt)[static_cast<std::size_t>(r)])] -= go;
            }
        };
    }
    return Tensor<T>::wrap(out);
}

// Single-distribution convenience: -log softmax(logits)[target].
template <typename T>
Tensor<T> cross_entropy(const Tensor<T>& logits, std::int64_t target) {
    if (logits.rank() != 1) throw ShapeError("cross_entropy: expected 1-d logits");
    return cross_entropy_mean(logits, std::vector<std::int64_t>{target});
}

}  // namespace relpos
