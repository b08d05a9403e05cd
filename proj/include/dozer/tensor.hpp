#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dozer/errors.hpp"
#include "dozer/mask.hpp"

namespace dozer {

using Shape = std::vector<int>;

namespace detail {

inline size_t shape_numel(const Shape& s) {
    size_t n = 1;
    for (int d : s) n *= static_cast<size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the eager reverse-mode graph. `backward` reads this node's
/// grad and accumulates into the parents' grads; it must not capture the
/// node itself (parents are reachable through the member).
struct Node {
    Shape shape;
    std::vector<double> value;
    std::vector<double> grad;
    bool requires_grad = false;
    std::uint64_t id = 0;
    std::vector<NodePtr> parents;
    std::function<void(Node&)> backward;

    size_t numel() const { return value.size(); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

inline std::uint64_t next_node_id() {
    static std::atomic<std::uint64_t> counter{0};
    return ++counter;
}

}  // namespace detail

/// Dense 64-bit float tensor participating in a reverse-mode autodiff graph.
/// Copying the handle shares the node.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return make_leaf(std::move(shape), 0.0, requires_grad);
    }

    static Tensor full(Shape shape, double value, bool requires_grad = false) {
        return make_leaf(std::move(shape), value, requires_grad);
    }

    static Tensor from_values(Shape shape, std::vector<double> values,
                              bool requires_grad = false) {
        if (detail::shape_numel(shape) != values.size())
            throw ShapeError("Tensor: " + detail::shape_str(shape) + " incompatible with " +
                             std::to_string(values.size()) + " values");
        auto node = std::make_shared<detail::Node>();
        node->shape = std::move(shape);
        node->value = std::move(values);
        node->requires_grad = requires_grad;
        node->id = detail::next_node_id();
        if (requires_grad) node->ensure_grad();
        return Tensor(std::move(node));
    }

    /// Learnable leaf initialized uniformly in +-sqrt(1/fan_in).
    static Tensor parameter(Shape shape, int fan_in, std::mt19937_64& rng) {
        const double bound = std::sqrt(1.0 / std::max(1, fan_in));
        std::uniform_real_distribution<double> dist(-bound, bound);
        std::vector<double> v(detail::shape_numel(shape));
        for (auto& x : v) x = dist(rng);
        return from_values(std::move(shape), std::move(v), true);
    }

    bool defined() const { return static_cast<bool>(node_); }
    const Shape& shape() const { return node_->shape; }
    int rank() const { return static_cast<int>(node_->shape.size()); }
    int dim(int i) const { return node_->shape[static_cast<size_t>(i)]; }
    size_t numel() const { return node_->numel(); }
    bool requires_grad() const { return node_->requires_grad; }
    std::uint64_t id() const { return node_->id; }

    std::span<const double> values() const { return node_->value; }
    std::span<double> values_mut() { return node_->value; }
    std::span<const double> grad() const { return node_->grad; }

    double scalar() const {
        if (numel() != 1)
            throw ShapeError("Tensor::scalar: tensor has " + std::to_string(numel()) +
                             " elements");
        return node_->value[0];
    }

    void zero_grad() {
        if (node_->requires_grad) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }

    /// Seeds d(this)/d(this) = 1 and propagates through the graph in reverse
    /// topological order, visiting each node once. Leaf grads accumulate
    /// across calls; interior grads are transient per call.
    void backward() const;

    detail::Node* node() const { return node_.get(); }
    detail::NodePtr node_ptr() const { return node_; }

    explicit Tensor(detail::NodePtr node) : node_(std::move(node)) {}

private:
    static Tensor make_leaf(Shape shape, double fill, bool requires_grad) {
        auto node = std::make_shared<detail::Node>();
        node->value.assign(detail::shape_numel(shape), fill);
        node->shape = std::move(shape);
        node->requires_grad = requires_grad;
        node->id = detail::next_node_id();
        if (requires_grad) node->ensure_grad();
        return Tensor(std::move(node));
    }

    detail::NodePtr node_;
};

namespace detail {

/// Allocates the result node of an op; the caller fills value and backward.
inline Tensor make_node(Shape shape, std::initializer_list<Tensor> parents) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->id = next_node_id();
    for (const Tensor& p : parents) {
        node->parents.push_back(p.node_ptr());
        node->requires_grad = node->requires_grad || p.requires_grad();
    }
    if (node->requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

inline Tensor make_node(Shape shape, const std::vector<Tensor>& parents) {
    auto node = std::make_shared<Node>();
    node->value.assign(shape_numel(shape), 0.0);
    node->shape = std::move(shape);
    node->id = next_node_id();
    for (const Tensor& p : parents) {
        node->parents.push_back(p.node_ptr());
        node->requires_grad = node->requires_grad || p.requires_grad();
    }
    if (node->requires_grad) node->ensure_grad();
    return Tensor(std::move(node));
}

inline void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
}

}  // namespace detail

inline void Tensor::backward() const {
    if (numel() != 1)
        throw ShapeError("backward: loss must be scalar, got " +
                         detail::shape_str(shape()));
    if (!node_->requires_grad) return;

    // Iterative post-order DFS over the requires_grad subgraph.
    std::vector<detail::Node*> topo;
    std::unordered_set<detail::Node*> visited;
    std::vector<std::pair<detail::Node*, size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    visited.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        bool descended = false;
        while (next < n->parents.size()) {
            detail::Node* p = n->parents[next++].get();
            if (p->requires_grad && !visited.count(p)) {
                visited.insert(p);
                stack.emplace_back(p, 0);
                descended = true;
                break;
            }
        }
        if (!descended && next >= n->parents.size()) {
            topo.push_back(n);
            stack.pop_back();
        }
    }

    // Interior grads are reset so repeated calls accumulate only into leaves.
    for (detail::Node* n : topo) {
        if (n->backward) std::fill(n->grad.begin(), n->grad.end(), 0.0);
        else n->ensure_grad();
    }
    node_->grad[0] += 1.0;
    for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
        detail::Node* n = *it;
        if (n->backward) n->backward(*n);
    }
}

inline void backward(const Tensor& loss) { loss.backward(); }

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

inline Tensor add(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "add");
    Tensor out = detail::make_node(a.shape(), {a, b});
    auto& v = out.node()->value;
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] + bv[i];
    out.node()->backward = [](detail::Node& self) {
        for (auto& p : self.parents) {
            if (!p->requires_grad) continue;
            p->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
        }
    };
    return out;
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "sub");
    Tensor out = detail::make_node(a.shape(), {a, b});
    auto& v = out.node()->value;
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] - bv[i];
    out.node()->backward = [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pa->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) pb->grad[i] -= self.grad[i];
        }
    };
    return out;
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
    detail::check_same_shape(a, b, "mul");
    Tensor out = detail::make_node(a.shape(), {a, b});
    auto& v = out.node()->value;
    auto av = a.values(), bv = b.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] * bv[i];
    out.node()->backward = [](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pa->grad[i] += self.grad[i] * pb->value[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i)
                pb->grad[i] += self.grad[i] * pa->value[i];
        }
    };
    return out;
}

inline Tensor scale(const Tensor& a, double c) {
    Tensor out = detail::make_node(a.shape(), {a});
    auto& v = out.node()->value;
    auto av = a.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = av[i] * c;
    out.node()->backward = [c](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * c;
    };
    return out;
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

/// Gaussian error linear unit, exact erf form.
inline Tensor gelu(const Tensor& a) {
    static constexpr double kInvSqrt2 = 0.7071067811865475244;
    static constexpr double kInvSqrt2Pi = 0.3989422804014326779;
    Tensor out = detail::make_node(a.shape(), {a});
    auto& v = out.node()->value;
    auto av = a.values();
    for (size_t i = 0; i < v.size(); ++i)
        v[i] = av[i] * 0.5 * (1.0 + std::erf(av[i] * kInvSqrt2));
    out.node()->backward = [](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) {
            const double x = p->value[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * kInvSqrt2));
            const double pdf = kInvSqrt2Pi * std::exp(-0.5 * x * x);
            p->grad[i] += self.grad[i] * (cdf + x * pdf);
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

inline Tensor sum(const Tensor& a) {
    Tensor out = detail::make_node({1}, {a});
    double s = 0.0;
    for (double x : a.values()) s += x;
    out.node()->value[0] = s;
    out.node()->backward = [](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (auto& g : p->grad) g += self.grad[0];
    };
    return out;
}

inline Tensor mean(const Tensor& a) {
    Tensor out = detail::make_node({1}, {a});
    double s = 0.0;
    for (double x : a.values()) s += x;
    const double inv_n = 1.0 / static_cast<double>(a.numel());
    out.node()->value[0] = s * inv_n;
    out.node()->backward = [inv_n](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (auto& g : p->grad) g += self.grad[0] * inv_n;
    };
    return out;
}

// ---------------------------------------------------------------------------
// Shape ops (2-D unless noted)
// ---------------------------------------------------------------------------

inline Tensor reshape(const Tensor& a, Shape shape) {
    if (detail::shape_numel(shape) != a.numel())
        throw ShapeError("reshape: " + detail::shape_str(a.shape()) + " -> " +
                         detail::shape_str(shape) + " changes element count");
    Tensor out = detail::make_node(std::move(shape), {a});
    auto& v = out.node()->value;
    auto av = a.values();
    std::copy(av.begin(), av.end(), v.begin());
    out.node()->backward = [](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i];
    };
    return out;
}

inline Tensor transpose(const Tensor& a) {
    if (a.rank() != 2) throw ShapeError("transpose: expected rank-2 tensor");
    const int m = a.dim(0), n = a.dim(1);
    Tensor out = detail::make_node({n, m}, {a});
    auto& v = out.node()->value;
    auto av = a.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) v[static_cast<size_t>(j) * m + i] = av[static_cast<size_t>(i) * n + j];
    out.node()->backward = [m, n](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                p->grad[static_cast<size_t>(i) * n + j] +=
                    self.grad[static_cast<size_t>(j) * m + i];
    };
    return out;
}

inline Tensor slice_rows(const Tensor& a, int row0, int rows) {
    if (a.rank() != 2) throw ShapeError("slice_rows: expected rank-2 tensor");
    const int m = a.dim(0), n = a.dim(1);
    if (row0 < 0 || rows < 1 || row0 + rows > m)
        throw ShapeError("slice_rows: range [" + std::to_string(row0) + ", " +
                         std::to_string(row0 + rows) + ") outside " + detail::shape_str(a.shape()));
    Tensor out = detail::make_node({rows, n}, {a});
    auto& v = out.node()->value;
    auto av = a.values();
    std::copy(av.begin() + static_cast<size_t>(row0) * n,
              av.begin() + static_cast<size_t>(row0 + rows) * n, v.begin());
    out.node()->backward = [row0, n](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i)
            p->grad[static_cast<size_t>(row0) * n + i] += self.grad[i];
    };
    return out;
}

inline Tensor slice_cols(const Tensor& a, int col0, int cols) {
    if (a.rank() != 2) throw ShapeError("slice_cols: expected rank-2 tensor");
    const int m = a.dim(0), n = a.dim(1);
    if (col0 < 0 || cols < 1 || col0 + cols > n)
        throw ShapeError("slice_cols: range [" + std::to_string(col0) + ", " +
                         std::to_string(col0 + cols) + ") outside " + detail::shape_str(a.shape()));
    Tensor out = detail::make_node({m, cols}, {a});
    auto& v = out.node()->value;
    auto av = a.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < cols; ++j)
            v[static_cast<size_t>(i) * cols + j] = av[static_cast<size_t>(i) * n + col0 + j];
    out.node()->backward = [m, n, col0, cols](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < cols; ++j)
                p->grad[static_cast<size_t>(i) * n + col0 + j] +=
                    self.grad[static_cast<size_t>(i) * cols + j];
    };
    return out;
}

inline Tensor concat_cols(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: empty list");
    const int m = parts[0].dim(0);
    int total = 0;
    for (const auto& t : parts) {
        if (t.rank() != 2 || t.dim(0) != m)
            throw ShapeError("concat_cols: row mismatch " + detail::shape_str(t.shape()));
        total += t.dim(1);
    }
    Tensor out = detail::make_node({m, total}, parts);
    auto& v = out.node()->value;
    std::vector<int> widths;
    int off = 0;
    for (const auto& t : parts) {
        const int n = t.dim(1);
        auto tv = t.values();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j)
                v[static_cast<size_t>(i) * total + off + j] = tv[static_cast<size_t>(i) * n + j];
        widths.push_back(n);
        off += n;
    }
    out.node()->backward = [m, total, widths](detail::Node& self) {
        int off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            const int n = widths[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (int i = 0; i < m; ++i)
                    for (int j = 0; j < n; ++j)
                        p->grad[static_cast<size_t>(i) * n + j] +=
                            self.grad[static_cast<size_t>(i) * total + off + j];
            }
            off += n;
        }
    };
    return out;
}

inline Tensor concat_rows(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: empty list");
    const int n = parts[0].dim(1);
    int total = 0;
    for (const auto& t : parts) {
        if (t.rank() != 2 || t.dim(1) != n)
            throw ShapeError("concat_rows: column mismatch " + detail::shape_str(t.shape()));
        total += t.dim(0);
    }
    Tensor out = detail::make_node({total, n}, parts);
    auto& v = out.node()->value;
    size_t off = 0;
    std::vector<size_t> sizes;
    for (const auto& t : parts) {
        auto tv = t.values();
        std::copy(tv.begin(), tv.end(), v.begin() + off);
        sizes.push_back(tv.size());
        off += tv.size();
    }
    out.node()->backward = [sizes](detail::Node& self) {
        size_t off = 0;
        for (size_t k = 0; k < self.parents.size(); ++k) {
            auto& p = self.parents[k];
            if (p->requires_grad) {
                p->ensure_grad();
                for (size_t i = 0; i < sizes[k]; ++i) p->grad[i] += self.grad[off + i];
            }
            off += sizes[k];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

namespace detail {
/// c[m x n] += a[m x k] * b[k x n]
inline void matmul_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            const double* brow = b + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
/// c[m x n] += a[m x k] * b[n x k]^T
inline void matmul_bt_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        double* crow = c + static_cast<size_t>(i) * n;
        for (int j = 0; j < n; ++j) {
            const double* brow = b + static_cast<size_t>(j) * k;
            double s = 0.0;
            for (int l = 0; l < k; ++l) s += arow[l] * brow[l];
            crow[j] += s;
        }
    }
}
/// c[k x n] += a[m x k]^T * b[m x n]
inline void matmul_at_acc(const double* a, const double* b, double* c, int m, int k, int n) {
    for (int i = 0; i < m; ++i) {
        const double* arow = a + static_cast<size_t>(i) * k;
        const double* brow = b + static_cast<size_t>(i) * n;
        for (int l = 0; l < k; ++l) {
            const double av = arow[l];
            if (av == 0.0) continue;
            double* crow = c + static_cast<size_t>(l) * n;
            for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}
}  // namespace detail

/// Standard matrix product; backward dA = dC * B^T, dB = A^T * dC.
inline Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul: expected rank-2 tensors, got " +
                         detail::shape_str(a.shape()) + " and " + detail::shape_str(b.shape()));
    const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
    if (k != k2)
        throw ShapeError("matmul: inner dimensions disagree, " + detail::shape_str(a.shape()) +
                         " x " + detail::shape_str(b.shape()));
    Tensor out = detail::make_node({m, n}, {a, b});
    detail::matmul_acc(a.values().data(), b.values().data(), out.node()->value.data(), m, k, n);
    out.node()->backward = [m, k, n](detail::Node& self) {
        auto& pa = self.parents[0];
        auto& pb = self.parents[1];
        if (pa->requires_grad) {
            pa->ensure_grad();
            detail::matmul_bt_acc(self.grad.data(), pb->value.data(), pa->grad.data(), m, n, k);
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            detail::matmul_at_acc(pa->value.data(), self.grad.data(), pb->grad.data(), m, k, n);
        }
    };
    return out;
}

/// x[m x n] + b broadcast over rows; b has shape [n] or [1 x n].
inline Tensor add_row_bias(const Tensor& x, const Tensor& b) {
    if (x.rank() != 2) throw ShapeError("add_row_bias: expected rank-2 input");
    const int m = x.dim(0), n = x.dim(1);
    if (static_cast<int>(b.numel()) != n)
        throw ShapeError("add_row_bias: bias " + detail::shape_str(b.shape()) +
                         " does not match row width " + std::to_string(n));
    Tensor out = detail::make_node({m, n}, {x, b});
    auto& v = out.node()->value;
    auto xv = x.values(), bv = b.values();
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j)
            v[static_cast<size_t>(i) * n + j] = xv[static_cast<size_t>(i) * n + j] + bv[j];
    out.node()->backward = [m, n](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pb = self.parents[1];
        if (px->requires_grad) {
            px->ensure_grad();
            for (size_t i = 0; i < self.grad.size(); ++i) px->grad[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            pb->ensure_grad();
            for (int i = 0; i < m; ++i)
                for (int j = 0; j < n; ++j)
                    pb->grad[j] += self.grad[static_cast<size_t>(i) * n + j];
        }
    };
    return out;
}

// ---------------------------------------------------------------------------
// Attention and normalization primitives
// ---------------------------------------------------------------------------

/// Row-wise softmax restricted to the mask's allowed entries. Disallowed
/// entries are exactly 0 and receive no gradient; the row max over allowed
/// entries is subtracted before exponentiation.
inline Tensor masked_softmax(const Tensor& scores, const AttnMask& mask) {
    if (scores.rank() != 2)
        throw ShapeError("masked_softmax: expected rank-2 scores");
    const int q = scores.dim(0), k = scores.dim(1);
    if (mask.rows() != q || mask.cols() != k)
        throw ShapeError("masked_softmax: mask " + std::to_string(mask.rows()) + "x" +
                         std::to_string(mask.cols()) + " does not match scores " +
                         detail::shape_str(scores.shape()));
    int empty_row = -1;
    if (mask.find_empty_row(empty_row))
        throw MaskError("masked_softmax: mask row " + std::to_string(empty_row) +
                        " allows no keys");
    Tensor out = detail::make_node({q, k}, {scores});
    auto& v = out.node()->value;
    auto sv = scores.values();
    for (int i = 0; i < q; ++i) {
        const size_t base = static_cast<size_t>(i) * k;
        double mx = -std::numeric_limits<double>::infinity();
        for (int j = 0; j < k; ++j)
            if (mask.at(i, j)) mx = std::max(mx, sv[base + j]);
        double denom = 0.0;
        for (int j = 0; j < k; ++j)
            if (mask.at(i, j)) denom += std::exp(sv[base + j] - mx);
        for (int j = 0; j < k; ++j)
            v[base + j] = mask.at(i, j) ? std::exp(sv[base + j] - mx) / denom : 0.0;
    }
    out.node()->backward = [q, k, mask](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (int i = 0; i < q; ++i) {
            const size_t base = static_cast<size_t>(i) * k;
            double dot = 0.0;
            for (int j = 0; j < k; ++j)
                if (mask.at(i, j)) dot += self.grad[base + j] * self.value[base + j];
            for (int j = 0; j < k; ++j)
                if (mask.at(i, j))
                    p->grad[base + j] += self.value[base + j] * (self.grad[base + j] - dot);
        }
    };
    return out;
}

/// Row-wise layer normalization with learnable gain/offset over the last
/// dimension of a rank-2 tensor.
inline Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                         double eps = 1e-6) {
    if (x.rank() != 2) throw ShapeError("layer_norm: expected rank-2 input");
    const int m = x.dim(0), n = x.dim(1);
    if (static_cast<int>(gamma.numel()) != n || static_cast<int>(beta.numel()) != n)
        throw ShapeError("layer_norm: gain/offset width mismatch");
    Tensor out = detail::make_node({m, n}, {x, gamma, beta});
    auto& v = out.node()->value;
    auto xv = x.values(), gv = gamma.values(), bv = beta.values();
    std::vector<double> inv_sigma(m), mu(m);
    for (int i = 0; i < m; ++i) {
        const size_t base = static_cast<size_t>(i) * n;
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += xv[base + j];
        mu[i] = s / n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = xv[base + j] - mu[i];
            var += d * d;
        }
        var /= n;
        inv_sigma[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j)
            v[base + j] = (xv[base + j] - mu[i]) * inv_sigma[i] * gv[j] + bv[j];
    }
    out.node()->backward = [m, n, mu, inv_sigma](detail::Node& self) {
        auto& px = self.parents[0];
        auto& pg = self.parents[1];
        auto& pb = self.parents[2];
        for (int i = 0; i < m; ++i) {
            const size_t base = static_cast<size_t>(i) * n;
            // g = gamma .* dy, applied on the normalized coordinates xhat.
            double mean_g = 0.0, mean_gx = 0.0;
            for (int j = 0; j < n; ++j) {
                const double xhat = (px->value[base + j] - mu[i]) * inv_sigma[i];
                const double g = pg->value[j] * self.grad[base + j];
                mean_g += g;
                mean_gx += g * xhat;
            }
            mean_g /= n;
            mean_gx /= n;
            for (int j = 0; j < n; ++j) {
                const double xhat = (px->value[base + j] - mu[i]) * inv_sigma[i];
                if (px->requires_grad) {
                    px->ensure_grad();
                    const double g = pg->value[j] * self.grad[base + j];
                    px->grad[base + j] += inv_sigma[i] * (g - mean_g - xhat * mean_gx);
                }
                if (pg->requires_grad) {
                    pg->ensure_grad();
                    pg->grad[j] += self.grad[base + j] * xhat;
                }
                if (pb->requires_grad) {
                    pb->ensure_grad();
                    pb->grad[j] += self.grad[base + j];
                }
            }
        }
    };
    return out;
}

/// Inverted dropout; identity when rate <= 0. The keep mask is drawn from
/// the supplied engine so runs stay reproducible.
inline Tensor dropout(const Tensor& x, double rate, std::mt19937_64& rng) {
    if (rate <= 0.0) return x;
    if (rate >= 1.0) throw ConfigError("dropout: rate must be < 1");
    std::bernoulli_distribution keep(1.0 - rate);
    const double scale = 1.0 / (1.0 - rate);
    std::vector<double> m(x.numel());
    for (auto& b : m) b = keep(rng) ? scale : 0.0;
    Tensor out = detail::make_node(x.shape(), {x});
    auto& v = out.node()->value;
    auto xv = x.values();
    for (size_t i = 0; i < v.size(); ++i) v[i] = xv[i] * m[i];
    out.node()->backward = [m = std::move(m)](detail::Node& self) {
        auto& p = self.parents[0];
        if (!p->requires_grad) return;
        p->ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) p->grad[i] += self.grad[i] * m[i];
    };
    return out;
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckReport {
    double max_relative_error = 0.0;
    long long worst_parameter_index = -1;
    double analytic = 0.0;
    double numeric = 0.0;
};

/// Central-difference gradient of a scalar function with respect to the
/// entries of `params`, perturbing the leaf's values in place.
inline std::vector<double> finite_diff_grad(const std::function<double()>& f, Tensor params,
                                            double eps) {
    if (eps <= 0.0) throw ConfigError("finite_diff_grad: eps must be positive");
    auto v = params.values_mut();
    std::vector<double> g(v.size());
    for (size_t i = 0; i < v.size(); ++i) {
        const double saved = v[i];
        v[i] = saved + eps;
        const double fp = f();
        v[i] = saved - eps;
        const double fm = f();
        v[i] = saved;
        g[i] = (fp - fm) / (2.0 * eps);
    }
    return g;
}

/// Compares the analytic gradient of `build_loss` against central
/// differences over every entry of every parameter. Relative error uses
/// denominator max(|analytic|, |numeric|, 1).
inline GradCheckReport grad_check(const std::function<Tensor()>& build_loss,
                                  std::vector<Tensor> params, double eps = 1e-5) {
    for (auto& p : params) p.zero_grad();
    Tensor loss = build_loss();
    loss.backward();
    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (auto& p : params)
        analytic.emplace_back(p.grad().begin(), p.grad().end());

    GradCheckReport report;
    long long flat = 0;
    auto f = [&]() { return build_loss().scalar(); };
    for (size_t k = 0; k < params.size(); ++k) {
        std::vector<double> numeric = finite_diff_grad(f, params[k], eps);
        for (size_t i = 0; i < numeric.size(); ++i, ++flat) {
            const double a = analytic[k][i];
            const double nmr = numeric[i];
            const double denom = std::max({std::abs(a), std::abs(nmr), 1.0});
            const double rel = std::abs(a - nmr) / denom;
            if (rel > report.max_relative_error) {
                report.max_relative_error = rel;
                report.worst_parameter_index = flat;
                report.analytic = a;
                report.numeric = nmr;
            }
        }
    }
    return report;
}

}  // namespace dozer
