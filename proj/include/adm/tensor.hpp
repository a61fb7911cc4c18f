#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "adm/error.hpp"

namespace adm {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '(';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ')';
    return os.str();
}

template <class T>
struct TensorNode {
    Shape shape;
    std::vector<T> data;
    std::vector<T> grad;
    bool requires_grad = false;
    const char* op = "leaf";  // static string naming the producing op
    std::vector<std::shared_ptr<TensorNode>> parents;
    // Reads this node's grad and accumulates into the parents' grads.
    std::function<void(TensorNode&)> backward;

    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), T(0));
    }
};

/// Dense row-major array with an optional gradient buffer. Copies are shallow:
/// two Tensor handles may refer to the same node, which is how the autograd
/// graph keeps references to op inputs.
template <class T>
class Tensor {
public:
    using value_type = T;
    using Node = TensorNode<T>;

    Tensor() = default;

    explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

    static Tensor zeros(Shape shape, bool requires_grad = false) {
        return full(std::move(shape), T(0), requires_grad);
    }

    static Tensor full(Shape shape, T value, bool requires_grad = false) {
        auto n = std::make_shared<Node>();
        n->data.assign(shape_numel(shape), value);
        n->shape = std::move(shape);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    static Tensor from(Shape shape, std::vector<T> data, bool requires_grad = false) {
        if (shape_numel(shape) != data.size())
            throw ConfigError("tensor data length " + std::to_string(data.size()) +
                              " does not match shape " + shape_str(shape));
        auto n = std::make_shared<Node>();
        n->shape = std::move(shape);
        n->data = std::move(data);
        n->requires_grad = requires_grad;
        return Tensor(std::move(n));
    }

    bool defined() const noexcept { return static_cast<bool>(node_); }

    const Shape& shape() const { return node_->shape; }
    std::size_t rank() const { return node_->shape.size(); }
    std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
    std::size_t numel() const { return node_->data.size(); }

    std::span<T> data() { return node_->data; }
    std::span<const T> data() const { return node_->data; }
    const std::vector<T>& vec() const { return node_->data; }

    T item() const {
        if (numel() != 1) throw ConfigError("item() on tensor of shape " + shape_str(shape()));
        return node_->data[0];
    }

    /// Gradient buffer; allocated (zero) on first access.
    std::span<T> grad() {
        node_->ensure_grad();
        return node_->grad;
    }
    bool has_grad() const { return node_->grad.size() == node_->data.size(); }

    bool requires_grad() const { return node_->requires_grad; }
    void set_requires_grad(bool v) { node_->requires_grad = v; }

    void zero_grad() {
        if (has_grad()) std::fill(node_->grad.begin(), node_->grad.end(), T(0));
    }

    /// Fresh leaf holding a copy of the values; cuts the graph.
    Tensor detach() const { return from(shape(), node_->data, false); }

    Tensor clone(bool requires_grad) const { return from(shape(), node_->data, requires_grad); }

    /// Same values, different shape (element count must agree). Differentiable.
    Tensor reshape(Shape s) const;

    /// Reverse-mode sweep from this scalar.
    void backward() const;

    Node* node() const { return node_.get(); }
    const std::shared_ptr<Node>& node_ptr() const { return node_; }

private:
    std::shared_ptr<Node> node_;
};

/// Executed differentiable ops reachable from a root, in execution order.
/// Nodes precede every node that consumed them.
template <class T>
class Graph {
public:
    explicit Graph(const Tensor<T>& root) {
        // Iterative post-order DFS to avoid deep recursion on long chains.
        std::unordered_set<const TensorNode<T>*> seen;
        std::vector<std::pair<TensorNode<T>*, std::size_t>> stack;
        stack.emplace_back(root.node(), 0);
        seen.insert(root.node());
        while (!stack.empty()) {
            auto& [n, next] = stack.back();
            if (next < n->parents.size()) {
                TensorNode<T>* p = n->parents[next++].get();
                if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
            } else {
                order_.push_back(n);
                stack.pop_back();
            }
        }
    }

    const std::vector<TensorNode<T>*>& nodes() const { return order_; }

    /// Replays backward in reverse execution order.
    void run() const {
        for (auto it = order_.rbegin(); it != order_.rend(); ++it) {
            TensorNode<T>* n = *it;
            if (!n->backward) continue;
            n->ensure_grad();
            for (auto& p : n->parents)
                if (p->requires_grad) p->ensure_grad();
            n->backward(*n);
        }
    }

private:
    std::vector<TensorNode<T>*> order_;
};

template <class T>
void Tensor<T>::backward() const {
    if (numel() != 1) throw ConfigError("backward() needs a scalar, got " + shape_str(shape()));
    if (!requires_grad()) return;
    node_->ensure_grad();
    node_->grad[0] += T(1);
    Graph<T>(*this).run();
}

namespace detail {

template <class T>
void check_finite(const std::vector<T>& v, const char* op) {
    for (const T x : v)
        if (!std::isfinite(x)) throw NumericError(std::string("non-finite value produced by ") + op);
}

}  // namespace detail

/// Wraps a freshly computed forward result; records the backward closure only
/// when some input asks for gradients.
template <class T>
Tensor<T> make_result(const char* op, Shape shape, std::vector<T> data, std::vector<Tensor<T>> inputs,
                      std::function<void(TensorNode<T>&)> backward) {
    detail::check_finite(data, op);
    auto n = std::make_shared<TensorNode<T>>();
    n->op = op;
    n->shape = std::move(shape);
    n->data = std::move(data);
    bool needs = false;
    for (const auto& in : inputs) needs = needs || in.requires_grad();
    if (needs) {
        n->requires_grad = true;
        for (auto& in : inputs) n->parents.push_back(in.node_ptr());
        n->backward = std::move(backward);
    }
    return Tensor<T>(std::move(n));
}

template <class T>
Tensor<T> Tensor<T>::reshape(Shape s) const {
    if (shape_numel(s) != numel())
        throw ConfigError("cannot reshape " + shape_str(shape()) + " to " + shape_str(s));
    return make_result<T>("reshape", std::move(s), node_->data, {*this}, [](TensorNode<T>& self) {
        auto& g = self.parents[0]->grad;
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
    });
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops
// ---------------------------------------------------------------------------

namespace detail {

template <class T>
void require_same_shape(const Tensor<T>& a, const Tensor<T>& b, const char* op) {
    if (a.shape() != b.shape())
        throw ConfigError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                          shape_str(b.shape()));
}

template <class T>
void accumulate(TensorNode<T>& parent, std::span<const T> g, T scale = T(1)) {
    if (!parent.requires_grad) return;
    for (std::size_t i = 0; i < g.size(); ++i) parent.grad[i] += scale * g[i];
}

}  // namespace detail

template <class T>
Tensor<T> add(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "add");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] + b.data()[i];
    return make_result<T>("add", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        detail::accumulate<T>(*self.parents[0], self.grad);
        detail::accumulate<T>(*self.parents[1], self.grad);
    });
}

template <class T>
Tensor<T> sub(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "sub");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] - b.data()[i];
    return make_result<T>("sub", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        detail::accumulate<T>(*self.parents[0], self.grad);
        detail::accumulate<T>(*self.parents[1], self.grad, T(-1));
    });
}

template <class T>
Tensor<T> mul(const Tensor<T>& a, const Tensor<T>& b) {
    detail::require_same_shape(a, b, "mul");
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * b.data()[i];
    return make_result<T>("mul", a.shape(), std::move(out), {a, b}, [](TensorNode<T>& self) {
        auto& pa = *self.parents[0];
        auto& pb = *self.parents[1];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            if (pa.requires_grad) pa.grad[i] += self.grad[i] * pb.data[i];
            if (pb.requires_grad) pb.grad[i] += self.grad[i] * pa.data[i];
        }
    });
}

template <class T>
Tensor<T> scale(const Tensor<T>& a, T s) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = s * a.data()[i];
    return make_result<T>("scale", a.shape(), std::move(out), {a}, [s](TensorNode<T>& self) {
        detail::accumulate<T>(*self.parents[0], self.grad, s);
    });
}

template <class T>
Tensor<T> abs(const Tensor<T>& a) {
    std::vector<T> out(a.numel());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::abs(a.data()[i]);
    return make_result<T>("abs", a.shape(), std::move(out), {a}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        for (std::size_t i = 0; i < self.grad.size(); ++i) {
            const T x = p.data[i];
            p.grad[i] += x > T(0) ? self.grad[i] : (x < T(0) ? -self.grad[i] : T(0));
        }
    });
}

/// Sum of all elements, accumulated in double.
template <class T>
Tensor<T> sum(const Tensor<T>& a) {
    double acc = 0.0;
    for (const T x : a.data()) acc += static_cast<double>(x);
    return make_result<T>("sum", {1}, {static_cast<T>(acc)}, {a}, [](TensorNode<T>& self) {
        auto& p = *self.parents[0];
        const T g = self.grad[0];
        for (auto& x : p.grad) x += g;
    });
}

template <class T>
Tensor<T> mean(const Tensor<T>& a) {
    return scale(sum(a), T(1) / static_cast<T>(a.numel()));
}

/// Concatenates [B,C1,H,W] and [B,C2,H,W] along the channel axis.
template <class T>
Tensor<T> concat_channels(const Tensor<T>& a, const Tensor<T>& b) {
    if (a.rank() != 4 || b.rank() != 4 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2) ||
        a.dim(3) != b.dim(3))
        throw ConfigError("concat_channels: incompatible shapes " + shape_str(a.shape()) + " and " +
                          shape_str(b.shape()));
    const std::size_t B = a.dim(0), ca = a.dim(1), cb = b.dim(1), hw = a.dim(2) * a.dim(3);
    std::vector<T> out(B * (ca + cb) * hw);
    for (std::size_t n = 0; n < B; ++n) {
        std::copy_n(a.data().begin() + n * ca * hw, ca * hw, out.begin() + n * (ca + cb) * hw);
        std::copy_n(b.data().begin() + n * cb * hw, cb * hw, out.begin() + (n * (ca + cb) + ca) * hw);
    }
    return make_result<T>("concat_channels", {B, ca + cb, a.dim(2), a.dim(3)}, std::move(out), {a, b},
                          [B, ca, cb, hw](TensorNode<T>& self) {
                              auto& pa = *self.parents[0];
                              auto& pb = *self.parents[1];
                              for (std::size_t n = 0; n < B; ++n) {
                                  const T* g = self.grad.data() + n * (ca + cb) * hw;
                                  if (pa.requires_grad)
                                      for (std::size_t i = 0; i < ca * hw; ++i) pa.grad[n * ca * hw + i] += g[i];
                                  if (pb.requires_grad)
                                      for (std::size_t i = 0; i < cb * hw; ++i)
                                          pb.grad[n * cb * hw + i] += g[ca * hw + i];
                              }
                          });
}

/// Picks feature vectors of selected pixels: x [B,C,H,W], pixels as flat
/// indices b*H*W + y*W + x, result [N,C].
template <class T>
Tensor<T> gather_pixels(const Tensor<T>& x, std::span<const std::size_t> pixels) {
    if (x.rank() != 4) throw ConfigError("gather_pixels expects rank 4, got " + shape_str(x.shape()));
    const std::size_t C = x.dim(1), hw = x.dim(2) * x.dim(3), total = x.dim(0) * hw;
    std::vector<std::size_t> idx(pixels.begin(), pixels.end());
    std::vector<T> out(idx.size() * C);
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= total) throw ConfigError("gather_pixels: pixel index out of range");
        const std::size_t b = idx[i] / hw, p = idx[i] % hw;
        for (std::size_t c = 0; c < C; ++c) out[i * C + c] = x.data()[(b * C + c) * hw + p];
    }
    const std::size_t N = idx.size();
    return make_result<T>("gather_pixels", {N, C}, std::move(out), {x},
                          [idx = std::move(idx), C, hw](TensorNode<T>& self) {
                              auto& px = *self.parents[0];
                              for (std::size_t i = 0; i < idx.size(); ++i) {
                                  const std::size_t b = idx[i] / hw, p = idx[i] % hw;
                                  for (std::size_t c = 0; c < C; ++c)
                                      px.grad[(b * C + c) * hw + p] += self.grad[i * C + c];
                              }
                          });
}

/// Mean squared error over the selected pixels and all channels of
/// [B,C,H,W] tensors. `pixels` uses the gather_pixels indexing. Gradient flows
/// into `pred` only.
template <class T>
Tensor<T> masked_mse(const Tensor<T>& pred, const Tensor<T>& target, std::span<const std::size_t> pixels) {
    detail::require_same_shape(pred, target, "masked_mse");
    if (pred.rank() != 4) throw ConfigError("masked_mse expects rank 4");
    if (pixels.empty()) throw DataError("masked_mse: empty pixel set");
    const std::size_t C = pred.dim(1), hw = pred.dim(2) * pred.dim(3);
    std::vector<std::size_t> idx(pixels.begin(), pixels.end());
    double acc = 0.0;
    for (const std::size_t i : idx) {
        const std::size_t b = i / hw, p = i % hw;
        for (std::size_t c = 0; c < C; ++c) {
            const std::size_t k = (b * C + c) * hw + p;
            const double d = static_cast<double>(pred.data()[k]) - static_cast<double>(target.data()[k]);
            acc += d * d;
        }
    }
    const double denom = static_cast<double>(idx.size() * C);
    std::vector<T> tgt(target.data().begin(), target.data().end());
    return make_result<T>(
        "masked_mse", {1}, {static_cast<T>(acc / denom)}, {pred},
        [idx = std::move(idx), tgt = std::move(tgt), C, hw, denom](TensorNode<T>& self) {
            auto& pp = *self.parents[0];
            const T g = static_cast<T>(2.0 / denom) * self.grad[0];
            for (const std::size_t i : idx) {
                const std::size_t b = i / hw, p = i % hw;
                for (std::size_t c = 0; c < C; ++c) {
                    const std::size_t k = (b * C + c) * hw + p;
                    pp.grad[k] += g * (pp.data[k] - tgt[k]);
                }
            }
        });
}

/// Converts between scalar types; a plain copy without graph history.
template <class To, class From>
Tensor<To> tensor_cast(const Tensor<From>& t, bool requires_grad = false) {
    std::vector<To> d(t.numel());
    for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<To>(t.data()[i]);
    return Tensor<To>::from(t.shape(), std::move(d), requires_grad);
}

}  // namespace adm
