#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace fdnm {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

class Tensor;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> inputs;
  // Propagates this node's grad into the grads of `inputs`. Empty for leaves.
  std::function<void(std::span<const double>)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
    return grad;
  }
};

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// Disables graph recording on this thread for its lifetime (inference paths).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_mode_flag()) { detail::grad_mode_flag() = false; }
  ~NoGradGuard() { detail::grad_mode_flag() = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

inline bool grad_enabled() { return detail::grad_mode_flag(); }

/// Dense row-major array of doubles with an optional gradient slot.
///
/// A Tensor is a handle: copies share storage. Every op returns a fresh
/// Tensor; when any input requires grad the result remembers how to push its
/// gradient back, which is what `backward` walks.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, bool requires_grad = false)
      : Tensor(std::move(shape), std::vector<double>{}, requires_grad) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<detail::Node>()) {
    for (std::size_t extent : shape) {
      if (extent == 0) throw Error("tensor: zero extent in shape " + shape_str(shape));
    }
    const std::size_t n = shape_numel(shape);
    if (values.empty()) values.assign(n, 0.0);
    if (values.size() != n) {
      throw Error("tensor: shape " + shape_str(shape) + " needs " + std::to_string(n) + " values, got " +
                  std::to_string(values.size()));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor scalar(double v, bool requires_grad = false) { return Tensor({1}, {v}, requires_grad); }

  static Tensor full(Shape shape, double v, bool requires_grad = false) {
    const std::size_t n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v), requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node().shape; }
  std::size_t rank() const { return node().shape.size(); }
  std::size_t dim(std::size_t i) const { return node().shape.at(i); }
  std::size_t numel() const { return node().data.size(); }

  std::span<const double> values() const { return node().data; }
  /// In-place access; only for leaves (parameter init, optimizer updates, finite differences).
  std::span<double> values_mut() { return node().data; }
  double operator[](std::size_t i) const { return node().data[i]; }

  double item() const {
    if (numel() != 1) throw Error("item: tensor of shape " + shape_str(shape()) + " is not a scalar");
    return node().data[0];
  }

  bool requires_grad() const { return node().requires_grad; }
  void set_requires_grad(bool on) { node().requires_grad = on; }
  bool is_leaf() const { return !node().backward; }

  bool has_grad() const { return node().grad.size() == node().data.size(); }
  std::span<const double> grad() const {
    if (!has_grad()) throw Error("grad: no gradient has been accumulated");
    return node().grad;
  }
  std::span<double> grad_mut() { return node().grad_buffer(); }
  void zero_grad() { node().grad.clear(); }

  /// Same values, fresh leaf with no history.
  Tensor detach() const { return Tensor(shape(), node().data, false); }
  Tensor clone() const { return Tensor(shape(), node().data, requires_grad()); }

  detail::Node& node() const {
    if (!node_) throw Error("tensor: use of undefined tensor");
    return *node_;
  }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

inline std::vector<double>& grad_of(const Tensor& t) { return t.node().grad_buffer(); }

/// Wraps a forward result; records the backward closure only when needed.
template <class Backward>
Tensor make_op(Shape shape, std::vector<double> data, std::initializer_list<const Tensor*> inputs,
               Backward&& backward) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor* t : inputs) any = any || t->requires_grad();
  if (!any) return out;
  Node& n = out.node();
  n.requires_grad = true;
  for (const Tensor* t : inputs) n.inputs.push_back(t->node_ptr());
  n.backward = std::forward<Backward>(backward);
  return out;
}

template <class Backward>
Tensor make_op(Shape shape, std::vector<double> data, const std::vector<Tensor>& inputs, Backward&& backward) {
  Tensor out(std::move(shape), std::move(data), false);
  if (!grad_enabled()) return out;
  bool any = false;
  for (const Tensor& t : inputs) any = any || t.requires_grad();
  if (!any) return out;
  Node& n = out.node();
  n.requires_grad = true;
  for (const Tensor& t : inputs) n.inputs.push_back(t.node_ptr());
  n.backward = std::forward<Backward>(backward);
  return out;
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace detail

/// Reverse-mode sweep from a scalar. Leaf grads accumulate across calls;
/// intermediate grads are reset at the start of each call.
inline void backward(const Tensor& loss) {
  if (loss.numel() != 1) throw Error("backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  if (!loss.requires_grad()) throw Error("backward: loss does not depend on any tensor requiring grad");

  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack{{&loss.node(), 0}};
  seen.insert(&loss.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->inputs.size()) {
      detail::Node* child = node->inputs[next++].get();
      if (child->requires_grad && seen.insert(child).second) stack.push_back({child, 0});
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (detail::Node* n : order) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  loss.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(n->grad);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and reduction ops

inline Tensor add(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  return detail::make_op(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    for (const Tensor* t : {&a, &b}) {
      if (!t->requires_grad()) continue;
      auto& gt = detail::grad_of(*t);
      for (std::size_t i = 0; i < g.size(); ++i) gt[i] += g[i];
    }
  });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  return detail::make_op(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    if (a.requires_grad()) {
      auto& ga = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  detail::require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  auto av = a.values(), bv = b.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  return detail::make_op(a.shape(), std::move(out), {&a, &b}, [a, b](std::span<const double> g) {
    auto av = a.values(), bv = b.values();
    if (a.requires_grad()) {
      auto& ga = detail::grad_of(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
    }
    if (b.requires_grad()) {
      auto& gb = detail::grad_of(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
    }
  });
}

inline Tensor scale(const Tensor& a, double c) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (double& v : out) v *= c;
  return detail::make_op(a.shape(), std::move(out), {&a}, [a, c](std::span<const double> g) {
    auto& ga = detail::grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += c * g[i];
  });
}

inline Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.values()) s += v;
  return detail::make_op({1}, {s}, {&a}, [a](std::span<const double> g) {
    auto& ga = detail::grad_of(a);
    for (double& v : ga) v += g[0];
  });
}

inline Tensor mean(const Tensor& a) { return scale(sum(a), 1.0 / static_cast<double>(a.numel())); }

/// Sum of scalars; an empty list gives a constant zero.
inline Tensor add_n(const std::vector<Tensor>& terms) {
  if (terms.empty()) return Tensor::scalar(0.0);
  for (const Tensor& t : terms) {
    if (t.numel() != 1) throw Error("add_n: expects scalars, got " + shape_str(t.shape()));
  }
  double s = 0.0;
  for (const Tensor& t : terms) s += t.item();
  return detail::make_op({1}, {s}, terms, [terms](std::span<const double> g) {
    for (const Tensor& t : terms) {
      if (t.requires_grad()) detail::grad_of(t)[0] += g[0];
    }
  });
}

inline Tensor relu(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = av[i] <= 0.0 ? 0.0 : av[i];  // NaN passes through
  return detail::make_op(a.shape(), std::move(out), {&a}, [a](std::span<const double> g) {
    auto av = a.values();
    auto& ga = detail::grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (av[i] > 0.0) ga[i] += g[i];
    }
  });
}

inline double sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline Tensor sigmoid(const Tensor& a) {
  std::vector<double> out(a.numel());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = sigmoid(av[i]);
  auto saved = std::make_shared<std::vector<double>>(out);
  return detail::make_op(a.shape(), std::move(out), {&a}, [a, saved](std::span<const double> g) {
    auto& ga = detail::grad_of(a);
    const auto& y = *saved;
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * y[i] * (1.0 - y[i]);
  });
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw Error("reshape: cannot view " + shape_str(a.shape()) + " as " + shape_str(shape));
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  return detail::make_op(std::move(shape), std::move(out), {&a}, [a](std::span<const double> g) {
    auto& ga = detail::grad_of(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Collapses all trailing dims: [N x ...] -> [N x rest].
inline Tensor flatten(const Tensor& a) {
  const std::size_t n = a.dim(0);
  return reshape(a, {n, a.numel() / n});
}

/// Sum of a ⊙ w with w a constant; turns any tensor output into a test scalar.
inline Tensor weighted_sum(const Tensor& a, std::span<const double> w) {
  if (w.size() != a.numel()) throw Error("weighted_sum: weight count mismatch");
  double s = 0.0;
  auto av = a.values();
  for (std::size_t i = 0; i < w.size(); ++i) s += av[i] * w[i];
  std::vector<double> weights(w.begin(), w.end());
  return detail::make_op({1}, {s}, {&a}, [a, weights](std::span<const double> g) {
    auto& ga = detail::grad_of(a);
    for (std::size_t i = 0; i < weights.size(); ++i) ga[i] += g[0] * weights[i];
  });
}

inline bool all_finite(const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) return false;
  }
  return true;
}

}  // namespace fdnm
