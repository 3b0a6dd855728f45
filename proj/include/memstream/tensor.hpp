#pragma once

// Dense double-precision tensors with reverse-mode automatic differentiation.
//
// A Tensor is a value-like handle onto a tape node. Every differentiable
// operation records its parents and a backward closure; backward() walks the
// tape in reverse topological order exactly once. Graphs are single-threaded;
// tensors themselves may be moved freely between threads.

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <numeric>
#include <unordered_set>
#include <vector>

#include "memstream/common.hpp"

namespace memstream {

using Shape = std::vector<long>;

inline long shape_numel(const Shape& s) {
  long n = 1;
  for (const long d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> value;
  bool requires_grad = false;
  std::vector<double> grad;  // empty until first accumulation
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void()> backward;  // accumulates this->grad into parents

  long numel() const { return static_cast<long>(value.size()); }

  double* grad_buffer() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad.data();
  }
};

// Thread-local switch: when false, ops produce detached results (no tape).
inline bool& grad_mode() {
  thread_local bool enabled = true;
  return enabled;
}

}  // namespace detail

/// RAII guard disabling tape recording (evaluation / internal updates).
class NoGradGuard {
public:
  NoGradGuard() : prev_(detail::grad_mode()) { detail::grad_mode() = false; }
  ~NoGradGuard() { detail::grad_mode() = prev_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

private:
  bool prev_;
};

inline bool grad_enabled() { return detail::grad_mode(); }

class Tensor {
public:
  Tensor() : node_(std::make_shared<detail::Node>()) {}

  explicit Tensor(Shape shape, double fill = 0.0)
      : node_(std::make_shared<detail::Node>()) {
    node_->shape = std::move(shape);
    node_->value.assign(shape_numel(node_->shape), fill);
  }

  Tensor(Shape shape, std::vector<double> data)
      : node_(std::make_shared<detail::Node>()) {
    if (shape_numel(shape) != static_cast<long>(data.size())) {
      throw ShapeError(msg("tensor data size ", data.size(),
                           " does not match shape ", shape_str(shape)));
    }
    node_->shape = std::move(shape);
    node_->value = std::move(data);
  }

  static Tensor scalar(double v) { return Tensor(Shape{}, {v}); }

  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }

  static Tensor full(Shape shape, double v) {
    return Tensor(std::move(shape), v);
  }

  static Tensor randn(Shape shape, RandomSource& rng, double std_dev = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal() * std_dev;
    return t;
  }

  static Tensor rand_uniform(Shape shape, RandomSource& rng, double lo = -1.0,
                             double hi = 1.0) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.uniform(lo, hi);
    return t;
  }

  static Tensor trunc_normal(Shape shape, RandomSource& rng, double std_dev) {
    Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.trunc_normal(std_dev);
    return t;
  }

  const Shape& shape() const { return node_->shape; }
  long dim(int i) const {
    const int n = static_cast<int>(node_->shape.size());
    if (i < 0) i += n;
    if (i < 0 || i >= n) {
      throw ShapeError(msg("dim index ", i, " out of range for shape ",
                           shape_str(node_->shape)));
    }
    return node_->shape[i];
  }
  int ndim() const { return static_cast<int>(node_->shape.size()); }
  long numel() const { return node_->numel(); }

  std::vector<double>& data() { return node_->value; }
  const std::vector<double>& data() const { return node_->value; }

  double item() const {
    if (numel() != 1) {
      throw ContractError(
          msg("item() requires a single-element tensor, got shape ",
              shape_str(shape())));
    }
    return node_->value[0];
  }

  bool requires_grad() const { return node_->requires_grad; }

  Tensor& set_requires_grad(bool flag) {
    node_->requires_grad = flag;
    return *this;
  }

  /// Gradient buffer; zeros if backward has not reached this tensor yet.
  std::vector<double> grad() const {
    if (node_->grad.empty()) return std::vector<double>(numel(), 0.0);
    return node_->grad;
  }

  bool has_grad() const { return !node_->grad.empty(); }

  void zero_grad() { node_->grad.clear(); }

  /// Leaf copy carrying the same values, cut off from the tape.
  Tensor detach() const {
    Tensor t;
    t.node_->shape = node_->shape;
    t.node_->value = node_->value;
    return t;
  }

  const char* op() const { return node_->op; }

  /// Reverse-mode sweep from a scalar. Grad accumulates into every
  /// requires_grad leaf; repeated calls without zero_grad() accumulate.
  void backward() const {
    if (numel() != 1) {
      throw ContractError(msg("backward() requires a scalar loss, got shape ",
                              shape_str(shape())));
    }
    if (!node_->requires_grad) return;

    // Iterative post-order DFS for reverse topological order.
    std::vector<detail::Node*> order;
    std::unordered_set<detail::Node*> seen;
    std::vector<std::pair<detail::Node*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, idx] = stack.back();
      if (idx < n->parents.size()) {
        detail::Node* p = n->parents[idx++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }

    double* g = node_->grad_buffer();
    g[0] += 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      detail::Node* n = *it;
      if (!n->backward) continue;  // leaf: keep accumulated grad
      if (!n->grad.empty()) {
        n->backward();
        // Intermediate grads are transient; clearing them keeps repeated
        // backward() calls correct (only leaves accumulate) and releases
        // memory as the sweep walks down the tape.
        n->grad.clear();
      }
    }
  }

  std::shared_ptr<detail::Node>& node() { return node_; }
  const std::shared_ptr<detail::Node>& node() const { return node_; }

private:
  std::shared_ptr<detail::Node> node_;
};

namespace detail {

/// Throws if the freshly computed op output contains NaN/Inf. A plain sum
/// scan detects any non-finite element (NaN poisons the sum, Inf saturates
/// it) at one add per element.
inline void check_finite(const char* op, const std::vector<double>& v) {
  double acc = 0.0;
  for (const double x : v) acc += x;
  if (!std::isfinite(acc)) {
    // Pin down whether an element is actually bad; a finite-overflow of the
    // plain sum would be a false positive.
    for (std::size_t i = 0; i < v.size(); ++i) {
      if (!std::isfinite(v[i])) {
        throw NumericError(msg("non-finite value in output of '", op,
                               "' at flat index ", i));
      }
    }
  }
}

/// Builds the result node of an op, wiring parents and the backward closure
/// only when the tape is live and some parent needs gradients.
inline Tensor make_op_result(const char* op, Shape shape,
                             std::vector<double> value,
                             std::vector<Tensor> parents,
                             std::function<void(Node&)> backward) {
  check_finite(op, value);
  Tensor out(std::move(shape), std::move(value));
  Node* n = out.node().get();
  n->op = op;
  bool needs = false;
  if (grad_mode()) {
    for (const Tensor& p : parents) {
      if (p.requires_grad()) {
        needs = true;
        break;
      }
    }
  }
  if (needs) {
    n->requires_grad = true;
    n->parents.reserve(parents.size());
    for (Tensor& p : parents) n->parents.push_back(p.node());
    n->backward = [n, fn = std::move(backward)]() { fn(*n); };
  }
  return out;
}

}  // namespace detail

}  // namespace memstream
