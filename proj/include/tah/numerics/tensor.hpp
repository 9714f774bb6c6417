#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "tah/errors.hpp"

namespace tah {

using Shape = std::vector<std::size_t>;

enum class DType : std::uint8_t { f32 = 1, f64 = 2 };

template <class T>
struct dtype_of;
template <>
struct dtype_of<float> {
  static constexpr DType value = DType::f32;
};
template <>
struct dtype_of<double> {
  static constexpr DType value = DType::f64;
};

inline std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

inline bool& grad_mode_flag() {
  thread_local bool enabled = true;
  return enabled;
}

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<T>& ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

/// Disables graph recording for the lifetime of the guard.
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

/// Dense row-major array with optional reverse-mode gradient tracking.
///
/// A Tensor is a shared handle: copies alias the same storage. Data is
/// treated as immutable once the tensor participates in a graph; only
/// optimizers and initializers write through mutable_data().
template <class T>
class Tensor {
 public:
  using value_type = T;
  using NodePtr = std::shared_ptr<detail::Node<T>>;

  Tensor() = default;

  Tensor(Shape shape, std::vector<T> values) : node_(std::make_shared<detail::Node<T>>()) {
    for (auto e : shape) {
      if (e == 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
    }
    if (shape_numel(shape) != values.size()) {
      throw DimensionError("data length " + std::to_string(values.size()) + " does not match shape " +
                           shape_str(shape));
    }
    node_->shape = std::move(shape);
    node_->data = std::move(values);
  }

  static Tensor zeros(const Shape& shape) { return Tensor(shape, std::vector<T>(shape_numel(shape), T(0))); }
  static Tensor full(const Shape& shape, T value) { return Tensor(shape, std::vector<T>(shape_numel(shape), value)); }
  static Tensor scalar(T value) { return Tensor({1}, {value}); }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t dim() const { return node_->shape.size(); }
  std::size_t numel() const { return node_->data.size(); }
  std::size_t rows() const { return node_->shape.at(0); }
  std::size_t cols() const { return node_->shape.size() > 1 ? node_->shape[1] : 1; }

  std::span<const T> data() const { return node_->data; }
  std::span<T> mutable_data() { return node_->data; }
  const std::vector<T>& vec() const { return node_->data; }

  T item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return node_->data[0];
  }
  T at(std::size_t i, std::size_t j) const { return node_->data[i * cols() + j]; }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  Tensor& set_requires_grad(bool on) {
    node_->requires_grad = on;
    return *this;
  }

  bool has_grad() const { return !node_->grad.empty(); }
  /// Gradient buffer; all zeros when nothing has been accumulated yet.
  std::vector<T> grad() const {
    if (node_->grad.empty()) return std::vector<T>(numel(), T(0));
    return node_->grad;
  }
  std::span<T> mutable_grad() { return node_->ensure_grad(); }
  void zero_grad() { node_->grad.clear(); }

  /// A copy of the values that does not participate in any graph.
  Tensor detach() const { return Tensor(shape(), node_->data); }

  /// Reverse-mode sweep from this scalar.
  void backward() const {
    if (!node_ || numel() != 1) throw ContractError("backward() requires a scalar loss");
    if (!node_->requires_grad) throw ContractError("backward() on a tensor that does not track gradients");
    std::vector<detail::Node<T>*> order;
    std::unordered_set<detail::Node<T>*> seen;
    // Iterative post-order DFS.
    std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
    stack.emplace_back(node_.get(), 0);
    seen.insert(node_.get());
    while (!stack.empty()) {
      auto& [n, next] = stack.back();
      if (next < n->parents.size()) {
        auto* p = n->parents[next++].get();
        if (p->requires_grad && !seen.count(p)) {
          seen.insert(p);
          stack.emplace_back(p, 0);
        }
      } else {
        order.push_back(n);
        stack.pop_back();
      }
    }
    node_->ensure_grad()[0] += T(1);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
      auto* n = *it;
      if (n->backward && !n->grad.empty()) n->backward(*n);
    }
  }

  const NodePtr& node() const { return node_; }

  /// Builds a result node wired to its inputs. Gradient tracking is on when
  /// grad mode is enabled and any input tracks gradients.
  static Tensor make_result(Shape shape, std::vector<T> values, std::vector<Tensor> inputs,
                            std::function<void(detail::Node<T>&)> backward) {
    Tensor out(std::move(shape), std::move(values));
    if (!grad_enabled()) return out;
    bool track = false;
    for (const auto& in : inputs) track = track || in.requires_grad();
    if (!track) return out;
    out.node_->requires_grad = true;
    for (auto& in : inputs) out.node_->parents.push_back(in.node_);
    out.node_->backward = std::move(backward);
    return out;
  }

 private:
  NodePtr node_;
};

}  // namespace tah
