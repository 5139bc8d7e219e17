#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "mmq/errors.hpp"

namespace mmq {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

struct Node;
class Tape;

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::optional<std::vector<float>> grad;
  std::shared_ptr<Node> producer;  // null for leaves and constants
};

// Handle to a dense row-major float array. Copies share storage; values are
// never modified after construction (only the grad slot accumulates).
class Tensor {
 public:
  Tensor() = default;

  Tensor(Shape shape, std::vector<float> data, bool requires_grad = false)
      : impl_(std::make_shared<TensorImpl>()) {
    for (std::size_t d : shape) {
      if (d == 0) throw DimensionError("tensor dimension must be positive: " + shape_str(shape));
    }
    if (mmq::numel(shape) != data.size()) {
      throw DimensionError("shape " + shape_str(shape) + " does not hold " +
                           std::to_string(data.size()) + " values");
    }
    impl_->shape = std::move(shape);
    impl_->data = std::move(data);
    impl_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = mmq::numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, 0.0f), requires_grad);
  }
  static Tensor full(Shape shape, float value, bool requires_grad = false) {
    const std::size_t n = mmq::numel(shape);
    return Tensor(std::move(shape), std::vector<float>(n, value), requires_grad);
  }
  static Tensor scalar(float value, bool requires_grad = false) {
    return Tensor({1}, {value}, requires_grad);
  }
  static Tensor vector(std::vector<float> values, bool requires_grad = false) {
    const std::size_t n = values.size();
    return Tensor({n}, std::move(values), requires_grad);
  }
  static Tensor matrix(std::initializer_list<std::initializer_list<float>> rows,
                       bool requires_grad = false) {
    std::vector<float> data;
    std::size_t cols = rows.size() ? rows.begin()->size() : 0;
    for (const auto& r : rows) {
      if (r.size() != cols) throw DimensionError("ragged matrix literal");
      data.insert(data.end(), r.begin(), r.end());
    }
    return Tensor({rows.size(), cols}, std::move(data), requires_grad);
  }

  bool defined() const noexcept { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t i) const { return impl_->shape.at(i); }
  std::size_t numel() const { return impl_->data.size(); }
  std::span<const float> data() const { return impl_->data; }
  float at(std::size_t i) const { return impl_->data.at(i); }
  float item() const {
    if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
    return impl_->data[0];
  }

  bool requires_grad() const noexcept { return impl_ && impl_->requires_grad; }
  bool is_leaf() const noexcept { return !impl_->producer; }
  const std::optional<std::vector<float>>& grad() const { return impl_->grad; }
  void zero_grad() const { impl_->grad.reset(); }

  // Fresh leaf with copied values and no history.
  Tensor detach(bool requires_grad = false) const {
    return Tensor(shape(), impl_->data, requires_grad);
  }

  TensorImpl* impl() const noexcept { return impl_.get(); }
  const std::shared_ptr<TensorImpl>& impl_ptr() const noexcept { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

using ParamList = std::vector<Tensor>;

// Maps an upstream gradient onto one gradient per input. An undefined Tensor
// means "no contribution".
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_out)>;

struct Node {
  std::string name;
  std::vector<Tensor> inputs;
  std::weak_ptr<TensorImpl> output;
  BackwardFn backward;
  Tape* tape = nullptr;
  std::size_t index = 0;
};

namespace detail {
inline thread_local Tape* active_tape = nullptr;
inline thread_local bool grad_enabled = true;
}  // namespace detail

// Ordered record of differentiable operations. Constructing a Tape makes it
// the active recorder for the current thread until it is destroyed; tapes
// nest, so a backward pass with create_graph records onto the active tape.
class Tape {
 public:
  Tape() : previous_(detail::active_tape) { detail::active_tape = this; }
  ~Tape() {
    for (auto& op : ops_) op->tape = nullptr;
    detail::active_tape = previous_;
  }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  static Tape* active() noexcept { return detail::active_tape; }

  std::size_t size() const noexcept { return ops_.size(); }
  const std::vector<std::shared_ptr<Node>>& ops() const noexcept { return ops_; }

  void append(std::shared_ptr<Node> node) {
    node->tape = this;
    node->index = ops_.size();
    ops_.push_back(std::move(node));
  }

 private:
  std::vector<std::shared_ptr<Node>> ops_;
  Tape* previous_;
};

class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_enabled) { detail::grad_enabled = false; }
  ~NoGradGuard() { detail::grad_enabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

class GradModeGuard {
 public:
  explicit GradModeGuard(bool enabled) : previous_(detail::grad_enabled) {
    detail::grad_enabled = enabled;
  }
  ~GradModeGuard() { detail::grad_enabled = previous_; }
  GradModeGuard(const GradModeGuard&) = delete;
  GradModeGuard& operator=(const GradModeGuard&) = delete;

 private:
  bool previous_;
};

inline bool recording() noexcept { return detail::active_tape && detail::grad_enabled; }

namespace detail {

// Attaches `out` to the active tape when any input participates in gradients.
inline Tensor record(Tensor out, std::string name, std::vector<Tensor> inputs, BackwardFn fn) {
  if (!recording()) return out;
  const bool any = std::any_of(inputs.begin(), inputs.end(),
                               [](const Tensor& t) { return t.requires_grad(); });
  if (!any) return out;
  auto node = std::make_shared<Node>();
  node->name = std::move(name);
  node->inputs = std::move(inputs);
  node->output = out.impl_ptr();
  node->backward = std::move(fn);
  out.impl()->requires_grad = true;
  out.impl()->producer = node;
  Tape::active()->append(std::move(node));
  return out;
}

}  // namespace detail

}  // namespace mmq
