#pragma once

#include <span>
#include <unordered_map>
#include <vector>

#include "mmq/ops.hpp"
#include "mmq/tensor.hpp"

namespace mmq {

namespace detail {

inline Tensor accumulate(const Tensor& existing, const Tensor& incoming, bool create_graph) {
  if (!existing.defined()) return incoming;
  if (create_graph) return add(existing, incoming);
  std::vector<float> out(existing.data().begin(), existing.data().end());
  auto in = incoming.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += in[i];
  return Tensor(existing.shape(), std::move(out));
}

// Reverse sweep over the tape that produced `out`. Returns the accumulated
// gradient of every tensor touched, keyed by implementation pointer. When
// `visit` is set it is called for each tensor whose gradient is final.
template <class Visit>
std::unordered_map<const TensorImpl*, Tensor> reverse_sweep(const Tensor& out, bool create_graph,
                                                           Visit&& visit) {
  if (!out.defined()) throw ContractError("backward on undefined tensor");
  if (out.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got " + shape_str(out.shape()));
  }
  std::unordered_map<const TensorImpl*, Tensor> acc;
  acc[out.impl()] = Tensor::full(out.shape(), 1.0f);

  const auto& producer = out.impl()->producer;
  if (!producer) {
    visit(out.impl(), acc[out.impl()]);
    return acc;
  }
  Tape* tape = producer->tape;
  if (!tape) throw ContractError("backward on a tensor whose tape has been destroyed");

  GradModeGuard mode(create_graph);
  for (std::size_t i = producer->index + 1; i-- > 0;) {
    std::shared_ptr<Node> node = tape->ops()[i];
    auto output = node->output.lock();
    if (!output) continue;
    auto it = acc.find(output.get());
    if (it == acc.end()) continue;
    Tensor upstream = it->second;
    visit(output.get(), upstream);
    std::vector<Tensor> grads = node->backward(upstream);
    for (std::size_t j = 0; j < node->inputs.size(); ++j) {
      const Tensor& input = node->inputs[j];
      if (!input.requires_grad() || j >= grads.size() || !grads[j].defined()) continue;
      if (grads[j].shape() != input.shape()) {
        throw DimensionError("backward of " + node->name + " produced gradient " +
                             shape_str(grads[j].shape()) + " for input " +
                             shape_str(input.shape()));
      }
      Tensor& slot = acc[input.impl()];
      slot = accumulate(slot, grads[j], create_graph);
    }
  }
  // Leaves (and tensors from other tapes) are final once the sweep completes.
  for (auto& [impl, g] : acc) {
    if (!impl->producer || impl->producer->tape != tape) visit(impl, g);
  }
  return acc;
}

}  // namespace detail

// Gradients of scalar `out` with respect to each tensor in `wrt`. Tensors that
// do not influence `out` get zeros. With create_graph the returned gradients
// are themselves recorded on the active tape.
inline std::vector<Tensor> grad(const Tensor& out, std::span<const Tensor> wrt,
                                bool create_graph = false) {
  auto acc = detail::reverse_sweep(out, create_graph, [](const TensorImpl*, const Tensor&) {});
  std::vector<Tensor> result;
  result.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto it = acc.find(t.impl());
    result.push_back(it != acc.end() ? it->second : Tensor::zeros(t.shape()));
  }
  return result;
}

// Accumulates d(loss)/dt into t.grad for every requires_grad tensor reachable
// from `loss`.
inline void backward(const Tensor& loss) {
  detail::reverse_sweep(loss, false, [](const TensorImpl* impl, const Tensor& g) {
    auto* target = const_cast<TensorImpl*>(impl);
    if (!target->requires_grad) return;
    if (!target->grad) {
      target->grad = std::vector<float>(g.data().begin(), g.data().end());
    } else {
      for (std::size_t i = 0; i < g.numel(); ++i) (*target->grad)[i] += g.data()[i];
    }
  });
}

// p <- p - lr * grad, returning fresh leaves. Missing gradients count as zero.
inline ParamList sgd_step(std::span<const Tensor> params, float lr) {
  ParamList out;
  out.reserve(params.size());
  for (const auto& p : params) {
    std::vector<float> v(p.data().begin(), p.data().end());
    if (const auto& g = p.grad()) {
      for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * (*g)[i];
    }
    out.emplace_back(p.shape(), std::move(v), p.requires_grad());
  }
  return out;
}

// Same update from an explicit gradient list.
inline ParamList sgd_step(std::span<const Tensor> params, std::span<const Tensor> grads,
                          float lr) {
  if (params.size() != grads.size()) throw ContractError("sgd_step: parameter/gradient count");
  ParamList out;
  out.reserve(params.size());
  for (std::size_t k = 0; k < params.size(); ++k) {
    detail::require_same_shape(params[k], grads[k], "sgd_step");
    std::vector<float> v(params[k].data().begin(), params[k].data().end());
    auto g = grads[k].data();
    for (std::size_t i = 0; i < v.size(); ++i) v[i] -= lr * g[i];
    out.emplace_back(params[k].shape(), std::move(v), params[k].requires_grad());
  }
  return out;
}

}  // namespace mmq
