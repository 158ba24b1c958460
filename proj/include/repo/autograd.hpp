#pragma once

// Taped reverse-mode differentiation over dense tensors.
//
// A Graph records every op in creation order; creation order is a valid
// topological order, so backward() walks the tape in reverse. Parameters live
// outside the graph and receive gradients by accumulation, which lets several
// per-sequence graphs contribute to one optimizer step.

#include <cstddef>
#include <deque>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "repo/tensor.hpp"

namespace repo {

template <typename T>
struct Parameter {
  std::string name;
  Tensor<T> value;
  Tensor<T> grad;

  Parameter() = default;
  Parameter(std::string n, Tensor<T> v)
      : name(std::move(n)), value(std::move(v)), grad(value.shape()) {}

  void zero_grad() {
    if (!grad.same_shape(value)) grad = Tensor<T>(value.shape());
    grad.fill(T(0));
  }
};

template <typename T>
struct GradientSlot {
  std::string name;
  Tensor<T> grad;
};

template <typename T>
class Graph;

template <typename T>
struct Var {
  Graph<T>* graph = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return graph->value(id); }
  const Shape& shape() const { return value().shape(); }
};

template <typename T>
class Graph {
 public:
  using Backward = std::function<void(Graph&, std::size_t self)>;

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var<T> constant(Tensor<T> v) {
    Node& n = nodes_.emplace_back();
    n.own = std::move(v);
    n.view = &n.own;
    return {this, nodes_.size() - 1};
  }

  // Non-differentiable leaf referencing `v`, which must outlive the graph.
  Var<T> frozen(const Tensor<T>& v) {
    Node& n = nodes_.emplace_back();
    n.view = &v;
    return {this, nodes_.size() - 1};
  }

  // Parameter values are referenced, not copied; they must outlive the graph.
  Var<T> param(Parameter<T>& p) {
    Node& n = nodes_.emplace_back();
    n.view = &p.value;
    n.param = &p;
    n.needs_grad = true;
    return {this, nodes_.size() - 1};
  }

  // Records an op output. `backward` runs only when the output has received
  // gradient and at least one input needs it.
  Var<T> push(Tensor<T> value, std::initializer_list<Var<T>> inputs,
              Backward backward) {
    bool needs = false;
    for (const auto& in : inputs) needs = needs || nodes_[in.id].needs_grad;
    Node& n = nodes_.emplace_back();
    n.own = std::move(value);
    n.view = &n.own;
    n.needs_grad = needs;
    if (needs) n.backward = std::move(backward);
    return {this, nodes_.size() - 1};
  }

  const Tensor<T>& value(std::size_t id) const { return *nodes_[id].view; }
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  // Gradient buffer of a node, allocated as zeros on first use.
  Tensor<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad = Tensor<T>(n.view->shape());
    return n.grad;
  }

  std::size_t size() const { return nodes_.size(); }

  // Seeds d(loss)/d(loss) = seed and accumulates into every reachable
  // parameter's grad.
  void backward(Var<T> loss, T seed = T(1)) {
    if (value(loss.id).size() != 1) {
      throw ShapeError("backward() needs a scalar loss, got shape " +
                       shape_str(value(loss.id).shape()));
    }
    grad(loss.id)[0] += seed;
    for (std::size_t id = loss.id + 1; id-- > 0;) {
      Node& n = nodes_[id];
      if (n.grad.empty() || !n.needs_grad) continue;
      if (n.backward) n.backward(*this, id);
      if (n.param) {
        auto& pg = n.param->grad;
        if (!pg.same_shape(n.param->value)) pg = Tensor<T>(n.param->value.shape());
        for (std::size_t i = 0; i < pg.size(); ++i) pg[i] += n.grad[i];
      }
    }
  }

 private:
  struct Node {
    Tensor<T> own;
    const Tensor<T>* view = nullptr;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    bool needs_grad = false;
    Backward backward;
  };

  std::deque<Node> nodes_;
};

// Zeroes the given parameters' gradients, back-propagates `loss`, and returns
// the resulting slots. Parameters the loss does not depend on get zeros.
template <typename T>
std::vector<GradientSlot<T>> gradient_of(Var<T> loss,
                                         const std::vector<Parameter<T>*>& params) {
  for (auto* p : params) p->zero_grad();
  loss.graph->backward(loss);
  std::vector<GradientSlot<T>> slots;
  slots.reserve(params.size());
  for (auto* p : params) slots.push_back({p->name, p->grad});
  return slots;
}

}  // namespace repo
