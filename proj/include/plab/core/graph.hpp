#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "plab/core/error.hpp"
#include "plab/core/tensor.hpp"

namespace plab {

using NodeId = std::size_t;

class Graph;

/// Handle to a node on a Graph. Cheap to copy; valid while the graph generation lives.
struct Var {
  Graph* graph = nullptr;
  NodeId id = 0;

  [[nodiscard]] const Tensor& value() const;
  [[nodiscard]] const Shape& shape() const { return value().shape; }
  [[nodiscard]] bool requires_grad() const;
};

/// Identifies a node whose gradient should be kept after backward().
struct HookHandle {
  std::uint64_t generation = 0;
  NodeId node = 0;
};

/// Gradients produced by one backward pass.
class Gradients {
 public:
  [[nodiscard]] bool has(const std::string& name) const { return params_.count(name) != 0; }

  [[nodiscard]] const Tensor& param(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw Error("no gradient recorded for parameter '" + name + "'");
    return it->second;
  }

  [[nodiscard]] const Tensor& hook(const HookHandle& h) const {
    if (h.generation != generation_) throw Error("stale hook handle (graph generation mismatch)");
    auto it = hooks_.find(h.node);
    if (it == hooks_.end()) throw Error("hook handle was not registered on this graph");
    return it->second;
  }

  [[nodiscard]] const std::map<std::string, Tensor>& params() const { return params_; }
  std::map<std::string, Tensor>& params() { return params_; }

  /// Adds a parameter gradient, summing with an existing entry of the same name.
  void accumulate(const std::string& name, const Tensor& g) {
    auto [it, inserted] = params_.try_emplace(name, g);
    if (!inserted) {
      if (it->second.shape != g.shape) throw ShapeError("gradient shape mismatch for '" + name + "'");
      for (std::size_t i = 0; i < g.size(); ++i) it->second[i] += g[i];
    }
  }

 private:
  friend class Graph;
  std::uint64_t generation_ = 0;
  std::map<std::string, Tensor> params_;
  std::map<NodeId, Tensor> hooks_;
};

/// Tape of operations for reverse-mode differentiation. Nodes are appended in
/// execution order, so the tape is already topologically sorted.
class Graph {
 public:
  using BackwardFn = std::function<void(Graph&, NodeId)>;

  struct Node {
    Tensor value;
    Tensor grad;
    std::vector<NodeId> inputs;
    BackwardFn backward;
    std::string label;
    std::string param_name;
    bool requires_grad = false;
  };

  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Non-differentiable input.
  Var constant(Tensor value, std::string label = "const") {
    check_finite(value, label);
    Node n;
    n.value = std::move(value);
    n.label = std::move(label);
    return push(std::move(n));
  }

  /// Differentiable leaf. A non-empty name marks it as a parameter for backward().
  Var leaf(Tensor value, std::string name, bool requires_grad = true) {
    check_finite(value, name);
    Node n;
    n.value = std::move(value);
    n.label = name;
    n.param_name = std::move(name);
    n.requires_grad = requires_grad;
    return push(std::move(n));
  }

  /// Appends the result of an operation. Raises NumericError on non-finite output.
  Var emit(Tensor value, std::vector<NodeId> inputs, BackwardFn backward, std::string label) {
    check_finite(value, label);
    Node n;
    n.value = std::move(value);
    n.label = std::move(label);
    for (NodeId in : inputs) {
      if (in >= nodes_.size()) throw Error("operation input refers to a node not on this graph");
      n.requires_grad = n.requires_grad || nodes_[in].requires_grad;
    }
    n.inputs = std::move(inputs);
    if (n.requires_grad) n.backward = std::move(backward);
    return push(std::move(n));
  }

  HookHandle register_hook(Var v) {
    if (v.graph != this || v.id >= nodes_.size()) throw Error("hook requested on a node not on this graph");
    hooks_.push_back(v.id);
    return HookHandle{generation_, v.id};
  }

  /// Runs the reverse sweep from a scalar loss, then frees the tape.
  Gradients backward(Var loss) {
    if (loss.graph != this || loss.id >= nodes_.size()) throw Error("loss is not on the active graph");
    if (nodes_[loss.id].value.size() != 1) {
      throw ShapeError("backward requires a scalar loss, got shape " + shape_string(nodes_[loss.id].value.shape));
    }
    Gradients out;
    out.generation_ = generation_;
    if (nodes_[loss.id].requires_grad) {
      nodes_[loss.id].grad = Tensor(nodes_[loss.id].value.shape, 1.0);
      for (NodeId id = loss.id + 1; id-- > 0;) {
        Node& n = nodes_[id];
        if (n.grad.empty() || !n.backward) continue;
        n.backward(*this, id);
      }
    }
    for (NodeId id = 0; id < nodes_.size(); ++id) {
      Node& n = nodes_[id];
      if (!n.param_name.empty() && n.requires_grad) {
        out.accumulate(n.param_name, n.grad.empty() ? Tensor(n.value.shape, 0.0) : n.grad);
      }
    }
    for (NodeId h : hooks_) {
      Node& n = nodes_[h];
      out.hooks_[h] = n.grad.empty() ? Tensor(n.value.shape, 0.0) : n.grad;
    }
    clear();
    return out;
  }

  void clear() {
    nodes_.clear();
    hooks_.clear();
    ++generation_;
  }

  [[nodiscard]] std::size_t size() const { return nodes_.size(); }
  [[nodiscard]] std::uint64_t generation() const { return generation_; }

  [[nodiscard]] const Node& node(NodeId id) const { return nodes_.at(id); }
  [[nodiscard]] const Tensor& value(NodeId id) const { return nodes_.at(id).value; }
  [[nodiscard]] const Tensor& grad(NodeId id) const { return nodes_.at(id).grad; }
  [[nodiscard]] bool requires_grad(NodeId id) const { return nodes_.at(id).requires_grad; }

  /// Gradient buffer of an input node, allocated on first use. Returns nullptr
  /// when the node does not take gradients.
  Tensor* grad_buffer(NodeId id) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return nullptr;
    if (n.grad.empty() && !n.value.empty()) n.grad = Tensor(n.value.shape, 0.0);
    return &n.grad;
  }

 private:
  Var push(Node n) {
    nodes_.push_back(std::move(n));
    return Var{this, nodes_.size() - 1};
  }

  void check_finite(const Tensor& t, const std::string& label) const {
    if (!t.all_finite()) {
      throw NumericError("non-finite value produced at node " + std::to_string(nodes_.size()) + " (" + label + ")");
    }
  }

  std::vector<Node> nodes_;
  std::vector<NodeId> hooks_;
  std::uint64_t generation_ = 1;
};

inline const Tensor& Var::value() const { return graph->value(id); }
inline bool Var::requires_grad() const { return graph->requires_grad(id); }

}  // namespace plab
