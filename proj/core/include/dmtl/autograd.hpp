// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "dmtl/tensor.hpp"

namespace dmtl::ag {

struct Node;
using NodePtr = std::shared_ptr<Node>;

/// One vertex of the dynamic computation graph. Gradients are accumulated
/// into `grad` (allocated on first use) by the consumers' backward closures.
struct Node {
  Tensor value;
  Tensor grad;
  bool requires_grad = false;
  std::vector<NodePtr> inputs;
  std::function<void(Node&)> backward;

  Tensor& grad_buffer();
};

/// Handle to a graph node. Copies share the node.
class Var {
 public:
  Var() = default;
  explicit Var(NodePtr node) : node_(std::move(node)) {}

  const Tensor& value() const { return node_->value; }
  Tensor& mutable_value() { return node_->value; }
  const Shape& shape() const { return node_->value.shape(); }
  int dim(int i) const { return node_->value.dim(i); }

  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool has_grad() const { return node_ && !node_->grad.empty(); }
  /// Accumulated gradient; zero tensor of matching shape if none was received.
  Tensor grad() const;
  void zero_grad() { node_->grad = Tensor(); }

  bool defined() const noexcept { return static_cast<bool>(node_); }
  const NodePtr& node() const noexcept { return node_; }

 private:
  NodePtr node_;
};

/// Leaf that never receives gradient.
Var constant(Tensor value);
/// Trainable leaf.
Var leaf(Tensor value);

/// True while graph recording is enabled for this thread.
bool grad_enabled();

/// RAII guard disabling graph recording on this thread.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Builds the output node of an op. The backward closure is attached only
/// when recording is on and at least one input requires gradient.
Var make_result(Tensor value, std::vector<Var> inputs, std::function<void(Node&)> backward);

/// Reverse-mode sweep from a scalar root.
void backward(const Var& root);

}  // namespace dmtl::ag
