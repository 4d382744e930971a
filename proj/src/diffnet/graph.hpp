/*
 * Copyright 2026 The e2d Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#pragma once

#include <functional>
#include <string>
#include <vector>

#include "diffnet/tensor.hpp"

namespace e2d::diffnet {

/// Handle to a node recorded on a Graph.
struct Var {
  int id = -1;
  bool valid() const noexcept { return id >= 0; }
};

class Graph;
using BackwardFn = std::function<void(Graph&, Var self)>;

/// Tape for one forward pass. Nodes are appended in execution order, so a
/// reverse sweep is a valid topological order for backward().
///
/// A graph supports exactly one backward(); record a fresh graph for the
/// next step.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  /// Owned leaf. With requires_grad the gradient is readable via grad().
  Var input(Tensor value, bool requires_grad = false);

  /// Leaf that aliases external storage. When `grad` is non-null, backward
  /// accumulates into it (used for model parameters and synthetic pixels).
  /// The referenced tensors must outlive the graph.
  Var external(const Tensor& value, Tensor* grad);

  /// Appends an op output; `fn` runs during backward when the output is
  /// reachable from the loss. Non-finite outputs raise ErrorKind::NonFinite.
  Var emplace(const char* op, Tensor value, std::vector<Var> parents, BackwardFn fn);

  const Tensor& value(Var v) const;
  bool requires_grad(Var v) const;

  /// Gradient of the last backward() w.r.t. `v`; zeros when unreached.
  Tensor grad(Var v) const;

  /// Zero-initialized gradient buffer for `v`, allocated on first use.
  /// Callers must check requires_grad(v) first.
  Tensor& grad_buffer(Var v);

  /// Reverse sweep from a scalar loss.
  void backward(Var loss);

  std::size_t node_count() const noexcept { return nodes_.size(); }

 private:
  struct Node {
    Tensor owned_value;
    const Tensor* external_value = nullptr;
    Tensor owned_grad;
    Tensor* external_grad = nullptr;
    bool requires_grad = false;
    bool grad_ready = false;
    std::vector<Var> parents;
    BackwardFn backward;
  };

  Node& node(Var v);
  const Node& node(Var v) const;

  std::vector<Node> nodes_;
  bool consumed_ = false;
};

} // namespace e2d::diffnet
