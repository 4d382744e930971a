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

#include "diffnet/graph.hpp"

#include "common/error.hpp"

namespace e2d::diffnet {

Graph::Node& Graph::node(Var v) {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorKind::InvalidArgument,
          "variable does not belong to this graph");
  return nodes_[static_cast<std::size_t>(v.id)];
}

const Graph::Node& Graph::node(Var v) const {
  require(v.id >= 0 && static_cast<std::size_t>(v.id) < nodes_.size(), ErrorKind::InvalidArgument,
          "variable does not belong to this graph");
  return nodes_[static_cast<std::size_t>(v.id)];
}

Var Graph::input(Tensor value, bool requires_grad) {
  require(value.all_finite(), ErrorKind::NonFinite, "non-finite graph input");
  Node n;
  n.owned_value = std::move(value);
  n.requires_grad = requires_grad;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::external(const Tensor& value, Tensor* grad) {
  Node n;
  n.external_value = &value;
  n.external_grad = grad;
  n.requires_grad = grad != nullptr;
  if (grad) {
    require(grad->same_shape(value), ErrorKind::Shape, "gradient buffer shape mismatch");
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

Var Graph::emplace(const char* op, Tensor value, std::vector<Var> parents, BackwardFn fn) {
  if (!value.all_finite()) {
    fail(ErrorKind::NonFinite, std::string("non-finite output from ") + op);
  }
  Node n;
  n.owned_value = std::move(value);
  for (Var p : parents) {
    n.requires_grad = n.requires_grad || node(p).requires_grad;
  }
  n.parents = std::move(parents);
  if (n.requires_grad) {
    n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size() - 1)};
}

const Tensor& Graph::value(Var v) const {
  const Node& n = node(v);
  return n.external_value ? *n.external_value : n.owned_value;
}

bool Graph::requires_grad(Var v) const { return node(v).requires_grad; }

Tensor Graph::grad(Var v) const {
  const Node& n = node(v);
  if (n.external_grad) return *n.external_grad;
  if (n.grad_ready) return n.owned_grad;
  return Tensor(value(v).shape(), 0.0f);
}

Tensor& Graph::grad_buffer(Var v) {
  Node& n = node(v);
  require(n.requires_grad, ErrorKind::InvalidArgument, "node does not require a gradient");
  if (n.external_grad) return *n.external_grad;
  if (!n.grad_ready) {
    n.owned_grad = Tensor(value(v).shape(), 0.0f);
    n.grad_ready = true;
  }
  return n.owned_grad;
}

void Graph::backward(Var loss) {
  require(!nodes_.empty() && loss.valid(), ErrorKind::InvalidArgument,
          "backward called before any forward pass was recorded");
  require(!consumed_, ErrorKind::InvalidArgument,
          "backward called twice on the same graph; run a new forward pass");
  require(value(loss).size() == 1, ErrorKind::Shape, "backward needs a scalar loss");
  consumed_ = true;
  if (!node(loss).requires_grad) return;

  grad_buffer(loss)[0] += 1.0f;
  for (int id = loss.id; id >= 0; --id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    if (!n.requires_grad || !n.backward) continue;
    if (!n.grad_ready && !n.external_grad) continue;
    n.backward(*this, Var{id});
  }
}

} // namespace e2d::diffnet
