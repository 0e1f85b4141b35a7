// Copyright 2026 The mtmkit Authors
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//      http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

// Eager reverse-mode tape. Every op appends one node; node ids are a
// topological order, so backward is a single reverse sweep that visits each
// node once. Fan-out is handled by accumulating into each input's gradient.

#include <cstddef>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mtm/ad/tensor.hpp"
#include "mtm/common.hpp"

namespace mtm::ad {

template <class T>
class Tape;

template <class T>
struct Var {
  Tape<T>* tape = nullptr;
  std::size_t id = 0;

  const Tensor<T>& value() const { return tape->value(id); }
  const Shape& shape() const { return value().shape; }
  bool valid() const { return tape != nullptr; }
};

template <class T>
class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push("constant", std::move(value), false, {}); }
  Var<T> variable(Tensor<T> value) { return push("variable", std::move(value), true, {}); }

  // Leaf that reads the parameter in place; backward() adds its gradient
  // into p.grad.
  Var<T> parameter(Parameter<T>& p, bool trainable = true) {
    Node node;
    node.external = &p.value;
    node.requires_grad = trainable;
    node.op = "parameter";
    nodes_.push_back(std::move(node));
    const std::size_t id = nodes_.size() - 1;
    if (trainable) bindings_.emplace_back(id, &p);
    return {this, id};
  }

  Var<T> record(const char* op, Tensor<T> value, bool requires_grad, BackwardFn fn) {
    return push(op, std::move(value), requires_grad, std::move(fn));
  }

  const Tensor<T>& value(std::size_t id) const {
    const Node& n = nodes_[id];
    return n.external ? *n.external : n.value;
  }

  bool requires_grad(std::size_t id) const { return nodes_[id].requires_grad; }

  // Lazily zero-initialized gradient buffer of a node.
  std::vector<T>& grad(std::size_t id) {
    Node& n = nodes_[id];
    if (n.grad.empty()) n.grad.assign(value(id).size(), T(0));
    return n.grad;
  }
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }

  void backward(Var<T> root) {
    if (value(root.id).size() != 1) throw ShapeError("backward() needs a scalar root");
    grad(root.id)[0] = T(1);
    for (std::size_t i = root.id + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
      n.backward(*this, i);
    }
    for (auto& [id, param] : bindings_) {
      if (!has_grad(id)) continue;
      const auto& g = nodes_[id].grad;
      if (param->grad.size() != g.size()) param->grad = Tensor<T>(param->value.shape);
      for (std::size_t k = 0; k < g.size(); ++k) param->grad.data[k] += g[k];
    }
  }

  // NaN/Inf check on every recorded value; throws NumericError naming the op.
  void set_check_finite(bool on) { check_finite_ = on; }

  std::size_t size() const { return nodes_.size(); }
  const char* op_name(std::size_t id) const { return nodes_[id].op; }

 private:
  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    std::vector<T> grad;
    bool requires_grad = false;
    BackwardFn backward;
    const char* op = "leaf";
  };

  Var<T> push(const char* op, Tensor<T> value, bool requires_grad, BackwardFn fn) {
    if (check_finite_ && !value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    }
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    if (requires_grad) node.backward = std::move(fn);
    node.op = op;
    nodes_.push_back(std::move(node));
    return {this, nodes_.size() - 1};
  }

  std::vector<Node> nodes_;
  std::vector<std::pair<std::size_t, Parameter<T>*>> bindings_;
  bool check_finite_ = false;
};

}  // namespace mtm::ad
