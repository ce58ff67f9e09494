// Copyright 2026 The IFWM Authors. All Rights Reserved.
//
// Licensed under the Apache License, Version 2.0 (the "License");
// you may not use this file except in compliance with the License.
// You may obtain a copy of the License at
//
//     http://www.apache.org/licenses/LICENSE-2.0
//
// Unless required by applicable law or agreed to in writing, software
// distributed under the License is distributed on an "AS IS" BASIS,
// WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
// See the License for the specific language governing permissions and
// limitations under the License.

#pragma once

#include <algorithm>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "ifwm/error.hpp"

namespace ifwm {

/// Extents of a rank-4 (batch, channel, height, width) tensor.
struct Shape {
  std::size_t n = 0;
  std::size_t c = 0;
  std::size_t h = 0;
  std::size_t w = 0;

  constexpr std::size_t numel() const { return n * c * h * w; }
  constexpr std::size_t plane() const { return h * w; }
  friend constexpr bool operator==(const Shape&, const Shape&) = default;

  std::string str() const {
    return "(" + std::to_string(n) + "," + std::to_string(c) + "," +
           std::to_string(h) + "," + std::to_string(w) + ")";
  }
};

template <typename T>
class Tape;

namespace detail {

template <typename T>
struct TensorStorage {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until the first gradient arrives
  bool requires_grad = false;
  std::optional<std::size_t> node;
};

}  // namespace detail

/// Dense NCHW tensor with an optional gradient buffer.
///
/// Copies share storage, like a handle. Use clone() for a detached deep copy.
template <typename T>
class Tensor {
 public:
  using value_type = T;

  Tensor() = default;

  explicit Tensor(Shape shape, T fill = T(0), bool requires_grad = false)
      : s_(std::make_shared<detail::TensorStorage<T>>()) {
    s_->shape = shape;
    s_->data.assign(shape.numel(), fill);
    s_->requires_grad = requires_grad;
  }

  static Tensor from(Shape shape, std::vector<T> values,
                     bool requires_grad = false) {
    if (values.size() != shape.numel()) {
      throw GeometryError("tensor data length " +
                          std::to_string(values.size()) +
                          " does not match shape " + shape.str());
    }
    Tensor t;
    t.s_ = std::make_shared<detail::TensorStorage<T>>();
    t.s_->shape = shape;
    t.s_->data = std::move(values);
    t.s_->requires_grad = requires_grad;
    return t;
  }

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t numel() const { return s_->data.size(); }

  std::span<const T> data() const { return s_->data; }
  std::span<T> mutable_data() { return s_->data; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) {
    s_->requires_grad = on;
    if (!on) s_->grad.clear();
  }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const T> grad() const { return s_->grad; }
  std::span<T> mutable_grad() const { return s_->grad; }

  /// Allocates a zeroed gradient buffer if none exists. Only valid for
  /// tensors that require gradients. Const because gradient accumulation is
  /// the one mutation allowed through a shared handle.
  std::span<T> ensure_grad() const {
    if (!s_->requires_grad) {
      throw ContractError("gradient requested for a tensor without requires_grad");
    }
    if (s_->grad.empty()) s_->grad.assign(s_->data.size(), T(0));
    return s_->grad;
  }

  void clear_grad() const { s_->grad.clear(); }

  std::optional<std::size_t> node_id() const { return s_->node; }

  std::size_t index(std::size_t n, std::size_t c, std::size_t y,
                    std::size_t x) const {
    const Shape& s = s_->shape;
    return ((n * s.c + c) * s.h + y) * s.w + x;
  }
  T at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) const {
    return s_->data[index(n, c, y, x)];
  }
  T& at(std::size_t n, std::size_t c, std::size_t y, std::size_t x) {
    return s_->data[index(n, c, y, x)];
  }
  T item() const {
    if (numel() != 1) throw ContractError("item() on a non-scalar tensor");
    return s_->data[0];
  }

  /// Deep copy of the data, detached from any tape and without a gradient.
  Tensor clone(bool requires_grad = false) const {
    return from(s_->shape, s_->data, requires_grad);
  }

  bool same_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  friend class Tape<T>;
  std::shared_ptr<detail::TensorStorage<T>> s_;
};

/// Records differentiable operations in execution order and replays their
/// backward rules in exact reverse order.
template <typename T>
class Tape {
 public:
  struct Record {
    std::string op;
    std::vector<std::optional<std::size_t>> input_nodes;
    Tensor<T> output;
    std::function<void()> backward;
  };

  /// A disabled tape records nothing; ops still compute forward values.
  explicit Tape(bool enabled = true) : enabled_(enabled) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  bool enabled() const { return enabled_; }

  /// True when an op over these inputs must be recorded.
  bool wants(std::initializer_list<const Tensor<T>*> inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(), [](const Tensor<T>* t) {
      return t != nullptr && t->defined() && t->requires_grad();
    });
  }
  bool wants(const std::vector<Tensor<T>>& inputs) const {
    if (!enabled_) return false;
    return std::any_of(inputs.begin(), inputs.end(),
                       [](const Tensor<T>& t) { return t.requires_grad(); });
  }

  /// Registers `output` as produced by `op`. The backward closure reads
  /// output.grad() and accumulates into its inputs' gradients.
  void record(std::string op, const std::vector<Tensor<T>>& inputs,
              Tensor<T>& output, std::function<void()> backward) {
    Record r;
    r.op = std::move(op);
    for (const auto& in : inputs) {
      r.input_nodes.push_back(in.defined() ? in.node_id() : std::nullopt);
    }
    output.s_->requires_grad = true;
    output.s_->node = records_.size();
    r.output = output;
    r.backward = std::move(backward);
    records_.push_back(std::move(r));
  }

  const std::vector<Record>& records() const { return records_; }
  std::size_t size() const { return records_.size(); }

  /// Reverse-mode sweep from a scalar. Populates the gradient of every
  /// requires_grad tensor reachable through recorded ops.
  void backward(Tensor<T>& loss) {
    if (loss.numel() != 1) {
      throw ContractError("backward requires a scalar output, got shape " +
                          loss.shape().str());
    }
    if (!loss.requires_grad()) return;
    loss.ensure_grad()[0] += T(1);
    const std::size_t start =
        loss.node_id() ? *loss.node_id() + 1 : records_.size();
    for (std::size_t i = start; i-- > 0;) {
      Record& r = records_[i];
      if (!r.output.has_grad()) continue;
      if (fault_ && r.op == fault_->first) {
        for (auto& g : r.output.mutable_grad()) g *= fault_->second;
      }
      r.backward();
    }
  }

  /// Drops all records; gradients already accumulated on leaves survive.
  void clear() { records_.clear(); }

  /// Test hook: scales the incoming gradient of every `op` record during
  /// backward, which corrupts that op's backward rule.
  void inject_backward_fault(std::string op, T scale) {
    fault_ = std::make_pair(std::move(op), scale);
  }

 private:
  bool enabled_;
  std::vector<Record> records_;
  std::optional<std::pair<std::string, T>> fault_;
};

/// p <- p - lr * grad for every parameter, then releases the gradients.
template <typename T>
void sgd_step(std::span<Tensor<T>> params, T lr) {
  for (auto& p : params) {
    if (p.has_grad()) {
      auto d = p.mutable_data();
      auto g = p.grad();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * g[i];
    }
    p.clear_grad();
  }
}

}  // namespace ifwm
