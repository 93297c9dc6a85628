/* Copyright 2026 The moelab Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

#pragma once

// Dense row-major double tensors and a define-by-run reverse-mode graph.
//
// A Tensor is a shared handle: copies alias the same storage. Use clone() for
// a deep copy. Only the grad slot and, for parameters, the optimizer step
// mutate a tensor after construction.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "moelab/error.hpp"

namespace moelab {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor();  // empty 0-element tensor of shape {0}
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;
  // rows()/cols() view rank-1 tensors as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  std::span<const double> row(std::size_t r) const;
  double item() const;
  double operator[](std::size_t i) const { return data()[i]; }
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);

  bool has_grad() const;
  std::span<const double> grad() const;
  // The grad slot is mutable through const handles: graphs hold inputs by value.
  std::span<double> mutable_grad() const;  // allocates a zero grad if absent
  void zero_grad() const;  // no-op for tensors without a grad slot
  void clear_grad();

  Tensor clone() const;   // deep copy, keeps requires_grad, drops grad
  Tensor detach() const;  // deep copy of the values only

  bool is(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  struct Impl;
  std::shared_ptr<Impl> impl_;
};

// Indices of the k largest values, descending; ties go to the lower index.
struct TopK {
  std::vector<std::size_t> indices;
  std::vector<double> values;
};
TopK topk(std::span<const double> scores, std::size_t k);

// Records differentiable operations in creation order. A non-recording graph
// evaluates the same operations without building any nodes, which is what
// inference and candidate scoring use.
class Graph {
 public:
  explicit Graph(bool recording = true) : recording_(recording) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  bool recording() const { return recording_; }
  std::size_t size() const { return nodes_.size(); }

  // a[m x k] * b[k x n]; rank-1 a is treated as a single row.
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor transpose(const Tensor& a);
  Tensor add(const Tensor& a, const Tensor& b);
  // a[m x n] + bias[n] broadcast over rows.
  Tensor add_row_bias(const Tensor& a, const Tensor& bias);
  Tensor mul(const Tensor& a, const Tensor& b);
  Tensor scale(const Tensor& a, double factor);
  Tensor relu(const Tensor& a);
  // Numerically stabilized by subtracting the max along the axis.
  Tensor softmax(const Tensor& x, std::size_t axis);
  // Along the last axis.
  Tensor log_softmax(const Tensor& x);
  // Mean over rows of -log softmax(logits)[target]. Returns a scalar.
  Tensor cross_entropy(const Tensor& logits, std::span<const std::size_t> targets);
  Tensor sum(const Tensor& a);
  // Rows of table[V x d] at ids -> [ids.size() x d].
  Tensor gather_rows(const Tensor& table, std::span<const std::size_t> ids);
  // base + src scattered into rows ids (duplicates accumulate).
  Tensor scatter_add_rows(const Tensor& base, std::span<const std::size_t> ids,
                          const Tensor& src);
  // Row r of a multiplied by w[r].
  Tensor scale_rows(const Tensor& a, const Tensor& w);
  // Vector of a[rows[i], cols[i]].
  Tensor gather_elements(const Tensor& a, std::span<const std::size_t> rows,
                         std::span<const std::size_t> cols);
  // Per row: p * mask / sum(p * mask). mask is a constant 0/1 matrix shaped as p.
  Tensor renormalize_selected(const Tensor& p, std::span<const double> mask);

  // Resets the grad slot of every tensor this graph touches, then fills
  // d loss / d tensor for every tensor that requires grad.
  void backward(const Tensor& loss);

 private:
  using BackwardFn = std::function<void(const Tensor& out)>;
  struct Node {
    std::vector<Tensor> inputs;
    Tensor output;
    BackwardFn backward;
  };

  bool wants_grad(std::initializer_list<const Tensor*> inputs) const;
  Tensor finish(Tensor out, std::vector<Tensor> inputs, BackwardFn fn);

  bool recording_;
  std::vector<Node> nodes_;
};

}  // namespace moelab
