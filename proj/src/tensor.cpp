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

#include "moelab/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "moelab/kernels.hpp"

namespace moelab {

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1},
                         std::multiplies<std::size_t>());
}

namespace {

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += "x";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

// Rank-1 tensors are a single row; scalars are 1x1.
struct Mat {
  std::size_t rows;
  std::size_t cols;
};

Mat as_matrix(const Tensor& t, const char* op) {
  if (t.rank() == 2) return {t.dim(0), t.dim(1)};
  if (t.rank() == 1) return {1, t.dim(0)};
  if (t.rank() == 0) return {1, 1};
  throw ShapeError(std::string(op) + ": expected rank <= 2, got " + shape_str(t.shape()));
}

}  // namespace

struct Tensor::Impl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
};

Tensor::Tensor() : Tensor(Shape{0}, {}) {}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("tensor: shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " values");
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
  impl_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const std::size_t n = values.size();
  return Tensor(Shape{n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor(Shape{rows, cols}, std::move(values), requires_grad);
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size())
    throw RangeError("tensor: axis " + std::to_string(axis) + " out of range for " +
                     shape_str(impl_->shape));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }
std::size_t Tensor::rows() const { return as_matrix(*this, "rows").rows; }
std::size_t Tensor::cols() const { return as_matrix(*this, "cols").cols; }

std::span<const double> Tensor::data() const { return impl_->data; }
std::span<double> Tensor::mutable_data() { return impl_->data; }

std::span<const double> Tensor::row(std::size_t r) const {
  const Mat m = as_matrix(*this, "row");
  if (r >= m.rows) throw RangeError("tensor: row " + std::to_string(r) + " out of range");
  return data().subspan(r * m.cols, m.cols);
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item: tensor is not a scalar");
  return impl_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  const Mat m = as_matrix(*this, "at");
  if (r >= m.rows || c >= m.cols) throw RangeError("tensor: index out of range");
  return impl_->data[r * m.cols + c];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }
void Tensor::set_requires_grad(bool value) { impl_->requires_grad = value; }
bool Tensor::has_grad() const { return !impl_->grad.empty(); }
std::span<const double> Tensor::grad() const { return impl_->grad; }

std::span<double> Tensor::mutable_grad() const {
  if (impl_->grad.size() != impl_->data.size()) impl_->grad.assign(impl_->data.size(), 0.0);
  return impl_->grad;
}

void Tensor::zero_grad() const { std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0); }
void Tensor::clear_grad() { impl_->grad.clear(); }

Tensor Tensor::clone() const { return Tensor(impl_->shape, impl_->data, impl_->requires_grad); }
Tensor Tensor::detach() const { return Tensor(impl_->shape, impl_->data, false); }

TopK topk(std::span<const double> scores, std::size_t k) {
  if (k > scores.size())
    throw ContractError("topk: K=" + std::to_string(k) + " exceeds length " +
                        std::to_string(scores.size()));
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t a, std::size_t b) {
                      if (scores[a] != scores[b]) return scores[a] > scores[b];
                      return a < b;
                    });
  TopK out;
  out.indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k));
  out.values.reserve(k);
  for (std::size_t i : out.indices) out.values.push_back(scores[i]);
  return out;
}

// ---------------------------------------------------------------------------
// Graph

bool Graph::wants_grad(std::initializer_list<const Tensor*> inputs) const {
  if (!recording_) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Graph::finish(Tensor out, std::vector<Tensor> inputs, BackwardFn fn) {
  for (double v : out.data())
    if (!std::isfinite(v)) throw NumericError("non-finite value produced by tensor operation");
  bool needs = recording_;
  if (needs) {
    needs = std::any_of(inputs.begin(), inputs.end(),
                        [](const Tensor& t) { return t.requires_grad(); });
  }
  if (needs) {
    out.set_requires_grad(true);
    nodes_.push_back(Node{std::move(inputs), out, std::move(fn)});
  }
  return out;
}

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  if (b.rank() != 2) throw ShapeError("matmul: right operand must be a matrix");
  const Mat ma = as_matrix(a, "matmul");
  const std::size_t m = ma.rows, k = ma.cols, n = b.dim(1);
  if (b.dim(0) != k)
    throw ShapeError("matmul: inner dimensions differ: " + shape_str(a.shape()) + " x " +
                     shape_str(b.shape()));
  Shape shape = a.rank() == 2 ? Shape{m, n} : Shape{n};
  Tensor out = Tensor::zeros(std::move(shape));
  kernels::gemm_nn({m, n, k}, a.data(), b.data(), out.mutable_data());
  return finish(std::move(out), {a, b}, [a, b, m, n, k](const Tensor& o) mutable {
    if (a.requires_grad()) kernels::gemm_nt({m, k, n}, o.grad(), b.data(), a.mutable_grad());
    if (b.requires_grad()) kernels::gemm_tn({k, n, m}, a.data(), o.grad(), b.mutable_grad());
  });
}

Tensor Graph::transpose(const Tensor& a) {
  if (a.rank() != 2) throw ShapeError("transpose: expected a matrix");
  const std::size_t r = a.dim(0), c = a.dim(1);
  Tensor out = Tensor::zeros({c, r});
  auto od = out.mutable_data();
  auto ad = a.data();
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) od[j * r + i] = ad[i * c + j];
  return finish(std::move(out), {a}, [a, r, c](const Tensor& o) mutable {
    auto ga = a.mutable_grad();
    auto go = o.grad();
    for (std::size_t i = 0; i < r; ++i)
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += go[j * r + i];
  });
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("add: shapes differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> v(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += bd[i];
  return finish(Tensor(a.shape(), std::move(v)), {a, b}, [a, b](const Tensor& o) mutable {
    if (a.requires_grad()) kernels::axpy(1.0, o.grad(), a.mutable_grad());
    if (b.requires_grad()) kernels::axpy(1.0, o.grad(), b.mutable_grad());
  });
}

Tensor Graph::add_row_bias(const Tensor& a, const Tensor& bias) {
  const Mat m = as_matrix(a, "add_row_bias");
  if (bias.numel() != m.cols) throw ShapeError("add_row_bias: bias length differs from columns");
  std::vector<double> v(a.data().begin(), a.data().end());
  auto bd = bias.data();
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) v[r * m.cols + c] += bd[c];
  return finish(Tensor(a.shape(), std::move(v)), {a, bias}, [a, bias, m](const Tensor& o) mutable {
    if (a.requires_grad()) kernels::axpy(1.0, o.grad(), a.mutable_grad());
    if (bias.requires_grad()) {
      auto gb = bias.mutable_grad();
      for (std::size_t r = 0; r < m.rows; ++r)
        kernels::axpy(1.0, o.grad().subspan(r * m.cols, m.cols), gb);
    }
  });
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError("mul: shapes differ: " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  std::vector<double> v(a.data().begin(), a.data().end());
  auto bd = b.data();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] *= bd[i];
  return finish(Tensor(a.shape(), std::move(v)), {a, b}, [a, b](const Tensor& o) mutable {
    auto go = o.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      auto bd = b.data();
      for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += go[i] * bd[i];
    }
    if (b.requires_grad()) {
      auto gb = b.mutable_grad();
      auto ad = a.data();
      for (std::size_t i = 0; i < gb.size(); ++i) gb[i] += go[i] * ad[i];
    }
  });
}

Tensor Graph::scale(const Tensor& a, double factor) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x *= factor;
  return finish(Tensor(a.shape(), std::move(v)), {a}, [a, factor](const Tensor& o) mutable {
    kernels::axpy(factor, o.grad(), a.mutable_grad());
  });
}

Tensor Graph::relu(const Tensor& a) {
  std::vector<double> v(a.data().begin(), a.data().end());
  for (double& x : v) x = x > 0.0 ? x : 0.0;
  return finish(Tensor(a.shape(), std::move(v)), {a}, [a](const Tensor& o) mutable {
    auto ga = a.mutable_grad();
    auto go = o.grad();
    auto ad = a.data();
    for (std::size_t i = 0; i < ga.size(); ++i)
      if (ad[i] > 0.0) ga[i] += go[i];
  });
}

namespace {

// Splits a shape around an axis into (outer, axis length, inner stride).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (shape.empty()) return {};
  if (axis >= shape.size()) throw RangeError("softmax: axis out of range");
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.len = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor Graph::softmax(const Tensor& x, std::size_t axis) {
  const AxisSplit s = split_axis(x.shape(), axis);
  std::vector<double> y(x.numel());
  auto xd = x.data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      double mx = xd[base];
      for (std::size_t j = 1; j < s.len; ++j) mx = std::max(mx, xd[base + j * s.inner]);
      double z = 0.0;
      for (std::size_t j = 0; j < s.len; ++j) {
        const double e = std::exp(xd[base + j * s.inner] - mx);
        y[base + j * s.inner] = e;
        z += e;
      }
      for (std::size_t j = 0; j < s.len; ++j) y[base + j * s.inner] /= z;
    }
  }
  return finish(Tensor(x.shape(), std::move(y)), {x}, [x, s](const Tensor& o) mutable {
    auto gx = x.mutable_grad();
    auto go = o.grad();
    auto yd = o.data();
    for (std::size_t oo = 0; oo < s.outer; ++oo) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = oo * s.len * s.inner + in;
        double dotv = 0.0;
        for (std::size_t j = 0; j < s.len; ++j)
          dotv += go[base + j * s.inner] * yd[base + j * s.inner];
        for (std::size_t j = 0; j < s.len; ++j) {
          const std::size_t idx = base + j * s.inner;
          gx[idx] += yd[idx] * (go[idx] - dotv);
        }
      }
    }
  });
}

Tensor Graph::log_softmax(const Tensor& x) {
  const Mat m = as_matrix(x, "log_softmax");
  std::vector<double> y(x.numel());
  auto xd = x.data();
  for (std::size_t r = 0; r < m.rows; ++r) {
    const double* row = xd.data() + r * m.cols;
    const double mx = *std::max_element(row, row + m.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < m.cols; ++c) y[r * m.cols + c] = row[c] - lse;
  }
  return finish(Tensor(x.shape(), std::move(y)), {x}, [x, m](const Tensor& o) mutable {
    auto gx = x.mutable_grad();
    auto go = o.grad();
    auto yd = o.data();
    for (std::size_t r = 0; r < m.rows; ++r) {
      double gsum = 0.0;
      for (std::size_t c = 0; c < m.cols; ++c) gsum += go[r * m.cols + c];
      for (std::size_t c = 0; c < m.cols; ++c) {
        const std::size_t i = r * m.cols + c;
        gx[i] += go[i] - std::exp(yd[i]) * gsum;
      }
    }
  });
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const std::size_t> targets) {
  const Mat m = as_matrix(logits, "cross_entropy");
  if (targets.size() != m.rows)
    throw ShapeError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                     std::to_string(m.rows) + " rows");
  if (m.rows == 0) throw ContractError("cross_entropy: empty batch");
  std::vector<std::size_t> tgt(targets.begin(), targets.end());
  std::vector<double> probs(logits.numel());
  auto xd = logits.data();
  double loss = 0.0;
  for (std::size_t r = 0; r < m.rows; ++r) {
    if (tgt[r] >= m.cols)
      throw RangeError("cross_entropy: target " + std::to_string(tgt[r]) +
                       " out of range for " + std::to_string(m.cols) + " classes");
    const double* row = xd.data() + r * m.cols;
    const double mx = *std::max_element(row, row + m.cols);
    double z = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) {
      const double e = std::exp(row[c] - mx);
      probs[r * m.cols + c] = e;
      z += e;
    }
    for (std::size_t c = 0; c < m.cols; ++c) probs[r * m.cols + c] /= z;
    loss += -(row[tgt[r]] - mx - std::log(z));
  }
  loss /= static_cast<double>(m.rows);
  return finish(Tensor::scalar(loss), {logits},
                [logits, m, tgt = std::move(tgt), probs = std::move(probs)](const Tensor& o) mutable {
                  const double g = o.grad()[0] / static_cast<double>(m.rows);
                  auto gx = logits.mutable_grad();
                  for (std::size_t r = 0; r < m.rows; ++r) {
                    for (std::size_t c = 0; c < m.cols; ++c) {
                      const std::size_t i = r * m.cols + c;
                      gx[i] += g * (probs[i] - (c == tgt[r] ? 1.0 : 0.0));
                    }
                  }
                });
}

Tensor Graph::sum(const Tensor& a) {
  double s = 0.0;
  for (double v : a.data()) s += v;
  return finish(Tensor::scalar(s), {a}, [a](const Tensor& o) mutable {
    const double g = o.grad()[0];
    for (double& x : a.mutable_grad()) x += g;
  });
}

Tensor Graph::gather_rows(const Tensor& table, std::span<const std::size_t> ids) {
  if (table.rank() != 2) throw ShapeError("gather_rows: table must be a matrix");
  const std::size_t rows = table.dim(0), d = table.dim(1);
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> v(idx.size() * d);
  auto td = table.data();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= rows)
      throw RangeError("gather_rows: index " + std::to_string(idx[i]) + " out of range " +
                       std::to_string(rows));
    std::copy_n(td.begin() + static_cast<std::ptrdiff_t>(idx[i] * d), d,
                v.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  const std::size_t n = idx.size();
  return finish(Tensor({n, d}, std::move(v)), {table},
                [table, d, idx = std::move(idx)](const Tensor& o) mutable {
                  auto gt = table.mutable_grad();
                  auto go = o.grad();
                  for (std::size_t i = 0; i < idx.size(); ++i)
                    kernels::axpy(1.0, go.subspan(i * d, d), gt.subspan(idx[i] * d, d));
                });
}

Tensor Graph::scatter_add_rows(const Tensor& base, std::span<const std::size_t> ids,
                               const Tensor& src) {
  const Mat mb = as_matrix(base, "scatter_add_rows");
  const Mat ms = as_matrix(src, "scatter_add_rows");
  if (ms.cols != mb.cols || ms.rows != ids.size())
    throw ShapeError("scatter_add_rows: source shape does not match ids/base");
  std::vector<std::size_t> idx(ids.begin(), ids.end());
  std::vector<double> v(base.data().begin(), base.data().end());
  auto sd = src.data();
  const std::size_t d = mb.cols;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] >= mb.rows) throw RangeError("scatter_add_rows: index out of range");
    for (std::size_t c = 0; c < d; ++c) v[idx[i] * d + c] += sd[i * d + c];
  }
  return finish(Tensor(base.shape(), std::move(v)), {base, src},
                [base, src, d, idx = std::move(idx)](const Tensor& o) mutable {
                  auto go = o.grad();
                  if (base.requires_grad()) kernels::axpy(1.0, go, base.mutable_grad());
                  if (src.requires_grad()) {
                    auto gs = src.mutable_grad();
                    for (std::size_t i = 0; i < idx.size(); ++i)
                      kernels::axpy(1.0, go.subspan(idx[i] * d, d), gs.subspan(i * d, d));
                  }
                });
}

Tensor Graph::scale_rows(const Tensor& a, const Tensor& w) {
  const Mat m = as_matrix(a, "scale_rows");
  if (w.numel() != m.rows) throw ShapeError("scale_rows: weight count differs from rows");
  std::vector<double> v(a.data().begin(), a.data().end());
  auto wd = w.data();
  for (std::size_t r = 0; r < m.rows; ++r)
    for (std::size_t c = 0; c < m.cols; ++c) v[r * m.cols + c] *= wd[r];
  return finish(Tensor(a.shape(), std::move(v)), {a, w}, [a, w, m](const Tensor& o) mutable {
    auto go = o.grad();
    if (a.requires_grad()) {
      auto ga = a.mutable_grad();
      auto wd = w.data();
      for (std::size_t r = 0; r < m.rows; ++r)
        kernels::axpy(wd[r], go.subspan(r * m.cols, m.cols), ga.subspan(r * m.cols, m.cols));
    }
    if (w.requires_grad()) {
      auto gw = w.mutable_grad();
      for (std::size_t r = 0; r < m.rows; ++r)
        gw[r] += kernels::dot(go.subspan(r * m.cols, m.cols), a.row(r));
    }
  });
}

Tensor Graph::gather_elements(const Tensor& a, std::span<const std::size_t> rows,
                              std::span<const std::size_t> cols) {
  const Mat m = as_matrix(a, "gather_elements");
  if (rows.size() != cols.size()) throw ShapeError("gather_elements: rows/cols length differ");
  std::vector<std::size_t> flat(rows.size());
  std::vector<double> v(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= m.rows || cols[i] >= m.cols)
      throw RangeError("gather_elements: index out of range");
    flat[i] = rows[i] * m.cols + cols[i];
    v[i] = a.data()[flat[i]];
  }
  return finish(Tensor::vector(std::move(v)), {a}, [a, flat = std::move(flat)](const Tensor& o) mutable {
    auto ga = a.mutable_grad();
    auto go = o.grad();
    for (std::size_t i = 0; i < flat.size(); ++i) ga[flat[i]] += go[i];
  });
}

Tensor Graph::renormalize_selected(const Tensor& p, std::span<const double> mask) {
  const Mat m = as_matrix(p, "renormalize_selected");
  if (mask.size() != p.numel()) throw ShapeError("renormalize_selected: mask shape differs");
  std::vector<double> msk(mask.begin(), mask.end());
  std::vector<double> v(p.numel());
  std::vector<double> denom(m.rows);
  auto pd = p.data();
  for (std::size_t r = 0; r < m.rows; ++r) {
    double s = 0.0;
    for (std::size_t c = 0; c < m.cols; ++c) s += pd[r * m.cols + c] * msk[r * m.cols + c];
    if (!(s > 0.0)) throw ContractError("renormalize_selected: selected mass must be positive");
    denom[r] = s;
    for (std::size_t c = 0; c < m.cols; ++c)
      v[r * m.cols + c] = pd[r * m.cols + c] * msk[r * m.cols + c] / s;
  }
  return finish(Tensor(p.shape(), std::move(v)), {p},
                [p, m, msk = std::move(msk), denom = std::move(denom)](const Tensor& o) mutable {
                  auto gp = p.mutable_grad();
                  auto go = o.grad();
                  auto od = o.data();
                  for (std::size_t r = 0; r < m.rows; ++r) {
                    double dotv = 0.0;
                    for (std::size_t c = 0; c < m.cols; ++c)
                      dotv += go[r * m.cols + c] * od[r * m.cols + c];
                    for (std::size_t c = 0; c < m.cols; ++c) {
                      const std::size_t i = r * m.cols + c;
                      gp[i] += msk[i] * (go[i] - dotv) / denom[r];
                    }
                  }
                });
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) throw ContractError("backward: loss must be a scalar");
  std::size_t last = nodes_.size();
  for (std::size_t i = nodes_.size(); i-- > 0;) {
    if (nodes_[i].output.is(loss)) {
      last = i;
      break;
    }
  }
  if (last == nodes_.size()) throw ContractError("backward: loss was not produced by this graph");

  for (Node& node : nodes_) {
    for (Tensor& in : node.inputs) {
      if (in.requires_grad()) {
        in.mutable_grad();
        in.zero_grad();
      }
    }
    node.output.mutable_grad();
    node.output.zero_grad();
  }
  Tensor root = loss;
  root.mutable_grad()[0] = 1.0;
  for (std::size_t i = last + 1; i-- > 0;) nodes_[i].backward(nodes_[i].output);
}

}  // namespace moelab
