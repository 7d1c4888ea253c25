// Copyright (c) 2026 The ctlora Authors
// SPDX-License-Identifier: Apache-2.0

// Minimal reverse-mode automatic differentiation over row-major matrices.
//
// Every value is a rows x cols matrix held by a graph Node. Ops allocate a new
// node, record their parents and a backward closure; `backward()` walks the
// graph in reverse topological order. Nodes that do not require gradients are
// never visited, so frozen weights cost no weight-gradient work.

#pragma once

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "ctlora/error.hpp"

namespace ctlora::ag {

template <class T>
struct Node {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::shared_ptr<std::vector<T>> value;
  std::vector<T> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::size_t size() const { return rows * cols; }
  const T* data() const { return value->data(); }
  T* grad_data() {
    if (grad.empty()) grad.assign(size(), T(0));
    return grad.data();
  }
};

template <class T>
class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node<T>> n) : n_(std::move(n)) {}

  std::size_t rows() const { return n_->rows; }
  std::size_t cols() const { return n_->cols; }
  std::size_t size() const { return n_->size(); }
  bool requires_grad() const { return n_->requires_grad; }
  bool valid() const { return static_cast<bool>(n_); }

  std::span<const T> values() const { return {n_->data(), n_->size()}; }
  T operator()(std::size_t r, std::size_t c) const { return (*n_->value)[r * n_->cols + c]; }
  T item() const { return (*n_->value)[0]; }

  /// Gradient after backward(); empty when no gradient reached this node.
  std::span<const T> grad() const { return {n_->grad.data(), n_->grad.size()}; }

  const std::shared_ptr<Node<T>>& node() const { return n_; }

 private:
  std::shared_ptr<Node<T>> n_;
};

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class T>
using MapC = Eigen::Map<const RowMat<T>>;
template <class T>
using MapM = Eigen::Map<RowMat<T>>;

template <class T>
MapC<T> mat(const Node<T>& n) {
  return MapC<T>(n.data(), static_cast<Eigen::Index>(n.rows), static_cast<Eigen::Index>(n.cols));
}
template <class T>
MapM<T> gmat(Node<T>& n) {
  return MapM<T>(n.grad_data(), static_cast<Eigen::Index>(n.rows), static_cast<Eigen::Index>(n.cols));
}

namespace detail {

template <class T>
Var<T> make(std::size_t rows, std::size_t cols, std::vector<T>&& v,
            std::vector<std::shared_ptr<Node<T>>> parents) {
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::make_shared<std::vector<T>>(std::move(v));
  for (const auto& p : parents) n->requires_grad = n->requires_grad || p->requires_grad;
  if (n->requires_grad) n->parents = std::move(parents);
  return Var<T>(std::move(n));
}

inline void check(bool ok, const char* what) {
  if (!ok) fail(Errc::invalid_input, what);
}

}  // namespace detail

template <class T>
Var<T> constant(std::size_t rows, std::size_t cols, std::vector<T> v) {
  detail::check(v.size() == rows * cols, "constant: size mismatch");
  return detail::make<T>(rows, cols, std::move(v), {});
}

/// Leaf sharing storage with an external owner (a model parameter).
template <class T>
Var<T> leaf(std::shared_ptr<std::vector<T>> storage, std::size_t rows, std::size_t cols, bool requires_grad) {
  detail::check(storage && storage->size() == rows * cols, "leaf: size mismatch");
  auto n = std::make_shared<Node<T>>();
  n->rows = rows;
  n->cols = cols;
  n->value = std::move(storage);
  n->requires_grad = requires_grad;
  return Var<T>(std::move(n));
}

/// Reverse-mode sweep from `root`. A 1x1 root is seeded with 1 when `seed` is empty.
template <class T>
void backward(const Var<T>& root, std::span<const T> seed = {}) {
  auto* r = root.node().get();
  if (!r->requires_grad) return;
  std::vector<Node<T>*> order;
  std::unordered_set<Node<T>*> seen;
  std::vector<std::pair<Node<T>*, std::size_t>> stack{{r, 0}};
  seen.insert(r);
  while (!stack.empty()) {
    auto& [n, i] = stack.back();
    if (i < n->parents.size()) {
      Node<T>* p = n->parents[i++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  T* g = r->grad_data();
  if (seed.empty()) {
    detail::check(r->size() == 1, "backward: non-scalar root needs a seed");
    g[0] += T(1);
  } else {
    detail::check(seed.size() == r->size(), "backward: seed size mismatch");
    for (std::size_t i = 0; i < seed.size(); ++i) g[i] += seed[i];
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node<T>* n = *it;
    if (n->backward && !n->grad.empty()) n->backward(*n);
  }
}

// ---------------------------------------------------------------------------
// Elementwise and structural ops

template <class T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
  detail::check(a.rows() == b.rows() && a.cols() == b.cols(), "add: shape mismatch");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] + b.values()[i];
  auto out = detail::make<T>(a.rows(), a.cols(), std::move(v), {a.node(), b.node()});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      for (auto& p : self.parents) {
        if (!p->requires_grad) continue;
        T* g = p->grad_data();
        for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i];
      }
    };
  }
  return out;
}

/// a + row, broadcasting a 1 x cols row over every row of a.
template <class T>
Var<T> add_row(const Var<T>& a, const Var<T>& row) {
  detail::check(row.rows() == 1 && row.cols() == a.cols(), "add_row: shape mismatch");
  std::vector<T> v(a.values().begin(), a.values().end());
  const std::size_t c = a.cols();
  for (std::size_t i = 0; i < v.size(); ++i) v[i] += row.values()[i % c];
  auto out = detail::make<T>(a.rows(), c, std::move(v), {a.node(), row.node()});
  if (out.requires_grad()) {
    out.node()->backward = [c](Node<T>& self) {
      auto& pa = self.parents[0];
      auto& pr = self.parents[1];
      if (pa->requires_grad) {
        T* g = pa->grad_data();
        for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i];
      }
      if (pr->requires_grad) {
        T* g = pr->grad_data();
        for (std::size_t i = 0; i < self.size(); ++i) g[i % c] += self.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> scale(const Var<T>& a, T s) {
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * s;
  auto out = detail::make<T>(a.rows(), a.cols(), std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [s](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) g[i] += s * self.grad[i];
    };
  }
  return out;
}

/// Multiplies by a fixed mask (used for dropout); the mask is not differentiated.
template <class T>
Var<T> mul_const(const Var<T>& a, std::vector<T> mask) {
  detail::check(mask.size() == a.size(), "mul_const: size mismatch");
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a.values()[i] * mask[i];
  auto out = detail::make<T>(a.rows(), a.cols(), std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [m = std::move(mask)](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) g[i] += m[i] * self.grad[i];
    };
  }
  return out;
}

/// Inverted dropout: kept entries are scaled by 1/(1-p).
template <class T, class Rng>
Var<T> dropout(const Var<T>& a, double p, Rng& rng) {
  if (p <= 0.0) return a;
  detail::check(p < 1.0, "dropout: p must be < 1");
  std::bernoulli_distribution keep(1.0 - p);
  const T s = T(1) / T(1.0 - p);
  std::vector<T> mask(a.size());
  for (auto& m : mask) m = keep(rng) ? s : T(0);
  return mul_const(a, std::move(mask));
}

template <class T>
Var<T> transpose(const Var<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> v(a.size());
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j * r + i] = a(i, j);
  auto out = detail::make<T>(c, r, std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [r, c](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j * r + i];
    };
  }
  return out;
}

template <class T>
Var<T> slice_cols(const Var<T>& a, std::size_t c0, std::size_t c1) {
  detail::check(c0 < c1 && c1 <= a.cols(), "slice_cols: bad range");
  const std::size_t r = a.rows(), c = a.cols(), w = c1 - c0;
  std::vector<T> v(r * w);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < w; ++j) v[i * w + j] = a(i, c0 + j);
  auto out = detail::make<T>(r, w, std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [r, c, c0, w](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < w; ++j) g[i * c + c0 + j] += self.grad[i * w + j];
    };
  }
  return out;
}

template <class T>
Var<T> select_rows(const Var<T>& a, std::vector<std::size_t> idx) {
  const std::size_t c = a.cols();
  std::vector<T> v(idx.size() * c);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    detail::check(idx[i] < a.rows(), "select_rows: index out of range");
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = a(idx[i], j);
  }
  auto out = detail::make<T>(idx.size(), c, std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [c, ix = std::move(idx)](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < ix.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) g[ix[i] * c + j] += self.grad[i * c + j];
    };
  }
  return out;
}

template <class T>
Var<T> mean_rows(const Var<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  std::vector<T> v(c, T(0));
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) v[j] += a(i, j);
  for (auto& x : v) x /= T(r);
  auto out = detail::make<T>(1, c, std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [r, c](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += self.grad[j] / T(r);
    };
  }
  return out;
}

/// Column-wise maximum over rows; the gradient goes to the first maximal row.
template <class T>
Var<T> max_rows(const Var<T>& a) {
  const std::size_t r = a.rows(), c = a.cols();
  detail::check(r > 0, "max_rows: empty input");
  std::vector<T> v(c);
  std::vector<std::size_t> arg(c, 0);
  for (std::size_t j = 0; j < c; ++j) {
    v[j] = a(0, j);
    for (std::size_t i = 1; i < r; ++i)
      if (a(i, j) > v[j]) {
        v[j] = a(i, j);
        arg[j] = i;
      }
  }
  auto out = detail::make<T>(1, c, std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [arg = std::move(arg), c](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t j = 0; j < c; ++j) g[arg[j] * c + j] += self.grad[j];
    };
  }
  return out;
}

/// Reinterprets the row-major buffer with a new shape (same element count).
template <class T>
Var<T> reshape(const Var<T>& a, std::size_t rows, std::size_t cols) {
  detail::check(rows * cols == a.size(), "reshape: size mismatch");
  std::vector<T> v(a.values().begin(), a.values().end());
  auto out = detail::make<T>(rows, cols, std::move(v), {a.node()});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i];
    };
  }
  return out;
}

/// Concatenates along rows; all parts share the column count.
template <class T>
Var<T> stack_rows(const std::vector<Var<T>>& parts) {
  detail::check(!parts.empty(), "stack_rows: empty");
  const std::size_t c = parts[0].cols();
  std::size_t r = 0;
  std::vector<std::shared_ptr<Node<T>>> ps;
  for (const auto& p : parts) {
    detail::check(p.cols() == c, "stack_rows: column mismatch");
    r += p.rows();
    ps.push_back(p.node());
  }
  std::vector<T> v;
  v.reserve(r * c);
  for (const auto& p : parts) v.insert(v.end(), p.values().begin(), p.values().end());
  auto out = detail::make<T>(r, c, std::move(v), std::move(ps));
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      std::size_t off = 0;
      for (auto& p : self.parents) {
        if (p->requires_grad) {
          T* g = p->grad_data();
          for (std::size_t i = 0; i < p->size(); ++i) g[i] += self.grad[off + i];
        }
        off += p->size();
      }
    };
  }
  return out;
}

template <class T>
Var<T> embedding(const Var<T>& table, std::vector<std::size_t> ids) {
  return select_rows(table, std::move(ids));
}

// ---------------------------------------------------------------------------
// Dense algebra

/// y = x W^T + b with x: n x k, W: d x k, b: 1 x d (optional).
template <class T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>* b = nullptr) {
  detail::check(x.cols() == w.cols(), "linear: inner dimension mismatch");
  const std::size_t n = x.rows(), d = w.rows();
  std::vector<T> v(n * d);
  MapM<T> y(v.data(), static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(d));
  y.noalias() = mat(*x.node()) * mat(*w.node()).transpose();
  std::vector<std::shared_ptr<Node<T>>> ps{x.node(), w.node()};
  if (b) {
    detail::check(b->rows() == 1 && b->cols() == d, "linear: bias shape mismatch");
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) v[i * d + j] += b->values()[j];
    ps.push_back(b->node());
  }
  auto out = detail::make<T>(n, d, std::move(v), std::move(ps));
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pw = *self.parents[1];
      MapC<T> dy(self.grad.data(), static_cast<Eigen::Index>(self.rows), static_cast<Eigen::Index>(self.cols));
      if (px.requires_grad) gmat(px).noalias() += dy * mat(pw);
      if (pw.requires_grad) gmat(pw).noalias() += dy.transpose() * mat(px);
      if (self.parents.size() > 2 && self.parents[2]->requires_grad) {
        T* g = self.parents[2]->grad_data();
        for (std::size_t i = 0; i < self.rows; ++i)
          for (std::size_t j = 0; j < self.cols; ++j) g[j] += self.grad[i * self.cols + j];
      }
    };
  }
  return out;
}

/// y = a b with a: n x k, b: k x m.
template <class T>
Var<T> matmul(const Var<T>& a, const Var<T>& b) {
  detail::check(a.cols() == b.rows(), "matmul: inner dimension mismatch");
  std::vector<T> v(a.rows() * b.cols());
  MapM<T> y(v.data(), static_cast<Eigen::Index>(a.rows()), static_cast<Eigen::Index>(b.cols()));
  y.noalias() = mat(*a.node()) * mat(*b.node());
  auto out = detail::make<T>(a.rows(), b.cols(), std::move(v), {a.node(), b.node()});
  if (out.requires_grad()) {
    out.node()->backward = [](Node<T>& self) {
      auto& pa = *self.parents[0];
      auto& pb = *self.parents[1];
      MapC<T> dy(self.grad.data(), static_cast<Eigen::Index>(self.rows), static_cast<Eigen::Index>(self.cols));
      if (pa.requires_grad) gmat(pa).noalias() += dy * mat(pb).transpose();
      if (pb.requires_grad) gmat(pb).noalias() += mat(pa).transpose() * dy;
    };
  }
  return out;
}

/// y = a b^T with a: n x k, b: m x k.
template <class T>
Var<T> matmul_nt(const Var<T>& a, const Var<T>& b) {
  return linear(a, b);
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization

template <class T>
Var<T> layer_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, T eps = T(1e-5)) {
  const std::size_t r = x.rows(), c = x.cols();
  detail::check(gamma.size() == c && beta.size() == c, "layer_norm: parameter shape mismatch");
  std::vector<T> v(r * c), xhat(r * c), rstd(r);
  for (std::size_t i = 0; i < r; ++i) {
    T mu = 0;
    for (std::size_t j = 0; j < c; ++j) mu += x(i, j);
    mu /= T(c);
    T var = 0;
    for (std::size_t j = 0; j < c; ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= T(c);
    rstd[i] = T(1) / std::sqrt(var + eps);
    for (std::size_t j = 0; j < c; ++j) {
      xhat[i * c + j] = (x(i, j) - mu) * rstd[i];
      v[i * c + j] = xhat[i * c + j] * gamma.values()[j] + beta.values()[j];
    }
  }
  auto out = detail::make<T>(r, c, std::move(v), {x.node(), gamma.node(), beta.node()});
  if (out.requires_grad()) {
    out.node()->backward = [r, c, xh = std::move(xhat), rs = std::move(rstd)](Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pg = *self.parents[1];
      auto& pb = *self.parents[2];
      const T* g = pg.data();
      if (pg.requires_grad) {
        T* dg = pg.grad_data();
        for (std::size_t i = 0; i < r * c; ++i) dg[i % c] += self.grad[i] * xh[i];
      }
      if (pb.requires_grad) {
        T* db = pb.grad_data();
        for (std::size_t i = 0; i < r * c; ++i) db[i % c] += self.grad[i];
      }
      if (px.requires_grad) {
        T* dx = px.grad_data();
        for (std::size_t i = 0; i < r; ++i) {
          T m1 = 0, m2 = 0;
          for (std::size_t j = 0; j < c; ++j) {
            const T dxh = self.grad[i * c + j] * g[j];
            m1 += dxh;
            m2 += dxh * xh[i * c + j];
          }
          m1 /= T(c);
          m2 /= T(c);
          for (std::size_t j = 0; j < c; ++j) {
            const T dxh = self.grad[i * c + j] * g[j];
            dx[i * c + j] += rs[i] * (dxh - m1 - xh[i * c + j] * m2);
          }
        }
      }
    };
  }
  return out;
}

/// Exact (erf) GELU.
template <class T>
Var<T> gelu(const Var<T>& x) {
  const T inv_sqrt2 = T(0.70710678118654752440);
  std::vector<T> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    const T a = x.values()[i];
    v[i] = T(0.5) * a * (T(1) + std::erf(a * inv_sqrt2));
  }
  auto out = detail::make<T>(x.rows(), x.cols(), std::move(v), {x.node()});
  if (out.requires_grad()) {
    out.node()->backward = [inv_sqrt2](Node<T>& self) {
      auto& px = *self.parents[0];
      const T inv_sqrt2pi = T(0.39894228040143267794);
      T* g = px.grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) {
        const T a = px.data()[i];
        const T d = T(0.5) * (T(1) + std::erf(a * inv_sqrt2)) + a * inv_sqrt2pi * std::exp(T(-0.5) * a * a);
        g[i] += d * self.grad[i];
      }
    };
  }
  return out;
}

template <class T>
Var<T> l2_normalize_rows(const Var<T>& x) {
  const std::size_t r = x.rows(), c = x.cols();
  std::vector<T> v(r * c), norms(r);
  for (std::size_t i = 0; i < r; ++i) {
    T s = 0;
    for (std::size_t j = 0; j < c; ++j) s += x(i, j) * x(i, j);
    norms[i] = std::sqrt(s);
    if (!(norms[i] > T(0))) fail(Errc::invalid_input, "zero-norm embedding in row " + std::to_string(i));
    for (std::size_t j = 0; j < c; ++j) v[i * c + j] = x(i, j) / norms[i];
  }
  auto out = detail::make<T>(r, c, std::move(v), {x.node()});
  if (out.requires_grad()) {
    out.node()->backward = [r, c, nr = std::move(norms)](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      const T* y = self.data();
      for (std::size_t i = 0; i < r; ++i) {
        T dot = 0;
        for (std::size_t j = 0; j < c; ++j) dot += y[i * c + j] * self.grad[i * c + j];
        for (std::size_t j = 0; j < c; ++j) g[i * c + j] += (self.grad[i * c + j] - y[i * c + j] * dot) / nr[i];
      }
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Attention

/// Counts score-matrix work so factorized attention can be audited.
struct AttentionStats {
  std::uint64_t pairwise = 0;       // sum over groups of |group|^2
  std::uint64_t largest_block = 0;  // largest single score block materialized
  std::uint64_t calls = 0;
};

/// Multi-head scaled dot-product attention restricted to index groups.
///
/// Rows of q/k/v are tokens. Each group is a set of token rows that attend
/// only among themselves; every token must belong to exactly one group.
/// `key_valid`, when non-empty, masks keys (0 = ignored).
template <class T>
Var<T> grouped_attention(const Var<T>& q, const Var<T>& k, const Var<T>& v, std::size_t heads,
                         const std::vector<std::vector<std::size_t>>& groups,
                         const std::vector<std::uint8_t>& key_valid = {}, AttentionStats* stats = nullptr) {
  const std::size_t n = q.rows(), dm = q.cols();
  detail::check(k.rows() == n && v.rows() == n && k.cols() == dm && v.cols() == dm, "attention: shape mismatch");
  detail::check(heads > 0 && dm % heads == 0, "attention: heads must divide width");
  detail::check(key_valid.empty() || key_valid.size() == n, "attention: mask length mismatch");
  const std::size_t hd = dm / heads;
  const T sc = T(1) / std::sqrt(T(hd));

  struct Block {
    std::vector<std::size_t> rows;  // query rows
    std::vector<std::size_t> keys;  // valid key rows
    std::vector<RowMat<T>> probs;   // one per head, |rows| x |keys|
  };
  std::vector<Block> blocks;
  blocks.reserve(groups.size());
  std::vector<T> out(n * dm, T(0));
  const T* Q = q.node()->data();
  const T* K = k.node()->data();
  const T* V = v.node()->data();

  for (const auto& grp : groups) {
    Block b;
    b.rows = grp;
    for (auto j : grp)
      if (key_valid.empty() || key_valid[j]) b.keys.push_back(j);
    if (stats) {
      const std::uint64_t sz = static_cast<std::uint64_t>(grp.size()) * grp.size();
      stats->pairwise += sz;
      stats->largest_block = std::max(stats->largest_block, sz);
    }
    const auto nq = static_cast<Eigen::Index>(b.rows.size());
    const auto nk = static_cast<Eigen::Index>(b.keys.size());
    if (nk > 0) {
      RowMat<T> qh(nq, hd), kh(nk, hd), vh(nk, hd);
      for (std::size_t h = 0; h < heads; ++h) {
        for (Eigen::Index i = 0; i < nq; ++i)
          for (std::size_t c = 0; c < hd; ++c) qh(i, c) = Q[b.rows[i] * dm + h * hd + c];
        for (Eigen::Index j = 0; j < nk; ++j)
          for (std::size_t c = 0; c < hd; ++c) {
            kh(j, c) = K[b.keys[j] * dm + h * hd + c];
            vh(j, c) = V[b.keys[j] * dm + h * hd + c];
          }
        RowMat<T> s = (qh * kh.transpose()) * sc;
        for (Eigen::Index i = 0; i < nq; ++i) {
          const T mx = s.row(i).maxCoeff();
          s.row(i) = (s.row(i).array() - mx).exp();
          s.row(i) /= s.row(i).sum();
        }
        RowMat<T> o = s * vh;
        for (Eigen::Index i = 0; i < nq; ++i)
          for (std::size_t c = 0; c < hd; ++c) out[b.rows[i] * dm + h * hd + c] = o(i, c);
        b.probs.push_back(std::move(s));
      }
    }
    blocks.push_back(std::move(b));
  }
  if (stats) ++stats->calls;

  auto res = detail::make<T>(n, dm, std::move(out), {q.node(), k.node(), v.node()});
  if (res.requires_grad()) {
    res.node()->backward = [heads, hd, dm, sc, bl = std::move(blocks)](Node<T>& self) {
      auto& pq = *self.parents[0];
      auto& pk = *self.parents[1];
      auto& pv = *self.parents[2];
      const T* Q = pq.data();
      const T* K = pk.data();
      const T* V = pv.data();
      T* dQ = pq.requires_grad ? pq.grad_data() : nullptr;
      T* dK = pk.requires_grad ? pk.grad_data() : nullptr;
      T* dV = pv.requires_grad ? pv.grad_data() : nullptr;
      for (const auto& b : bl) {
        const auto nq = static_cast<Eigen::Index>(b.rows.size());
        const auto nk = static_cast<Eigen::Index>(b.keys.size());
        if (nk == 0) continue;
        RowMat<T> qh(nq, hd), kh(nk, hd), vh(nk, hd), dout(nq, hd);
        for (std::size_t h = 0; h < heads; ++h) {
          for (Eigen::Index i = 0; i < nq; ++i)
            for (std::size_t c = 0; c < hd; ++c) {
              qh(i, c) = Q[b.rows[i] * dm + h * hd + c];
              dout(i, c) = self.grad[b.rows[i] * dm + h * hd + c];
            }
          for (Eigen::Index j = 0; j < nk; ++j)
            for (std::size_t c = 0; c < hd; ++c) {
              kh(j, c) = K[b.keys[j] * dm + h * hd + c];
              vh(j, c) = V[b.keys[j] * dm + h * hd + c];
            }
          const RowMat<T>& p = b.probs[h];
          RowMat<T> dp = dout * vh.transpose();
          RowMat<T> ds(nq, nk);
          for (Eigen::Index i = 0; i < nq; ++i) {
            const T dot = (p.row(i).array() * dp.row(i).array()).sum();
            ds.row(i) = p.row(i).array() * (dp.row(i).array() - dot);
          }
          if (dV) {
            RowMat<T> dvh = p.transpose() * dout;
            for (Eigen::Index j = 0; j < nk; ++j)
              for (std::size_t c = 0; c < hd; ++c) dV[b.keys[j] * dm + h * hd + c] += dvh(j, c);
          }
          if (dQ) {
            RowMat<T> dqh = (ds * kh) * sc;
            for (Eigen::Index i = 0; i < nq; ++i)
              for (std::size_t c = 0; c < hd; ++c) dQ[b.rows[i] * dm + h * hd + c] += dqh(i, c);
          }
          if (dK) {
            RowMat<T> dkh = (ds.transpose() * qh) * sc;
            for (Eigen::Index j = 0; j < nk; ++j)
              for (std::size_t c = 0; c < hd; ++c) dK[b.keys[j] * dm + h * hd + c] += dkh(j, c);
          }
        }
      }
    };
  }
  return res;
}

// ---------------------------------------------------------------------------
// Losses

/// Mean binary cross-entropy on logits, stable for any |z|. Optional
/// per-element weights scale each term; the mean is still over all elements.
template <class T>
Var<T> bce_with_logits(const Var<T>& z, const std::vector<T>& y, std::vector<T> w = {}) {
  detail::check(y.size() == z.size(), "bce: shape mismatch");
  detail::check(w.empty() || w.size() == y.size(), "bce: weight shape mismatch");
  if (w.empty()) w.assign(y.size(), T(1));
  T s = 0;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const T a = z.values()[i];
    s += w[i] * (std::max(a, T(0)) - a * y[i] + std::log1p(std::exp(-std::abs(a))));
  }
  const T nrm = T(y.size());
  auto out = detail::make<T>(1, 1, std::vector<T>{s / nrm}, {z.node()});
  if (out.requires_grad()) {
    out.node()->backward = [y, w = std::move(w), nrm](Node<T>& self) {
      auto& pz = *self.parents[0];
      T* g = pz.grad_data();
      for (std::size_t i = 0; i < y.size(); ++i) {
        const T a = pz.data()[i];
        const T sig = a >= 0 ? T(1) / (T(1) + std::exp(-a)) : std::exp(a) / (T(1) + std::exp(a));
        g[i] += self.grad[0] * w[i] * (sig - y[i]) / nrm;
      }
    };
  }
  return out;
}

/// mean_i [ logsumexp(S_i.) - S_ii ] for a square score matrix.
template <class T>
Var<T> cross_entropy_diag(const Var<T>& s) {
  const std::size_t n = s.rows();
  detail::check(s.cols() == n && n > 0, "cross_entropy_diag: need a square matrix");
  std::vector<T> soft(n * n);
  T loss = 0;
  for (std::size_t i = 0; i < n; ++i) {
    T mx = s(i, 0);
    for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, s(i, j));
    T z = 0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(s(i, j) - mx);
    const T lse = mx + std::log(z);
    for (std::size_t j = 0; j < n; ++j) soft[i * n + j] = std::exp(s(i, j) - lse);
    loss += lse - s(i, i);
  }
  auto out = detail::make<T>(1, 1, std::vector<T>{loss / T(n)}, {s.node()});
  if (out.requires_grad()) {
    out.node()->backward = [n, sm = std::move(soft)](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < n; ++j)
          g[i * n + j] += self.grad[0] * (sm[i * n + j] - (i == j ? T(1) : T(0))) / T(n);
    };
  }
  return out;
}

/// Mean squared error against a constant target.
template <class T>
Var<T> mse(const Var<T>& pred, const std::vector<T>& target) {
  detail::check(target.size() == pred.size(), "mse: shape mismatch");
  T s = 0;
  for (std::size_t i = 0; i < target.size(); ++i) {
    const T d = pred.values()[i] - target[i];
    s += d * d;
  }
  const T nrm = T(target.size());
  auto out = detail::make<T>(1, 1, std::vector<T>{s / nrm}, {pred.node()});
  if (out.requires_grad()) {
    out.node()->backward = [target, nrm](Node<T>& self) {
      auto& p = *self.parents[0];
      T* g = p.grad_data();
      for (std::size_t i = 0; i < target.size(); ++i) g[i] += self.grad[0] * T(2) * (p.data()[i] - target[i]) / nrm;
    };
  }
  return out;
}

// ---------------------------------------------------------------------------
// Vector quantization

template <class T>
struct Quantized {
  Var<T> output;                  // codebook rows, straight-through to the input
  std::vector<std::size_t> codes;  // nearest entry per input row
  Var<T> loss;                    // codebook term + beta * commitment term
  T commitment = 0;               // mean squared distance input <-> code
};

/// Nearest-entry quantization under Euclidean distance (ties -> lowest index).
template <class T>
std::vector<std::size_t> nearest_codes(std::span<const T> x, std::size_t rows, std::size_t cols,
                                       std::span<const T> codebook, std::size_t entries) {
  if (entries == 0) fail(Errc::invalid_config, "empty codebook");
  std::vector<std::size_t> idx(rows);
  for (std::size_t i = 0; i < rows; ++i) {
    T best = std::numeric_limits<T>::infinity();
    for (std::size_t e = 0; e < entries; ++e) {
      T d = 0;
      for (std::size_t c = 0; c < cols; ++c) {
        const T t = x[i * cols + c] - codebook[e * cols + c];
        d += t * t;
      }
      if (d < best) {
        best = d;
        idx[i] = e;
      }
    }
  }
  return idx;
}

template <class T>
Quantized<T> vector_quantize(const Var<T>& x, const Var<T>& codebook, T beta = T(0.25)) {
  detail::check(x.cols() == codebook.cols() || codebook.rows() == 0, "vq: width mismatch");
  const std::size_t n = x.rows(), c = x.cols();
  Quantized<T> q;
  q.codes = nearest_codes<T>(x.values(), n, c, codebook.values(), codebook.rows());
  std::vector<T> v(n * c);
  T sq = 0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      v[i * c + j] = codebook(q.codes[i], j);
      const T d = x(i, j) - v[i * c + j];
      sq += d * d;
    }
  const T nrm = T(n * c);
  q.commitment = sq / nrm;

  q.output = detail::make<T>(n, c, std::move(v), {x.node()});
  if (q.output.requires_grad()) {
    q.output.node()->backward = [](Node<T>& self) {
      T* g = self.parents[0]->grad_data();
      for (std::size_t i = 0; i < self.size(); ++i) g[i] += self.grad[i];
    };
  }

  q.loss = detail::make<T>(1, 1, std::vector<T>{(T(1) + beta) * sq / nrm}, {x.node(), codebook.node()});
  if (q.loss.requires_grad()) {
    q.loss.node()->backward = [codes = q.codes, beta, nrm, c](Node<T>& self) {
      auto& px = *self.parents[0];
      auto& pc = *self.parents[1];
      const T up = self.grad[0];
      for (std::size_t i = 0; i < codes.size(); ++i)
        for (std::size_t j = 0; j < c; ++j) {
          const T d = px.data()[i * c + j] - pc.data()[codes[i] * c + j];
          if (px.requires_grad) px.grad_data()[i * c + j] += up * beta * T(2) * d / nrm;
          if (pc.requires_grad) pc.grad_data()[codes[i] * c + j] -= up * T(2) * d / nrm;
        }
    };
  }
  return q;
}

template <class T>
bool all_finite(const Var<T>& v) {
  for (T x : v.values())
    if (!std::isfinite(x)) return false;
  return true;
}

}  // namespace ctlora::ag
