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

// Differentiable primitives. Each op computes its forward value eagerly and
// records a closure that accumulates exact gradients into its inputs.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numbers>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "mtm/ad/blas.hpp"
#include "mtm/ad/tape.hpp"
#include "mtm/ad/tensor.hpp"

namespace mtm::ad {

namespace detail {

template <class T>
Tape<T>& same_tape(Var<T> a, Var<T> b) {
  if (a.tape != b.tape) throw ShapeError("operands live on different tapes");
  return *a.tape;
}

template <class T>
bool needs_grad(Var<T> v) {
  return v.valid() && v.tape->requires_grad(v.id);
}

inline void require_rank(const Shape& s, std::size_t rank, const char* op) {
  if (s.size() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     shape_str(s));
  }
}

// Splits a shape around `axis` into (outer, axis length, inner).
struct AxisSplit {
  std::size_t outer = 1, len = 1, inner = 1;
};

inline AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit a;
  for (std::size_t i = 0; i < axis; ++i) a.outer *= s[i];
  a.len = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) a.inner *= s[i];
  return a;
}

enum class Broadcast { kSame, kRow };

inline Broadcast broadcast_kind(const Shape& a, const Shape& b, const char* op) {
  if (a == b) return Broadcast::kSame;
  if (b.size() == 1 && !a.empty() && b[0] == a.back()) return Broadcast::kRow;
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

template <class T, class F, class DF>
Var<T> unary(Var<T> a, const char* op, F f, DF df) {
  Tape<T>& tape = *a.tape;
  const Tensor<T>& x = a.value();
  Tensor<T> y(x.shape);
  for (std::size_t i = 0; i < x.size(); ++i) y.data[i] = f(x.data[i]);
  return tape.record(op, std::move(y), needs_grad(a), [a, df](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(a.id).data;
    const auto& yv = t.value(self).data;
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(xv[i], yv[i]);
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear algebra

// [m,k] x [k,n] -> [m,n]
template <class T>
Var<T> matmul(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& A = a.value();
  const Tensor<T>& B = b.value();
  detail::require_rank(A.shape, 2, "matmul");
  detail::require_rank(B.shape, 2, "matmul");
  if (A.cols() != B.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(A.shape) + " x " + shape_str(B.shape));
  }
  const int m = static_cast<int>(A.rows()), k = static_cast<int>(A.cols()), n = static_cast<int>(B.cols());
  Tensor<T> C({A.rows(), B.cols()});
  gemm<T>(false, false, m, n, k, T(1), A.data.data(), k, B.data.data(), n, T(0), C.data.data(), n);
  const bool rg = detail::needs_grad(a) || detail::needs_grad(b);
  return tape.record("matmul", std::move(C), rg, [a, b, m, n, k](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad(a.id);
      gemm<T>(false, true, m, k, n, T(1), g.data(), n, t.value(b.id).data.data(), n, T(1), ga.data(), k);
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad(b.id);
      gemm<T>(true, false, k, n, m, T(1), t.value(a.id).data.data(), k, g.data(), n, T(1), gb.data(), n);
    }
  });
}

template <class T>
Var<T> transpose(Var<T> a) {
  const Tensor<T>& x = a.value();
  detail::require_rank(x.shape, 2, "transpose");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor<T> y({c, r});
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) y.data[j * r + i] = x.data[i * c + j];
  }
  return a.tape->record("transpose", std::move(y), detail::needs_grad(a), [a, r, c](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) ga[i * c + j] += g[j * r + i];
    }
  });
}

template <class T>
Var<T> reshape(Var<T> a, Shape shape) {
  const Tensor<T>& x = a.value();
  if (numel(shape) != x.size()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(shape));
  }
  Tensor<T> y(std::move(shape), x.data);
  return a.tape->record("reshape", std::move(y), detail::needs_grad(a), [a](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

// Half-open range [begin, end) along `axis`.
template <class T>
Var<T> slice(Var<T> a, std::size_t axis, std::size_t begin, std::size_t end) {
  const Tensor<T>& x = a.value();
  const auto s = detail::split_axis(x.shape, axis);
  if (begin > end || end > s.len) {
    throw ShapeError("slice: range [" + std::to_string(begin) + ", " + std::to_string(end) +
                     ") out of bounds for " + shape_str(x.shape));
  }
  Shape out_shape = x.shape;
  out_shape[axis] = end - begin;
  Tensor<T> y(out_shape);
  const std::size_t w = end - begin;
  for (std::size_t o = 0; o < s.outer; ++o) {
    std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>((o * s.len + begin) * s.inner),
                w * s.inner, y.data.begin() + static_cast<std::ptrdiff_t>(o * w * s.inner));
  }
  return a.tape->record("slice", std::move(y), detail::needs_grad(a), [a, s, begin, w](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (std::size_t o = 0; o < s.outer; ++o) {
      const T* src = g.data() + o * w * s.inner;
      T* dst = ga.data() + (o * s.len + begin) * s.inner;
      for (std::size_t i = 0; i < w * s.inner; ++i) dst[i] += src[i];
    }
  });
}

template <class T>
Var<T> concat(const std::vector<Var<T>>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  Tape<T>& tape = *parts[0].tape;
  Shape out_shape = parts[0].shape();
  if (axis >= out_shape.size()) throw ShapeError("concat: axis out of range");
  std::size_t total = 0;
  bool rg = false;
  for (const auto& p : parts) {
    if (p.tape != &tape) throw ShapeError("concat: operands live on different tapes");
    Shape s = p.shape();
    if (s.size() != out_shape.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (i != axis && s[i] != out_shape[i]) throw ShapeError("concat: shape mismatch " + shape_str(s));
    }
    total += s[axis];
    rg = rg || detail::needs_grad(p);
  }
  out_shape[axis] = total;
  const auto s = detail::split_axis(out_shape, axis);
  Tensor<T> y(out_shape);
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const Tensor<T>& x = p.value();
    const std::size_t w = x.shape[axis];
    for (std::size_t o = 0; o < s.outer; ++o) {
      std::copy_n(x.data.begin() + static_cast<std::ptrdiff_t>(o * w * s.inner), w * s.inner,
                  y.data.begin() + static_cast<std::ptrdiff_t>((o * s.len + off) * s.inner));
    }
    off += w;
  }
  return tape.record("concat", std::move(y), rg, [parts, offsets, s, axis](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (!t.requires_grad(parts[p].id)) continue;
      const std::size_t w = t.value(parts[p].id).shape[axis];
      auto& gp = t.grad(parts[p].id);
      for (std::size_t o = 0; o < s.outer; ++o) {
        const T* src = g.data() + (o * s.len + offsets[p]) * s.inner;
        T* dst = gp.data() + o * w * s.inner;
        for (std::size_t i = 0; i < w * s.inner; ++i) dst[i] += src[i];
      }
    }
  });
}

// ---------------------------------------------------------------------------
// Elementwise arithmetic. `b` may also be a vector matching the last axis of
// `a`, broadcast over all leading positions.

template <class T>
Var<T> add(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& z = b.value();
  const auto kind = detail::broadcast_kind(x.shape, z.shape, "add");
  Tensor<T> y = x;
  const std::size_t n = z.size();
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] += z.data[kind == detail::Broadcast::kSame ? i : i % n];
  const bool rg = detail::needs_grad(a) || detail::needs_grad(b);
  return tape.record("add", std::move(y), rg, [a, b, kind, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[kind == detail::Broadcast::kSame ? i : i % n] += g[i];
    }
  });
}

template <class T>
Var<T> sub(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& z = b.value();
  const auto kind = detail::broadcast_kind(x.shape, z.shape, "sub");
  const std::size_t n = z.size();
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] -= z.data[kind == detail::Broadcast::kSame ? i : i % n];
  const bool rg = detail::needs_grad(a) || detail::needs_grad(b);
  return tape.record("sub", std::move(y), rg, [a, b, kind, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[kind == detail::Broadcast::kSame ? i : i % n] -= g[i];
    }
  });
}

template <class T>
Var<T> mul(Var<T> a, Var<T> b) {
  Tape<T>& tape = detail::same_tape(a, b);
  const Tensor<T>& x = a.value();
  const Tensor<T>& z = b.value();
  const auto kind = detail::broadcast_kind(x.shape, z.shape, "mul");
  const std::size_t n = z.size();
  Tensor<T> y = x;
  for (std::size_t i = 0; i < y.size(); ++i) y.data[i] *= z.data[kind == detail::Broadcast::kSame ? i : i % n];
  const bool rg = detail::needs_grad(a) || detail::needs_grad(b);
  return tape.record("mul", std::move(y), rg, [a, b, kind, n](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xv = t.value(a.id).data;
    const auto& zv = t.value(b.id).data;
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * zv[kind == detail::Broadcast::kSame ? i : i % n];
    }
    if (t.requires_grad(b.id)) {
      auto& gb = t.grad(b.id);
      for (std::size_t i = 0; i < g.size(); ++i) gb[kind == detail::Broadcast::kSame ? i : i % n] += g[i] * xv[i];
    }
  });
}

template <class T>
Var<T> scale(Var<T> a, T s) {
  const Tensor<T>& x = a.value();
  Tensor<T> y = x;
  for (auto& v : y.data) v *= s;
  return a.tape->record("scale", std::move(y), detail::needs_grad(a), [a, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a.id);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * s;
  });
}

// a * s where s is a one-element tensor.
template <class T>
Var<T> mul_scalar(Var<T> a, Var<T> s) {
  Tape<T>& tape = detail::same_tape(a, s);
  if (s.value().size() != 1) throw ShapeError("mul_scalar: scale must have one element");
  const T sv = s.value().data[0];
  Tensor<T> y = a.value();
  for (auto& v : y.data) v *= sv;
  const bool rg = detail::needs_grad(a) || detail::needs_grad(s);
  return tape.record("mul_scalar", std::move(y), rg, [a, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const T sv2 = t.value(s.id).data[0];
    if (t.requires_grad(a.id)) {
      auto& ga = t.grad(a.id);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * sv2;
    }
    if (t.requires_grad(s.id)) {
      const auto& xv = t.value(a.id).data;
      T acc = 0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * xv[i];
      t.grad(s.id)[0] += acc;
    }
  });
}

// ---------------------------------------------------------------------------
// Activations

template <class T>
Var<T> sigmoid(Var<T> a) {
  return detail::unary(a, "sigmoid", [](T x) { return T(1) / (T(1) + std::exp(-x)); },
                       [](T, T y) { return y * (T(1) - y); });
}

template <class T>
Var<T> tanh(Var<T> a) {
  return detail::unary(a, "tanh", [](T x) { return std::tanh(x); }, [](T, T y) { return T(1) - y * y; });
}

template <class T>
Var<T> relu(Var<T> a) {
  return detail::unary(a, "relu", [](T x) { return x > T(0) ? x : T(0); },
                       [](T x, T) { return x > T(0) ? T(1) : T(0); });
}

// Exact (erf) GELU.
template <class T>
Var<T> gelu(Var<T> a) {
  return detail::unary(
      a, "gelu", [](T x) { return T(0.5) * x * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>)); },
      [](T x, T) {
        const T cdf = T(0.5) * (T(1) + std::erf(x / std::numbers::sqrt2_v<T>));
        const T pdf = std::exp(T(-0.5) * x * x) / std::sqrt(T(2) * std::numbers::pi_v<T>);
        return cdf + x * pdf;
      });
}

// x * sigmoid(x)
template <class T>
Var<T> swish(Var<T> a) {
  return detail::unary(
      a, "swish", [](T x) { return x / (T(1) + std::exp(-x)); },
      [](T x, T) {
        const T s = T(1) / (T(1) + std::exp(-x));
        return s * (T(1) + x * (T(1) - s));
      });
}

// ---------------------------------------------------------------------------
// Normalization and reductions

template <class T>
Var<T> softmax(Var<T> a, std::size_t axis) {
  const Tensor<T>& x = a.value();
  const auto s = detail::split_axis(x.shape, axis);
  Tensor<T> y(x.shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.len * s.inner + in;
      T mx = -std::numeric_limits<T>::infinity();
      for (std::size_t i = 0; i < s.len; ++i) mx = std::max(mx, x.data[base + i * s.inner]);
      T sum = 0;
      for (std::size_t i = 0; i < s.len; ++i) {
        const T e = std::exp(x.data[base + i * s.inner] - mx);
        y.data[base + i * s.inner] = e;
        sum += e;
      }
      for (std::size_t i = 0; i < s.len; ++i) y.data[base + i * s.inner] /= sum;
    }
  }
  return a.tape->record("softmax", std::move(y), detail::needs_grad(a), [a, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& yv = t.value(self).data;
    auto& ga = t.grad(a.id);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        const std::size_t base = o * s.len * s.inner + in;
        T dot = 0;
        for (std::size_t i = 0; i < s.len; ++i) dot += g[base + i * s.inner] * yv[base + i * s.inner];
        for (std::size_t i = 0; i < s.len; ++i) {
          const std::size_t k = base + i * s.inner;
          ga[k] += yv[k] * (g[k] - dot);
        }
      }
    }
  });
}

// Normalizes over the last axis; gamma/beta (vectors over that axis) are
// optional and may be default-constructed Vars.
template <class T>
Var<T> layer_norm(Var<T> x, Var<T> gamma = {}, Var<T> beta = {}, T eps = T(1e-5)) {
  const Tensor<T>& xv = x.value();
  if (xv.rank() == 0) throw ShapeError("layer_norm: empty shape");
  const std::size_t n = xv.shape.back();
  const std::size_t rows = xv.size() / n;
  if (gamma.valid() && gamma.value().shape != Shape{n}) throw ShapeError("layer_norm: gamma shape mismatch");
  if (beta.valid() && beta.value().shape != Shape{n}) throw ShapeError("layer_norm: beta shape mismatch");
  Tensor<T> y(xv.shape);
  std::vector<T> xhat(xv.size());
  std::vector<T> rstd(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const T* px = xv.data.data() + r * n;
    T mean = 0;
    for (std::size_t i = 0; i < n; ++i) mean += px[i];
    mean /= static_cast<T>(n);
    T var = 0;
    for (std::size_t i = 0; i < n; ++i) var += (px[i] - mean) * (px[i] - mean);
    var /= static_cast<T>(n);
    rstd[r] = T(1) / std::sqrt(var + eps);
    for (std::size_t i = 0; i < n; ++i) {
      const T h = (px[i] - mean) * rstd[r];
      xhat[r * n + i] = h;
      T v = h;
      if (gamma.valid()) v *= gamma.value().data[i];
      if (beta.valid()) v += beta.value().data[i];
      y.data[r * n + i] = v;
    }
  }
  const bool rg = detail::needs_grad(x) || detail::needs_grad(gamma) || detail::needs_grad(beta);
  return x.tape->record("layer_norm", std::move(y), rg,
                        [x, gamma, beta, n, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    if (detail::needs_grad(gamma)) {
      auto& gg = t.grad(gamma.id);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < n; ++i) gg[i] += g[r * n + i] * xhat[r * n + i];
      }
    }
    if (detail::needs_grad(beta)) {
      auto& gb = t.grad(beta.id);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t i = 0; i < n; ++i) gb[i] += g[r * n + i];
      }
    }
    if (t.requires_grad(x.id)) {
      auto& gx = t.grad(x.id);
      const T* gam = gamma.valid() ? t.value(gamma.id).data.data() : nullptr;
      std::vector<T> gh(n);
      for (std::size_t r = 0; r < rows; ++r) {
        T mean_gh = 0, mean_ghx = 0;
        for (std::size_t i = 0; i < n; ++i) {
          gh[i] = g[r * n + i] * (gam ? gam[i] : T(1));
          mean_gh += gh[i];
          mean_ghx += gh[i] * xhat[r * n + i];
        }
        mean_gh /= static_cast<T>(n);
        mean_ghx /= static_cast<T>(n);
        for (std::size_t i = 0; i < n; ++i) {
          gx[r * n + i] += rstd[r] * (gh[i] - mean_gh - xhat[r * n + i] * mean_ghx);
        }
      }
    }
  });
}

// Mean over one axis; the axis is removed (rank-0 results become shape [1]).
template <class T>
Var<T> mean(Var<T> a, std::size_t axis) {
  const Tensor<T>& x = a.value();
  const auto s = detail::split_axis(x.shape, axis);
  Shape out_shape;
  for (std::size_t i = 0; i < x.shape.size(); ++i) {
    if (i != axis) out_shape.push_back(x.shape[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  if (s.len == 0) throw ShapeError("mean: empty axis");
  Tensor<T> y(out_shape);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.len; ++i) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        y.data[o * s.inner + in] += x.data[(o * s.len + i) * s.inner + in];
      }
    }
  }
  for (auto& v : y.data) v /= static_cast<T>(s.len);
  return a.tape->record("mean", std::move(y), detail::needs_grad(a), [a, s](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& ga = t.grad(a.id);
    const T inv = T(1) / static_cast<T>(s.len);
    for (std::size_t o = 0; o < s.outer; ++o) {
      for (std::size_t i = 0; i < s.len; ++i) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          ga[(o * s.len + i) * s.inner + in] += g[o * s.inner + in] * inv;
        }
      }
    }
  });
}

template <class T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& x = a.value();
  T acc = 0;
  for (T v : x.data) acc += v;
  return a.tape->record("sum", Tensor<T>({1}, {acc}), detail::needs_grad(a), [a](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0];
    auto& ga = t.grad(a.id);
    for (auto& v : ga) v += g;
  });
}

// ---------------------------------------------------------------------------
// Sequence ops

// Depthwise 1-D convolution over time with "same" zero padding.
// x: [T, C], weight: [K, C] (K odd), bias: [C] or invalid.
template <class T>
Var<T> conv1d_depthwise(Var<T> x, Var<T> weight, Var<T> bias = {}) {
  Tape<T>& tape = detail::same_tape(x, weight);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = weight.value();
  detail::require_rank(xv.shape, 2, "conv1d_depthwise");
  detail::require_rank(wv.shape, 2, "conv1d_depthwise");
  const std::size_t len = xv.rows(), c = xv.cols(), k = wv.rows();
  if (wv.cols() != c) throw ShapeError("conv1d_depthwise: weight channels mismatch");
  if (k % 2 == 0) throw ShapeError("conv1d_depthwise: kernel size must be odd");
  if (bias.valid() && bias.value().shape != Shape{c}) throw ShapeError("conv1d_depthwise: bias shape mismatch");
  const auto pad = static_cast<std::ptrdiff_t>(k / 2);
  Tensor<T> y({len, c});
  for (std::size_t t = 0; t < len; ++t) {
    T* out = y.data.data() + t * c;
    if (bias.valid()) std::copy_n(bias.value().data.data(), c, out);
    for (std::size_t j = 0; j < k; ++j) {
      const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(t) + static_cast<std::ptrdiff_t>(j) - pad;
      if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
      const T* in = xv.data.data() + static_cast<std::size_t>(src) * c;
      const T* w = wv.data.data() + j * c;
      for (std::size_t ch = 0; ch < c; ++ch) out[ch] += w[ch] * in[ch];
    }
  }
  const bool rg = detail::needs_grad(x) || detail::needs_grad(weight) || detail::needs_grad(bias);
  return tape.record("conv1d_depthwise", std::move(y), rg, [x, weight, bias, len, c, k, pad](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xd = t.value(x.id).data;
    const auto& wd = t.value(weight.id).data;
    const bool gx_on = t.requires_grad(x.id);
    const bool gw_on = t.requires_grad(weight.id);
    T* gx = gx_on ? t.grad(x.id).data() : nullptr;
    T* gw = gw_on ? t.grad(weight.id).data() : nullptr;
    if (detail::needs_grad(bias)) {
      auto& gb = t.grad(bias.id);
      for (std::size_t tt = 0; tt < len; ++tt) {
        for (std::size_t ch = 0; ch < c; ++ch) gb[ch] += g[tt * c + ch];
      }
    }
    for (std::size_t tt = 0; tt < len; ++tt) {
      const T* go = g.data() + tt * c;
      for (std::size_t j = 0; j < k; ++j) {
        const std::ptrdiff_t src = static_cast<std::ptrdiff_t>(tt) + static_cast<std::ptrdiff_t>(j) - pad;
        if (src < 0 || src >= static_cast<std::ptrdiff_t>(len)) continue;
        const std::size_t srow = static_cast<std::size_t>(src) * c;
        if (gx) {
          for (std::size_t ch = 0; ch < c; ++ch) gx[srow + ch] += wd[j * c + ch] * go[ch];
        }
        if (gw) {
          for (std::size_t ch = 0; ch < c; ++ch) gw[j * c + ch] += xd[srow + ch] * go[ch];
        }
      }
    }
  });
}

// Gated linear unit over the last axis: first half * sigmoid(second half).
template <class T>
Var<T> glu(Var<T> a) {
  const Tensor<T>& x = a.value();
  if (x.rank() == 0 || x.shape.back() % 2 != 0) throw ShapeError("glu: last axis must be even");
  const std::size_t c2 = x.shape.back(), c = c2 / 2, rows = x.size() / c2;
  Shape out_shape = x.shape;
  out_shape.back() = c;
  Tensor<T> y(out_shape);
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t i = 0; i < c; ++i) {
      const T gate = T(1) / (T(1) + std::exp(-x.data[r * c2 + c + i]));
      y.data[r * c + i] = x.data[r * c2 + i] * gate;
    }
  }
  return a.tape->record("glu", std::move(y), detail::needs_grad(a), [a, c, c2, rows](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    const auto& xd = t.value(a.id).data;
    auto& ga = t.grad(a.id);
    for (std::size_t r = 0; r < rows; ++r) {
      for (std::size_t i = 0; i < c; ++i) {
        const T val = xd[r * c2 + i];
        const T gate = T(1) / (T(1) + std::exp(-xd[r * c2 + c + i]));
        const T go = g[r * c + i];
        ga[r * c2 + i] += go * gate;
        ga[r * c2 + c + i] += go * val * gate * (T(1) - gate);
      }
    }
  });
}

// Row gather: table [V, D], ids -> [len(ids), D]. Backward scatter-adds.
template <class T>
Var<T> embedding_lookup(Var<T> table, std::span<const std::int32_t> ids) {
  const Tensor<T>& tv = table.value();
  detail::require_rank(tv.shape, 2, "embedding_lookup");
  const std::size_t v = tv.rows(), d = tv.cols();
  std::vector<std::int32_t> idx(ids.begin(), ids.end());
  Tensor<T> y({idx.size(), d});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    if (idx[i] < 0 || static_cast<std::size_t>(idx[i]) >= v) throw ShapeError("embedding_lookup: id out of range");
    std::copy_n(tv.data.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(idx[i]) * d), d,
                y.data.begin() + static_cast<std::ptrdiff_t>(i * d));
  }
  return table.tape->record("embedding_lookup", std::move(y), detail::needs_grad(table),
                            [table, d, idx = std::move(idx)](Tape<T>& t, std::size_t self) {
    const auto& g = t.grad(self);
    auto& gt = t.grad(table.id);
    for (std::size_t i = 0; i < idx.size(); ++i) {
      T* dst = gt.data() + static_cast<std::size_t>(idx[i]) * d;
      const T* src = g.data() + i * d;
      for (std::size_t k = 0; k < d; ++k) dst[k] += src[k];
    }
  });
}

// Inverted dropout: kept entries are scaled by 1/(1-p). Deterministic in seed.
template <class T>
Var<T> dropout(Var<T> a, double p, std::uint64_t seed) {
  if (p <= 0.0) return a;
  if (p >= 1.0) throw ShapeError("dropout: p must be < 1");
  const Tensor<T>& x = a.value();
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution keep(1.0 - p);
  Tensor<T> mask(x.shape);
  for (auto& m : mask.data) m = keep(rng) ? static_cast<T>(1.0 / (1.0 - p)) : T(0);
  return mul(a, a.tape->constant(std::move(mask)));
}

// ---------------------------------------------------------------------------
// Losses

// Mean softmax cross-entropy over rows where mask[r] != 0.
template <class T>
Var<T> cross_entropy(Var<T> logits, std::span<const std::int32_t> targets,
                     std::span<const std::uint8_t> mask) {
  const Tensor<T>& z = logits.value();
  detail::require_rank(z.shape, 2, "cross_entropy");
  const std::size_t rows = z.rows(), classes = z.cols();
  if (targets.size() != rows || mask.size() != rows) throw ShapeError("cross_entropy: target/mask length mismatch");
  std::size_t count = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    ++count;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= classes) {
      throw ShapeError("cross_entropy: target id out of range");
    }
  }
  if (count == 0) throw ShapeError("cross_entropy: mask selects no positions");
  std::vector<T> probs(rows * classes, T(0));
  double loss = 0.0;
  for (std::size_t r = 0; r < rows; ++r) {
    if (!mask[r]) continue;
    const T* zr = z.data.data() + r * classes;
    T mx = *std::max_element(zr, zr + classes);
    double se = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      const T e = std::exp(zr[c] - mx);
      probs[r * classes + c] = e;
      se += e;
    }
    for (std::size_t c = 0; c < classes; ++c) probs[r * classes + c] = static_cast<T>(probs[r * classes + c] / se);
    loss += std::log(se) + mx - zr[targets[r]];
  }
  const T inv = T(1) / static_cast<T>(count);
  std::vector<std::int32_t> tg(targets.begin(), targets.end());
  std::vector<std::uint8_t> mk(mask.begin(), mask.end());
  return logits.tape->record("cross_entropy", Tensor<T>({1}, {static_cast<T>(loss / count)}), detail::needs_grad(logits),
                             [logits, rows, classes, inv, probs = std::move(probs), tg = std::move(tg), mk = std::move(mk)](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0] * inv;
    auto& gz = t.grad(logits.id);
    for (std::size_t r = 0; r < rows; ++r) {
      if (!mk[r]) continue;
      for (std::size_t c = 0; c < classes; ++c) gz[r * classes + c] += g * probs[r * classes + c];
      gz[r * classes + static_cast<std::size_t>(tg[r])] -= g;
    }
  });
}

// Mean binary cross-entropy with logits over every element.
template <class T>
Var<T> bce_with_logits(Var<T> logits, const Tensor<T>& targets) {
  const Tensor<T>& z = logits.value();
  if (z.shape != targets.shape) throw ShapeError("bce_with_logits: target shape mismatch");
  if (z.size() == 0) throw ShapeError("bce_with_logits: empty input");
  double loss = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double x = z.data[i], y = targets.data[i];
    loss += std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
  }
  const T inv = T(1) / static_cast<T>(z.size());
  return logits.tape->record("bce_with_logits", Tensor<T>({1}, {static_cast<T>(loss / z.size())}), detail::needs_grad(logits),
                             [logits, inv, targets](Tape<T>& t, std::size_t self) {
    const T g = t.grad(self)[0] * inv;
    const auto& zd = t.value(logits.id).data;
    auto& gz = t.grad(logits.id);
    for (std::size_t i = 0; i < zd.size(); ++i) {
      const T s = T(1) / (T(1) + std::exp(-zd[i]));
      gz[i] += g * (s - targets.data[i]);
    }
  });
}

}  // namespace mtm::ad
