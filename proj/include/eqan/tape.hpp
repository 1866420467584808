#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <utility>
#include <vector>

#include "eqan/affinity.hpp"
#include "eqan/errors.hpp"
#include "eqan/solvers.hpp"

namespace eqan {

struct Var {
  std::uint32_t id = 0;
};

// Reverse-mode tape. Values are flat vectors; ops that act on association
// features treat them as `planes` stacked n1 x n2 slices.
template <typename T>
class Tape {
 public:
  struct Node {
    std::vector<T> value;
    std::vector<T> grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  Var leaf(std::vector<T> v, bool requires_grad = true) { return push(std::move(v), requires_grad, {}); }
  Var constant(std::vector<T> v) { return push(std::move(v), false, {}); }

  const std::vector<T>& value(Var v) const { return nodes_[v.id].value; }
  std::size_t size(Var v) const { return nodes_[v.id].value.size(); }
  bool needs_grad(Var v) const { return nodes_[v.id].needs_grad; }
  std::size_t node_count() const noexcept { return nodes_.size(); }

  // Gradient of the last backward pass; zeros if the node received none.
  std::vector<T> grad(Var v) const {
    const auto& n = nodes_[v.id];
    return n.grad.empty() ? std::vector<T>(n.value.size(), T{0}) : n.grad;
  }

  void backward(Var out, std::vector<T> seed) {
    if (replayed_) throw UsageError("tape: backward already replayed");
    if (seed.size() != size(out)) throw InputError("tape: seed gradient shape does not match output");
    replayed_ = true;
    nodes_[out.id].grad = std::move(seed);
    for (std::size_t k = out.id + 1; k-- > 0;) {
      auto& n = nodes_[k];
      if (!n.needs_grad || n.grad.empty() || !n.backward) continue;
      n.backward();
    }
  }
  void backward(Var out) { backward(out, std::vector<T>(size(out), T{1})); }

  // Op construction: `bw` runs once during backward with this node's grad.
  Var push(std::vector<T> v, bool needs, std::function<void()> bw) {
    nodes_.push_back({std::move(v), {}, needs, std::move(bw)});
    return Var{static_cast<std::uint32_t>(nodes_.size() - 1)};
  }
  bool any_grad(std::initializer_list<Var> vs) const {
    for (auto v : vs)
      if (nodes_[v.id].needs_grad) return true;
    return false;
  }
  std::span<const T> g(Var v) const { return nodes_[v.id].grad; }
  std::span<const T> val(Var v) const { return nodes_[v.id].value; }
  // Accumulator for an input; nullptr if the input needs no gradient.
  T* acc(Var v) {
    auto& n = nodes_[v.id];
    if (!n.needs_grad) return nullptr;
    if (n.grad.empty()) n.grad.assign(n.value.size(), T{0});
    return n.grad.data();
  }

 private:
  std::vector<Node> nodes_;
  bool replayed_ = false;
};

namespace ops {

template <typename T>
Var unary_map(Tape<T>& tp, Var x, auto f, auto df_from_xy) {
  const auto& xv = tp.value(x);
  std::vector<T> y(xv.size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = f(xv[k]);
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, df_from_xy] {
    T* gx = tp.acc(x);
    if (!gx) return;
    const auto xv = tp.val(x);
    const auto yv = tp.val(out);
    const auto go = tp.g(out);
    for (std::size_t k = 0; k < go.size(); ++k) gx[k] += go[k] * df_from_xy(xv[k], yv[k]);
  });
}

template <typename T>
Var exp(Tape<T>& tp, Var x) {
  return unary_map(tp, x, [](T a) { return std::exp(a); }, [](T, T y) { return y; });
}

template <typename T>
Var log(Tape<T>& tp, Var x) {
  return unary_map(tp, x, [](T a) { return std::log(a); }, [](T a, T) { return T{1} / a; });
}

template <typename T>
Var relu(Tape<T>& tp, Var x) {
  return unary_map(tp, x, [](T a) { return a > T{0} ? a : T{0}; }, [](T a, T) { return a > T{0} ? T{1} : T{0}; });
}

template <typename T>
Var softplus(Tape<T>& tp, Var x) {
  return unary_map(
      tp, x, [](T a) { return a > T{20} ? a : std::log1p(std::exp(a)); },
      [](T a, T) { return T{1} / (T{1} + std::exp(-a)); });
}

template <typename T>
Var add_scalar(Tape<T>& tp, Var x, T c) {
  return unary_map(tp, x, [c](T a) { return a + c; }, [](T, T) { return T{1}; });
}

template <typename T>
Var scale(Tape<T>& tp, Var x, T c) {
  return unary_map(tp, x, [c](T a) { return a * c; }, [c](T, T) { return c; });
}

template <typename T>
Var square(Tape<T>& tp, Var x) {
  return unary_map(tp, x, [](T a) { return a * a; }, [](T a, T) { return T{2} * a; });
}

template <typename T>
Var add(Tape<T>& tp, Var a, Var b) {
  if (tp.size(a) != tp.size(b)) throw InputError("tape add: shape mismatch");
  std::vector<T> y(tp.value(a));
  const auto& bv = tp.value(b);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] += bv[k];
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({a, b}), [&tp, a, b, out] {
    const auto go = tp.g(out);
    if (T* ga = tp.acc(a))
      for (std::size_t k = 0; k < go.size(); ++k) ga[k] += go[k];
    if (T* gb = tp.acc(b))
      for (std::size_t k = 0; k < go.size(); ++k) gb[k] += go[k];
  });
}

template <typename T>
Var mul(Tape<T>& tp, Var a, Var b) {
  if (tp.size(a) != tp.size(b)) throw InputError("tape mul: shape mismatch");
  std::vector<T> y(tp.value(a));
  const auto& bv = tp.value(b);
  for (std::size_t k = 0; k < y.size(); ++k) y[k] *= bv[k];
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({a, b}), [&tp, a, b, out] {
    const auto go = tp.g(out);
    const auto av = tp.val(a), bv = tp.val(b);
    if (T* ga = tp.acc(a))
      for (std::size_t k = 0; k < go.size(); ++k) ga[k] += go[k] * bv[k];
    if (T* gb = tp.acc(b))
      for (std::size_t k = 0; k < go.size(); ++k) gb[k] += go[k] * av[k];
  });
}

template <typename T>
Var sum(Tape<T>& tp, Var x) {
  T s = T{0};
  for (T v : tp.value(x)) s += v;
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push({s}, tp.needs_grad(x), [&tp, x, out] {
    T* gx = tp.acc(x);
    const T go = tp.g(out)[0];
    for (std::size_t k = 0; k < tp.size(x); ++k) gx[k] += go;
  });
}

// Contiguous slice [offset, offset + len).
template <typename T>
Var slice(Tape<T>& tp, Var x, std::size_t offset, std::size_t len) {
  const auto& xv = tp.value(x);
  if (offset + len > xv.size()) throw InputError("tape slice: out of range");
  std::vector<T> y(xv.begin() + static_cast<std::ptrdiff_t>(offset),
                   xv.begin() + static_cast<std::ptrdiff_t>(offset + len));
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, offset] {
    T* gx = tp.acc(x);
    const auto go = tp.g(out);
    for (std::size_t k = 0; k < go.size(); ++k) gx[offset + k] += go[k];
  });
}

template <typename T>
Var concat(Tape<T>& tp, const std::vector<Var>& parts) {
  std::vector<T> y;
  bool needs = false;
  for (auto p : parts) {
    const auto& v = tp.value(p);
    y.insert(y.end(), v.begin(), v.end());
    needs = needs || tp.needs_grad(p);
  }
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), needs, [&tp, parts, out] {
    const auto go = tp.g(out);
    std::size_t off = 0;
    for (auto p : parts) {
      const std::size_t len = tp.size(p);
      if (T* gp = tp.acc(p))
        for (std::size_t k = 0; k < len; ++k) gp[k] += go[off + k];
      off += len;
    }
  });
}

// 1x1 convolution across planes: y_o = sum_i W[o, i] x_i + b_o.
template <typename T>
Var channel_mix(Tape<T>& tp, Var w, Var b, Var x, std::size_t out_ch, std::size_t plane) {
  const auto& xv = tp.value(x);
  const std::size_t in_ch = xv.size() / plane;
  if (in_ch * plane != xv.size() || tp.size(w) != out_ch * in_ch || tp.size(b) != out_ch)
    throw InputError("tape channel_mix: shape mismatch");
  const auto& wv = tp.value(w);
  const auto& bv = tp.value(b);
  std::vector<T> y(out_ch * plane);
  for (std::size_t o = 0; o < out_ch; ++o) {
    T* yo = y.data() + o * plane;
    std::fill(yo, yo + plane, bv[o]);
    for (std::size_t i = 0; i < in_ch; ++i) {
      const T wi = wv[o * in_ch + i];
      if (wi == T{0}) continue;
      const T* xi = xv.data() + i * plane;
      for (std::size_t a = 0; a < plane; ++a) yo[a] += wi * xi[a];
    }
  }
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({w, b, x}), [&tp, w, b, x, out, out_ch, in_ch, plane] {
    const auto go = tp.g(out);
    const auto xv = tp.val(x);
    const auto wv = tp.val(w);
    T* gw = tp.acc(w);
    T* gb = tp.acc(b);
    T* gx = tp.acc(x);
    for (std::size_t o = 0; o < out_ch; ++o) {
      const T* g = go.data() + o * plane;
      if (gb) {
        T s = T{0};
        for (std::size_t a = 0; a < plane; ++a) s += g[a];
        gb[o] += s;
      }
      for (std::size_t i = 0; i < in_ch; ++i) {
        const T* xi = xv.data() + i * plane;
        if (gw) {
          T s = T{0};
          for (std::size_t a = 0; a < plane; ++a) s += g[a] * xi[a];
          gw[o * in_ch + i] += s;
        }
        if (gx) {
          const T wi = wv[o * in_ch + i];
          T* gxi = gx + i * plane;
          for (std::size_t a = 0; a < plane; ++a) gxi[a] += wi * g[a];
        }
      }
    }
  });
}

// Per-plane affine pair: y_c = p[c] * a_c + p[C + c] * b_c.
template <typename T>
Var channel_affine2(Tape<T>& tp, Var p, Var a, Var b, std::size_t plane) {
  const std::size_t ch = tp.size(a) / plane;
  if (tp.size(p) != 2 * ch || tp.size(b) != tp.size(a)) throw InputError("tape channel_affine2: shape mismatch");
  const auto& pv = tp.value(p);
  const auto& av = tp.value(a);
  const auto& bv = tp.value(b);
  std::vector<T> y(av.size());
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) y[k] = pv[c] * av[k] + pv[ch + c] * bv[k];
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({p, a, b}), [&tp, p, a, b, out, ch, plane] {
    const auto go = tp.g(out);
    const auto pv = tp.val(p), av = tp.val(a), bv = tp.val(b);
    T* gp = tp.acc(p);
    T* ga = tp.acc(a);
    T* gb = tp.acc(b);
    for (std::size_t c = 0; c < ch; ++c) {
      T sa = T{0}, sb = T{0};
      for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) {
        if (ga) ga[k] += pv[c] * go[k];
        if (gb) gb[k] += pv[ch + c] * go[k];
        sa += go[k] * av[k];
        sb += go[k] * bv[k];
      }
      if (gp) {
        gp[c] += sa;
        gp[ch + c] += sb;
      }
    }
  });
}

// Per-plane scale: y_c = s[c] * x_c.
template <typename T>
Var channel_scale(Tape<T>& tp, Var s, Var x, std::size_t plane) {
  const std::size_t ch = tp.size(x) / plane;
  if (tp.size(s) != ch) throw InputError("tape channel_scale: shape mismatch");
  const auto& sv = tp.value(s);
  std::vector<T> y(tp.value(x));
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) y[k] *= sv[c];
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({s, x}), [&tp, s, x, out, ch, plane] {
    const auto go = tp.g(out);
    const auto sv = tp.val(s), xv = tp.val(x);
    T* gs = tp.acc(s);
    T* gx = tp.acc(x);
    for (std::size_t c = 0; c < ch; ++c) {
      T acc = T{0};
      for (std::size_t k = c * plane; k < (c + 1) * plane; ++k) {
        if (gx) gx[k] += sv[c] * go[k];
        acc += go[k] * xv[k];
      }
      if (gs) gs[c] += acc;
    }
  });
}

// Weighted plane sum: y = sum_c s[c] * x_c (one plane).
template <typename T>
Var weighted_planes(Tape<T>& tp, Var s, Var x, std::size_t plane) {
  const std::size_t ch = tp.size(x) / plane;
  if (tp.size(s) != ch) throw InputError("tape weighted_planes: shape mismatch");
  const auto& sv = tp.value(s);
  const auto& xv = tp.value(x);
  std::vector<T> y(plane, T{0});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t a = 0; a < plane; ++a) y[a] += sv[c] * xv[c * plane + a];
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({s, x}), [&tp, s, x, out, ch, plane] {
    const auto go = tp.g(out);
    const auto sv = tp.val(s), xv = tp.val(x);
    T* gs = tp.acc(s);
    T* gx = tp.acc(x);
    for (std::size_t c = 0; c < ch; ++c) {
      T acc = T{0};
      for (std::size_t a = 0; a < plane; ++a) {
        if (gx) gx[c * plane + a] += sv[c] * go[a];
        acc += go[a] * xv[c * plane + a];
      }
      if (gs) gs[c] += acc;
    }
  });
}

template <typename T>
Var channel_mean(Tape<T>& tp, Var x, std::size_t plane) {
  const std::size_t ch = tp.size(x) / plane;
  const auto& xv = tp.value(x);
  std::vector<T> y(plane, T{0});
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t a = 0; a < plane; ++a) y[a] += xv[c * plane + a];
  for (auto& v : y) v /= static_cast<T>(ch);
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, ch, plane] {
    const auto go = tp.g(out);
    T* gx = tp.acc(x);
    const T inv = T{1} / static_cast<T>(ch);
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t a = 0; a < plane; ++a) gx[c * plane + a] += go[a] * inv;
  });
}

// y_c = unary .* x_c + pairwise gather over the association pattern.
template <typename T>
Var assoc_matvec(Tape<T>& tp, PatternPtr pat, Var unary, Var weights, Var x) {
  const std::size_t plane = pat->nodes();
  const std::size_t ch = tp.size(x) / plane;
  if (ch * plane != tp.size(x) || tp.size(unary) != plane || tp.size(weights) != pat->stored())
    throw InputError("tape assoc_matvec: shape mismatch");
  std::vector<T> y(tp.size(x));
  const auto& uv = tp.value(unary);
  const auto& wv = tp.value(weights);
  const auto& xv = tp.value(x);
  for (std::size_t c = 0; c < ch; ++c)
    kernels::assoc_matvec<T>(*pat, uv, wv, std::span<const T>(xv).subspan(c * plane, plane),
                             std::span<T>(y).subspan(c * plane, plane));
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({unary, weights, x}), [&tp, pat, unary, weights, x, out, ch, plane] {
    const auto go = tp.g(out);
    const auto uv = tp.val(unary), wv = tp.val(weights), xv = tp.val(x);
    T* gu = tp.acc(unary);
    T* gw = tp.acc(weights);
    T* gx = tp.acc(x);
    // M is symmetric, so dx_c = M g_c.
    if (gx) {
      std::vector<T> tmp(plane);
      for (std::size_t c = 0; c < ch; ++c) {
        kernels::assoc_matvec<T>(*pat, uv, wv, go.subspan(c * plane, plane), tmp);
        for (std::size_t a = 0; a < plane; ++a) gx[c * plane + a] += tmp[a];
      }
    }
    if (gu)
      for (std::size_t c = 0; c < ch; ++c)
        for (std::size_t a = 0; a < plane; ++a) gu[a] += go[c * plane + a] * xv[c * plane + a];
    if (gw)
      for (std::size_t e = 0; e < pat->stored(); ++e) {
        const auto ha = pat->head(e), tb = pat->tail(e);
        T s = T{0};
        for (std::size_t c = 0; c < ch; ++c) s += go[c * plane + ha] * xv[c * plane + tb] + go[c * plane + tb] * xv[c * plane + ha];
        gw[e] += s;
      }
  });
}

// Normalizations over `planes` stacked rows x cols slices.
template <typename T>
Var row_softmax(Tape<T>& tp, Var x, std::size_t rows, std::size_t cols) {
  const std::size_t plane = rows * cols;
  const std::size_t np = tp.size(x) / plane;
  std::vector<T> y(tp.size(x));
  const auto& xv = tp.value(x);
  kernels::row_softmax<T>(xv, y, rows * np, cols);
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, rows, cols, np] {
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    T* gx = tp.acc(x);
    for (std::size_t r = 0; r < rows * np; ++r) {
      T dot = T{0};
      for (std::size_t j = 0; j < cols; ++j) dot += go[r * cols + j] * yv[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += yv[r * cols + j] * (go[r * cols + j] - dot);
    }
  });
}

template <typename T>
Var row_normalize(Tape<T>& tp, Var x, std::size_t rows, std::size_t cols) {
  const std::size_t np = tp.size(x) / (rows * cols);
  const auto& xv = tp.value(x);
  std::vector<T> y(xv.size());
  std::vector<T> sums(rows * np);
  for (std::size_t r = 0; r < rows * np; ++r) {
    T s = T{0};
    for (std::size_t j = 0; j < cols; ++j) s += xv[r * cols + j];
    s = std::max(s, static_cast<T>(kSinkhornFloor));
    sums[r] = s;
    for (std::size_t j = 0; j < cols; ++j) y[r * cols + j] = xv[r * cols + j] / s;
  }
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, cols, sums = std::move(sums)] {
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    T* gx = tp.acc(x);
    for (std::size_t r = 0; r < sums.size(); ++r) {
      T dot = T{0};
      for (std::size_t j = 0; j < cols; ++j) dot += go[r * cols + j] * yv[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) gx[r * cols + j] += (go[r * cols + j] - dot) / sums[r];
    }
  });
}

template <typename T>
Var col_normalize(Tape<T>& tp, Var x, std::size_t rows, std::size_t cols) {
  const std::size_t plane = rows * cols;
  const std::size_t np = tp.size(x) / plane;
  const auto& xv = tp.value(x);
  std::vector<T> y(xv.size());
  std::vector<T> sums(cols * np, T{0});
  for (std::size_t p = 0; p < np; ++p) {
    T* s = sums.data() + p * cols;
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) s[j] += xv[p * plane + i * cols + j];
    for (std::size_t j = 0; j < cols; ++j) s[j] = std::max(s[j], static_cast<T>(kSinkhornFloor));
    for (std::size_t i = 0; i < rows; ++i)
      for (std::size_t j = 0; j < cols; ++j) y[p * plane + i * cols + j] = xv[p * plane + i * cols + j] / s[j];
  }
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, rows, cols, np, sums = std::move(sums)] {
    const std::size_t plane = rows * cols;
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    T* gx = tp.acc(x);
    std::vector<T> dot(cols);
    for (std::size_t p = 0; p < np; ++p) {
      std::fill(dot.begin(), dot.end(), T{0});
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) dot[j] += go[p * plane + i * cols + j] * yv[p * plane + i * cols + j];
      for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < cols; ++j) {
          const std::size_t k = p * plane + i * cols + j;
          gx[k] += (go[k] - dot[j]) / sums[p * cols + j];
        }
    }
  });
}

// Sinkhorn(exp(x)) unrolled as one node. The backward runs in the log domain
// (g -= y_t * rowsum/colsum(g) per step), which needs no division by the
// possibly vanishing row and column sums.
template <typename T>
Var sinkhorn_log(Tape<T>& tp, Var x, std::size_t rows, std::size_t cols, int rounds) {
  const std::size_t plane = rows * cols;
  const std::size_t n = tp.size(x);
  const std::size_t np = n / plane;
  const std::size_t steps = 2 * static_cast<std::size_t>(rounds);
  const auto& xv = tp.value(x);
  auto trace = std::make_shared<std::vector<T>>(steps * n);
  for (std::size_t p = 0; p < np; ++p) {
    std::span<T> cur(trace->data() + p * plane, plane);
    kernels::row_softmax<T>(std::span<const T>(xv.data() + p * plane, plane), cur, rows, cols);
    for (std::size_t t = 1; t < steps; ++t) {
      std::span<T> next(trace->data() + t * n + p * plane, plane);
      std::copy(cur.begin(), cur.end(), next.begin());
      if (t % 2) kernels::col_normalize<T>(next, rows, cols);
      else kernels::row_normalize<T>(next, rows, cols);
      cur = next;
    }
  }
  std::vector<T> y(trace->begin() + static_cast<std::ptrdiff_t>((steps - 1) * n), trace->end());
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, rows, cols, np, steps, n, trace] {
    const std::size_t plane = rows * cols;
    const auto go = tp.g(out);
    std::vector<T> g(n);
    const T* yl = trace->data() + (steps - 1) * n;
    for (std::size_t k = 0; k < n; ++k) g[k] = go[k] * yl[k];
    std::vector<T> acc(std::max(rows, cols));
    for (std::size_t t = steps; t-- > 0;) {
      const T* yt = trace->data() + t * n;
      for (std::size_t p = 0; p < np; ++p) {
        T* gp = g.data() + p * plane;
        const T* yp = yt + p * plane;
        if (t % 2) {
          std::fill(acc.begin(), acc.begin() + static_cast<std::ptrdiff_t>(cols), T{0});
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) acc[j] += gp[i * cols + j];
          for (std::size_t i = 0; i < rows; ++i)
            for (std::size_t j = 0; j < cols; ++j) gp[i * cols + j] -= yp[i * cols + j] * acc[j];
        } else {
          for (std::size_t i = 0; i < rows; ++i) {
            T s = T{0};
            for (std::size_t j = 0; j < cols; ++j) s += gp[i * cols + j];
            for (std::size_t j = 0; j < cols; ++j) gp[i * cols + j] -= yp[i * cols + j] * s;
          }
        }
      }
    }
    T* gx = tp.acc(x);
    for (std::size_t k = 0; k < n; ++k) gx[k] += g[k];
  });
}

// Per-plane L2 normalization (power-method step).
template <typename T>
Var l2_normalize_planes(Tape<T>& tp, Var x, std::size_t plane) {
  const std::size_t np = tp.size(x) / plane;
  const auto& xv = tp.value(x);
  std::vector<T> y(xv.size());
  std::vector<T> norms(np);
  for (std::size_t p = 0; p < np; ++p) {
    T s = T{0};
    for (std::size_t a = 0; a < plane; ++a) s += xv[p * plane + a] * xv[p * plane + a];
    s = std::sqrt(s);
    if (!(s > T{0})) throw DegenerateError("sm: affinity matvec vanished");
    norms[p] = s;
    for (std::size_t a = 0; a < plane; ++a) y[p * plane + a] = xv[p * plane + a] / s;
  }
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(x), [&tp, x, out, plane, norms = std::move(norms)] {
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    T* gx = tp.acc(x);
    for (std::size_t p = 0; p < norms.size(); ++p) {
      T dot = T{0};
      for (std::size_t a = 0; a < plane; ++a) dot += go[p * plane + a] * yv[p * plane + a];
      for (std::size_t a = 0; a < plane; ++a)
        gx[p * plane + a] += (go[p * plane + a] - dot * yv[p * plane + a]) / norms[p];
    }
  });
}

// exp(-gap^2 / sigma^2) per stored entry, sigma a 1-element var.
template <typename T>
Var gaussian_kernel(Tape<T>& tp, std::shared_ptr<const std::vector<double>> sq, Var sigma,
                    std::shared_ptr<const std::vector<std::uint8_t>> mask = nullptr) {
  const T s = tp.value(sigma)[0];
  std::vector<T> y(sq->size());
  for (std::size_t k = 0; k < y.size(); ++k)
    y[k] = (mask && !(*mask)[k]) ? T{0} : std::exp(-static_cast<T>((*sq)[k]) / (s * s));
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.needs_grad(sigma), [&tp, sq, sigma, out] {
    const T s = tp.val(sigma)[0];
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    T acc = T{0};
    for (std::size_t k = 0; k < go.size(); ++k) acc += go[k] * yv[k] * T{2} * static_cast<T>((*sq)[k]) / (s * s * s);
    tp.acc(sigma)[0] += acc;
  });
}

// Learnable affinity: pairwise exp(-sum_c w_c (x_c[a] - x_c[b])^2).
template <typename T>
Var update_pairwise(Tape<T>& tp, PatternPtr pat, Var x, Var w) {
  const std::size_t plane = pat->nodes();
  const std::size_t ch = tp.size(w);
  if (tp.size(x) != ch * plane) throw InputError("tape update_pairwise: shape mismatch");
  const auto& xv = tp.value(x);
  const auto& wv = tp.value(w);
  std::vector<T> y(pat->stored());
  for (std::size_t e = 0; e < y.size(); ++e)
    y[e] = kernels::updated_pairwise<T>(xv, plane, wv, pat->head(e), pat->tail(e));
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({x, w}), [&tp, pat, x, w, out, ch, plane] {
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    const auto xv = tp.val(x), wv = tp.val(w);
    T* gx = tp.acc(x);
    T* gw = tp.acc(w);
    for (std::size_t e = 0; e < go.size(); ++e) {
      const T ge = go[e] * yv[e];
      if (ge == T{0}) continue;
      const auto a = pat->head(e), b = pat->tail(e);
      for (std::size_t c = 0; c < ch; ++c) {
        const T d = xv[c * plane + a] - xv[c * plane + b];
        if (gw) gw[c] -= ge * d * d;
        if (gx) {
          const T t = T{2} * ge * wv[c] * d;
          gx[c * plane + a] -= t;
          gx[c * plane + b] += t;
        }
      }
    }
  });
}

// Learnable unary: exp(sum_c u_c x_c[a]), zero where mask is 0.
template <typename T>
Var update_unary(Tape<T>& tp, Var x, Var u, std::size_t plane, std::shared_ptr<const std::vector<std::uint8_t>> mask) {
  const std::size_t ch = tp.size(u);
  if (tp.size(x) != ch * plane) throw InputError("tape update_unary: shape mismatch");
  const auto& xv = tp.value(x);
  const auto& uv = tp.value(u);
  std::vector<T> y(plane);
  for (std::size_t a = 0; a < plane; ++a)
    y[a] = (mask && !(*mask)[a]) ? T{0} : kernels::updated_unary<T>(xv, plane, uv, a);
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({x, u}), [&tp, x, u, out, ch, plane] {
    const auto go = tp.g(out);
    const auto yv = tp.val(out);
    const auto xv = tp.val(x), uv = tp.val(u);
    T* gx = tp.acc(x);
    T* gu = tp.acc(u);
    for (std::size_t a = 0; a < plane; ++a) {
      const T ga = go[a] * yv[a];
      if (ga == T{0}) continue;
      for (std::size_t c = 0; c < ch; ++c) {
        if (gu) gu[c] += ga * xv[c * plane + a];
        if (gx) gx[c * plane + a] += ga * uv[c];
      }
    }
  });
}

// Binary cross-entropy on rows [0, real_rows) of an n1 x n2 plane against
// the partial permutation `target` (target[i] = column of row i).
template <typename T>
Var bce_loss(Tape<T>& tp, Var q, std::size_t rows, std::size_t cols, std::vector<std::size_t> target) {
  if (tp.size(q) != rows * cols || target.size() > rows) throw InputError("bce_loss: shape mismatch");
  // Clamp in double: 1 - 1e-12 rounds to 1 in float.
  constexpr double lo = 1e-12, hi = 1.0 - 1e-12;
  const auto& qv = tp.value(q);
  for (T v : qv)
    if (!std::isfinite(static_cast<double>(v))) throw DomainError("bce_loss: non-finite prediction");
  double loss = 0;
  for (std::size_t i = 0; i < target.size(); ++i)
    for (std::size_t j = 0; j < cols; ++j) {
      const double p = std::clamp(static_cast<double>(qv[i * cols + j]), lo, hi);
      loss -= j == target[i] ? std::log(p) : std::log1p(-p);
    }
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push({static_cast<T>(loss)}, tp.needs_grad(q), [&tp, q, out, cols, target = std::move(target)] {
    const double go = static_cast<double>(tp.g(out)[0]);
    const auto qv = tp.val(q);
    T* gq = tp.acc(q);
    for (std::size_t i = 0; i < target.size(); ++i)
      for (std::size_t j = 0; j < cols; ++j) {
        const double p = static_cast<double>(qv[i * cols + j]);
        if (p < lo || p > hi) continue;
        gq[i * cols + j] += static_cast<T>(go * (j == target[i] ? -1.0 / p : 1.0 / (1.0 - p)));
      }
  });
}

}  // namespace ops
}  // namespace eqan
