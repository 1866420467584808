#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <numeric>
#include <span>
#include <vector>

#include "eqan/errors.hpp"
#include "eqan/rng.hpp"
#include "eqan/tape.hpp"

namespace eqan {

// Number of sampled entries per channel, ceil(gamma * n * sqrt(n)).
inline std::size_t sample_count(std::size_t n, double gamma) {
  if (!(gamma > 0)) throw ConfigError("sampling: gamma must be > 0");
  const double x = gamma * static_cast<double>(n) * std::sqrt(static_cast<double>(n));
  return static_cast<std::size_t>(std::ceil(x - 1e-9));
}

struct SampleMask {
  std::size_t channels = 0;
  std::size_t n = 0;
  std::size_t per_channel = 0;
  std::vector<std::uint8_t> b;                    // C x n x n
  std::vector<std::vector<std::uint32_t>> active;  // sorted positions per channel
  std::vector<double> s;                          // sampling weights
  std::vector<double> q;                          // s / sum(s)
  double s_sum = 0;
  bool uniform_fallback = false;
  bool full = false;

  std::size_t stored_active() const {
    std::size_t k = 0;
    for (const auto& a : active) k += a.size();
    return k;
  }
};

// Weighted sampling without replacement, independently per channel
// (exponential-key method). Zero-weight positions are only taken once every
// positive-weight position is, lowest index first.
inline SampleMask sample_mask(std::span<const double> s, std::size_t n, double gamma, std::size_t channels,
                              std::uint64_t seed) {
  if (s.size() != n * n) throw InputError("sample_mask: S must be n x n");
  SampleMask m;
  m.channels = channels;
  m.n = n;
  m.s.assign(s.begin(), s.end());
  for (double v : s) {
    if (!(v >= 0) || !std::isfinite(v)) throw DomainError("sample_mask: S must be finite and >= 0");
    m.s_sum += v;
  }
  const std::size_t p = n * n;
  m.q.resize(p);
  if (m.s_sum > 0) {
    for (std::size_t k = 0; k < p; ++k) m.q[k] = s[k] / m.s_sum;
  } else {
    m.uniform_fallback = true;
    std::fill(m.q.begin(), m.q.end(), 1.0 / static_cast<double>(p));
  }
  m.per_channel = std::min(sample_count(n, gamma), p);
  m.full = m.per_channel == p;
  m.b.assign(channels * p, 0);
  m.active.resize(channels);
  const Rng root(seed);
  std::vector<std::pair<double, std::uint32_t>> keys(p);
  for (std::size_t c = 0; c < channels; ++c) {
    auto& act = m.active[c];
    if (m.full) {
      act.resize(p);
      std::iota(act.begin(), act.end(), std::uint32_t{0});
    } else {
      Rng rng = root.split(c);
      for (std::size_t k = 0; k < p; ++k) {
        const double u = rng.uniform01();
        const double key = m.q[k] > 0 ? std::log(std::max(u, 1e-300)) / m.q[k] : -std::numeric_limits<double>::infinity();
        keys[k] = {key, static_cast<std::uint32_t>(k)};
      }
      std::partial_sort(keys.begin(), keys.begin() + static_cast<std::ptrdiff_t>(m.per_channel), keys.end(),
                        [](const auto& x, const auto& y) { return x.first != y.first ? x.first > y.first : x.second < y.second; });
      act.resize(m.per_channel);
      for (std::size_t t = 0; t < m.per_channel; ++t) act[t] = keys[t].second;
      std::sort(act.begin(), act.end());
    }
    for (auto k : act) m.b[c * p + k] = 1;
  }
  return m;
}

// Straight-through gradient into the sampling weights:
// dL/dS_ij = (1/sum S) * sum_{c,t,k} dL/dB_{c,t,k} (delta_{tk,ij} - q_ij).
inline std::vector<double> ste_backward(std::span<const double> dl_db, std::span<const double> s,
                                        std::span<const double> q) {
  const std::size_t p = s.size();
  if (q.size() != p || p == 0 || dl_db.size() % p != 0) throw InputError("ste_backward: shape mismatch");
  double s_sum = 0;
  for (double v : s) s_sum += v;
  if (!(s_sum > 0)) throw DomainError("ste_backward: sum of S is zero");
  const std::size_t ch = dl_db.size() / p;
  double total = 0;
  std::vector<double> per(p, 0.0);
  for (std::size_t c = 0; c < ch; ++c)
    for (std::size_t k = 0; k < p; ++k) {
      per[k] += dl_db[c * p + k];
      total += dl_db[c * p + k];
    }
  std::vector<double> out(p);
  for (std::size_t k = 0; k < p; ++k) out[k] = (per[k] - q[k] * total) / s_sum;
  return out;
}

namespace ops {

// Sampled update in the log domain: masked entries take the fresh solver
// score, the rest keep log of the previous internal representation. When
// `ste` is set, dL/dB = g * (fresh - prev) of this blend is routed
// into the sampling weights `s_var`.
template <typename T>
Var masked_log_blend(Tape<T>& tp, Var fresh, Var prev_log, Var s_var, std::shared_ptr<const SampleMask> mask,
                     bool ste) {
  const auto& fv = tp.value(fresh);
  const auto& pv = tp.value(prev_log);
  if (fv.size() != mask->b.size() || pv.size() != fv.size()) throw InputError("masked_log_blend: shape mismatch");
  std::vector<T> y(fv.size());
  for (std::size_t k = 0; k < y.size(); ++k) y[k] = mask->b[k] ? fv[k] : pv[k];
  const bool route = ste && !mask->uniform_fallback && tp.needs_grad(s_var);
  Var out{static_cast<std::uint32_t>(tp.node_count())};
  return tp.push(std::move(y), tp.any_grad({fresh, prev_log}) || route, [&tp, fresh, prev_log, s_var, mask, route, out] {
    const auto go = tp.g(out);
    T* gf = tp.acc(fresh);
    T* gp = tp.acc(prev_log);
    for (std::size_t k = 0; k < go.size(); ++k) {
      if (mask->b[k]) {
        if (gf) gf[k] += go[k];
      } else if (gp) {
        gp[k] += go[k];
      }
    }
    if (!route) return;
    const auto fv = tp.val(fresh);
    const auto pv = tp.val(prev_log);
    std::vector<double> db(go.size());
    for (std::size_t k = 0; k < go.size(); ++k)
      db[k] = static_cast<double>(go[k]) * (static_cast<double>(fv[k]) - static_cast<double>(pv[k]));
    const auto ds = ste_backward(db, mask->s, mask->q);
    T* gs = tp.acc(s_var);
    for (std::size_t k = 0; k < ds.size(); ++k) gs[k] += static_cast<T>(ds[k]);
  });
}

}  // namespace ops
}  // namespace eqan
