#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <string>
#include <vector>

#include "eqan/affinity.hpp"
#include "eqan/errors.hpp"
#include "eqan/matrix.hpp"

namespace eqan {

inline constexpr double kSinkhornFloor = 1e-30;
inline constexpr double kLogEps = 1e-5;

enum class SolverKind { DPGM, GAGM, SM };

inline std::string to_string(SolverKind k) {
  switch (k) {
    case SolverKind::GAGM: return "gagm";
    case SolverKind::SM: return "sm";
    default: return "dpgm";
  }
}

inline SolverKind parse_solver(const std::string& s) {
  if (s == "dpgm") return SolverKind::DPGM;
  if (s == "gagm") return SolverKind::GAGM;
  if (s == "sm") return SolverKind::SM;
  throw ConfigError("unknown solver '" + s + "' (expected dpgm, gagm or sm)");
}

struct SolverParams {
  double w_p = 0.5;
  double w_z = 0.5;
  double beta_anneal = 0.5;
  int max_iter = 10;
  int sinkhorn_T = 5;

  static SolverParams from_beta_lambda(double beta, double lambda, int max_iter = 10, int sinkhorn_T = 5) {
    if (!(beta > 0) || !(lambda > 0)) throw ConfigError("solver: beta and lambda must be > 0");
    SolverParams p;
    p.w_p = beta / (1.0 + lambda * beta);
    p.w_z = 1.0 / (1.0 + lambda * beta);
    p.max_iter = max_iter;
    p.sinkhorn_T = sinkhorn_T;
    return p;
  }

  void validate() const {
    if (!(w_p > 0) || !(w_z > 0)) throw ConfigError("solver: w_p and w_z must be > 0");
    if (!(beta_anneal > 0)) throw ConfigError("solver: beta_anneal must be > 0");
    if (max_iter < 0) throw ConfigError("solver: max_iter must be >= 0");
    if (sinkhorn_T < 1) throw ConfigError("solver: sinkhorn_T must be >= 1");
  }
};

namespace kernels {

template <typename T>
void row_normalize(std::span<T> x, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    T* r = x.data() + i * cols;
    T s = T{0};
    for (std::size_t j = 0; j < cols; ++j) s += r[j];
    const T inv = T{1} / std::max(s, static_cast<T>(kSinkhornFloor));
    for (std::size_t j = 0; j < cols; ++j) r[j] *= inv;
  }
}

template <typename T>
void col_normalize(std::span<T> x, std::size_t rows, std::size_t cols) {
  std::vector<T> s(cols, T{0});
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) s[j] += x[i * cols + j];
  for (auto& v : s) v = T{1} / std::max(v, static_cast<T>(kSinkhornFloor));
  for (std::size_t i = 0; i < rows; ++i)
    for (std::size_t j = 0; j < cols; ++j) x[i * cols + j] *= s[j];
}

// exp(s) followed by a row normalization, computed as a shifted softmax so
// large scores do not overflow.
template <typename T>
void row_softmax(std::span<const T> s, std::span<T> out, std::size_t rows, std::size_t cols) {
  for (std::size_t i = 0; i < rows; ++i) {
    const T* r = s.data() + i * cols;
    T* o = out.data() + i * cols;
    T mx = r[0];
    for (std::size_t j = 1; j < cols; ++j) mx = std::max(mx, r[j]);
    T sum = T{0};
    for (std::size_t j = 0; j < cols; ++j) sum += (o[j] = std::exp(r[j] - mx));
    const T inv = T{1} / std::max(sum, static_cast<T>(kSinkhornFloor));
    for (std::size_t j = 0; j < cols; ++j) o[j] *= inv;
  }
}

// Sinkhorn(exp(s)) for T rounds without materializing exp(s).
template <typename T>
void sinkhorn_from_log(std::span<const T> s, std::span<T> out, std::size_t rows, std::size_t cols, int rounds) {
  row_softmax<T>(s, out, rows, cols);
  col_normalize<T>(out, rows, cols);
  for (int t = 1; t < rounds; ++t) {
    row_normalize<T>(out, rows, cols);
    col_normalize<T>(out, rows, cols);
  }
}

template <typename T>
void check_positive(std::span<const T> x, const char* what) {
  for (T v : x)
    if (!(v > T{0}) || !std::isfinite(static_cast<double>(v)))
      throw DomainError(std::string(what) + ": entries must be finite and > 0");
}

}  // namespace kernels

template <typename T>
Matrix<T> sinkhorn(Matrix<T> x, int rounds) {
  if (rounds < 1) throw ConfigError("sinkhorn: T must be >= 1");
  if (x.empty()) throw InputError("sinkhorn: empty matrix");
  kernels::check_positive<T>(x.flat(), "sinkhorn");
  for (int t = 0; t < rounds; ++t) {
    kernels::row_normalize<T>(x.flat(), x.rows(), x.cols());
    kernels::col_normalize<T>(x.flat(), x.rows(), x.cols());
  }
  return x;
}

template <typename T>
T max_stochastic_deviation(const Matrix<T>& x) {
  T dev = T{0};
  for (std::size_t i = 0; i < x.rows(); ++i) {
    T s = T{0};
    for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
    dev = std::max<T>(dev, std::abs(s - T{1}));
  }
  for (std::size_t j = 0; j < x.cols(); ++j) {
    T s = T{0};
    for (std::size_t i = 0; i < x.rows(); ++i) s += x(i, j);
    dev = std::max<T>(dev, std::abs(s - T{1}));
  }
  return dev;
}

// One proximal step: Sinkhorn(exp(w_p M z + w_z log z)).
template <typename T>
std::vector<T> dpgm_step(std::span<const T> z, const AffinityMatrix<T>& m, const SolverParams& p) {
  if (z.size() != m.nodes()) throw InputError("dpgm_step: z length does not match n1*n2");
  kernels::check_positive<T>(z, "dpgm_step");
  std::vector<T> s = affinity_matvec(m, z);
  const T wp = static_cast<T>(p.w_p), wz = static_cast<T>(p.w_z);
  for (std::size_t a = 0; a < s.size(); ++a) s[a] = wp * s[a] + wz * std::log(z[a]);
  std::vector<T> out(s.size());
  kernels::sinkhorn_from_log<T>(s, out, m.n1(), m.n2(), p.sinkhorn_T);
  return out;
}

template <typename T>
std::vector<T> uniform_assignment(const AffinityMatrix<T>& m, int rounds = 1) {
  Matrix<T> u(m.n1(), m.n2(), T{1});
  return sinkhorn(std::move(u), rounds).release();
}

template <typename T>
std::vector<T> dpgm_solve(const AffinityMatrix<T>& m, const SolverParams& p) {
  p.validate();
  std::vector<T> z = uniform_assignment(m, p.sinkhorn_T);
  for (int k = 0; k < p.max_iter; ++k) z = dpgm_step<T>(z, m, p);
  return z;
}

template <typename T>
std::vector<T> gagm_step(std::span<const T> x, const AffinityMatrix<T>& m, double beta, int rounds) {
  std::vector<T> s = affinity_matvec(m, x);
  for (auto& v : s) v *= static_cast<T>(beta);
  std::vector<T> out(s.size());
  kernels::sinkhorn_from_log<T>(s, out, m.n1(), m.n2(), rounds);
  return out;
}

inline std::vector<double> gagm_schedule(int k, double base = 0.5, double growth = 1.075) {
  std::vector<double> b(static_cast<std::size_t>(std::max(k, 0)));
  for (std::size_t l = 0; l < b.size(); ++l) b[l] = base * std::pow(growth, static_cast<double>(l));
  return b;
}

template <typename T>
std::vector<T> gagm_solve(const AffinityMatrix<T>& m, int k, std::span<const double> betas, int rounds = 5) {
  if (betas.size() != static_cast<std::size_t>(k)) throw ConfigError("gagm_solve: need exactly K betas");
  for (double b : betas)
    if (!(b > 0)) throw ConfigError("gagm_solve: betas must be > 0");
  std::vector<T> x = uniform_assignment(m);
  for (int t = 0; t < k; ++t) x = gagm_step<T>(x, m, betas[t], rounds);
  return x;
}

template <typename T>
std::vector<T> sm_step(std::span<const T> x, const AffinityMatrix<T>& m) {
  std::vector<T> y = affinity_matvec(m, x);
  T nrm = T{0};
  for (T v : y) nrm += v * v;
  nrm = std::sqrt(nrm);
  if (!(nrm > T{0})) throw DegenerateError("sm: affinity matvec vanished");
  for (auto& v : y) v /= nrm;
  return y;
}

template <typename T>
std::vector<T> sm_solve(const AffinityMatrix<T>& m, int k) {
  if (k < 0) throw ConfigError("sm_solve: K must be >= 0");
  std::vector<T> x(m.nodes(), T{1} / std::sqrt(static_cast<T>(m.nodes())));
  for (int t = 0; t < k; ++t) x = sm_step<T>(x, m);
  return x;
}

// Single solver step on one channel slice, with the eps shift that keeps log
// defined on zero entries.
template <typename T>
Matrix<T> qap_layer(const Matrix<T>& zc, const AffinityMatrix<T>& m, const SolverParams& p,
                    SolverKind kind = SolverKind::DPGM, double eps = kLogEps) {
  if (zc.rows() != m.n1() || zc.cols() != m.n2()) throw InputError("qap_layer: slice shape does not match M");
  std::vector<T> z(zc.flat().begin(), zc.flat().end());
  for (auto& v : z) v += static_cast<T>(eps);
  std::vector<T> out;
  switch (kind) {
    case SolverKind::DPGM: out = dpgm_step<T>(z, m, p); break;
    case SolverKind::GAGM: out = gagm_step<T>(z, m, p.beta_anneal, p.sinkhorn_T); break;
    case SolverKind::SM: out = sm_step<T>(z, m); break;
  }
  return Matrix<T>(m.n1(), m.n2(), std::move(out));
}

// Objective monitored by the convergence diagnostics. The quadratic term is
// halved so that w_p = beta/(1+lambda*beta) is its exact proximal step.
template <typename T>
T relaxed_objective(const AffinityMatrix<T>& m, std::span<const T> z, double lambda) {
  const auto mz = affinity_matvec(m, z);
  T quad = T{0}, ent = T{0};
  for (std::size_t a = 0; a < z.size(); ++a) {
    quad += z[a] * mz[a];
    if (z[a] > T{0}) ent += z[a] * std::log(z[a]);
  }
  return T{-0.5} * quad + static_cast<T>(lambda) * ent;
}

// Largest eigenvalue magnitude of the symmetric M by power iteration.
template <typename T>
T spectral_radius(const AffinityMatrix<T>& m, int iters = 500) {
  std::vector<T> x(m.nodes());
  for (std::size_t a = 0; a < x.size(); ++a) x[a] = T{1} + static_cast<T>(a % 7) * T{0.01};
  T lam = T{0};
  for (int t = 0; t < iters; ++t) {
    auto y = affinity_matvec(m, std::span<const T>(x));
    auto y2 = affinity_matvec(m, std::span<const T>(y));
    T num = T{0}, den = T{0};
    for (std::size_t a = 0; a < x.size(); ++a) {
      num += x[a] * y2[a];
      den += x[a] * x[a];
    }
    if (!(den > T{0})) return T{0};
    lam = std::sqrt(std::max(num / den, T{0}));
    T nrm = T{0};
    for (T v : y2) nrm += v * v;
    nrm = std::sqrt(nrm);
    if (!(nrm > T{0})) return T{0};
    for (std::size_t a = 0; a < x.size(); ++a) x[a] = y2[a] / nrm;
  }
  return lam;
}

struct ConvergenceRow {
  int iter = 0;
  double step_sq = 0;
  double objective = 0;
  double lemma_lhs = 0;  // (z+ - z)^T (log z+ - log z + 1)
  double lemma_rhs = 0;  // 0.5 ||z+ - z||^2
};

// DPGM iterates from the uniform start with per-step diagnostics.
template <typename T>
std::vector<ConvergenceRow> convergence_trace(const AffinityMatrix<T>& m, double beta, double lambda, int iters,
                                              int sinkhorn_T) {
  const auto p = SolverParams::from_beta_lambda(beta, lambda, iters, sinkhorn_T);
  std::vector<T> z = uniform_assignment(m, sinkhorn_T);
  std::vector<ConvergenceRow> rows;
  rows.reserve(static_cast<std::size_t>(iters) + 1);
  rows.push_back({0, 0.0, static_cast<double>(relaxed_objective<T>(m, z, lambda)), 0.0, 0.0});
  for (int t = 1; t <= iters; ++t) {
    auto next = dpgm_step<T>(z, m, p);
    ConvergenceRow r;
    r.iter = t;
    for (std::size_t a = 0; a < z.size(); ++a) {
      const double d = static_cast<double>(next[a] - z[a]);
      r.step_sq += d * d;
      r.lemma_lhs += d * (std::log(static_cast<double>(next[a])) - std::log(static_cast<double>(z[a])) + 1.0);
    }
    r.lemma_rhs = 0.5 * r.step_sq;
    r.objective = static_cast<double>(relaxed_objective<T>(m, next, lambda));
    rows.push_back(r);
    z = std::move(next);
  }
  return rows;
}

// Mean of ||z_{t+1} - z_t||^2 over the first `horizon` steps.
inline double running_mean_step(std::span<const ConvergenceRow> rows, int horizon) {
  double s = 0;
  int cnt = 0;
  for (const auto& r : rows)
    if (r.iter >= 1 && r.iter <= horizon) {
      s += r.step_sq;
      ++cnt;
    }
  return cnt ? s / cnt : 0.0;
}

}  // namespace eqan
