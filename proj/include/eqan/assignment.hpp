#pragma once

#include <algorithm>
#include <cmath>
#include <limits>
#include <span>
#include <vector>

#include "eqan/errors.hpp"
#include "eqan/matrix.hpp"

namespace eqan {

using Permutation = std::vector<std::size_t>;

namespace detail {

// Classical O(n^3) shortest augmenting path on a cost matrix (minimization).
// Returns row->col assignment plus the optimal dual potentials.
struct LapSolution {
  std::vector<std::size_t> row_to_col;
  std::vector<double> u, v;
};

inline LapSolution solve_lap(const Matrix<double>& cost) {
  const std::size_t n = cost.rows();
  const double inf = std::numeric_limits<double>::infinity();
  std::vector<double> u(n + 1, 0.0), v(n + 1, 0.0);
  std::vector<std::size_t> p(n + 1, 0), way(n + 1, 0);
  for (std::size_t i = 1; i <= n; ++i) {
    p[0] = i;
    std::size_t j0 = 0;
    std::vector<double> minv(n + 1, inf);
    std::vector<char> used(n + 1, 0);
    do {
      used[j0] = 1;
      const std::size_t i0 = p[j0];
      double delta = inf;
      std::size_t j1 = 0;
      for (std::size_t j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (std::size_t j = 0; j <= n; ++j) {
        if (used[j]) {
          u[p[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (p[j0] != 0);
    do {
      const std::size_t j1 = way[j0];
      p[j0] = p[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  LapSolution s;
  s.row_to_col.assign(n, 0);
  for (std::size_t j = 1; j <= n; ++j) s.row_to_col[p[j] - 1] = j - 1;
  s.u.assign(u.begin() + 1, u.end());
  s.v.assign(v.begin() + 1, v.end());
  return s;
}

// Alternating-path search in the tight-edge graph: can row r be rematched so
// that column `target` ends up free? Only rows > `fixed_upto` may move.
inline bool reroute(std::size_t r, std::size_t target, const std::vector<std::vector<char>>& tight,
                    std::vector<std::size_t>& row_to_col, std::vector<std::size_t>& col_to_row,
                    std::vector<char>& seen, std::size_t fixed_upto) {
  const std::size_t n = row_to_col.size();
  for (std::size_t c = 0; c < n; ++c) {
    if (!tight[r][c] || seen[c] || c == row_to_col[r]) continue;
    const std::size_t owner = col_to_row[c];
    if (owner <= fixed_upto && owner != n) continue;
    seen[c] = 1;
    if (c == target || owner == n || reroute(owner, target, tight, row_to_col, col_to_row, seen, fixed_upto)) {
      col_to_row[c] = r;
      row_to_col[r] = c;
      return true;
    }
  }
  return false;
}

}  // namespace detail

// Maximum-score permutation; among optimal ones the lexicographically
// smallest (row 0's column first).
inline Permutation hungarian(const Matrix<double>& score) {
  if (score.rows() != score.cols()) throw InputError("hungarian: score matrix must be square");
  const std::size_t n = score.rows();
  if (n == 0) return {};
  double hi = -std::numeric_limits<double>::infinity(), scale = 1.0;
  for (double x : score.flat()) {
    if (!std::isfinite(x)) throw InputError("hungarian: non-finite score");
    hi = std::max(hi, x);
    scale = std::max(scale, std::abs(x));
  }
  Matrix<double> cost(n, n);
  for (std::size_t k = 0; k < cost.size(); ++k) cost.flat()[k] = hi - score.flat()[k];
  auto sol = detail::solve_lap(cost);

  const double tol = 1e-9 * scale * static_cast<double>(n);
  std::vector<std::vector<char>> tight(n, std::vector<char>(n, 0));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) tight[i][j] = cost(i, j) - sol.u[i] - sol.v[j] <= tol;

  auto& r2c = sol.row_to_col;
  std::vector<std::size_t> c2r(n);
  for (std::size_t i = 0; i < n; ++i) {
    tight[i][r2c[i]] = 1;
    c2r[r2c[i]] = i;
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < r2c[i]; ++j) {
      if (!tight[i][j] || c2r[j] < i) continue;
      // Move c2r[j] elsewhere, freeing j for row i and releasing i's column.
      const std::size_t owner = c2r[j];
      const std::size_t freed = r2c[i];
      auto r2c_try = r2c;
      auto c2r_try = c2r;
      c2r_try[freed] = n;
      c2r_try[j] = n;
      r2c_try[i] = j;
      std::vector<char> seen(n, 0);
      seen[j] = 1;
      if (detail::reroute(owner, freed, tight, r2c_try, c2r_try, seen, i)) {
        c2r_try[j] = i;
        r2c = std::move(r2c_try);
        c2r = std::move(c2r_try);
        break;
      }
    }
  }
  return r2c;
}

inline double assignment_score(const Matrix<double>& score, std::span<const std::size_t> perm) {
  double s = 0;
  for (std::size_t i = 0; i < perm.size(); ++i) s += score(i, perm[i]);
  return s;
}

// Fraction of ground-truth pairs recovered; gt[i] is the partner of row i.
inline double matching_accuracy(std::span<const std::size_t> pred, std::span<const std::size_t> gt) {
  if (gt.empty()) throw DomainError("matching_accuracy: empty ground truth");
  if (pred.size() < gt.size()) throw InputError("matching_accuracy: prediction shorter than ground truth");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < gt.size(); ++i) hit += pred[i] == gt[i];
  return static_cast<double>(hit) / static_cast<double>(gt.size());
}

// r = tr(Q R)
template <typename T>
T graph_similarity(const Matrix<T>& q, const Matrix<T>& r) {
  if (q.rows() != r.cols() || q.cols() != r.rows()) throw InputError("graph_similarity: shape mismatch");
  T s = T{0};
  for (std::size_t i = 0; i < q.rows(); ++i)
    for (std::size_t j = 0; j < q.cols(); ++j) s += q(i, j) * r(j, i);
  return s;
}

struct MatchResult {
  Permutation perm;
  Matrix<double> q;
  Matrix<double> r;
  double accuracy = 0;
};

}  // namespace eqan
