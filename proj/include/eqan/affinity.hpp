#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <tuple>
#include <vector>

#include "eqan/errors.hpp"
#include "eqan/graph.hpp"
#include "eqan/matrix.hpp"
#include "eqan/tensor.hpp"

namespace eqan {

enum class UnaryMode { PaperNorm, Gaussian };

inline std::string to_string(UnaryMode m) { return m == UnaryMode::Gaussian ? "gaussian" : "paper-norm"; }

inline UnaryMode parse_unary_mode(const std::string& s) {
  if (s == "gaussian") return UnaryMode::Gaussian;
  if (s == "paper-norm") return UnaryMode::PaperNorm;
  throw ConfigError("unknown unary mode '" + s + "' (expected gaussian or paper-norm)");
}

// One stored pairwise entry ((i,i'),(j,j')) with i < i'. Its mirror
// ((i',i),(j',j)) carries the same weight and is not stored.
struct PairKey {
  std::uint32_t i = 0, ip = 0, j = 0, jp = 0;
  auto operator<=>(const PairKey&) const = default;
};

// Sparsity of the association graph: which (edge of G1) x (edge of G2)
// products exist, plus a gather index per association node a = i * n2 + j.
class AssociationPattern {
 public:
  static std::shared_ptr<const AssociationPattern> from_edges(std::size_t n1, std::size_t n2,
                                                              std::span<const Edge> e1,
                                                              std::span<const Edge> e2) {
    auto p = std::shared_ptr<AssociationPattern>(new AssociationPattern(n1, n2));
    p->keys_.reserve(e1.size() * e2.size() * 2);
    for (const auto& [i, ip] : e1) {
      if (ip >= n1) throw InputError("association pattern: G1 edge out of range");
      for (const auto& [j, jp] : e2) {
        if (jp >= n2) throw InputError("association pattern: G2 edge out of range");
        p->keys_.push_back({i, ip, j, jp});
        p->keys_.push_back({i, ip, jp, j});
      }
    }
    std::sort(p->keys_.begin(), p->keys_.end());
    p->keys_.erase(std::unique(p->keys_.begin(), p->keys_.end()), p->keys_.end());
    p->build_index();
    return p;
  }

  std::size_t n1() const noexcept { return n1_; }
  std::size_t n2() const noexcept { return n2_; }
  std::size_t nodes() const noexcept { return n1_ * n2_; }
  std::size_t stored() const noexcept { return keys_.size(); }
  std::span<const PairKey> keys() const noexcept { return keys_; }

  std::uint32_t node(std::size_t i, std::size_t j) const noexcept {
    return static_cast<std::uint32_t>(i * n2_ + j);
  }
  std::uint32_t head(std::size_t e) const noexcept { return node(keys_[e].i, keys_[e].j); }
  std::uint32_t tail(std::size_t e) const noexcept { return node(keys_[e].ip, keys_[e].jp); }

  // Gather lists: for node a, neighbours nbr[row_ptr[a]..row_ptr[a+1]) with
  // the stored entry each contribution reads its weight from.
  std::span<const std::uint32_t> row_ptr() const noexcept { return row_ptr_; }
  std::span<const std::uint32_t> neighbors() const noexcept { return nbr_; }
  std::span<const std::uint32_t> entries() const noexcept { return entry_; }

  std::size_t max_fanout() const noexcept {
    std::size_t m = 0;
    for (std::size_t a = 0; a < nodes(); ++a) m = std::max<std::size_t>(m, row_ptr_[a + 1] - row_ptr_[a]);
    return m;
  }

  // Stored index of ((i,i'),(j,j')) in either orientation, or npos.
  static constexpr std::size_t npos = static_cast<std::size_t>(-1);
  std::size_t find(std::uint32_t i, std::uint32_t ip, std::uint32_t j, std::uint32_t jp) const {
    if (i > ip) {
      std::swap(i, ip);
      std::swap(j, jp);
    }
    const PairKey key{i, ip, j, jp};
    auto it = std::lower_bound(keys_.begin(), keys_.end(), key);
    if (it == keys_.end() || *it != key) return npos;
    return static_cast<std::size_t>(it - keys_.begin());
  }

 private:
  AssociationPattern(std::size_t n1, std::size_t n2) : n1_(n1), n2_(n2) {}

  void build_index() {
    const std::size_t p = nodes();
    std::vector<std::uint32_t> count(p + 1, 0);
    for (std::size_t e = 0; e < keys_.size(); ++e) {
      ++count[head(e) + 1];
      ++count[tail(e) + 1];
    }
    for (std::size_t a = 0; a < p; ++a) count[a + 1] += count[a];
    row_ptr_ = count;
    nbr_.resize(2 * keys_.size());
    entry_.resize(2 * keys_.size());
    std::vector<std::uint32_t> fill(row_ptr_.begin(), row_ptr_.end() - 1);
    for (std::size_t e = 0; e < keys_.size(); ++e) {
      const auto a = head(e), b = tail(e);
      nbr_[fill[a]] = b;
      entry_[fill[a]++] = static_cast<std::uint32_t>(e);
      nbr_[fill[b]] = a;
      entry_[fill[b]++] = static_cast<std::uint32_t>(e);
    }
    for (std::size_t a = 0; a < p; ++a) {
      std::vector<std::pair<std::uint32_t, std::uint32_t>> row;
      for (auto k = row_ptr_[a]; k < row_ptr_[a + 1]; ++k) row.emplace_back(nbr_[k], entry_[k]);
      std::sort(row.begin(), row.end());
      for (std::size_t t = 0; t < row.size(); ++t) {
        nbr_[row_ptr_[a] + t] = row[t].first;
        entry_[row_ptr_[a] + t] = row[t].second;
      }
    }
  }

  std::size_t n1_, n2_;
  std::vector<PairKey> keys_;
  std::vector<std::uint32_t> row_ptr_, nbr_, entry_;
};

using PatternPtr = std::shared_ptr<const AssociationPattern>;

// Sparse affinity M: dense unary block [M]_{ii,jj} and pairwise entries on
// the association pattern.
template <typename T>
class AffinityMatrix {
 public:
  AffinityMatrix() = default;
  AffinityMatrix(PatternPtr pattern, Matrix<T> unary, std::vector<T> weights, T sigma_aff = T{1})
      : pattern_(std::move(pattern)), unary_(std::move(unary)), weights_(std::move(weights)), sigma_aff_(sigma_aff) {
    if (!pattern_) throw InputError("affinity: missing pattern");
    if (unary_.rows() != pattern_->n1() || unary_.cols() != pattern_->n2())
      throw InputError("affinity: unary block shape does not match pattern");
    if (weights_.size() != pattern_->stored()) throw InputError("affinity: weight count does not match pattern");
  }

  std::size_t n1() const noexcept { return pattern_->n1(); }
  std::size_t n2() const noexcept { return pattern_->n2(); }
  std::size_t nodes() const noexcept { return pattern_->nodes(); }
  bool square() const noexcept { return n1() == n2(); }
  T sigma_aff() const noexcept { return sigma_aff_; }

  const AssociationPattern& pattern() const noexcept { return *pattern_; }
  const PatternPtr& pattern_ptr() const noexcept { return pattern_; }
  const Matrix<T>& unary() const noexcept { return unary_; }
  std::span<const T> weights() const noexcept { return weights_; }

  // [M]_{ii',jj'} for any orientation; 0 where structurally absent.
  T pairwise(std::uint32_t i, std::uint32_t ip, std::uint32_t j, std::uint32_t jp) const {
    const auto e = pattern_->find(i, ip, j, jp);
    return e == AssociationPattern::npos ? T{0} : weights_[e];
  }

  // Dense entry M[a][b] with a = i*n2+j, b = i'*n2+j'.
  T dense(std::size_t a, std::size_t b) const {
    const std::size_t i = a / n2(), j = a % n2(), ip = b / n2(), jp = b % n2();
    if (a == b) return unary_(i, j);
    if (i == ip || j == jp) return T{0};
    return pairwise(static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(ip),
                    static_cast<std::uint32_t>(j), static_cast<std::uint32_t>(jp));
  }

  void validate() const {
    for (T w : weights_)
      if (!(w > T{0}) || !std::isfinite(static_cast<double>(w)))
        throw DomainError("affinity: stored pairwise weights must be finite and > 0");
    for (T u : unary_.flat())
      if (!std::isfinite(static_cast<double>(u))) throw DomainError("affinity: non-finite unary entry");
  }

 private:
  PatternPtr pattern_;
  Matrix<T> unary_;
  std::vector<T> weights_;
  T sigma_aff_ = T{1};
};

namespace kernels {

// out = unary .* z + pairwise gather, for the association nodes in `rows`
// (all nodes when rows is empty).
template <typename T>
void assoc_matvec(const AssociationPattern& p, std::span<const T> unary, std::span<const T> weights,
                  std::span<const T> z, std::span<T> out) {
  const auto rp = p.row_ptr();
  const auto nb = p.neighbors();
  const auto en = p.entries();
  for (std::size_t a = 0; a < p.nodes(); ++a) {
    T acc = unary[a] * z[a];
    for (auto k = rp[a]; k < rp[a + 1]; ++k) acc += weights[en[k]] * z[nb[k]];
    out[a] = acc;
  }
}

template <typename T>
T assoc_matvec_row(const AssociationPattern& p, std::span<const T> unary, std::span<const T> weights,
                   std::span<const T> z, std::size_t a) {
  const auto rp = p.row_ptr();
  const auto nb = p.neighbors();
  const auto en = p.entries();
  T acc = unary[a] * z[a];
  for (auto k = rp[a]; k < rp[a + 1]; ++k) acc += weights[en[k]] * z[nb[k]];
  return acc;
}

}  // namespace kernels

template <typename T>
std::vector<T> affinity_matvec(const AffinityMatrix<T>& m, std::span<const T> z) {
  if (z.size() != m.nodes()) throw InputError("affinity_matvec: vector length does not match n1*n2");
  std::vector<T> out(z.size());
  kernels::assoc_matvec<T>(m.pattern(), m.unary().flat(), m.weights(), z, out);
  return out;
}

// Everything about a graph pair the affinity depends on except the bandwidth.
// Rows/cols past real1/real2 are padding and get zero unary affinity.
struct AffinityGeometry {
  PatternPtr pattern;
  Matrix<double> unary_dist;     // ||F1_i - F2_j||
  Matrix<double> unary_sqdist;   // ||F1_i - F2_j||^2
  std::vector<double> length_gap;  // d1_{ii'} - d2_{jj'} per stored entry
  std::size_t real1 = 0, real2 = 0;

  bool real(std::size_t i, std::size_t j) const noexcept { return i < real1 && j < real2; }
};

inline AffinityGeometry make_geometry(const Matrix<double>& f1, const Matrix<double>& f2, const Graph& g1,
                                      const Graph& g2, std::size_t real1, std::size_t real2) {
  if (f1.cols() != f2.cols()) throw InputError("affinity: feature dimensions differ");
  if (f1.rows() != g1.size() || f2.rows() != g2.size()) throw InputError("affinity: feature rows != graph size");
  for (double x : f1.flat())
    if (!std::isfinite(x)) throw InputError("affinity: non-finite feature in F1");
  for (double x : f2.flat())
    if (!std::isfinite(x)) throw InputError("affinity: non-finite feature in F2");
  AffinityGeometry geo;
  geo.pattern = AssociationPattern::from_edges(f1.rows(), f2.rows(), g1.edges, g2.edges);
  geo.real1 = real1;
  geo.real2 = real2;
  geo.unary_dist = Matrix<double>(f1.rows(), f2.rows());
  geo.unary_sqdist = Matrix<double>(f1.rows(), f2.rows());
  for (std::size_t i = 0; i < f1.rows(); ++i)
    for (std::size_t j = 0; j < f2.rows(); ++j) {
      const double sq = detail::squared_distance(f1.row(i), f2.row(j));
      geo.unary_sqdist(i, j) = sq;
      geo.unary_dist(i, j) = std::sqrt(sq);
    }
  const auto keys = geo.pattern->keys();
  geo.length_gap.resize(keys.size());
  for (std::size_t e = 0; e < keys.size(); ++e) {
    const double d1 = std::sqrt(detail::squared_distance(f1.row(keys[e].i), f1.row(keys[e].ip)));
    const double d2 = std::sqrt(detail::squared_distance(f2.row(keys[e].j), f2.row(keys[e].jp)));
    geo.length_gap[e] = d1 - d2;
  }
  return geo;
}

namespace kernels {

template <typename T>
T edge_kernel(double gap, T sigma) {
  return std::exp(-static_cast<T>(gap * gap) / (sigma * sigma));
}

template <typename T>
T unary_value(const AffinityGeometry& geo, std::size_t i, std::size_t j, T sigma, UnaryMode mode) {
  if (!geo.real(i, j)) return T{0};
  if (mode == UnaryMode::PaperNorm) return static_cast<T>(geo.unary_dist(i, j));
  return std::exp(-static_cast<T>(geo.unary_sqdist(i, j)) / (sigma * sigma));
}

}  // namespace kernels

template <typename T>
AffinityMatrix<T> evaluate_affinity(const AffinityGeometry& geo, T sigma, UnaryMode mode) {
  if (!(sigma > T{0})) throw InputError("affinity: sigma_aff must be > 0");
  Matrix<T> unary(geo.pattern->n1(), geo.pattern->n2());
  for (std::size_t i = 0; i < unary.rows(); ++i)
    for (std::size_t j = 0; j < unary.cols(); ++j) unary(i, j) = kernels::unary_value<T>(geo, i, j, sigma, mode);
  std::vector<T> w(geo.length_gap.size());
  for (std::size_t e = 0; e < w.size(); ++e) w[e] = kernels::edge_kernel<T>(geo.length_gap[e], sigma);
  return AffinityMatrix<T>(geo.pattern, std::move(unary), std::move(w), sigma);
}

// Affinity from node features: pairwise exp(-|d1 - d2|^2 / sigma^2) on every
// edge product, unary per `mode`.
template <typename T = double>
AffinityMatrix<T> build_affinity(const Matrix<double>& f1, const Matrix<double>& f2, const Graph& g1,
                                 const Graph& g2, T sigma_aff, UnaryMode mode) {
  return evaluate_affinity<T>(make_geometry(f1, f2, g1, g2, f1.rows(), f2.rows()), sigma_aff, mode);
}

template <typename A>
std::vector<Edge> edges_from_adjacency(const Matrix<A>& adj, const char* name) {
  if (adj.rows() != adj.cols()) throw InputError(std::string(name) + ": adjacency must be square");
  std::vector<Edge> edges;
  for (std::size_t i = 0; i < adj.rows(); ++i) {
    if (adj(i, i) != A{0}) throw InputError(std::string(name) + ": self-loops are not allowed");
    for (std::size_t j = 0; j < adj.cols(); ++j) {
      if (adj(i, j) != adj(j, i)) throw InputError(std::string(name) + ": adjacency is not symmetric");
      if (adj(i, j) != A{0} && adj(i, j) != A{1}) throw InputError(std::string(name) + ": adjacency must be 0/1");
      if (j > i && adj(i, j) == A{1})
        edges.push_back({static_cast<std::uint32_t>(i), static_cast<std::uint32_t>(j)});
    }
  }
  return edges;
}

// M = A1 (x) A2 with a zero unary block.
template <typename T = double, typename A>
AffinityMatrix<T> koopman_beckmann(const Matrix<A>& a1, const Matrix<A>& a2) {
  const auto e1 = edges_from_adjacency(a1, "koopman_beckmann A1");
  const auto e2 = edges_from_adjacency(a2, "koopman_beckmann A2");
  auto pattern = AssociationPattern::from_edges(a1.rows(), a2.rows(), e1, e2);
  std::vector<T> w(pattern->stored(), T{1});
  return AffinityMatrix<T>(pattern, Matrix<T>(a1.rows(), a2.rows()), std::move(w));
}

namespace kernels {

template <typename T>
T updated_pairwise(std::span<const T> v, std::size_t plane, std::span<const T> w, std::uint32_t a, std::uint32_t b) {
  T s = T{0};
  for (std::size_t c = 0; c < w.size(); ++c) {
    const T d = v[c * plane + a] - v[c * plane + b];
    s += w[c] * d * d;
  }
  return std::exp(-s);
}

template <typename T>
T updated_unary(std::span<const T> v, std::size_t plane, std::span<const T> u, std::size_t a) {
  T s = T{0};
  for (std::size_t c = 0; c < u.size(); ++c) s += u[c] * v[c * plane + a];
  return std::exp(s);
}

}  // namespace kernels

// Affinity recomputed from association-node features on the edge-product
// pattern of (G1, G2).
template <typename T>
AffinityMatrix<T> update_affinity(const FeatureTensor<T>& v, std::span<const T> w, std::span<const T> u,
                                  const Graph& g1, const Graph& g2) {
  if (v.n1 != g1.size() || v.n2 != g2.size()) throw InputError("update_affinity: tensor shape does not match graphs");
  if (w.size() != v.channels || u.size() != v.channels)
    throw InputError("update_affinity: weight vectors must have one entry per channel");
  auto pattern = AssociationPattern::from_edges(v.n1, v.n2, g1.edges, g2.edges);
  std::vector<T> weights(pattern->stored());
  for (std::size_t e = 0; e < weights.size(); ++e)
    weights[e] = kernels::updated_pairwise<T>(v.data, v.plane(), w, pattern->head(e), pattern->tail(e));
  Matrix<T> unary(v.n1, v.n2);
  for (std::size_t a = 0; a < v.plane(); ++a) unary.flat()[a] = kernels::updated_unary<T>(v.data, v.plane(), u, a);
  return AffinityMatrix<T>(pattern, std::move(unary), std::move(weights));
}

// Dummy rows/columns with zero unary and no edges up to a square size.
template <typename T>
AffinityMatrix<T> pad_square(const AffinityMatrix<T>& m) {
  const std::size_t n = std::max(m.n1(), m.n2());
  if (m.square()) return m;
  std::vector<Edge> e1, e2;
  std::vector<PairKey> keys(m.pattern().keys().begin(), m.pattern().keys().end());
  for (const auto& k : keys) {
    e1.push_back({k.i, k.ip});
    e2.push_back({std::min(k.j, k.jp), std::max(k.j, k.jp)});
  }
  e1 = detail::canonical_edges(std::move(e1));
  e2 = detail::canonical_edges(std::move(e2));
  auto pattern = AssociationPattern::from_edges(n, n, e1, e2);
  std::vector<T> w(pattern->stored(), T{0});
  for (std::size_t e = 0; e < w.size(); ++e) {
    const auto& k = pattern->keys()[e];
    w[e] = m.pairwise(k.i, k.ip, k.j, k.jp);
  }
  Matrix<T> unary(n, n);
  for (std::size_t i = 0; i < m.n1(); ++i)
    for (std::size_t j = 0; j < m.n2(); ++j) unary(i, j) = m.unary()(i, j);
  return AffinityMatrix<T>(pattern, std::move(unary), std::move(w), m.sigma_aff());
}

// Sparse triplet dump "row col value" over the dense n1*n2 x n1*n2 matrix,
// both orientations of every pairwise entry.
template <typename T>
void write_triplets(std::ostream& os, const AffinityMatrix<T>& m) {
  std::vector<std::tuple<std::size_t, std::size_t, T>> rows;
  for (std::size_t a = 0; a < m.nodes(); ++a)
    if (m.unary().flat()[a] != T{0}) rows.emplace_back(a, a, m.unary().flat()[a]);
  for (std::size_t e = 0; e < m.pattern().stored(); ++e) {
    rows.emplace_back(m.pattern().head(e), m.pattern().tail(e), m.weights()[e]);
    rows.emplace_back(m.pattern().tail(e), m.pattern().head(e), m.weights()[e]);
  }
  std::sort(rows.begin(), rows.end(), [](const auto& x, const auto& y) {
    return std::tie(std::get<0>(x), std::get<1>(x)) < std::tie(std::get<0>(y), std::get<1>(y));
  });
  os << "# n1 " << m.n1() << " n2 " << m.n2() << " entries " << rows.size() << '\n';
  os.precision(17);
  for (const auto& [r, c, v] : rows) os << r << ' ' << c << ' ' << v << '\n';
}

}  // namespace eqan
