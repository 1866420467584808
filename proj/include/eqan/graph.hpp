#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "eqan/errors.hpp"
#include "eqan/matrix.hpp"
#include "eqan/rng.hpp"

namespace eqan {

struct Edge {
  std::uint32_t u = 0;
  std::uint32_t v = 0;  // u < v
  auto operator<=>(const Edge&) const = default;
};

// Node coordinates plus an undirected edge list. For generated reference
// graphs the first n_inliers rows are the inliers; shuffled query graphs only
// carry the count, the correspondence lives in the ground-truth vector.
struct Graph {
  Matrix<double> points;
  std::vector<Edge> edges;
  std::size_t n_inliers = 0;

  std::size_t size() const noexcept { return points.rows(); }
  std::size_t dim() const noexcept { return points.cols(); }

  void validate() const {
    if (n_inliers > size()) throw InputError("graph: n_inliers exceeds node count");
    for (std::size_t e = 0; e < edges.size(); ++e) {
      const auto& [u, v] = edges[e];
      if (u >= v) throw InputError("graph: edge " + std::to_string(e) + " is not stored as u < v");
      if (v >= size()) throw InputError("graph: edge " + std::to_string(e) + " references missing node");
    }
    for (std::size_t e = 1; e < edges.size(); ++e)
      if (!(edges[e - 1] < edges[e])) throw InputError("graph: edges not sorted/unique");
  }

  Matrix<std::uint8_t> adjacency() const {
    Matrix<std::uint8_t> a(size(), size(), 0);
    for (const auto& [u, v] : edges) a(u, v) = a(v, u) = 1;
    return a;
  }

  std::vector<std::size_t> degrees() const {
    std::vector<std::size_t> deg(size(), 0);
    for (const auto& [u, v] : edges) ++deg[u], ++deg[v];
    return deg;
  }
};

struct GenConfig {
  std::size_t n_in = 35;
  std::size_t n_out = 0;
  double sigma = 0.0;
  std::size_t dim = 2;
  std::size_t k = 5;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_in == 0) throw ConfigError("gen: n_in must be positive");
    if (!(sigma >= 0.0) || !std::isfinite(sigma)) throw ConfigError("gen: sigma must be >= 0");
    if (dim != 2 && dim != 3) throw ConfigError("gen: dim must be 2 or 3");
    if (k < 1) throw ConfigError("gen: k must be >= 1");
    if (n_in + n_out > 1 && k >= n_in + n_out) throw ConfigError("gen: k must be < n_in + n_out");
  }
};

struct PerturbOptions {
  bool shuffle = true;
  // false: the query keeps the reference topology on its inliers and only the
  // outliers are attached through k-NN. true: all edges rebuilt by k-NN on the
  // perturbed coordinates.
  bool rebuild_edges = false;
};

struct PerturbResult {
  Graph query;
  std::vector<std::size_t> gt;  // gt[i] = query index of reference inlier i
};

namespace detail {

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t c = 0; c < a.size(); ++c) {
    const double d = a[c] - b[c];
    s += d * d;
  }
  return s;
}

// Indices of the k nearest other nodes of `node` among `candidates`, ordered by
// (distance, index).
inline std::vector<std::uint32_t> nearest(const Matrix<double>& points, std::size_t node,
                                          std::size_t k) {
  std::vector<std::pair<double, std::uint32_t>> order;
  order.reserve(points.rows());
  for (std::size_t j = 0; j < points.rows(); ++j)
    if (j != node)
      order.emplace_back(squared_distance(points.row(node), points.row(j)), static_cast<std::uint32_t>(j));
  const std::size_t take = std::min(k, order.size());
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(take), order.end());
  std::vector<std::uint32_t> out(take);
  for (std::size_t t = 0; t < take; ++t) out[t] = order[t].second;
  return out;
}

inline std::vector<Edge> canonical_edges(std::vector<Edge> edges) {
  for (auto& e : edges)
    if (e.u > e.v) std::swap(e.u, e.v);
  std::sort(edges.begin(), edges.end());
  edges.erase(std::unique(edges.begin(), edges.end()), edges.end());
  return edges;
}

}  // namespace detail

// Symmetrized k-nearest-neighbour edges; distance ties go to the lower index.
inline std::vector<Edge> knn_edges(const Matrix<double>& points, std::size_t k) {
  if (points.rows() <= k) throw ConfigError("knn_edges: need more than k nodes");
  if (k == 0) throw ConfigError("knn_edges: k must be >= 1");
  std::vector<Edge> edges;
  edges.reserve(points.rows() * k);
  for (std::size_t i = 0; i < points.rows(); ++i)
    for (auto j : detail::nearest(points, i, k)) edges.push_back({static_cast<std::uint32_t>(i), j});
  return detail::canonical_edges(std::move(edges));
}

// k-NN with k clamped to n - 1, so that tiny graphs stay legal.
inline std::vector<Edge> knn_edges_clamped(const Matrix<double>& points, std::size_t k) {
  if (points.rows() <= 1) return {};
  return knn_edges(points, std::min(k, points.rows() - 1));
}

inline Graph generate_reference(const GenConfig& cfg) {
  cfg.validate();
  Rng rng = Rng(cfg.seed).split(0);
  Graph g;
  g.points = Matrix<double>(cfg.n_in, cfg.dim);
  for (double& x : g.points.flat()) x = rng.uniform(-1.0, 1.0);
  g.edges = knn_edges_clamped(g.points, cfg.k);
  g.n_inliers = cfg.n_in;
  return g;
}

inline PerturbResult perturb(const Graph& ref, const GenConfig& cfg, PerturbOptions opts = {}) {
  cfg.validate();
  if (ref.dim() != cfg.dim) throw ConfigError("perturb: reference dimension differs from config");
  Rng rng = Rng(cfg.seed).split(1);
  const std::size_t n_in = ref.n_inliers;
  const std::size_t n = n_in + cfg.n_out;
  const std::size_t d = cfg.dim;

  Matrix<double> staged(n, d);
  for (std::size_t i = 0; i < n_in; ++i)
    for (std::size_t c = 0; c < d; ++c)
      staged(i, c) = ref.points(i, c) + (cfg.sigma > 0.0 ? rng.normal(0.0, cfg.sigma) : 0.0);
  for (std::size_t i = n_in; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) staged(i, c) = rng.uniform(-1.0, 1.0);

  std::vector<std::size_t> pos(n);
  if (opts.shuffle) {
    pos = rng.permutation(n);
  } else {
    std::iota(pos.begin(), pos.end(), std::size_t{0});
  }

  PerturbResult out;
  out.query.points = Matrix<double>(n, d);
  for (std::size_t o = 0; o < n; ++o)
    for (std::size_t c = 0; c < d; ++c) out.query.points(pos[o], c) = staged(o, c);
  out.query.n_inliers = n_in;

  if (opts.rebuild_edges) {
    out.query.edges = knn_edges_clamped(out.query.points, cfg.k);
  } else {
    std::vector<Edge> edges;
    for (const auto& [u, v] : ref.edges)
      if (u < n_in && v < n_in)
        edges.push_back({static_cast<std::uint32_t>(pos[u]), static_cast<std::uint32_t>(pos[v])});
    if (n > 1) {
      const std::size_t k = std::min(cfg.k, n - 1);
      for (std::size_t o = n_in; o < n; ++o)
        for (auto j : detail::nearest(out.query.points, pos[o], k))
          edges.push_back({static_cast<std::uint32_t>(pos[o]), j});
    }
    out.query.edges = detail::canonical_edges(std::move(edges));
  }

  out.gt.assign(pos.begin(), pos.begin() + static_cast<std::ptrdiff_t>(n_in));
  return out;
}

inline Graph rotate(const Graph& g, double theta) {
  if (g.dim() != 2) throw UnsupportedError("rotate: only 2-dimensional graphs are supported");
  Graph out = g;
  const double c = std::cos(theta), s = std::sin(theta);
  for (std::size_t i = 0; i < g.size(); ++i) {
    const double x = g.points(i, 0), y = g.points(i, 1);
    out.points(i, 0) = c * x - s * y;
    out.points(i, 1) = s * x + c * y;
  }
  return out;
}

// Zero mean and unit isotropic variance. A single scale for all axes keeps
// pairwise distances rotation invariant.
inline Matrix<double> standardize(const Matrix<double>& points) {
  const std::size_t n = points.rows(), d = points.cols();
  Matrix<double> out = points;
  if (n == 0) return out;
  std::vector<double> mean(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) mean[c] += points(i, c);
  for (double& m : mean) m /= static_cast<double>(n);
  double var = 0.0;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t c = 0; c < d; ++c) {
      out(i, c) -= mean[c];
      var += out(i, c) * out(i, c);
    }
  var /= static_cast<double>(n * d);
  const double scale = var > 0.0 ? 1.0 / std::sqrt(var) : 1.0;
  for (double& x : out.flat()) x *= scale;
  return out;
}

inline nlohmann::json to_json(const Graph& g) {
  nlohmann::json pts = nlohmann::json::array();
  for (std::size_t i = 0; i < g.size(); ++i) {
    auto r = g.points.row(i);
    pts.push_back(std::vector<double>(r.begin(), r.end()));
  }
  nlohmann::json edges = nlohmann::json::array();
  for (const auto& [u, v] : g.edges) edges.push_back({u, v});
  return {{"points", std::move(pts)}, {"edges", std::move(edges)}, {"n_inliers", g.n_inliers}};
}

inline Graph graph_from_json(const nlohmann::json& j) {
  try {
    Graph g;
    const auto& pts = j.at("points");
    const std::size_t n = pts.size();
    const std::size_t d = n ? pts.at(0).size() : 0;
    g.points = Matrix<double>(n, d);
    for (std::size_t i = 0; i < n; ++i) {
      if (pts[i].size() != d) throw InputError("graph json: ragged points array");
      for (std::size_t c = 0; c < d; ++c) g.points(i, c) = pts[i][c].get<double>();
    }
    for (const auto& e : j.at("edges")) {
      if (e.size() != 2) throw InputError("graph json: edge must have two endpoints");
      g.edges.push_back({e[0].get<std::uint32_t>(), e[1].get<std::uint32_t>()});
    }
    g.n_inliers = j.value("n_inliers", n);
    g.validate();
    return g;
  } catch (const nlohmann::json::exception& ex) {
    throw InputError(std::string("graph json: ") + ex.what());
  }
}

}  // namespace eqan
