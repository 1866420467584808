#pragma once

#include <cmath>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "eqan/affinity.hpp"
#include "eqan/assignment.hpp"
#include "eqan/graph.hpp"
#include "eqan/model.hpp"
#include "eqan/rng.hpp"
#include "eqan/sampling.hpp"
#include "eqan/tape.hpp"

namespace eqan {

// One (reference, query) pair padded to a common size n, with everything the
// forward pass needs that does not depend on the parameters.
struct PairInput {
  std::size_t n = 0;
  std::size_t dim = 0;
  std::size_t real1 = 0, real2 = 0;
  Matrix<double> f1, f2;
  AffinityGeometry geo;
  std::shared_ptr<const std::vector<double>> pair_sq;   // gap^2 per stored entry
  std::shared_ptr<const std::vector<double>> unary_sq;  // ||F1_i - F2_j||^2
  std::shared_ptr<const std::vector<std::uint8_t>> real_mask;
  std::vector<double> unary_norm;  // masked ||F1_i - F2_j||
  std::vector<double> vhat;        // 3d x n x n: |F1_i - F2_j|, F1_i, F2_j
  std::vector<std::size_t> gt;     // reference row -> query column

  std::size_t plane() const noexcept { return n * n; }
};

inline Graph pad_graph(const Graph& g, std::size_t n) {
  Graph p = g;
  p.points = Matrix<double>(n, g.dim());
  for (std::size_t i = 0; i < g.size(); ++i)
    for (std::size_t k = 0; k < g.dim(); ++k) p.points(i, k) = g.points(i, k);
  return p;
}

// Isotropically standardized coordinates as node features; the smaller graph
// is padded with zero-feature, edge-free dummy nodes.
inline PairInput prepare_pair(const Graph& ref, const Graph& query, std::span<const std::size_t> gt,
                              bool standardize_features = true) {
  if (ref.size() == 0 || query.size() == 0) throw InputError("prepare_pair: graphs must be nonempty");
  if (ref.dim() != query.dim()) throw InputError("prepare_pair: graphs have different dimensions");
  ref.validate();
  query.validate();
  if (gt.size() > ref.size()) throw InputError("prepare_pair: ground truth longer than reference");
  for (auto j : gt)
    if (j >= query.size()) throw InputError("prepare_pair: ground truth index out of range");
  PairInput in;
  in.n = std::max(ref.size(), query.size());
  in.dim = ref.dim();
  in.real1 = ref.size();
  in.real2 = query.size();
  Graph g1 = ref, g2 = query;
  if (standardize_features) {
    g1.points = standardize(ref.points);
    g2.points = standardize(query.points);
  }
  g1 = pad_graph(g1, in.n);
  g2 = pad_graph(g2, in.n);
  in.f1 = g1.points;
  in.f2 = g2.points;
  in.geo = make_geometry(in.f1, in.f2, g1, g2, in.real1, in.real2);
  const std::size_t p = in.plane();
  auto pair_sq = std::make_shared<std::vector<double>>(in.geo.length_gap.size());
  for (std::size_t e = 0; e < pair_sq->size(); ++e) (*pair_sq)[e] = in.geo.length_gap[e] * in.geo.length_gap[e];
  auto unary_sq = std::make_shared<std::vector<double>>(in.geo.unary_sqdist.flat().begin(), in.geo.unary_sqdist.flat().end());
  auto mask = std::make_shared<std::vector<std::uint8_t>>(p, 0);
  in.unary_norm.assign(p, 0.0);
  for (std::size_t i = 0; i < in.n; ++i)
    for (std::size_t j = 0; j < in.n; ++j)
      if (in.geo.real(i, j)) {
        (*mask)[i * in.n + j] = 1;
        in.unary_norm[i * in.n + j] = in.geo.unary_dist(i, j);
      }
  in.pair_sq = pair_sq;
  in.unary_sq = unary_sq;
  in.real_mask = mask;
  const std::size_t d = in.dim;
  in.vhat.assign(3 * d * p, 0.0);
  for (std::size_t i = 0; i < in.n; ++i)
    for (std::size_t j = 0; j < in.n; ++j)
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t a = i * in.n + j;
        in.vhat[k * p + a] = std::abs(in.f1(i, k) - in.f2(j, k));
        in.vhat[(d + k) * p + a] = in.f1(i, k);
        in.vhat[(2 * d + k) * p + a] = in.f2(j, k);
      }
  in.gt.assign(gt.begin(), gt.end());
  return in;
}

struct ForwardOptions {
  bool training = false;
  bool need_grad = false;
  bool force_full_mask = false;
  std::uint64_t seed = 0;
  int decision_T = 0;  // 0: spec default for training / evaluation
  bool with_loss = false;
};

template <typename T>
struct ForwardPass {
  Var q;
  Var logits;
  std::optional<Var> loss;
  std::vector<Var> leaves;                     // parallel to model.params
  std::vector<Var> features;                   // V^(0..L)
  std::vector<Var> solver_out;                 // V~^(1..L)
  std::vector<std::size_t> mask_active;        // stored mask entries per block
  std::vector<std::shared_ptr<const SampleMask>> masks;
  Var unary;
  Var pairwise;
};

template <typename T>
ForwardPass<T> forward(Tape<T>& tp, const Model<T>& model, const PairInput& in, const ForwardOptions& opt = {}) {
  const auto& sp = model.spec;
  if (sp.dim != in.dim) throw InputError("forward: model dimension does not match graph dimension");
  const std::size_t n = in.n, plane = in.plane(), c = sp.channels;
  ForwardPass<T> fp;
  for (const auto& p : model.params) fp.leaves.push_back(tp.leaf(p.value, opt.need_grad && p.trainable));
  auto param = [&](const std::string& name) { return fp.leaves[model.index_of(name)]; };

  Var sigma = ops::exp(tp, param("log_sigma"));
  Var pair_w = ops::gaussian_kernel(tp, in.pair_sq, sigma);
  Var unary;
  if (sp.unary == UnaryMode::Gaussian) {
    unary = ops::gaussian_kernel(tp, in.unary_sq, sigma, in.real_mask);
  } else {
    unary = tp.constant(std::vector<T>(in.unary_norm.begin(), in.unary_norm.end()));
  }
  fp.unary = unary;
  fp.pairwise = pair_w;
  const PatternPtr pat = in.geo.pattern;
  const int dec_T = opt.decision_T > 0 ? opt.decision_T
                                       : static_cast<int>(opt.training ? sp.decision_T_train : sp.decision_T_eval);
  const T eps = static_cast<T>(kLogEps);

  // One batched solver step over all channels of x.
  auto solver_step = [&](Var x, Var m_unary, Var m_pair, std::optional<Var> solver_raw, double beta,
                         const SampleMask* mask, std::shared_ptr<const SampleMask> mask_ptr, Var s_var,
                         bool shift) -> Var {
    Var z = shift ? ops::add_scalar(tp, x, eps) : x;
    Var mz = ops::assoc_matvec(tp, pat, m_unary, m_pair, z);
    if (sp.solver == SolverKind::SM) return ops::l2_normalize_planes(tp, mz, plane);
    Var lz = ops::log(tp, z);
    Var s = sp.solver == SolverKind::DPGM
                ? ops::channel_affine2(tp, ops::softplus(tp, *solver_raw), mz, lz, plane)
                : ops::scale(tp, mz, static_cast<T>(beta));
    if (mask) s = ops::masked_log_blend(tp, s, lz, s_var, mask_ptr, sp.ste_into_features);
    return ops::sinkhorn_log(tp, s, n, n, static_cast<int>(sp.sinkhorn_T));
  };

  if (sp.arch == Architecture::NaiveAverage) {
    Var z = tp.constant(std::vector<T>(c * plane, static_cast<T>(1.0 / static_cast<double>(n))));
    std::optional<Var> raw;
    if (sp.has_solver_params()) raw = param("average.solver");
    for (std::uint32_t k = 1; k <= sp.naive_steps; ++k) {
      z = solver_step(z, unary, pair_w, raw, gagm_beta(k), nullptr, nullptr, Var{}, false);
      fp.solver_out.push_back(z);
    }
    fp.q = ops::weighted_planes(tp, param("average.weight"), z, plane);
    fp.logits = fp.q;
  } else {
    Var vhat = tp.constant(std::vector<T>(in.vhat.begin(), in.vhat.end()));
    Var v = ops::relu(tp, ops::channel_mix(tp, param("init.weight"), param("init.bias"), vhat, c, plane));
    fp.features.push_back(v);
    Var m_unary = unary, m_pair = pair_w;
    std::optional<Var> prev_tilde;
    for (std::uint32_t l = 1; l <= sp.layers; ++l) {
      const std::string pre = "block" + std::to_string(l) + ".";
      if (sp.mode == Mode::EQAN_U && l >= 2) {
        m_pair = ops::update_pairwise(tp, pat, v, param(pre + "update.w"));
        m_unary = ops::update_unary(tp, v, param(pre + "update.u"), plane, in.real_mask);
      }
      std::shared_ptr<const SampleMask> mask;
      Var s_var{};
      if (sp.mode == Mode::EQAN_R) {
        s_var = prev_tilde ? ops::channel_mean(tp, *prev_tilde, plane) : m_unary;
        const auto& sv = tp.value(s_var);
        std::vector<double> s(sv.begin(), sv.end());
        const double g = opt.force_full_mask ? static_cast<double>(n) * static_cast<double>(n) : sp.gamma;
        mask = std::make_shared<const SampleMask>(sample_mask(s, n, g, c, derive_seed(opt.seed, l)));
        fp.mask_active.push_back(mask->stored_active());
        fp.masks.push_back(mask);
        // A full mask is deterministic: the dense step is the sampled step.
        if (mask->full) mask.reset();
      }
      std::optional<Var> raw;
      if (sp.has_solver_params()) raw = param(pre + "solver");
      Var tilde = solver_step(v, m_unary, m_pair, raw, gagm_beta(l), mask.get(), mask, s_var, true);
      fp.solver_out.push_back(tilde);
      prev_tilde = tilde;
      v = ops::relu(tp, ops::channel_mix(tp, param(pre + "mix.weight"), param(pre + "mix.bias"), tilde, c, plane));
      fp.features.push_back(v);
    }
    Var all = sp.decision_all ? ops::concat(tp, fp.features) : fp.features.back();
    fp.logits = ops::channel_mix(tp, param("decision.weight"), param("decision.bias"), all, 1, plane);
    fp.q = ops::sinkhorn_log(tp, fp.logits, n, n, dec_T);
  }
  if (opt.with_loss) {
    if (in.gt.empty()) throw InputError("forward: loss requested without ground truth");
    fp.loss = ops::bce_loss(tp, fp.q, n, n, in.gt);
  }
  return fp;
}

// Inference: Q, R = exp(logits), Hungarian assignment on Q and accuracy.
template <typename T>
MatchResult predict(const Model<T>& model, const PairInput& in, std::uint64_t seed = 0, int decision_T = 0) {
  Tape<T> tp;
  ForwardOptions opt;
  opt.seed = seed;
  opt.decision_T = decision_T;
  auto fp = forward(tp, model, in, opt);
  MatchResult r;
  const auto& qv = tp.value(fp.q);
  r.q = Matrix<double>(in.n, in.n, std::vector<double>(qv.begin(), qv.end()));
  r.r = Matrix<double>(in.n, in.n);
  const auto& lv = tp.value(fp.logits);
  for (std::size_t a = 0; a < in.plane(); ++a)
    r.r.flat()[a] = model.spec.arch == Architecture::NaiveAverage ? static_cast<double>(lv[a]) : std::exp(static_cast<double>(lv[a]));
  r.perm = hungarian(r.q);
  if (!in.gt.empty()) r.accuracy = matching_accuracy(r.perm, in.gt);
  return r;
}

}  // namespace eqan
