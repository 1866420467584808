#include <gtest/gtest.h>

#include <cmath>

#include "eqan/forward.hpp"

using namespace eqan;

namespace {

struct Pair {
  Graph ref, query;
  std::vector<std::size_t> gt;
};

Pair make_test_pair(std::size_t n_in, std::size_t n_out, double sigma, std::uint64_t seed) {
  GenConfig g;
  g.n_in = n_in;
  g.n_out = n_out;
  g.sigma = sigma;
  g.k = 2;
  g.seed = seed;
  Pair p;
  p.ref = generate_reference(g);
  auto pr = perturb(p.ref, g);
  p.query = std::move(pr.query);
  p.gt = std::move(pr.gt);
  return p;
}

double loss_of(const Model<double>& m, const PairInput& in, std::uint64_t seed) {
  Tape<double> tp;
  ForwardOptions opt;
  opt.training = true;
  opt.with_loss = true;
  opt.seed = seed;
  return tp.value(*forward(tp, m, in, opt).loss)[0];
}

// Relative error of every trainable parameter's analytic gradient against
// central differences.
double max_gradient_error(Model<double> m, const PairInput& in, std::uint64_t seed, double h = 1e-6) {
  Tape<double> tp;
  ForwardOptions opt;
  opt.training = true;
  opt.with_loss = true;
  opt.need_grad = true;
  opt.seed = seed;
  auto fp = forward(tp, m, in, opt);
  tp.backward(*fp.loss);
  double worst = 0;
  for (std::size_t b = 0; b < m.params.size(); ++b) {
    if (!m.params[b].trainable) continue;
    const auto g = tp.grad(fp.leaves[b]);
    for (std::size_t k = 0; k < g.size(); ++k) {
      const double x = m.params[b].value[k];
      m.params[b].value[k] = x + h;
      const double lp = loss_of(m, in, seed);
      m.params[b].value[k] = x - h;
      const double lm = loss_of(m, in, seed);
      m.params[b].value[k] = x;
      const double fd = (lp - lm) / (2 * h);
      worst = std::max(worst, std::abs(g[k] - fd) / std::max({std::abs(g[k]), std::abs(fd), 1e-3}));
    }
  }
  return worst;
}

ModelSpec small_spec() {
  ModelSpec s;
  s.layers = 2;
  s.channels = 3;
  return s;
}

}  // namespace

TEST(Prepare, PadsSmallerGraph) {
  const auto p = make_test_pair(6, 2, 0.05, 1);
  const auto in = prepare_pair(p.ref, p.query, p.gt);
  EXPECT_EQ(in.n, 8u);
  EXPECT_EQ(in.real1, 6u);
  EXPECT_EQ(in.real2, 8u);
  EXPECT_EQ(in.vhat.size(), 6u * 64u);
  for (std::size_t i = 6; i < 8; ++i)
    for (std::size_t j = 0; j < 8; ++j) {
      EXPECT_EQ((*in.real_mask)[i * 8 + j], 0);
      EXPECT_EQ(in.f1(i, 0), 0.0);
    }
  EXPECT_THROW(prepare_pair(p.ref, p.query, std::vector<std::size_t>{99}), InputError);
}

TEST(Forward, OutputIsDoublyStochastic) {
  const auto p = make_test_pair(7, 0, 0.1, 2);
  const auto in = prepare_pair(p.ref, p.query, p.gt);
  auto spec = small_spec();
  spec.decision_T_eval = 200;
  const auto m = init_model<double>(spec, 3);
  Tape<double> tp;
  const auto fp = forward(tp, m, in);
  EXPECT_LT(max_stochastic_deviation(Matrix<double>(7, 7, tp.value(fp.q))), 1e-8);
  EXPECT_EQ(fp.features.size(), 3u);
  EXPECT_EQ(fp.solver_out.size(), 2u);
}

TEST(Forward, GradientsMatchFiniteDifferences) {
  const auto p = make_test_pair(5, 1, 0.1, 4);
  const auto in = prepare_pair(p.ref, p.query, p.gt);
  std::vector<ModelSpec> specs;
  for (auto mode : {Mode::EQAN, Mode::EQAN_U}) {
    auto s = small_spec();
    s.mode = mode;
    specs.push_back(s);
  }
  for (auto solver : {SolverKind::GAGM, SolverKind::SM}) {
    auto s = small_spec();
    s.solver = solver;
    specs.push_back(s);
  }
  {
    auto s = small_spec();
    s.decision_all = false;
    s.unary = UnaryMode::PaperNorm;
    specs.push_back(s);
  }
  {
    auto s = small_spec();
    s.arch = Architecture::NaiveAverage;
    s.naive_steps = 3;
    specs.push_back(s);
  }
  {
    auto s = small_spec();
    s.learn_solver = false;
    specs.push_back(s);
  }
  {
    // Without the straight-through path the sampled model is piecewise smooth.
    auto s = small_spec();
    s.mode = Mode::EQAN_R;
    s.gamma = 1.0;
    s.ste_into_features = false;
    specs.push_back(s);
  }
  for (std::size_t k = 0; k < specs.size(); ++k)
    EXPECT_LT(max_gradient_error(init_model<double>(specs[k], 10 + k), in, 99), 1e-4) << "spec " << k;
}

TEST(Forward, EquivariantUnderQueryRelabeling) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    const auto p = make_test_pair(8, 2, 0.1, 20 + s);
    const auto m = init_model<double>(small_spec(), s);
    Rng rng(s);
    const auto perm = rng.permutation(p.query.size());  // old index j -> perm[j]
    Graph q2 = p.query;
    for (std::size_t j = 0; j < perm.size(); ++j)
      for (std::size_t c = 0; c < 2; ++c) q2.points(perm[j], c) = p.query.points(j, c);
    q2.edges.clear();
    for (const auto& [u, v] : p.query.edges) q2.edges.push_back({static_cast<std::uint32_t>(perm[u]), static_cast<std::uint32_t>(perm[v])});
    q2.edges = detail::canonical_edges(std::move(q2.edges));
    std::vector<std::size_t> gt2(p.gt.size());
    for (std::size_t i = 0; i < gt2.size(); ++i) gt2[i] = perm[p.gt[i]];
    const auto a = predict(m, prepare_pair(p.ref, p.query, p.gt));
    const auto b = predict(m, prepare_pair(p.ref, q2, gt2));
    for (std::size_t i = 0; i < a.q.rows(); ++i)
      for (std::size_t j = 0; j < a.q.cols(); ++j) EXPECT_NEAR(b.q(i, perm[j]), a.q(i, j), 1e-12);
    EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
  }
}

TEST(Forward, FullMaskSamplingEqualsDense) {
  const auto p = make_test_pair(6, 2, 0.1, 30);
  const auto in = prepare_pair(p.ref, p.query, p.gt);
  auto spec = small_spec();
  const auto dense = init_model<double>(spec, 5);
  spec.mode = Mode::EQAN_R;
  auto sampled = dense;
  sampled.spec = spec;
  Tape<double> t1, t2;
  const auto a = forward(t1, dense, in);
  ForwardOptions opt;
  opt.force_full_mask = true;
  opt.seed = 77;
  const auto b = forward(t2, sampled, in, opt);
  EXPECT_EQ(t1.value(a.q), t2.value(b.q));
  EXPECT_EQ(b.mask_active, (std::vector<std::size_t>{3 * 64, 3 * 64}));
}

TEST(Forward, SampledForwardIsSeedDeterministic) {
  const auto p = make_test_pair(6, 2, 0.1, 31);
  const auto in = prepare_pair(p.ref, p.query, p.gt);
  auto spec = small_spec();
  spec.mode = Mode::EQAN_R;
  spec.gamma = 0.5;
  const auto m = init_model<double>(spec, 6);
  auto run = [&](std::uint64_t seed) {
    Tape<double> tp;
    ForwardOptions opt;
    opt.seed = seed;
    const auto fp = forward(tp, m, in, opt);
    EXPECT_EQ(fp.mask_active, (std::vector<std::size_t>{3 * sample_count(8, 0.5), 3 * sample_count(8, 0.5)}));
    return tp.value(fp.q);
  };
  EXPECT_EQ(run(1), run(1));
  EXPECT_NE(run(1), run(2));
}

TEST(Forward, DimensionMismatch) {
  const auto p = make_test_pair(5, 0, 0.1, 32);
  auto spec = small_spec();
  spec.dim = 3;
  const auto m = init_model<double>(spec, 1);
  Tape<double> tp;
  EXPECT_THROW(forward(tp, m, prepare_pair(p.ref, p.query, p.gt)), InputError);
}

TEST(Sampling, Counts) {
  EXPECT_EQ(sample_count(36, 1.0), 216u);
  EXPECT_EQ(sample_count(50, 1.0), 354u);
  EXPECT_EQ(sample_count(4, 0.5), 4u);
  EXPECT_THROW(sample_count(4, 0.0), ConfigError);
}

TEST(Sampling, MaskShapeAndDeterminism) {
  Rng rng(1);
  std::vector<double> s(100);
  for (double& v : s) v = rng.uniform(0, 1);
  const auto a = sample_mask(s, 10, 1.0, 4, 9);
  const auto b = sample_mask(s, 10, 1.0, 4, 9);
  EXPECT_EQ(a.b, b.b);
  EXPECT_EQ(a.per_channel, 32u);
  for (std::size_t c = 0; c < 4; ++c) {
    std::size_t cnt = 0;
    for (std::size_t k = 0; k < 100; ++k) cnt += a.b[c * 100 + k];
    EXPECT_EQ(cnt, 32u);
  }
  EXPECT_NE(std::vector<std::uint8_t>(a.b.begin(), a.b.begin() + 100), std::vector<std::uint8_t>(a.b.begin() + 100, a.b.begin() + 200));
  EXPECT_TRUE(sample_mask(s, 10, 100.0, 2, 9).full);
}

TEST(Sampling, ZeroWeightsTakenLast) {
  std::vector<double> s(16, 0.0);
  for (std::size_t k = 0; k < 3; ++k) s[k * 5] = 1.0 + static_cast<double>(k);
  const auto m = sample_mask(s, 4, 1.0, 2, 3);  // 8 per channel, 3 positive
  for (std::size_t c = 0; c < 2; ++c) {
    for (std::size_t k = 0; k < 3; ++k) EXPECT_EQ(m.b[c * 16 + k * 5], 1);
    EXPECT_EQ(m.active[c].size(), 8u);
  }
  const auto u = sample_mask(std::vector<double>(16, 0.0), 4, 1.0, 1, 3);
  EXPECT_TRUE(u.uniform_fallback);
  EXPECT_THROW(sample_mask(std::vector<double>(16, -1.0), 4, 1.0, 1, 3), DomainError);
}

TEST(Sampling, InclusionFollowsWeights) {
  std::vector<double> s(25, 1.0);
  s[0] = 20.0;
  std::size_t heavy = 0, light = 0;
  for (std::uint64_t seed = 0; seed < 2000; ++seed) {
    const auto m = sample_mask(s, 5, 0.5, 1, seed);  // 6 of 25
    heavy += m.b[0];
    light += m.b[1];
  }
  EXPECT_GT(heavy, 1800u);
  EXPECT_LT(light, 1000u);
}

TEST(Sampling, SteBackwardFormula) {
  Rng rng(4);
  const std::size_t p = 9, ch = 2;
  std::vector<double> s(p), db(ch * p);
  for (double& v : s) v = rng.uniform(0.1, 1);
  for (double& v : db) v = rng.uniform(-1, 1);
  double sum = 0;
  for (double v : s) sum += v;
  std::vector<double> q(p);
  for (std::size_t k = 0; k < p; ++k) q[k] = s[k] / sum;
  const auto got = ste_backward(db, s, q);
  for (std::size_t ij = 0; ij < p; ++ij) {
    double want = 0;
    for (std::size_t c = 0; c < ch; ++c)
      for (std::size_t tk = 0; tk < p; ++tk) want += db[c * p + tk] * ((tk == ij ? 1.0 : 0.0) - q[ij]);
    EXPECT_NEAR(got[ij], want / sum, 1e-14);
  }
  EXPECT_THROW(ste_backward(db, std::vector<double>(p, 0.0), q), DomainError);
}

TEST(Sampling, BlendRoutesStraightThroughGradient) {
  const std::size_t n = 3, p = 9, ch = 2;
  Rng rng(5);
  std::vector<double> fresh(ch * p), prev(ch * p), s(p);
  for (double& v : fresh) v = rng.uniform(-2, 0);
  for (double& v : prev) v = rng.uniform(-2, 0);
  for (double& v : s) v = rng.uniform(0.1, 1);
  const auto mask = std::make_shared<const SampleMask>(sample_mask(s, n, 1.0, ch, 8));
  Tape<double> tp;
  const auto f = tp.leaf(fresh), pv = tp.leaf(prev), sv = tp.leaf(s);
  const auto y = ops::masked_log_blend(tp, f, pv, sv, mask, true);
  std::vector<double> g(ch * p);
  for (double& v : g) v = rng.uniform(-1, 1);
  tp.backward(y, g);
  std::vector<double> db(ch * p);
  // y = b * fresh + (1 - b) * prev, so dL/db = g * (fresh - prev).
  for (std::size_t k = 0; k < ch * p; ++k) db[k] = g[k] * (fresh[k] - prev[k]);
  const auto want = ste_backward(db, s, mask->q);
  const auto got = tp.grad(sv);
  for (std::size_t k = 0; k < p; ++k) EXPECT_NEAR(got[k], want[k], 1e-12);
  const auto gf = tp.grad(f), gp = tp.grad(pv);
  for (std::size_t k = 0; k < ch * p; ++k) {
    EXPECT_EQ(gf[k], mask->b[k] ? g[k] : 0.0);
    EXPECT_EQ(gp[k], mask->b[k] ? 0.0 : g[k]);
  }
}

TEST(Model, ParameterLayout) {
  auto spec = small_spec();
  spec.mode = Mode::EQAN_U;
  const auto m = init_model<float>(spec, 1);
  std::vector<std::string> names;
  for (const auto& b : m.params) names.push_back(b.name);
  EXPECT_EQ(names, (std::vector<std::string>{"log_sigma", "init.weight", "init.bias", "block1.solver", "block1.mix.weight",
                                             "block1.mix.bias", "block2.solver", "block2.mix.weight", "block2.mix.bias",
                                             "block2.update.w", "block2.update.u", "decision.weight", "decision.bias"}));
  EXPECT_EQ(m["init.weight"].size(), 3u * 6u);
  EXPECT_EQ(m["decision.weight"].size(), 9u);
  EXPECT_NEAR(std::log1p(std::exp(m["block1.solver"][0])), 0.5, 1e-6);
  spec.mode = Mode::EQAN_R;
  spec.solver = SolverKind::SM;
  EXPECT_THROW(init_model<float>(spec, 1), UnsupportedError);
  EXPECT_THROW(parse_mode("eqan-x"), ConfigError);
}
