#include <gtest/gtest.h>

#include <sstream>

#include "eqan/experiments.hpp"

using namespace eqan;

namespace {

std::vector<std::string> lines(const std::string& s) {
  std::vector<std::string> out;
  std::istringstream is(s);
  for (std::string l; std::getline(is, l);) out.push_back(l);
  return out;
}

}  // namespace

TEST(Hash, StableHex) {
  const nlohmann::json a = {{"b", 1}, {"a", 2}};
  const nlohmann::json b = {{"a", 2}, {"b", 1}};
  EXPECT_EQ(config_hash(a), config_hash(b));
  EXPECT_EQ(config_hash(a).size(), 16u);
  EXPECT_NE(config_hash(a), config_hash({{"a", 3}, {"b", 1}}));
  // FNV-1a 64 reference values.
  EXPECT_EQ(hex64(fnv1a("", 0)), "cbf29ce484222325");
  EXPECT_EQ(hex64(fnv1a("a", 1)), "af63dc4c8601ec8c");
}

TEST(Sweep, GridsAndPoints) {
  EXPECT_EQ(default_grid(SweepKind::Rotation).back(), 90.0);
  EXPECT_EQ(default_grid(SweepKind::Outlier).back(), 50.0);
  const auto o = sweep_point(SweepKind::Outlier, 20);
  EXPECT_EQ(o.gen.n_in, 35u);
  EXPECT_EQ(o.gen.n_out, 20u);
  const auto r = sweep_point(SweepKind::Rotation, 90);
  EXPECT_NEAR(r.max_rotation, std::numbers::pi / 2, 1e-15);
  EXPECT_EQ(r.gen.n_out, 15u);
  EXPECT_EQ(sweep_point(SweepKind::Noise, 0.1).gen.sigma, 0.1);
  EXPECT_THROW(parse_sweep("scale"), ConfigError);
}

TEST(Classical, NoiselessPairsMatchWell) {
  DataConfig d;
  d.gen.n_in = 20;
  d.gen.k = 5;
  ClassicalConfig cc;
  cc.params.sinkhorn_T = 20;
  cc.iters = 30;
  EXPECT_GT(evaluate_matcher(classical_matcher(cc), d, 10, 1, 1), 0.9);
}

TEST(Classical, AllSolversRun) {
  DataConfig d;
  d.gen.n_in = 10;
  d.gen.n_out = 3;
  d.gen.sigma = 0.05;
  d.gen.k = 3;
  const auto in = make_pair(d, 3);
  for (auto k : {SolverKind::DPGM, SolverKind::GAGM, SolverKind::SM}) {
    ClassicalConfig cc;
    cc.solver = k;
    const auto r = classical_match(cc, in);
    EXPECT_EQ(r.perm.size(), 13u);
    EXPECT_GE(r.accuracy, 0.0);
  }
}

TEST(Sweep, RowsReproduceBitExactly) {
  SweepSpec spec;
  spec.kind = SweepKind::Outlier;
  spec.grid = {0, 5};
  spec.repeats = 2;
  spec.pairs = 4;
  spec.seed = 42;
  spec.matcher_id = {{"solver", "dpgm"}};
  const auto m = classical_matcher({});
  const auto a = run_robustness_sweep(spec, m, 1);
  const auto b = run_robustness_sweep(spec, m, 1);
  const auto c = run_robustness_sweep(spec, m, 3);
  std::ostringstream sa, sb, sc;
  write_sweep_csv(sa, a);
  write_sweep_csv(sb, b);
  write_sweep_csv(sc, c);
  EXPECT_EQ(sa.str(), sb.str());
  EXPECT_EQ(sa.str(), sc.str());
  const auto ls = lines(sa.str());
  ASSERT_EQ(ls.size(), 3u);
  EXPECT_EQ(ls[0], "sweep,x,mean_acc,std_acc,repeats,pairs,seed,config_hash");
  EXPECT_EQ(ls[1].rfind("outlier,0,", 0), 0u);
  EXPECT_NE(a[0].config_hash, a[1].config_hash);
  // A single row regenerated on its own matches the full sweep.
  const auto again = run_sweep_point(spec, 5, m, 1);
  EXPECT_EQ(again.mean_acc, a[1].mean_acc);
  EXPECT_EQ(again.config_hash, a[1].config_hash);
}

TEST(Ablation, VariantIds) {
  ModelSpec base;
  EXPECT_FALSE(make_variant("single-gagm", base).trained);
  EXPECT_EQ(make_variant("single-gagm", base).classical.solver, SolverKind::GAGM);
  EXPECT_EQ(make_variant("eqan-u", base).model.mode, Mode::EQAN_U);
  EXPECT_EQ(make_variant("naive-average", base).model.arch, Architecture::NaiveAverage);
  EXPECT_FALSE(make_variant("random-params", base).model.learn_solver);
  EXPECT_EQ(make_variant("sm-ensemble", base).model.solver, SolverKind::SM);
  EXPECT_FALSE(make_variant("decision-last", base).model.decision_all);
  EXPECT_EQ(make_variant("paper-norm", base).model.unary, UnaryMode::PaperNorm);
  const auto w = make_variant("width-16", base);
  EXPECT_EQ(w.model.layers, 5u);
  EXPECT_EQ(w.model.channels, 16u);
  const auto dp = make_variant("depth-4", base);
  EXPECT_EQ(dp.model.layers, 4u);
  EXPECT_EQ(dp.model.channels, 32u);
  EXPECT_THROW(make_variant("bogus", base), ConfigError);
  for (const auto& id : default_variants()) EXPECT_NO_THROW(make_variant(id, base));
}

TEST(Ablation, RunsClassicalAndTrainedVariants) {
  ModelSpec base;
  base.layers = 1;
  base.channels = 2;
  DataConfig d;
  d.gen.n_in = 6;
  d.gen.n_out = 1;
  d.gen.sigma = 0.05;
  d.gen.k = 2;
  TrainConfig tc;
  tc.total_iters = 2;
  tc.warmup_iters = 0;
  tc.batch = 2;
  tc.eval_every = 1;
  tc.eval_pairs = 2;
  const auto a = run_variant(make_variant("single-dpgm", base), tc, d, 4, 1, 9);
  const auto b = run_variant(make_variant("eqan", base), tc, d, 4, 2, 9);
  EXPECT_EQ(b.model_seeds, 2u);
  EXPECT_NE(a.config_hash, b.config_hash);
  std::ostringstream os;
  write_ablation_csv(os, {a, b});
  const auto ls = lines(os.str());
  ASSERT_EQ(ls.size(), 3u);
  EXPECT_EQ(ls[1].rfind("single-dpgm,", 0), 0u);
  EXPECT_EQ(run_variant(make_variant("eqan", base), tc, d, 4, 2, 9).accuracy, b.accuracy);
}

TEST(Diagnostics, ObjectiveAndLemmaOnSeededInstances) {
  DiagnosticConfig cfg;
  cfg.instances = 4;
  const auto runs = run_diagnostics(cfg, 1);
  ASSERT_EQ(runs.size(), 4u);
  for (const auto& run : runs) {
    EXPECT_LT(run.beta, run.bound);
    ASSERT_EQ(run.rows.size(), 401u);
    for (std::size_t t = 1; t < run.rows.size(); ++t) {
      EXPECT_LE(run.rows[t].objective, run.rows[t - 1].objective + 1e-12);
      // Near the fixed point sum(z+ - z) is pure rounding, about 1e-16.
      EXPECT_GE(run.rows[t].lemma_lhs, run.rows[t].lemma_rhs - 1e-13);
    }
    EXPECT_LE(running_mean_step(run.rows, 400), 0.6 * running_mean_step(run.rows, 200));
  }
  std::ostringstream os;
  write_diagnostics_csv(os, runs);
  EXPECT_EQ(lines(os.str()).size(), 1u + 4u * 401u);
}

TEST(Sampling, SweepRowsAndFullMask) {
  ModelSpec spec;
  spec.layers = 1;
  spec.channels = 2;
  spec.mode = Mode::EQAN_R;
  const auto m = init_model<float>(spec, 1);
  DataConfig d;
  d.gen.n_in = 9;
  d.gen.k = 2;
  d.gen.sigma = 0.05;
  const auto rows = run_sampling_sweep(m, d, {0.0, 0.5, 1.0}, 3, 4, 1);
  ASSERT_EQ(rows.size(), 3u);
  EXPECT_EQ(rows[0].per_channel, 81u);
  EXPECT_EQ(rows[1].per_channel, 14u);
  EXPECT_EQ(rows[2].per_channel, 27u);
  // The full mask reproduces the dense model.
  auto dense = m;
  dense.spec.mode = Mode::EQAN;
  EXPECT_EQ(rows[0].accuracy, evaluate_matcher(model_matcher(dense), d, 3, 4, 1));
  auto plain = m;
  plain.spec.mode = Mode::EQAN;
  EXPECT_THROW(run_sampling_sweep(plain, d, {1.0}, 1, 1, 1), ConfigError);
}
