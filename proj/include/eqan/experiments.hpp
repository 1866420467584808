#pragma once

#include <cstdint>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <numbers>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "eqan/assignment.hpp"
#include "eqan/forward.hpp"
#include "eqan/solvers.hpp"
#include "eqan/train.hpp"

namespace eqan {

inline std::string hex64(std::uint64_t h) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

// FNV-1a over the canonical (sorted-key) JSON dump.
inline std::string config_hash(const nlohmann::json& j) {
  const std::string s = j.dump();
  return hex64(fnv1a(s.data(), s.size()));
}

inline nlohmann::json to_json(const GenConfig& g) {
  return {{"n_in", g.n_in}, {"n_out", g.n_out}, {"sigma", g.sigma}, {"dim", g.dim}, {"k", g.k}};
}

inline nlohmann::json to_json(const DataConfig& d) {
  return {{"gen", to_json(d.gen)},
          {"n_out_max", d.n_out_max},
          {"max_rotation", d.max_rotation},
          {"rebuild_edges", d.rebuild_edges}};
}

inline nlohmann::json to_json(const TrainConfig& t) {
  return {{"lr", t.lr},
          {"batch", t.batch},
          {"total_iters", t.total_iters},
          {"warmup_iters", t.warmup_iters},
          {"warmup_lr", t.warmup_lr},
          {"beta1", t.beta1},
          {"beta2", t.beta2},
          {"adam_eps", t.adam_eps},
          {"seed", t.seed},
          {"eval_every", t.eval_every},
          {"eval_pairs", t.eval_pairs}};
}

// Untrained solver baseline on the gaussian-unary affinity.
struct ClassicalConfig {
  SolverKind solver = SolverKind::DPGM;
  double sigma_aff = 1.0;
  UnaryMode unary = UnaryMode::Gaussian;
  int iters = 10;
  SolverParams params{};
};

inline nlohmann::json to_json(const ClassicalConfig& c) {
  return {{"solver", to_string(c.solver)},
          {"sigma_aff", c.sigma_aff},
          {"unary", to_string(c.unary)},
          {"iters", c.iters},
          {"w_p", c.params.w_p},
          {"w_z", c.params.w_z},
          {"sinkhorn_T", c.params.sinkhorn_T}};
}

inline MatchResult classical_match(const ClassicalConfig& cc, const PairInput& in) {
  const auto m = evaluate_affinity<double>(in.geo, cc.sigma_aff, cc.unary);
  std::vector<double> z;
  switch (cc.solver) {
    case SolverKind::DPGM: {
      SolverParams p = cc.params;
      p.max_iter = cc.iters;
      z = dpgm_solve(m, p);
      break;
    }
    case SolverKind::GAGM: {
      const auto betas = gagm_schedule(cc.iters);
      z = gagm_solve(m, cc.iters, betas, cc.params.sinkhorn_T);
      break;
    }
    case SolverKind::SM: z = sm_solve(m, cc.iters); break;
  }
  MatchResult r;
  r.q = Matrix<double>(in.n, in.n, std::move(z));
  r.r = r.q;
  r.perm = hungarian(r.q);
  if (!in.gt.empty()) r.accuracy = matching_accuracy(r.perm, in.gt);
  return r;
}

// Accuracy of one matcher on one prepared pair; `seed` drives any sampling.
using Matcher = std::function<double(const PairInput&, std::uint64_t)>;

inline Matcher classical_matcher(const ClassicalConfig& cc) {
  return [cc](const PairInput& in, std::uint64_t) { return classical_match(cc, in).accuracy; };
}

template <typename T>
Matcher model_matcher(const Model<T>& model) {
  return [model](const PairInput& in, std::uint64_t seed) { return predict(model, in, seed).accuracy; };
}

// Mean accuracy over `pairs` pairs of the `seed` data stream.
inline double evaluate_matcher(const Matcher& match, const DataConfig& data, std::size_t pairs, std::uint64_t seed,
                               std::size_t threads) {
  std::vector<double> acc(pairs);
  parallel_for(pairs, threads, [&](std::size_t i) {
    const auto s = eval_seed(seed, i);
    acc[i] = match(make_pair(data, s), derive_seed(s, 99));
  });
  return mean(acc);
}

enum class SweepKind { Noise, Outlier, Rotation };

inline std::string to_string(SweepKind k) {
  switch (k) {
    case SweepKind::Outlier: return "outlier";
    case SweepKind::Rotation: return "rotation";
    default: return "noise";
  }
}

inline SweepKind parse_sweep(const std::string& s) {
  if (s == "noise") return SweepKind::Noise;
  if (s == "outlier") return SweepKind::Outlier;
  if (s == "rotation") return SweepKind::Rotation;
  throw ConfigError("unknown sweep '" + s + "' (expected noise, outlier or rotation)");
}

// Default grids and base distributions of the robustness study.
inline std::vector<double> default_grid(SweepKind k) {
  switch (k) {
    case SweepKind::Outlier: return {0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50};
    case SweepKind::Rotation: return {0, 15, 30, 45, 60, 75, 90};
    default: return {0.0, 0.025, 0.05, 0.075, 0.1, 0.125, 0.15, 0.175, 0.2};
  }
}

inline DataConfig sweep_point(SweepKind k, double x, std::size_t knn = 5) {
  DataConfig d;
  d.gen.k = knn;
  switch (k) {
    case SweepKind::Noise:
      d.gen.n_in = 50;
      d.gen.n_out = 0;
      d.gen.sigma = x;
      break;
    case SweepKind::Outlier:
      d.gen.n_in = 35;
      d.gen.n_out = static_cast<std::size_t>(std::llround(x));
      d.gen.sigma = 0.1;
      break;
    case SweepKind::Rotation:
      d.gen.n_in = 30;
      d.gen.n_out = 15;
      d.gen.sigma = 0.1;
      d.max_rotation = x * std::numbers::pi / 180.0;
      break;
  }
  return d;
}

struct SweepRow {
  std::string sweep;
  double x = 0;
  double mean_acc = 0;
  double std_acc = 0;
  std::size_t repeats = 0;
  std::size_t pairs = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::vector<double> per_repeat;
};

struct SweepSpec {
  SweepKind kind = SweepKind::Noise;
  std::vector<double> grid;
  std::size_t repeats = 5;
  std::size_t pairs = 200;
  std::uint64_t seed = 0;
  std::size_t knn = 5;
  nlohmann::json matcher_id;  // identifies the model / solver in the row hash
};

inline nlohmann::json row_config(const SweepSpec& spec, const DataConfig& d) {
  return {{"sweep", to_string(spec.kind)},
          {"data", to_json(d)},
          {"repeats", spec.repeats},
          {"pairs", spec.pairs},
          {"matcher", spec.matcher_id}};
}

// One grid point: `repeats` independent data streams derived from the row
// seed; mean and std over repeats.
inline SweepRow run_sweep_point(const SweepSpec& spec, double x, const Matcher& match, std::size_t threads) {
  if (spec.repeats < 1) throw ConfigError("sweep: repeats must be >= 1");
  if (spec.pairs < 1) throw ConfigError("sweep: pairs must be >= 1");
  const DataConfig d = sweep_point(spec.kind, x, spec.knn);
  SweepRow row;
  row.sweep = to_string(spec.kind);
  row.x = x;
  row.repeats = spec.repeats;
  row.pairs = spec.pairs;
  row.seed = spec.seed;
  row.config_hash = config_hash(row_config(spec, d));
  for (std::size_t r = 0; r < spec.repeats; ++r)
    row.per_repeat.push_back(evaluate_matcher(match, d, spec.pairs, derive_seed(spec.seed, r), threads));
  row.mean_acc = mean(row.per_repeat);
  row.std_acc = stddev(row.per_repeat);
  return row;
}

inline std::vector<SweepRow> run_robustness_sweep(const SweepSpec& spec, const Matcher& match, std::size_t threads) {
  const auto grid = spec.grid.empty() ? default_grid(spec.kind) : spec.grid;
  std::vector<SweepRow> rows;
  for (double x : grid) rows.push_back(run_sweep_point(spec, x, match, threads));
  return rows;
}

inline void write_sweep_csv(std::ostream& os, const std::vector<SweepRow>& rows) {
  os << "sweep,x,mean_acc,std_acc,repeats,pairs,seed,config_hash\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << std::setprecision(17) << r.sweep << ',' << r.x << ',' << r.mean_acc << ',' << r.std_acc << ','
         << r.repeats << ',' << r.pairs << ',' << r.seed << ',' << r.config_hash;
    os << line.str() << '\n';
  }
}

// Ablation data distribution.
inline DataConfig ablation_data() {
  DataConfig d;
  d.gen.n_in = 35;
  d.gen.n_out = 15;
  d.gen.sigma = 0.3;
  d.gen.k = 3;
  return d;
}

struct AblationRow {
  std::string variant;
  double accuracy = 0;
  double std_model_seeds = 0;
  std::size_t model_seeds = 1;
  std::size_t pairs = 0;
  std::string config_hash;
};

// Named variant -> either a model spec to train or a classical solver.
struct Variant {
  std::string id;
  bool trained = true;
  ModelSpec model;
  ClassicalConfig classical;
};

inline Variant make_variant(const std::string& id, const ModelSpec& base) {
  Variant v;
  v.id = id;
  v.model = base;
  auto classical = [&](SolverKind k) {
    v.trained = false;
    v.classical.solver = k;
  };
  if (id == "single-dpgm") classical(SolverKind::DPGM);
  else if (id == "single-gagm") classical(SolverKind::GAGM);
  else if (id == "single-sm") classical(SolverKind::SM);
  else if (id == "eqan") {}
  else if (id == "eqan-u") v.model.mode = Mode::EQAN_U;
  else if (id == "eqan-r") v.model.mode = Mode::EQAN_R;
  else if (id == "naive-average") {
    v.model.arch = Architecture::NaiveAverage;
    v.model.learn_solver = false;
    v.model.sigma_init = ClassicalConfig{}.sigma_aff;  // frozen at the solver baselines' value
  }
  else if (id == "random-params") v.model.learn_solver = false;
  else if (id == "gagm-ensemble") v.model.solver = SolverKind::GAGM;
  else if (id == "sm-ensemble") v.model.solver = SolverKind::SM;
  else if (id == "decision-last") v.model.decision_all = false;
  else if (id == "paper-norm") v.model.unary = UnaryMode::PaperNorm;
  else if (id.rfind("width-", 0) == 0) {
    v.model.layers = 5;
    v.model.channels = static_cast<std::uint32_t>(std::stoul(id.substr(6)));
  } else if (id.rfind("depth-", 0) == 0) {
    v.model.channels = 32;
    v.model.layers = static_cast<std::uint32_t>(std::stoul(id.substr(6)));
  } else {
    throw ConfigError("unknown ablation variant '" + id + "'");
  }
  if (v.trained) v.model.validate();
  return v;
}

inline std::vector<std::string> default_variants() {
  return {"single-dpgm", "naive-average", "eqan", "random-params", "single-gagm", "gagm-ensemble",
          "single-sm",   "sm-ensemble",   "decision-last"};
}

inline std::vector<std::string> width_grid() { return {"width-8", "width-16", "width-32", "width-64"}; }
inline std::vector<std::string> depth_grid() { return {"depth-2", "depth-4", "depth-5", "depth-8", "depth-16"}; }

// Trains (or directly evaluates) a variant; accuracy over `pairs` held-out
// pairs, averaged over `model_seeds` independent trainings.
inline AblationRow run_variant(const Variant& v, const TrainConfig& tc, const DataConfig& data, std::size_t pairs,
                               std::size_t model_seeds, std::uint64_t eval_stream,
                               const std::function<void(const std::string&, const MetricRow&)>& progress = {}) {
  AblationRow row;
  row.variant = v.id;
  row.pairs = pairs;
  nlohmann::json cfg = {{"variant", v.id}, {"data", to_json(data)}, {"pairs", pairs}, {"eval_stream", eval_stream}};
  std::vector<double> accs;
  if (!v.trained) {
    cfg["classical"] = to_json(v.classical);
    accs.push_back(evaluate_matcher(classical_matcher(v.classical), data, pairs, eval_stream, tc.threads));
    row.model_seeds = 1;
  } else {
    cfg["model"] = to_json(v.model);
    cfg["train"] = to_json(tc);
    cfg["model_seeds"] = model_seeds;
    for (std::size_t s = 0; s < model_seeds; ++s) {
      TrainConfig t = tc;
      t.seed = derive_seed(tc.seed, s);
      auto model = init_model<float>(v.model, t.seed);
      auto res = train(model, t, data, [&](const MetricRow& m) {
        if (progress) progress(v.id, m);
      });
      accs.push_back(mean(evaluate_accuracies(res.best, data, pairs, eval_stream, tc.threads)));
    }
    row.model_seeds = model_seeds;
  }
  row.accuracy = mean(accs);
  row.std_model_seeds = stddev(accs);
  row.config_hash = config_hash(cfg);
  return row;
}

inline void write_ablation_csv(std::ostream& os, const std::vector<AblationRow>& rows) {
  os << "variant,accuracy,std_model_seeds,model_seeds,pairs,config_hash\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << std::setprecision(17) << r.variant << ',' << r.accuracy << ',' << r.std_model_seeds << ','
         << r.model_seeds << ',' << r.pairs << ',' << r.config_hash;
    os << line.str() << '\n';
  }
}

// Seeded diagnostic instance: a perturbed copy of a random geometric graph.
inline AffinityMatrix<double> diagnostic_instance(std::size_t n, std::uint64_t seed, double sigma = 0.05,
                                                  std::size_t knn = 3) {
  GenConfig g;
  g.n_in = n;
  g.n_out = 0;
  g.sigma = sigma;
  g.k = knn;
  g.seed = seed;
  const auto ref = generate_reference(g);
  const auto pr = perturb(ref, g);
  const auto in = prepare_pair(ref, pr.query, pr.gt);
  return evaluate_affinity<double>(in.geo, 1.0, UnaryMode::Gaussian);
}

struct DiagnosticConfig {
  std::size_t n = 10;
  std::size_t instances = 20;
  int iters = 400;
  int sinkhorn_T = 100;
  double beta_fraction = 0.9;  // beta = fraction / lambda_max(M)
  double lambda_beta = 1.0;    // entropy weight as a multiple of 1/beta
  std::uint64_t seed = 0;
};

struct DiagnosticRun {
  std::size_t instance = 0;
  double beta = 0;
  double lambda = 0;
  double bound = 0;
  std::vector<ConvergenceRow> rows;
};

inline DiagnosticRun convergence_diagnostics(const AffinityMatrix<double>& m, const DiagnosticConfig& cfg) {
  DiagnosticRun run;
  const double lmax = spectral_radius(m);
  if (!(lmax > 0)) throw DegenerateError("diagnose: affinity has zero spectral radius");
  run.bound = 1.0 / lmax;
  run.beta = cfg.beta_fraction * run.bound;
  run.lambda = cfg.lambda_beta / run.beta;
  run.rows = convergence_trace(m, run.beta, run.lambda, cfg.iters, cfg.sinkhorn_T);
  return run;
}

inline std::vector<DiagnosticRun> run_diagnostics(const DiagnosticConfig& cfg, std::size_t threads) {
  std::vector<DiagnosticRun> runs(cfg.instances);
  parallel_for(cfg.instances, threads, [&](std::size_t i) {
    runs[i] = convergence_diagnostics(diagnostic_instance(cfg.n, derive_seed(cfg.seed, i)), cfg);
    runs[i].instance = i;
  });
  return runs;
}

inline void write_diagnostics_csv(std::ostream& os, const std::vector<DiagnosticRun>& runs) {
  os << "instance,iter,step_sq,objective,lemma_lhs,lemma_rhs,beta,lambda\n";
  os << std::setprecision(17);
  for (const auto& run : runs)
    for (const auto& r : run.rows)
      os << run.instance << ',' << r.iter << ',' << r.step_sq << ',' << r.objective << ',' << r.lemma_lhs << ','
         << r.lemma_rhs << ',' << run.beta << ',' << run.lambda << '\n';
}

struct SamplingRow {
  double gamma = 0;  // 0 encodes the full mask
  std::size_t per_channel = 0;
  double accuracy = 0;
  std::uint64_t seed = 0;
  std::string config_hash;
};

inline std::vector<double> default_gammas() { return {0.05, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0}; }

template <typename T>
std::vector<SamplingRow> run_sampling_sweep(const Model<T>& model, const DataConfig& data,
                                            const std::vector<double>& gammas, std::size_t pairs, std::uint64_t seed,
                                            std::size_t threads) {
  if (model.spec.mode != Mode::EQAN_R) throw ConfigError("sample-sweep: model must be an EQAN-R checkpoint");
  std::vector<SamplingRow> rows;
  const std::size_t n = data.gen.n_in + std::max(data.gen.n_out, data.n_out_max);
  for (double g : gammas) {
    Model<T> m = model;
    const bool full = g <= 0;
    m.spec.gamma = full ? static_cast<double>(n) * static_cast<double>(n) : g;
    SamplingRow row;
    row.gamma = g;
    row.per_channel = std::min(sample_count(n, m.spec.gamma), n * n);
    row.seed = seed;
    row.accuracy = evaluate_matcher(model_matcher(m), data, pairs, seed, threads);
    row.config_hash = config_hash({{"gamma", g}, {"data", to_json(data)}, {"pairs", pairs}, {"model", to_json(m.spec)}});
    rows.push_back(row);
  }
  return rows;
}

inline void write_sampling_csv(std::ostream& os, const std::vector<SamplingRow>& rows) {
  os << "gamma,per_channel,accuracy,seed,config_hash\n";
  for (const auto& r : rows) {
    std::ostringstream line;
    line << std::setprecision(17) << r.gamma << ',' << r.per_channel << ',' << r.accuracy << ',' << r.seed << ','
         << r.config_hash;
    os << line.str() << '\n';
  }
}

}  // namespace eqan
