// Experiment driver: generation, training, evaluation, sweeps, ablations and
// solver diagnostics on synthetic geometric graphs.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <numbers>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "eqan/eqan.hpp"

namespace {

using nlohmann::json;

struct GenFlags {
  std::size_t n_in = 35, n_out = 0, dim = 2, k = 5, n_out_max = 0;
  double sigma = 0.0, rotation_deg = 0.0;
  bool rebuild_edges = false;

  void add(CLI::App* app) {
    app->add_option("--n-in", n_in, "inlier count")->capture_default_str();
    app->add_option("--n-out", n_out, "outlier count")->capture_default_str();
    app->add_option("--n-out-max", n_out_max, "draw outliers per pair from [n-out, n-out-max] (0: fixed)")
        ->capture_default_str();
    app->add_option("--sigma", sigma, "inlier noise standard deviation")->capture_default_str();
    app->add_option("--dim", dim, "point dimension")->capture_default_str();
    app->add_option("--k", k, "k-nearest-neighbour edges")->capture_default_str();
    app->add_option("--rotation", rotation_deg, "max query rotation in degrees")->capture_default_str();
    app->add_flag("--rebuild-edges", rebuild_edges, "rebuild query edges by k-NN instead of copying the reference topology");
  }

  eqan::DataConfig data() const {
    eqan::DataConfig d;
    d.gen.n_in = n_in;
    d.gen.n_out = n_out;
    d.gen.sigma = sigma;
    d.gen.dim = dim;
    d.gen.k = k;
    d.n_out_max = n_out_max;
    d.max_rotation = rotation_deg * std::numbers::pi / 180.0;
    d.rebuild_edges = rebuild_edges;
    d.validate();
    return d;
  }
};

struct ModelFlags {
  std::uint32_t layers = 3, channels = 8, naive_steps = 10, sinkhorn_T = 5, dec_train = 5, dec_eval = 50;
  std::string mode = "eqan", solver = "dpgm", arch = "ensemble", unary = "gaussian";
  bool decision_last = false, frozen_solver = false, no_ste_features = false;
  double gamma = 1.0, sigma_init = 1.0;

  void add(CLI::App* app) {
    app->add_option("--layers,-L", layers, "ensemble blocks")->capture_default_str();
    app->add_option("--channels,-C", channels, "channels per block")->capture_default_str();
    app->add_option("--mode", mode, "eqan | eqan-u | eqan-r")->capture_default_str();
    app->add_option("--solver", solver, "dpgm | gagm | sm")->capture_default_str();
    app->add_option("--arch", arch, "ensemble | naive-average")->capture_default_str();
    app->add_option("--unary", unary, "gaussian | paper-norm")->capture_default_str();
    app->add_option("--gamma", gamma, "EQAN-R sampling factor")->capture_default_str();
    app->add_option("--sigma-init", sigma_init, "initial affinity bandwidth")->capture_default_str();
    app->add_option("--naive-steps", naive_steps, "solver steps of the naive-average variant")->capture_default_str();
    app->add_option("--sinkhorn-T", sinkhorn_T, "Sinkhorn rounds inside solver steps")->capture_default_str();
    app->add_option("--decision-T-train", dec_train, "decision-layer Sinkhorn rounds in training")->capture_default_str();
    app->add_option("--decision-T-eval", dec_eval, "decision-layer Sinkhorn rounds at evaluation")->capture_default_str();
    app->add_flag("--decision-last", decision_last, "decision layer reads only the last block");
    app->add_flag("--frozen-solver", frozen_solver, "freeze solver parameters at random values");
    app->add_flag("--no-ste-features", no_ste_features, "do not route the STE gradient into the sampling weights' inputs");
  }

  eqan::ModelSpec spec(std::size_t dim) const {
    eqan::ModelSpec s;
    s.layers = layers;
    s.channels = channels;
    s.dim = static_cast<std::uint32_t>(dim);
    s.mode = eqan::parse_mode(mode);
    s.solver = eqan::parse_solver(solver);
    s.arch = eqan::parse_architecture(arch);
    s.unary = eqan::parse_unary_mode(unary);
    s.decision_all = !decision_last;
    s.learn_solver = !frozen_solver;
    s.ste_into_features = !no_ste_features;
    s.naive_steps = naive_steps;
    s.sinkhorn_T = sinkhorn_T;
    s.decision_T_train = dec_train;
    s.decision_T_eval = dec_eval;
    s.gamma = gamma;
    s.sigma_init = sigma_init;
    s.validate();
    return s;
  }
};

struct TrainFlags {
  eqan::TrainConfig cfg;
  void add(CLI::App* app) {
    app->add_option("--iters", cfg.total_iters, "training iterations")->capture_default_str();
    app->add_option("--lr", cfg.lr, "Adam learning rate after warm-up")->capture_default_str();
    app->add_option("--batch", cfg.batch, "pairs per iteration")->capture_default_str();
    app->add_option("--warmup-iters", cfg.warmup_iters, "warm-up iterations")->capture_default_str();
    app->add_option("--warmup-lr", cfg.warmup_lr, "warm-up learning rate")->capture_default_str();
    app->add_option("--eval-every", cfg.eval_every, "held-out evaluation period (0: never)")->capture_default_str();
    app->add_option("--eval-pairs", cfg.eval_pairs, "held-out pairs per evaluation")->capture_default_str();
  }
};

struct SolverFlags {
  eqan::ClassicalConfig cc;
  std::string solver = "dpgm", unary = "gaussian";
  void add(CLI::App* app) {
    app->add_option("--baseline", solver, "classical solver when no model is given: dpgm | gagm | sm")
        ->capture_default_str();
    app->add_option("--baseline-iters", cc.iters, "classical solver iterations")->capture_default_str();
    app->add_option("--sigma-aff", cc.sigma_aff, "classical affinity bandwidth")->capture_default_str();
    app->add_option("--baseline-unary", unary, "classical unary mode")->capture_default_str();
  }
  eqan::ClassicalConfig config() {
    cc.solver = eqan::parse_solver(solver);
    cc.unary = eqan::parse_unary_mode(unary);
    return cc;
  }
};

std::ostream& open_out(const std::string& path, std::ofstream& file) {
  if (path.empty() || path == "-") return std::cout;
  file.open(path, std::ios::trunc);
  if (!file) throw eqan::InputError("cannot open output file: " + path);
  return file;
}

json read_json_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw eqan::InputError("cannot open input file: " + path);
  try {
    return json::parse(f);
  } catch (const json::exception& e) {
    throw eqan::InputError("invalid JSON in " + path + ": " + e.what());
  }
}

std::vector<std::size_t> read_perm(const json& j) {
  try {
    return j.get<std::vector<std::size_t>>();
  } catch (const json::exception& e) {
    throw eqan::InputError(std::string("ground truth must be an integer array: ") + e.what());
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"EQAN graph matching experiments"};
  app.set_config("--config", "", "TOML/INI file with flag values; explicit flags override it");
  app.require_subcommand(1);
  std::uint64_t seed = 0;
  std::string out;
  app.add_option("--seed", seed, "root RNG seed")->capture_default_str();
  app.add_option("--out,-o", out, "output path ('-' or empty: stdout)");

  GenFlags gen;
  auto* c_gen = app.add_subcommand("generate", "emit a reference/query pair as JSON");
  gen.add(c_gen);

  GenFlags tgen;
  ModelFlags tmodel;
  TrainFlags ttrain;
  std::string metrics;
  auto* c_train = app.add_subcommand("train", "train a model on streamed synthetic pairs");
  tgen.add(c_train);
  tmodel.add(c_train);
  ttrain.add(c_train);
  c_train->add_option("--metrics", metrics, "CSV of iter, loss, eval_acc, wallclock");

  GenFlags egen;
  std::string emodel;
  std::size_t epairs = 200;
  SolverFlags esolver;
  auto* c_eval = app.add_subcommand("eval", "held-out accuracy of a checkpoint or classical solver");
  egen.add(c_eval);
  esolver.add(c_eval);
  c_eval->add_option("--model", emodel, "checkpoint path");
  c_eval->add_option("--pairs", epairs, "evaluation pairs")->capture_default_str();

  std::string minput, mmodel;
  SolverFlags msolver;
  auto* c_match = app.add_subcommand("match", "match one pair JSON (as written by generate)");
  c_match->add_option("--input", minput, "pair JSON")->required();
  c_match->add_option("--model", mmodel, "checkpoint path");
  msolver.add(c_match);

  std::string skind = "noise", smodel;
  std::vector<double> sgrid;
  std::size_t srepeats = 5, spairs = 200, sknn = 5;
  SolverFlags ssolver;
  auto* c_sweep = app.add_subcommand("sweep", "robustness sweep over noise, outliers or rotation");
  c_sweep->add_option("--kind", skind, "noise | outlier | rotation")->capture_default_str();
  c_sweep->add_option("--grid", sgrid, "grid values (default: the standard grid of the sweep)");
  c_sweep->add_option("--repeats", srepeats, "independent data streams per grid point")->capture_default_str();
  c_sweep->add_option("--pairs", spairs, "pairs per repeat")->capture_default_str();
  c_sweep->add_option("--k", sknn, "k-nearest-neighbour edges")->capture_default_str();
  c_sweep->add_option("--model", smodel, "checkpoint path");
  ssolver.add(c_sweep);

  ModelFlags amodel;
  TrainFlags atrain;
  std::vector<std::string> avariants;
  std::size_t apairs = 200, aseeds = 1;
  bool agrid = false;
  auto* c_ablate = app.add_subcommand("ablate", "train and compare architecture variants");
  amodel.add(c_ablate);
  atrain.add(c_ablate);
  c_ablate->add_option("--variants", avariants, "variant ids (default: the standard table)");
  c_ablate->add_flag("--size-grid", agrid, "append the width and depth grids");
  c_ablate->add_option("--pairs", apairs, "held-out pairs")->capture_default_str();
  c_ablate->add_option("--model-seeds", aseeds, "independent trainings per variant")->capture_default_str();

  eqan::DiagnosticConfig dcfg;
  auto* c_diag = app.add_subcommand("diagnose", "DPGM convergence diagnostics on seeded instances");
  c_diag->add_option("--n", dcfg.n, "nodes per instance")->capture_default_str();
  c_diag->add_option("--instances", dcfg.instances, "instances")->capture_default_str();
  c_diag->add_option("--iters", dcfg.iters, "DPGM iterations")->capture_default_str();
  c_diag->add_option("--sinkhorn-T", dcfg.sinkhorn_T, "Sinkhorn rounds per step")->capture_default_str();
  c_diag->add_option("--beta-fraction", dcfg.beta_fraction, "beta as a fraction of 1/lambda_max(M)")->capture_default_str();
  c_diag->add_option("--lambda-beta", dcfg.lambda_beta, "product lambda * beta")->capture_default_str();

  GenFlags pgen;
  std::string pmodel;
  std::vector<double> pgammas;
  std::size_t ppairs = 200;
  auto* c_samp = app.add_subcommand("sample-sweep", "EQAN-R accuracy across sampling factors (0 = full mask)");
  pgen.add(c_samp);
  c_samp->add_option("--model", pmodel, "EQAN-R checkpoint")->required();
  c_samp->add_option("--gammas", pgammas, "sampling factors");
  c_samp->add_option("--pairs", ppairs, "evaluation pairs")->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);
    std::cerr << "{\"kind\":\"usage\",\"message\":" << json(e.what()).dump() << "}\n";
    return 2;
  }

  try {
    const std::size_t threads = eqan::thread_count();
    std::ofstream file;
    if (c_gen->parsed()) {
      auto d = gen.data();
      d.gen.seed = seed;
      const auto s = eqan::make_sample(d, seed);
      json j = {{"reference", eqan::to_json(s.ref)}, {"query", eqan::to_json(s.query)}, {"gt", s.gt}, {"seed", seed}};
      open_out(out, file) << j.dump(2) << '\n';
    } else if (c_train->parsed()) {
      if (out.empty()) throw eqan::ConfigError("train: --out checkpoint path is required");
      const auto data = tgen.data();
      auto cfg = ttrain.cfg;
      cfg.seed = seed;
      cfg.threads = threads;
      cfg.checkpoint = out;
      auto model = eqan::init_model<float>(tmodel.spec(data.gen.dim), seed);
      std::ofstream mf;
      if (!metrics.empty()) {
        mf.open(metrics, std::ios::trunc);
        if (!mf) throw eqan::InputError("cannot open metrics file: " + metrics);
        mf << "iter,loss,eval_acc,wallclock\n";
        mf.precision(10);
      }
      auto res = eqan::train(model, cfg, data, [&](const eqan::MetricRow& r) {
        if (!mf.is_open()) return;
        mf << r.iter << ',' << r.loss << ',';
        if (!std::isnan(r.eval_acc)) mf << r.eval_acc;
        mf << ',' << r.wallclock << '\n';
      });
      json summary = {{"checkpoint", out},
                      {"best_eval_acc", res.best_acc},
                      {"iters", cfg.total_iters},
                      {"seed", seed},
                      {"config_hash", eqan::config_hash({{"model", eqan::to_json(model.spec)},
                                                         {"train", eqan::to_json(cfg)},
                                                         {"data", eqan::to_json(data)}})}};
      std::cout << summary.dump(2) << '\n';
    } else if (c_eval->parsed()) {
      const auto data = egen.data();
      eqan::Matcher matcher;
      json id;
      if (!emodel.empty()) {
        matcher = eqan::model_matcher(eqan::load_checkpoint(emodel));
        id = {{"model", emodel}};
      } else {
        const auto cc = esolver.config();
        matcher = eqan::classical_matcher(cc);
        id = eqan::to_json(cc);
      }
      std::vector<double> acc(epairs);
      eqan::parallel_for(epairs, threads, [&](std::size_t i) {
        const auto s = eqan::eval_seed(seed, i);
        acc[i] = matcher(eqan::make_pair(data, s), eqan::derive_seed(s, 99));
      });
      json j = {{"accuracy", eqan::mean(acc)},
                {"std_over_pairs", eqan::stddev(acc)},
                {"pairs", epairs},
                {"seed", seed},
                {"matcher", id},
                {"config_hash", eqan::config_hash({{"data", eqan::to_json(data)}, {"matcher", id}, {"pairs", epairs}})}};
      open_out(out, file) << j.dump(2) << '\n';
    } else if (c_match->parsed()) {
      const json pj = read_json_file(minput);
      if (!pj.contains("reference") || !pj.contains("query")) throw eqan::InputError("match: input needs reference and query");
      const auto ref = eqan::graph_from_json(pj["reference"]);
      const auto query = eqan::graph_from_json(pj["query"]);
      const std::vector<std::size_t> gt = pj.contains("gt") ? read_perm(pj["gt"]) : std::vector<std::size_t>{};
      const auto in = eqan::prepare_pair(ref, query, gt);
      eqan::MatchResult r = mmodel.empty() ? eqan::classical_match(msolver.config(), in)
                                           : eqan::predict(eqan::load_checkpoint(mmodel), in, seed);
      std::vector<std::size_t> perm(r.perm.begin(), r.perm.begin() + static_cast<std::ptrdiff_t>(ref.size()));
      json j = {{"perm", perm}, {"similarity", eqan::graph_similarity(r.q, r.r)}};
      if (!gt.empty()) j["accuracy"] = r.accuracy;
      open_out(out, file) << j.dump(2) << '\n';
    } else if (c_sweep->parsed()) {
      eqan::SweepSpec spec;
      spec.kind = eqan::parse_sweep(skind);
      spec.grid = sgrid;
      spec.repeats = srepeats;
      spec.pairs = spairs;
      spec.seed = seed;
      spec.knn = sknn;
      eqan::Matcher matcher;
      if (!smodel.empty()) {
        matcher = eqan::model_matcher(eqan::load_checkpoint(smodel));
        std::ifstream f(smodel, std::ios::binary);
        std::vector<char> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        spec.matcher_id = {{"model_fnv1a", eqan::hex64(eqan::fnv1a(bytes.data(), bytes.size()))}};
      } else {
        const auto cc = ssolver.config();
        matcher = eqan::classical_matcher(cc);
        spec.matcher_id = eqan::to_json(cc);
      }
      eqan::write_sweep_csv(open_out(out, file), eqan::run_robustness_sweep(spec, matcher, threads));
    } else if (c_ablate->parsed()) {
      auto cfg = atrain.cfg;
      cfg.seed = seed;
      cfg.threads = threads;
      const auto base = amodel.spec(2);
      auto ids = avariants.empty() ? eqan::default_variants() : avariants;
      if (agrid) {
        for (const auto& v : eqan::width_grid()) ids.push_back(v);
        for (const auto& v : eqan::depth_grid()) ids.push_back(v);
      }
      std::vector<eqan::AblationRow> rows;
      const auto data = eqan::ablation_data();
      for (const auto& id : ids) {
        rows.push_back(eqan::run_variant(eqan::make_variant(id, base), cfg, data, apairs, aseeds,
                                         eqan::derive_seed(seed, 0xab1a7e)));
        std::cerr << id << ' ' << rows.back().accuracy << '\n';
      }
      eqan::write_ablation_csv(open_out(out, file), rows);
    } else if (c_diag->parsed()) {
      dcfg.seed = seed;
      eqan::write_diagnostics_csv(open_out(out, file), eqan::run_diagnostics(dcfg, threads));
    } else if (c_samp->parsed()) {
      const auto data = pgen.data();
      const auto model = eqan::load_checkpoint(pmodel);
      const auto gammas = pgammas.empty() ? eqan::default_gammas() : pgammas;
      eqan::write_sampling_csv(open_out(out, file),
                               eqan::run_sampling_sweep(model, data, gammas, ppairs, seed, threads));
    }
  } catch (const eqan::Error& e) {
    std::cerr << json{{"kind", e.kind()}, {"message", e.what()}}.dump() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << json{{"kind", "internal"}, {"message", e.what()}}.dump() << '\n';
    return 3;
  }
  return 0;
}
