#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <numbers>
#include <optional>
#include <ostream>
#include <string>
#include <thread>
#include <vector>

#include "eqan/checkpoint.hpp"
#include "eqan/errors.hpp"
#include "eqan/forward.hpp"
#include "eqan/graph.hpp"
#include "eqan/model.hpp"
#include "eqan/rng.hpp"

namespace eqan {

// Worker count from EQAN_THREADS, defaulting to the hardware concurrency.
inline std::size_t thread_count() {
  if (const char* env = std::getenv("EQAN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end == env || *end != '\0' || v < 1) throw ConfigError("EQAN_THREADS must be a positive integer");
    return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs fn(0..count) on up to `threads` workers; each index is handled by
// exactly one worker and results are written by index, so the outcome does
// not depend on scheduling.
inline void parallel_for(std::size_t count, std::size_t threads, const std::function<void(std::size_t)>& fn) {
  threads = std::min(threads, count);
  if (threads <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (std::size_t t = 0; t < threads; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = t; i < count; i += threads) fn(i);
      } catch (...) {
        errors[t] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Distribution of synthetic training / evaluation pairs.
struct DataConfig {
  GenConfig gen;
  std::size_t n_out_max = 0;  // > gen.n_out: outlier count drawn per pair
  double max_rotation = 0;    // radians; query rotated by U[0, max]
  bool rebuild_edges = false;

  void validate() const {
    gen.validate();
    if (max_rotation < 0) throw ConfigError("data: max_rotation must be >= 0");
    if (max_rotation > 0 && gen.dim != 2) throw UnsupportedError("data: rotation needs 2-D points");
  }
};

struct SamplePair {
  Graph ref;
  Graph query;
  std::vector<std::size_t> gt;
};

inline SamplePair make_sample(const DataConfig& data, std::uint64_t seed) {
  GenConfig g = data.gen;
  g.seed = seed;
  Rng extra = Rng(seed).split(7);
  if (data.n_out_max > g.n_out) g.n_out += extra.index(data.n_out_max - g.n_out + 1);
  SamplePair s;
  s.ref = generate_reference(g);
  PerturbOptions po;
  po.rebuild_edges = data.rebuild_edges;
  auto pr = perturb(s.ref, g, po);
  s.query = std::move(pr.query);
  s.gt = std::move(pr.gt);
  if (data.max_rotation > 0) s.query = rotate(s.query, extra.uniform(0.0, data.max_rotation));
  return s;
}

inline PairInput make_pair(const DataConfig& data, std::uint64_t seed) {
  const auto s = make_sample(data, seed);
  return prepare_pair(s.ref, s.query, s.gt);
}

struct TrainConfig {
  double lr = 1e-4;
  std::size_t batch = 8;
  std::size_t total_iters = 5000;
  std::size_t warmup_iters = 500;
  double warmup_lr = 1e-10;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  std::uint64_t seed = 0;
  std::size_t eval_every = 500;
  std::size_t eval_pairs = 50;
  std::size_t threads = 1;
  std::string checkpoint;  // best model path; empty: keep in memory only

  void validate() const {
    if (!(lr > 0) || !(warmup_lr > 0)) throw ConfigError("train: learning rates must be > 0");
    if (batch < 1) throw ConfigError("train: batch must be >= 1");
    if (warmup_iters > total_iters) throw ConfigError("train: warmup_iters must be <= total_iters");
    if (!(beta1 >= 0 && beta1 < 1) || !(beta2 >= 0 && beta2 < 1)) throw ConfigError("train: Adam betas must be in [0,1)");
    if (!(adam_eps > 0)) throw ConfigError("train: Adam eps must be > 0");
    if (threads < 1) throw ConfigError("train: threads must be >= 1");
  }
};

template <typename T>
struct AdamState {
  std::vector<std::vector<T>> m, v;
  std::size_t step = 0;

  explicit AdamState(const Model<T>& model) {
    for (const auto& p : model.params) {
      m.emplace_back(p.value.size(), T{0});
      v.emplace_back(p.value.size(), T{0});
    }
  }
};

// Bias-corrected Adam update of every trainable block.
template <typename T>
void adam_step(Model<T>& model, const std::vector<std::vector<T>>& grads, AdamState<T>& st, const TrainConfig& cfg,
               double lr) {
  if (grads.size() != model.params.size()) throw InputError("adam_step: gradient blocks do not match parameters");
  for (const auto& g : grads)
    for (T x : g)
      if (!std::isfinite(static_cast<double>(x))) throw TrainingError("adam_step: non-finite gradient");
  ++st.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(st.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(st.step));
  for (std::size_t b = 0; b < model.params.size(); ++b) {
    auto& p = model.params[b];
    if (!p.trainable) continue;
    if (grads[b].size() != p.value.size()) throw InputError("adam_step: gradient shape mismatch");
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = static_cast<double>(grads[b][k]);
      const double m = cfg.beta1 * static_cast<double>(st.m[b][k]) + (1.0 - cfg.beta1) * g;
      const double v = cfg.beta2 * static_cast<double>(st.v[b][k]) + (1.0 - cfg.beta2) * g * g;
      st.m[b][k] = static_cast<T>(m);
      st.v[b][k] = static_cast<T>(v);
      const double step = lr * (m / c1) / (std::sqrt(v / c2) + cfg.adam_eps);
      p.value[k] = static_cast<T>(static_cast<double>(p.value[k]) - step);
    }
  }
}

struct MetricRow {
  std::size_t iter = 0;
  double loss = 0;
  double eval_acc = std::numeric_limits<double>::quiet_NaN();
  double wallclock = 0;
};

inline void write_metrics_csv(std::ostream& os, const std::vector<MetricRow>& rows) {
  os << "iter,loss,eval_acc,wallclock\n";
  os.precision(10);
  for (const auto& r : rows) {
    os << r.iter << ',' << r.loss << ',';
    if (!std::isnan(r.eval_acc)) os << r.eval_acc;
    os << ',' << r.wallclock << '\n';
  }
}

// Loss and parameter gradients for one pair.
template <typename T>
std::pair<double, std::vector<std::vector<T>>> loss_and_grad(const Model<T>& model, const PairInput& in,
                                                             std::uint64_t seed) {
  Tape<T> tp;
  ForwardOptions opt;
  opt.training = true;
  opt.need_grad = true;
  opt.with_loss = true;
  opt.seed = seed;
  auto fp = forward(tp, model, in, opt);
  const double loss = static_cast<double>(tp.value(*fp.loss)[0]);
  tp.backward(*fp.loss);
  std::vector<std::vector<T>> grads;
  grads.reserve(fp.leaves.size());
  for (auto v : fp.leaves) grads.push_back(tp.grad(v));
  return {loss, std::move(grads)};
}

inline std::uint64_t eval_seed(std::uint64_t seed, std::size_t i) { return derive_seed(seed ^ 0x5eedfe11a11ULL, i); }

// Mean held-out accuracy over `pairs` pairs drawn from the `seed` stream.
template <typename T>
std::vector<double> evaluate_accuracies(const Model<T>& model, const DataConfig& data, std::size_t pairs,
                                        std::uint64_t seed, std::size_t threads, int decision_T = 0) {
  std::vector<double> acc(pairs);
  parallel_for(pairs, threads, [&](std::size_t i) {
    const auto s = eval_seed(seed, i);
    acc[i] = predict(model, make_pair(data, s), derive_seed(s, 99), decision_T).accuracy;
  });
  return acc;
}

inline double mean(const std::vector<double>& v) {
  double s = 0;
  for (double x : v) s += x;
  return v.empty() ? 0.0 : s / static_cast<double>(v.size());
}

inline double stddev(const std::vector<double>& v) {
  if (v.size() < 2) return 0.0;
  const double m = mean(v);
  double s = 0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / static_cast<double>(v.size() - 1));
}

template <typename T>
struct TrainResult {
  Model<T> best;
  Model<T> last;
  double best_acc = -1;
  std::vector<MetricRow> metrics;
};

inline std::uint64_t train_pair_seed(std::uint64_t seed, std::size_t iter, std::size_t b) {
  return derive_seed(derive_seed(seed, 0x747261696eULL + iter), b);
}

// Streams fresh pairs; the batch gradient is the mean of per-pair gradients
// summed in batch order, so the trajectory is independent of thread count.
template <typename T>
TrainResult<T> train(Model<T> model, const TrainConfig& cfg, const DataConfig& data,
                     const std::function<void(const MetricRow&)>& on_row = {}) {
  cfg.validate();
  data.validate();
  const auto t0 = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count(); };
  TrainResult<T> res{model, model, -1, {}};
  AdamState<T> st(model);
  const std::uint64_t held_out = derive_seed(cfg.seed, 0x68656c64ULL);
  auto eval = [&](const Model<T>& m) {
    return cfg.eval_pairs ? mean(evaluate_accuracies(m, data, cfg.eval_pairs, held_out, cfg.threads)) : 0.0;
  };
  auto fail = [&](const std::string& why) {
    if (!cfg.checkpoint.empty()) save_checkpoint(res.last, cfg.checkpoint + ".last-good");
    throw TrainingError(why);
  };
  for (std::size_t it = 0; it < cfg.total_iters; ++it) {
    const double lr = it < cfg.warmup_iters ? cfg.warmup_lr : cfg.lr;
    std::vector<double> losses(cfg.batch);
    std::vector<std::vector<std::vector<T>>> grads(cfg.batch);
    parallel_for(cfg.batch, cfg.threads, [&](std::size_t b) {
      const auto s = train_pair_seed(cfg.seed, it, b);
      auto [l, g] = loss_and_grad(model, make_pair(data, s), derive_seed(s, 1));
      losses[b] = l;
      grads[b] = std::move(g);
    });
    double loss = 0;
    for (double l : losses) loss += l;
    loss /= static_cast<double>(cfg.batch);
    if (!std::isfinite(loss)) fail("non-finite loss at iteration " + std::to_string(it));
    auto total = grads[0];
    for (std::size_t b = 1; b < cfg.batch; ++b)
      for (std::size_t k = 0; k < total.size(); ++k)
        for (std::size_t e = 0; e < total[k].size(); ++e) total[k][e] += grads[b][k][e];
    const T inv = static_cast<T>(1.0 / static_cast<double>(cfg.batch));
    for (auto& blk : total)
      for (auto& x : blk) x *= inv;
    try {
      adam_step(model, total, st, cfg, lr);
    } catch (const TrainingError& e) {
      fail(std::string(e.what()) + " at iteration " + std::to_string(it));
    }
    res.last = model;
    MetricRow row{it + 1, loss, std::numeric_limits<double>::quiet_NaN(), elapsed()};
    if (cfg.eval_every && ((it + 1) % cfg.eval_every == 0 || it + 1 == cfg.total_iters)) {
      row.eval_acc = eval(model);
      if (row.eval_acc > res.best_acc) {
        res.best_acc = row.eval_acc;
        res.best = model;
        if (!cfg.checkpoint.empty()) save_checkpoint(model, cfg.checkpoint);
      }
    }
    res.metrics.push_back(row);
    if (on_row) on_row(row);
  }
  if (cfg.total_iters == 0 || cfg.eval_every == 0) {
    res.best = model;
    if (!cfg.checkpoint.empty()) save_checkpoint(model, cfg.checkpoint);
  }
  return res;
}

}  // namespace eqan
