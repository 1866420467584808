#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "eqan/affinity.hpp"
#include "eqan/errors.hpp"
#include "eqan/rng.hpp"
#include "eqan/solvers.hpp"

#include <json.hpp>

namespace eqan {

enum class Mode : std::uint32_t { EQAN = 0, EQAN_U = 1, EQAN_R = 2 };
enum class Architecture : std::uint32_t { Ensemble = 0, NaiveAverage = 1 };

inline std::string to_string(Mode m) {
  switch (m) {
    case Mode::EQAN_U: return "eqan-u";
    case Mode::EQAN_R: return "eqan-r";
    default: return "eqan";
  }
}

inline Mode parse_mode(const std::string& s) {
  if (s == "eqan") return Mode::EQAN;
  if (s == "eqan-u") return Mode::EQAN_U;
  if (s == "eqan-r") return Mode::EQAN_R;
  throw ConfigError("unknown mode '" + s + "' (expected eqan, eqan-u or eqan-r)");
}

inline std::string to_string(Architecture a) { return a == Architecture::NaiveAverage ? "naive-average" : "ensemble"; }

inline Architecture parse_architecture(const std::string& s) {
  if (s == "ensemble") return Architecture::Ensemble;
  if (s == "naive-average") return Architecture::NaiveAverage;
  throw ConfigError("unknown architecture '" + s + "' (expected ensemble or naive-average)");
}

struct ModelSpec {
  std::uint32_t layers = 3;    // L
  std::uint32_t channels = 8;  // C
  std::uint32_t dim = 2;       // d
  Mode mode = Mode::EQAN;
  SolverKind solver = SolverKind::DPGM;
  Architecture arch = Architecture::Ensemble;
  UnaryMode unary = UnaryMode::Gaussian;
  bool decision_all = true;       // concatenate V^(0..L) vs V^(L) only
  bool learn_solver = true;       // learned vs frozen random solver params
  bool ste_into_features = true;  // route STE gradient into S's producers
  std::uint32_t naive_steps = 10;
  std::uint32_t sinkhorn_T = 5;
  std::uint32_t decision_T_train = 5;
  std::uint32_t decision_T_eval = 50;
  double gamma = 1.0;
  double sigma_init = 1.0;

  void validate() const {
    if (layers < 1) throw ConfigError("model: L must be >= 1");
    if (channels < 1) throw ConfigError("model: C must be >= 1");
    if (dim < 1) throw ConfigError("model: d must be >= 1");
    if (sinkhorn_T < 1 || decision_T_train < 1 || decision_T_eval < 1)
      throw ConfigError("model: Sinkhorn round counts must be >= 1");
    if (mode == Mode::EQAN_R) {
      if (!(gamma > 0)) throw ConfigError("model: EQAN-R requires gamma > 0");
      if (solver == SolverKind::SM) throw UnsupportedError("model: EQAN-R sampling needs an exp-normalized solver (dpgm or gagm)");
    }
    if (arch == Architecture::NaiveAverage) {
      if (mode != Mode::EQAN) throw UnsupportedError("model: naive averaging has no affinity update or sampling");
      if (naive_steps < 1) throw ConfigError("model: naive_steps must be >= 1");
    }
    if (!(sigma_init > 0)) throw ConfigError("model: sigma_init must be > 0");
  }

  bool has_solver_params() const { return solver == SolverKind::DPGM; }
};

inline nlohmann::json to_json(const ModelSpec& s) {
  return {{"layers", s.layers},
          {"channels", s.channels},
          {"dim", s.dim},
          {"mode", to_string(s.mode)},
          {"solver", to_string(s.solver)},
          {"arch", to_string(s.arch)},
          {"unary", to_string(s.unary)},
          {"decision_all", s.decision_all},
          {"learn_solver", s.learn_solver},
          {"ste_into_features", s.ste_into_features},
          {"naive_steps", s.naive_steps},
          {"sinkhorn_T", s.sinkhorn_T},
          {"decision_T_train", s.decision_T_train},
          {"decision_T_eval", s.decision_T_eval},
          {"gamma", s.gamma},
          {"sigma_init", s.sigma_init}};
}

inline double softplus_inverse(double y) { return std::log(std::expm1(y)); }

// Annealed GAGM inverse temperature for block l (1-based).
inline double gagm_beta(std::uint32_t l) { return 0.5 * std::pow(1.075, static_cast<double>(l) - 1.0); }

template <typename T>
struct ParamBlock {
  std::string name;
  std::vector<T> value;
  bool trainable = true;
};

// All learnable parameters, in the fixed order they are serialized.
template <typename T>
struct Model {
  ModelSpec spec;
  std::vector<ParamBlock<T>> params;

  std::size_t index_of(const std::string& name) const {
    for (std::size_t k = 0; k < params.size(); ++k)
      if (params[k].name == name) return k;
    throw InputError("model: no parameter block '" + name + "'");
  }
  std::vector<T>& operator[](const std::string& name) { return params[index_of(name)].value; }
  const std::vector<T>& operator[](const std::string& name) const { return params[index_of(name)].value; }

  std::size_t parameter_count() const {
    std::size_t k = 0;
    for (const auto& p : params) k += p.value.size();
    return k;
  }

  template <typename U>
  Model<U> cast() const {
    Model<U> m;
    m.spec = spec;
    for (const auto& p : params) m.params.push_back({p.name, std::vector<U>(p.value.begin(), p.value.end()), p.trainable});
    return m;
  }
};

namespace detail {

template <typename T>
std::vector<T> uniform_block(Rng& rng, std::size_t count, double bound) {
  std::vector<T> v(count);
  for (auto& x : v) x = static_cast<T>(rng.uniform(-bound, bound));
  return v;
}

// Mixing kernel: scaled identity-plus-noise keeps channel identity at init.
template <typename T>
std::vector<T> mixing_block(Rng& rng, std::size_t c) {
  const double bound = std::sqrt(3.0 / static_cast<double>(c));
  auto w = uniform_block<T>(rng, c * c, 0.5 * bound);
  for (std::size_t i = 0; i < c; ++i) w[i * c + i] += static_cast<T>(1.0);
  return w;
}

}  // namespace detail

template <typename T>
Model<T> init_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  Model<T> m;
  m.spec = spec;
  Rng rng = Rng(seed).split(0x6d6f64656cULL);
  const std::size_t c = spec.channels, l = spec.layers, d = spec.dim;
  const T solver_init = static_cast<T>(softplus_inverse(0.5));
  auto solver_block = [&] {
    if (spec.learn_solver) return std::vector<T>(2 * c, solver_init);
    // Frozen random internal parameters: w in [0.05, 1].
    std::vector<T> v(2 * c);
    for (auto& x : v) x = static_cast<T>(softplus_inverse(rng.uniform(0.05, 1.0)));
    return v;
  };
  if (spec.arch == Architecture::NaiveAverage) {
    // Independent solvers; with learn_solver off only the final weights train.
    m.params.push_back({"log_sigma", {static_cast<T>(std::log(spec.sigma_init))}, spec.learn_solver});
    if (spec.has_solver_params()) m.params.push_back({"average.solver", solver_block(), spec.learn_solver});
    m.params.push_back({"average.weight", std::vector<T>(c, static_cast<T>(1.0 / static_cast<double>(c))), true});
    return m;
  }
  m.params.push_back({"log_sigma", {static_cast<T>(std::log(spec.sigma_init))}, true});
  m.params.push_back({"init.weight", detail::uniform_block<T>(rng, c * 3 * d, std::sqrt(3.0 / (3.0 * d))), true});
  m.params.push_back({"init.bias", std::vector<T>(c, T{0}), true});
  for (std::size_t b = 1; b <= l; ++b) {
    const std::string p = "block" + std::to_string(b) + ".";
    if (spec.has_solver_params()) m.params.push_back({p + "solver", solver_block(), spec.learn_solver});
    m.params.push_back({p + "mix.weight", detail::mixing_block<T>(rng, c), true});
    m.params.push_back({p + "mix.bias", std::vector<T>(c, T{0}), true});
    if (spec.mode == Mode::EQAN_U && b >= 2) {
      m.params.push_back({p + "update.w", std::vector<T>(c, static_cast<T>(0.1)), true});
      m.params.push_back({p + "update.u", std::vector<T>(c, T{0}), true});
    }
  }
  const std::size_t dec_in = spec.decision_all ? (l + 1) * c : c;
  m.params.push_back({"decision.weight", detail::uniform_block<T>(rng, dec_in, std::sqrt(3.0 / dec_in)), true});
  m.params.push_back({"decision.bias", {T{0}}, true});
  return m;
}

}  // namespace eqan
