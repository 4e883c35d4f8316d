#pragma once

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include <charconv>
#include <cstdio>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "neuralmd/errors.hpp"
#include "neuralmd/training.hpp"

namespace neuralmd {

/// Reference solver settings; also the evaluation grid for trained networks.
struct ReferenceConfig {
  std::vector<int> grid{256};
  double nkge_dt_fraction = 1.0 / 64.0;  // direct NKGE step = fraction * eps^2
  double limit_dt = 1.0 / 256.0;         // NLSW / NLSE step
  double snapshot_dt = 0.1;
  std::vector<double> convergence_eps{0.2, 0.1, 0.05};
  double convergence_T = 4.0;
};

struct DiagnoseConfig {
  int probes = 50;
  double lambda_probe = 1e-6;
  double dt_fraction = 0.02;
  int samples = 200;
  double radius = 0.05;
  int shifts = 5;
};

struct RunConfig {
  ProblemSpec problem;
  std::string init = "benchmark";
  TrainConfig train;
  std::string perturb_preset = "model";
  ReferenceConfig reference;
  DiagnoseConfig diagnose;
  std::string out = "out";

  std::vector<double> snapshot_times() const {
    std::vector<double> t;
    const long n = std::lround(problem.T / reference.snapshot_dt);
    for (long i = 0; i <= n; ++i) t.push_back(std::min(problem.T, double(i) * reference.snapshot_dt));
    return t;
  }
  Grid grid() const {
    std::vector<int> n = reference.grid;
    if (n.size() == 1 && problem.dims() > 1) n.assign(std::size_t(problem.dims()), n[0]);
    return Grid(n, problem.lower, problem.upper);
  }
};

namespace config_detail {

inline std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) s += ',';
    if constexpr (std::is_floating_point_v<T>) s += fmt(v[i]);
    else s += std::to_string(v[i]);
  }
  return s;
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t") - b + 1);
}

template <class T>
T parse_scalar(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const char* end = s.data() + s.size();
  auto [p, ec] = std::from_chars(s.data(), end, v);
  if (ec != std::errc() || p != end) throw ConfigError("config key '" + key + "': cannot parse '" + raw + "'");
  return v;
}

template <class T>
std::vector<T> parse_list(const std::string& key, const std::string& raw) {
  std::vector<T> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(parse_scalar<T>(key, item));
  if (out.empty()) throw ConfigError("config key '" + key + "': empty list");
  return out;
}

inline bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("config key '" + key + "': expected true/false, got '" + raw + "'");
}

/// Binds each `section.key` to a field so reading, defaulting and echoing share one table.
class Binder {
 public:
  template <class T>
  void scalar(const std::string& key, T& field) {
    entries_.push_back({key, [&field, key](const std::string& raw) { field = parse_scalar<T>(key, raw); },
                        [&field] {
                          if constexpr (std::is_floating_point_v<T>) return fmt(field);
                          else return std::to_string(field);
                        }});
  }
  template <class T>
  void list(const std::string& key, std::vector<T>& field) {
    entries_.push_back({key, [&field, key](const std::string& raw) { field = parse_list<T>(key, raw); },
                        [&field] { return join(field); }});
  }
  void flag(const std::string& key, bool& field) {
    entries_.push_back({key, [&field, key](const std::string& raw) { field = parse_bool(key, raw); },
                        [&field] { return std::string(field ? "true" : "false"); }});
  }
  void text(const std::string& key, std::string& field) {
    entries_.push_back({key, [&field](const std::string& raw) { field = trim(raw); }, [&field] { return field; }});
  }

  void read(const boost::property_tree::ptree& pt) {
    std::map<std::string, const Entry*> by_key;
    for (auto& e : entries_) by_key[e.key] = &e;
    for (auto& [section, body] : pt) {
      if (body.empty() && !body.data().empty())
        throw ConfigError("config key '" + section + "' must live inside a [section]");
      for (auto& [name, value] : body) {
        if (!value.empty()) throw ConfigError("nested config entries are not supported: " + section + "." + name);
        auto it = by_key.find(section + "." + name);
        if (it == by_key.end()) throw ConfigError("unknown config key '" + section + "." + name + "'");
        it->second->set(value.data());
      }
    }
  }

  boost::property_tree::ptree write() const {
    boost::property_tree::ptree pt;
    for (auto& e : entries_) pt.put(boost::property_tree::ptree::path_type(e.key, '.'), e.get());
    return pt;
  }

 private:
  struct Entry {
    std::string key;
    std::function<void(const std::string&)> set;
    std::function<std::string()> get;
  };
  std::vector<Entry> entries_;
};

inline std::string variant_name(GateVariant v) { return v == GateVariant::Tanh ? "tanh" : "relu-tanh"; }

}  // namespace config_detail

/// Perturbation radii/counts as edited in the config (the preset fills both when the lists are
/// left at their defaults).
struct PerturbLists {
  std::vector<double> radii;
  std::vector<int> counts;
};

namespace config_detail {

/// Every key of the config file, bound to the RunConfig fields. Text-valued enums go through
/// the string proxies and are resolved by finalize().
struct Layout {
  std::string variant;
  PerturbLists perturb;
  Binder b;

  explicit Layout(RunConfig& c) {
    auto& p = c.problem;
    auto& t = c.train;
    variant = variant_name(t.gate.variant);
    for (auto& s : t.arch.perturb.scales) perturb.radii.push_back(s.radius), perturb.counts.push_back(s.count);

    b.scalar("problem.eps", p.eps);
    b.scalar("problem.lambda", p.lambda);
    b.list("problem.lower", p.lower);
    b.list("problem.upper", p.upper);
    b.scalar("problem.T", p.T);
    b.text("problem.init", c.init);

    b.scalar("network.d_model", t.arch.d_model);
    b.scalar("network.modes", t.arch.embedding.modes);
    b.scalar("network.mixer_hidden", t.arch.mixer_hidden);
    b.scalar("network.head_hidden", t.arch.head_hidden);
    b.text("network.preset", c.perturb_preset);
    b.list("network.radii", perturb.radii);
    b.list("network.counts", perturb.counts);
    b.list("network.baseline_hidden", t.mlp_hidden);

    b.scalar("gate.alpha", t.gate.alpha);
    b.scalar("gate.gamma", t.gate.gamma);
    b.scalar("gate.eta", t.gate.eta);
    b.scalar("gate.eps_tol", t.gate.eps_tol);
    b.scalar("gate.delta_max", t.gate.delta_max);
    b.text("gate.variant", variant);
    b.flag("gate.enabled", t.gated);
    b.flag("gate.residual_weight", t.gate_residual_weight);

    b.scalar("training.iterations", t.optimizer.iterations);
    b.scalar("training.adam_iterations", t.optimizer.adam_iterations);
    b.scalar("training.adam_lr", t.optimizer.adam_lr);
    b.scalar("training.lbfgs_history", t.optimizer.lbfgs_history);
    b.scalar("training.lbfgs_shrink", t.optimizer.lbfgs_shrink);
    b.scalar("training.lbfgs_max_probes", t.optimizer.lbfgs_max_probes);
    b.scalar("training.weight_res", t.weights.res);
    b.scalar("training.weight_ic", t.weights.ic);
    b.scalar("training.weight_bd", t.weights.bd);
    b.scalar("training.chunk", t.chunk);
    b.scalar("training.ic_grid", t.ic_grid);
    b.scalar("training.seed", t.seed);
    b.scalar("training.probes", t.probes.count);
    b.scalar("training.probe_dt_fraction", t.probes.dt_fraction);

    b.scalar("sampler.residual", t.sampler.residual);
    b.scalar("sampler.initial", t.sampler.initial);
    b.scalar("sampler.boundary", t.sampler.boundary);
    b.scalar("sampler.resample_every", t.sampler.resample_every);
    b.scalar("sampler.swap_fraction", t.sampler.swap_fraction);
    b.scalar("sampler.window_floor", t.sampler.window_floor);
    b.scalar("sampler.fallback_window", t.sampler.fallback_window);

    b.list("reference.grid", c.reference.grid);
    b.scalar("reference.nkge_dt_fraction", c.reference.nkge_dt_fraction);
    b.scalar("reference.limit_dt", c.reference.limit_dt);
    b.scalar("reference.snapshot_dt", c.reference.snapshot_dt);
    b.list("reference.convergence_eps", c.reference.convergence_eps);
    b.scalar("reference.convergence_T", c.reference.convergence_T);

    b.scalar("diagnose.probes", c.diagnose.probes);
    b.scalar("diagnose.lambda_probe", c.diagnose.lambda_probe);
    b.scalar("diagnose.dt_fraction", c.diagnose.dt_fraction);
    b.scalar("diagnose.samples", c.diagnose.samples);
    b.scalar("diagnose.radius", c.diagnose.radius);
    b.scalar("diagnose.shifts", c.diagnose.shifts);

    b.text("output.dir", c.out);
  }
};

}  // namespace config_detail

/// Resolve text-valued settings and check cross-field consistency.
inline void finalize(RunConfig& c, const std::string& variant, PerturbLists perturb, bool lists_set) {
  c.problem.init = initial_data(c.init);
  if (variant == "tanh") c.train.gate.variant = GateVariant::Tanh;
  else if (variant == "relu-tanh") c.train.gate.variant = GateVariant::ReluTanh;
  else throw ConfigError("gate.variant must be tanh or relu-tanh");

  if (!lists_set) {
    PerturbConfig p;
    if (c.perturb_preset == "model") p = PerturbConfig::model_preset();
    else if (c.perturb_preset == "benchmark") p = PerturbConfig::benchmark_preset();
    else throw ConfigError("network.preset must be model or benchmark");
    c.train.arch.perturb = p;
  } else {
    if (perturb.radii.size() != perturb.counts.size()) throw ConfigError("network.radii and network.counts differ in length");
    c.train.arch.perturb.scales.clear();
    for (std::size_t i = 0; i < perturb.radii.size(); ++i) c.train.arch.perturb.scales.push_back({perturb.radii[i], perturb.counts[i]});
  }
  c.train.arch.perturb.validate();

  c.problem.validate();
  const auto& o = c.train.optimizer;
  if (o.iterations < 0 || o.adam_iterations < 0) throw ConfigError("iteration counts must be >= 0");
  if (c.train.sampler.residual < 1 || c.train.sampler.initial < 1 || c.train.sampler.boundary < 2 || c.train.sampler.boundary % 2)
    throw ConfigError("sampler sizes must be positive and sampler.boundary even");
  if (c.train.sampler.swap_fraction < 0.0 || c.train.sampler.swap_fraction > 1.0) throw ConfigError("sampler.swap_fraction must lie in [0, 1]");
  if (c.train.chunk < 1) throw ConfigError("training.chunk must be >= 1");
  if (!(c.reference.snapshot_dt > 0.0) || !(c.reference.limit_dt > 0.0) || !(c.reference.nkge_dt_fraction > 0.0))
    throw ConfigError("reference time steps must be positive");
  if (c.reference.grid.size() != 1 && int(c.reference.grid.size()) != c.problem.dims())
    throw ConfigError("reference.grid needs one entry or one per dimension");
  if (c.train.gate.delta_max < 0.0 || c.train.gate.eta < 0.0) throw ConfigError("gate.eta and gate.delta_max must be >= 0");
  try {
    (void)c.grid();
  } catch (const StructuralError& e) {
    throw ConfigError(std::string("reference.grid: ") + e.what());
  }
}

inline RunConfig parse_config(const std::string& text) {
  RunConfig c;
  config_detail::Layout lay(c);
  const auto defaults = lay.perturb;
  boost::property_tree::ptree pt;
  std::istringstream is(text);
  try {
    boost::property_tree::read_ini(is, pt);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(std::string("config syntax: ") + e.what());
  }
  lay.b.read(pt);
  const bool lists_set = lay.perturb.radii != defaults.radii || lay.perturb.counts != defaults.counts;
  finalize(c, lay.variant, lay.perturb, lists_set);
  return c;
}

inline RunConfig load_config(const std::string& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot read config file " + path);
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

inline RunConfig default_config() { return parse_config(""); }

/// The effective configuration with every key spelled out; parsing it reproduces the run.
inline std::string effective_config(const RunConfig& c) {
  RunConfig copy = c;
  config_detail::Layout lay(copy);
  std::ostringstream os;
  boost::property_tree::write_ini(os, lay.b.write());
  return os.str();
}

}  // namespace neuralmd
