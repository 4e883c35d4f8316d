#pragma once

// Algorithm 1 end to end: optimizers, gradient-correlation probes, gated collocation resampling and
// the two pretraining stages (envelope z, then remainder r with z frozen), plus the vanilla
// collocation baseline that trains u directly.

#include <Eigen/Dense>

#include <algorithm>
#include <chrono>
#include <cinttypes>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <deque>
#include <fstream>
#include <functional>
#include <memory>
#include <numeric>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "neuralmd/autodiff.hpp"
#include "neuralmd/errors.hpp"
#include "neuralmd/fourier.hpp"
#include "neuralmd/gate.hpp"
#include "neuralmd/network.hpp"
#include "neuralmd/physics.hpp"
#include "neuralmd/rng.hpp"

namespace neuralmd {

// ---------------------------------------------------------------------------------------------
// Optimizers

struct AdamState {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  long step = 0;
  std::vector<double> m, v;
};

inline void adam_step(AdamState& st, std::span<const double> grad, std::vector<double>& params) {
  if (grad.size() != params.size()) throw StructuralError("adam_step: gradient length mismatch");
  if (st.m.empty()) st.m.assign(params.size(), 0.0), st.v.assign(params.size(), 0.0);
  if (st.m.size() != params.size()) throw StructuralError("adam_step: state length mismatch");
  ++st.step;
  const double c1 = 1.0 - std::pow(st.beta1, double(st.step));
  const double c2 = 1.0 - std::pow(st.beta2, double(st.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    st.m[i] = st.beta1 * st.m[i] + (1.0 - st.beta1) * grad[i];
    st.v[i] = st.beta2 * st.v[i] + (1.0 - st.beta2) * grad[i] * grad[i];
    params[i] -= st.lr * (st.m[i] / c1) / (std::sqrt(st.v[i] / c2) + st.eps);
  }
}

/// Loss-evaluation contract: returns f(x) and writes its gradient.
using Objective = std::function<double(const std::vector<double>& x, std::vector<double>& grad)>;

struct LbfgsState {
  int history = 20;
  double shrink = 0.5;
  int max_probes = 25;
  double c1 = 1e-4;           // sufficient-decrease constant
  double fallback_step = 1e-4;  // gradient-step length (in units of the unit gradient) after a failed search
  std::deque<Eigen::VectorXd> s, y;
  std::deque<double> rho;
  long fallbacks = 0;
  long skipped_pairs = 0;

  void reset() { s.clear(), y.clear(), rho.clear(); }
};

struct LbfgsStep {
  bool line_search_ok = true;
  int probes = 0;
  double step = 0.0;
};

/// One L-BFGS iteration: two-loop direction, backtracking until sufficient decrease. On entry `fx`
/// and `gx` belong to `x`; on exit they belong to the new iterate.
inline LbfgsStep lbfgs_step(LbfgsState& st, const Objective& f, std::vector<double>& x, double& fx, std::vector<double>& gx) {
  using Vec = Eigen::VectorXd;
  const Eigen::Index n = static_cast<Eigen::Index>(x.size());
  const Vec g = Eigen::Map<const Vec>(gx.data(), n);  // aligned copy: reductions sum in a fixed order
  LbfgsStep out;
  const double gnorm = g.norm();
  if (gnorm == 0.0) return out;

  auto direction = [&] {
    Vec q = g;
    std::vector<double> alpha(st.s.size());
    for (std::size_t i = st.s.size(); i-- > 0;) {
      alpha[i] = st.rho[i] * st.s[i].dot(q);
      q -= alpha[i] * st.y[i];
    }
    if (st.s.empty()) {
      q /= std::max(1.0, gnorm);
    } else {
      q *= st.s.back().dot(st.y.back()) / st.y.back().squaredNorm();
    }
    for (std::size_t i = 0; i < st.s.size(); ++i) {
      const double beta = st.rho[i] * st.y[i].dot(q);
      q += (alpha[i] - beta) * st.s[i];
    }
    return Vec(-q);
  };

  Vec d = direction();
  double slope = g.dot(d);
  if (!(slope < 0.0)) {
    st.reset();
    d = -g / std::max(1.0, gnorm);
    slope = g.dot(d);
  }

  Eigen::Map<const Vec> x0map(x.data(), n);
  const Vec x0 = x0map;
  std::vector<double> trial(x.size()), gt(x.size());
  double a = 1.0;
  for (; out.probes < st.max_probes; a *= st.shrink) {
    ++out.probes;
    Eigen::Map<Vec>(trial.data(), n) = x0 + a * d;
    double ft;
    try {
      ft = f(trial, gt);
    } catch (const NumericError&) {
      continue;
    }
    if (std::isfinite(ft) && ft <= fx + st.c1 * a * slope) {
      const Vec sv = a * d;
      const Vec gtv = Eigen::Map<const Vec>(gt.data(), n);
      const Vec yv = gtv - g;
      const double sy = sv.dot(yv);
      if (sy > 0.0) {
        st.s.push_back(sv), st.y.push_back(yv), st.rho.push_back(1.0 / sy);
        if (static_cast<int>(st.s.size()) > st.history) st.s.pop_front(), st.y.pop_front(), st.rho.pop_front();
      } else {
        ++st.skipped_pairs;
      }
      x = trial, fx = ft, gx = gt;
      out.step = a;
      return out;
    }
  }

  // Line search failed: conservative gradient step, history discarded.
  ++st.fallbacks;
  st.reset();
  out.line_search_ok = false;
  out.step = st.fallback_step / gnorm;
  Eigen::Map<Vec>(trial.data(), n) = x0 - out.step * g;
  fx = f(trial, gt);
  x = trial, gx = gt;
  return out;
}

// ---------------------------------------------------------------------------------------------
// Gradient-correlation probes

/// A network pinned at one spatial point; evaluates outputs and their parameter gradients at any t.
struct PointProbe {
  std::vector<double> x;
  std::function<int(ad::Tape&, const Matrix&)> record;  // records the network for one (x, t) column
  std::vector<int> outputs{0};                          // output rows entering inner products

  Matrix point(double t) const {
    Matrix p(Eigen::Index(x.size()) + 1, 1);
    for (std::size_t i = 0; i < x.size(); ++i) p(Eigen::Index(i), 0) = x[i];
    p(Eigen::Index(x.size()), 0) = t;
    return p;
  }

  double value(std::span<const double> params, double t, int output) const {
    ad::Tape tape(params, JetLayout{});
    const int out = record(tape, point(t));
    return tape.value(out).ch(0)(output, 0);
  }

  /// One parameter gradient per selected output.
  std::vector<Eigen::VectorXd> grads(std::span<const double> params, double t) const {
    ad::Tape tape(params, JetLayout{});
    const int out = record(tape, point(t));
    std::vector<Eigen::VectorXd> g;
    for (int o : outputs) {
      const int node = tape.scalar_loss(out, [o](const JetBlock& v, JetBlock* p) {
        if (p) p->data(o, 0) = 1.0;
        return v.data(o, 0);
      });
      const auto pg = ad::param_grad(tape, node);
      g.push_back(Eigen::Map<const Eigen::VectorXd>(pg.data(), Eigen::Index(pg.size())));
    }
    return g;
  }
};

template <ad::TapeNetwork Net>
PointProbe make_probe(std::shared_ptr<const Net> net, std::vector<double> x, std::vector<int> outputs = {0}) {
  return {std::move(x), [net](ad::Tape& t, const Matrix& p) { return net->record(t, p); }, std::move(outputs)};
}

namespace detail {
inline double inner(const std::vector<Eigen::VectorXd>& a, const std::vector<Eigen::VectorXd>& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i].dot(b[i]);
  return s;
}
inline double frob(const std::vector<Eigen::VectorXd>& a) { return std::sqrt(inner(a, a)); }
}  // namespace detail

/// G = |<du/dtheta|_t, du/dtheta|_{t+dt}>|, optionally scaled by sqrt(h(t) h(t+dt)) and normalised
/// by the gradient norms (+1e-12).
inline double grad_correlation(const PointProbe& probe, std::span<const double> params, double t, double dt, double T,
                               const std::optional<GateState>& gate = std::nullopt, bool normalized = false) {
  if (t < 0.0 || t > T || t + dt < 0.0 || t + dt > T) throw StructuralError("grad_correlation: probe times outside [0, T]");
  const auto ga = probe.grads(params, t);
  const auto gb = dt == 0.0 ? ga : probe.grads(params, t + dt);
  double G = std::abs(detail::inner(ga, gb));
  if (normalized) G /= detail::frob(ga) * detail::frob(gb) + 1e-12;
  if (gate) G *= std::sqrt(gate_h(t, T, *gate) * gate_h(t + dt, T, *gate));
  return G;
}

/// D = |u_theta(t+dt) - u_{theta - lambda du/dtheta|_t}(t+dt)| / lambda by an actual perturbed forward pass.
inline double stiffness_D(const PointProbe& probe, std::span<const double> params, double t, double dt, double lambda_probe) {
  if (probe.outputs.size() != 1) throw StructuralError("stiffness_D: probe must select a single output");
  const int o = probe.outputs.front();
  const Eigen::VectorXd g = probe.grads(params, t).front();
  std::vector<double> moved(params.begin(), params.end());
  for (std::size_t i = 0; i < moved.size(); ++i) moved[i] -= lambda_probe * g(Eigen::Index(i));
  return std::abs(probe.value(params, t + dt, o) - probe.value(moved, t + dt, o)) / lambda_probe;
}

struct TimeAvgOutcome {
  bool conforming = true;
  bool passed = true;
  double pointwise = 0.0;
  double averaged = 0.0;
};

/// Compare the correlation of z(t) with that of the averaged construction
/// z(t) + (1/k) sum_i z(t + s_i). Conforming means every cross inner product between the
/// {t, t+s_i} and {t+dt, t+dt+s_j} gradients is nonnegative.
inline TimeAvgOutcome time_avg_correlation_sample(const PointProbe& probe, std::span<const double> params, double t,
                                                  double dt, std::span<const double> shifts) {
  using Grads = std::vector<Eigen::VectorXd>;
  std::vector<Grads> left{probe.grads(params, t)}, right{probe.grads(params, t + dt)};
  for (double s : shifts) {
    left.push_back(probe.grads(params, t + s));
    right.push_back(probe.grads(params, t + dt + s));
  }
  TimeAvgOutcome out;
  for (auto& a : left)
    for (auto& b : right)
      if (detail::inner(a, b) < 0.0) out.conforming = false;
  auto average = [&](const std::vector<Grads>& g) {
    Grads avg = g.front();
    const double k = static_cast<double>(shifts.size());
    for (std::size_t i = 1; i < g.size(); ++i)
      for (std::size_t o = 0; o < avg.size(); ++o) avg[o] += g[i][o] / k;
    return avg;
  };
  out.pointwise = std::abs(detail::inner(left.front(), right.front()));
  out.averaged = std::abs(detail::inner(average(left), average(right)));
  out.passed = out.averaged >= out.pointwise;
  return out;
}

struct TimeAvgSummary {
  int samples = 0;
  int conforming = 0;
  int passed = 0;
  double pass_fraction() const { return conforming ? double(passed) / conforming : 1.0; }
};

/// Monte Carlo over `samples` configurations; `make(i)` supplies the probe and parameters of
/// sample i. All shifts and the probe lag lie within R/3 and every time stays in [0, T].
inline TimeAvgSummary time_avg_correlation_check(
    const std::function<std::pair<PointProbe, std::vector<double>>(int)>& make, double T, double R, int k, int samples,
    Rng& rng) {
  const double r3 = R / 3.0;
  if (T < 4.0 * r3) throw StructuralError("time_avg_correlation_check: horizon shorter than the probe region");
  TimeAvgSummary sum;
  for (int i = 0; i < samples; ++i) {
    auto [probe, params] = make(i);
    const double t = rng.uniform(r3, T - 2.0 * r3);
    const double dt = rng.uniform(-r3, r3);
    std::vector<double> shifts(static_cast<std::size_t>(k));
    for (auto& s : shifts) s = rng.uniform(-r3, r3);
    auto o = time_avg_correlation_sample(probe, params, t, dt, shifts);
    ++sum.samples;
    if (!o.conforming) continue;
    ++sum.conforming;
    if (o.passed) ++sum.passed;
  }
  return sum;
}

// ---------------------------------------------------------------------------------------------
// Collocation sets and gated resampling

struct SamplerConfig {
  int residual = 1024;
  int initial = 128;
  int boundary = 128;  // points, i.e. boundary/2 lower-upper pairs
  int resample_every = 50;
  double swap_fraction = 0.2;
  double window_floor = 0.05;      // new residual points satisfy h(t) >= window_floor
  double fallback_window = 0.05;   // fraction of T used when the gated window is empty
};

struct SamplerState {
  Matrix residual;  // (d+1) x |P_f|, time last
  Matrix initial;   // (d+1) x |P_0|, t = 0
  Matrix boundary;  // (d+1) x |P_b|: lower-face points then their upper-face partners
  std::vector<int> boundary_dim;
  Eigen::VectorXd last_residual;  // |R| at each residual point from the latest evaluation
};

namespace detail {
inline void fill_space(Matrix& pts, Eigen::Index col, const ProblemSpec& s, Rng& rng) {
  for (int k = 0; k < s.dims(); ++k) pts(k, col) = rng.uniform(s.lower[std::size_t(k)], s.upper[std::size_t(k)]);
}
}  // namespace detail

inline SamplerState init_sampler(const ProblemSpec& s, const SamplerConfig& c, Rng& rng) {
  if (c.residual < 1 || c.initial < 1 || c.boundary < 2 || c.boundary % 2 != 0)
    throw ConfigError("sampler: set sizes must be positive and the boundary count even");
  const int d = s.dims();
  SamplerState st;
  st.residual.resize(d + 1, c.residual);
  for (int p = 0; p < c.residual; ++p) {
    detail::fill_space(st.residual, p, s, rng);
    st.residual(d, p) = rng.uniform(0.0, s.T);
  }
  st.initial.resize(d + 1, c.initial);
  for (int p = 0; p < c.initial; ++p) {
    detail::fill_space(st.initial, p, s, rng);
    st.initial(d, p) = 0.0;
  }
  const int half = c.boundary / 2;
  st.boundary.resize(d + 1, c.boundary);
  for (int p = 0; p < half; ++p) {
    const int face = p % d;
    detail::fill_space(st.boundary, p, s, rng);
    st.boundary(face, p) = s.lower[std::size_t(face)];
    st.boundary(d, p) = rng.uniform(0.0, s.T);
    st.boundary.col(p + half) = st.boundary.col(p);
    st.boundary(face, p + half) = s.upper[std::size_t(face)];
    st.boundary_dim.push_back(face);
  }
  st.last_residual = Eigen::VectorXd::Zero(c.residual);
  return st;
}

/// Replace the lowest-weighted fraction of P_f (weight h(t)|R|, ties to the lowest index) by fresh
/// uniform samples from the gated window {h >= floor}; set sizes are preserved.
inline SamplerState resample_gated(SamplerState st, const Eigen::VectorXd& residuals, const std::optional<GateState>& gate,
                                   const ProblemSpec& s, const SamplerConfig& c, Rng& rng) {
  const Eigen::Index n = st.residual.cols();
  if (residuals.size() != n) throw StructuralError("resample_gated: one residual per collocation point");
  const int swap = static_cast<int>(std::floor(c.swap_fraction * double(n) + 1e-9));
  if (swap <= 0) return st;
  const int d = s.dims();
  std::vector<double> w(static_cast<std::size_t>(n));
  for (Eigen::Index p = 0; p < n; ++p)
    w[std::size_t(p)] = (gate ? gate_h(st.residual(d, p), s.T, *gate) : 1.0) * std::abs(residuals(p));
  std::vector<Eigen::Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Eigen::Index(0));
  std::stable_sort(order.begin(), order.end(), [&](Eigen::Index a, Eigen::Index b) { return w[std::size_t(a)] < w[std::size_t(b)]; });

  double t_end = gate ? gate_window_end(s.T, *gate, c.window_floor) : s.T;
  if (t_end <= 0.0) t_end = std::min(s.T, c.fallback_window * s.T);
  for (int i = 0; i < swap; ++i) {
    const Eigen::Index p = order[std::size_t(i)];
    detail::fill_space(st.residual, p, s, rng);
    st.residual(d, p) = rng.uniform(0.0, t_end);
    st.last_residual(p) = 0.0;
  }
  return st;
}

// ---------------------------------------------------------------------------------------------
// Configuration, reports and checkpoints

struct ProbeConfig {
  int count = 16;
  double dt_fraction = 0.02;
};

struct OptimizerConfig {
  int iterations = 1000;
  int adam_iterations = 500;  // the rest use L-BFGS
  double adam_lr = 1e-3;
  int lbfgs_history = 20;
  double lbfgs_shrink = 0.5;
  int lbfgs_max_probes = 25;
};

struct TrainConfig {
  Architecture arch;  // embedding period and outputs are fixed up from the problem per stage
  GateState gate;
  bool gated = true;
  bool gate_residual_weight = true;  // weight residual points by h(t)
  SamplerConfig sampler;
  ProbeConfig probes;
  OptimizerConfig optimizer;
  LossWeights weights;
  int chunk = 64;
  int ic_grid = 512;  // grid points per dimension for preparing the hard-IC data
  std::vector<int> mlp_hidden{64, 64, 64, 64, 64, 64, 64, 64};  // vanilla baseline
  std::uint64_t seed = 0;
};

struct IterationRecord {
  long iter = 0;
  double loss_total = 0.0, loss_res = 0.0, loss_ic = 0.0, loss_bd = 0.0;
  double gamma = 0.0, G_mean = 0.0, wall_ms = 0.0;
};

struct TrainReport {
  int stage = 1;
  std::uint64_t seed = 0;
  std::vector<IterationRecord> rows;
  long lbfgs_fallbacks = 0;
  long lbfgs_skipped_pairs = 0;
  long resamples = 0;

  std::string csv(bool with_wall = true) const {
    std::string s = with_wall ? "iter,loss_total,loss_res,loss_ic,loss_bd,gamma,G_mean,wall_ms\n"
                              : "iter,loss_total,loss_res,loss_ic,loss_bd,gamma,G_mean\n";
    char buf[512];
    for (auto& r : rows) {
      int n = std::snprintf(buf, sizeof buf, "%ld,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g", r.iter, r.loss_total, r.loss_res,
                            r.loss_ic, r.loss_bd, r.gamma, r.G_mean);
      if (with_wall) std::snprintf(buf + n, sizeof buf - std::size_t(n), ",%.3f", r.wall_ms);
      s += buf;
      s += '\n';
    }
    return s;
  }

  /// FNV-1a over everything except wall-clock time.
  std::string digest() const {
    std::uint64_t h = 1469598103934665603ull;
    auto eat = [&](const std::string& s) {
      for (char c : s) h = (h ^ static_cast<unsigned char>(c)) * 1099511628211ull;
    };
    eat(csv(false));
    eat(std::to_string(stage) + ":" + std::to_string(seed));
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016" PRIx64, h);
    return buf;
  }

  void write_csv(const std::string& path) const {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw StructuralError("cannot write " + path);
    f << csv();
  }
};

inline constexpr char kCheckpointMagic[4] = {'N', 'M', 'D', 'C'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::string descriptor;
  std::uint64_t seed = 0;
  std::uint32_t stage = 0;  // 1 envelope, 2 remainder, 0 baseline
  std::vector<double> params;
};

inline void write_checkpoint(const std::string& path, const Checkpoint& c) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw StructuralError("cannot write " + path);
  auto put = [&](const auto& v) { f.write(reinterpret_cast<const char*>(&v), sizeof v); };
  f.write(kCheckpointMagic, 4);
  put(kCheckpointVersion);
  put(static_cast<std::uint32_t>(c.descriptor.size()));
  f.write(c.descriptor.data(), std::streamsize(c.descriptor.size()));
  put(c.seed);
  put(c.stage);
  put(static_cast<std::uint64_t>(c.params.size()));
  f.write(reinterpret_cast<const char*>(c.params.data()), std::streamsize(c.params.size() * sizeof(double)));
}

inline Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw StructuralError("cannot open checkpoint " + path);
  auto get = [&](auto& v) {
    if (!f.read(reinterpret_cast<char*>(&v), sizeof v)) throw StructuralError("truncated checkpoint " + path);
  };
  char magic[4];
  if (!f.read(magic, 4) || !std::equal(magic, magic + 4, kCheckpointMagic)) throw StructuralError("not a checkpoint: " + path);
  std::uint32_t version = 0, len = 0;
  get(version);
  if (version != kCheckpointVersion)
    throw StructuralError("checkpoint version " + std::to_string(version) + " is not supported (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  get(len);
  Checkpoint c;
  c.descriptor.resize(len);
  if (!f.read(c.descriptor.data(), len)) throw StructuralError("truncated checkpoint " + path);
  std::uint64_t n = 0;
  get(c.seed);
  get(c.stage);
  get(n);
  c.params.resize(n);
  if (!f.read(reinterpret_cast<char*>(c.params.data()), std::streamsize(n * sizeof(double))))
    throw StructuralError("truncated checkpoint " + path);
  return c;
}

/// FNV-1a over the raw bytes of a parameter vector.
inline std::uint64_t param_checksum(std::span<const double> p) {
  std::uint64_t h = 1469598103934665603ull;
  const auto* b = reinterpret_cast<const unsigned char*>(p.data());
  for (std::size_t i = 0; i < p.size() * sizeof(double); ++i) h = (h ^ b[i]) * 1099511628211ull;
  return h;
}

// Descriptor: "key=value;key=value;...", numbers at full precision.
namespace detail {
inline std::string num(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}
inline std::string descriptor_get(const std::string& desc, const std::string& key) {
  std::istringstream in(desc);
  std::string item;
  while (std::getline(in, item, ';')) {
    auto eq = item.find('=');
    if (eq != std::string::npos && item.substr(0, eq) == key) return item.substr(eq + 1);
  }
  throw StructuralError("checkpoint descriptor lacks '" + key + "'");
}
inline std::vector<double> split_numbers(const std::string& s, char sep) {
  std::vector<double> v;
  std::istringstream in(s);
  std::string item;
  while (std::getline(in, item, sep)) v.push_back(std::stod(item));
  return v;
}
}  // namespace detail

inline std::string describe(const Architecture& a, const GateState& g) {
  std::string s = "kind=neuralmd;period=";
  for (std::size_t i = 0; i < a.embedding.period.size(); ++i) s += (i ? "," : "") + detail::num(a.embedding.period[i]);
  s += ";modes=" + std::to_string(a.embedding.modes) + ";d_model=" + std::to_string(a.d_model) +
       ";mixer=" + std::to_string(a.mixer_hidden) + ";head=" + std::to_string(a.head_hidden) +
       ";outputs=" + std::to_string(a.outputs) + ";radii=";
  for (std::size_t i = 0; i < a.perturb.scales.size(); ++i) s += (i ? "," : "") + detail::num(a.perturb.scales[i].radius);
  s += ";counts=";
  for (std::size_t i = 0; i < a.perturb.scales.size(); ++i) s += (i ? "," : "") + std::to_string(a.perturb.scales[i].count);
  s += ";alpha=" + detail::num(g.alpha) + ";gamma=" + detail::num(g.gamma) +
       ";variant=" + (g.variant == GateVariant::Tanh ? "tanh" : "relu-tanh");
  return s;
}

inline std::string describe(const MlpArchitecture& a) {
  std::string s = "kind=mlp;lower=";
  for (std::size_t i = 0; i < a.lower.size(); ++i) s += (i ? "," : "") + detail::num(a.lower[i]);
  s += ";upper=";
  for (std::size_t i = 0; i < a.upper.size(); ++i) s += (i ? "," : "") + detail::num(a.upper[i]);
  s += ";hidden=";
  for (std::size_t i = 0; i < a.hidden.size(); ++i) s += (i ? "," : "") + std::to_string(a.hidden[i]);
  s += ";outputs=" + std::to_string(a.outputs);
  return s;
}

inline std::string descriptor_kind(const std::string& desc) { return detail::descriptor_get(desc, "kind"); }

inline Architecture parse_architecture(const std::string& desc) {
  if (descriptor_kind(desc) != "neuralmd") throw StructuralError("descriptor is not a NeuralMD network");
  Architecture a;
  a.embedding.period = detail::split_numbers(detail::descriptor_get(desc, "period"), ',');
  a.embedding.modes = std::stoi(detail::descriptor_get(desc, "modes"));
  a.d_model = std::stoi(detail::descriptor_get(desc, "d_model"));
  a.mixer_hidden = std::stoi(detail::descriptor_get(desc, "mixer"));
  a.head_hidden = std::stoi(detail::descriptor_get(desc, "head"));
  a.outputs = std::stoi(detail::descriptor_get(desc, "outputs"));
  auto radii = detail::split_numbers(detail::descriptor_get(desc, "radii"), ',');
  auto counts = detail::split_numbers(detail::descriptor_get(desc, "counts"), ',');
  if (radii.size() != counts.size()) throw StructuralError("descriptor: radii/counts length mismatch");
  a.perturb.scales.clear();
  for (std::size_t i = 0; i < radii.size(); ++i) a.perturb.scales.push_back({radii[i], static_cast<int>(counts[i])});
  a.validate();
  return a;
}

inline GateState parse_gate(const std::string& desc) {
  GateState g;
  g.alpha = std::stod(detail::descriptor_get(desc, "alpha"));
  g.gamma = std::stod(detail::descriptor_get(desc, "gamma"));
  g.variant = detail::descriptor_get(desc, "variant") == "tanh" ? GateVariant::Tanh : GateVariant::ReluTanh;
  return g;
}

inline MlpArchitecture parse_mlp(const std::string& desc) {
  if (descriptor_kind(desc) != "mlp") throw StructuralError("descriptor is not an MLP");
  MlpArchitecture a;
  a.lower = detail::split_numbers(detail::descriptor_get(desc, "lower"), ',');
  a.upper = detail::split_numbers(detail::descriptor_get(desc, "upper"), ',');
  a.hidden.clear();
  for (double h : detail::split_numbers(detail::descriptor_get(desc, "hidden"), ',')) a.hidden.push_back(static_cast<int>(h));
  a.outputs = std::stoi(detail::descriptor_get(desc, "outputs"));
  return a;
}

/// Fixed perturbation offsets used at inference (and for frozen-network evaluation and probes):
/// one draw per slot, shared by every point, so the trained field is a function of (x, t).
inline Eigen::VectorXd eval_offsets(const PerturbConfig& cfg, std::uint64_t seed, int stage) {
  Rng rng(seed, "eval", static_cast<std::uint64_t>(stage));
  return draw_offsets(cfg, 1, rng).col(0);
}

inline Matrix broadcast(const Eigen::VectorXd& v, Eigen::Index cols) { return v.replicate(1, cols); }

// ---------------------------------------------------------------------------------------------
// Hard-IC data source: grid fields interpolated at arbitrary points

class IcSource {
 public:
  IcSource(Grid g, std::vector<RealVec> u0, std::vector<RealVec> du0)
      : fft_(std::make_shared<Fft>(g)), u0_(std::move(u0)), du0_(std::move(du0)) {}

  int rows() const { return static_cast<int>(u0_.size()); }

  HardIcData at(const Matrix& pts, const JetLayout& layout) const {
    return {interpolate_rows(u0_, pts, layout, *fft_), interpolate_rows(du0_, pts, layout, *fft_)};
  }

  /// Envelope data: rows (Re, Im) of z0 and dz0.
  static IcSource envelope(const ProblemSpec& s, int n) {
    Grid g(std::vector<int>(std::size_t(s.dims()), n), s.lower, s.upper);
    Fft fft(g);
    auto e = prepare_z_initial(s, fft);
    return IcSource(g, {e.z0.real(), e.z0.imag()}, {e.dz0.real(), e.dz0.imag()});
  }
  /// Remainder data: r0 = 0, dr0 = -2 Re dz0.
  static IcSource remainder(const ProblemSpec& s, int n) {
    Grid g(std::vector<int>(std::size_t(s.dims()), n), s.lower, s.upper);
    Fft fft(g);
    auto e = prepare_z_initial(s, fft);
    auto r = prepare_r_initial(e.dz0);
    return IcSource(g, {r.r0}, {r.dr0});
  }

 private:
  std::shared_ptr<Fft> fft_;
  std::vector<RealVec> u0_, du0_;
};

// ---------------------------------------------------------------------------------------------
// Field evaluation on grids

/// A trained network ready for inference: NeuralMD (with hard IC, eval offsets, final gate) or MLP.
struct TrainedNet {
  std::string kind = "neuralmd";
  Architecture arch;
  MlpArchitecture mlp;
  GateState gate;
  bool gated = true;
  Eigen::VectorXd offsets;
  std::shared_ptr<const IcSource> ic;
  std::vector<double> params;
  double T = 1.0;

  /// Record the network for a batch (offsets broadcast, hard-IC data interpolated).
  int record(ad::Tape& tape, const Matrix& pts, std::shared_ptr<HardIcData>& keep) const {
    if (kind == "mlp") return MlpNet(mlp).record(tape, pts);
    FieldContext ctx;
    ctx.T = T;
    if (gated) ctx.gate = gate;
    ctx.offsets = broadcast(offsets, pts.cols());
    if (ic) {
      keep = std::make_shared<HardIcData>(ic->at(pts, tape.layout()));
      ctx.ic = keep.get();
    }
    return NeuralMdNet(arch, std::move(ctx)).record(tape, pts);
  }

  /// Output values (outputs x B), evaluated in chunks.
  Matrix values(const Matrix& pts, int chunk = 512) const {
    const int outputs = kind == "mlp" ? mlp.outputs : arch.outputs;
    Matrix out(outputs, pts.cols());
    for (Eigen::Index c0 = 0; c0 < pts.cols(); c0 += chunk) {
      const Eigen::Index n = std::min<Eigen::Index>(chunk, pts.cols() - c0);
      ad::Tape tape(params, JetLayout{});
      std::shared_ptr<HardIcData> keep;
      const int node = record(tape, pts.middleCols(c0, n), keep);
      out.middleCols(c0, n) = tape.value(node).data;
    }
    return out;
  }

  PointProbe probe(std::vector<double> x, std::vector<int> outputs) const {
    auto self = std::make_shared<TrainedNet>(*this);
    return {std::move(x),
            [self](ad::Tape& t, const Matrix& p) {
              std::shared_ptr<HardIcData> keep;
              const int node = self->record(t, p, keep);
              // the tape holds copies of the IC jets, so `keep` may be released here
              return node;
            },
            std::move(outputs)};
  }
};

/// Evaluate every output of `net` on all grid points at each time; one field per output.
inline std::vector<SpaceTimeField> evaluate_on_grid(const TrainedNet& net, const Grid& g, const std::vector<double>& times) {
  const int d = g.dims();
  const Eigen::Index n = g.size();
  Matrix pts(d + 1, n * Eigen::Index(times.size()));
  for (std::size_t i = 0; i < times.size(); ++i)
    for (Eigen::Index f = 0; f < n; ++f) {
      auto x = g.point(f);
      const Eigen::Index col = Eigen::Index(i) * n + f;
      for (int k = 0; k < d; ++k) pts(k, col) = x[std::size_t(k)];
      pts(d, col) = times[i];
    }
  const Matrix v = net.values(pts);
  std::vector<SpaceTimeField> out;
  for (Eigen::Index o = 0; o < v.rows(); ++o) {
    SpaceTimeField f{times, Matrix(Eigen::Index(times.size()), n)};
    for (std::size_t i = 0; i < times.size(); ++i) f.v.row(Eigen::Index(i)) = v.row(o).segment(Eigen::Index(i) * n, n);
    out.push_back(std::move(f));
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Training

enum class TrainKind { Envelope = 1, Remainder = 2, Vanilla = 0 };

struct LossParts {
  double total = 0.0, res = 0.0, ic = 0.0, bd = 0.0;
};

/// Raised when a loss turns non-finite; carries the last parameters that produced a finite loss.
class TrainingAborted : public NumericError {
 public:
  TrainingAborted(const std::string& what, long iter, std::vector<double> last_good, TrainReport report)
      : NumericError(what, iter), last_good(std::move(last_good)), report(std::move(report)) {}
  std::vector<double> last_good;
  TrainReport report;
};

/// The collocation loss of one stage over the current sets, perturbation offsets and gate.
class CollocationObjective {
 public:
  CollocationObjective(TrainKind kind, ProblemSpec spec, const TrainConfig& cfg, TrainedNet net,
                       std::shared_ptr<const TrainedNet> frozen = nullptr)
      : kind_(kind), spec_(std::move(spec)), cfg_(cfg), net_(std::move(net)), frozen_(std::move(frozen)) {
    const int d = spec_.dims();
    std::vector<int> all(static_cast<std::size_t>(d) + 1), space(static_cast<std::size_t>(d));
    std::iota(all.begin(), all.end(), 0);
    std::iota(space.begin(), space.end(), 0);
    full_ = JetLayout(all);
    time_ = JetLayout({d});
    space_ = JetLayout(space);
  }

  const SamplerState& sampler() const { return sampler_; }
  void set_sampler(SamplerState s) {
    sampler_ = std::move(s);
    refresh_point_data();
  }
  void set_gate(const GateState& g) { net_.gate = g; }
  const TrainedNet& net() const { return net_; }

  /// Per-point perturbation offsets for the residual, initial and boundary sets.
  void draw_offsets_from(Rng& rng) {
    if (kind_ == TrainKind::Vanilla) return;
    off_res_ = draw_offsets(net_.arch.perturb, sampler_.residual.cols(), rng);
    off_ic_ = draw_offsets(net_.arch.perturb, sampler_.initial.cols(), rng);
    off_bd_ = draw_offsets(net_.arch.perturb, sampler_.boundary.cols(), rng);
  }

  LossParts evaluate(std::span<const double> params, std::vector<double>* grad) {
    LossParts parts;
    if (grad) grad->assign(params.size(), 0.0);
    const int d = spec_.dims();
    const Eigen::Index nres = sampler_.residual.cols();
    Eigen::VectorXd abs_res(nres);

    for (Eigen::Index c0 = 0, chunk = 0; c0 < nres; c0 += cfg_.chunk, ++chunk) {
      const Eigen::Index n = std::min<Eigen::Index>(cfg_.chunk, nres - c0);
      const Matrix pts = sampler_.residual.middleCols(c0, n);
      RealVec w(n);
      for (Eigen::Index p = 0; p < n; ++p) {
        const bool weigh = kind_ != TrainKind::Vanilla && net_.gated && cfg_.gate_residual_weight;
        w(p) = (weigh ? gate_h(pts(d, p), spec_.T, net_.gate) : 1.0) / double(nres);
      }
      RealVec sq;
      ad::Tape tape(params, full_);
      const int out = record(tape, pts, c0 < off_res_.cols() ? off_res_.middleCols(c0, n) : Matrix(), res_ic_[std::size_t(chunk)]);
      int node = -1;
      switch (kind_) {
        case TrainKind::Envelope: {
          const double wave = spec_.eps * spec_.eps;
          node = tape.scalar_loss(out, [&](const JetBlock& z, JetBlock* g) {
            return envelope_residual_loss(z, full_, spec_, w, wave, g, &sq);
          });
          break;
        }
        case TrainKind::Remainder: {
          const Matrix z = frozen_z_.middleCols(c0, n);
          const RealVec times = pts.row(d).transpose();
          node = tape.scalar_loss(out, [&](const JetBlock& r, JetBlock* g) {
            return remainder_residual_loss(r, full_, spec_, z, times, w, g, &sq);
          });
          break;
        }
        case TrainKind::Vanilla:
          node = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* g) { return nkge_residual_loss(u, full_, spec_, w, g, &sq); });
          break;
      }
      parts.res += tape.scalar(node);
      abs_res.segment(c0, n) = sq.cwiseSqrt();
      if (grad) accumulate(*grad, ad::param_grad(tape, node), cfg_.weights.res);
    }

    {  // initial condition
      const Matrix& pts = sampler_.initial;
      const RealVec w = RealVec::Constant(pts.cols(), 1.0 / double(pts.cols()));
      ad::Tape tape(params, time_);
      const int out = record(tape, pts, off_ic_, ic_ic_);
      const int node = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* g) {
        return initial_condition_loss(u, time_, d, ic_target_u0_, ic_target_du0_, w, g);
      });
      parts.ic = tape.scalar(node);
      if (grad) accumulate(*grad, ad::param_grad(tape, node), cfg_.weights.ic);
    }
    {  // periodic boundary
      const Matrix& pts = sampler_.boundary;
      const RealVec w = RealVec::Constant(pts.cols() / 2, 2.0 / double(pts.cols()));
      ad::Tape tape(params, space_);
      const int out = record(tape, pts, off_bd_, bd_ic_);
      const int node = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* g) {
        return boundary_loss(u, space_, sampler_.boundary_dim, w, g);
      });
      parts.bd = tape.scalar(node);
      if (grad) accumulate(*grad, ad::param_grad(tape, node), cfg_.weights.bd);
    }
    parts.total = cfg_.weights.res * parts.res + cfg_.weights.ic * parts.ic + cfg_.weights.bd * parts.bd;
    if (!std::isfinite(parts.total)) throw NumericError("non-finite training loss", -1);
    sampler_.last_residual = abs_res;
    return parts;
  }

 private:
  static void accumulate(std::vector<double>& into, const std::vector<double>& g, double w) {
    for (std::size_t i = 0; i < into.size(); ++i) into[i] += w * g[i];
  }

  int record(ad::Tape& tape, const Matrix& pts, const Matrix& offsets, const std::shared_ptr<HardIcData>& ic) const {
    if (kind_ == TrainKind::Vanilla) return MlpNet(net_.mlp).record(tape, pts);
    FieldContext ctx;
    ctx.T = spec_.T;
    if (net_.gated) ctx.gate = net_.gate;
    ctx.offsets = offsets;
    ctx.ic = ic.get();
    return NeuralMdNet(net_.arch, std::move(ctx)).record(tape, pts);
  }

  /// Hard-IC jets, frozen-envelope values and IC targets depend only on the point sets.
  void refresh_point_data() {
    const int d = spec_.dims();
    res_ic_.clear();
    for (Eigen::Index c0 = 0; c0 < sampler_.residual.cols(); c0 += cfg_.chunk) {
      const Eigen::Index n = std::min<Eigen::Index>(cfg_.chunk, sampler_.residual.cols() - c0);
      res_ic_.push_back(net_.ic ? std::make_shared<HardIcData>(net_.ic->at(sampler_.residual.middleCols(c0, n), full_)) : nullptr);
    }
    ic_ic_ = net_.ic ? std::make_shared<HardIcData>(net_.ic->at(sampler_.initial, time_)) : nullptr;
    bd_ic_ = net_.ic ? std::make_shared<HardIcData>(net_.ic->at(sampler_.boundary, space_)) : nullptr;
    if (kind_ == TrainKind::Remainder) frozen_z_ = frozen_->values(sampler_.residual);

    const Eigen::Index n0 = sampler_.initial.cols();
    if (net_.ic) {
      ic_target_u0_ = ic_ic_->u0.ch(0);
      ic_target_du0_ = ic_ic_->du0.ch(0);
    } else {
      ic_target_u0_.resize(1, n0);
      ic_target_du0_.resize(1, n0);
      for (Eigen::Index p = 0; p < n0; ++p) {
        std::vector<double> x(static_cast<std::size_t>(d));
        for (int k = 0; k < d; ++k) x[std::size_t(k)] = sampler_.initial(k, p);
        ic_target_u0_(0, p) = spec_.init.phi1(x);
        ic_target_du0_(0, p) = spec_.init.phi2(x) / (spec_.eps * spec_.eps);
      }
    }
  }

  TrainKind kind_;
  ProblemSpec spec_;
  TrainConfig cfg_;
  TrainedNet net_;
  std::shared_ptr<const TrainedNet> frozen_;
  JetLayout full_, time_, space_;
  SamplerState sampler_;
  Matrix off_res_, off_ic_, off_bd_;
  std::vector<std::shared_ptr<HardIcData>> res_ic_;
  std::shared_ptr<HardIcData> ic_ic_, bd_ic_;
  Matrix frozen_z_;
  Matrix ic_target_u0_, ic_target_du0_;
};

struct TrainResult {
  TrainedNet net;  // params and final gate
  TrainReport report;
  Checkpoint checkpoint() const {
    const bool mlp = net.kind == "mlp";
    return {mlp ? describe(net.mlp) : describe(net.arch, net.gate), report.seed, static_cast<std::uint32_t>(report.stage),
            net.params};
  }
};

namespace detail {

struct ProbeSet {
  std::vector<std::vector<double>> x;
  std::vector<double> t;
  double dt = 0.0;
};

inline ProbeSet draw_probes(const ProblemSpec& s, const ProbeConfig& c, Rng& rng) {
  ProbeSet p;
  p.dt = c.dt_fraction * s.T;
  for (int i = 0; i < c.count; ++i) {
    std::vector<double> x(std::size_t(s.dims()));
    for (int k = 0; k < s.dims(); ++k) x[std::size_t(k)] = rng.uniform(s.lower[std::size_t(k)], s.upper[std::size_t(k)]);
    p.x.push_back(std::move(x));
    p.t.push_back(rng.uniform(0.0, s.T - p.dt));
  }
  return p;
}

/// Mean normalised (and, when gated, gate-weighted) correlation over the probe set.
inline double mean_probe_correlation(const TrainedNet& net, const ProbeSet& probes, const ProblemSpec& s) {
  if (probes.t.empty()) return 0.0;
  std::vector<int> outs(static_cast<std::size_t>(net.arch.outputs));
  std::iota(outs.begin(), outs.end(), 0);
  const auto self = std::make_shared<const TrainedNet>(net);
  double sum = 0.0;
  for (std::size_t i = 0; i < probes.t.size(); ++i) {
    PointProbe p{probes.x[i],
                 [self](ad::Tape& t, const Matrix& pt) {
                   std::shared_ptr<HardIcData> keep;
                   return self->record(t, pt, keep);
                 },
                 outs};
    sum += grad_correlation(p, net.params, probes.t[i], probes.dt, s.T,
                            net.gated ? std::optional<GateState>(net.gate) : std::nullopt, true);
  }
  return sum / double(probes.t.size());
}

/// The shared Adam -> L-BFGS loop with per-iteration gate updates and periodic resampling.
inline TrainResult run_training(TrainKind kind, const ProblemSpec& spec, const TrainConfig& cfg, TrainedNet net,
                                std::shared_ptr<const TrainedNet> frozen, int stage) {
  const auto start = std::chrono::steady_clock::now();
  const bool neural = kind != TrainKind::Vanilla;
  Rng sampler_rng(cfg.seed, "sampler", std::uint64_t(stage));
  Rng perturb_rng(cfg.seed, "perturbation", std::uint64_t(stage));
  Rng probe_rng(cfg.seed, "probe", std::uint64_t(stage));

  TrainResult res;
  res.report.stage = stage;
  res.report.seed = cfg.seed;
  const int iters = cfg.optimizer.iterations;
  if (iters <= 0) {
    res.net = std::move(net);
    return res;
  }

  CollocationObjective obj(kind, spec, cfg, net, std::move(frozen));
  obj.set_sampler(init_sampler(spec, cfg.sampler, sampler_rng));
  obj.draw_offsets_from(perturb_rng);
  const ProbeSet probes = neural ? draw_probes(spec, cfg.probes, probe_rng) : ProbeSet{};

  std::vector<double> params = net.params;
  std::vector<double> last_good = params;
  GateState gate = net.gate;
  AdamState adam;
  adam.lr = cfg.optimizer.adam_lr;
  LbfgsState lbfgs;
  lbfgs.history = cfg.optimizer.lbfgs_history;
  lbfgs.shrink = cfg.optimizer.lbfgs_shrink;
  lbfgs.max_probes = cfg.optimizer.lbfgs_max_probes;

  std::vector<double> grad;
  double fx = 0.0;
  bool have_lbfgs_point = false;
  LossParts lbfgs_parts;
  auto objective = [&](const std::vector<double>& x, std::vector<double>& g) {
    lbfgs_parts = obj.evaluate(x, &g);
    return lbfgs_parts.total;
  };

  try {
    for (int it = 0; it < iters; ++it) {
      if (it > 0 && cfg.sampler.resample_every > 0 && it % cfg.sampler.resample_every == 0 && cfg.sampler.swap_fraction > 0.0) {
        obj.set_sampler(resample_gated(obj.sampler(), obj.sampler().last_residual,
                                       neural && net.gated ? std::optional<GateState>(gate) : std::nullopt, spec,
                                       cfg.sampler, sampler_rng));
        ++res.report.resamples;
        if (it >= cfg.optimizer.adam_iterations) {
          obj.draw_offsets_from(perturb_rng);
          lbfgs.reset();
          have_lbfgs_point = false;
        }
      }
      obj.set_gate(gate);

      LossParts parts;
      if (it < cfg.optimizer.adam_iterations) {
        if (it > 0) obj.draw_offsets_from(perturb_rng);
        parts = obj.evaluate(params, &grad);
        last_good = params;
        adam_step(adam, grad, params);
      } else {
        if (!have_lbfgs_point) {
          fx = objective(params, grad);
          have_lbfgs_point = true;
        }
        parts = lbfgs_parts;
        last_good = params;
        lbfgs_step(lbfgs, objective, params, fx, grad);
        // lbfgs_parts now describe the accepted point, reported next iteration
      }

      IterationRecord rec;
      rec.iter = it;
      rec.loss_total = parts.total, rec.loss_res = parts.res, rec.loss_ic = parts.ic, rec.loss_bd = parts.bd;
      rec.gamma = gate.gamma;
      if (neural) {
        TrainedNet probe_net = obj.net();
        probe_net.params = params;
        probe_net.gate = gate;
        rec.G_mean = mean_probe_correlation(probe_net, probes, spec);
        gate = gamma_update(gate, rec.G_mean);
      }
      rec.wall_ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - start).count();
      res.report.rows.push_back(rec);
    }
  } catch (const NumericError& e) {
    res.report.lbfgs_fallbacks = lbfgs.fallbacks;
    throw TrainingAborted(std::string("training aborted: ") + e.what(), static_cast<long>(res.report.rows.size()),
                          last_good, res.report);
  }
  res.report.lbfgs_fallbacks = lbfgs.fallbacks;
  res.report.lbfgs_skipped_pairs = lbfgs.skipped_pairs;
  res.net = obj.net();
  res.net.params = std::move(params);
  res.net.gate = gate;
  return res;
}

}  // namespace detail

/// The NeuralMD architecture for a problem: embedding periods follow the domain.
inline Architecture architecture_for(const ProblemSpec& s, Architecture base, int outputs) {
  base.embedding.period = s.periods();
  base.outputs = outputs;
  base.validate();
  return base;
}

/// Untrained network for a stage, from the seed's "init" substream.
inline TrainedNet initial_net(TrainKind kind, const ProblemSpec& s, const TrainConfig& cfg) {
  const int stage = static_cast<int>(kind);
  TrainedNet n;
  n.T = s.T;
  n.gate = cfg.gate;
  n.gated = cfg.gated;
  Rng rng(cfg.seed, "init", std::uint64_t(stage));
  if (kind == TrainKind::Vanilla) {
    n.kind = "mlp";
    n.mlp.lower = s.lower, n.mlp.upper = s.upper;
    n.mlp.lower.push_back(0.0), n.mlp.upper.push_back(s.T);
    n.mlp.hidden = cfg.mlp_hidden;
    n.gated = false;
    n.params = init_params(n.mlp, rng);
    return n;
  }
  n.arch = architecture_for(s, cfg.arch, kind == TrainKind::Envelope ? 2 : 1);
  n.offsets = eval_offsets(n.arch.perturb, cfg.seed, stage);
  n.ic = std::make_shared<IcSource>(kind == TrainKind::Envelope ? IcSource::envelope(s, cfg.ic_grid)
                                                                   : IcSource::remainder(s, cfg.ic_grid));
  n.params = init_params(n.arch, rng);
  return n;
}

/// Rebuild an inference network from a checkpoint.
inline TrainedNet net_from_checkpoint(const Checkpoint& c, const ProblemSpec& s, const TrainConfig& cfg) {
  TrainedNet n;
  n.T = s.T;
  n.params = c.params;
  if (descriptor_kind(c.descriptor) == "mlp") {
    n.kind = "mlp";
    n.mlp = parse_mlp(c.descriptor);
    n.gated = false;
    if (n.params.size() != n.mlp.param_count()) throw StructuralError("checkpoint payload does not match its descriptor");
    return n;
  }
  n.arch = parse_architecture(c.descriptor);
  if (n.params.size() != n.arch.param_count()) throw StructuralError("checkpoint payload does not match its descriptor");
  if (n.arch.spatial_dim() != s.dims()) throw StructuralError("checkpoint dimension does not match the problem");
  GateState g = cfg.gate;
  const GateState stored = parse_gate(c.descriptor);
  g.alpha = stored.alpha, g.gamma = stored.gamma, g.variant = stored.variant;
  n.gate = g;
  n.gated = cfg.gated;
  const int stage = static_cast<int>(c.stage);
  if (stage != 1 && stage != 2) throw StructuralError("checkpoint stage tag must be 1 or 2 for a NeuralMD network");
  n.offsets = eval_offsets(n.arch.perturb, c.seed, stage);
  n.ic = std::make_shared<IcSource>(stage == 1 ? IcSource::envelope(s, cfg.ic_grid) : IcSource::remainder(s, cfg.ic_grid));
  return n;
}

/// Stage I: envelope z trained on the NLSW residual with hard initial data.
inline TrainResult train_stage1(const ProblemSpec& s, const TrainConfig& cfg) {
  s.validate();
  return detail::run_training(TrainKind::Envelope, s, cfg, initial_net(TrainKind::Envelope, s, cfg), nullptr, 1);
}

/// Stage II: remainder r trained on its coupled residual with the stage-I network frozen.
inline TrainResult train_stage2(const ProblemSpec& s, const Checkpoint& stage1, const TrainConfig& cfg) {
  s.validate();
  if (stage1.stage != 1) throw StructuralError("stage 2 requires a stage-1 checkpoint");
  auto frozen = std::make_shared<const TrainedNet>(net_from_checkpoint(stage1, s, cfg));
  const std::uint64_t before = param_checksum(frozen->params);
  auto res = detail::run_training(TrainKind::Remainder, s, cfg, initial_net(TrainKind::Remainder, s, cfg), frozen, 2);
  if (param_checksum(frozen->params) != before) throw StructuralError("stage 2 modified the frozen stage-1 parameters");
  return res;
}

/// Vanilla collocation baseline: tanh MLP on u with soft initial and periodic boundary losses.
inline TrainResult train_baseline(const ProblemSpec& s, const TrainConfig& cfg) {
  s.validate();
  TrainConfig c = cfg;
  c.sampler.swap_fraction = 0.0;
  return detail::run_training(TrainKind::Vanilla, s, c, initial_net(TrainKind::Vanilla, s, c), nullptr, 0);
}

// ---------------------------------------------------------------------------------------------
// Reconstruction and scoring against a reference field

struct NeuralMdEvaluation {
  SpaceTimeField amplitude;  // 2 Re(e^{it/eps^2} z)
  SpaceTimeField full;       // amplitude + r
  Selection selection = Selection::AmplitudeOnly;
  double err_amplitude = 0.0, err_full = 0.0;
  double rmae_amplitude = 0.0, rrmse_amplitude = 0.0;
  double rmae_full = 0.0, rrmse_full = 0.0;
  double rmae_selected = 0.0, rrmse_selected = 0.0;
  const SpaceTimeField& selected() const { return selection == Selection::WithRemainder ? full : amplitude; }
};

/// Reconstruct u from the two stage networks on `g` at `truth.t` and score all three variants.
inline NeuralMdEvaluation evaluate_neuralmd(const TrainedNet& z, const TrainedNet* r, const Grid& g, const SpaceTimeField& truth,
                                            double eps) {
  if (truth.v.cols() != g.size() || truth.v.rows() != Eigen::Index(truth.t.size()))
    throw StructuralError("reference field does not match the evaluation grid");
  auto zf = evaluate_on_grid(z, g, truth.t);
  if (zf.size() != 2) throw StructuralError("envelope network must have two outputs");
  NeuralMdEvaluation e;
  e.amplitude = wkb_reconstruct(zf[0], zf[1], nullptr, eps);
  if (r) {
    auto rf = evaluate_on_grid(*r, g, truth.t);
    e.full = wkb_reconstruct(zf[0], zf[1], &rf.front(), eps);
  } else {
    e.full = e.amplitude;
  }
  const auto c = error_criterion(e.amplitude, e.full, truth);
  e.selection = c.tag;
  e.err_amplitude = c.err_amplitude, e.err_full = c.err_full;
  e.rmae_amplitude = rmae(e.amplitude.v, truth.v), e.rrmse_amplitude = rrmse(e.amplitude.v, truth.v);
  e.rmae_full = rmae(e.full.v, truth.v), e.rrmse_full = rrmse(e.full.v, truth.v);
  e.rmae_selected = rmae(e.selected().v, truth.v), e.rrmse_selected = rrmse(e.selected().v, truth.v);
  return e;
}

}  // namespace neuralmd
