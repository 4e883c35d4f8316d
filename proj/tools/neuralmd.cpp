#include <CLI11.hpp>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include "neuralmd/config.hpp"
#include "neuralmd/spectral.hpp"
#include "neuralmd/training.hpp"

namespace fs = std::filesystem;
using namespace neuralmd;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kNumeric = 3, kResolution = 4 };

struct Context {
  RunConfig cfg;
  fs::path out;

  fs::path at(const std::string& name) const { return out / name; }
  ProblemSpec spec() const { return cfg.problem; }
};

void write_text(const fs::path& p, const std::string& s) {
  std::ofstream os(p);
  if (!os) throw StructuralError("cannot write " + p.string());
  os << s;
}

std::string g17(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// The reference Klein-Gordon field for the configured problem: loaded when a file is given,
/// otherwise solved directly.
SpaceTimeField reference_field(const Context& c, const std::string& path) {
  const auto times = c.cfg.snapshot_times();
  if (!path.empty()) {
    SpaceTimeField f{times, read_field_binary(path)};
    if (f.v.rows() != Eigen::Index(times.size()) || f.v.cols() != c.cfg.grid().size())
      throw StructuralError("reference " + path + " does not match the configured grid and snapshot times");
    return f;
  }
  const double e2 = c.cfg.problem.eps * c.cfg.problem.eps;
  return solve_nkge(c.spec(), c.cfg.grid(), c.cfg.reference.nkge_dt_fraction * e2, times).u;
}

void write_error_map(const Context& c, const std::string& stem, const SpaceTimeField& pred, const SpaceTimeField& truth) {
  SpaceTimeField err{truth.t, (pred.v - truth.v).cwiseAbs()};
  write_field_csv(c.at(stem + ".csv").string(), err, c.cfg.grid(), "abs_error");
  write_heatmap_ppm(c.at(stem + ".ppm").string(), err.v);
}

Checkpoint aborted_checkpoint(const Context& c, const TrainingAborted& e, int stage) {
  Checkpoint k;
  k.seed = c.cfg.train.seed;
  k.stage = std::uint32_t(stage);
  k.params = e.last_good;
  if (stage == 0) {
    k.descriptor = describe(initial_net(TrainKind::Vanilla, c.spec(), c.cfg.train).mlp);
  } else {
    GateState g = c.cfg.train.gate;
    if (!e.report.rows.empty()) g.gamma = e.report.rows.back().gamma;
    k.descriptor = describe(architecture_for(c.spec(), c.cfg.train.arch, stage == 1 ? 2 : 1), g);
  }
  return k;
}

/// Runs one training stage, persisting the checkpoint and report; on a numeric abort the last
/// good parameters are written before the error propagates.
template <class Fn>
TrainResult run_stage(const Context& c, int stage, const std::string& name, Fn&& train) {
  try {
    TrainResult r = train();
    write_checkpoint(c.at(name + ".ckpt").string(), r.checkpoint());
    r.report.write_csv(c.at("report_" + name + ".csv").string());
    std::printf("%s: %zu iterations, final loss %.6e, gamma %.6f, report digest %s\n", name.c_str(), r.report.rows.size(),
                r.report.rows.empty() ? 0.0 : r.report.rows.back().loss_total, r.net.gate.gamma, r.report.digest().c_str());
    return r;
  } catch (const TrainingAborted& e) {
    write_checkpoint(c.at(name + "_last_good.ckpt").string(), aborted_checkpoint(c, e, stage));
    e.report.write_csv(c.at("report_" + name + ".csv").string());
    throw;
  }
}

// ---------------------------------------------------------------------------------------------

int cmd_reference(const Context& c) {
  const auto s = c.spec();
  const Grid g = c.cfg.grid();
  const auto times = c.cfg.snapshot_times();
  const double dt = c.cfg.reference.nkge_dt_fraction * s.eps * s.eps;
  const auto u = solve_nkge(s, g, dt, times);
  write_field_csv(c.at("reference_nkge.csv").string(), u.u, g, "u");
  write_field_binary(c.at("reference_nkge.bin").string(), u.u.v);
  const auto zw = solve_nlsw(s, g, c.cfg.reference.limit_dt, times);
  write_field_csv(c.at("reference_nlsw_re.csv").string(), zw.re, g, "z_re");
  write_field_csv(c.at("reference_nlsw_im.csv").string(), zw.im, g, "z_im");
  const auto zs = solve_nlse(s, g, c.cfg.reference.limit_dt, times);
  write_field_csv(c.at("reference_nlse_re.csv").string(), zs.re, g, "z_re");
  write_field_csv(c.at("reference_nlse_im.csv").string(), zs.im, g, "z_im");
  if (s.lambda == 0.0) write_field_csv(c.at("reference_linear_exact.csv").string(), nkge_linear_exact(s, g, times), g, "u");
  std::printf("reference: %zu snapshots on %ld points, %ld NKGE steps, energy drift %.3e\n", times.size(), long(g.size()),
              u.steps, u.energy_drift);
  return kOk;
}

int cmd_train(const Context& c, const std::string& stage, const std::string& stage1_path) {
  if (stage != "1" && stage != "2" && stage != "both") throw ConfigError("--stage must be 1, 2 or both");
  const auto s = c.spec();
  std::optional<Checkpoint> c1;
  if (stage == "1" || stage == "both") {
    auto r1 = run_stage(c, 1, "stage1", [&] { return train_stage1(s, c.cfg.train); });
    c1 = r1.checkpoint();
  }
  if (stage == "2" || stage == "both") {
    if (!c1) {
      const std::string path = stage1_path.empty() ? c.at("stage1.ckpt").string() : stage1_path;
      if (!fs::exists(path)) throw StructuralError("stage 2 needs a stage-1 checkpoint; not found: " + path);
      c1 = read_checkpoint(path);
    }
    run_stage(c, 2, "stage2", [&] { return train_stage2(s, *c1, c.cfg.train); });
  }
  return kOk;
}

int cmd_evaluate(const Context& c, std::string stage1_path, std::string stage2_path, const std::string& reference) {
  const auto s = c.spec();
  if (stage1_path.empty()) stage1_path = c.at("stage1.ckpt").string();
  if (stage2_path.empty() && fs::exists(c.at("stage2.ckpt"))) stage2_path = c.at("stage2.ckpt").string();
  const auto z = net_from_checkpoint(read_checkpoint(stage1_path), s, c.cfg.train);
  std::optional<TrainedNet> r;
  if (!stage2_path.empty()) r = net_from_checkpoint(read_checkpoint(stage2_path), s, c.cfg.train);
  const auto truth = reference_field(c, reference);
  const auto e = evaluate_neuralmd(z, r ? &*r : nullptr, c.cfg.grid(), truth, s.eps);

  std::ostringstream os;
  os << "reconstruction,rmae,rrmse,criterion_error,selected\n";
  os << "amplitude-only," << g17(e.rmae_amplitude) << ',' << g17(e.rrmse_amplitude) << ',' << g17(e.err_amplitude) << ','
     << (e.selection == Selection::AmplitudeOnly) << '\n';
  os << "with-remainder," << g17(e.rmae_full) << ',' << g17(e.rrmse_full) << ',' << g17(e.err_full) << ','
     << (e.selection == Selection::WithRemainder) << '\n';
  os << "selected:" << to_string(e.selection) << ',' << g17(e.rmae_selected) << ',' << g17(e.rrmse_selected) << ",,1\n";
  write_text(c.at("metrics.csv"), os.str());
  write_error_map(c, "error_amplitude", e.amplitude, truth);
  if (r) write_error_map(c, "error_with_remainder", e.full, truth);
  std::printf("evaluate: selected %s, rMAE %.4e, rRMSE %.4e (amplitude-only rRMSE %.4e)\n", to_string(e.selection),
              e.rmae_selected, e.rrmse_selected, e.rrmse_amplitude);
  return kOk;
}

int cmd_convergence(const Context& c) {
  const auto& rc = c.cfg.reference;
  if (rc.convergence_eps.size() < 3) throw ConfigError("reference.convergence_eps needs at least three values");
  std::vector<double> times;
  const long n = std::lround(rc.convergence_T / rc.snapshot_dt);
  for (long i = 0; i <= n; ++i) times.push_back(std::min(rc.convergence_T, double(i) * rc.snapshot_dt));
  // slopes are fitted at t = 1 and at the final time
  const auto idx_at = [&](double t) {
    std::size_t best = 0;
    for (std::size_t i = 0; i < times.size(); ++i)
      if (std::abs(times[i] - t) < std::abs(times[best] - t)) best = i;
    return best;
  };
  const std::size_t i1 = idx_at(1.0), iT = times.size() - 1;

  std::ostringstream curves;
  curves << "eps,t,eta_nlsw,eta_nlse\n";
  std::vector<double> e1, eT, s1, sT;
  for (double eps : rc.convergence_eps) {
    ProblemSpec s = c.spec();
    s.eps = eps;
    s.T = rc.convergence_T;
    const auto eta = eta_curves(s, c.cfg.grid(), times, rc.nkge_dt_fraction * eps * eps, rc.limit_dt);
    for (std::size_t i = 0; i < times.size(); ++i)
      curves << g17(eps) << ',' << g17(times[i]) << ',' << g17(eta.nlsw[i]) << ',' << g17(eta.nlse[i]) << '\n';
    e1.push_back(eta.nlsw[i1]), eT.push_back(eta.nlsw[iT]);
    s1.push_back(eta.nlse[i1]), sT.push_back(eta.nlse[iT]);
  }
  write_text(c.at("convergence.csv"), curves.str());
  std::ostringstream slopes;
  slopes << "model,t,order\n";
  slopes << "nlsw," << g17(times[i1]) << ',' << g17(fit_convergence_order(rc.convergence_eps, e1)) << '\n';
  slopes << "nlsw," << g17(times[iT]) << ',' << g17(fit_convergence_order(rc.convergence_eps, eT)) << '\n';
  slopes << "nlse," << g17(times[i1]) << ',' << g17(fit_convergence_order(rc.convergence_eps, s1)) << '\n';
  slopes << "nlse," << g17(times[iT]) << ',' << g17(fit_convergence_order(rc.convergence_eps, sT)) << '\n';
  write_text(c.at("convergence_slopes.csv"), slopes.str());
  std::printf("convergence: eta_nlsw order %.3f at t=%g\n", fit_convergence_order(rc.convergence_eps, e1), times[i1]);
  return kOk;
}

int cmd_baseline(const Context& c, const std::string& reference) {
  const auto s = c.spec();
  auto r = run_stage(c, 0, "baseline", [&] { return train_baseline(s, c.cfg.train); });
  const auto truth = reference_field(c, reference);
  const auto u = evaluate_on_grid(r.net, c.cfg.grid(), truth.t).front();
  std::ostringstream os;
  os << "reconstruction,rmae,rrmse\n" << "baseline," << g17(rmae(u.v, truth.v)) << ',' << g17(rrmse(u.v, truth.v)) << '\n';
  write_text(c.at("metrics_baseline.csv"), os.str());
  write_error_map(c, "error_baseline", u, truth);
  std::printf("baseline: rMAE %.4e, rRMSE %.4e\n", rmae(u.v, truth.v), rrmse(u.v, truth.v));
  return kOk;
}

int cmd_diagnose(const Context& c, std::string ckpt) {
  const auto s = c.spec();
  const auto& d = c.cfg.diagnose;
  if (ckpt.empty()) ckpt = c.at("stage1.ckpt").string();
  const auto net = net_from_checkpoint(read_checkpoint(ckpt), s, c.cfg.train);
  Rng rng(c.cfg.train.seed, "diagnose", 0);
  const double dt = d.dt_fraction * s.T;

  auto random_x = [&](Rng& r) {
    std::vector<double> x;
    for (int k = 0; k < s.dims(); ++k) x.push_back(r.uniform(s.lower[std::size_t(k)], s.upper[std::size_t(k)]));
    return x;
  };
  std::ostringstream os;
  os << "probe";
  for (int k = 0; k < s.dims(); ++k) os << ",x" << k;
  os << ",t,dt,grad_norm_sq,G_zero_lag,G,D,rel_diff\n";
  double worst = 0.0;
  for (int i = 0; i < d.probes; ++i) {
    const auto x = random_x(rng);
    const double t = rng.uniform(0.0, s.T - dt);
    const auto probe = net.probe(x, {0});
    const double g2 = probe.grads(net.params, t).front().squaredNorm();
    const double G0 = grad_correlation(probe, net.params, t, 0.0, s.T);
    const double G = grad_correlation(probe, net.params, t, dt, s.T);
    const double D = stiffness_D(probe, net.params, t, dt, d.lambda_probe);
    const double rel = std::abs(D - G) / std::max(G, 1e-12);
    worst = std::max(worst, rel);
    os << i;
    for (double v : x) os << ',' << g17(v);
    os << ',' << g17(t) << ',' << g17(dt) << ',' << g17(g2) << ',' << g17(G0) << ',' << g17(G) << ',' << g17(D) << ','
       << g17(rel) << '\n';
  }
  write_text(c.at("diagnose_probes.csv"), os.str());

  Rng xs(c.cfg.train.seed, "diagnose", 1);
  auto make = [&](int) { return std::make_pair(net.probe(random_x(xs), {0}), net.params); };
  const auto sum = time_avg_correlation_check(make, s.T, d.radius, d.shifts, d.samples, rng);
  std::ostringstream ss;
  ss << "samples,conforming,passed,pass_fraction,max_rel_D_G\n"
     << sum.samples << ',' << sum.conforming << ',' << sum.passed << ',' << g17(sum.pass_fraction()) << ',' << g17(worst) << '\n';
  write_text(c.at("diagnose_summary.csv"), ss.str());
  std::printf("diagnose: max |D-G|/G %.3e, time-averaged check %d/%d conforming samples pass\n", worst, sum.passed,
              sum.conforming);
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"NeuralMD: two-stage neural solver for the nonrelativistic Klein-Gordon limit"};
  app.require_subcommand(1);
  std::string config_path, out_dir, stage = "both", stage1, stage2, reference, checkpoint;
  std::optional<std::uint64_t> seed;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", config_path, "INI configuration file (unset keys take defaults)");
    sub->add_option("--out", out_dir, "output directory (overrides output.dir)");
    sub->add_option("--seed", seed, "root seed (overrides training.seed)");
  };
  auto* ref = app.add_subcommand("reference", "solve NKGE / NLSW / NLSE on the grid and write snapshots");
  auto* train = app.add_subcommand("train", "train NeuralMD stages and write checkpoints and reports");
  auto* eval = app.add_subcommand("evaluate", "score checkpoints against the reference; metrics and error maps");
  auto* conv = app.add_subcommand("convergence", "limit-model error curves and fitted orders in eps");
  auto* base = app.add_subcommand("baseline", "train and score the vanilla collocation baseline");
  auto* diag = app.add_subcommand("diagnose", "gradient correlation / stiffness probes on a checkpoint");
  for (auto* s : {ref, train, eval, conv, base, diag}) common(s);
  train->add_option("--stage", stage, "1, 2 or both")->capture_default_str();
  train->add_option("--stage1", stage1, "stage-1 checkpoint for --stage 2 (default <out>/stage1.ckpt)");
  eval->add_option("--stage1", stage1, "stage-1 checkpoint (default <out>/stage1.ckpt)");
  eval->add_option("--stage2", stage2, "stage-2 checkpoint (default <out>/stage2.ckpt when present)");
  eval->add_option("--reference", reference, "reference field from `reference` (default: solve it)");
  base->add_option("--reference", reference, "reference field from `reference` (default: solve it)");
  diag->add_option("--checkpoint", checkpoint, "checkpoint to probe (default <out>/stage1.ckpt)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kOk : kConfig;
  }

  try {
    Context c;
    c.cfg = config_path.empty() ? default_config() : load_config(config_path);
    if (seed) c.cfg.train.seed = *seed;
    if (!out_dir.empty()) c.cfg.out = out_dir;
    c.out = c.cfg.out;
    fs::create_directories(c.out);
    write_text(c.at("effective_config.ini"), effective_config(c.cfg));

    if (ref->parsed()) return cmd_reference(c);
    if (train->parsed()) return cmd_train(c, stage, stage1);
    if (eval->parsed()) return cmd_evaluate(c, stage1, stage2, reference);
    if (conv->parsed()) return cmd_convergence(c);
    if (base->parsed()) return cmd_baseline(c, reference);
    if (diag->parsed()) return cmd_diagnose(c, checkpoint);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return kConfig;
  } catch (const ResolutionError& e) {
    std::fprintf(stderr, "resolution refused: %s (required dt <= %.6g)\n", e.what(), e.required_dt());
    return kResolution;
  } catch (const NumericError& e) {
    std::fprintf(stderr, "numeric abort: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kFailure;
  }
  return kFailure;
}
