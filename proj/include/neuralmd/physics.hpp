#pragma once

// PDE-level mathematics for the Klein-Gordon problem and its multiscale decomposition
//   u = e^{it/eps^2} z + c.c. + r,
// with z solving the envelope (Schroedinger-wave) equation and r the remainder equation.

#include <Eigen/Dense>

#include <cmath>
#include <functional>
#include <numbers>
#include <span>
#include <string>
#include <vector>

#include "neuralmd/autodiff.hpp"
#include "neuralmd/errors.hpp"
#include "neuralmd/fourier.hpp"
#include "neuralmd/network.hpp"

namespace neuralmd {

/// Initial data u(0) = phi1, u_t(0) = eps^-2 phi2.
struct InitialData {
  std::string name;
  std::function<double(std::span<const double>)> phi1;
  std::function<double(std::span<const double>)> phi2;
};

inline InitialData initial_data(const std::string& name) {
  const double sqrt_pi = std::sqrt(std::numbers::pi);
  if (name == "benchmark")
    return {name, [=](std::span<const double> x) { return std::exp(-x[0] * x[0]) / sqrt_pi; },
            [](std::span<const double> x) { return 0.5 * std::sin(x[0]) / std::cosh(x[0] * x[0]); }};
  if (name == "benchmark2")
    return {name, [](std::span<const double> x) { return 3.0 * std::sin(x[0]) / (2.0 * std::cosh(x[0] * x[0] / 2.0)); },
            [=](std::span<const double> x) { return 2.0 * std::exp(-x[0] * x[0]) / sqrt_pi; }};
  if (name == "gauss2d")
    return {name,
            [](std::span<const double> x) {
              const double y2 = x[1] * x[1];
              return std::exp(-(x[0] + 2) * (x[0] + 2) - y2) + std::exp(-(x[0] - 2) * (x[0] - 2) - y2);
            },
            [](std::span<const double> x) { return std::exp(-x[0] * x[0] - x[1] * x[1]); }};
  if (name == "zero") return {name, [](std::span<const double>) { return 0.0; }, [](std::span<const double>) { return 0.0; }};
  throw ConfigError("unknown initial data '" + name + "' (benchmark, benchmark2, gauss2d, zero)");
}

struct ProblemSpec {
  double eps = 0.5;
  double lambda = 1.0;
  std::vector<double> lower{-16.0};
  std::vector<double> upper{16.0};
  double T = 5.0;
  InitialData init = initial_data("benchmark");

  int dims() const { return static_cast<int>(lower.size()); }
  void validate() const {
    if (!(eps > 0.0 && eps <= 1.0)) throw ConfigError("eps must lie in (0, 1]");
    if (!(T > 0.0)) throw ConfigError("T must be positive");
    if (lower.empty() || lower.size() != upper.size()) throw ConfigError("domain bounds must match the dimension");
    for (std::size_t d = 0; d < lower.size(); ++d)
      if (!(upper[d] > lower[d])) throw ConfigError("domain interval must be nonempty");
    if (!std::isfinite(lambda)) throw ConfigError("lambda must be finite");
  }
  std::vector<double> periods() const {
    std::vector<double> p;
    for (std::size_t d = 0; d < lower.size(); ++d) p.push_back(upper[d] - lower[d]);
    return p;
  }

  static ProblemSpec benchmark1d(double eps) {
    ProblemSpec s;
    s.eps = eps;
    return s;
  }
  static ProblemSpec benchmark2d(double eps) {
    ProblemSpec s;
    s.eps = eps;
    s.lower = {-16.0, -16.0};
    s.upper = {16.0, 16.0};
    s.init = initial_data("gauss2d");
    return s;
  }
};

struct LossWeights {
  double res = 1.0;
  double ic = 1.0;
  double bd = 1.0;
};

// ---------------------------------------------------------------------------------------------
// Pointwise residuals

/// eps^2 u_tt - lap u + eps^-2 u + lambda u^3 (u real).
inline double nkge_residual(double u, double u_tt, double lap, const ProblemSpec& s) {
  return s.eps * s.eps * u_tt - lap + u / (s.eps * s.eps) + s.lambda * u * u * u;
}

namespace detail {
inline double laplacian(const ad::Jet2& j, int dims) {
  double lap = 0.0;
  for (int k = 0; k < dims; ++k) {
    if (j.layout.find(k) < 0) throw StructuralError("residual needs every spatial coordinate in the jet");
    lap += j.d2(k, k);
  }
  return lap;
}
}  // namespace detail

inline double nkge_residual(const ad::Jet2& u, const ProblemSpec& s) {
  return nkge_residual(u.value, u.d2(s.dims(), s.dims()), detail::laplacian(u, s.dims()), s);
}

/// Imaginary- and real-part projections of 2i z_t + w z_tt - lap z + 3 lambda |z|^2 z, w = eps^2.
struct ResidualPair {
  double im = 0.0;  // 2 a_t + w b_tt - lap b + 3 lambda |z|^2 b
  double re = 0.0;  // -2 b_t + w a_tt - lap a + 3 lambda |z|^2 a
};

inline ResidualPair nlsw_residual(double a, double b, double a_t, double b_t, double a_tt, double b_tt, double lap_a,
                                  double lap_b, double lambda, double wave) {
  const double m = 3.0 * lambda * (a * a + b * b);
  return {2.0 * a_t + wave * b_tt - lap_b + m * b, -2.0 * b_t + wave * a_tt - lap_a + m * a};
}

inline ResidualPair nlsw_residual(const ad::Jet2& re, const ad::Jet2& im, const ProblemSpec& s) {
  const int t = s.dims();
  return nlsw_residual(re.value, im.value, re.d1(t), im.d1(t), re.d2(t, t), im.d2(t, t), detail::laplacian(re, t),
                       detail::laplacian(im, t), s.lambda, s.eps * s.eps);
}

/// The limiting Schroedinger residual: the same projections without the wave term.
inline ResidualPair nlse_residual(const ad::Jet2& re, const ad::Jet2& im, const ProblemSpec& s) {
  const int t = s.dims();
  return nlsw_residual(re.value, im.value, re.d1(t), im.d1(t), 0.0, 0.0, detail::laplacian(re, t),
                       detail::laplacian(im, t), s.lambda, 0.0);
}

/// Coupling f_r: lambda [2 Re(zeta^3) + 6 Re(zeta^2) r + 6 Re(zeta) r^2 + 6 |z|^2 r + r^3] with
/// zeta = e^{it/eps^2} z. Equals lambda (u^3 - 3|z|^2 w) with w = 2 Re(zeta), u = w + r.
inline double coupling_fr(double zr, double zi, double r, double t, const ProblemSpec& s) {
  const std::complex<double> zeta = std::polar(1.0, t / (s.eps * s.eps)) * std::complex<double>(zr, zi);
  const double z2 = zr * zr + zi * zi;
  return s.lambda * (2.0 * std::real(zeta * zeta * zeta) + 6.0 * std::real(zeta * zeta) * r +
                     6.0 * std::real(zeta) * r * r + 6.0 * z2 * r + r * r * r);
}

/// d f_r / d r = 3 lambda (w + r)^2.
inline double coupling_fr_dr(double zr, double zi, double r, double t, const ProblemSpec& s) {
  const double w = 2.0 * std::real(std::polar(1.0, t / (s.eps * s.eps)) * std::complex<double>(zr, zi));
  return 3.0 * s.lambda * (w + r) * (w + r);
}

inline double remainder_residual(double r, double r_tt, double lap, double zr, double zi, double t, const ProblemSpec& s) {
  return s.eps * s.eps * r_tt - lap + r / (s.eps * s.eps) + coupling_fr(zr, zi, r, t, s);
}

inline double remainder_residual(const ad::Jet2& r, double zr, double zi, const ProblemSpec& s, double t) {
  const int tc = s.dims();
  return remainder_residual(r.value, r.d2(tc, tc), detail::laplacian(r, tc), zr, zi, t, s);
}

// ---------------------------------------------------------------------------------------------
// Initial data for the decomposition

struct EnvelopeInitial {
  CplxVec z0;   // (phi1 - i phi2)/2
  CplxVec dz0;  // (i/2)(-lap z0 + 3 lambda |z0|^2 z0)
};

/// Sample phi1, phi2 on the grid after checking that they are periodic-compatible.
inline std::pair<RealVec, RealVec> sample_initial(const ProblemSpec& s, const Grid& g) {
  for (int d = 0; d < g.dims(); ++d) {
    // compare the faces x_d = a_d and x_d = b_d over grid nodes of the other dimensions
    for (Eigen::Index f = 0; f < g.size(); ++f) {
      if (g.index(f, d) != 0) continue;
      auto pa = g.point(f), pb = pa;
      pb[std::size_t(d)] = g.upper[std::size_t(d)];
      const double j1 = std::abs(s.init.phi1(pa) - s.init.phi1(pb));
      const double j2 = std::abs(s.init.phi2(pa) - s.init.phi2(pb));
      if (j1 > 1e-8 || j2 > 1e-8)
        throw DataError("initial data are not periodic-compatible on the domain (edge jump " + std::to_string(std::max(j1, j2)) + ")");
    }
  }
  RealVec p1(g.size()), p2(g.size());
  for (Eigen::Index f = 0; f < g.size(); ++f) {
    auto x = g.point(f);
    p1(f) = s.init.phi1(x);
    p2(f) = s.init.phi2(x);
  }
  return {p1, p2};
}

inline EnvelopeInitial prepare_z_initial(const ProblemSpec& s, Fft& fft) {
  auto [p1, p2] = sample_initial(s, fft.grid());
  EnvelopeInitial e;
  e.z0 = 0.5 * (p1.cast<cplx>() - cplx(0.0, 1.0) * p2.cast<cplx>());
  const CplxVec lap = fft.laplacian(e.z0);
  e.dz0 = cplx(0.0, 0.5) * (-lap + 3.0 * s.lambda * e.z0.cwiseAbs2().cast<cplx>().cwiseProduct(e.z0));
  return e;
}

struct RemainderInitial {
  RealVec r0;
  RealVec dr0;  // -2 Re(dz0)
};

inline RemainderInitial prepare_r_initial(const CplxVec& dz0) {
  return {RealVec::Zero(dz0.size()), -2.0 * dz0.real()};
}

/// Hard-IC data at batch points: each row's value and spatial derivatives interpolated from grid
/// data. `pts` is (d+1) x B with time last; time channels stay zero.
inline JetBlock interpolate_rows(const std::vector<RealVec>& rows, const Eigen::MatrixXd& pts, const JetLayout& layout, Fft& fft) {
  const int d = fft.grid().dims();
  const int B = static_cast<int>(pts.cols());
  JetBlock out(static_cast<Eigen::Index>(rows.size()), B, layout.channels());
  const Eigen::MatrixXd xs = pts.topRows(d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    InterpJets j = interpolate(rows[r].cast<cplx>(), xs, fft);
    out.ch(0).row(Eigen::Index(r)) = j.value.real().transpose();
    for (int k = 0; k < d; ++k) {
      if (int i = layout.find(k); i >= 0) {
        out.ch(layout.d1(i)).row(Eigen::Index(r)) = j.d1[std::size_t(k)].real().transpose();
        out.ch(layout.d2(i)).row(Eigen::Index(r)) = j.d2[std::size_t(k)].real().transpose();
      }
    }
  }
  return out;
}

// ---------------------------------------------------------------------------------------------
// Space-time fields, reconstruction, selection and metrics

/// Values on a (time x space) grid: row i is the snapshot at t[i], columns are flat grid points.
struct SpaceTimeField {
  std::vector<double> t;
  Eigen::MatrixXd v;

  bool same_grid(const SpaceTimeField& o) const { return t == o.t && v.rows() == o.v.rows() && v.cols() == o.v.cols(); }
};

/// u = 2 [z_re cos(t/eps^2) - z_im sin(t/eps^2)] + r.
inline SpaceTimeField wkb_reconstruct(const SpaceTimeField& zr, const SpaceTimeField& zi, const SpaceTimeField* r, double eps) {
  if (!zr.same_grid(zi) || (r && !zr.same_grid(*r))) throw StructuralError("wkb_reconstruct: grid mismatch");
  SpaceTimeField u{zr.t, Eigen::MatrixXd(zr.v.rows(), zr.v.cols())};
  for (Eigen::Index i = 0; i < u.v.rows(); ++i) {
    const double ph = zr.t[std::size_t(i)] / (eps * eps);
    u.v.row(i) = 2.0 * (zr.v.row(i) * std::cos(ph) - zi.v.row(i) * std::sin(ph));
    if (r) u.v.row(i) += r->v.row(i);
  }
  return u;
}

enum class Selection { AmplitudeOnly, WithRemainder };
inline const char* to_string(Selection s) { return s == Selection::AmplitudeOnly ? "amplitude-only" : "with-remainder"; }

struct CriterionResult {
  const SpaceTimeField* selected = nullptr;
  Selection tag = Selection::AmplitudeOnly;
  double err_amplitude = 0.0;
  double err_full = 0.0;
};

/// Picks the reconstruction with the smaller global L2 error; ties go to amplitude-only.
inline CriterionResult error_criterion(const SpaceTimeField& amp, const SpaceTimeField& full, const SpaceTimeField& truth) {
  if (!amp.same_grid(truth) || !full.same_grid(truth)) throw StructuralError("error_criterion: grid mismatch");
  CriterionResult c;
  c.err_amplitude = (amp.v - truth.v).norm();
  c.err_full = (full.v - truth.v).norm();
  const bool full_wins = c.err_full < c.err_amplitude;
  c.selected = full_wins ? &full : &amp;
  c.tag = full_wins ? Selection::WithRemainder : Selection::AmplitudeOnly;
  return c;
}

/// sqrt(sum |e| / sum |u|); `outer_sqrt = false` gives the plain relative L1 ratio.
inline double rmae(const Eigen::Ref<const Eigen::MatrixXd>& pred, const Eigen::Ref<const Eigen::MatrixXd>& truth,
                   bool outer_sqrt = true) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw MetricError("rmae: shape mismatch");
  const double den = truth.cwiseAbs().sum();
  if (!(den > 0.0)) throw MetricError("rmae: truth has zero norm");
  const double ratio = (pred - truth).cwiseAbs().sum() / den;
  return outer_sqrt ? std::sqrt(ratio) : ratio;
}

/// sqrt(sum e^2 / sum u^2).
inline double rrmse(const Eigen::Ref<const Eigen::MatrixXd>& pred, const Eigen::Ref<const Eigen::MatrixXd>& truth) {
  if (pred.rows() != truth.rows() || pred.cols() != truth.cols()) throw MetricError("rrmse: shape mismatch");
  const double den = truth.squaredNorm();
  if (!(den > 0.0)) throw MetricError("rrmse: truth has zero norm");
  return std::sqrt((pred - truth).squaredNorm() / den);
}

// ---------------------------------------------------------------------------------------------
// Batched loss terms. Each takes the network output block (rows = outputs) with jets along the
// layout, per-point weights (already including 1/|P| and any gate factor), and fills `partials`
// with d loss / d (every channel entry) when non-null. Layout coordinate `dims` is time.

namespace detail {
inline double lap_entry(const JetBlock& u, const JetLayout& lay, int dims, Eigen::Index row, int p) {
  double s = 0.0;
  for (int k = 0; k < dims; ++k) {
    const int i = lay.find(k);
    if (i < 0) throw StructuralError("loss: spatial coordinate missing from layout");
    s += u.ch(lay.d2(i))(row, p);
  }
  return s;
}
inline void add_lap_partial(JetBlock& g, const JetLayout& lay, int dims, Eigen::Index row, int p, double v) {
  for (int k = 0; k < dims; ++k) g.ch(lay.d2(lay.find(k)))(row, p) += v;
}
inline int time_index(const JetLayout& lay, int dims) {
  const int it = lay.find(dims);
  if (it < 0) throw StructuralError("loss: time coordinate missing from layout");
  return it;
}
inline void reset(JetBlock* g, const JetBlock& like) {
  if (g) *g = JetBlock(like.rows(), like.batch, like.channels);
}
}  // namespace detail

/// sum_p w_p (R_im^2 + R_re^2) for the envelope equation; `wave` is the z_tt coefficient.
/// `squared` receives per-point R_im^2 + R_re^2 when non-null.
inline double envelope_residual_loss(const JetBlock& z, const JetLayout& lay, const ProblemSpec& s, const RealVec& w,
                                     double wave, JetBlock* g, RealVec* squared = nullptr) {
  const int d = s.dims();
  const int it = detail::time_index(lay, d);
  detail::reset(g, z);
  if (squared) squared->resize(z.batch);
  double total = 0.0;
  for (int p = 0; p < z.batch; ++p) {
    const double a = z.ch(0)(0, p), b = z.ch(0)(1, p);
    const auto R = nlsw_residual(a, b, z.ch(lay.d1(it))(0, p), z.ch(lay.d1(it))(1, p), z.ch(lay.d2(it))(0, p),
                                 z.ch(lay.d2(it))(1, p), detail::lap_entry(z, lay, d, 0, p),
                                 detail::lap_entry(z, lay, d, 1, p), s.lambda, wave);
    const double sq = R.im * R.im + R.re * R.re;
    if (squared) (*squared)(p) = sq;
    total += w(p) * sq;
    if (!g) continue;
    const double g1 = 2.0 * w(p) * R.im, g2 = 2.0 * w(p) * R.re;
    const double L = s.lambda;
    g->ch(0)(0, p) = g1 * 6.0 * L * a * b + g2 * (3.0 * L * (a * a + b * b) + 6.0 * L * a * a);
    g->ch(0)(1, p) = g1 * (3.0 * L * (a * a + b * b) + 6.0 * L * b * b) + g2 * 6.0 * L * a * b;
    g->ch(lay.d1(it))(0, p) = 2.0 * g1;
    g->ch(lay.d1(it))(1, p) = -2.0 * g2;
    g->ch(lay.d2(it))(0, p) = wave * g2;
    g->ch(lay.d2(it))(1, p) = wave * g1;
    detail::add_lap_partial(*g, lay, d, 0, p, -g2);
    detail::add_lap_partial(*g, lay, d, 1, p, -g1);
  }
  return total;
}

/// Remainder residual loss sum_p w_p R_p^2; z values (2 x B) and times come from the frozen
/// envelope network.
inline double remainder_residual_loss(const JetBlock& r, const JetLayout& lay, const ProblemSpec& s, const Eigen::MatrixXd& z,
                                      const RealVec& times, const RealVec& w, JetBlock* g, RealVec* squared = nullptr) {
  const int d = s.dims();
  const int it = detail::time_index(lay, d);
  detail::reset(g, r);
  if (squared) squared->resize(r.batch);
  const double e2 = s.eps * s.eps;
  double total = 0.0;
  for (int p = 0; p < r.batch; ++p) {
    const double v = r.ch(0)(0, p);
    const double R = remainder_residual(v, r.ch(lay.d2(it))(0, p), detail::lap_entry(r, lay, d, 0, p), z(0, p), z(1, p), times(p), s);
    if (squared) (*squared)(p) = R * R;
    total += w(p) * R * R;
    if (!g) continue;
    const double gr = 2.0 * w(p) * R;
    g->ch(0)(0, p) = gr * (1.0 / e2 + coupling_fr_dr(z(0, p), z(1, p), v, times(p), s));
    g->ch(lay.d2(it))(0, p) = gr * e2;
    detail::add_lap_partial(*g, lay, d, 0, p, -gr);
  }
  return total;
}

/// Direct NKGE residual loss sum_p w_p R_p^2 (vanilla collocation on u).
inline double nkge_residual_loss(const JetBlock& u, const JetLayout& lay, const ProblemSpec& s, const RealVec& w, JetBlock* g,
                                 RealVec* squared = nullptr) {
  const int d = s.dims();
  const int it = detail::time_index(lay, d);
  detail::reset(g, u);
  if (squared) squared->resize(u.batch);
  const double e2 = s.eps * s.eps;
  double total = 0.0;
  for (int p = 0; p < u.batch; ++p) {
    const double v = u.ch(0)(0, p);
    const double R = nkge_residual(v, u.ch(lay.d2(it))(0, p), detail::lap_entry(u, lay, d, 0, p), s);
    if (squared) (*squared)(p) = R * R;
    total += w(p) * R * R;
    if (!g) continue;
    const double gr = 2.0 * w(p) * R;
    g->ch(0)(0, p) = gr * (1.0 / e2 + 3.0 * s.lambda * v * v);
    g->ch(lay.d2(it))(0, p) = gr * e2;
    detail::add_lap_partial(*g, lay, d, 0, p, -gr);
  }
  return total;
}

/// Initial-condition loss sum_p w_p sum_rows (|u - u0|^2 + |u_t - du0|^2) at t = 0 points.
inline double initial_condition_loss(const JetBlock& u, const JetLayout& lay, int dims, const Eigen::MatrixXd& u0,
                                     const Eigen::MatrixXd& du0, const RealVec& w, JetBlock* g) {
  const int it = detail::time_index(lay, dims);
  detail::reset(g, u);
  double total = 0.0;
  for (int p = 0; p < u.batch; ++p) {
    for (Eigen::Index row = 0; row < u.rows(); ++row) {
      const double e0 = u.ch(0)(row, p) - u0(row, p);
      const double e1 = u.ch(lay.d1(it))(row, p) - du0(row, p);
      total += w(p) * (e0 * e0 + e1 * e1);
      if (g) {
        g->ch(0)(row, p) = 2.0 * w(p) * e0;
        g->ch(lay.d1(it))(row, p) = 2.0 * w(p) * e1;
      }
    }
  }
  return total;
}

/// Periodic boundary loss. Columns [0, B/2) are points on the lower faces, [B/2, B) their partners
/// on the upper faces at the same time; `face_dim[p]` is the paired dimension. Matches values and
/// the normal derivative.
inline double boundary_loss(const JetBlock& u, const JetLayout& lay, const std::vector<int>& face_dim, const RealVec& w, JetBlock* g) {
  const int half = u.batch / 2;
  if (u.batch != 2 * half || static_cast<int>(face_dim.size()) != half || w.size() != half)
    throw StructuralError("boundary_loss: expected paired columns");
  detail::reset(g, u);
  double total = 0.0;
  for (int p = 0; p < half; ++p) {
    const int i = lay.find(face_dim[std::size_t(p)]);
    if (i < 0) throw StructuralError("boundary_loss: face coordinate missing from layout");
    for (Eigen::Index row = 0; row < u.rows(); ++row) {
      const double e0 = u.ch(0)(row, p) - u.ch(0)(row, p + half);
      const double e1 = u.ch(lay.d1(i))(row, p) - u.ch(lay.d1(i))(row, p + half);
      total += w(p) * (e0 * e0 + e1 * e1);
      if (g) {
        g->ch(0)(row, p) = 2.0 * w(p) * e0;
        g->ch(0)(row, p + half) = -2.0 * w(p) * e0;
        g->ch(lay.d1(i))(row, p) = 2.0 * w(p) * e1;
        g->ch(lay.d1(i))(row, p + half) = -2.0 * w(p) * e1;
      }
    }
  }
  return total;
}

/// w_res L_res + w_ic L_ic + w_bd L_bd as a tape node; pass -1 for an absent term.
inline int assemble_loss(ad::Tape& tape, int res, int ic, int bd, const LossWeights& w) {
  std::vector<std::pair<int, double>> terms;
  if (res >= 0) terms.emplace_back(res, w.res);
  if (ic >= 0) terms.emplace_back(ic, w.ic);
  if (bd >= 0) terms.emplace_back(bd, w.bd);
  return tape.weighted_sum(std::move(terms));
}
inline int assemble_loss_stage1(ad::Tape& tape, int res, int ic, int bd, const LossWeights& w) { return assemble_loss(tape, res, ic, bd, w); }
inline int assemble_loss_stage2(ad::Tape& tape, int res, int ic, int bd, const LossWeights& w) { return assemble_loss(tape, res, ic, bd, w); }

}  // namespace neuralmd
