#pragma once

// Fourier pseudospectral reference solvers on periodic boxes:
//   Klein-Gordon  eps^2 u_tt - lap u + eps^-2 u + lambda u^3 = 0      (trigonometric integrator)
//   envelope      2i z_t + eps^2 z_tt - lap z + 3 lambda |z|^2 z = 0  (exponential ETD2 in the modal basis)
//   Schroedinger  2i z_t - lap z + 3 lambda |z|^2 z = 0               (Strang splitting)
// plus the limit-model error curves, convergence-order fitting and snapshot I/O.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iomanip>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "neuralmd/errors.hpp"
#include "neuralmd/fourier.hpp"
#include "neuralmd/physics.hpp"

namespace neuralmd {

struct ComplexSnapshots {
  SpaceTimeField re;
  SpaceTimeField im;
};

struct NkgeSolution {
  SpaceTimeField u;
  double energy_drift = 0.0;  // max relative change of the energy over the snapshots
  long steps = 0;
};

namespace detail {

inline void check_times(const std::vector<double>& times) {
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < 0.0 || (i > 0 && times[i] < times[i - 1])) throw StructuralError("snapshot times must be sorted and >= 0");
  }
}

inline void check_finite(const CplxVec& v, double t, const char* what) {
  if (!v.allFinite()) {
    std::ostringstream os;
    os << what << ": non-finite state at t = " << t;
    throw NumericError(os.str(), -1);
  }
}

/// Drives `step(h)` from 0 through every snapshot time with steps no larger than dt; each
/// interval is split evenly so snapshots are hit exactly.
template <class Step, class Record>
long march(const std::vector<double>& times, double dt, Step&& step, Record&& record) {
  double t = 0.0;
  long steps = 0;
  for (std::size_t i = 0; i < times.size(); ++i) {
    const double span = times[i] - t;
    if (span > 0.0) {
      const long n = std::max(1L, static_cast<long>(std::ceil(span / dt - 1e-9)));
      const double h = span / static_cast<double>(n);
      for (long k = 0; k < n; ++k) step(h, t + k * h);
      steps += n;
    }
    t = times[i];
    record(i, t);
  }
  return steps;
}

inline SpaceTimeField empty_field(const std::vector<double>& times, const Grid& g) {
  return {times, Eigen::MatrixXd::Zero(Eigen::Index(times.size()), g.size())};
}

}  // namespace detail

/// Klein-Gordon energy  sum [eps^2 u_t^2 + |grad u|^2 + eps^-2 u^2 + lambda/2 u^4] dx.
inline double nkge_energy(const RealVec& u, const RealVec& ut, const ProblemSpec& s, Fft& fft) {
  const CplxVec c = fft.forward(u);
  const double n = static_cast<double>(fft.grid().size());
  const double grad2 = c.cwiseAbs2().cwiseProduct(fft.k2()).sum() / n;
  const double e2 = s.eps * s.eps;
  return fft.grid().cell() *
         (e2 * ut.squaredNorm() + grad2 + u.squaredNorm() / e2 + 0.5 * s.lambda * u.array().pow(4).sum());
}

/// Trigonometric (impulse) integrator: half kick with the cubic force, exact linear rotation of
/// every Fourier mode at w_k = sqrt(1 + eps^2 k^2)/eps^2, half kick. Exact when lambda = 0.
/// Refuses dt > max_fraction * eps^2.
inline NkgeSolution solve_nkge(const ProblemSpec& s, const Grid& g, double dt, const std::vector<double>& times,
                               double max_fraction = 0.1) {
  s.validate();
  detail::check_times(times);
  const double e2 = s.eps * s.eps;
  if (!(dt > 0.0) || dt > max_fraction * e2 * (1.0 + 1e-12)) {
    std::ostringstream os;
    os << "time step " << dt << " does not resolve the O(eps^2) oscillation; need dt <= " << max_fraction * e2;
    throw ResolutionError(os.str(), max_fraction * e2);
  }
  Fft fft(g);
  auto [p1, p2] = sample_initial(s, g);
  RealVec u = p1, ut = p2 / e2;
  CplxVec uh = fft.forward(u), vh = fft.forward(ut);
  const RealVec k2 = fft.k2();
  const RealVec w = ((1.0 + e2 * k2.array()).sqrt() / e2).matrix();

  auto force = [&](const RealVec& uu) { return CplxVec(fft.forward(RealVec((-s.lambda / e2) * uu.array().cube()))); };
  CplxVec f = force(u);

  NkgeSolution sol{detail::empty_field(times, g), 0.0, 0};
  double e0 = 0.0;
  auto step = [&](double h, double t) {
    vh += 0.5 * h * f;
    for (Eigen::Index k = 0; k < uh.size(); ++k) {
      const double c = std::cos(w(k) * h), sn = std::sin(w(k) * h);
      const cplx a = uh(k), b = vh(k);
      uh(k) = c * a + (sn / w(k)) * b;
      vh(k) = -w(k) * sn * a + c * b;
    }
    const CplxVec ux = fft.backward(uh);
    detail::check_finite(ux, t + h, "solve_nkge");
    u = ux.real();
    f = force(u);
    vh += 0.5 * h * f;
  };
  auto record = [&](std::size_t i, double) {
    sol.u.v.row(Eigen::Index(i)) = u.transpose();
    const double e = nkge_energy(u, fft.backward(vh).real(), s, fft);
    if (i == 0) e0 = nkge_energy(p1, p2 / e2, s, fft);
    const double scale = std::abs(e0) > 0.0 ? std::abs(e0) : 1.0;
    sol.energy_drift = std::max(sol.energy_drift, std::abs(e - e0) / scale);
  };
  sol.steps = detail::march(times, dt, step, record);
  return sol;
}

/// Closed-form solution of the linear (lambda = 0) Klein-Gordon problem on the grid: every mode
/// evolves as u0^ cos(w t) + u1^ sin(w t) / w.
inline SpaceTimeField nkge_linear_exact(const ProblemSpec& s, const Grid& g, const std::vector<double>& times) {
  s.validate();
  detail::check_times(times);
  const double e2 = s.eps * s.eps;
  Fft fft(g);
  auto [p1, p2] = sample_initial(s, g);
  const CplxVec uh = fft.forward(p1), vh = fft.forward(RealVec(p2 / e2));
  const RealVec w = ((1.0 + e2 * fft.k2().array()).sqrt() / e2).matrix();
  SpaceTimeField out = detail::empty_field(times, g);
  for (std::size_t i = 0; i < times.size(); ++i) {
    const Eigen::ArrayXd wt = w.array() * times[i];
    const CplxVec at = (uh.array() * wt.cos() + vh.array() * wt.sin() / w.array()).matrix();
    out.v.row(Eigen::Index(i)) = fft.backward(at).real().transpose();
  }
  return out;
}

/// Limiting Schroedinger equation by Strang splitting: the cubic phase rotation
/// z <- exp(i (3 lambda / 2) |z|^2 h/2) z around the exact linear flow z^ <- exp(i k^2 h / 2) z^.
inline ComplexSnapshots solve_nlse(const ProblemSpec& s, const Grid& g, double dt, const std::vector<double>& times,
                                   const CplxVec* z_init = nullptr) {
  s.validate();
  detail::check_times(times);
  if (!(dt > 0.0)) throw ResolutionError("time step must be positive", 0.0);
  Fft fft(g);
  CplxVec z = z_init ? *z_init : prepare_z_initial(s, fft).z0;
  const RealVec k2 = fft.k2();
  CplxVec lin(k2.size());
  ComplexSnapshots out{detail::empty_field(times, g), detail::empty_field(times, g)};
  double lin_h = -1.0;
  auto nonlinear = [&](double h) {
    for (Eigen::Index j = 0; j < z.size(); ++j) z(j) *= std::polar(1.0, 1.5 * s.lambda * std::norm(z(j)) * h);
  };
  auto step = [&](double h, double t) {
    if (h != lin_h) {
      for (Eigen::Index k = 0; k < k2.size(); ++k) lin(k) = std::polar(1.0, 0.5 * k2(k) * h);
      lin_h = h;
    }
    nonlinear(0.5 * h);
    z = fft.backward(fft.forward(z).cwiseProduct(lin));
    nonlinear(0.5 * h);
    detail::check_finite(z, t + h, "solve_nlse");
  };
  auto record = [&](std::size_t i, double) {
    out.re.v.row(Eigen::Index(i)) = z.real().transpose();
    out.im.v.row(Eigen::Index(i)) = z.imag().transpose();
  };
  detail::march(times, dt, step, record);
  return out;
}

/// Envelope equation with the wave term. Per Fourier mode the linear part has the two exact
/// solutions e^{i mu_+- t}, mu_+- = (-1 +- sqrt(1 + w k^2))/w (w = wave coefficient); in that modal
/// basis the cubic forcing enters with an O(1) coefficient and is integrated by exponential
/// time differencing of order two. `wave = 0` is the Schroedinger limit and is delegated to
/// solve_nlse (the equation is then first order).
inline ComplexSnapshots solve_nlsw(const ProblemSpec& s, const Grid& g, double dt, const std::vector<double>& times,
                                   double wave = -1.0) {
  s.validate();
  if (wave < 0.0) wave = s.eps * s.eps;
  if (wave == 0.0) return solve_nlse(s, g, dt, times);
  detail::check_times(times);
  if (!(dt > 0.0)) throw ResolutionError("time step must be positive", 0.0);
  Fft fft(g);
  const EnvelopeInitial init = prepare_z_initial(s, fft);
  const RealVec k2 = fft.k2();
  const Eigen::Index n = k2.size();
  RealVec mup(n), mum(n), dmu(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    const double root = std::sqrt(1.0 + wave * k2(k));
    mup(k) = k2(k) / (1.0 + root);  // (-1 + root)/wave without cancellation
    mum(k) = (-1.0 - root) / wave;
    dmu(k) = 2.0 * root / wave;
  }
  // modal amplitudes: z^ = A + B, z^_t = i mu+ A + i mu- B
  const CplxVec zh = fft.forward(init.z0), dzh = fft.forward(init.dz0);
  const cplx I(0.0, 1.0);
  CplxVec A(n), B(n);
  for (Eigen::Index k = 0; k < n; ++k) {
    A(k) = (dzh(k) - I * mum(k) * zh(k)) / (I * dmu(k));
    B(k) = (I * mup(k) * zh(k) - dzh(k)) / (I * dmu(k));
  }
  // z'' = (-k^2 z - 2i z' + G)/wave with G = -3 lambda (|z|^2 z)^; forcing of A is G/(i wave dmu),
  // of B its negative.
  auto forcing = [&](const CplxVec& a, const CplxVec& b) {
    const CplxVec z = fft.backward(a + b);
    const CplxVec nl = (-3.0 * s.lambda) * z.cwiseAbs2().cast<cplx>().cwiseProduct(z);
    CplxVec G = fft.forward(nl);
    for (Eigen::Index k = 0; k < n; ++k) G(k) /= I * wave * dmu(k);
    return G;
  };
  auto phi = [](cplx z, int order) {
    // phi1 = (e^z - 1)/z, phi2 = (e^z - 1 - z)/z^2 with series near 0
    if (std::abs(z) < 1e-4)
      return order == 1 ? 1.0 + z / 2.0 + z * z / 6.0 : 0.5 + z / 6.0 + z * z / 24.0;
    return order == 1 ? (std::exp(z) - 1.0) / z : (std::exp(z) - 1.0 - z) / (z * z);
  };
  CplxVec eA(n), eB(n), p1A(n), p1B(n), p2A(n), p2B(n);
  double cached_h = -1.0;
  ComplexSnapshots out{detail::empty_field(times, g), detail::empty_field(times, g)};
  auto step = [&](double h, double t) {
    if (h != cached_h) {
      for (Eigen::Index k = 0; k < n; ++k) {
        const cplx za = I * mup(k) * h, zb = I * mum(k) * h;
        eA(k) = std::exp(za), eB(k) = std::exp(zb);
        p1A(k) = phi(za, 1), p1B(k) = phi(zb, 1);
        p2A(k) = phi(za, 2), p2B(k) = phi(zb, 2);
      }
      cached_h = h;
    }
    const CplxVec f0 = forcing(A, B);
    const CplxVec Ap = eA.cwiseProduct(A) + h * p1A.cwiseProduct(f0);
    const CplxVec Bp = eB.cwiseProduct(B) - h * p1B.cwiseProduct(f0);
    const CplxVec df = forcing(Ap, Bp) - f0;
    A = Ap + h * p2A.cwiseProduct(df);
    B = Bp - h * p2B.cwiseProduct(df);
    detail::check_finite(A, t + h, "solve_nlsw");
  };
  auto record = [&](std::size_t i, double) {
    const CplxVec z = fft.backward(A + B);
    out.re.v.row(Eigen::Index(i)) = z.real().transpose();
    out.im.v.row(Eigen::Index(i)) = z.imag().transpose();
  };
  detail::march(times, dt, step, record);
  return out;
}

/// Klein-Gordon reference built from the envelope solution, u = e^{it/eps^2} z + c.c. (cheap
/// cross-check when the direct O(eps^-2)-step run is disabled).
inline SpaceTimeField nkge_via_envelope(const ProblemSpec& s, const Grid& g, double dt, const std::vector<double>& times) {
  auto z = solve_nlsw(s, g, dt, times);
  return wkb_reconstruct(z.re, z.im, nullptr, s.eps);
}

struct EtaCurves {
  std::vector<double> t;
  std::vector<double> nlsw;
  std::vector<double> nlse;
};

/// H1 distances between the Klein-Gordon solution and the two limit-model reconstructions.
inline EtaCurves eta_curves(const ProblemSpec& s, const Grid& g, const std::vector<double>& times, double dt_nkge,
                            double dt_limit) {
  const auto u = solve_nkge(s, g, dt_nkge, times, std::max(0.1, dt_nkge / (s.eps * s.eps)));
  const auto zw = solve_nlsw(s, g, dt_limit, times);
  const auto zs = solve_nlse(s, g, dt_limit, times);
  const auto uw = wkb_reconstruct(zw.re, zw.im, nullptr, s.eps);
  const auto us = wkb_reconstruct(zs.re, zs.im, nullptr, s.eps);
  Fft fft(g);
  EtaCurves e{times, {}, {}};
  for (std::size_t i = 0; i < times.size(); ++i) {
    const Eigen::Index r = Eigen::Index(i);
    e.nlsw.push_back(h1_norm(RealVec(u.u.v.row(r).transpose() - uw.v.row(r).transpose()), fft));
    e.nlse.push_back(h1_norm(RealVec(u.u.v.row(r).transpose() - us.v.row(r).transpose()), fft));
  }
  return e;
}

/// Least-squares slope of log(error) against log(eps).
inline double fit_convergence_order(const std::vector<double>& eps, const std::vector<double>& err) {
  if (eps.size() < 3 || eps.size() != err.size()) throw StructuralError("fit_convergence_order: need >= 3 (eps, error) pairs");
  double mx = 0, my = 0;
  const double n = static_cast<double>(eps.size());
  for (std::size_t i = 0; i < eps.size(); ++i) {
    if (!(eps[i] > 0.0) || !(err[i] > 0.0)) throw MetricError("fit_convergence_order: values must be positive");
    mx += std::log(eps[i]) / n;
    my += std::log(err[i]) / n;
  }
  double sxy = 0, sxx = 0;
  for (std::size_t i = 0; i < eps.size(); ++i) {
    const double dx = std::log(eps[i]) - mx;
    sxy += dx * (std::log(err[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

// ---------------------------------------------------------------------------------------------
// Snapshot I/O

/// CSV with header t,x[,y],value; one row per (time, grid point).
inline void write_field_csv(const std::string& path, const SpaceTimeField& f, const Grid& g, const std::string& value_name = "value") {
  std::ofstream os(path);
  if (!os) throw StructuralError("cannot open " + path);
  os << "t";
  static const char* axis[] = {"x", "y", "z"};
  for (int d = 0; d < g.dims(); ++d) os << ',' << (d < 3 ? axis[d] : "x" + std::to_string(d));
  os << ',' << value_name << '\n';
  os << std::setprecision(17);
  for (Eigen::Index i = 0; i < f.v.rows(); ++i)
    for (Eigen::Index j = 0; j < f.v.cols(); ++j) {
      os << f.t[std::size_t(i)];
      for (double x : g.point(j)) os << ',' << x;
      os << ',' << f.v(i, j) << '\n';
    }
}

inline constexpr char kFieldMagic[4] = {'N', 'M', 'D', 'F'};
inline constexpr std::uint32_t kFieldVersion = 1;
inline constexpr std::uint32_t kDtypeF64 = 1;

/// Binary field: magic "NMDF", u32 version, u32 rank, u64 extents, u32 dtype tag, row-major f64.
inline void write_field_binary(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StructuralError("cannot open " + path);
  const std::uint32_t rank = 2;
  const std::uint64_t ext[2] = {std::uint64_t(m.rows()), std::uint64_t(m.cols())};
  os.write(kFieldMagic, 4);
  os.write(reinterpret_cast<const char*>(&kFieldVersion), 4);
  os.write(reinterpret_cast<const char*>(&rank), 4);
  os.write(reinterpret_cast<const char*>(ext), 16);
  os.write(reinterpret_cast<const char*>(&kDtypeF64), 4);
  const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = m;
  os.write(reinterpret_cast<const char*>(rm.data()), std::streamsize(rm.size() * 8));
}

inline Eigen::MatrixXd read_field_binary(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw StructuralError("cannot open " + path);
  char magic[4];
  std::uint32_t version = 0, rank = 0, dtype = 0;
  is.read(magic, 4);
  is.read(reinterpret_cast<char*>(&version), 4);
  if (!is || std::string(magic, 4) != std::string(kFieldMagic, 4)) throw StructuralError(path + ": not a field file");
  if (version != kFieldVersion) throw StructuralError(path + ": unsupported field version");
  is.read(reinterpret_cast<char*>(&rank), 4);
  if (rank != 2) throw StructuralError(path + ": expected a rank-2 field");
  std::uint64_t ext[2];
  is.read(reinterpret_cast<char*>(ext), 16);
  is.read(reinterpret_cast<char*>(&dtype), 4);
  if (dtype != kDtypeF64) throw StructuralError(path + ": unsupported dtype");
  Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm{Eigen::Index(ext[0]), Eigen::Index(ext[1])};
  is.read(reinterpret_cast<char*>(rm.data()), std::streamsize(rm.size() * 8));
  if (!is) throw StructuralError(path + ": truncated payload");
  return rm;
}

/// Binary PPM heatmap of |values| (rows = image rows), linearly scaled to [0, max] on a
/// blue-to-yellow ramp.
inline void write_heatmap_ppm(const std::string& path, const Eigen::MatrixXd& m) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw StructuralError("cannot open " + path);
  os << "P6\n" << m.cols() << ' ' << m.rows() << "\n255\n";
  const double mx = m.cwiseAbs().maxCoeff();
  for (Eigen::Index i = m.rows() - 1; i >= 0; --i)  // late times at the top
    for (Eigen::Index j = 0; j < m.cols(); ++j) {
      const double s = mx > 0.0 ? std::abs(m(i, j)) / mx : 0.0;
      const unsigned char px[3] = {static_cast<unsigned char>(255 * std::clamp(1.6 * s - 0.4, 0.0, 1.0)),
                                   static_cast<unsigned char>(255 * std::clamp(s * s * 0.9 + 0.1 * s, 0.0, 1.0)),
                                   static_cast<unsigned char>(255 * std::clamp(0.5 + s - 1.5 * s * s, 0.0, 1.0))};
      os.write(reinterpret_cast<const char*>(px), 3);
    }
}

}  // namespace neuralmd
