#pragma once

// Periodic tensor grids, FFTW-backed transforms and the spectral operators built on them:
// derivatives, Laplacian, discrete norms, and trigonometric interpolation at off-grid points.

#include <fftw3.h>

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <memory>
#include <numbers>
#include <span>
#include <vector>

#include "neuralmd/errors.hpp"

namespace neuralmd {

using cplx = std::complex<double>;
using RealVec = Eigen::VectorXd;
using CplxVec = Eigen::VectorXcd;

/// Uniform periodic grid on a box; points x_j = a + j (b - a)/N, j < N. Flattening is row-major
/// (last dimension fastest), matching FFTW's layout.
struct Grid {
  std::vector<int> n;
  std::vector<double> lower, upper;

  Grid() = default;
  Grid(std::vector<int> n_, std::vector<double> lo, std::vector<double> hi)
      : n(std::move(n_)), lower(std::move(lo)), upper(std::move(hi)) {
    if (n.empty() || n.size() != lower.size() || n.size() != upper.size())
      throw StructuralError("Grid: dimension mismatch");
    for (std::size_t d = 0; d < n.size(); ++d) {
      if (n[d] < 8 || (n[d] & (n[d] - 1)) != 0) throw StructuralError("Grid: N must be a power of two >= 8");
      if (!(upper[d] > lower[d])) throw StructuralError("Grid: empty interval");
    }
  }
  static Grid uniform1d(int N, double a, double b) { return Grid({N}, {a}, {b}); }

  int dims() const { return static_cast<int>(n.size()); }
  Eigen::Index size() const {
    Eigen::Index s = 1;
    for (int v : n) s *= v;
    return s;
  }
  double length(int d) const { return upper[std::size_t(d)] - lower[std::size_t(d)]; }
  double h(int d) const { return length(d) / n[std::size_t(d)]; }
  double cell() const {
    double c = 1.0;
    for (int d = 0; d < dims(); ++d) c *= h(d);
    return c;
  }
  double coord(int d, int j) const { return lower[std::size_t(d)] + j * h(d); }
  /// Signed wavenumber of FFT index j along dimension d.
  double wavenumber(int d, int j) const {
    const int N = n[std::size_t(d)];
    const int m = j <= N / 2 ? j : j - N;
    return 2.0 * std::numbers::pi * m / length(d);
  }
  std::vector<double> point(Eigen::Index flat) const {
    std::vector<double> x(n.size());
    for (int d = dims() - 1; d >= 0; --d) {
      x[std::size_t(d)] = coord(d, int(flat % n[std::size_t(d)]));
      flat /= n[std::size_t(d)];
    }
    return x;
  }
  /// Dimension-wise index of a flat index.
  int index(Eigen::Index flat, int d) const {
    for (int k = dims() - 1; k > d; --k) flat /= n[std::size_t(k)];
    return int(flat % n[std::size_t(d)]);
  }
  bool operator==(const Grid&) const = default;
};

/// Complex-to-complex FFT over a grid. Backward transforms are normalised (ifft(fft(f)) = f).
class Fft {
 public:
  explicit Fft(const Grid& g) : grid_(g), buf_(g.size()) {
    plan_fwd_ = fftw_plan_dft(g.dims(), g.n.data(), fftw(buf_.data()), fftw(buf_.data()), FFTW_FORWARD, FFTW_ESTIMATE);
    plan_bwd_ = fftw_plan_dft(g.dims(), g.n.data(), fftw(buf_.data()), fftw(buf_.data()), FFTW_BACKWARD, FFTW_ESTIMATE);
    if (!plan_fwd_ || !plan_bwd_) throw StructuralError("FFTW planning failed");
  }
  ~Fft() {
    fftw_destroy_plan(plan_fwd_);
    fftw_destroy_plan(plan_bwd_);
  }
  Fft(const Fft&) = delete;
  Fft& operator=(const Fft&) = delete;

  const Grid& grid() const { return grid_; }

  CplxVec forward(const CplxVec& f) {
    buf_ = f;
    fftw_execute_dft(plan_fwd_, fftw(buf_.data()), fftw(buf_.data()));
    return buf_;
  }
  CplxVec forward(const RealVec& f) { return forward(CplxVec(f.cast<cplx>())); }
  CplxVec backward(const CplxVec& c) {
    buf_ = c;
    fftw_execute_dft(plan_bwd_, fftw(buf_.data()), fftw(buf_.data()));
    return buf_ / static_cast<double>(grid_.size());
  }

  /// Per-mode symbol sum_d k_d^2 (so the Laplacian multiplies by -|k|^2).
  RealVec k2() const {
    RealVec s(grid_.size());
    for (Eigen::Index f = 0; f < s.size(); ++f) {
      double v = 0.0;
      for (int d = 0; d < grid_.dims(); ++d) {
        const double k = grid_.wavenumber(d, grid_.index(f, d));
        v += k * k;
      }
      s(f) = v;
    }
    return s;
  }
  /// i k_d per mode, with the Nyquist mode zeroed (odd derivatives of real data).
  CplxVec ik(int d) const {
    CplxVec s(grid_.size());
    const int N = grid_.n[std::size_t(d)];
    for (Eigen::Index f = 0; f < s.size(); ++f) {
      const int j = grid_.index(f, d);
      s(f) = j == N / 2 ? cplx(0.0) : cplx(0.0, grid_.wavenumber(d, j));
    }
    return s;
  }

  CplxVec laplacian(const CplxVec& f) { return backward(forward(f).cwiseProduct((-k2()).cast<cplx>())); }
  RealVec laplacian(const RealVec& f) { return laplacian(CplxVec(f.cast<cplx>())).real(); }
  CplxVec derivative(const CplxVec& f, int d) { return backward(forward(f).cwiseProduct(ik(d))); }

 private:
  static fftw_complex* fftw(cplx* p) { return reinterpret_cast<fftw_complex*>(p); }

  Grid grid_;
  CplxVec buf_;
  fftw_plan plan_fwd_ = nullptr;
  fftw_plan plan_bwd_ = nullptr;
};

/// Discrete L2 norm with the cell volume: (sum |f|^2 dx)^(1/2).
inline double l2_norm(const CplxVec& f, const Grid& g) { return std::sqrt(f.squaredNorm() * g.cell()); }
inline double l2_norm(const RealVec& f, const Grid& g) { return std::sqrt(f.squaredNorm() * g.cell()); }

/// H1 norm (||f||^2 + ||grad f||^2)^(1/2), gradient computed spectrally.
inline double h1_norm(const CplxVec& f, Fft& fft) {
  const CplxVec c = fft.forward(f);
  // Parseval: sum_j |f_j|^2 = (1/N) sum_k |c_k|^2
  const double n = static_cast<double>(fft.grid().size());
  const RealVec w = RealVec::Ones(c.size()) + fft.k2();
  return std::sqrt((c.cwiseAbs2().cwiseProduct(w)).sum() / n * fft.grid().cell());
}
inline double h1_norm(const RealVec& f, Fft& fft) { return h1_norm(CplxVec(f.cast<cplx>()), fft); }

/// Value, gradient and Laplacian diagonal of a trigonometric interpolant at off-grid points.
struct InterpJets {
  CplxVec value;
  std::vector<CplxVec> d1;  // per dimension
  std::vector<CplxVec> d2;  // per dimension (diagonal second derivatives)
};

/// Evaluate the trigonometric interpolant of grid data `f` at the columns of `pts` (dims x B).
/// The Nyquist mode is split symmetrically so real data interpolate to real values.
inline InterpJets interpolate(const CplxVec& f, const Eigen::MatrixXd& pts, Fft& fft) {
  const Grid& g = fft.grid();
  if (pts.rows() != g.dims()) throw StructuralError("interpolate: point dimension mismatch");
  const CplxVec c = fft.forward(f) / static_cast<double>(g.size());
  const Eigen::Index B = pts.cols();
  InterpJets out{CplxVec::Zero(B), std::vector<CplxVec>(std::size_t(g.dims()), CplxVec::Zero(B)),
                 std::vector<CplxVec>(std::size_t(g.dims()), CplxVec::Zero(B))};
  // Per-dimension basis rows: value, first and second derivative of each 1D mode.
  std::vector<Eigen::MatrixXcd> e0(std::size_t(g.dims())), e1(std::size_t(g.dims())), e2(std::size_t(g.dims()));
  for (int d = 0; d < g.dims(); ++d) {
    const int N = g.n[std::size_t(d)];
    auto& v0 = e0[std::size_t(d)];
    auto& v1 = e1[std::size_t(d)];
    auto& v2 = e2[std::size_t(d)];
    v0.resize(N, B), v1.resize(N, B), v2.resize(N, B);
    for (Eigen::Index p = 0; p < B; ++p) {
      const double s = pts(d, p) - g.lower[std::size_t(d)];
      for (int j = 0; j < N; ++j) {
        const double k = g.wavenumber(d, j);
        if (j == N / 2) {
          v0(j, p) = std::cos(k * s);
          v1(j, p) = -k * std::sin(k * s);
          v2(j, p) = -k * k * std::cos(k * s);
        } else {
          const cplx e = std::polar(1.0, k * s);
          v0(j, p) = e;
          v1(j, p) = cplx(0.0, k) * e;
          v2(j, p) = -k * k * e;
        }
      }
    }
  }
  if (g.dims() == 1) {
    out.value = e0[0].transpose() * c;
    out.d1[0] = e1[0].transpose() * c;
    out.d2[0] = e2[0].transpose() * c;
    return out;
  }
  if (g.dims() != 2) throw StructuralError("interpolate: only 1D and 2D grids are supported");
  const Eigen::Map<const Eigen::Matrix<cplx, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> C(c.data(), g.n[0], g.n[1]);
  for (Eigen::Index p = 0; p < B; ++p) {
    const Eigen::VectorXcd cy0 = C * e0[1].col(p);
    out.value(p) = (e0[0].col(p).transpose() * cy0)(0);
    out.d1[0](p) = (e1[0].col(p).transpose() * cy0)(0);
    out.d2[0](p) = (e2[0].col(p).transpose() * cy0)(0);
    out.d1[1](p) = (e0[0].col(p).transpose() * (C * e1[1].col(p)))(0);
    out.d2[1](p) = (e0[0].col(p).transpose() * (C * e2[1].col(p)))(0);
  }
  return out;
}

}  // namespace neuralmd
