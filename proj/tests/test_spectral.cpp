#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <numbers>

#include "neuralmd/spectral.hpp"

using namespace neuralmd;

namespace {

ProblemSpec cosine_problem(double eps, int m, double lambda = 0.0) {
  ProblemSpec s;
  s.eps = eps;
  s.lambda = lambda;
  const double k = 2 * std::numbers::pi * m / 32.0;
  s.init = {"cos", [=](std::span<const double> x) { return std::cos(k * x[0]); }, [](std::span<const double>) { return 0.0; }};
  return s;
}

std::filesystem::path tmp(const std::string& name) { return std::filesystem::temp_directory_path() / ("neuralmd_" + name); }

}  // namespace

TEST(Grid, Validation) {
  EXPECT_THROW(Grid::uniform1d(4, 0, 1), StructuralError);
  EXPECT_THROW(Grid::uniform1d(12, 0, 1), StructuralError);
  EXPECT_THROW(Grid::uniform1d(16, 1, 1), StructuralError);
  Grid g({8, 16}, {0, -1}, {1, 1});
  EXPECT_EQ(g.size(), 128);
  EXPECT_EQ(g.point(17), (std::vector<double>{0.125, -1.0 + 0.125}));
}

TEST(Fourier, DerivativeOfSingleMode) {
  Grid g = Grid::uniform1d(64, -16, 16);
  Fft fft(g);
  const double k1 = 2 * std::numbers::pi / 32.0;
  CplxVec f(64), expect(64);
  for (int j = 0; j < 64; ++j) {
    f(j) = std::polar(1.0, k1 * g.coord(0, j));
    expect(j) = cplx(0, k1) * f(j);
  }
  EXPECT_LT((fft.derivative(f, 0) - expect).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Fourier, ExactOnResolvedModes) {
  Grid g = Grid::uniform1d(128, 0, 2 * std::numbers::pi);
  Fft fft(g);
  double worst = 0;
  for (int m = 1; m <= 32; ++m) {
    RealVec f(128), lap(128);
    for (int j = 0; j < 128; ++j) {
      f(j) = std::sin(m * g.coord(0, j) + 0.3);
      lap(j) = -m * m * f(j);
    }
    worst = std::max(worst, (fft.laplacian(f) - lap).cwiseAbs().maxCoeff() / (m * m));
    CplxVec d = fft.derivative(CplxVec(f.cast<cplx>()), 0);
    for (int j = 0; j < 128; ++j) worst = std::max(worst, std::abs(d(j).real() - m * std::cos(m * g.coord(0, j) + 0.3)) / m);
  }
  EXPECT_LT(worst, 1e-11);
}

TEST(Fourier, H1Norm) {
  Grid g = Grid::uniform1d(64, 0, 2 * std::numbers::pi);
  Fft fft(g);
  RealVec f(64);
  for (int j = 0; j < 64; ++j) f(j) = std::sin(3 * g.coord(0, j));
  // ||f||^2 = pi, ||f'||^2 = 9 pi
  EXPECT_NEAR(h1_norm(f, fft), std::sqrt(10 * std::numbers::pi), 1e-12);
  EXPECT_EQ(h1_norm(RealVec(RealVec::Zero(64)), fft), 0.0);
}

TEST(Fourier, Interpolation2D) {
  Grid g({64, 64}, {-8, -8}, {8, 8});
  Fft fft(g);
  CplxVec f(g.size());
  auto fn = [](double x, double y) { return std::exp(-x * x - 0.5 * y * y); };
  for (Eigen::Index i = 0; i < g.size(); ++i) {
    auto p = g.point(i);
    f(i) = fn(p[0], p[1]);
  }
  Eigen::MatrixXd pts(2, 3);
  pts << 0.3, -1.1, 2.0, 0.7, 0.2, -1.5;
  auto j = interpolate(f, pts, fft);
  for (int p = 0; p < 3; ++p) {
    const double x = pts(0, p), y = pts(1, p), v = fn(x, y);
    EXPECT_NEAR(j.value(p).real(), v, 1e-9);
    EXPECT_NEAR(j.d1[0](p).real(), -2 * x * v, 1e-8);
    EXPECT_NEAR(j.d1[1](p).real(), -y * v, 1e-8);
    EXPECT_NEAR(j.d2[0](p).real(), (4 * x * x - 2) * v, 1e-7);
    EXPECT_NEAR(j.d2[1](p).real(), (y * y - 1) * v, 1e-7);
  }
}

TEST(Nkge, LinearDispersionOracle) {
  const double eps = 0.5;
  auto s = cosine_problem(eps, 3);
  Grid g = Grid::uniform1d(128, -16, 16);
  const double k = 2 * std::numbers::pi * 3 / 32.0, w = std::sqrt(1 + eps * eps * k * k) / (eps * eps);
  auto sol = solve_nkge(s, g, eps * eps / 64, {0.0, 0.5, 1.0});
  double worst = 0;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 128; ++j)
      worst = std::max(worst, std::abs(sol.u.v(i, j) - std::cos(k * g.coord(0, j)) * std::cos(w * sol.u.t[std::size_t(i)])));
  EXPECT_LT(worst, 1e-8);
}

TEST(Nkge, ZeroDataStaysZero) {
  auto s = ProblemSpec::benchmark1d(0.5);
  s.init = initial_data("zero");
  auto sol = solve_nkge(s, Grid::uniform1d(64, -16, 16), 0.01, {0.0, 0.5});
  EXPECT_EQ(sol.u.v.norm(), 0.0);
}

TEST(Nkge, SecondOrderSelfConvergence) {
  auto s = ProblemSpec::benchmark1d(0.5);
  s.lambda = 4.0;  // stronger coupling so the splitting error dominates roundoff
  Grid g = Grid::uniform1d(128, -16, 16);
  const double dt = 0.02;
  auto run = [&](double h) { return solve_nkge(s, g, h, {1.0}).u.v; };
  auto u1 = run(dt), u2 = run(dt / 2), u4 = run(dt / 4), u8 = run(dt / 8);
  const double e1 = (u1 - u8).norm(), e2 = (u2 - u8).norm();
  EXPECT_NEAR(e1 / e2, 4.0, 0.6);
  const double order = std::log2((u1 - u2).norm() / (u2 - u4).norm());
  EXPECT_GE(order, 1.9);
}

TEST(Nkge, EnergyDriftIsSmall) {
  auto s = ProblemSpec::benchmark1d(0.5);
  auto sol = solve_nkge(s, Grid::uniform1d(256, -16, 16), s.eps * s.eps / 64, {0.0, 1.0, 2.0});
  EXPECT_LT(sol.energy_drift, 1e-4);
}

TEST(Nkge, RefusesUnresolvedStep) {
  auto s = ProblemSpec::benchmark1d(0.1);
  try {
    solve_nkge(s, Grid::uniform1d(64, -16, 16), 0.01, {1.0});
    FAIL() << "expected ResolutionError";
  } catch (const ResolutionError& e) {
    EXPECT_NEAR(e.required_dt(), 0.1 * 0.01, 1e-15);
  }
}

TEST(Nlse, ZeroDataAndMassConservation) {
  auto s = ProblemSpec::benchmark1d(0.1);
  Grid g = Grid::uniform1d(256, -16, 16);
  auto z = solve_nlse(s, g, 1.0 / 256, {0.0, 0.5, 1.0});
  auto mass = [&](int i) { return (z.re.v.row(i).squaredNorm() + z.im.v.row(i).squaredNorm()) * g.cell(); };
  EXPECT_LT(std::abs(mass(2) - mass(0)) / mass(0), 1e-10);
  s.init = initial_data("zero");
  auto z0 = solve_nlse(s, g, 1.0 / 256, {0.0, 1.0});
  EXPECT_EQ(z0.re.v.norm() + z0.im.v.norm(), 0.0);
}

TEST(Nlsw, ZeroWaveTermIsTheSchroedingerTrajectory) {
  auto s = ProblemSpec::benchmark1d(0.2);
  Grid g = Grid::uniform1d(128, -16, 16);
  auto a = solve_nlsw(s, g, 1.0 / 256, {0.5, 1.0}, 0.0);
  auto b = solve_nlse(s, g, 1.0 / 256, {0.5, 1.0});
  EXPECT_LT((a.re.v - b.re.v).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((a.im.v - b.im.v).cwiseAbs().maxCoeff(), 1e-8);
  s.init = initial_data("zero");
  auto z = solve_nlsw(s, g, 1.0 / 256, {1.0});
  EXPECT_EQ(z.re.v.norm() + z.im.v.norm(), 0.0);
}

TEST(Nlsw, LinearPlaneWaveIsExact) {
  // lambda = 0 and data exciting only one mode with the slow-branch derivative: z stays a plane wave.
  const double eps = 0.3, k = 2 * std::numbers::pi * 2 / 32.0, e2 = eps * eps;
  auto s = cosine_problem(eps, 2);
  s.init.phi1 = [=](std::span<const double> x) { return 2 * std::cos(k * x[0]); };
  Grid g = Grid::uniform1d(64, -16, 16);
  auto z = solve_nlsw(s, g, 0.05, {1.0});
  // z0 = cos(kx), dz0 = (i/2) k^2 cos(kx): mixes both roots with the exact linear flow.
  const double mup = (-1 + std::sqrt(1 + e2 * k * k)) / e2, mum = (-1 - std::sqrt(1 + e2 * k * k)) / e2;
  const cplx I(0, 1), dz = I * 0.5 * k * k;
  const cplx A = (dz - I * mum) / (I * (mup - mum)), B = (I * mup - dz) / (I * (mup - mum));
  const cplx amp = A * std::exp(I * mup * 1.0) + B * std::exp(I * mum * 1.0);
  double worst = 0;
  for (int j = 0; j < 64; ++j) {
    const cplx expect = amp * std::cos(k * g.coord(0, j));
    worst = std::max(worst, std::abs(cplx(z.re.v(0, j), z.im.v(0, j)) - expect));
  }
  EXPECT_LT(worst, 1e-12);
}

TEST(Nlsw, SecondOrderInTime) {
  auto s = ProblemSpec::benchmark1d(0.3);
  s.lambda = 4.0;
  Grid g = Grid::uniform1d(128, -16, 16);
  auto run = [&](double h) { return solve_nlsw(s, g, h, {1.0}).re.v; };
  const double order = std::log2((run(0.04) - run(0.02)).norm() / (run(0.02) - run(0.01)).norm());
  EXPECT_GE(order, 1.9);
}

TEST(Convergence, SyntheticSlopes) {
  std::vector<double> eps{0.4, 0.2, 0.1, 0.05};
  std::vector<double> sq, lin;
  for (double e : eps) sq.push_back(3 * e * e), lin.push_back(0.5 * e);
  EXPECT_NEAR(fit_convergence_order(eps, sq), 2.0, 1e-12);
  EXPECT_NEAR(fit_convergence_order(eps, lin), 1.0, 1e-12);
  EXPECT_THROW(fit_convergence_order({0.1, 0.2}, {1, 2}), StructuralError);
}

TEST(Convergence, EtaStartsAtZeroForWellPreparedData) {
  auto s = ProblemSpec::benchmark1d(0.2);
  auto e = eta_curves(s, Grid::uniform1d(128, -16, 16), {0.0, 0.5}, s.eps * s.eps / 64, 1.0 / 256);
  EXPECT_LT(e.nlsw[0], 1e-12);
  EXPECT_LT(e.nlse[0], 1e-12);
  EXPECT_GT(e.nlsw[1], 0.0);
}

TEST(Io, BinaryRoundTripAndCsv) {
  Eigen::MatrixXd m(3, 4);
  m << 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, -12.5;
  auto p = tmp("field.bin");
  write_field_binary(p.string(), m);
  EXPECT_EQ(read_field_binary(p.string()), m);
  {
    std::ofstream bad(p, std::ios::binary);
    bad << "XXXX";
  }
  EXPECT_THROW(read_field_binary(p.string()), StructuralError);

  Grid g = Grid::uniform1d(8, 0, 1);
  SpaceTimeField f{{0.0, 0.5}, Eigen::MatrixXd::Constant(2, 8, 0.25)};
  auto c = tmp("field.csv");
  write_field_csv(c.string(), f, g);
  std::ifstream is(c);
  std::string header, first;
  std::getline(is, header);
  std::getline(is, first);
  EXPECT_EQ(header, "t,x,value");
  EXPECT_EQ(first, "0,0,0.25");
  auto h = tmp("heat.ppm");
  write_heatmap_ppm(h.string(), f.v);
  EXPECT_EQ(std::filesystem::file_size(h), std::string("P6\n8 2\n255\n").size() + 2 * 8 * 3);
}
