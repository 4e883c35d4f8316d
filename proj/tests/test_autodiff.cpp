#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "neuralmd/autodiff.hpp"
#include "neuralmd/network.hpp"
#include "support.hpp"

using namespace neuralmd;
using ad::JetBlock;
using ad::JetLayout;
using ad::Tape;
namespace tst = neuralmd::testing;
using tst::rel_err;

namespace {

// tanh(w t + b) with w = theta[0], b = theta[1].
struct Neuron {
  std::size_t param_count() const { return 2; }
  int input_dim() const { return 1; }
  int record(Tape& tape, const ad::Matrix& pts) const {
    int n = tape.constant(ad::coordinate_jets(pts, tape.layout()));
    return tape.tanh(tape.affine(n, ad::DenseSlot{0, 1, 1, 1}));
  }
};

// Loss with second input-derivatives: mean over columns of (a u_tt - u_xx + u + u^3)^2.
double wave_loss(const JetBlock& u, const JetLayout& lay, JetBlock* partials, double a = 0.3) {
  const int ix = lay.find(0), it = lay.find(1);
  double total = 0.0;
  for (int p = 0; p < u.batch; ++p) {
    const double v = u.ch(0)(0, p);
    const double r = a * u.ch(lay.d2(it))(0, p) - u.ch(lay.d2(ix))(0, p) + v + v * v * v;
    total += r * r / u.batch;
    if (partials) {
      const double g = 2.0 * r / u.batch;
      partials->ch(0)(0, p) = g * (1.0 + 3.0 * v * v);
      partials->ch(lay.d2(it))(0, p) = g * a;
      partials->ch(lay.d2(ix))(0, p) = -g;
    }
  }
  return total;
}

MlpArchitecture small_mlp() {
  MlpArchitecture a;
  a.lower = {-2.0, 0.0};
  a.upper = {2.0, 1.0};
  a.hidden = {7, 5};
  a.outputs = 1;
  return a;
}

}  // namespace

TEST(Autodiff, SingleNeuronAtOrigin) {
  JetLayout lay({0});
  auto j = ad::forward_jet(Neuron{}, std::vector<double>{1.0, 0.0}, std::vector<double>{0.0}, lay);
  EXPECT_EQ(j[0].value, 0.0);
  EXPECT_EQ(j[0].d1(0), 1.0);
  EXPECT_EQ(j[0].d2(0, 0), 0.0);

  auto j2 = ad::forward_jet(Neuron{}, std::vector<double>{2.0, 0.0}, std::vector<double>{0.0}, lay);
  EXPECT_EQ(j2[0].d1(0), 2.0);
  EXPECT_EQ(j2[0].d2(0, 0), 0.0);
}

TEST(Autodiff, IdentityInputJets) {
  JetLayout lay({1, 0});
  ad::Matrix pts(2, 3);
  pts << 0.1, 0.2, 0.3, 1.0, 2.0, 3.0;
  JetBlock j = ad::coordinate_jets(pts, lay);
  for (int p = 0; p < 3; ++p) {
    EXPECT_EQ(j.ch(lay.d1(0))(1, p), 1.0);
    EXPECT_EQ(j.ch(lay.d1(0))(0, p), 0.0);
    EXPECT_EQ(j.ch(lay.d1(1))(0, p), 1.0);
    EXPECT_EQ(j.ch(lay.d2(0)).col(p).norm(), 0.0);
    EXPECT_EQ(j.ch(lay.d2(1)).col(p).norm(), 0.0);
  }
}

TEST(Autodiff, CrossSecondDerivativeIsNotCarried) {
  ad::Jet2 j;
  j.layout = JetLayout({0, 1});
  j.first = {1.0, 2.0};
  j.second = {3.0, 4.0};
  EXPECT_EQ(j.d2(1, 1), 4.0);
  EXPECT_THROW(j.d2(0, 1), StructuralError);
  EXPECT_THROW(j.d1(2), StructuralError);
}

TEST(Autodiff, MlpJetsMatchFiniteDifferences) {
  MlpNet net(small_mlp());
  JetLayout lay({0, 1});
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(1000 + s);
    auto theta = init_params(net.arch(), rng);
    for (auto& v : theta) v *= 2.0;
    std::vector<double> x{rng.uniform(-2, 2), rng.uniform(0, 1)};
    auto jet = ad::forward_jet(net, theta, x, lay)[0];
    auto f = [&](std::vector<double> in) { return tst::value_at(net, theta, in); };
    for (int c = 0; c < 2; ++c) {
      auto fd = tst::central_fd(f, x, c);
      worst = std::max({worst, rel_err(jet.d1(c), fd.d1), rel_err(jet.d2(c, c), fd.d2)});
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Autodiff, NeuralMdJetsMatchFiniteDifferences) {
  // Gated pooling, clipped perturbations and the hard-IC blend all sit on the differentiated path.
  auto arch = tst::small_arch(2);
  JetLayout lay({0, 1});
  double worst = 0.0;
  for (std::uint64_t s = 0; s < 100; ++s) {
    Rng rng(77 + s);
    auto theta = init_params(arch, rng);
    for (auto& v : theta) v *= 1.5;
    const double T = 2.0;
    std::vector<double> x{rng.uniform(-16, 16), s % 10 == 0 ? 0.01 : rng.uniform(0.2, T - 0.2)};
    FieldContext ctx;
    ctx.T = T;
    ctx.gate = GateState{5.0, rng.uniform(-0.2, 1.0)};
    ctx.offsets = draw_offsets(arch.perturb, 1, rng);
    // x-dependent hard-IC data: u0 = (sin x, cos 2x), du0 = (cos x, 0.5 sin x)
    auto ic_at = [&](double xv, const JetLayout& l) {
      HardIcData ic{JetBlock(2, 1, l.channels()), JetBlock(2, 1, l.channels())};
      ic.u0.ch(0)(0, 0) = std::sin(xv), ic.u0.ch(0)(1, 0) = std::cos(2 * xv);
      ic.du0.ch(0)(0, 0) = std::cos(xv), ic.du0.ch(0)(1, 0) = 0.5 * std::sin(xv);
      if (int i = l.find(0); i >= 0) {
        ic.u0.ch(l.d1(i))(0, 0) = std::cos(xv), ic.u0.ch(l.d1(i))(1, 0) = -2 * std::sin(2 * xv);
        ic.u0.ch(l.d2(i))(0, 0) = -std::sin(xv), ic.u0.ch(l.d2(i))(1, 0) = -4 * std::cos(2 * xv);
        ic.du0.ch(l.d1(i))(0, 0) = -std::sin(xv), ic.du0.ch(l.d1(i))(1, 0) = 0.5 * std::cos(xv);
        ic.du0.ch(l.d2(i))(0, 0) = -std::cos(xv), ic.du0.ch(l.d2(i))(1, 0) = -0.5 * std::sin(xv);
      }
      return ic;
    };
    HardIcData ic = ic_at(x[0], lay);
    FieldContext jctx = ctx;
    jctx.ic = &ic;
    auto jets = ad::forward_jet(NeuralMdNet(arch, jctx), theta, x, lay);
    for (int row = 0; row < 2; ++row) {
      auto f = [&](std::vector<double> in) {
        HardIcData icv = ic_at(in[0], JetLayout{});
        FieldContext c2 = ctx;
        c2.ic = &icv;
        return tst::value_at(NeuralMdNet(arch, c2), theta, in, row);
      };
      for (int c = 0; c < 2; ++c) {
        auto fd = tst::central_fd(f, x, c);
        worst = std::max({worst, rel_err(jets[std::size_t(row)].d1(c), fd.d1),
                          rel_err(jets[std::size_t(row)].d2(c, c), fd.d2)});
      }
    }
  }
  EXPECT_LT(worst, 1e-6);
}

TEST(Autodiff, ParamGradOfSquaredParameter) {
  // out = bias = theta[3] (input 0 kills the weight path); loss = out^2.
  std::vector<double> theta{0.5, -1.0, 0.25, 3.0, 7.0};
  Tape tape(theta, JetLayout{});
  ad::Matrix zero = ad::Matrix::Zero(1, 1);
  int n = tape.constant(ad::coordinate_jets(zero, tape.layout()));
  n = tape.affine(n, ad::DenseSlot{2, 3, 1, 1});
  int loss = tape.scalar_loss(n, [](const JetBlock& u, JetBlock* p) {
    if (p) p->data(0, 0) = 2.0 * u.data(0, 0);
    return u.data(0, 0) * u.data(0, 0);
  });
  auto g = ad::param_grad(tape, loss);
  EXPECT_EQ(g, (std::vector<double>{0, 0, 0, 6.0, 0}));
}

TEST(Autodiff, ConstantLossHasZeroGradient) {
  MlpNet net(small_mlp());
  Rng rng(3);
  auto theta = init_params(net.arch(), rng);
  Tape tape(theta, JetLayout{});
  ad::Matrix pts(2, 1);
  pts << 0.3, 0.4;
  int out = net.record(tape, pts);
  int loss = tape.scalar_loss(out, [](const JetBlock&, JetBlock*) { return 4.2; });
  auto g = ad::param_grad(tape, loss);
  for (double v : g) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(tape.scalar(loss), 4.2);
}

TEST(Autodiff, ParamGradThroughSecondDerivativesMatchesFiniteDifferences) {
  JetLayout lay({0, 1});
  ad::Matrix pts(2, 3);
  pts << -0.7, 0.4, 1.3, 0.2, 0.5, 0.9;

  auto check = [&](const auto& net, std::vector<double> theta) {
    auto loss_of = [&](const std::vector<double>& th) {
      Tape t(th, lay);
      int o = net.record(t, pts);
      return wave_loss(t.value(o), lay, nullptr);
    };
    Tape tape(theta, lay);
    int out = net.record(tape, pts);
    int loss = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* p) { return wave_loss(u, lay, p); });
    auto g = ad::param_grad(tape, loss);
    auto fd = tst::fd_gradient(loss_of, theta);
    double worst = 0.0;
    for (std::size_t k = 0; k < g.size(); ++k) worst = std::max(worst, rel_err(g[k], fd[k]));
    return worst;
  };

  Rng rng(11);
  MlpNet mlp(small_mlp());
  EXPECT_LT(check(mlp, init_params(mlp.arch(), rng)), 1e-6);

  auto arch = tst::small_arch(1);
  FieldContext ctx;
  ctx.T = 1.0;
  ctx.gate = GateState{5.0, 0.3};
  ctx.offsets = draw_offsets(arch.perturb, pts.cols(), rng);
  EXPECT_LT(check(NeuralMdNet(arch, ctx), init_params(arch, rng)), 1e-6);
}

TEST(Autodiff, GradientIsLinearInTheLoss) {
  JetLayout lay({0, 1});
  MlpNet net(small_mlp());
  Rng rng(5);
  auto theta = init_params(net.arch(), rng);
  ad::Matrix pts(2, 4);
  pts << -1, -0.5, 0.5, 1, 0.1, 0.3, 0.6, 0.9;
  Tape tape(theta, lay);
  int out = net.record(tape, pts);
  int l1 = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* p) { return wave_loss(u, lay, p, 0.3); });
  int l2 = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* p) { return wave_loss(u, lay, p, 0.9); });
  int sum = tape.weighted_sum({{l1, 1.0}, {l2, 2.0}});
  auto g1 = ad::param_grad(tape, l1);
  auto g2 = ad::param_grad(tape, l2);
  auto gs = ad::param_grad(tape, sum);
  for (std::size_t k = 0; k < gs.size(); ++k) EXPECT_NEAR(gs[k], g1[k] + 2.0 * g2[k], 1e-12 * (1 + std::abs(gs[k])));
}

TEST(Autodiff, ReplayAndRepeatAreBitIdentical) {
  JetLayout lay({0, 1});
  auto arch = tst::small_arch(2);
  Rng rng(9);
  auto theta = init_params(arch, rng);
  FieldContext ctx;
  ctx.T = 1.0;
  ctx.gate = GateState{};
  ad::Matrix pts(2, 5);
  pts << -3, -1, 0, 2, 4, 0.1, 0.2, 0.5, 0.7, 0.95;
  ctx.offsets = draw_offsets(arch.perturb, 5, rng);
  NeuralMdNet net(arch, ctx);

  auto run = [&](Tape& tape) {
    int out = net.record(tape, pts);
    int loss = tape.scalar_loss(out, [&](const JetBlock& u, JetBlock* p) {
      double s = 0;
      for (int k = 0; k < u.data.size(); ++k) s += u.data(k) * u.data(k);
      if (p) p->data = 2.0 * u.data;
      return s;
    });
    return std::pair{out, loss};
  };
  Tape a(theta, lay), b(theta, lay);
  auto [oa, la] = run(a);
  auto [ob, lb] = run(b);
  ad::Matrix before = a.value(oa).data;
  a.replay();
  EXPECT_TRUE((a.value(oa).data.array() == before.array()).all());
  EXPECT_TRUE((a.value(oa).data.array() == b.value(ob).data.array()).all());
  EXPECT_EQ(ad::param_grad(a, la), ad::param_grad(b, lb));
}

TEST(Autodiff, ChunkedAccumulationMatchesSingleBatch) {
  JetLayout lay({0, 1});
  MlpNet net(small_mlp());
  Rng rng(21);
  auto theta = init_params(net.arch(), rng);
  ad::Matrix pts(2, 64);
  for (int p = 0; p < 64; ++p) pts(0, p) = rng.uniform(-2, 2), pts(1, p) = rng.uniform(0, 1);
  auto loss_on = [&](const ad::Matrix& cols, double weight) {
    Tape t(theta, lay);
    int o = net.record(t, cols);
    int l = t.scalar_loss(o, [&](const JetBlock& u, JetBlock* p) {
      double v = wave_loss(u, lay, p) * u.batch * weight;
      if (p) p->data *= u.batch * weight;
      return v;
    });
    return std::pair{t.scalar(l), ad::param_grad(t, l)};
  };
  auto [full, gfull] = loss_on(pts, 1.0 / 64);
  double chunked = 0.0;
  std::vector<double> gch(gfull.size(), 0.0);
  for (int c = 0; c < 64; c += 16) {
    auto [v, g] = loss_on(pts.middleCols(c, 16), 1.0 / 64);
    chunked += v;
    for (std::size_t k = 0; k < g.size(); ++k) gch[k] += g[k];
  }
  EXPECT_NEAR(chunked, full, 1e-12 * std::abs(full));
  for (std::size_t k = 0; k < gch.size(); ++k) EXPECT_NEAR(gch[k], gfull[k], 1e-12 * std::max(1.0, std::abs(gfull[k])));
}

TEST(Autodiff, StructuralErrors) {
  MlpNet net(small_mlp());
  std::vector<double> short_theta(net.param_count() - 1, 0.1);
  EXPECT_THROW(ad::forward_jet(net, short_theta, std::vector<double>{0.0, 0.0}, JetLayout{}), StructuralError);

  Rng rng(1);
  auto theta = init_params(net.arch(), rng);
  Tape tape(theta, JetLayout{});
  ad::Matrix pts = ad::Matrix::Zero(2, 1);
  int out = net.record(tape, pts);
  EXPECT_THROW(ad::param_grad(tape, out), StructuralError);       // not a scalar
  EXPECT_THROW(ad::param_grad(tape, out + 100), StructuralError); // not on tape
  EXPECT_THROW(ad::param_grad(tape, -1), StructuralError);
  EXPECT_THROW(JetLayout({0, 0}), StructuralError);
}

TEST(Autodiff, NonFiniteValuesReportTheLayer) {
  MlpNet net(small_mlp());
  Rng rng(1);
  auto theta = init_params(net.arch(), rng);
  theta[net.arch().layer(1).weight] = std::numeric_limits<double>::quiet_NaN();
  try {
    ad::forward_jet(net, theta, std::vector<double>{0.1, 0.2}, JetLayout{});
    FAIL() << "expected NumericError";
  } catch (const NumericError& e) {
    EXPECT_EQ(e.layer(), 3);  // constant, affine, tanh, affine <- here
  }
}

TEST(Autodiff, TanhKernelAgreesWithLibm) {
  Eigen::ArrayXXd a(1, 4001);
  for (int i = 0; i < a.cols(); ++i) a(0, i) = -40.0 + 0.02 * i;
  a(0, 2000) = 0.0;
  const Eigen::ArrayXXd y = ad::detail::TanhOp::fast_tanh(a);
  double worst = 0.0;
  for (int i = 0; i < a.cols(); ++i) {
    const double ref = std::tanh(a(0, i));
    worst = std::max(worst, std::abs(y(0, i) - ref) / std::max(std::abs(ref), 1e-300));
  }
  EXPECT_LT(worst, 4e-15);  // a few ulp, lost to cancellation just above the series cutoff
  EXPECT_EQ(y(0, 2000), 0.0);
  EXPECT_EQ(ad::detail::TanhOp::fast_tanh(Eigen::ArrayXXd::Constant(1, 1, 1e-20))(0, 0), 1e-20);
}
