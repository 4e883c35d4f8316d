#pragma once

// Test-only helpers: small architectures and finite-difference oracles that only ever call the
// value path of a network (no jets, no tape gradients).

#include <cmath>
#include <functional>
#include <vector>

#include "neuralmd/autodiff.hpp"
#include "neuralmd/network.hpp"

namespace neuralmd::testing {

inline Architecture small_arch(int outputs = 1, int dim = 1, double period = 32.0) {
  Architecture a;
  a.embedding = EmbeddingSpec{std::vector<double>(std::size_t(dim), period), 2};
  a.d_model = 6;
  a.mixer_hidden = 3;
  a.head_hidden = 5;
  a.outputs = outputs;
  a.perturb = PerturbConfig{{{0.03, 2}, {0.05, 3}}};
  return a;
}

/// Scalar function of the raw input, evaluated through the value-only path.
template <class Net>
double value_at(const Net& net, const std::vector<double>& params, std::vector<double> input, int row = 0) {
  auto jets = ad::forward_jet(net, params, input, ad::JetLayout{});
  return jets[std::size_t(row)].value;
}

struct FdDerivs {
  double d1;
  double d2;
};

/// Central differences with step h along input coordinate `coord`.
inline FdDerivs central_fd(const std::function<double(std::vector<double>)>& f, std::vector<double> x, int coord,
                           double h = 1e-4) {
  auto xp = x, xm = x;
  xp[std::size_t(coord)] += h;
  xm[std::size_t(coord)] -= h;
  const double fp = f(xp), fm = f(xm), f0 = f(x);
  return {(fp - fm) / (2.0 * h), (fp - 2.0 * f0 + fm) / (h * h)};
}

/// |a - b| / max(|b|, 1): relative error with a unit floor so near-zero entries compare absolutely.
inline double rel_err(double a, double b) { return std::abs(a - b) / std::max(std::abs(b), 1.0); }

inline std::vector<double> fd_gradient(const std::function<double(const std::vector<double>&)>& loss,
                                       std::vector<double> theta, double h = 1e-4) {
  std::vector<double> g(theta.size());
  for (std::size_t k = 0; k < theta.size(); ++k) {
    const double keep = theta[k];
    theta[k] = keep + h;
    const double lp = loss(theta);
    theta[k] = keep - h;
    const double lm = loss(theta);
    theta[k] = keep;
    g[k] = (lp - lm) / (2.0 * h);
  }
  return g;
}

}  // namespace neuralmd::testing
