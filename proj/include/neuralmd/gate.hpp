#pragma once

#include <algorithm>
#include <cmath>
#include <limits>

namespace neuralmd {

enum class GateVariant { Tanh, ReluTanh };

/// Causal time gate h(t) and the dynamics of its shift.
struct GateState {
  double alpha = 5.0;
  double gamma = 1.0;
  double eta = 1e-3;
  double eps_tol = 1.0;
  double delta_max = 0.1;
  GateVariant variant = GateVariant::Tanh;
};

/// h together with dh/dt and d2h/dt2 at physical time t.
struct GateJet {
  double h = 1.0;
  double dh = 0.0;
  double d2h = 0.0;
};

inline GateJet gate_jet(double t, double T, const GateState& g) {
  const double k = g.alpha / T;
  const double th = std::tanh(g.alpha * (t / T - g.gamma));
  const double sech2 = 1.0 - th * th;
  switch (g.variant) {
    case GateVariant::Tanh:
      return {0.5 * (1.0 - th), -0.5 * k * sech2, k * k * th * sech2};
    case GateVariant::ReluTanh:
      if (th >= 0.0) return {0.0, 0.0, 0.0};
      return {-th, -k * sech2, 2.0 * k * k * th * sech2};
  }
  return {};
}

/// Tanh variant (1 - tanh(alpha (t/T - gamma))) / 2, ReLU variant max(0, -tanh(alpha (t/T - gamma))).
inline double gate_h(double t, double T, const GateState& g) { return gate_jet(t, T, g).h; }

/// gamma <- gamma + eta * min(exp(-eps_tol * G), delta_max). G is a correlation, hence >= 0.
inline GateState gamma_update(GateState g, double correlation) {
  g.gamma += g.eta * std::min(std::exp(-g.eps_tol * std::max(correlation, 0.0)), g.delta_max);
  return g;
}

/// Largest t in [0, T] with h(t) >= threshold (h is nonincreasing), or a negative value when the
/// window is empty.
inline double gate_window_end(double T, const GateState& g, double threshold) {
  double s_max = 0.0;  // alpha (t/T - gamma) at the threshold crossing
  switch (g.variant) {
    case GateVariant::Tanh:
      s_max = std::atanh(std::clamp(1.0 - 2.0 * threshold, -1.0 + 1e-16, 1.0 - 1e-16));
      break;
    case GateVariant::ReluTanh:
      if (threshold >= 1.0) return -1.0;
      s_max = -std::atanh(std::clamp(threshold, 0.0, 1.0 - 1e-16));
      break;
  }
  const double t = T * (g.gamma + s_max / g.alpha);
  if (t < 0.0) return -1.0;
  return std::min(t, T);
}

}  // namespace neuralmd
