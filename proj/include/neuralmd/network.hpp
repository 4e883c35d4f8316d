#pragma once

// NeuralMD forward architecture: periodic embedding -> coordinate encoder P -> multiscale time
// perturbation with gated pooling -> scale-axis mixer M -> head H -> optional hard initial-condition
// blend. Also hosts the plain tanh MLP used by the vanilla collocation baseline.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numbers>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "neuralmd/autodiff.hpp"
#include "neuralmd/errors.hpp"
#include "neuralmd/gate.hpp"
#include "neuralmd/rng.hpp"

namespace neuralmd {

using ad::JetBlock;
using ad::JetLayout;
using ad::Matrix;

struct EmbeddingSpec {
  std::vector<double> period;  // one per spatial dimension
  int modes = 5;

  int spatial_dim() const { return static_cast<int>(period.size()); }
  int dim() const { return 2 + 2 * modes * spatial_dim(); }
};

/// [t, 1, cos(2 pi x/P), sin(2 pi x/P), ..., cos(2 pi m x/P), sin(2 pi m x/P)] with one trig block
/// per spatial dimension.
inline std::vector<double> embed(std::span<const double> x, double t, const EmbeddingSpec& spec) {
  if (spec.modes < 1) throw StructuralError("embed: at least one Fourier mode is required");
  if (static_cast<int>(x.size()) != spec.spatial_dim()) throw StructuralError("embed: spatial dimension mismatch");
  std::vector<double> f{t, 1.0};
  for (int d = 0; d < spec.spatial_dim(); ++d) {
    const double w = 2.0 * std::numbers::pi / spec.period[static_cast<std::size_t>(d)];
    for (int n = 1; n <= spec.modes; ++n) {
      f.push_back(std::cos(w * n * x[static_cast<std::size_t>(d)]));
      f.push_back(std::sin(w * n * x[static_cast<std::size_t>(d)]));
    }
  }
  return f;
}

/// Batched embedding with jets. `points` is (d+1) x B (time last); `time_active(p)` is 0 where the
/// time coordinate was clipped (constant in t), 1 otherwise. With `repeat` > 0, column p shares its
/// spatial coordinates with column p % repeat and the trig features are copied, not recomputed.
inline JetBlock embed_jets(const Matrix& points, const Eigen::VectorXd& time_active, const EmbeddingSpec& spec,
                           const JetLayout& layout, int repeat = 0) {
  const int d = spec.spatial_dim();
  const int b = static_cast<int>(points.cols());
  const int fresh = repeat > 0 ? std::min(repeat, b) : b;
  JetBlock e(spec.dim(), b, layout.channels());
  e.ch(0).row(0) = points.row(d);
  e.ch(0).row(1).setOnes();
  if (int it = layout.find(d); it >= 0) e.ch(layout.d1(it)).row(0) = time_active.transpose();
  for (int k = 0; k < d; ++k) {
    const double w = 2.0 * std::numbers::pi / spec.period[static_cast<std::size_t>(k)];
    const int ik = layout.find(k);
    for (int n = 1; n <= spec.modes; ++n) {
      const int rc = 2 + 2 * (k * spec.modes + n - 1);
      const double wn = w * n;
      for (int p = 0; p < fresh; ++p) {
        const double c = std::cos(wn * points(k, p));
        const double s = std::sin(wn * points(k, p));
        e.ch(0)(rc, p) = c;
        e.ch(0)(rc + 1, p) = s;
        if (ik >= 0) {
          e.ch(layout.d1(ik))(rc, p) = -wn * s;
          e.ch(layout.d1(ik))(rc + 1, p) = wn * c;
          e.ch(layout.d2(ik))(rc, p) = -wn * wn * c;
          e.ch(layout.d2(ik))(rc + 1, p) = -wn * wn * s;
        }
      }
    }
  }
  if (fresh < b) {
    const Eigen::Index rows = 2 * spec.modes * d;
    for (int c = 0; c < layout.channels(); ++c)
      for (int p0 = fresh; p0 < b; p0 += fresh) {
        const int n = std::min(fresh, b - p0);
        e.ch(c).block(2, p0, rows, n) = e.ch(c).block(2, 0, rows, n);
      }
  }
  return e;
}

struct PerturbScale {
  double radius = 0.0;
  int count = 1;
};

/// Multiscale random time perturbation: per scale l, count_l offsets drawn from U[-R_l, R_l].
struct PerturbConfig {
  std::vector<PerturbScale> scales;

  int total() const {
    int k = 0;
    for (auto& s : scales) k += s.count;
    return k;
  }

  void validate() const {
    for (std::size_t l = 0; l < scales.size(); ++l) {
      if (scales[l].count < 1) throw ConfigError("perturbation counts must be >= 1");
      if (scales[l].radius < 0.0) throw ConfigError("perturbation radii must be >= 0");
      if (l > 0 && !(scales[l].radius > scales[l - 1].radius))
        throw ConfigError("perturbation radii must be strictly increasing");
    }
  }

  /// Region sizes from the model configuration: {0.03, 0.05, 0.07} with {3, 5, 7} points.
  static PerturbConfig model_preset() { return {{{0.03, 3}, {0.05, 5}, {0.07, 7}}}; }
  /// Region sizes from the benchmark description: {0.01, 0.05, 0.09} with {3, 5, 7} points.
  static PerturbConfig benchmark_preset() { return {{{0.01, 3}, {0.05, 5}, {0.09, 7}}}; }
};

/// Offsets for a batch: rows are slots (scale-major), columns are points. Each point consumes its
/// draws contiguously so results do not depend on how a batch is chunked.
inline Matrix draw_offsets(const PerturbConfig& cfg, Eigen::Index points, Rng& rng) {
  Matrix off(cfg.total(), points);
  for (Eigen::Index p = 0; p < points; ++p) {
    int row = 0;
    for (auto& s : cfg.scales)
      for (int i = 0; i < s.count; ++i) off(row++, p) = rng.uniform(-s.radius, s.radius);
  }
  return off;
}

struct PerturbedPoints {
  std::vector<double> point;                              // (x..., t)
  std::vector<std::vector<std::vector<double>>> regions;  // [scale][i] -> (x..., t')
};

/// Diff-Aug of one collocation point: only the time coordinate moves, clipped to [0, T].
inline PerturbedPoints perturb(std::span<const double> x, double t, double T, const PerturbConfig& cfg, Rng& rng) {
  PerturbedPoints out;
  out.point.assign(x.begin(), x.end());
  out.point.push_back(t);
  for (auto& s : cfg.scales) {
    auto& reg = out.regions.emplace_back();
    for (int i = 0; i < s.count; ++i) {
      auto q = out.point;
      q.back() = std::clamp(t + rng.uniform(-s.radius, s.radius), 0.0, T);
      reg.push_back(std::move(q));
    }
  }
  return out;
}

/// NeuralMD architecture descriptor and flat parameter layout.
struct Architecture {
  EmbeddingSpec embedding{{32.0}, 5};
  int d_model = 64;
  int mixer_hidden = 8;
  int head_hidden = 64;
  int outputs = 2;
  PerturbConfig perturb = PerturbConfig::model_preset();

  int spatial_dim() const { return embedding.spatial_dim(); }
  int groups() const { return 1 + static_cast<int>(perturb.scales.size()); }

  ad::DenseSlot encoder() const { return dense(0, d_model, embedding.dim()); }
  ad::AxisSlot mixer_in() const {
    auto o = encoder().end();
    return {o, o + std::size_t(mixer_hidden) * groups(), mixer_hidden, groups()};
  }
  ad::AxisSlot mixer_out() const {
    auto o = mixer_in().end();
    return {o, o + std::size_t(mixer_hidden), 1, mixer_hidden};
  }
  ad::DenseSlot head(int layer) const {
    std::size_t o = mixer_out().end();
    ad::DenseSlot s = dense(o, head_hidden, d_model);
    if (layer >= 1) s = dense(s.end(), head_hidden, head_hidden);
    if (layer >= 2) s = dense(s.end(), outputs, head_hidden);
    return s;
  }
  std::size_t param_count() const { return head(2).end(); }

  void validate() const {
    if (embedding.modes < 1 || embedding.spatial_dim() < 1) throw ConfigError("embedding needs >= 1 mode and dimension");
    for (double p : embedding.period)
      if (!(p > 0.0)) throw ConfigError("embedding period must be positive");
    if (d_model < 1 || mixer_hidden < 1 || head_hidden < 1 || outputs < 1) throw ConfigError("layer widths must be positive");
    perturb.validate();
  }

 private:
  static ad::DenseSlot dense(std::size_t at, int out, int in) {
    return {at, at + std::size_t(out) * in, out, in};
  }
};

/// Uniform fan-in initialisation U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for every layer.
inline std::vector<double> init_params(const Architecture& arch, Rng& rng) {
  std::vector<double> p(arch.param_count());
  auto fill = [&](std::size_t w, std::size_t n, std::size_t b, std::size_t nb, int fan_in) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < n; ++i) p[w + i] = rng.uniform(-bound, bound);
    for (std::size_t i = 0; i < nb; ++i) p[b + i] = rng.uniform(-bound, bound);
  };
  auto dense = [&](const ad::DenseSlot& s) { fill(s.weight, std::size_t(s.out) * s.in, s.bias, std::size_t(s.out), s.in); };
  auto axis = [&](const ad::AxisSlot& s) {
    fill(s.weight, std::size_t(s.out_groups) * s.in_groups, s.bias, std::size_t(s.out_groups), s.in_groups);
  };
  dense(arch.encoder());
  axis(arch.mixer_in());
  axis(arch.mixer_out());
  for (int l = 0; l < 3; ++l) dense(arch.head(l));
  return p;
}

/// Hard initial-condition data at a batch of points: u0 and du0 (outputs x channels*B), only
/// spatial derivative channels populated.
struct HardIcData {
  JetBlock u0;
  JetBlock du0;
};

/// Blend weights (1+t)e^-t, t e^-t, 1 - e^-t - t e^-t as jets in t.
struct BlendJets {
  double a[3], b[3], c[3];
};

inline BlendJets blend_jets(double t) {
  const double e = std::exp(-t);
  return {{(1.0 + t) * e, -t * e, (t - 1.0) * e}, {t * e, (1.0 - t) * e, (t - 2.0) * e},
          {1.0 - e - t * e, t * e, (1.0 - t) * e}};
}

/// u~ = (1+t)e^-t u0 + t e^-t du0 + (1 - e^-t - t e^-t) raw, jets propagated through the blend.
/// `time_coord` is the raw coordinate index of t; u0 and du0 must not depend on t.
inline ad::Jet2 hard_ic_wrap(const ad::Jet2& raw, const ad::Jet2& u0, const ad::Jet2& du0, double t, int time_coord) {
  if (t < 0.0) throw StructuralError("hard_ic_wrap: t must be >= 0");
  const BlendJets w = blend_jets(t);
  ad::Jet2 out = raw;
  auto term = [&](const double* f, const ad::Jet2& g, int i, bool second) {
    // product of a t-only jet f with jet g along coordinate i
    const bool is_t = raw.layout.coord(i) == time_coord;
    const double f1 = is_t ? f[1] : 0.0, f2 = is_t ? f[2] : 0.0;
    const double gv = g.value, g1 = g.first.empty() ? 0.0 : g.first[std::size_t(i)],
                 g2 = g.second.empty() ? 0.0 : g.second[std::size_t(i)];
    return second ? f2 * gv + 2.0 * f1 * g1 + f[0] * g2 : f1 * gv + f[0] * g1;
  };
  out.value = w.a[0] * u0.value + w.b[0] * du0.value + w.c[0] * raw.value;
  for (int i = 0; i < raw.layout.size(); ++i) {
    out.first[std::size_t(i)] = term(w.a, u0, i, false) + term(w.b, du0, i, false) + term(w.c, raw, i, false);
    out.second[std::size_t(i)] = term(w.a, u0, i, true) + term(w.b, du0, i, true) + term(w.c, raw, i, true);
  }
  return out;
}

/// Per-column scalar jet of a t-only function given (value, d/dt, d2/dt2) per column.
inline JetBlock time_jet_row(const Eigen::VectorXd& v, const Eigen::VectorXd& d1, const Eigen::VectorXd& d2,
                             const JetLayout& layout, int time_coord) {
  JetBlock j(1, static_cast<int>(v.size()), layout.channels());
  j.ch(0).row(0) = v.transpose();
  if (int it = layout.find(time_coord); it >= 0) {
    j.ch(layout.d1(it)).row(0) = d1.transpose();
    j.ch(layout.d2(it)).row(0) = d2.transpose();
  }
  return j;
}

/// Evaluation context for one batch: time horizon, optional gate, perturbation offsets, hard IC.
struct FieldContext {
  double T = 1.0;
  std::optional<GateState> gate;  // empty: all gates are 1
  Matrix offsets;                 // total-perturbations x B; empty means all zero
  const HardIcData* ic = nullptr;
  double pool_floor = 1e-12;
};

/// The NeuralMD network bound to an evaluation context. Satisfies ad::TapeNetwork.
class NeuralMdNet {
 public:
  NeuralMdNet(Architecture arch, FieldContext ctx) : arch_(std::move(arch)), ctx_(std::move(ctx)) {}

  std::size_t param_count() const { return arch_.param_count(); }
  int input_dim() const { return arch_.spatial_dim() + 1; }
  const Architecture& arch() const { return arch_; }
  const FieldContext& context() const { return ctx_; }

  int record(ad::Tape& tape, const Matrix& pts) const {
    const int d = arch_.spatial_dim();
    const int b = static_cast<int>(pts.cols());
    const int k = arch_.perturb.total();
    const int slots = 1 + k;
    const JetLayout& layout = tape.layout();
    if (pts.rows() != d + 1) throw StructuralError("NeuralMdNet: point dimension mismatch");
    if (ctx_.offsets.size() != 0 && (ctx_.offsets.rows() != k || ctx_.offsets.cols() != b))
      throw StructuralError("NeuralMdNet: perturbation offsets shape mismatch");

    Matrix all(d + 1, Eigen::Index(slots) * b);
    Eigen::VectorXd active = Eigen::VectorXd::Ones(all.cols());
    all.leftCols(b) = pts;
    for (int j = 1; j < slots; ++j) {
      auto blk = all.middleCols(Eigen::Index(j) * b, b);
      blk = pts;
      for (int p = 0; p < b; ++p) {
        const double raw = pts(d, p) + (ctx_.offsets.size() ? ctx_.offsets(j - 1, p) : 0.0);
        const double clipped = std::clamp(raw, 0.0, ctx_.T);
        blk(d, p) = clipped;
        if (clipped != raw) active(Eigen::Index(j) * b + p) = 0.0;
      }
    }

    int node = tape.constant(embed_jets(all, active, arch_.embedding, layout, b));
    node = tape.tanh(tape.affine(node, arch_.encoder()));

    std::vector<int> slot_group;
    std::vector<JetBlock> weights;
    int slot = 1;
    for (std::size_t l = 0; l < arch_.perturb.scales.size(); ++l) {
      const int cnt = arch_.perturb.scales[l].count;
      std::vector<JetBlock> h;
      JetBlock sum(1, b, layout.channels());
      for (int i = 0; i < cnt; ++i, ++slot) {
        Eigen::VectorXd hv(b), h1(b), h2(b);
        for (int p = 0; p < b; ++p) {
          GateJet g = ctx_.gate ? gate_jet(all(d, Eigen::Index(slot) * b + p), ctx_.T, *ctx_.gate) : GateJet{};
          const double a = active(Eigen::Index(slot) * b + p);
          hv(p) = g.h;
          h1(p) = g.dh * a;
          h2(p) = g.d2h * a;
        }
        h.push_back(time_jet_row(hv, h1, h2, layout, d));
        sum.data += h.back().data;
        slot_group.push_back(static_cast<int>(l) + 1);
      }
      JetBlock inv = inverse_jet(sum, ctx_.pool_floor);
      for (auto& hj : h) {
        JetBlock w;
        ad::detail::jet_scale(hj, inv, w, false);
        weights.push_back(std::move(w));
      }
    }
    node = tape.pool_stack(node, static_cast<int>(arch_.perturb.scales.size()), slot_group, std::move(weights));
    node = tape.tanh(tape.axis_affine(node, arch_.mixer_in()));
    node = tape.axis_affine(node, arch_.mixer_out());
    node = tape.tanh(tape.affine(node, arch_.head(0)));
    node = tape.tanh(tape.affine(node, arch_.head(1)));
    node = tape.affine(node, arch_.head(2));
    if (ctx_.ic) node = apply_hard_ic(tape, node, pts, *ctx_.ic);
    return node;
  }

  /// Blend raw outputs with the prescribed initial data (jets over the batch).
  int apply_hard_ic(ad::Tape& tape, int raw, const Matrix& pts, const HardIcData& ic) const {
    const int d = arch_.spatial_dim();
    const int b = static_cast<int>(pts.cols());
    const JetLayout& layout = tape.layout();
    Eigen::VectorXd av(b), a1(b), a2(b), bv(b), b1(b), b2(b), cv(b), c1(b), c2(b);
    for (int p = 0; p < b; ++p) {
      BlendJets w = blend_jets(pts(d, p));
      av(p) = w.a[0], a1(p) = w.a[1], a2(p) = w.a[2];
      bv(p) = w.b[0], b1(p) = w.b[1], b2(p) = w.b[2];
      cv(p) = w.c[0], c1(p) = w.c[1], c2(p) = w.c[2];
    }
    const JetBlock& out = tape.value(raw);
    if (!ic.u0.same_shape(out) || !ic.du0.same_shape(out)) throw StructuralError("hard IC data shape mismatch");
    JetBlock offset;
    ad::detail::jet_scale(ic.u0, time_jet_row(av, a1, a2, layout, d), offset, false);
    ad::detail::jet_scale(ic.du0, time_jet_row(bv, b1, b2, layout, d), offset, true);
    int node = tape.scale_columns(raw, time_jet_row(cv, c1, c2, layout, d));
    return tape.add_constant(node, std::move(offset));
  }

  /// 1/s as a jet; s below `floor` is replaced by the constant floor.
  static JetBlock inverse_jet(const JetBlock& s, double floor) {
    const int n = (s.channels - 1) / 2;
    JetBlock inv(1, s.batch, s.channels);
    for (int p = 0; p < s.batch; ++p) {
      const double v = s.ch(0)(0, p);
      if (v < floor) {
        inv.ch(0)(0, p) = 1.0 / floor;
        continue;
      }
      inv.ch(0)(0, p) = 1.0 / v;
      for (int i = 0; i < n; ++i) {
        const double s1 = s.ch(1 + i)(0, p), s2 = s.ch(1 + n + i)(0, p);
        inv.ch(1 + i)(0, p) = -s1 / (v * v);
        inv.ch(1 + n + i)(0, p) = -s2 / (v * v) + 2.0 * s1 * s1 / (v * v * v);
      }
    }
    return inv;
  }

 private:
  Architecture arch_;
  FieldContext ctx_;
};

/// Full pipeline at one point: embed -> encode -> perturb/pool/mix -> head. Returns the m outputs.
inline std::vector<double> forward_field(const Architecture& arch, std::span<const double> params,
                                         std::span<const double> x, double t, double T,
                                         const std::optional<GateState>& gate, Rng& rng) {
  if (params.size() != arch.param_count()) throw StructuralError("forward_field: parameter length mismatch");
  FieldContext ctx;
  ctx.T = T;
  ctx.gate = gate;
  ctx.offsets = draw_offsets(arch.perturb, 1, rng);
  NeuralMdNet net(arch, std::move(ctx));
  std::vector<double> in(x.begin(), x.end());
  in.push_back(t);
  auto jets = ad::forward_jet(net, params, in, JetLayout{});
  std::vector<double> out;
  for (auto& j : jets) out.push_back(j.value);
  return out;
}

/// Gated mean pooling per scale followed by the scale-axis mixer, for one point.
/// `region_feats[l][i]` pairs with `gates[l][i]`.
inline Eigen::VectorXd pool_mix(const Eigen::VectorXd& point_feat, const std::vector<std::vector<Eigen::VectorXd>>& region_feats,
                                const std::vector<std::vector<double>>& gates, const Architecture& arch,
                                std::span<const double> params, double floor = 1e-12) {
  if (region_feats.size() != arch.perturb.scales.size() || gates.size() != region_feats.size())
    throw StructuralError("pool_mix: one feature list and gate list per configured scale");
  const Eigen::Index d = point_feat.size();
  int slots = 1;
  for (auto& r : region_feats) slots += static_cast<int>(r.size());
  JetBlock feats(d, slots, 1);
  feats.data.col(0) = point_feat;
  std::vector<int> slot_group;
  std::vector<JetBlock> weights;
  int col = 1;
  for (std::size_t l = 0; l < region_feats.size(); ++l) {
    if (gates[l].size() != region_feats[l].size()) throw StructuralError("pool_mix: gate count mismatch");
    double s = 0.0;
    for (double g : gates[l]) s += g;
    const double denom = std::max(s, floor);
    for (std::size_t i = 0; i < region_feats[l].size(); ++i) {
      feats.data.col(col++) = region_feats[l][i];
      JetBlock w(1, 1, 1);
      w.data(0, 0) = gates[l][i] / denom;
      weights.push_back(std::move(w));
      slot_group.push_back(static_cast<int>(l) + 1);
    }
  }
  ad::Tape tape(params, JetLayout{});
  int node = tape.constant(std::move(feats));
  node = tape.pool_stack(node, static_cast<int>(region_feats.size()), slot_group, std::move(weights));
  node = tape.tanh(tape.axis_affine(node, arch.mixer_in()));
  node = tape.axis_affine(node, arch.mixer_out());
  return tape.value(node).data.col(0);
}

/// Plain tanh MLP on normalised raw coordinates (each mapped affinely from [lo, hi] to [-1, 1]).
struct MlpArchitecture {
  std::vector<double> lower;  // per input coordinate
  std::vector<double> upper;
  std::vector<int> hidden{64, 64, 64, 64, 64, 64, 64, 64};
  int outputs = 1;

  int input_dim() const { return static_cast<int>(lower.size()); }
  ad::DenseSlot layer(std::size_t l) const {
    std::size_t at = 0;
    int in = input_dim();
    for (std::size_t k = 0;; ++k) {
      const int out = k < hidden.size() ? hidden[k] : outputs;
      ad::DenseSlot s{at, at + std::size_t(out) * in, out, in};
      if (k == l) return s;
      at = s.end();
      in = out;
    }
  }
  std::size_t layers() const { return hidden.size() + 1; }
  std::size_t param_count() const { return layer(layers() - 1).end(); }
};

inline std::vector<double> init_params(const MlpArchitecture& arch, Rng& rng) {
  std::vector<double> p(arch.param_count());
  for (std::size_t l = 0; l < arch.layers(); ++l) {
    auto s = arch.layer(l);
    const double bound = 1.0 / std::sqrt(static_cast<double>(s.in));
    for (std::size_t i = 0; i < std::size_t(s.out) * s.in; ++i) p[s.weight + i] = rng.uniform(-bound, bound);
    for (int i = 0; i < s.out; ++i) p[s.bias + std::size_t(i)] = rng.uniform(-bound, bound);
  }
  return p;
}

class MlpNet {
 public:
  explicit MlpNet(MlpArchitecture arch) : arch_(std::move(arch)) {}
  std::size_t param_count() const { return arch_.param_count(); }
  int input_dim() const { return arch_.input_dim(); }
  const MlpArchitecture& arch() const { return arch_; }

  int record(ad::Tape& tape, const Matrix& pts) const {
    if (pts.rows() != input_dim()) throw StructuralError("MlpNet: input dimension mismatch");
    JetBlock in = ad::coordinate_jets(pts, tape.layout());
    for (int c = 0; c < input_dim(); ++c) {
      const double lo = arch_.lower[std::size_t(c)], hi = arch_.upper[std::size_t(c)];
      const double scale = 2.0 / (hi - lo);
      in.data.row(c) *= scale;
      in.ch(0).row(c).array() -= (lo + hi) / (hi - lo);
    }
    int node = tape.constant(std::move(in));
    for (std::size_t l = 0; l < arch_.layers(); ++l) {
      node = tape.affine(node, arch_.layer(l));
      if (l + 1 < arch_.layers()) node = tape.tanh(node);
    }
    return node;
  }

 private:
  MlpArchitecture arch_;
};

}  // namespace neuralmd
