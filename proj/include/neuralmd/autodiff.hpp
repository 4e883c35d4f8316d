#pragma once

// Second-order forward jets carried through a reverse-mode tape.
//
// Every tape node holds a block of jets: for each row (feature) and each batch column (point) the
// value, the first derivative along each wanted input coordinate and the matching diagonal second
// derivative. Ops are recorded at layer granularity so that the heavy lifting is done by dense
// GEMMs; the backward sweep differentiates the whole jet (value and input-derivatives) with respect
// to the flat parameter vector, which is what residual losses containing u_tt and the Laplacian need.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "neuralmd/errors.hpp"

namespace neuralmd::ad {

using Matrix = Eigen::MatrixXd;

/// Input coordinates that carry derivatives. Channel layout of a jet block is
/// [value, d/dc_0 .. d/dc_{n-1}, d2/dc_0^2 .. d2/dc_{n-1}^2].
class JetLayout {
 public:
  JetLayout() = default;
  explicit JetLayout(std::vector<int> coords) : coords_(std::move(coords)) {
    for (std::size_t i = 0; i < coords_.size(); ++i) {
      if (coords_[i] < 0) throw StructuralError("JetLayout: negative coordinate index");
      for (std::size_t j = 0; j < i; ++j)
        if (coords_[j] == coords_[i]) throw StructuralError("JetLayout: duplicate coordinate");
    }
  }

  int size() const { return static_cast<int>(coords_.size()); }
  int channels() const { return 1 + 2 * size(); }
  int d1(int i) const { return 1 + i; }
  int d2(int i) const { return 1 + size() + i; }
  int coord(int i) const { return coords_[static_cast<std::size_t>(i)]; }
  const std::vector<int>& coords() const { return coords_; }

  int find(int coord) const {
    auto it = std::find(coords_.begin(), coords_.end(), coord);
    return it == coords_.end() ? -1 : static_cast<int>(it - coords_.begin());
  }

  bool operator==(const JetLayout&) const = default;

 private:
  std::vector<int> coords_;
};

/// rows x (channels * batch), channel-major column blocks.
struct JetBlock {
  int batch = 0;
  int channels = 1;
  Matrix data;

  JetBlock() = default;
  JetBlock(Eigen::Index rows, int batch_, int channels_)
      : batch(batch_), channels(channels_), data(Matrix::Zero(rows, Eigen::Index(channels_) * batch_)) {}

  /// Same shape, contents left unset (for ops that overwrite every entry).
  static JetBlock uninitialized(Eigen::Index rows, int batch_, int channels_) {
    JetBlock b;
    b.batch = batch_;
    b.channels = channels_;
    b.data.resize(rows, Eigen::Index(channels_) * batch_);
    return b;
  }

  Eigen::Index rows() const { return data.rows(); }
  auto ch(int c) { return data.middleCols(Eigen::Index(c) * batch, batch); }
  auto ch(int c) const { return data.middleCols(Eigen::Index(c) * batch, batch); }
  bool same_shape(const JetBlock& o) const {
    return batch == o.batch && channels == o.channels && rows() == o.rows();
  }
};

/// Value plus first and diagonal second derivatives of one scalar output at one point.
struct Jet2 {
  double value = 0.0;
  JetLayout layout;
  std::vector<double> first;
  std::vector<double> second;

  double d1(int coord) const {
    int i = layout.find(coord);
    if (i < 0) throw StructuralError("Jet2: coordinate " + std::to_string(coord) + " not tracked");
    return first[static_cast<std::size_t>(i)];
  }

  // Only the diagonal (and therefore the (t,t) entry) is carried; cross terms are never needed.
  double d2(int a, int b) const {
    if (a != b) throw StructuralError("Jet2: cross second derivatives are not computed");
    int i = layout.find(a);
    if (i < 0) throw StructuralError("Jet2: coordinate " + std::to_string(a) + " not tracked");
    return second[static_cast<std::size_t>(i)];
  }
};

/// Dense layer W (out x in, column-major) and bias (out) inside the flat parameter vector.
struct DenseSlot {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int out = 0;
  int in = 0;
  std::size_t end() const { return std::max(weight + std::size_t(out) * in, bias + std::size_t(out)); }
};

/// Affine map acting on groups of rows: input rows are in_groups blocks of equal height, output
/// block k = sum_s W(k,s) * block s + bias(k). W is out_groups x in_groups, column-major.
struct AxisSlot {
  std::size_t weight = 0;
  std::size_t bias = 0;
  int out_groups = 0;
  int in_groups = 0;
  std::size_t end() const {
    return std::max(weight + std::size_t(out_groups) * in_groups, bias + std::size_t(out_groups));
  }
};

class Tape;

namespace detail {

struct Op {
  virtual ~Op() = default;
  virtual std::vector<int> inputs() const = 0;
  virtual void forward(const Tape& tape, JetBlock& out) = 0;
  virtual void backward(Tape& tape, const JetBlock& gout, std::span<double> gparams) const = 0;
};

}  // namespace detail

using AlignedVec = std::vector<double, Eigen::aligned_allocator<double>>;

class Tape {
 public:
  using LossFn = std::function<double(const JetBlock& in, JetBlock* partials)>;

  Tape(std::span<const double> params, JetLayout layout)
      : params_(params.begin(), params.end()), layout_(std::move(layout)) {}

  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;
  Tape(Tape&&) = default;
  Tape& operator=(Tape&&) = default;

  const JetLayout& layout() const { return layout_; }
  std::span<const double> params() const { return params_; }
  int size() const { return static_cast<int>(nodes_.size()); }

  const JetBlock& value(int node) const { return nodes_.at(check(node)).out; }
  bool is_scalar(int node) const { return nodes_.at(check(node)).scalar; }
  double scalar(int node) const {
    const Node& n = nodes_.at(check(node));
    if (!n.scalar) throw StructuralError("Tape: node is not a scalar");
    return n.out.data(0, 0);
  }

  int constant(JetBlock value);
  int affine(int in, const DenseSlot& slot);
  int tanh(int in);
  int scale_columns(int in, JetBlock factor);
  int add_constant(int in, JetBlock offset);
  int pool_stack(int in, int groups, std::vector<int> slot_group, std::vector<JetBlock> weights);
  int axis_affine(int in, const AxisSlot& slot);
  int scalar_loss(int in, LossFn fn);
  int weighted_sum(std::vector<std::pair<int, double>> terms);

  /// Recompute every node from its inputs; values are bit-identical to the recording.
  void replay() {
    for (std::size_t k = 0; k < nodes_.size(); ++k) run_forward(static_cast<int>(k));
  }

  // Backward-sweep plumbing used by ops and param_grad.
  JetBlock& grad(int node) {
    Node& n = nodes_[static_cast<std::size_t>(node)];
    if (!n.has_grad) {
      n.grad = JetBlock(n.out.rows(), n.out.batch, n.out.channels);
      n.has_grad = true;
    }
    return n.grad;
  }

 private:
  friend std::vector<double> param_grad(Tape& tape, int loss);

  struct Node {
    std::unique_ptr<detail::Op> op;
    JetBlock out;
    JetBlock grad;
    bool has_grad = false;
    bool scalar = false;
  };

  int check(int node) const {
    if (node < 0 || node >= size()) throw StructuralError("Tape: node " + std::to_string(node) + " is not on this tape");
    return node;
  }

  int push(std::unique_ptr<detail::Op> op, bool scalar = false) {
    for (int in : op->inputs()) check(in);
    nodes_.push_back(Node{std::move(op), {}, {}, false, scalar});
    int id = size() - 1;
    run_forward(id);
    return id;
  }

  void run_forward(int id) {
    Node& n = nodes_[static_cast<std::size_t>(id)];
    n.op->forward(*this, n.out);
    if (!n.out.data.allFinite())
      throw NumericError("non-finite value produced at tape node " + std::to_string(id), id);
  }

  // Aligned so that vectorised reductions over parameter slices sum in the same order every run.
  AlignedVec params_;
  JetLayout layout_;
  std::vector<Node> nodes_;
};

/// Gradient of a scalar tape node with respect to every parameter the tape was built with.
inline std::vector<double> param_grad(Tape& tape, int loss) {
  tape.check(loss);
  if (!tape.nodes_[static_cast<std::size_t>(loss)].scalar)
    throw StructuralError("param_grad: loss node is not a scalar");
  for (auto& n : tape.nodes_) {
    n.has_grad = false;
    n.grad = JetBlock();
  }
  AlignedVec g(tape.params_.size(), 0.0);
  tape.grad(loss).data(0, 0) = 1.0;
  for (int k = loss; k >= 0; --k) {
    auto& n = tape.nodes_[static_cast<std::size_t>(k)];
    if (!n.has_grad) continue;
    n.op->backward(tape, n.grad, g);
  }
  for (auto& n : tape.nodes_) {
    n.has_grad = false;
    n.grad = JetBlock();
  }
  return std::vector<double>(g.begin(), g.end());
}

namespace detail {

inline void check_slot(std::size_t end, std::size_t nparams, const char* what) {
  if (end > nparams) throw StructuralError(std::string(what) + ": parameter slot exceeds parameter vector");
}

struct ConstantOp final : Op {
  JetBlock v;
  explicit ConstantOp(JetBlock value) : v(std::move(value)) {}
  std::vector<int> inputs() const override { return {}; }
  void forward(const Tape&, JetBlock& out) override { out = v; }
  void backward(Tape&, const JetBlock&, std::span<double>) const override {}
};

struct AffineOp final : Op {
  int in;
  DenseSlot s;
  AffineOp(int i, DenseSlot slot) : in(i), s(slot) {}
  std::vector<int> inputs() const override { return {in}; }

  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& x = t.value(in);
    if (x.rows() != s.in) throw StructuralError("affine: input width does not match layer");
    Eigen::Map<const Matrix> w(t.params().data() + s.weight, s.out, s.in);
    Eigen::Map<const Eigen::VectorXd> b(t.params().data() + s.bias, s.out);
    out.batch = x.batch;
    out.channels = x.channels;
    out.data.noalias() = w * x.data;
    out.ch(0).colwise() += b;
  }

  void backward(Tape& t, const JetBlock& g, std::span<double> gp) const override {
    const JetBlock& x = t.value(in);
    Eigen::Map<const Matrix> w(t.params().data() + s.weight, s.out, s.in);
    Eigen::Map<Matrix> gw(gp.data() + s.weight, s.out, s.in);
    Eigen::Map<Eigen::VectorXd> gb(gp.data() + s.bias, s.out);
    gw.noalias() += g.data * x.data.transpose();
    gb += g.ch(0).rowwise().sum();
    t.grad(in).data.noalias() += w.transpose() * g.data;
  }
};

struct TanhOp final : Op {
  int in;
  Eigen::ArrayXXd y, s;  // tanh and sech^2 of the value channel, kept for the backward sweep
  explicit TanhOp(int i) : in(i) {}
  std::vector<int> inputs() const override { return {in}; }

  // tanh a = 1 - 2 / (e^{2a} + 1) through Eigen's vectorised exp (saturates cleanly at +-1); the
  // subtraction cancels near 0, where the odd Taylor series to a^11 is exact to rounding instead.
  static Eigen::ArrayXXd fast_tanh(const Eigen::Ref<const Eigen::ArrayXXd>& a) {
    const Eigen::ArrayXXd a2 = a.square();
    const Eigen::ArrayXXd series =
        a * (1.0 + a2 * (-1.0 / 3.0 + a2 * (2.0 / 15.0 + a2 * (-17.0 / 315.0 + a2 * (62.0 / 2835.0 - a2 * (1382.0 / 155925.0))))));
    return (a.abs() < 0.05).select(series, 1.0 - 2.0 / ((2.0 * a).exp() + 1.0));
  }

  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& a = t.value(in);
    const int n = (a.channels - 1) / 2;
    out = JetBlock::uninitialized(a.rows(), a.batch, a.channels);
    y = fast_tanh(a.ch(0).array());
    s = 1.0 - y.square();
    out.ch(0).array() = y;
    for (int i = 0; i < n; ++i) {
      auto a1 = a.ch(1 + i).array();
      out.ch(1 + i).array() = s * a1;
      out.ch(1 + n + i).array() = s * a.ch(1 + n + i).array() - 2.0 * y * s * a1.square();
    }
  }

  void backward(Tape& t, const JetBlock& g, std::span<double>) const override {
    const JetBlock& a = t.value(in);
    const int n = (a.channels - 1) / 2;
    JetBlock& ga = t.grad(in);
    if (n == 0) {
      ga.ch(0).array() += g.ch(0).array() * s;
      return;
    }
    const Eigen::ArrayXXd y2 = -2.0 * y * s;
    const Eigen::ArrayXXd y3 = -2.0 * s.square() + 4.0 * y.square() * s;
    Eigen::ArrayXXd gv = g.ch(0).array() * s;
    for (int i = 0; i < n; ++i) {
      auto a1 = a.ch(1 + i).array();
      auto a2 = a.ch(1 + n + i).array();
      auto g1 = g.ch(1 + i).array();
      auto g2 = g.ch(1 + n + i).array();
      gv += g1 * a1 * y2 + g2 * (a2 * y2 + a1.square() * y3);
      ga.ch(1 + i).array() += g1 * s + 2.0 * g2 * y2 * a1;
      ga.ch(1 + n + i).array() += g2 * s;
    }
    ga.ch(0).array() += gv;
  }
};

// Multiply every row of column p by the scalar jet factor(:, p).
inline void jet_scale(const JetBlock& x, const JetBlock& f, JetBlock& out, bool accumulate) {
  const int n = (x.channels - 1) / 2;
  if (!accumulate) out = JetBlock(x.rows(), x.batch, x.channels);
  auto fv = f.ch(0).row(0).array();
  auto xv = x.ch(0).array();
  out.ch(0).array() += xv.rowwise() * fv;
  for (int i = 0; i < n; ++i) {
    auto f1 = f.ch(1 + i).row(0).array();
    auto f2 = f.ch(1 + n + i).row(0).array();
    auto x1 = x.ch(1 + i).array();
    auto x2 = x.ch(1 + n + i).array();
    out.ch(1 + i).array() += xv.rowwise() * f1 + x1.rowwise() * fv;
    out.ch(1 + n + i).array() += xv.rowwise() * f2 + 2.0 * (x1.rowwise() * f1) + x2.rowwise() * fv;
  }
}

// Adjoint of jet_scale with respect to x (the factor is constant).
inline void jet_scale_adjoint(const JetBlock& g, const JetBlock& f, JetBlock& gx) {
  const int n = (g.channels - 1) / 2;
  auto fv = f.ch(0).row(0).array();
  gx.ch(0).array() += g.ch(0).array().rowwise() * fv;
  for (int i = 0; i < n; ++i) {
    auto f1 = f.ch(1 + i).row(0).array();
    auto f2 = f.ch(1 + n + i).row(0).array();
    auto g1 = g.ch(1 + i).array();
    auto g2 = g.ch(1 + n + i).array();
    gx.ch(0).array() += g1.rowwise() * f1 + g2.rowwise() * f2;
    gx.ch(1 + i).array() += g1.rowwise() * fv + 2.0 * (g2.rowwise() * f1);
    gx.ch(1 + n + i).array() += g2.rowwise() * fv;
  }
}

struct ScaleColumnsOp final : Op {
  int in;
  JetBlock f;
  ScaleColumnsOp(int i, JetBlock factor) : in(i), f(std::move(factor)) {}
  std::vector<int> inputs() const override { return {in}; }
  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& x = t.value(in);
    if (f.rows() != 1 || f.batch != x.batch || f.channels != x.channels)
      throw StructuralError("scale_columns: factor shape mismatch");
    jet_scale(x, f, out, false);
  }
  void backward(Tape& t, const JetBlock& g, std::span<double>) const override {
    jet_scale_adjoint(g, f, t.grad(in));
  }
};

struct AddConstantOp final : Op {
  int in;
  JetBlock c;
  AddConstantOp(int i, JetBlock offset) : in(i), c(std::move(offset)) {}
  std::vector<int> inputs() const override { return {in}; }
  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& x = t.value(in);
    if (!x.same_shape(c)) throw StructuralError("add_constant: shape mismatch");
    out = x;
    out.data += c.data;
  }
  void backward(Tape& t, const JetBlock& g, std::span<double>) const override { t.grad(in).data += g.data; }
};

// Input batch = slots * B columns per channel (slot-major within each channel). Slot 0 is copied
// to output row group 0; every other slot j is scaled by weights[j-1] and summed into row group
// slot_group[j-1] (1-based).
struct PoolStackOp final : Op {
  int in;
  int groups;
  std::vector<int> slot_group;
  std::vector<JetBlock> w;
  PoolStackOp(int i, int g, std::vector<int> sg, std::vector<JetBlock> weights)
      : in(i), groups(g), slot_group(std::move(sg)), w(std::move(weights)) {}
  std::vector<int> inputs() const override { return {in}; }

  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& x = t.value(in);
    const int slots = 1 + static_cast<int>(w.size());
    if (x.batch % slots != 0) throw StructuralError("pool_stack: batch is not a multiple of the slot count");
    const int b = x.batch / slots;
    const Eigen::Index d = x.rows();
    const int n = (x.channels - 1) / 2;
    out = JetBlock(d * (1 + groups), b, x.channels);
    auto xs = [&](int c, int slot) { return x.data.middleCols((Eigen::Index(c) * slots + slot) * b, b).array(); };
    for (int c = 0; c < x.channels; ++c) out.ch(c).topRows(d) = x.data.middleCols(Eigen::Index(c) * slots * b, b);
    for (int j = 1; j < slots; ++j) {
      const JetBlock& f = w[static_cast<std::size_t>(j - 1)];
      if (f.rows() != 1 || f.batch != b || f.channels != x.channels)
        throw StructuralError("pool_stack: weight shape mismatch");
      const Eigen::Index r0 = d * slot_group[static_cast<std::size_t>(j - 1)];
      auto fv = f.ch(0).row(0).array();
      auto xv = xs(0, j);
      out.ch(0).middleRows(r0, d).array() += xv.rowwise() * fv;
      for (int i = 0; i < n; ++i) {
        auto f1 = f.ch(1 + i).row(0).array();
        auto f2 = f.ch(1 + n + i).row(0).array();
        auto x1 = xs(1 + i, j);
        auto x2 = xs(1 + n + i, j);
        out.ch(1 + i).middleRows(r0, d).array() += xv.rowwise() * f1 + x1.rowwise() * fv;
        out.ch(1 + n + i).middleRows(r0, d).array() += xv.rowwise() * f2 + 2.0 * (x1.rowwise() * f1) + x2.rowwise() * fv;
      }
    }
  }

  void backward(Tape& t, const JetBlock& g, std::span<double>) const override {
    const JetBlock& x = t.value(in);
    const int slots = 1 + static_cast<int>(w.size());
    const int b = x.batch / slots;
    const Eigen::Index d = x.rows();
    const int n = (x.channels - 1) / 2;
    JetBlock& gx = t.grad(in);
    auto gs = [&](int c, int slot) { return gx.data.middleCols((Eigen::Index(c) * slots + slot) * b, b).array(); };
    for (int c = 0; c < x.channels; ++c) gs(c, 0) += g.ch(c).topRows(d).array();
    for (int j = 1; j < slots; ++j) {
      const JetBlock& f = w[static_cast<std::size_t>(j - 1)];
      const Eigen::Index r0 = d * slot_group[static_cast<std::size_t>(j - 1)];
      auto fv = f.ch(0).row(0).array();
      auto g0 = g.ch(0).middleRows(r0, d).array();
      gs(0, j) += g0.rowwise() * fv;
      for (int i = 0; i < n; ++i) {
        auto f1 = f.ch(1 + i).row(0).array();
        auto f2 = f.ch(1 + n + i).row(0).array();
        auto g1 = g.ch(1 + i).middleRows(r0, d).array();
        auto g2 = g.ch(1 + n + i).middleRows(r0, d).array();
        gs(0, j) += g1.rowwise() * f1 + g2.rowwise() * f2;
        gs(1 + i, j) += g1.rowwise() * fv + 2.0 * (g2.rowwise() * f1);
        gs(1 + n + i, j) += g2.rowwise() * fv;
      }
    }
  }
};

struct AxisAffineOp final : Op {
  int in;
  AxisSlot s;
  AxisAffineOp(int i, AxisSlot slot) : in(i), s(slot) {}
  std::vector<int> inputs() const override { return {in}; }

  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& x = t.value(in);
    if (x.rows() % s.in_groups != 0) throw StructuralError("axis_affine: rows not divisible by group count");
    const Eigen::Index d = x.rows() / s.in_groups;
    Eigen::Map<const Matrix> w(t.params().data() + s.weight, s.out_groups, s.in_groups);
    const double* b = t.params().data() + s.bias;
    out = JetBlock(d * s.out_groups, x.batch, x.channels);
    for (int k = 0; k < s.out_groups; ++k) {
      auto o = out.data.middleRows(d * k, d);
      for (int j = 0; j < s.in_groups; ++j) o += w(k, j) * x.data.middleRows(d * j, d);
      out.ch(0).middleRows(d * k, d).array() += b[k];
    }
  }

  void backward(Tape& t, const JetBlock& g, std::span<double> gp) const override {
    const JetBlock& x = t.value(in);
    const Eigen::Index d = x.rows() / s.in_groups;
    Eigen::Map<const Matrix> w(t.params().data() + s.weight, s.out_groups, s.in_groups);
    Eigen::Map<Matrix> gw(gp.data() + s.weight, s.out_groups, s.in_groups);
    JetBlock& gx = t.grad(in);
    for (int k = 0; k < s.out_groups; ++k) {
      auto gk = g.data.middleRows(d * k, d);
      gp[s.bias + std::size_t(k)] += g.ch(0).middleRows(d * k, d).sum();
      for (int j = 0; j < s.in_groups; ++j) {
        gw(k, j) += gk.cwiseProduct(x.data.middleRows(d * j, d)).sum();
        gx.data.middleRows(d * j, d) += w(k, j) * gk;
      }
    }
  }
};

struct ScalarLossOp final : Op {
  int in;
  Tape::LossFn fn;
  JetBlock partials;
  ScalarLossOp(int i, Tape::LossFn f) : in(i), fn(std::move(f)) {}
  std::vector<int> inputs() const override { return {in}; }
  void forward(const Tape& t, JetBlock& out) override {
    const JetBlock& x = t.value(in);
    partials = JetBlock(x.rows(), x.batch, x.channels);
    out = JetBlock(1, 1, 1);
    out.data(0, 0) = fn(x, &partials);
  }
  void backward(Tape& t, const JetBlock& g, std::span<double>) const override {
    t.grad(in).data += g.data(0, 0) * partials.data;
  }
};

struct WeightedSumOp final : Op {
  std::vector<std::pair<int, double>> terms;
  explicit WeightedSumOp(std::vector<std::pair<int, double>> tt) : terms(std::move(tt)) {}
  std::vector<int> inputs() const override {
    std::vector<int> ids;
    for (auto& [id, w] : terms) ids.push_back(id);
    return ids;
  }
  void forward(const Tape& t, JetBlock& out) override {
    out = JetBlock(1, 1, 1);
    for (auto& [id, w] : terms) out.data(0, 0) += w * t.scalar(id);
  }
  void backward(Tape& t, const JetBlock& g, std::span<double>) const override {
    for (auto& [id, w] : terms) t.grad(id).data(0, 0) += w * g.data(0, 0);
  }
};

}  // namespace detail

inline int Tape::constant(JetBlock value) {
  if (value.channels != layout_.channels()) throw StructuralError("constant: channel count does not match tape layout");
  return push(std::make_unique<detail::ConstantOp>(std::move(value)));
}

inline int Tape::affine(int in, const DenseSlot& slot) {
  detail::check_slot(slot.end(), params_.size(), "affine");
  return push(std::make_unique<detail::AffineOp>(in, slot));
}

inline int Tape::tanh(int in) { return push(std::make_unique<detail::TanhOp>(in)); }

inline int Tape::scale_columns(int in, JetBlock factor) {
  return push(std::make_unique<detail::ScaleColumnsOp>(in, std::move(factor)));
}

inline int Tape::add_constant(int in, JetBlock offset) {
  return push(std::make_unique<detail::AddConstantOp>(in, std::move(offset)));
}

inline int Tape::pool_stack(int in, int groups, std::vector<int> slot_group, std::vector<JetBlock> weights) {
  if (slot_group.size() != weights.size()) throw StructuralError("pool_stack: one group index per weighted slot");
  for (int g : slot_group)
    if (g < 1 || g > groups) throw StructuralError("pool_stack: group index out of range");
  return push(std::make_unique<detail::PoolStackOp>(in, groups, std::move(slot_group), std::move(weights)));
}

inline int Tape::axis_affine(int in, const AxisSlot& slot) {
  detail::check_slot(slot.end(), params_.size(), "axis_affine");
  return push(std::make_unique<detail::AxisAffineOp>(in, slot));
}

inline int Tape::scalar_loss(int in, LossFn fn) {
  return push(std::make_unique<detail::ScalarLossOp>(in, std::move(fn)), true);
}

inline int Tape::weighted_sum(std::vector<std::pair<int, double>> terms) {
  for (auto& [id, w] : terms) {
    check(id);
    if (!is_scalar(id)) throw StructuralError("weighted_sum: term is not a scalar node");
  }
  return push(std::make_unique<detail::WeightedSumOp>(std::move(terms)), true);
}

/// Jets of the raw input coordinates (identity map): d/dc c = 1, all second derivatives 0.
/// `points` is coords x batch.
inline JetBlock coordinate_jets(const Matrix& points, const JetLayout& layout) {
  JetBlock j(points.rows(), static_cast<int>(points.cols()), layout.channels());
  j.ch(0) = points;
  for (int i = 0; i < layout.size(); ++i) {
    if (layout.coord(i) >= points.rows()) throw StructuralError("coordinate_jets: wanted coordinate out of range");
    j.ch(layout.d1(i)).row(layout.coord(i)).setOnes();
  }
  return j;
}

/// Unpack column `col` of a jet block into one Jet2 per row.
inline std::vector<Jet2> extract_jets(const JetBlock& b, const JetLayout& layout, int col) {
  std::vector<Jet2> out(static_cast<std::size_t>(b.rows()));
  for (Eigen::Index r = 0; r < b.rows(); ++r) {
    Jet2& j = out[static_cast<std::size_t>(r)];
    j.layout = layout;
    j.value = b.ch(0)(r, col);
    for (int i = 0; i < layout.size(); ++i) {
      j.first.push_back(b.ch(layout.d1(i))(r, col));
      j.second.push_back(b.ch(layout.d2(i))(r, col));
    }
  }
  return out;
}

/// Anything that can record itself on a tape for a batch of raw input points (coords x batch).
template <class Net>
concept TapeNetwork = requires(const Net& net, Tape& tape, const Matrix& pts) {
  { net.param_count() } -> std::convertible_to<std::size_t>;
  { net.input_dim() } -> std::convertible_to<int>;
  { net.record(tape, pts) } -> std::convertible_to<int>;
};

/// Network outputs with exact first and diagonal second derivatives along `wanted` raw coordinates.
template <TapeNetwork Net>
std::vector<Jet2> forward_jet(const Net& net, std::span<const double> params, std::span<const double> input,
                              const JetLayout& wanted) {
  if (params.size() != net.param_count())
    throw StructuralError("forward_jet: parameter vector length " + std::to_string(params.size()) +
                          " does not match architecture size " + std::to_string(net.param_count()));
  if (static_cast<int>(input.size()) != net.input_dim()) throw StructuralError("forward_jet: input dimension mismatch");
  Tape tape(params, wanted);
  Matrix pts = Eigen::Map<const Matrix>(input.data(), static_cast<Eigen::Index>(input.size()), 1);
  int out = net.record(tape, pts);
  return extract_jets(tape.value(out), wanted, 0);
}

}  // namespace neuralmd::ad
