#include "nucleus/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>

namespace nucleus {

namespace {

using RowMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

thread_local Tape* g_current_tape = nullptr;
thread_local int g_no_grad_depth = 0;

void check_finite(const char* op, std::span<const float> v) {
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw TensorError(op, "non-finite output at flat index " + std::to_string(i));
    }
  }
}

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (g_no_grad_depth > 0 || g_current_tape == nullptr) return false;
  for (const Tensor* t : inputs) {
    if (t->defined() && (t->requires_grad() || t->on_tape())) return true;
  }
  return false;
}

void record_op(const char* op, std::vector<std::shared_ptr<TensorStorage>> inputs,
               const Tensor& out, std::function<void()> backward) {
  out.storage()->on_tape = true;
  g_current_tape->record({op, std::move(inputs), out.storage(), std::move(backward)});
}

int normalize_axis(const char* op, int axis, int ndim) {
  if (axis < 0) axis += ndim;
  if (axis < 0 || axis >= ndim) {
    throw TensorError(op, "axis " + std::to_string(axis) + " out of range for rank " +
                              std::to_string(ndim));
  }
  return axis;
}

// Right-aligned broadcast plan: per-output-axis element strides into each
// input (0 where that input is stretched).
struct BcastPlan {
  Shape out_shape;
  std::vector<std::size_t> stride_a;
  std::vector<std::size_t> stride_b;
  std::size_t out_numel = 1;
};

BcastPlan make_bcast_plan(const char* op, const Shape& a, const Shape& b) {
  const int rank = std::max(a.size(), b.size());
  BcastPlan plan;
  plan.out_shape.resize(rank);
  std::vector<int> ea(rank, 1), eb(rank, 1);
  for (std::size_t i = 0; i < a.size(); ++i) ea[rank - a.size() + i] = a[i];
  for (std::size_t i = 0; i < b.size(); ++i) eb[rank - b.size() + i] = b[i];
  for (int d = 0; d < rank; ++d) {
    if (ea[d] != eb[d] && ea[d] != 1 && eb[d] != 1) {
      throw TensorError(op, "shape mismatch " + shape_str(a) + " vs " + shape_str(b));
    }
    plan.out_shape[d] = std::max(ea[d], eb[d]);
    plan.out_numel *= static_cast<std::size_t>(plan.out_shape[d]);
  }
  plan.stride_a.assign(rank, 0);
  plan.stride_b.assign(rank, 0);
  std::size_t sa = 1, sb = 1;
  for (int d = rank - 1; d >= 0; --d) {
    plan.stride_a[d] = (ea[d] == 1) ? 0 : sa;
    plan.stride_b[d] = (eb[d] == 1) ? 0 : sb;
    sa *= static_cast<std::size_t>(ea[d]);
    sb *= static_cast<std::size_t>(eb[d]);
  }
  return plan;
}

// Walks every output element of a broadcast pair, invoking f(out_i, a_i, b_i).
template <typename F>
void bcast_for_each(const BcastPlan& plan, F&& f) {
  const int rank = static_cast<int>(plan.out_shape.size());
  std::vector<int> coord(rank, 0);
  std::size_t ia = 0, ib = 0;
  for (std::size_t i = 0; i < plan.out_numel; ++i) {
    f(i, ia, ib);
    for (int d = rank - 1; d >= 0; --d) {
      ++coord[d];
      ia += plan.stride_a[d];
      ib += plan.stride_b[d];
      if (coord[d] < plan.out_shape[d]) break;
      coord[d] = 0;
      ia -= plan.stride_a[d] * plan.out_shape[d];
      ib -= plan.stride_b[d] * plan.out_shape[d];
    }
  }
}

// fwd(a, b) -> out; dfa/dfb give local partials for the backward pass.
template <typename Fwd, typename Dfa, typename Dfb>
Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, Fwd fwd, Dfa dfa,
                 Dfb dfb) {
  if (!a.defined() || !b.defined()) throw TensorError(op, "undefined operand");
  const auto av = a.values();
  const auto bv = b.values();
  Tensor out;
  bool same = a.shape() == b.shape();
  BcastPlan plan;
  if (same) {
    out = Tensor::zeros(a.shape());
    auto ov = out.values_mut();
    for (std::size_t i = 0; i < av.size(); ++i) ov[i] = fwd(av[i], bv[i]);
  } else {
    plan = make_bcast_plan(op, a.shape(), b.shape());
    out = Tensor::zeros(plan.out_shape);
    auto ov = out.values_mut();
    bcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
      ov[i] = fwd(av[ia], bv[ib]);
    });
  }
  check_finite(op, out.values());

  if (should_record({&a, &b})) {
    auto sa = a.storage();
    auto sb = b.storage();
    auto so = out.storage();
    bool need_a = a.requires_grad() || a.on_tape();
    bool need_b = b.requires_grad() || b.on_tape();
    record_op(op, {sa, sb}, out, [=]() {
      const auto& gy = so->grad;
      if (need_a) sa->ensure_grad();
      if (need_b) sb->ensure_grad();
      if (same) {
        for (std::size_t i = 0; i < gy.size(); ++i) {
          if (need_a) sa->grad[i] += gy[i] * dfa(sa->values[i], sb->values[i]);
          if (need_b) sb->grad[i] += gy[i] * dfb(sa->values[i], sb->values[i]);
        }
      } else {
        bcast_for_each(plan, [&](std::size_t i, std::size_t ia, std::size_t ib) {
          if (need_a) sa->grad[ia] += gy[i] * dfa(sa->values[ia], sb->values[ib]);
          if (need_b) sb->grad[ib] += gy[i] * dfb(sa->values[ia], sb->values[ib]);
        });
      }
    });
  }
  return out;
}

template <typename Fwd, typename Dfx>
Tensor unary_op(const char* op, const Tensor& x, Fwd fwd, Dfx dfx) {
  if (!x.defined()) throw TensorError(op, "undefined operand");
  const auto xv = x.values();
  Tensor out = Tensor::zeros(x.shape());
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < xv.size(); ++i) ov[i] = fwd(xv[i]);
  check_finite(op, out.values());

  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op(op, {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t i = 0; i < so->grad.size(); ++i) {
        sx->grad[i] += so->grad[i] * dfx(sx->values[i], so->values[i]);
      }
    });
  }
  return out;
}

// Iteration geometry for reductions over a single axis.
struct AxisGeom {
  std::size_t outer = 1, extent = 1, inner = 1;
  Shape reduced_shape;
};

AxisGeom axis_geom(const Shape& shape, int axis) {
  AxisGeom g;
  for (int d = 0; d < static_cast<int>(shape.size()); ++d) {
    if (d < axis) g.outer *= shape[d];
    else if (d == axis) g.extent = shape[d];
    else g.inner *= shape[d];
    if (d != axis) g.reduced_shape.push_back(shape[d]);
  }
  return g;
}

}  // namespace

// ---- shape helpers ----------------------------------------------------------

std::string shape_str(const Shape& s) {
  std::string r = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) r += ",";
    r += std::to_string(s[i]);
  }
  return r + "]";
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (int d : s) n *= static_cast<std::size_t>(d);
  return n;
}

// ---- Tensor -----------------------------------------------------------------

Tensor::Tensor(Shape shape, float fill) {
  for (int d : shape) {
    if (d <= 0) throw TensorError("tensor", "non-positive extent in shape " + shape_str(shape));
  }
  s_ = std::make_shared<TensorStorage>();
  s_->shape = std::move(shape);
  s_->values.assign(shape_numel(s_->shape), fill);
}

Tensor::Tensor(Shape shape, std::vector<float> values) {
  for (int d : shape) {
    if (d <= 0) throw TensorError("tensor", "non-positive extent in shape " + shape_str(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw TensorError("tensor", "shape " + shape_str(shape) + " expects " +
                                     std::to_string(shape_numel(shape)) + " values, got " +
                                     std::to_string(values.size()));
  }
  s_ = std::make_shared<TensorStorage>();
  s_->shape = std::move(shape);
  s_->values = std::move(values);
}

int Tensor::dim(int i) const {
  int nd = ndim();
  if (i < 0) i += nd;
  if (i < 0 || i >= nd) throw TensorError("tensor", "dim index out of range");
  return s_->shape[i];
}

float Tensor::item() const {
  if (!defined() || numel() != 1) {
    throw TensorError("item", "expected a scalar tensor, got shape " +
                                  (defined() ? shape_str(shape()) : std::string("<undefined>")));
  }
  return s_->values[0];
}

float Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim()) throw TensorError("at", "rank mismatch");
  std::size_t flat = 0;
  int d = 0;
  for (int i : idx) {
    if (i < 0 || i >= s_->shape[d]) throw TensorError("at", "index out of range");
    flat = flat * static_cast<std::size_t>(s_->shape[d]) + static_cast<std::size_t>(i);
    ++d;
  }
  return s_->values[flat];
}

Tensor& Tensor::set_requires_grad(bool b) {
  s_->requires_grad = b;
  return *this;
}

std::span<const float> Tensor::grad() const {
  return {s_->grad.data(), s_->grad.size()};
}

std::span<float> Tensor::grad_mut() {
  s_->ensure_grad();
  return {s_->grad.data(), s_->grad.size()};
}

void Tensor::zero_grad() {
  s_->ensure_grad();
  std::fill(s_->grad.begin(), s_->grad.end(), 0.0f);
}

Tensor Tensor::detach() const {
  Tensor t;
  t.s_ = std::make_shared<TensorStorage>();
  t.s_->shape = s_->shape;
  t.s_->values = s_->values;
  return t;
}

// ---- Tape -------------------------------------------------------------------

Tape::Tape() {
  prev_ = g_current_tape;
  g_current_tape = this;
}

Tape::~Tape() { g_current_tape = prev_; }

Tape* Tape::current() { return g_current_tape; }

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw TensorError("backward", "loss must be scalar, got shape " +
                                      (loss.defined() ? shape_str(loss.shape())
                                                      : std::string("<undefined>")));
  }
  if (!loss.storage()->on_tape) {
    throw TensorError("backward", "loss is detached: no recorded primitive produced it");
  }
  // Intermediate grads reset every sweep; leaf grads accumulate across sweeps.
  for (auto& e : entries_) {
    e.output->ensure_grad();
    std::fill(e.output->grad.begin(), e.output->grad.end(), 0.0f);
  }
  loss.storage()->grad[0] = 1.0f;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->backward();
  }
}

void backward(const Tensor& loss) {
  if (Tape::current() == nullptr) {
    throw TensorError("backward", "no active tape");
  }
  Tape::current()->backward(loss);
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool NoGradGuard::active() { return g_no_grad_depth > 0; }

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](float x, float y) { return x + y; },
      [](float, float) { return 1.0f; }, [](float, float) { return 1.0f; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](float x, float y) { return x - y; },
      [](float, float) { return 1.0f; }, [](float, float) { return -1.0f; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](float x, float y) { return x * y; },
      [](float, float y) { return y; }, [](float x, float) { return x; });
}

Tensor divide(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](float x, float y) { return x / y; },
      [](float, float y) { return 1.0f / y; },
      [](float x, float y) { return -x / (y * y); });
}

Tensor add(const Tensor& a, float b) { return add(a, Tensor::scalar(b)); }
Tensor sub(const Tensor& a, float b) { return sub(a, Tensor::scalar(b)); }
Tensor mul(const Tensor& a, float b) { return mul(a, Tensor::scalar(b)); }

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](float v) { return std::exp(v); },
      [](float, float y) { return y; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](float v) { return std::log(v); },
      [](float v, float) { return 1.0f / v; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](float v) { return std::fabs(v); },
      [](float v, float) { return v > 0.0f ? 1.0f : (v < 0.0f ? -1.0f : 0.0f); });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](float v) { return std::sqrt(v); },
      [](float, float y) { return 0.5f / y; });
}

namespace {
constexpr float kInvSqrt2 = 0.70710678118654752440f;
constexpr float kInvSqrt2Pi = 0.39894228040143267794f;
}  // namespace

Tensor gelu(const Tensor& x) {
  return unary_op(
      "gelu", x,
      [](float v) { return 0.5f * v * (1.0f + std::erf(v * kInvSqrt2)); },
      [](float v, float) {
        float cdf = 0.5f * (1.0f + std::erf(v * kInvSqrt2));
        float pdf = kInvSqrt2Pi * std::exp(-0.5f * v * v);
        return cdf + v * pdf;
      });
}

// ---- structural -------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2 || a.dim(1) != b.dim(0)) {
    throw TensorError("matmul", "shape mismatch " + shape_str(a.shape()) + " vs " +
                                    shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), n = b.dim(1);
  Tensor out = Tensor::zeros({m, n});
  {
    ConstMatMap A(a.values().data(), m, k);
    ConstMatMap B(b.values().data(), k, n);
    MatMap C(out.values_mut().data(), m, n);
    C.noalias() = A * B;
  }
  check_finite("matmul", out.values());

  if (should_record({&a, &b})) {
    auto sa = a.storage();
    auto sb = b.storage();
    auto so = out.storage();
    bool need_a = a.requires_grad() || a.on_tape();
    bool need_b = b.requires_grad() || b.on_tape();
    record_op("matmul", {sa, sb}, out, [=]() {
      ConstMatMap A(sa->values.data(), m, k);
      ConstMatMap B(sb->values.data(), k, n);
      ConstMatMap dC(so->grad.data(), m, n);
      if (need_a) {
        sa->ensure_grad();
        MatMap dA(sa->grad.data(), m, k);
        dA.noalias() += dC * B.transpose();
      }
      if (need_b) {
        sb->ensure_grad();
        MatMap dB(sb->grad.data(), k, n);
        dB.noalias() += A.transpose() * dC;
      }
    });
  }
  return out;
}

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const int rank = x.ndim();
  if (static_cast<int>(axes.size()) != rank) {
    throw TensorError("permute", "axes rank mismatch for shape " + shape_str(x.shape()));
  }
  std::vector<bool> seen(rank, false);
  Shape out_shape(rank);
  for (int d = 0; d < rank; ++d) {
    if (axes[d] < 0 || axes[d] >= rank || seen[axes[d]]) {
      throw TensorError("permute", "invalid axis permutation");
    }
    seen[axes[d]] = true;
    out_shape[d] = x.dim(axes[d]);
  }
  // out[c0,..] = in[c_axes], computed via a flat map out_index -> in_index.
  std::vector<std::size_t> in_strides(rank, 1);
  for (int d = rank - 2; d >= 0; --d) {
    in_strides[d] = in_strides[d + 1] * static_cast<std::size_t>(x.dim(d + 1));
  }
  std::vector<std::size_t> strides_for_out(rank);
  for (int d = 0; d < rank; ++d) strides_for_out[d] = in_strides[axes[d]];

  Tensor out = Tensor::zeros(out_shape);
  const auto xv = x.values();
  auto ov = out.values_mut();
  std::vector<int> coord(rank, 0);
  std::size_t ii = 0;
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = xv[ii];
    for (int d = rank - 1; d >= 0; --d) {
      ++coord[d];
      ii += strides_for_out[d];
      if (coord[d] < out_shape[d]) break;
      coord[d] = 0;
      ii -= strides_for_out[d] * static_cast<std::size_t>(out_shape[d]);
    }
  }

  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op("permute", {sx}, out, [=]() {
      sx->ensure_grad();
      std::vector<int> c(rank, 0);
      std::size_t src = 0;
      for (std::size_t i = 0; i < so->grad.size(); ++i) {
        sx->grad[src] += so->grad[i];
        for (int d = rank - 1; d >= 0; --d) {
          ++c[d];
          src += strides_for_out[d];
          if (c[d] < out_shape[d]) break;
          c[d] = 0;
          src -= strides_for_out[d] * static_cast<std::size_t>(out_shape[d]);
        }
      }
    });
  }
  return out;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw TensorError("reshape", "cannot reshape " + shape_str(x.shape()) + " to " +
                                     shape_str(shape));
  }
  Tensor out(shape, std::vector<float>(x.values().begin(), x.values().end()));
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op("reshape", {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t i = 0; i < so->grad.size(); ++i) sx->grad[i] += so->grad[i];
    });
  }
  return out;
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& idx) {
  if (x.ndim() != 2) throw TensorError("gather_rows", "expected 2-D input, got " + shape_str(x.shape()));
  const int rows = x.dim(0), cols = x.dim(1);
  for (int i : idx) {
    if (i < 0 || i >= rows) throw TensorError("gather_rows", "row index out of range");
  }
  Tensor out = Tensor::zeros({static_cast<int>(idx.size()), cols});
  const auto xv = x.values();
  auto ov = out.values_mut();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    std::memcpy(ov.data() + r * cols, xv.data() + static_cast<std::size_t>(idx[r]) * cols,
                sizeof(float) * static_cast<std::size_t>(cols));
  }
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    auto indices = idx;
    record_op("gather_rows", {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t r = 0; r < indices.size(); ++r) {
        float* dst = sx->grad.data() + static_cast<std::size_t>(indices[r]) * cols;
        const float* src = so->grad.data() + r * cols;
        for (int c = 0; c < cols; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor scatter_add_rows(const Tensor& values, const std::vector<int>& idx, int rows) {
  if (values.ndim() != 2) {
    throw TensorError("scatter_add_rows", "expected 2-D input, got " + shape_str(values.shape()));
  }
  if (static_cast<int>(idx.size()) != values.dim(0)) {
    throw TensorError("scatter_add_rows", "index count does not match value rows");
  }
  const int cols = values.dim(1);
  for (int i : idx) {
    if (i < 0 || i >= rows) throw TensorError("scatter_add_rows", "row index out of range");
  }
  Tensor out = Tensor::zeros({rows, cols});
  const auto vv = values.values();
  auto ov = out.values_mut();
  for (std::size_t r = 0; r < idx.size(); ++r) {
    float* dst = ov.data() + static_cast<std::size_t>(idx[r]) * cols;
    const float* src = vv.data() + r * cols;
    for (int c = 0; c < cols; ++c) dst[c] += src[c];
  }
  check_finite("scatter_add_rows", out.values());
  if (should_record({&values})) {
    auto sv = values.storage();
    auto so = out.storage();
    auto indices = idx;
    record_op("scatter_add_rows", {sv}, out, [=]() {
      sv->ensure_grad();
      for (std::size_t r = 0; r < indices.size(); ++r) {
        float* dst = sv->grad.data() + r * cols;
        const float* src = so->grad.data() + static_cast<std::size_t>(indices[r]) * cols;
        for (int c = 0; c < cols; ++c) dst[c] += src[c];
      }
    });
  }
  return out;
}

Tensor gather_elems(const Tensor& x, const std::vector<int>& flat_idx, Shape out_shape) {
  if (shape_numel(out_shape) != flat_idx.size()) {
    throw TensorError("gather_elems", "out shape does not match index count");
  }
  const std::size_t n = x.numel();
  for (int i : flat_idx) {
    if (i < 0 || static_cast<std::size_t>(i) >= n) {
      throw TensorError("gather_elems", "flat index out of range");
    }
  }
  Tensor out = Tensor::zeros(out_shape);
  const auto xv = x.values();
  auto ov = out.values_mut();
  for (std::size_t i = 0; i < flat_idx.size(); ++i) ov[i] = xv[flat_idx[i]];
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    auto indices = flat_idx;
    record_op("gather_elems", {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t i = 0; i < indices.size(); ++i) {
        sx->grad[indices[i]] += so->grad[i];
      }
    });
  }
  return out;
}

// ---- reductions -------------------------------------------------------------

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc));
  check_finite("sum", out.values());
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op("sum", {sx}, out, [=]() {
      sx->ensure_grad();
      const float g = so->grad[0];
      for (auto& gv : sx->grad) gv += g;
    });
  }
  return out;
}

Tensor mean(const Tensor& x) {
  const float inv = 1.0f / static_cast<float>(x.numel());
  double acc = 0.0;
  for (float v : x.values()) acc += v;
  Tensor out = Tensor::scalar(static_cast<float>(acc * inv));
  check_finite("mean", out.values());
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op("mean", {sx}, out, [=]() {
      sx->ensure_grad();
      const float g = so->grad[0] * inv;
      for (auto& gv : sx->grad) gv += g;
    });
  }
  return out;
}

namespace {

template <bool kMean>
Tensor axis_reduce(const char* op, const Tensor& x, int axis) {
  axis = normalize_axis(op, axis, x.ndim());
  AxisGeom g = axis_geom(x.shape(), axis);
  Tensor out = g.reduced_shape.empty() ? Tensor::scalar(0.0f) : Tensor::zeros(g.reduced_shape);
  const auto xv = x.values();
  auto ov = out.values_mut();
  const float inv = kMean ? 1.0f / static_cast<float>(g.extent) : 1.0f;
  for (std::size_t o = 0; o < g.outer; ++o) {
    for (std::size_t r = 0; r < g.inner; ++r) {
      double acc = 0.0;
      for (std::size_t k = 0; k < g.extent; ++k) {
        acc += xv[(o * g.extent + k) * g.inner + r];
      }
      ov[o * g.inner + r] = static_cast<float>(acc) * inv;
    }
  }
  check_finite(op, out.values());
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op(op, {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t o = 0; o < g.outer; ++o) {
        for (std::size_t r = 0; r < g.inner; ++r) {
          const float gy = so->grad[o * g.inner + r] * inv;
          for (std::size_t k = 0; k < g.extent; ++k) {
            sx->grad[(o * g.extent + k) * g.inner + r] += gy;
          }
        }
      }
    });
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x, int axis) { return axis_reduce<false>("sum_axis", x, axis); }
Tensor mean(const Tensor& x, int axis) { return axis_reduce<true>("mean_axis", x, axis); }

Tensor max_axis(const Tensor& x, int axis, std::vector<int>* argmax) {
  axis = normalize_axis("max_axis", axis, x.ndim());
  AxisGeom g = axis_geom(x.shape(), axis);
  Tensor out = g.reduced_shape.empty() ? Tensor::scalar(0.0f) : Tensor::zeros(g.reduced_shape);
  const auto xv = x.values();
  auto ov = out.values_mut();
  auto arg = std::make_shared<std::vector<int>>(g.outer * g.inner, 0);
  for (std::size_t o = 0; o < g.outer; ++o) {
    for (std::size_t r = 0; r < g.inner; ++r) {
      float best = xv[o * g.extent * g.inner + r];
      int best_k = 0;
      for (std::size_t k = 1; k < g.extent; ++k) {
        float v = xv[(o * g.extent + k) * g.inner + r];
        if (v > best) {
          best = v;
          best_k = static_cast<int>(k);
        }
      }
      ov[o * g.inner + r] = best;
      (*arg)[o * g.inner + r] = best_k;
    }
  }
  if (argmax) *argmax = *arg;
  check_finite("max_axis", out.values());
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op("max_axis", {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t o = 0; o < g.outer; ++o) {
        for (std::size_t r = 0; r < g.inner; ++r) {
          const int k = (*arg)[o * g.inner + r];
          sx->grad[(o * g.extent + static_cast<std::size_t>(k)) * g.inner + r] +=
              so->grad[o * g.inner + r];
        }
      }
    });
  }
  return out;
}

// ---- normalization ----------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  if (x.ndim() < 1) throw TensorError("softmax", "rank-0 input");
  axis = normalize_axis("softmax", axis, x.ndim());
  AxisGeom g = axis_geom(x.shape(), axis);
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values_mut();
  for (std::size_t o = 0; o < g.outer; ++o) {
    for (std::size_t r = 0; r < g.inner; ++r) {
      float mx = xv[o * g.extent * g.inner + r];
      for (std::size_t k = 1; k < g.extent; ++k) {
        mx = std::max(mx, xv[(o * g.extent + k) * g.inner + r]);
      }
      double denom = 0.0;
      for (std::size_t k = 0; k < g.extent; ++k) {
        const std::size_t i = (o * g.extent + k) * g.inner + r;
        const float e = std::exp(xv[i] - mx);
        ov[i] = e;
        denom += e;
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (std::size_t k = 0; k < g.extent; ++k) {
        ov[(o * g.extent + k) * g.inner + r] *= inv;
      }
    }
  }
  check_finite("softmax", out.values());
  if (should_record({&x})) {
    auto sx = x.storage();
    auto so = out.storage();
    record_op("softmax", {sx}, out, [=]() {
      sx->ensure_grad();
      for (std::size_t o = 0; o < g.outer; ++o) {
        for (std::size_t r = 0; r < g.inner; ++r) {
          double dot = 0.0;
          for (std::size_t k = 0; k < g.extent; ++k) {
            const std::size_t i = (o * g.extent + k) * g.inner + r;
            dot += static_cast<double>(so->grad[i]) * so->values[i];
          }
          for (std::size_t k = 0; k < g.extent; ++k) {
            const std::size_t i = (o * g.extent + k) * g.inner + r;
            sx->grad[i] += so->values[i] * (so->grad[i] - static_cast<float>(dot));
          }
        }
      }
    });
  }
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  if (x.ndim() < 1) throw TensorError("layer_norm", "rank-0 input");
  const int c = x.dim(-1);
  if (gamma.ndim() != 1 || beta.ndim() != 1 || gamma.dim(0) != c || beta.dim(0) != c) {
    throw TensorError("layer_norm", "scale/shift must be [" + std::to_string(c) + "], got " +
                                        shape_str(gamma.shape()) + " and " +
                                        shape_str(beta.shape()));
  }
  const std::size_t rows = x.numel() / static_cast<std::size_t>(c);
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  auto ov = out.values_mut();
  auto xhat = std::make_shared<std::vector<float>>(x.numel());
  auto inv_std = std::make_shared<std::vector<float>>(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const float* row = xv.data() + r * c;
    double m = 0.0;
    for (int j = 0; j < c; ++j) m += row[j];
    m /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = row[j] - m;
      var += d * d;
    }
    var /= c;
    const float inv = 1.0f / std::sqrt(static_cast<float>(var) + eps);
    (*inv_std)[r] = inv;
    for (int j = 0; j < c; ++j) {
      const float xh = (row[j] - static_cast<float>(m)) * inv;
      (*xhat)[r * c + j] = xh;
      ov[r * c + j] = xh * gv[j] + bv[j];
    }
  }
  check_finite("layer_norm", out.values());
  if (should_record({&x, &gamma, &beta})) {
    auto sx = x.storage();
    auto sg = gamma.storage();
    auto sb = beta.storage();
    auto so = out.storage();
    bool need_x = x.requires_grad() || x.on_tape();
    bool need_g = gamma.requires_grad() || gamma.on_tape();
    bool need_b = beta.requires_grad() || beta.on_tape();
    record_op("layer_norm", {sx, sg, sb}, out, [=]() {
      if (need_x) sx->ensure_grad();
      if (need_g) sg->ensure_grad();
      if (need_b) sb->ensure_grad();
      for (std::size_t r = 0; r < rows; ++r) {
        const float* gy = so->grad.data() + r * c;
        const float* xh = xhat->data() + r * c;
        if (need_g || need_b) {
          for (int j = 0; j < c; ++j) {
            if (need_g) sg->grad[j] += gy[j] * xh[j];
            if (need_b) sb->grad[j] += gy[j];
          }
        }
        if (need_x) {
          double s1 = 0.0, s2 = 0.0;
          for (int j = 0; j < c; ++j) {
            const double dg = static_cast<double>(gy[j]) * sg->values[j];
            s1 += dg;
            s2 += dg * xh[j];
          }
          s1 /= c;
          s2 /= c;
          const float inv = (*inv_std)[r];
          for (int j = 0; j < c; ++j) {
            const float dg = gy[j] * sg->values[j];
            sx->grad[r * c + j] +=
                inv * (dg - static_cast<float>(s1) - xh[j] * static_cast<float>(s2));
          }
        }
      }
    });
  }
  return out;
}

// ---- attention cores ---------------------------------------------------------

Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, float scale) {
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw TensorError("attention_core", "q/k/v must share a [B,L,D] shape, got " +
                                            shape_str(q.shape()) + ", " + shape_str(k.shape()) +
                                            ", " + shape_str(v.shape()));
  }
  const int b = q.dim(0), l = q.dim(1), d = q.dim(2);
  Tensor out = Tensor::zeros(q.shape());
  const bool rec = should_record({&q, &k, &v});
  auto probs = std::make_shared<std::vector<float>>();
  if (rec) probs->resize(static_cast<std::size_t>(b) * l * l);
  std::vector<float> local;
  if (!rec) local.resize(static_cast<std::size_t>(l) * l);

  const auto qv = q.values();
  const auto kv = k.values();
  const auto vv = v.values();
  auto ov = out.values_mut();
  for (int bi = 0; bi < b; ++bi) {
    const std::size_t off = static_cast<std::size_t>(bi) * l * d;
    ConstMatMap Q(qv.data() + off, l, d);
    ConstMatMap K(kv.data() + off, l, d);
    ConstMatMap V(vv.data() + off, l, d);
    float* pbuf = rec ? probs->data() + static_cast<std::size_t>(bi) * l * l : local.data();
    MatMap A(pbuf, l, l);
    A.noalias() = Q * K.transpose();
    A *= scale;
    for (int i = 0; i < l; ++i) {
      float mx = A.row(i).maxCoeff();
      double denom = 0.0;
      for (int j = 0; j < l; ++j) {
        const float e = std::exp(A(i, j) - mx);
        A(i, j) = e;
        denom += e;
      }
      A.row(i) *= static_cast<float>(1.0 / denom);
    }
    MatMap O(ov.data() + off, l, d);
    O.noalias() = A * V;
  }
  check_finite("attention_core", out.values());

  if (rec) {
    auto sq = q.storage();
    auto sk = k.storage();
    auto sv = v.storage();
    auto so = out.storage();
    record_op("attention_core", {sq, sk, sv}, out, [=]() {
      sq->ensure_grad();
      sk->ensure_grad();
      sv->ensure_grad();
      for (int bi = 0; bi < b; ++bi) {
        const std::size_t off = static_cast<std::size_t>(bi) * l * d;
        ConstMatMap Q(sq->values.data() + off, l, d);
        ConstMatMap K(sk->values.data() + off, l, d);
        ConstMatMap V(sv->values.data() + off, l, d);
        ConstMatMap A(probs->data() + static_cast<std::size_t>(bi) * l * l, l, l);
        ConstMatMap dO(so->grad.data() + off, l, d);
        MatMap dV(sv->grad.data() + off, l, d);
        dV.noalias() += A.transpose() * dO;
        RowMat dA = dO * V.transpose();          // [l,l]
        RowMat dS(l, l);
        for (int i = 0; i < l; ++i) {
          const double dot = (dA.row(i).cast<double>().array() *
                              A.row(i).cast<double>().array())
                                 .sum();
          dS.row(i) = A.row(i).array() * (dA.row(i).array() - static_cast<float>(dot));
        }
        MatMap dQ(sq->grad.data() + off, l, d);
        MatMap dK(sk->grad.data() + off, l, d);
        dQ.noalias() += scale * (dS * K);
        dK.noalias() += scale * (dS.transpose() * Q);
      }
    });
  }
  return out;
}

Tensor neighborhood_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor& bias, int hp, int wp, int radius,
                                   float scale) {
  if (radius < 0) throw TensorError("neighborhood_attention_core", "radius must be >= 0");
  if (q.ndim() != 3 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw TensorError("neighborhood_attention_core",
                      "q/k/v must share a [H,N,D] shape, got " + shape_str(q.shape()) + ", " +
                          shape_str(k.shape()) + ", " + shape_str(v.shape()));
  }
  const int heads = q.dim(0), n = q.dim(1), d = q.dim(2);
  if (n != hp * wp) {
    throw TensorError("neighborhood_attention_core",
                      "token count " + std::to_string(n) + " != " + std::to_string(hp) + "x" +
                          std::to_string(wp));
  }
  const int win = 2 * radius + 1;
  if (bias.ndim() != 2 || bias.dim(0) != heads || bias.dim(1) != win * win) {
    throw TensorError("neighborhood_attention_core",
                      "bias must be [" + std::to_string(heads) + "," +
                          std::to_string(win * win) + "], got " + shape_str(bias.shape()));
  }

  Tensor out = Tensor::zeros(q.shape());
  const auto qv = q.values();
  const auto kv = k.values();
  const auto vv = v.values();
  const auto bvv = bias.values();
  auto ov = out.values_mut();

  // Shared per-query pass used by forward and (recomputed) backward.
  auto for_each_window = [&](auto&& body) {
    std::vector<float> logits(static_cast<std::size_t>(win) * win);
    std::vector<int> keys(static_cast<std::size_t>(win) * win);
    std::vector<int> offs(static_cast<std::size_t>(win) * win);
    for (int h = 0; h < heads; ++h) {
      const std::size_t hoff = static_cast<std::size_t>(h) * n * d;
      for (int i = 0; i < hp; ++i) {
        for (int j = 0; j < wp; ++j) {
          const int t = i * wp + j;
          int m = 0;
          for (int di = -radius; di <= radius; ++di) {
            const int ii = i + di;
            if (ii < 0 || ii >= hp) continue;
            for (int dj = -radius; dj <= radius; ++dj) {
              const int jj = j + dj;
              if (jj < 0 || jj >= wp) continue;
              keys[m] = ii * wp + jj;
              offs[m] = (di + radius) * win + (dj + radius);
              ++m;
            }
          }
          const float* qrow = qv.data() + hoff + static_cast<std::size_t>(t) * d;
          float mx = -std::numeric_limits<float>::infinity();
          for (int s = 0; s < m; ++s) {
            const float* krow = kv.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
            float dot = 0.0f;
            for (int c = 0; c < d; ++c) dot += qrow[c] * krow[c];
            logits[s] = dot * scale + bvv[static_cast<std::size_t>(h) * win * win + offs[s]];
            mx = std::max(mx, logits[s]);
          }
          double denom = 0.0;
          for (int s = 0; s < m; ++s) {
            logits[s] = std::exp(logits[s] - mx);
            denom += logits[s];
          }
          const float inv = static_cast<float>(1.0 / denom);
          for (int s = 0; s < m; ++s) logits[s] *= inv;  // now probabilities
          body(h, t, m, keys.data(), offs.data(), logits.data());
        }
      }
    }
  };

  for_each_window([&](int h, int t, int m, const int* keys, const int*, const float* probs) {
    const std::size_t hoff = static_cast<std::size_t>(h) * n * d;
    float* orow = ov.data() + hoff + static_cast<std::size_t>(t) * d;
    for (int s = 0; s < m; ++s) {
      const float* vrow = vv.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
      const float p = probs[s];
      for (int c = 0; c < d; ++c) orow[c] += p * vrow[c];
    }
  });
  check_finite("neighborhood_attention_core", out.values());

  if (should_record({&q, &k, &v, &bias})) {
    auto sq = q.storage();
    auto sk = k.storage();
    auto sv = v.storage();
    auto sb = bias.storage();
    auto so = out.storage();
    // Probabilities are recomputed in the backward pass instead of saved:
    // N * win^2 per head per layer adds up quickly on larger grids.
    record_op("neighborhood_attention_core", {sq, sk, sv, sb}, out, [=]() {
      sq->ensure_grad();
      sk->ensure_grad();
      sv->ensure_grad();
      sb->ensure_grad();
      std::vector<float> logits(static_cast<std::size_t>(win) * win);
      std::vector<float> dprob(static_cast<std::size_t>(win) * win);
      std::vector<int> keys(static_cast<std::size_t>(win) * win);
      std::vector<int> offs(static_cast<std::size_t>(win) * win);
      for (int h = 0; h < heads; ++h) {
        const std::size_t hoff = static_cast<std::size_t>(h) * n * d;
        for (int i = 0; i < hp; ++i) {
          for (int j = 0; j < wp; ++j) {
            const int t = i * wp + j;
            int m = 0;
            for (int di = -radius; di <= radius; ++di) {
              const int ii = i + di;
              if (ii < 0 || ii >= hp) continue;
              for (int dj = -radius; dj <= radius; ++dj) {
                const int jj = j + dj;
                if (jj < 0 || jj >= wp) continue;
                keys[m] = ii * wp + jj;
                offs[m] = (di + radius) * win + (dj + radius);
                ++m;
              }
            }
            const float* qrow = sq->values.data() + hoff + static_cast<std::size_t>(t) * d;
            float mx = -std::numeric_limits<float>::infinity();
            for (int s = 0; s < m; ++s) {
              const float* krow = sk->values.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
              float dot = 0.0f;
              for (int c = 0; c < d; ++c) dot += qrow[c] * krow[c];
              logits[s] =
                  dot * scale + sb->values[static_cast<std::size_t>(h) * win * win + offs[s]];
              mx = std::max(mx, logits[s]);
            }
            double denom = 0.0;
            for (int s = 0; s < m; ++s) {
              logits[s] = std::exp(logits[s] - mx);
              denom += logits[s];
            }
            const float inv = static_cast<float>(1.0 / denom);
            for (int s = 0; s < m; ++s) logits[s] *= inv;

            const float* gyrow = so->grad.data() + hoff + static_cast<std::size_t>(t) * d;
            double dot_ap = 0.0;
            for (int s = 0; s < m; ++s) {
              const float* vrow = sv->values.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
              float da = 0.0f;
              for (int c = 0; c < d; ++c) da += gyrow[c] * vrow[c];
              dprob[s] = da;
              dot_ap += static_cast<double>(da) * logits[s];
            }
            for (int s = 0; s < m; ++s) {
              const float p = logits[s];
              const float ds = p * (dprob[s] - static_cast<float>(dot_ap));
              const float* krow = sk->values.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
              float* dq = sq->grad.data() + hoff + static_cast<std::size_t>(t) * d;
              float* dk = sk->grad.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
              float* dv = sv->grad.data() + hoff + static_cast<std::size_t>(keys[s]) * d;
              for (int c = 0; c < d; ++c) {
                dq[c] += scale * ds * krow[c];
                dk[c] += scale * ds * qrow[c];
                dv[c] += p * gyrow[c];
              }
              sb->grad[static_cast<std::size_t>(h) * win * win + offs[s]] += ds;
            }
          }
        }
      }
    });
  }
  return out;
}

// ---- rng ---------------------------------------------------------------------

Rng::Rng(std::uint64_t seed) : state_(seed ^ 0x9E3779B97F4A7C15ULL) {
  // burn-in so nearby seeds decorrelate
  next_u64();
  next_u64();
}

std::uint64_t Rng::next_u64() {
  state_ += 0x9E3779B97F4A7C15ULL;
  std::uint64_t z = state_;
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

float Rng::uniform() {
  return static_cast<float>(next_u64() >> 40) * (1.0f / 16777216.0f);
}

float Rng::uniform(float a, float b) { return a + (b - a) * uniform(); }

float Rng::normal() {
  if (has_cached_) {
    has_cached_ = false;
    return cached_normal_;
  }
  const float u1 = 1.0f - uniform();  // (0, 1]
  const float u2 = uniform();
  const float r = std::sqrt(-2.0f * std::log(u1));
  const float theta = 6.28318530717958647692f * u2;
  cached_normal_ = r * std::sin(theta);
  has_cached_ = true;
  return r * std::cos(theta);
}

int Rng::uniform_int(int n) {
  return static_cast<int>(next_u64() % static_cast<std::uint64_t>(n));
}

Tensor randn(Shape shape, Rng& rng, float stddev) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values_mut()) v = rng.normal() * stddev;
  return t;
}

// ---- grad_check ---------------------------------------------------------------

GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor& x,
                           double h, int max_coords, std::uint64_t seed) {
  if (h <= 0.0) throw TensorError("grad_check", "step must be positive");

  {  // determinism probe: two evaluations must agree bitwise
    NoGradGuard ng;
    const float f1 = fn(x).item();
    const float f2 = fn(x).item();
    if (std::memcmp(&f1, &f2, sizeof(float)) != 0) {
      throw TensorError("grad_check", "non-deterministic function: forward passes disagree");
    }
  }

  const bool was_rg = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  {
    Tape tape;
    Tensor loss = fn(x);
    if (loss.numel() != 1) {
      throw TensorError("grad_check", "function must produce a scalar");
    }
    tape.backward(loss);
  }
  std::vector<float> analytic(x.grad().begin(), x.grad().end());
  x.set_requires_grad(was_rg);

  std::vector<std::size_t> coords(x.numel());
  std::iota(coords.begin(), coords.end(), 0);
  if (max_coords > 0 && static_cast<std::size_t>(max_coords) < coords.size()) {
    Rng rng(seed);
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const std::size_t j = i + static_cast<std::size_t>(rng.uniform_int(
                                    static_cast<int>(coords.size() - i)));
      std::swap(coords[i], coords[j]);
    }
    coords.resize(static_cast<std::size_t>(max_coords));
  }

  GradCheckReport rep;
  NoGradGuard ng;
  const double f0 = std::fabs(fn(x).item());
  constexpr double kEps32 = 1.1920929e-7;
  rep.noise_floor = 4096.0 * kEps32 * std::max(1.0, f0) / (2.0 * h);

  auto vals = x.values_mut();
  for (std::size_t c : coords) {
    const float orig = vals[c];
    const float xp = static_cast<float>(orig + h);
    const float xm = static_cast<float>(orig - h);
    vals[c] = xp;
    const double fp = fn(x).item();
    vals[c] = xm;
    const double fm = fn(x).item();
    vals[c] = orig;
    const double numeric = (fp - fm) / (static_cast<double>(xp) - static_cast<double>(xm));
    const double a = analytic[c];
    const double abs_err = std::fabs(a - numeric);
    rep.max_abs_err = std::max(rep.max_abs_err, abs_err);
    ++rep.coords_checked;
    if (std::max(std::fabs(a), std::fabs(numeric)) >= rep.noise_floor) {
      ++rep.coords_measurable;
    }
    // Below the floor the comparison degrades to absolute agreement at the
    // FD noise scale; above it this is the plain relative error.
    const double rel = abs_err / std::max({std::fabs(a), std::fabs(numeric), 1e-6,
                                           rep.noise_floor});
    rep.max_rel_err = std::max(rep.max_rel_err, rel);
  }
  return rep;
}

}  // namespace nucleus
