#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace nucleus {

using Shape = std::vector<int>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

/// Thrown by primitives on shape mismatch or non-finite outputs. Carries the
/// primitive name so callers can report which operation failed.
class TensorError : public std::runtime_error {
 public:
  TensorError(std::string op, const std::string& what)
      : std::runtime_error(op + ": " + what), op_(std::move(op)) {}
  const std::string& op() const { return op_; }

 private:
  std::string op_;
};

struct TensorStorage {
  Shape shape;
  std::vector<float> values;
  std::vector<float> grad;  // empty until first needed
  bool requires_grad = false;
  bool on_tape = false;  // produced by a recorded primitive

  std::size_t numel() const { return values.size(); }
  void ensure_grad() {
    if (grad.size() != values.size()) grad.assign(values.size(), 0.0f);
  }
};

/// Dense row-major 32-bit tensor with shared storage. Copies are shallow;
/// op results always allocate fresh storage, so values are immutable once a
/// tensor has entered a computation.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, float fill = 0.0f);
  Tensor(Shape shape, std::vector<float> values);

  static Tensor scalar(float v) { return Tensor(Shape{}, std::vector<float>{v}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0f); }
  static Tensor full(Shape shape, float v) { return Tensor(std::move(shape), v); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  int ndim() const { return static_cast<int>(s_->shape.size()); }
  int dim(int i) const;  // negative indices allowed
  std::size_t numel() const { return s_->numel(); }

  std::span<const float> values() const { return {s_->values.data(), s_->values.size()}; }
  /// Mutable access for leaf setup (weight init, optimizer steps). Mutating a
  /// tensor already recorded on a tape invalidates that tape.
  std::span<float> values_mut() { return {s_->values.data(), s_->values.size()}; }

  float item() const;
  float at(std::initializer_list<int> idx) const;

  Tensor& set_requires_grad(bool b = true);
  bool requires_grad() const { return s_->requires_grad; }
  bool on_tape() const { return s_->on_tape; }

  /// Gradient buffer (empty span if never populated).
  std::span<const float> grad() const;
  std::span<float> grad_mut();
  void zero_grad();

  /// Value copy detached from any tape, not requiring grad.
  Tensor detach() const;

  const std::shared_ptr<TensorStorage>& storage() const { return s_; }

 private:
  std::shared_ptr<TensorStorage> s_;
};

struct TapeEntry {
  const char* op;
  std::vector<std::shared_ptr<TensorStorage>> inputs;
  std::shared_ptr<TensorStorage> output;
  std::function<void()> backward;
};

/// Reverse-mode tape. Constructing a Tape makes it the active recorder for
/// the current thread; primitives append entries whenever an input requires
/// grad (directly or transitively). Entries are stored in evaluation order,
/// so the reverse sweep is a single pass visiting each entry exactly once.
class Tape {
 public:
  Tape();
  ~Tape();
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse. Leaf grads
  /// accumulate across calls; intermediate grads are reset on every call.
  void backward(const Tensor& loss);

  std::size_t size() const { return entries_.size(); }
  void record(TapeEntry entry) { entries_.push_back(std::move(entry)); }

  static Tape* current();

 private:
  std::vector<TapeEntry> entries_;
  Tape* prev_ = nullptr;
};

/// Suspends tape recording for its lifetime (finite-difference probes,
/// inference rollouts).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

  static bool active();
};

/// Convenience wrapper over Tape::current()->backward(loss).
void backward(const Tensor& loss);

// ---- primitive vocabulary --------------------------------------------------
// Binary ops broadcast numpy-style (right-aligned, extent 1 stretches).

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor divide(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, float b);
Tensor sub(const Tensor& a, float b);
Tensor mul(const Tensor& a, float b);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return divide(a, b); }

Tensor matmul(const Tensor& a, const Tensor& b);  // strictly 2-D
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor reshape(const Tensor& x, Shape shape);

/// out[i, :] = x[idx[i], :] for 2-D x. Backward scatter-adds.
Tensor gather_rows(const Tensor& x, const std::vector<int>& idx);
/// out[idx[i], :] += values[i, :] into a rows x values.cols() zero tensor.
Tensor scatter_add_rows(const Tensor& values, const std::vector<int>& idx, int rows);
/// out.flat[i] = x.flat[idx[i]], reshaped to out_shape.
Tensor gather_elems(const Tensor& x, const std::vector<int>& flat_idx, Shape out_shape);

Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, int axis);
/// Max over `axis`; per-slice argmax (first max wins) optionally returned.
Tensor max_axis(const Tensor& x, int axis, std::vector<int>* argmax = nullptr);

Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor softmax(const Tensor& x, int axis);
/// Normalizes over the last axis; gamma/beta are [C] learned scale/shift.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  float eps = 1e-5f);

/// Batched scaled dot-product attention. q,k,v: [B, L, Dh]. Softmax over keys
/// with max-subtraction; scale applied to the logits.
Tensor attention_core(const Tensor& q, const Tensor& k, const Tensor& v, float scale);

/// Neighborhood attention over an Hp x Wp token grid. q,k,v: [H, N, Dh] with
/// N = Hp*Wp; bias: [H, (2r+1)^2] learned relative-position bias. Query (i,j)
/// attends to keys with |di| <= r, |dj| <= r, window clamped at the borders.
Tensor neighborhood_attention_core(const Tensor& q, const Tensor& k, const Tensor& v,
                                   const Tensor& bias, int hp, int wp, int radius,
                                   float scale);

// ---- rng -------------------------------------------------------------------

/// Deterministic RNG with hand-rolled distributions (stdlib distributions are
/// implementation-defined, which would break cross-build reproducibility).
class Rng {
 public:
  explicit Rng(std::uint64_t seed);
  std::uint64_t next_u64();
  float uniform();                     // [0, 1)
  float uniform(float a, float b);     // [a, b)
  float normal();                      // standard normal, Box-Muller
  int uniform_int(int n);              // [0, n)

 private:
  std::uint64_t state_;
  float cached_normal_ = 0.0f;
  bool has_cached_ = false;
};

Tensor randn(Shape shape, Rng& rng, float stddev = 1.0f);

// ---- gradient verification --------------------------------------------------

struct GradCheckReport {
  double max_rel_err = 0.0;    // over measurable coordinates
  double max_abs_err = 0.0;    // over all probed coordinates
  std::size_t coords_checked = 0;
  std::size_t coords_measurable = 0;
  double noise_floor = 0.0;
};

/// Central-difference check of d(fn)/dx. fn must be deterministic (verified
/// by evaluating twice) and build its graph from the passed tensor. At most
/// max_coords coordinates are probed (0 = all), sampled with `seed`.
///
/// Relative error per coordinate is |a-n| / max(|a|,|n|,1e-6). In 32-bit a
/// central difference carries ~eps32*|f|/(2h) of irreducible noise, so
/// coordinates where both gradients sit below that floor (scaled by a
/// safety factor sized so floor-level coordinates still meet 1e-3) measure
/// noise rather than correctness; they are excluded from
/// max_rel_err and counted via coords_measurable.
GradCheckReport grad_check(const std::function<Tensor(const Tensor&)>& fn, Tensor& x,
                           double h = 1e-3, int max_coords = 0,
                           std::uint64_t seed = 0);

}  // namespace nucleus
