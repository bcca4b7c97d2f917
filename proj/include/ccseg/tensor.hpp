#pragma once

#include <Eigen/Core>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <set>
#include <span>
#include <vector>

#include "ccseg/error.hpp"

namespace ccseg {

class Rng;

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);

namespace detail {
struct Storage {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
};
}  // namespace detail

/// Dense float64 array in row-major order with an optional gradient buffer.
///
/// Tensor is a handle: copies share storage, which is what lets a parameter
/// recorded on a tape receive its gradient. Use detach() for an independent copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> values);

  static Tensor scalar(double value) { return Tensor({1}, {value}); }
  static Tensor zeros(Shape shape) { return Tensor(std::move(shape), 0.0); }
  static Tensor ones(Shape shape) { return Tensor(std::move(shape), 1.0); }
  static Tensor full(Shape shape, double value) { return Tensor(std::move(shape), value); }
  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng);
  static Tensor normal(Shape shape, double mean, double sigma, Rng& rng);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const { return s_->data.size(); }

  std::span<const double> data() const { return s_->data; }
  /// Writable view. Mutating a tensor that is still referenced by a live tape
  /// invalidates that tape's backward pass.
  std::span<double> mutable_data() { return s_->data; }
  double operator[](std::size_t i) const { return s_->data[i]; }
  double at(std::initializer_list<std::size_t> index) const;
  double item() const;
  Eigen::Map<const Eigen::VectorXd> vec() const {
    return {s_->data.data(), static_cast<Eigen::Index>(s_->data.size())};
  }

  bool requires_grad() const { return s_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool is_leaf() const { return s_->leaf; }
  bool has_grad() const { return !s_->grad.empty(); }
  /// Gradient buffer; empty span when no gradient has reached this tensor.
  std::span<const double> grad() const { return s_->grad; }
  void zero_grad();

  /// Independent leaf copy of the values (no gradient, no tape history).
  Tensor detach() const;
  bool same_storage(const Tensor& other) const { return s_ == other.s_; }
  const std::shared_ptr<detail::Storage>& storage() const { return s_; }

 private:
  std::shared_ptr<detail::Storage> s_;
};

/// Ordered record of differentiable operations executed while the tape is
/// active. Backward replays the record in exact reverse order, once.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  void push(std::function<void()> backward_step);
  std::size_t size() const { return entries_.size(); }
  bool consumed() const { return consumed_; }

  /// Seeds d(loss)/d(loss) = 1 and propagates to every requires_grad leaf.
  /// Leaf gradients accumulate; callers zero them between steps.
  void backward(const Tensor& loss);

 private:
  std::vector<std::function<void()>> entries_;
  bool consumed_ = false;
};

/// Makes `tape` the recording target for the current thread within this scope.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* previous_;
};

Tape* active_tape();

inline void backward(const Tensor& loss, Tape& tape) { tape.backward(loss); }

// Hooks for writing differentiable operations outside this file.
namespace autograd {
/// True when a tape is active and at least one input requires a gradient.
bool recording(std::initializer_list<const Tensor*> inputs);
/// Marks `out` as a non-leaf and registers its backward step on the active tape.
/// `step` receives the upstream gradient of `out`.
void record(Tensor& out, std::function<void(std::span<const double>)> step);
/// Zero-initialised gradient buffer of `t` (allocated on first use).
std::span<double> grad_buffer(const Tensor& t);
}  // namespace autograd

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

enum class ElementwiseOp { add, sub, mul, div, pow, exp, log, sigmoid, relu };

/// Binary ops accept identical shapes or a single-element operand (scalar
/// broadcast); anything else is a ShapeError. Unary ops ignore `b`.
Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b = {});

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, const Tensor& b);
Tensor pow(const Tensor& a, double exponent);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor neg(const Tensor& x);
/// Values limited to [lo, hi]; the gradient is passed through inside the range
/// (boundaries included) and zero outside.
Tensor clamp(const Tensor& x, double lo, double hi);
/// Identity forward; multiplies the gradient by `factor` on the way back.
Tensor grad_scale(const Tensor& x, double factor);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// ---------------------------------------------------------------------------
// Linear algebra and convolution
// ---------------------------------------------------------------------------

/// (m x k) . (k x n) -> (m x n).
Tensor matmul(const Tensor& a, const Tensor& b);
/// Batched matmul: (B x m x k) . (B x k x n) -> (B x m x n).
Tensor bmm(const Tensor& a, const Tensor& b);

/// Cross-correlation of NCHW input with an OCKK kernel (no flip).
Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding);
/// Per-channel cross-correlation; kernel is C x 1 x K x K.
Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride,
                        std::size_t padding);
/// Adds `bias` (extent = input.dim(axis)) along `axis`.
Tensor add_bias(const Tensor& input, const Tensor& bias, std::size_t axis);

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

enum class ReduceOp { sum, mean, var };

/// Removes the reduced axes. var uses the unbiased n-1 divisor. Reducing every
/// axis yields shape {1}; an empty axis set returns the input unchanged.
Tensor reduce(ReduceOp op, const Tensor& x, const std::set<std::size_t>& axes);
Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length);
std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes);
Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes);
/// Swaps the last two axes.
Tensor transpose(const Tensor& x);

/// NCHW nearest-neighbour upsampling by 2 in both spatial axes.
Tensor upsample_nearest2x(const Tensor& x);
/// Zero padding of the two spatial axes of an NCHW tensor.
Tensor pad2d(const Tensor& x, std::size_t padding);
/// Spatial window [top, top+height) x [left, left+width) of an NCHW tensor.
Tensor crop2d(const Tensor& x, std::size_t top, std::size_t left, std::size_t height,
              std::size_t width);

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis);
/// Group normalisation of NCHW input; gamma/beta have C entries.
Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);
/// Normalises over the last axis; gamma/beta match its extent.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

struct GradCheckOptions {
  double eps = 1e-5;
  /// Check at most this many coordinates per tensor (seeded subset); 0 = all.
  std::size_t max_coords = 0;
  std::uint64_t seed = 0;
};

/// Maximum over checked coordinates of
///   |analytic - central| / max(1, |analytic|, |central|).
/// `f` is evaluated once under a tape and 2 times per coordinate without one;
/// `inputs` are perturbed in place and restored.
double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                  const GradCheckOptions& options = {});
double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                  double eps = 1e-5);

}  // namespace ccseg
