#include "ccseg/tensor.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "ccseg/random.hpp"

namespace ccseg {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMatrix>;
using ConstMatMap = Eigen::Map<const RowMatrix>;

thread_local Tape* g_active_tape = nullptr;

Tensor make(Shape shape, std::vector<double> values) { return Tensor(std::move(shape), std::move(values)); }

std::vector<std::size_t> strides_of(const Shape& shape) {
  std::vector<std::size_t> strides(shape.size(), 1);
  for (std::size_t i = shape.size(); i-- > 1;) strides[i - 1] = strides[i] * shape[i];
  return strides;
}

void require_rank(const Tensor& t, std::size_t rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " +
                     format_shape(t.shape()));
  }
}

void require_defined(const Tensor& t, const char* op) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor");
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor::Tensor(Shape shape, double fill) : Tensor(shape, std::vector<double>(shape_numel(shape), fill)) {}

Tensor::Tensor(Shape shape, std::vector<double> values) : s_(std::make_shared<detail::Storage>()) {
  if (shape.empty()) throw ShapeError("tensor shape must have at least one axis");
  for (auto extent : shape) {
    if (extent == 0) throw ShapeError("tensor extents must be positive, got " + format_shape(shape));
  }
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor of shape " + format_shape(shape) + " needs " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(values.size()));
  }
  s_->shape = std::move(shape);
  s_->data = std::move(values);
}

Tensor Tensor::uniform(Shape shape, double lo, double hi, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.uniform(lo, hi);
  return Tensor(std::move(shape), std::move(v));
}

Tensor Tensor::normal(Shape shape, double mean, double sigma, Rng& rng) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = rng.normal(mean, sigma);
  return Tensor(std::move(shape), std::move(v));
}

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + format_shape(shape()));
  }
  return s_->shape[axis];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) throw ShapeError("at: index rank mismatch for " + format_shape(shape()));
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= s_->shape[axis]) throw ShapeError("at: index out of range for " + format_shape(shape()));
    flat = flat * s_->shape[axis] + i;
    ++axis;
  }
  return s_->data[flat];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item: tensor of shape " + format_shape(shape()) + " is not a scalar");
  return s_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  s_->requires_grad = on;
  return *this;
}

void Tensor::zero_grad() {
  s_->grad.clear();
}

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->data); }

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

void Tape::push(std::function<void()> backward_step) {
  if (consumed_) throw TapeError("cannot record onto a consumed tape");
  entries_.push_back(std::move(backward_step));
}

void Tape::backward(const Tensor& loss) {
  if (consumed_) throw TapeError("backward: tape already consumed by a previous backward pass");
  if (!loss.defined() || loss.numel() != 1) {
    throw TapeError("backward: loss must have exactly one element, got " +
                    (loss.defined() ? format_shape(loss.shape()) : std::string("undefined")));
  }
  if (!loss.requires_grad()) throw TapeError("backward: loss does not depend on any tensor requiring grad");
  consumed_ = true;
  autograd::grad_buffer(loss)[0] += 1.0;
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) (*it)();
  entries_.clear();
  entries_.shrink_to_fit();
}

TapeScope::TapeScope(Tape& tape) : previous_(g_active_tape) { g_active_tape = &tape; }
TapeScope::~TapeScope() { g_active_tape = previous_; }

Tape* active_tape() { return g_active_tape; }

namespace autograd {

bool recording(std::initializer_list<const Tensor*> inputs) {
  if (g_active_tape == nullptr) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t != nullptr && t->defined() && t->requires_grad(); });
}

void record(Tensor& out, std::function<void(std::span<const double>)> step) {
  auto storage = out.storage();
  storage->requires_grad = true;
  storage->leaf = false;
  g_active_tape->push([storage, step = std::move(step)] {
    if (storage->grad.empty()) return;
    step(storage->grad);
    // Intermediate gradients are dead once propagated.
    std::vector<double>().swap(storage->grad);
  });
}

std::span<double> grad_buffer(const Tensor& t) {
  auto& g = t.storage()->grad;
  if (g.empty()) g.assign(t.numel(), 0.0);
  return g;
}

}  // namespace autograd

// ---------------------------------------------------------------------------
// Elementwise
// ---------------------------------------------------------------------------

namespace {

bool is_binary(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::add:
    case ElementwiseOp::sub:
    case ElementwiseOp::mul:
    case ElementwiseOp::div:
    case ElementwiseOp::pow:
      return true;
    default:
      return false;
  }
}

const char* op_name(ElementwiseOp op) {
  switch (op) {
    case ElementwiseOp::add: return "add";
    case ElementwiseOp::sub: return "sub";
    case ElementwiseOp::mul: return "mul";
    case ElementwiseOp::div: return "div";
    case ElementwiseOp::pow: return "pow";
    case ElementwiseOp::exp: return "exp";
    case ElementwiseOp::log: return "log";
    case ElementwiseOp::sigmoid: return "sigmoid";
    case ElementwiseOp::relu: return "relu";
  }
  return "?";
}

double sigmoid_value(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  double e = std::exp(x);
  return e / (1.0 + e);
}

Tensor unary(ElementwiseOp op, const Tensor& x) {
  auto in = x.data();
  std::vector<double> out(in.size());
  switch (op) {
    case ElementwiseOp::exp:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::exp(in[i]);
      break;
    case ElementwiseOp::log:
      for (std::size_t i = 0; i < in.size(); ++i) {
        if (!(in[i] > 0.0)) {
          throw DomainError("log: non-positive value " + std::to_string(in[i]) + " at index " +
                            std::to_string(i));
        }
        out[i] = std::log(in[i]);
      }
      break;
    case ElementwiseOp::sigmoid:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = sigmoid_value(in[i]);
      break;
    case ElementwiseOp::relu:
      for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[i] > 0.0 ? in[i] : 0.0;
      break;
    default:
      throw ShapeError(std::string(op_name(op)) + " is a binary operation");
  }
  Tensor result = make(x.shape(), std::move(out));
  if (autograd::recording({&x})) {
    Tensor y = result;
    autograd::record(result, [op, x, y](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      auto xv = x.data();
      auto yv = y.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        switch (op) {
          case ElementwiseOp::exp: gx[i] += g[i] * yv[i]; break;
          case ElementwiseOp::log: gx[i] += g[i] / xv[i]; break;
          case ElementwiseOp::sigmoid: gx[i] += g[i] * yv[i] * (1.0 - yv[i]); break;
          case ElementwiseOp::relu: gx[i] += xv[i] > 0.0 ? g[i] : 0.0; break;
          default: break;
        }
      }
    });
  }
  return result;
}

Tensor binary(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_defined(b, op_name(op));
  Shape shape;
  if (a.shape() == b.shape()) {
    shape = a.shape();
  } else if (b.numel() == 1 && (a.numel() != 1 || a.rank() >= b.rank())) {
    shape = a.shape();
  } else if (a.numel() == 1) {
    shape = b.shape();
  } else {
    throw ShapeError(std::string(op_name(op)) + ": shape mismatch " + format_shape(a.shape()) + " vs " +
                     format_shape(b.shape()));
  }
  const std::size_t n = shape_numel(shape);
  const std::size_t sa = a.numel() == 1 ? 0 : 1;
  const std::size_t sb = b.numel() == 1 ? 0 : 1;
  auto av = a.data();
  auto bv = b.data();
  std::vector<double> out(n);
  switch (op) {
    case ElementwiseOp::add:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] + bv[i * sb];
      break;
    case ElementwiseOp::sub:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] - bv[i * sb];
      break;
    case ElementwiseOp::mul:
      for (std::size_t i = 0; i < n; ++i) out[i] = av[i * sa] * bv[i * sb];
      break;
    case ElementwiseOp::div:
      for (std::size_t i = 0; i < n; ++i) {
        if (bv[i * sb] == 0.0) throw DomainError("div: division by zero at index " + std::to_string(i));
        out[i] = av[i * sa] / bv[i * sb];
      }
      break;
    case ElementwiseOp::pow:
      for (std::size_t i = 0; i < n; ++i) {
        double base = av[i * sa];
        double e = bv[i * sb];
        if (base < 0.0 && e != std::floor(e)) {
          throw DomainError("pow: negative base with non-integer exponent at index " + std::to_string(i));
        }
        if (base == 0.0 && e < 0.0) throw DomainError("pow: zero base with negative exponent");
        if (b.requires_grad() && !(base > 0.0)) {
          throw DomainError("pow: exponent gradient needs a positive base at index " + std::to_string(i));
        }
        out[i] = std::pow(base, e);
      }
      break;
    default:
      throw ShapeError(std::string(op_name(op)) + " is a unary operation");
  }
  Tensor result = make(std::move(shape), std::move(out));
  if (autograd::recording({&a, &b})) {
    Tensor y = result;
    autograd::record(result, [op, a, b, y, sa, sb](std::span<const double> g) {
      auto av = a.data();
      auto bv = b.data();
      auto yv = y.data();
      const bool need_a = a.requires_grad();
      const bool need_b = b.requires_grad();
      std::span<double> ga = need_a ? autograd::grad_buffer(a) : std::span<double>{};
      std::span<double> gb = need_b ? autograd::grad_buffer(b) : std::span<double>{};
      for (std::size_t i = 0; i < g.size(); ++i) {
        double x = av[i * sa];
        double z = bv[i * sb];
        double da = 0.0;
        double db = 0.0;
        switch (op) {
          case ElementwiseOp::add: da = 1.0; db = 1.0; break;
          case ElementwiseOp::sub: da = 1.0; db = -1.0; break;
          case ElementwiseOp::mul: da = z; db = x; break;
          case ElementwiseOp::div: da = 1.0 / z; db = -x / (z * z); break;
          case ElementwiseOp::pow:
            da = z == 0.0 ? 0.0 : z * std::pow(x, z - 1.0);
            db = need_b ? yv[i] * std::log(x) : 0.0;
            break;
          default: break;
        }
        if (need_a) ga[i * sa] += g[i] * da;
        if (need_b) gb[i * sb] += g[i] * db;
      }
    });
  }
  return result;
}

}  // namespace

Tensor elementwise(ElementwiseOp op, const Tensor& a, const Tensor& b) {
  require_defined(a, op_name(op));
  return is_binary(op) ? binary(op, a, b) : unary(op, a);
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::add, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::sub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::mul, a, b); }
Tensor div(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::div, a, b); }
Tensor pow(const Tensor& a, const Tensor& b) { return elementwise(ElementwiseOp::pow, a, b); }
Tensor pow(const Tensor& a, double exponent) { return pow(a, Tensor::scalar(exponent)); }
Tensor exp(const Tensor& x) { return elementwise(ElementwiseOp::exp, x); }
Tensor log(const Tensor& x) { return elementwise(ElementwiseOp::log, x); }
Tensor sigmoid(const Tensor& x) { return elementwise(ElementwiseOp::sigmoid, x); }
Tensor relu(const Tensor& x) { return elementwise(ElementwiseOp::relu, x); }
Tensor neg(const Tensor& x) { return mul(x, Tensor::scalar(-1.0)); }

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lo > hi");
  auto in = x.data();
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = std::clamp(in[i], lo, hi);
  Tensor result = make(x.shape(), std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, lo, hi](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      auto xv = x.data();
      for (std::size_t i = 0; i < g.size(); ++i) {
        if (xv[i] >= lo && xv[i] <= hi) gx[i] += g[i];
      }
    });
  }
  return result;
}

Tensor grad_scale(const Tensor& x, double factor) {
  Tensor result = make(x.shape(), std::vector<double>(x.data().begin(), x.data().end()));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, factor](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += factor * g[i];
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Linear algebra
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner dimensions differ, " + format_shape(a.shape()) + " . " +
                     format_shape(b.shape()));
  }
  std::vector<double> out(m * n);
  ConstMatMap A(a.data().data(), m, k);
  ConstMatMap B(b.data().data(), k, n);
  MatMap(out.data(), m, n).noalias() = A * B;
  Tensor result = make({m, n}, std::move(out));
  if (autograd::recording({&a, &b})) {
    autograd::record(result, [a, b, m, k, n](std::span<const double> g) {
      ConstMatMap G(g.data(), m, n);
      if (a.requires_grad()) {
        MatMap(autograd::grad_buffer(a).data(), m, k).noalias() +=
            G * ConstMatMap(b.data().data(), k, n).transpose();
      }
      if (b.requires_grad()) {
        MatMap(autograd::grad_buffer(b).data(), k, n).noalias() +=
            ConstMatMap(a.data().data(), m, k).transpose() * G;
      }
    });
  }
  return result;
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const auto batch = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != batch || b.dim(1) != k) {
    throw ShapeError("bmm: incompatible shapes " + format_shape(a.shape()) + " . " + format_shape(b.shape()));
  }
  std::vector<double> out(batch * m * n);
  for (std::size_t i = 0; i < batch; ++i) {
    MatMap(out.data() + i * m * n, m, n).noalias() =
        ConstMatMap(a.data().data() + i * m * k, m, k) * ConstMatMap(b.data().data() + i * k * n, k, n);
  }
  Tensor result = make({batch, m, n}, std::move(out));
  if (autograd::recording({&a, &b})) {
    autograd::record(result, [a, b, batch, m, k, n](std::span<const double> g) {
      for (std::size_t i = 0; i < batch; ++i) {
        ConstMatMap G(g.data() + i * m * n, m, n);
        if (a.requires_grad()) {
          MatMap(autograd::grad_buffer(a).data() + i * m * k, m, k).noalias() +=
              G * ConstMatMap(b.data().data() + i * k * n, k, n).transpose();
        }
        if (b.requires_grad()) {
          MatMap(autograd::grad_buffer(b).data() + i * k * n, k, n).noalias() +=
              ConstMatMap(a.data().data() + i * m * k, m, k).transpose() * G;
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

namespace {

struct ConvGeometry {
  std::size_t n, c, h, w, o, k, stride, pad, oh, ow;
  bool pointwise() const { return k == 1 && stride == 1 && pad == 0; }
};

std::size_t conv_extent(std::size_t in, std::size_t k, std::size_t stride, std::size_t pad,
                        const char* op) {
  if (stride == 0) throw ShapeError(std::string(op) + ": stride must be positive");
  if (in + 2 * pad < k) {
    throw ShapeError(std::string(op) + ": non-positive output extent (input " + std::to_string(in) +
                     ", kernel " + std::to_string(k) + ", padding " + std::to_string(pad) + ")");
  }
  return (in + 2 * pad - k) / stride + 1;
}

// Column matrix (C*K*K) x (OH*OW) for one sample.
void im2col(const double* x, const ConvGeometry& g, double* col) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          double* dst = row + oy * g.ow;
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) {
            std::fill(dst, dst + g.ow, 0.0);
            continue;
          }
          const double* src = x + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            dst[ox] = (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) ? 0.0 : src[ix];
          }
        }
      }
    }
  }
}

void col2im_add(const double* col, const ConvGeometry& g, double* dx) {
  const std::size_t plane = g.oh * g.ow;
  for (std::size_t ci = 0; ci < g.c; ++ci) {
    for (std::size_t ky = 0; ky < g.k; ++ky) {
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((ci * g.k + ky) * g.k + kx) * plane;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
          if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
          double* dst = dx + (ci * g.h + static_cast<std::size_t>(iy)) * g.w;
          const double* src = row + oy * g.ow;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
            if (ix >= 0 && ix < static_cast<std::ptrdiff_t>(g.w)) dst[ix] += src[ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (kernel.dim(1) != input.dim(1)) {
    throw ShapeError("conv2d: kernel expects " + std::to_string(kernel.dim(1)) + " input channels, input " +
                     format_shape(input.shape()) + " has " + std::to_string(input.dim(1)));
  }
  if (kernel.dim(2) != kernel.dim(3)) throw ShapeError("conv2d: kernel must be square, got " + format_shape(kernel.shape()));
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), kernel.dim(0), kernel.dim(2),
                 stride, padding, 0, 0};
  g.oh = conv_extent(g.h, g.k, stride, padding, "conv2d");
  g.ow = conv_extent(g.w, g.k, stride, padding, "conv2d");
  const std::size_t ckk = g.c * g.k * g.k;
  const std::size_t plane = g.oh * g.ow;
  std::vector<double> out(g.n * g.o * plane);
  std::vector<double> col(g.pointwise() ? 0 : ckk * plane);
  ConstMatMap W(kernel.data().data(), g.o, ckk);
  for (std::size_t s = 0; s < g.n; ++s) {
    const double* xs = input.data().data() + s * g.c * g.h * g.w;
    const double* cols = xs;
    if (!g.pointwise()) {
      im2col(xs, g, col.data());
      cols = col.data();
    }
    MatMap(out.data() + s * g.o * plane, g.o, plane).noalias() = W * ConstMatMap(cols, ckk, plane);
  }
  Tensor result = make({g.n, g.o, g.oh, g.ow}, std::move(out));
  if (autograd::recording({&input, &kernel})) {
    autograd::record(result, [input, kernel, g, ckk, plane](std::span<const double> grad) {
      std::vector<double> col(g.pointwise() ? 0 : ckk * plane);
      std::vector<double> dcol(g.pointwise() ? 0 : ckk * plane);
      ConstMatMap W(kernel.data().data(), g.o, ckk);
      for (std::size_t s = 0; s < g.n; ++s) {
        ConstMatMap G(grad.data() + s * g.o * plane, g.o, plane);
        const double* xs = input.data().data() + s * g.c * g.h * g.w;
        if (kernel.requires_grad()) {
          const double* cols = xs;
          if (!g.pointwise()) {
            im2col(xs, g, col.data());
            cols = col.data();
          }
          MatMap(autograd::grad_buffer(kernel).data(), g.o, ckk).noalias() +=
              G * ConstMatMap(cols, ckk, plane).transpose();
        }
        if (input.requires_grad()) {
          double* dx = autograd::grad_buffer(input).data() + s * g.c * g.h * g.w;
          if (g.pointwise()) {
            MatMap(dx, ckk, plane).noalias() += W.transpose() * G;
          } else {
            MatMap(dcol.data(), ckk, plane).noalias() = W.transpose() * G;
            col2im_add(dcol.data(), g, dx);
          }
        }
      }
    });
  }
  return result;
}

Tensor depthwise_conv2d(const Tensor& input, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  require_rank(input, 4, "depthwise_conv2d");
  require_rank(kernel, 4, "depthwise_conv2d");
  if (kernel.dim(0) != input.dim(1) || kernel.dim(1) != 1 || kernel.dim(2) != kernel.dim(3)) {
    throw ShapeError("depthwise_conv2d: kernel " + format_shape(kernel.shape()) + " does not match input " +
                     format_shape(input.shape()));
  }
  ConvGeometry g{input.dim(0), input.dim(1), input.dim(2), input.dim(3), input.dim(1), kernel.dim(2),
                 stride, padding, 0, 0};
  g.oh = conv_extent(g.h, g.k, stride, padding, "depthwise_conv2d");
  g.ow = conv_extent(g.w, g.k, stride, padding, "depthwise_conv2d");
  const std::size_t plane = g.oh * g.ow;
  std::vector<double> out(g.n * g.c * plane, 0.0);
  auto x = input.data();
  auto w = kernel.data();
  auto visit = [g](auto&& fn) {
    for (std::size_t s = 0; s < g.n; ++s) {
      for (std::size_t ci = 0; ci < g.c; ++ci) {
        const std::size_t in_base = (s * g.c + ci) * g.h * g.w;
        const std::size_t out_base = (s * g.c + ci) * g.oh * g.ow;
        for (std::size_t ky = 0; ky < g.k; ++ky) {
          for (std::size_t kx = 0; kx < g.k; ++kx) {
            const std::size_t widx = (ci * g.k + ky) * g.k + kx;
            for (std::size_t oy = 0; oy < g.oh; ++oy) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * g.stride + ky) - static_cast<std::ptrdiff_t>(g.pad);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(g.h)) continue;
              for (std::size_t ox = 0; ox < g.ow; ++ox) {
                const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * g.stride + kx) - static_cast<std::ptrdiff_t>(g.pad);
                if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(g.w)) continue;
                fn(in_base + static_cast<std::size_t>(iy) * g.w + static_cast<std::size_t>(ix),
                   out_base + oy * g.ow + ox, widx);
              }
            }
          }
        }
      }
    }
  };
  visit([&](std::size_t xi, std::size_t oi, std::size_t wi) { out[oi] += x[xi] * w[wi]; });
  Tensor result = make({g.n, g.c, g.oh, g.ow}, std::move(out));
  if (autograd::recording({&input, &kernel})) {
    autograd::record(result, [input, kernel, visit](std::span<const double> grad) {
      auto x = input.data();
      auto w = kernel.data();
      const bool need_x = input.requires_grad();
      const bool need_w = kernel.requires_grad();
      std::span<double> gx = need_x ? autograd::grad_buffer(input) : std::span<double>{};
      std::span<double> gw = need_w ? autograd::grad_buffer(kernel) : std::span<double>{};
      visit([&](std::size_t xi, std::size_t oi, std::size_t wi) {
        if (need_x) gx[xi] += grad[oi] * w[wi];
        if (need_w) gw[wi] += grad[oi] * x[xi];
      });
    });
  }
  return result;
}

Tensor add_bias(const Tensor& input, const Tensor& bias, std::size_t axis) {
  const std::size_t extent = input.dim(axis);
  if (bias.numel() != extent) {
    throw ShapeError("add_bias: bias " + format_shape(bias.shape()) + " does not match axis " +
                     std::to_string(axis) + " of " + format_shape(input.shape()));
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < input.rank(); ++i) inner *= input.dim(i);
  const std::size_t outer = input.numel() / (inner * extent);
  std::vector<double> out(input.data().begin(), input.data().end());
  auto b = bias.data();
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t e = 0; e < extent; ++e) {
      double* p = out.data() + (o * extent + e) * inner;
      for (std::size_t i = 0; i < inner; ++i) p[i] += b[e];
    }
  }
  Tensor result = make(input.shape(), std::move(out));
  if (autograd::recording({&input, &bias})) {
    autograd::record(result, [input, bias, outer, extent, inner](std::span<const double> g) {
      if (input.requires_grad()) {
        auto gx = autograd::grad_buffer(input);
        for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
      }
      if (bias.requires_grad()) {
        auto gb = autograd::grad_buffer(bias);
        for (std::size_t o = 0; o < outer; ++o) {
          for (std::size_t e = 0; e < extent; ++e) {
            const double* p = g.data() + (o * extent + e) * inner;
            double acc = 0.0;
            for (std::size_t i = 0; i < inner; ++i) acc += p[i];
            gb[e] += acc;
          }
        }
      }
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor reduce(ReduceOp op, const Tensor& x, const std::set<std::size_t>& axes) {
  if (axes.empty()) return x;
  for (auto a : axes) {
    if (a >= x.rank()) {
      throw ShapeError("reduce: axis " + std::to_string(a) + " invalid for " + format_shape(x.shape()));
    }
  }
  Shape out_shape;
  std::size_t count = 1;
  for (std::size_t i = 0; i < x.rank(); ++i) {
    if (axes.count(i)) {
      count *= x.dim(i);
    } else {
      out_shape.push_back(x.dim(i));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  if (op == ReduceOp::var && count < 2) {
    throw DegenerateError("var: reduction over " + std::to_string(count) +
                          " element(s) is undefined with the n-1 divisor");
  }
  // Map every input element to its output slot.
  const auto in_shape = x.shape();
  std::vector<std::size_t> out_stride_for_axis(x.rank(), 0);
  {
    std::size_t stride = 1;
    for (std::size_t i = x.rank(); i-- > 0;) {
      if (!axes.count(i)) {
        out_stride_for_axis[i] = stride;
        stride *= in_shape[i];
      }
    }
  }
  std::vector<std::size_t> slot(x.numel());
  {
    std::vector<std::size_t> idx(x.rank(), 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < x.numel(); ++flat) {
      slot[flat] = offset;
      for (std::size_t d = x.rank(); d-- > 0;) {
        ++idx[d];
        offset += out_stride_for_axis[d];
        if (idx[d] < in_shape[d]) break;
        offset -= out_stride_for_axis[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  const std::size_t out_n = shape_numel(out_shape);
  auto xv = x.data();
  std::vector<double> sums(out_n, 0.0);
  for (std::size_t i = 0; i < xv.size(); ++i) sums[slot[i]] += xv[i];
  std::vector<double> out(out_n);
  std::vector<double> means;
  if (op == ReduceOp::sum) {
    out = sums;
  } else {
    means.resize(out_n);
    for (std::size_t j = 0; j < out_n; ++j) means[j] = sums[j] / static_cast<double>(count);
    if (op == ReduceOp::mean) {
      out = means;
    } else {
      std::fill(out.begin(), out.end(), 0.0);
      for (std::size_t i = 0; i < xv.size(); ++i) {
        double d = xv[i] - means[slot[i]];
        out[slot[i]] += d * d;
      }
      for (auto& v : out) v /= static_cast<double>(count - 1);
    }
  }
  Tensor result = make(std::move(out_shape), std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [op, x, slot = std::move(slot), means = std::move(means), count](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      auto xv = x.data();
      const double c = static_cast<double>(count);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        const double up = g[slot[i]];
        switch (op) {
          case ReduceOp::sum: gx[i] += up; break;
          case ReduceOp::mean: gx[i] += up / c; break;
          case ReduceOp::var: gx[i] += up * 2.0 * (xv[i] - means[slot[i]]) / (c - 1.0); break;
        }
      }
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  std::set<std::size_t> all;
  for (std::size_t i = 0; i < x.rank(); ++i) all.insert(i);
  return reduce(ReduceOp::sum, x, all);
}

Tensor mean(const Tensor& x) {
  std::set<std::size_t> all;
  for (std::size_t i = 0; i < x.rank(); ++i) all.insert(i);
  return reduce(ReduceOp::mean, x, all);
}

// ---------------------------------------------------------------------------
// Layout
// ---------------------------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no parts");
  const Shape& first = parts.front().shape();
  if (axis >= first.size()) throw ShapeError("concat: axis out of range for " + format_shape(first));
  if (parts.size() == 1) return parts.front();
  Shape out_shape = first;
  out_shape[axis] = 0;
  for (const auto& p : parts) {
    if (p.rank() != first.size()) throw ShapeError("concat: rank mismatch " + format_shape(first) + " vs " + format_shape(p.shape()));
    for (std::size_t i = 0; i < first.size(); ++i) {
      if (i != axis && p.dim(i) != first[i]) {
        throw ShapeError("concat: extent mismatch off axis " + std::to_string(axis) + ": " + format_shape(first) +
                         " vs " + format_shape(p.shape()));
      }
    }
    out_shape[axis] += p.dim(axis);
  }
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < first.size(); ++i) inner *= first[i];
  std::size_t outer = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= first[i];
  const std::size_t out_row = out_shape[axis] * inner;
  std::vector<double> out(shape_numel(out_shape));
  std::size_t offset = 0;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    const std::size_t row = p.dim(axis) * inner;
    offsets.push_back(offset);
    for (std::size_t o = 0; o < outer; ++o) {
      std::copy_n(p.data().data() + o * row, row, out.data() + o * out_row + offset);
    }
    offset += row;
  }
  Tensor result = make(std::move(out_shape), std::move(out));
  bool any = false;
  for (const auto& p : parts) any = any || autograd::recording({&p});
  if (any) {
    autograd::record(result, [parts, offsets, outer, inner, out_row, axis](std::span<const double> g) {
      for (std::size_t k = 0; k < parts.size(); ++k) {
        if (!parts[k].requires_grad()) continue;
        auto gp = autograd::grad_buffer(parts[k]);
        const std::size_t row = parts[k].dim(axis) * inner;
        for (std::size_t o = 0; o < outer; ++o) {
          const double* src = g.data() + o * out_row + offsets[k];
          double* dst = gp.data() + o * row;
          for (std::size_t i = 0; i < row; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, std::size_t axis, std::size_t start, std::size_t length) {
  if (axis >= x.rank() || length == 0 || start + length > x.dim(axis)) {
    throw ShapeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") out of range on axis " + std::to_string(axis) + " of " + format_shape(x.shape()));
  }
  Shape out_shape = x.shape();
  out_shape[axis] = length;
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (inner * x.dim(axis));
  const std::size_t in_row = x.dim(axis) * inner;
  const std::size_t row = length * inner;
  const std::size_t offset = start * inner;
  std::vector<double> out(outer * row);
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy_n(x.data().data() + o * in_row + offset, row, out.data() + o * row);
  }
  Tensor result = make(std::move(out_shape), std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, outer, in_row, row, offset](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < row; ++i) gx[o * in_row + offset + i] += g[o * row + i];
      }
    });
  }
  return result;
}

std::vector<Tensor> split(const Tensor& x, std::size_t axis, const std::vector<std::size_t>& sizes) {
  std::size_t total = std::accumulate(sizes.begin(), sizes.end(), std::size_t{0});
  if (axis >= x.rank() || total != x.dim(axis)) {
    throw ShapeError("split: sizes do not cover axis " + std::to_string(axis) + " of " + format_shape(x.shape()));
  }
  std::vector<Tensor> parts;
  std::size_t start = 0;
  for (auto s : sizes) {
    parts.push_back(slice(x, axis, start, s));
    start += s;
  }
  return parts;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: " + format_shape(x.shape()) + " -> " + format_shape(shape) + " changes element count");
  }
  Tensor result = make(std::move(shape), std::vector<double>(x.data().begin(), x.data().end()));
  if (autograd::recording({&x})) {
    autograd::record(result, [x](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    });
  }
  return result;
}

Tensor permute(const Tensor& x, const std::vector<std::size_t>& axes) {
  const std::size_t r = x.rank();
  if (axes.size() != r) throw ShapeError("permute: axis list does not match rank of " + format_shape(x.shape()));
  std::vector<bool> seen(r, false);
  for (auto a : axes) {
    if (a >= r || seen[a]) throw ShapeError("permute: invalid axis list for " + format_shape(x.shape()));
    seen[a] = true;
  }
  const auto in_strides = strides_of(x.shape());
  Shape out_shape(r);
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) {
    out_shape[i] = x.dim(axes[i]);
    src_stride[i] = in_strides[axes[i]];
  }
  // index[i] = source offset of output element i.
  std::vector<std::size_t> index(x.numel());
  {
    std::vector<std::size_t> idx(r, 0);
    std::size_t offset = 0;
    for (std::size_t flat = 0; flat < index.size(); ++flat) {
      index[flat] = offset;
      for (std::size_t d = r; d-- > 0;) {
        ++idx[d];
        offset += src_stride[d];
        if (idx[d] < out_shape[d]) break;
        offset -= src_stride[d] * idx[d];
        idx[d] = 0;
      }
    }
  }
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = xv[index[i]];
  Tensor result = make(std::move(out_shape), std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, index = std::move(index)](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      for (std::size_t i = 0; i < g.size(); ++i) gx[index[i]] += g[i];
    });
  }
  return result;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: rank < 2 for " + format_shape(x.shape()));
  std::vector<std::size_t> axes(x.rank());
  std::iota(axes.begin(), axes.end(), 0);
  std::swap(axes[x.rank() - 1], axes[x.rank() - 2]);
  return permute(x, axes);
}

Tensor upsample_nearest2x(const Tensor& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = 2 * h, ow = 2 * w;
  std::vector<double> out(n * c * oh * ow);
  auto xv = x.data();
  for (std::size_t p = 0; p < n * c; ++p) {
    for (std::size_t y = 0; y < oh; ++y) {
      for (std::size_t xx = 0; xx < ow; ++xx) out[(p * oh + y) * ow + xx] = xv[(p * h + y / 2) * w + xx / 2];
    }
  }
  Tensor result = make({n, c, oh, ow}, std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, n, c, h, w, oh, ow](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      for (std::size_t p = 0; p < n * c; ++p) {
        for (std::size_t y = 0; y < oh; ++y) {
          for (std::size_t xx = 0; xx < ow; ++xx) gx[(p * h + y / 2) * w + xx / 2] += g[(p * oh + y) * ow + xx];
        }
      }
    });
  }
  return result;
}

namespace {

// Copies between an NCHW tensor and a spatial window of a larger NCHW tensor.
// `to_window` false: big[window] -> small; true: small -> big[window] (accumulating).
void window_copy(const double* src, double* dst, std::size_t planes, std::size_t big_h, std::size_t big_w,
                 std::size_t top, std::size_t left, std::size_t h, std::size_t w, bool into_big, bool accumulate) {
  for (std::size_t p = 0; p < planes; ++p) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        const std::size_t big = (p * big_h + top + y) * big_w + left + x;
        const std::size_t small = (p * h + y) * w + x;
        if (into_big) {
          if (accumulate) dst[big] += src[small]; else dst[big] = src[small];
        } else {
          if (accumulate) dst[small] += src[big]; else dst[small] = src[big];
        }
      }
    }
  }
}

}  // namespace

Tensor pad2d(const Tensor& x, std::size_t padding) {
  require_rank(x, 4, "pad2d");
  if (padding == 0) return x;
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t oh = h + 2 * padding, ow = w + 2 * padding;
  std::vector<double> out(n * c * oh * ow, 0.0);
  window_copy(x.data().data(), out.data(), n * c, oh, ow, padding, padding, h, w, true, false);
  Tensor result = make({n, c, oh, ow}, std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, n, c, h, w, oh, ow, padding](std::span<const double> g) {
      window_copy(g.data(), autograd::grad_buffer(x).data(), n * c, oh, ow, padding, padding, h, w, false, true);
    });
  }
  return result;
}

Tensor crop2d(const Tensor& x, std::size_t top, std::size_t left, std::size_t height, std::size_t width) {
  require_rank(x, 4, "crop2d");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (height == 0 || width == 0 || top + height > h || left + width > w) {
    throw ShapeError("crop2d: window exceeds " + format_shape(x.shape()));
  }
  std::vector<double> out(n * c * height * width);
  window_copy(x.data().data(), out.data(), n * c, h, w, top, left, height, width, false, false);
  Tensor result = make({n, c, height, width}, std::move(out));
  if (autograd::recording({&x})) {
    autograd::record(result, [x, n, c, h, w, top, left, height, width](std::span<const double> g) {
      window_copy(g.data(), autograd::grad_buffer(x).data(), n * c, h, w, top, left, height, width, true, true);
    });
  }
  return result;
}

// ---------------------------------------------------------------------------
// Normalisation
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, std::size_t axis) {
  const std::size_t extent = x.dim(axis);
  std::size_t inner = 1;
  for (std::size_t i = axis + 1; i < x.rank(); ++i) inner *= x.dim(i);
  const std::size_t outer = x.numel() / (inner * extent);
  auto xv = x.data();
  std::vector<double> out(x.numel());
  for (std::size_t o = 0; o < outer; ++o) {
    for (std::size_t i = 0; i < inner; ++i) {
      const std::size_t base = o * extent * inner + i;
      double mx = xv[base];
      for (std::size_t e = 1; e < extent; ++e) mx = std::max(mx, xv[base + e * inner]);
      double total = 0.0;
      for (std::size_t e = 0; e < extent; ++e) {
        double v = std::exp(xv[base + e * inner] - mx);
        out[base + e * inner] = v;
        total += v;
      }
      for (std::size_t e = 0; e < extent; ++e) out[base + e * inner] /= total;
    }
  }
  Tensor result = make(x.shape(), std::move(out));
  if (autograd::recording({&x})) {
    Tensor y = result;
    autograd::record(result, [x, y, outer, extent, inner](std::span<const double> g) {
      auto gx = autograd::grad_buffer(x);
      auto yv = y.data();
      for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t i = 0; i < inner; ++i) {
          const std::size_t base = o * extent * inner + i;
          double dot = 0.0;
          for (std::size_t e = 0; e < extent; ++e) dot += g[base + e * inner] * yv[base + e * inner];
          for (std::size_t e = 0; e < extent; ++e) {
            const std::size_t k = base + e * inner;
            gx[k] += yv[k] * (g[k] - dot);
          }
        }
      }
    });
  }
  return result;
}

namespace {

// Shared forward/backward for group and layer normalisation. Elements are laid
// out as `blocks` contiguous runs of `block_size`; each run is normalised and
// element j of a run uses affine index `param_of(block, j)`.
struct NormPlan {
  std::size_t blocks;
  std::size_t block_size;
  std::function<std::size_t(std::size_t, std::size_t)> param_of;
};

Tensor normalise(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps, NormPlan plan) {
  auto xv = x.data();
  auto gv = gamma.data();
  auto bv = beta.data();
  std::vector<double> xhat(x.numel());
  std::vector<double> inv_std(plan.blocks);
  std::vector<double> out(x.numel());
  const double m = static_cast<double>(plan.block_size);
  for (std::size_t b = 0; b < plan.blocks; ++b) {
    const double* p = xv.data() + b * plan.block_size;
    double mu = 0.0;
    for (std::size_t j = 0; j < plan.block_size; ++j) mu += p[j];
    mu /= m;
    double var = 0.0;
    for (std::size_t j = 0; j < plan.block_size; ++j) var += (p[j] - mu) * (p[j] - mu);
    var /= m;
    inv_std[b] = 1.0 / std::sqrt(var + eps);
    for (std::size_t j = 0; j < plan.block_size; ++j) {
      const std::size_t k = b * plan.block_size + j;
      xhat[k] = (p[j] - mu) * inv_std[b];
      const std::size_t c = plan.param_of(b, j);
      out[k] = gv[c] * xhat[k] + bv[c];
    }
  }
  Tensor result = make(x.shape(), std::move(out));
  if (autograd::recording({&x, &gamma, &beta})) {
    autograd::record(result, [x, gamma, beta, plan, xhat = std::move(xhat), inv_std = std::move(inv_std)](
                                 std::span<const double> g) {
      auto gv = gamma.data();
      const double m = static_cast<double>(plan.block_size);
      std::span<double> gx = x.requires_grad() ? autograd::grad_buffer(x) : std::span<double>{};
      std::span<double> gg = gamma.requires_grad() ? autograd::grad_buffer(gamma) : std::span<double>{};
      std::span<double> gb = beta.requires_grad() ? autograd::grad_buffer(beta) : std::span<double>{};
      for (std::size_t b = 0; b < plan.blocks; ++b) {
        double mean_d = 0.0;
        double mean_dx = 0.0;
        for (std::size_t j = 0; j < plan.block_size; ++j) {
          const std::size_t k = b * plan.block_size + j;
          const std::size_t c = plan.param_of(b, j);
          const double d = g[k] * gv[c];
          mean_d += d;
          mean_dx += d * xhat[k];
          if (!gg.empty()) gg[c] += g[k] * xhat[k];
          if (!gb.empty()) gb[c] += g[k];
        }
        if (gx.empty()) continue;
        mean_d /= m;
        mean_dx /= m;
        for (std::size_t j = 0; j < plan.block_size; ++j) {
          const std::size_t k = b * plan.block_size + j;
          const double d = g[k] * gv[plan.param_of(b, j)];
          gx[k] += inv_std[b] * (d - mean_d - xhat[k] * mean_dx);
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor group_norm(const Tensor& x, std::size_t groups, const Tensor& gamma, const Tensor& beta, double eps) {
  require_rank(x, 4, "group_norm");
  const auto n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups == 0 || c % groups != 0) {
    throw ShapeError("group_norm: " + std::to_string(groups) + " groups do not divide " + std::to_string(c) + " channels");
  }
  if (gamma.numel() != c || beta.numel() != c) {
    throw ShapeError("group_norm: scale/shift must have " + std::to_string(c) + " entries");
  }
  const std::size_t per_group = c / groups;
  NormPlan plan{n * groups, per_group * hw, [groups, per_group, hw](std::size_t b, std::size_t j) {
                  return (b % groups) * per_group + j / hw;
                }};
  return normalise(x, gamma, beta, eps, std::move(plan));
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t d = x.shape().back();
  if (gamma.numel() != d || beta.numel() != d) {
    throw ShapeError("layer_norm: scale/shift must have " + std::to_string(d) + " entries for " + format_shape(x.shape()));
  }
  NormPlan plan{x.numel() / d, d, [](std::size_t, std::size_t j) { return j; }};
  return normalise(x, gamma, beta, eps, std::move(plan));
}

// ---------------------------------------------------------------------------
// Gradient checking
// ---------------------------------------------------------------------------

double grad_check(const std::function<Tensor()>& f, const std::vector<Tensor>& inputs,
                  const GradCheckOptions& options) {
  std::vector<Tensor> leaves = inputs;
  std::vector<bool> had_grad;
  for (auto& t : leaves) {
    had_grad.push_back(t.requires_grad());
    t.set_requires_grad(true);
    t.zero_grad();
  }
  {
    Tape tape;
    Tensor loss;
    {
      TapeScope scope(tape);
      loss = f();
    }
    tape.backward(loss);
  }
  auto evaluate = [&](std::size_t tensor, std::size_t coord) {
    double v = f().item();
    if (!std::isfinite(v)) {
      throw NumericalError("grad_check: non-finite evaluation perturbing tensor " + std::to_string(tensor) +
                           " index " + std::to_string(coord));
    }
    return v;
  };
  Rng rng(options.seed);
  double worst = 0.0;
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    Tensor& x = leaves[t];
    std::vector<double> analytic(x.numel(), 0.0);
    if (x.has_grad()) std::copy(x.grad().begin(), x.grad().end(), analytic.begin());
    std::vector<std::size_t> coords(x.numel());
    std::iota(coords.begin(), coords.end(), 0);
    if (options.max_coords != 0 && coords.size() > options.max_coords) {
      rng.shuffle(std::span<std::size_t>(coords));
      coords.resize(options.max_coords);
    }
    auto values = x.mutable_data();
    for (auto i : coords) {
      const double original = values[i];
      values[i] = original + options.eps;
      const double up = evaluate(t, i);
      values[i] = original - options.eps;
      const double down = evaluate(t, i);
      values[i] = original;
      const double central = (up - down) / (2.0 * options.eps);
      const double a = analytic[i];
      const double err = std::abs(a - central) / std::max({1.0, std::abs(a), std::abs(central)});
      worst = std::max(worst, err);
    }
  }
  for (std::size_t t = 0; t < leaves.size(); ++t) {
    leaves[t].zero_grad();
    leaves[t].set_requires_grad(had_grad[t]);
  }
  return worst;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x, double eps) {
  Tensor probe = x.detach();
  GradCheckOptions options;
  options.eps = eps;
  return grad_check([&] { return f(probe); }, {probe}, options);
}

}  // namespace ccseg
