// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#include "plaindet/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

namespace plaindet {

namespace {

std::atomic<bool> g_finite_checks{true};
thread_local Tape* g_active_tape = nullptr;

void validate_shape(const Shape& s) {
  for (int e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
  }
}

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> data) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  return n;
}

void ensure_grad(const std::shared_ptr<detail::Node>& n) {
  if (!n->tracked) {
    n->grad.assign(n->data.size(), 0.0);
    n->tracked = true;
  }
}

// Flattens a rank-r shape into (batch, rows, cols) for the last-two-axes ops.
struct Mat3 {
  std::int64_t batch, rows, cols;
};

Mat3 as_mat3(const Shape& s) {
  if (s.size() < 2) throw ShapeError("expected rank >= 2, got " + shape_str(s));
  std::int64_t batch = 1;
  for (std::size_t i = 0; i + 2 < s.size(); ++i) batch *= s[i];
  return {batch, s[s.size() - 2], s[s.size() - 1]};
}

}  // namespace

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (int e : s) n *= e;
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

void set_finite_checks(bool on) { g_finite_checks.store(on); }
bool finite_checks_enabled() { return g_finite_checks.load(); }

// --- Tensor ------------------------------------------------------------------

Tensor make_from_node(std::shared_ptr<detail::Node> n) {
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape) {
  validate_shape(shape);
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), 0.0);
  return make_from_node(new_node(std::move(shape), std::move(d)));
}

Tensor Tensor::full(Shape shape, double value) {
  validate_shape(shape);
  std::vector<double> d(static_cast<std::size_t>(shape_numel(shape)), value);
  return make_from_node(new_node(std::move(shape), std::move(d)));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data) {
  validate_shape(shape);
  if (shape_numel(shape) != static_cast<std::int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  return make_from_node(new_node(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return n_->shape; }
int Tensor::rank() const { return static_cast<int>(n_->shape.size()); }
std::int64_t Tensor::numel() const {
  return static_cast<std::int64_t>(n_->data.size());
}

int Tensor::extent(int axis) const {
  if (axis < 0 || axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_str(shape()));
  }
  return n_->shape[static_cast<std::size_t>(axis)];
}

std::span<const double> Tensor::values() const { return n_->data; }
std::span<double> Tensor::values_mut() { return n_->data; }

double Tensor::item() const {
  if (numel() != 1) {
    throw DomainError("item() on non-scalar tensor " + shape_str(shape()));
  }
  return n_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != rank()) {
    throw ShapeError("index rank mismatch for " + shape_str(shape()));
  }
  std::int64_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    const int e = n_->shape[static_cast<std::size_t>(axis)];
    if (i < 0 || i >= e) throw ShapeError("index out of bounds");
    flat = flat * e + i;
    ++axis;
  }
  return n_->data[static_cast<std::size_t>(flat)];
}

bool Tensor::requires_grad() const { return n_->requires_grad; }

void Tensor::set_requires_grad(bool on) {
  n_->requires_grad = on;
  if (on) ensure_grad(n_);
}

bool Tensor::tracked() const { return n_->tracked; }

std::span<double> Tensor::grad() {
  if (!n_->tracked) throw DomainError("grad() on untracked tensor");
  return n_->grad;
}

std::span<const double> Tensor::grad() const {
  if (!n_->tracked) throw DomainError("grad() on untracked tensor");
  return n_->grad;
}

void Tensor::zero_grad() {
  if (n_->tracked) std::fill(n_->grad.begin(), n_->grad.end(), 0.0);
}

Tensor Tensor::clone() const { return from_data(shape(), n_->data); }

// --- Tape --------------------------------------------------------------------

TapeScope::TapeScope(Tape& tape) : prev_(g_active_tape) {
  g_active_tape = &tape;
}
TapeScope::~TapeScope() { g_active_tape = prev_; }

Tape* active_tape() { return g_active_tape; }

void Tape::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw DomainError("backward requires a scalar loss, got " +
                      shape_str(loss.shape()));
  }
  // Op outputs are transient: reset them so repeated calls re-derive the same
  // gradients while leaf accumulators keep adding up.
  for (auto& e : entries_) {
    if (!e.out->requires_grad) {
      std::fill(e.out->grad.begin(), e.out->grad.end(), 0.0);
    }
  }
  if (loss.tracked()) {
    loss.node()->grad[0] += 1.0;
  }
  for (auto it = entries_.rbegin(); it != entries_.rend(); ++it) {
    it->back();
  }
}

void backward(Tape& tape, const Tensor& loss) { tape.backward(loss); }

bool any_tracked(std::span<const Tensor> inputs) {
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor& t) { return t.tracked(); });
}

void check_finite(const char* name, const Tensor& t) {
  for (double v : t.values()) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string(name) + " produced a non-finite value");
    }
  }
}

void record_op(const char* name, std::span<const Tensor> inputs, Tensor& out,
               std::function<void()> back) {
  if (finite_checks_enabled()) check_finite(name, out);
  Tape* tape = g_active_tape;
  if (tape == nullptr || !any_tracked(inputs)) return;
  ensure_grad(out.node());
  tape->entries_.push_back({name, out.node(), std::move(back)});
}

namespace {

// Shared scaffolding for elementwise unary ops: dy/dx supplied as a lambda on
// (x_value, y_value).
template <typename Fwd, typename Dfn>
Tensor unary_op(const char* name, const Tensor& x, Fwd f, Dfn dfdx) {
  std::vector<double> out(x.values().begin(), x.values().end());
  for (double& v : out) v = f(v);
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  const Tensor in[] = {x};
  record_op(name, in, y, [x, y, dfdx]() {
    if (!x.tracked()) return;
    auto gx = x.node()->grad.data();
    const auto gy = y.node()->grad.data();
    const auto xv = x.node()->data.data();
    const auto yv = y.node()->data.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i] * dfdx(xv[i], yv[i]);
  });
  return y;
}

void require_same_shape(const char* name, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(name) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// --- elementwise -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] + bv[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  const Tensor in[] = {a, b};
  record_op("add", in, y, [a, b, y]() {
    const auto gy = y.node()->grad.data();
    const std::int64_t n = y.numel();
    if (a.tracked()) {
      auto ga = a.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i];
    }
    if (b.tracked()) {
      auto gb = b.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i];
    }
  });
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] - bv[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  const Tensor in[] = {a, b};
  record_op("sub", in, y, [a, b, y]() {
    const auto gy = y.node()->grad.data();
    const std::int64_t n = y.numel();
    if (a.tracked()) {
      auto ga = a.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i];
    }
    if (b.tracked()) {
      auto gb = b.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) gb[i] -= gy[i];
    }
  });
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] * bv[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  const Tensor in[] = {a, b};
  record_op("mul", in, y, [a, b, y]() {
    const auto gy = y.node()->grad.data();
    const std::int64_t n = y.numel();
    if (a.tracked()) {
      auto ga = a.node()->grad.data();
      const auto bv2 = b.node()->data.data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i] * bv2[i];
    }
    if (b.tracked()) {
      auto gb = b.node()->grad.data();
      const auto av2 = a.node()->data.data();
      for (std::int64_t i = 0; i < n; ++i) gb[i] += gy[i] * av2[i];
    }
  });
  return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
  require_same_shape("div", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = av[i] / bv[i];
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  const Tensor in[] = {a, b};
  record_op("div", in, y, [a, b, y]() {
    const auto gy = y.node()->grad.data();
    const auto av2 = a.node()->data.data();
    const auto bv2 = b.node()->data.data();
    const std::int64_t n = y.numel();
    if (a.tracked()) {
      auto ga = a.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) ga[i] += gy[i] / bv2[i];
    }
    if (b.tracked()) {
      auto gb = b.node()->grad.data();
      for (std::int64_t i = 0; i < n; ++i) {
        gb[i] -= gy[i] * av2[i] / (bv2[i] * bv2[i]);
      }
    }
  });
  return y;
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; },
      [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& x, double c) {
  return unary_op(
      "scale", x, [c](double v) { return c * v; },
      [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [c](double v) { return v + c; },
      [](double, double) { return 1.0; });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double xv, double) { return xv > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); },
      [](double, double yv) { return yv; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); },
      [](double xv, double) { return 1.0 / xv; });
}

Tensor sigmoid(const Tensor& x) {
  return unary_op(
      "sigmoid", x,
      [](double v) {
        return v >= 0.0 ? 1.0 / (1.0 + std::exp(-v))
                        : std::exp(v) / (1.0 + std::exp(v));
      },
      [](double, double yv) { return yv * (1.0 - yv); });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::fabs(v); },
      [](double xv, double) { return xv > 0.0 ? 1.0 : (xv < 0.0 ? -1.0 : 0.0); });
}

Tensor pow_scalar(const Tensor& x, double p) {
  return unary_op(
      "pow_scalar", x, [p](double v) { return std::pow(v, p); },
      [p](double xv, double) {
        if (p == 0.0) return 0.0;
        return p * std::pow(xv, p - 1.0);
      });
}

Tensor minimum(const Tensor& a, const Tensor& b) {
  require_same_shape("minimum", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = std::min(av[i], bv[i]);
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  const Tensor in[] = {a, b};
  record_op("minimum", in, y, [a, b, y]() {
    const auto gy = y.node()->grad.data();
    const auto av2 = a.node()->data.data();
    const auto bv2 = b.node()->data.data();
    const std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      // Ties route to the first operand.
      if (av2[i] <= bv2[i]) {
        if (a.tracked()) a.node()->grad[i] += gy[i];
      } else if (b.tracked()) {
        b.node()->grad[i] += gy[i];
      }
    }
  });
  return y;
}

Tensor maximum(const Tensor& a, const Tensor& b) {
  require_same_shape("maximum", a, b);
  std::vector<double> out(a.numel());
  const auto av = a.values(), bv = b.values();
  for (std::int64_t i = 0; i < a.numel(); ++i) out[i] = std::max(av[i], bv[i]);
  Tensor y = Tensor::from_data(a.shape(), std::move(out));
  const Tensor in[] = {a, b};
  record_op("maximum", in, y, [a, b, y]() {
    const auto gy = y.node()->grad.data();
    const auto av2 = a.node()->data.data();
    const auto bv2 = b.node()->data.data();
    const std::int64_t n = y.numel();
    for (std::int64_t i = 0; i < n; ++i) {
      if (av2[i] >= bv2[i]) {
        if (a.tracked()) a.node()->grad[i] += gy[i];
      } else if (b.tracked()) {
        b.node()->grad[i] += gy[i];
      }
    }
  });
  return y;
}

Tensor clamp(const Tensor& x, double lo, double hi) {
  if (lo > hi) throw DomainError("clamp: lo > hi");
  return unary_op(
      "clamp", x,
      [lo, hi](double v) { return std::min(std::max(v, lo), hi); },
      [lo, hi](double xv, double) {
        return (xv > lo && xv < hi) ? 1.0 : 0.0;
      });
}

// --- linear algebra ----------------------------------------------------------

namespace {

void matmul_kernel(const double* a, const double* b, double* y,
                   std::int64_t n, std::int64_t k, std::int64_t m) {
  // ikj order: streams rows of b, keeps y rows hot.
  for (std::int64_t i = 0; i < n; ++i) {
    double* yi = y + i * m;
    const double* ai = a + i * k;
    for (std::int64_t p = 0; p < k; ++p) {
      const double aip = ai[p];
      const double* bp = b + p * m;
      for (std::int64_t j = 0; j < m; ++j) yi[j] += aip * bp[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  const Mat3 ma = as_mat3(a.shape());
  const Mat3 mb = as_mat3(b.shape());
  Shape lead_a(a.shape().begin(), a.shape().end() - 2);
  Shape lead_b(b.shape().begin(), b.shape().end() - 2);
  if (ma.cols != mb.rows || lead_a != lead_b) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                     " x " + shape_str(b.shape()));
  }
  Shape out_shape = lead_a;
  out_shape.push_back(static_cast<int>(ma.rows));
  out_shape.push_back(static_cast<int>(mb.cols));
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* ap = a.values().data();
    const double* bp = b.values().data();
    double* yp = y.values_mut().data();
    for (std::int64_t t = 0; t < ma.batch; ++t) {
      matmul_kernel(ap + t * ma.rows * ma.cols, bp + t * mb.rows * mb.cols,
                    yp + t * ma.rows * mb.cols, ma.rows, ma.cols, mb.cols);
    }
  }
  const Tensor in[] = {a, b};
  record_op("matmul", in, y, [a, b, y, ma, mb]() {
    const auto gy = y.node()->grad.data();
    const auto av = a.node()->data.data();
    const auto bv = b.node()->data.data();
    const std::int64_t n = ma.rows, k = ma.cols, m = mb.cols;
    for (std::int64_t t = 0; t < ma.batch; ++t) {
      const double* gyt = gy + t * n * m;
      if (a.tracked()) {
        double* ga = a.node()->grad.data() + t * n * k;
        const double* bt = bv + t * k * m;
        // dA[i,p] += dot(dY[i,:], B[p,:])
        for (std::int64_t i = 0; i < n; ++i) {
          const double* gyi = gyt + i * m;
          for (std::int64_t p = 0; p < k; ++p) {
            const double* bp = bt + p * m;
            double acc = 0.0;
            for (std::int64_t j = 0; j < m; ++j) acc += gyi[j] * bp[j];
            ga[i * k + p] += acc;
          }
        }
      }
      if (b.tracked()) {
        double* gb = b.node()->grad.data() + t * k * m;
        const double* at = av + t * n * k;
        // dB[p,:] += A[i,p] * dY[i,:]
        for (std::int64_t i = 0; i < n; ++i) {
          const double* gyi = gyt + i * m;
          const double* ai = at + i * k;
          for (std::int64_t p = 0; p < k; ++p) {
            const double aip = ai[p];
            double* gbp = gb + p * m;
            for (std::int64_t j = 0; j < m; ++j) gbp[j] += aip * gyi[j];
          }
        }
      }
    }
  });
  return y;
}

Tensor transpose_last2(const Tensor& x) {
  const Mat3 mx = as_mat3(x.shape());
  Shape out_shape = x.shape();
  std::swap(out_shape[out_shape.size() - 1], out_shape[out_shape.size() - 2]);
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    double* yp = y.values_mut().data();
    for (std::int64_t t = 0; t < mx.batch; ++t) {
      for (std::int64_t i = 0; i < mx.rows; ++i) {
        for (std::int64_t j = 0; j < mx.cols; ++j) {
          yp[t * mx.rows * mx.cols + j * mx.rows + i] =
              xp[t * mx.rows * mx.cols + i * mx.cols + j];
        }
      }
    }
  }
  const Tensor in[] = {x};
  record_op("transpose_last2", in, y, [x, y, mx]() {
    if (!x.tracked()) return;
    auto gx = x.node()->grad.data();
    const auto gy = y.node()->grad.data();
    for (std::int64_t t = 0; t < mx.batch; ++t) {
      for (std::int64_t i = 0; i < mx.rows; ++i) {
        for (std::int64_t j = 0; j < mx.cols; ++j) {
          gx[t * mx.rows * mx.cols + i * mx.cols + j] +=
              gy[t * mx.rows * mx.cols + j * mx.rows + i];
        }
      }
    }
  });
  return y;
}

Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.rank() < 1 || w.rank() != 2 || b.rank() != 1) {
    throw ShapeError("affine: expected x(...,in), w(in,out), b(out)");
  }
  const int in_w = x.shape().back();
  if (w.extent(0) != in_w || w.extent(1) != b.extent(0)) {
    throw ShapeError("affine: width mismatch x" + shape_str(x.shape()) + " w" +
                     shape_str(w.shape()) + " b" + shape_str(b.shape()));
  }
  const std::int64_t rows = x.numel() / std::max(1, in_w);
  const std::int64_t out_w = w.extent(1);
  Shape out_shape = x.shape();
  out_shape.back() = static_cast<int>(out_w);
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    const double* wp = w.values().data();
    const double* bp = b.values().data();
    double* yp = y.values_mut().data();
    for (std::int64_t i = 0; i < rows; ++i) {
      double* yi = yp + i * out_w;
      std::memcpy(yi, bp, sizeof(double) * static_cast<std::size_t>(out_w));
    }
    matmul_kernel(xp, wp, yp, rows, in_w, out_w);
  }
  const Tensor in[] = {x, w, b};
  record_op("affine", in, y, [x, w, b, y, rows, in_w, out_w]() {
    const auto gy = y.node()->grad.data();
    if (x.tracked()) {
      auto gx = x.node()->grad.data();
      const auto wv = w.node()->data.data();
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* gyi = gy + i * out_w;
        for (std::int64_t p = 0; p < in_w; ++p) {
          const double* wp = wv + p * out_w;
          double acc = 0.0;
          for (std::int64_t j = 0; j < out_w; ++j) acc += gyi[j] * wp[j];
          gx[i * in_w + p] += acc;
        }
      }
    }
    if (w.tracked()) {
      auto gw = w.node()->grad.data();
      const auto xv = x.node()->data.data();
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* gyi = gy + i * out_w;
        const double* xi = xv + i * in_w;
        for (std::int64_t p = 0; p < in_w; ++p) {
          const double xip = xi[p];
          double* gwp = gw + p * out_w;
          for (std::int64_t j = 0; j < out_w; ++j) gwp[j] += xip * gyi[j];
        }
      }
    }
    if (b.tracked()) {
      auto gb = b.node()->grad.data();
      for (std::int64_t i = 0; i < rows; ++i) {
        const double* gyi = gy + i * out_w;
        for (std::int64_t j = 0; j < out_w; ++j) gb[j] += gyi[j];
      }
    }
  });
  return y;
}

// --- reductions & normalization ----------------------------------------------

Tensor softmax_last(const Tensor& x) {
  if (x.rank() < 1 || x.shape().back() < 1) {
    throw ShapeError("softmax_last: empty last axis in " +
                     shape_str(x.shape()));
  }
  const std::int64_t m = x.shape().back();
  const std::int64_t rows = x.numel() / m;
  std::vector<double> out(x.numel());
  {
    const auto xv = x.values();
    for (std::int64_t i = 0; i < rows; ++i) {
      const double* xi = xv.data() + i * m;
      double* yi = out.data() + i * m;
      double mx = xi[0];
      for (std::int64_t j = 1; j < m; ++j) mx = std::max(mx, xi[j]);
      double s = 0.0;
      for (std::int64_t j = 0; j < m; ++j) {
        yi[j] = std::exp(xi[j] - mx);
        s += yi[j];
      }
      const double inv = 1.0 / s;
      for (std::int64_t j = 0; j < m; ++j) yi[j] *= inv;
    }
  }
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  const Tensor in[] = {x};
  record_op("softmax_last", in, y, [x, y, rows, m]() {
    if (!x.tracked()) return;
    auto gx = x.node()->grad.data();
    const auto gy = y.node()->grad.data();
    const auto yv = y.node()->data.data();
    for (std::int64_t i = 0; i < rows; ++i) {
      const double* gyi = gy + i * m;
      const double* yi = yv + i * m;
      double dot = 0.0;
      for (std::int64_t j = 0; j < m; ++j) dot += gyi[j] * yi[j];
      double* gxi = gx + i * m;
      for (std::int64_t j = 0; j < m; ++j) gxi[j] += (gyi[j] - dot) * yi[j];
    }
  });
  return y;
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps) {
  const std::int64_t m = x.shape().back();
  if (gamma.rank() != 1 || beta.rank() != 1 || gamma.extent(0) != m ||
      beta.extent(0) != m) {
    throw ShapeError("layer_norm: gain/shift must match last axis");
  }
  const std::int64_t rows = x.numel() / m;
  std::vector<double> out(x.numel());
  std::vector<double> inv_std(rows), mean_row(rows);
  {
    const auto xv = x.values();
    const auto gv = gamma.values();
    const auto bv = beta.values();
    for (std::int64_t i = 0; i < rows; ++i) {
      const double* xi = xv.data() + i * m;
      double mu = 0.0;
      for (std::int64_t j = 0; j < m; ++j) mu += xi[j];
      mu /= static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t j = 0; j < m; ++j) var += (xi[j] - mu) * (xi[j] - mu);
      var /= static_cast<double>(m);
      const double is = 1.0 / std::sqrt(var + eps);
      mean_row[i] = mu;
      inv_std[i] = is;
      double* yi = out.data() + i * m;
      for (std::int64_t j = 0; j < m; ++j) {
        yi[j] = (xi[j] - mu) * is * gv[j] + bv[j];
      }
    }
  }
  Tensor y = Tensor::from_data(x.shape(), std::move(out));
  const Tensor in[] = {x, gamma, beta};
  record_op("layer_norm", in, y,
            [x, gamma, beta, y, rows, m, inv_std, mean_row]() {
    const auto gy = y.node()->grad.data();
    const auto xv = x.node()->data.data();
    const auto gv = gamma.node()->data.data();
    for (std::int64_t i = 0; i < rows; ++i) {
      const double* gyi = gy + i * m;
      const double* xi = xv + i * m;
      const double mu = mean_row[i];
      const double is = inv_std[i];
      if (gamma.tracked() || beta.tracked()) {
        for (std::int64_t j = 0; j < m; ++j) {
          const double xhat = (xi[j] - mu) * is;
          if (gamma.tracked()) gamma.node()->grad[j] += gyi[j] * xhat;
          if (beta.tracked()) beta.node()->grad[j] += gyi[j];
        }
      }
      if (x.tracked()) {
        double sum_g = 0.0, sum_gx = 0.0;
        for (std::int64_t j = 0; j < m; ++j) {
          const double gj = gyi[j] * gv[j];
          sum_g += gj;
          sum_gx += gj * (xi[j] - mu) * is;
        }
        double* gxi = x.node()->grad.data() + i * m;
        const double inv_m = 1.0 / static_cast<double>(m);
        for (std::int64_t j = 0; j < m; ++j) {
          const double gj = gyi[j] * gv[j];
          const double xhat = (xi[j] - mu) * is;
          gxi[j] += is * (gj - inv_m * sum_g - inv_m * xhat * sum_gx);
        }
      }
    }
  });
  return y;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.values()) s += v;
  Tensor y = Tensor::scalar(s);
  const Tensor in[] = {x};
  record_op("sum", in, y, [x, y]() {
    if (!x.tracked()) return;
    const double g = y.node()->grad[0];
    auto gx = x.node()->grad.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return y;
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw DomainError("mean of empty tensor");
  double s = 0.0;
  for (double v : x.values()) s += v;
  const double inv = 1.0 / static_cast<double>(x.numel());
  Tensor y = Tensor::scalar(s * inv);
  const Tensor in[] = {x};
  record_op("mean", in, y, [x, y, inv]() {
    if (!x.tracked()) return;
    const double g = y.node()->grad[0] * inv;
    auto gx = x.node()->grad.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += g;
  });
  return y;
}

// --- structure ---------------------------------------------------------------

Tensor concat(std::span<const Tensor> parts, int axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const int r = parts[0].rank();
  if (axis < 0 || axis >= r) throw ShapeError("concat: bad axis");
  Shape out_shape = parts[0].shape();
  int total = 0;
  for (const Tensor& p : parts) {
    if (p.rank() != r) throw ShapeError("concat: rank mismatch");
    for (int ax = 0; ax < r; ++ax) {
      if (ax != axis && p.shape()[ax] != out_shape[ax]) {
        throw ShapeError("concat: extent mismatch at axis " +
                         std::to_string(ax));
      }
    }
    total += p.shape()[axis];
  }
  out_shape[axis] = total;

  // outer x axis x inner layout
  std::int64_t outer = 1, inner = 1;
  for (int ax = 0; ax < axis; ++ax) outer *= out_shape[ax];
  for (int ax = axis + 1; ax < r; ++ax) inner *= out_shape[ax];

  Tensor y = Tensor::zeros(out_shape);
  {
    double* yp = y.values_mut().data();
    const std::int64_t ystride = static_cast<std::int64_t>(total) * inner;
    std::int64_t off = 0;
    for (const Tensor& p : parts) {
      const std::int64_t pa = p.shape()[axis];
      const double* pp = p.values().data();
      for (std::int64_t o = 0; o < outer; ++o) {
        std::memcpy(yp + o * ystride + off * inner, pp + o * pa * inner,
                    sizeof(double) * static_cast<std::size_t>(pa * inner));
      }
      off += pa;
    }
  }
  std::vector<Tensor> held(parts.begin(), parts.end());
  record_op("concat", parts, y, [held, y, axis, outer, inner, total]() {
    const auto gy = y.node()->grad.data();
    const std::int64_t ystride = static_cast<std::int64_t>(total) * inner;
    std::int64_t off = 0;
    for (const Tensor& p : held) {
      const std::int64_t pa = p.shape()[axis];
      if (p.tracked()) {
        auto gp = p.node()->grad.data();
        for (std::int64_t o = 0; o < outer; ++o) {
          const double* src = gy + o * ystride + off * inner;
          double* dst = gp + o * pa * inner;
          for (std::int64_t i = 0; i < pa * inner; ++i) dst[i] += src[i];
        }
      }
      off += pa;
    }
  });
  return y;
}

Tensor slice_last(const Tensor& x, int start, int len) {
  const int m = x.shape().back();
  if (start < 0 || len < 0 || start + len > m) {
    throw ShapeError("slice_last: range [" + std::to_string(start) + "," +
                     std::to_string(start + len) + ") exceeds extent " +
                     std::to_string(m));
  }
  const std::int64_t rows = x.numel() / std::max(1, m);
  Shape out_shape = x.shape();
  out_shape.back() = len;
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    double* yp = y.values_mut().data();
    for (std::int64_t i = 0; i < rows; ++i) {
      std::memcpy(yp + i * len, xp + i * m + start,
                  sizeof(double) * static_cast<std::size_t>(len));
    }
  }
  const Tensor in[] = {x};
  record_op("slice_last", in, y, [x, y, start, len, rows, m]() {
    if (!x.tracked()) return;
    auto gx = x.node()->grad.data();
    const auto gy = y.node()->grad.data();
    for (std::int64_t i = 0; i < rows; ++i) {
      for (int j = 0; j < len; ++j) gx[i * m + start + j] += gy[i * len + j];
    }
  });
  return y;
}

Tensor reshape(const Tensor& x, Shape shape) {
  validate_shape(shape);
  if (shape_numel(shape) != x.numel()) {
    throw ShapeError("reshape: numel mismatch " + shape_str(x.shape()) +
                     " -> " + shape_str(shape));
  }
  Tensor y = Tensor::from_data(
      shape, std::vector<double>(x.values().begin(), x.values().end()));
  const Tensor in[] = {x};
  record_op("reshape", in, y, [x, y]() {
    if (!x.tracked()) return;
    auto gx = x.node()->grad.data();
    const auto gy = y.node()->grad.data();
    const std::int64_t n = x.numel();
    for (std::int64_t i = 0; i < n; ++i) gx[i] += gy[i];
  });
  return y;
}

Tensor gather_rows(const Tensor& x, std::span<const int> indices) {
  if (x.rank() < 1) throw ShapeError("gather_rows: rank 0 input");
  const int nrows = x.extent(0);
  const std::int64_t inner = x.numel() / std::max(1, nrows);
  for (int i : indices) {
    if (i < 0 || i >= nrows) {
      throw ShapeError("gather_rows: index " + std::to_string(i) +
                       " out of range [0," + std::to_string(nrows) + ")");
    }
  }
  Shape out_shape = x.shape();
  out_shape[0] = static_cast<int>(indices.size());
  Tensor y = Tensor::zeros(out_shape);
  {
    const double* xp = x.values().data();
    double* yp = y.values_mut().data();
    for (std::size_t r = 0; r < indices.size(); ++r) {
      std::memcpy(yp + static_cast<std::int64_t>(r) * inner,
                  xp + static_cast<std::int64_t>(indices[r]) * inner,
                  sizeof(double) * static_cast<std::size_t>(inner));
    }
  }
  std::vector<int> idx(indices.begin(), indices.end());
  const Tensor in[] = {x};
  record_op("gather_rows", in, y, [x, y, idx, inner]() {
    if (!x.tracked()) return;
    auto gx = x.node()->grad.data();
    const auto gy = y.node()->grad.data();
    for (std::size_t r = 0; r < idx.size(); ++r) {
      const double* src = gy + static_cast<std::int64_t>(r) * inner;
      double* dst = gx + static_cast<std::int64_t>(idx[r]) * inner;
      for (std::int64_t i = 0; i < inner; ++i) dst[i] += src[i];
    }
  });
  return y;
}

Tensor broadcast_add(const Tensor& bx, const Tensor& by) {
  if (bx.rank() != 3 || by.rank() != 3 || bx.extent(0) != by.extent(0) ||
      bx.extent(2) != by.extent(2)) {
    throw ShapeError("broadcast_add: expected bx(K,W,M), by(K,H,M), got " +
                     shape_str(bx.shape()) + " and " + shape_str(by.shape()));
  }
  const int K = bx.extent(0), W = bx.extent(1), H = by.extent(1),
            M = bx.extent(2);
  Tensor y = Tensor::zeros({K, H, W, M});
  {
    const double* xp = bx.values().data();
    const double* yp2 = by.values().data();
    double* op = y.values_mut().data();
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < H; ++i) {
        const double* byk = yp2 + (static_cast<std::int64_t>(k) * H + i) * M;
        for (int j = 0; j < W; ++j) {
          const double* bxk = xp + (static_cast<std::int64_t>(k) * W + j) * M;
          double* out = op + ((static_cast<std::int64_t>(k) * H + i) * W + j) * M;
          for (int m = 0; m < M; ++m) out[m] = bxk[m] + byk[m];
        }
      }
    }
  }
  const Tensor in[] = {bx, by};
  record_op("broadcast_add", in, y, [bx, by, y, K, H, W, M]() {
    const auto gy = y.node()->grad.data();
    for (int k = 0; k < K; ++k) {
      for (int i = 0; i < H; ++i) {
        for (int j = 0; j < W; ++j) {
          const double* g =
              gy + ((static_cast<std::int64_t>(k) * H + i) * W + j) * M;
          if (bx.tracked()) {
            double* gx =
                bx.node()->grad.data() + (static_cast<std::int64_t>(k) * W + j) * M;
            for (int m = 0; m < M; ++m) gx[m] += g[m];
          }
          if (by.tracked()) {
            double* gyk =
                by.node()->grad.data() + (static_cast<std::int64_t>(k) * H + i) * M;
            for (int m = 0; m < M; ++m) gyk[m] += g[m];
          }
        }
      }
    }
  });
  return y;
}

Tensor detach(const Tensor& x) { return x.clone(); }

}  // namespace plaindet
