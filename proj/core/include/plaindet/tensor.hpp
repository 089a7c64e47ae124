// Copyright (c) 2026 plaindet authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace plaindet {

/// Tensor extents. Extents are non-negative; a zero extent yields an empty
/// tensor of well-defined shape (e.g. a cost matrix against zero targets).
using Shape = std::vector<int>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DomainError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

/// Toggle for NaN/Inf scanning after every forward op. On by default; the
/// trainer turns it off for throughput and checks the loss scalar instead.
void set_finite_checks(bool on);
bool finite_checks_enabled();

class Tape;

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated iff tracked
  bool requires_grad = false;
  bool tracked = false;
};

}  // namespace detail

/// Dense row-major tensor of doubles with optional gradient accumulation.
/// Copying a Tensor copies the handle, not the storage.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, double value);
  static Tensor from_data(Shape shape, std::vector<double> data);
  static Tensor scalar(double value);

  bool defined() const { return n_ != nullptr; }
  const Shape& shape() const;
  int rank() const;
  std::int64_t numel() const;
  int extent(int axis) const;

  std::span<const double> values() const;
  /// Mutable view of the raw values. Intended for parameter updates and for
  /// filling constants; mutating a tensor that already fed recorded ops
  /// invalidates their gradients.
  std::span<double> values_mut();
  double item() const;
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  /// Marks a leaf parameter; allocates the gradient accumulator.
  void set_requires_grad(bool on);
  /// True if this tensor carries a gradient buffer (leaf or recorded output).
  bool tracked() const;
  std::span<double> grad();
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy with no graph history.
  Tensor clone() const;

  const std::shared_ptr<detail::Node>& node() const { return n_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : n_(std::move(n)) {}
  std::shared_ptr<detail::Node> n_;

  friend Tensor make_from_node(std::shared_ptr<detail::Node> n);
};

Tensor make_from_node(std::shared_ptr<detail::Node> n);

/// Ordered record of executed primitive ops. Backward replays the record in
/// exact reverse execution order; gradients accumulate additively across
/// fan-out. A tape and the tensors recorded on it are a single-threaded unit.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  std::size_t num_ops() const { return entries_.size(); }

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tracked
  /// tensor. Repeated calls without zero_grad accumulate into leaves.
  void backward(const Tensor& loss);

 private:
  struct Entry {
    const char* name;
    std::shared_ptr<detail::Node> out;
    std::function<void()> back;
  };
  std::vector<Entry> entries_;

  friend void record_op(const char* name, std::span<const Tensor> inputs,
                        Tensor& out, std::function<void()> back);
};

void backward(Tape& tape, const Tensor& loss);

/// Installs `tape` as the active recording target for the current thread.
class TapeScope {
 public:
  explicit TapeScope(Tape& tape);
  ~TapeScope();
  TapeScope(const TapeScope&) = delete;
  TapeScope& operator=(const TapeScope&) = delete;

 private:
  Tape* prev_;
};

Tape* active_tape();

/// Finalizes a primitive: scans the output for NaN/Inf (when enabled) and, if
/// a tape is active and any input is tracked, marks the output tracked and
/// appends the backward closure. Custom primitives in other modules use this.
void record_op(const char* name, std::span<const Tensor> inputs, Tensor& out,
               std::function<void()> back);
bool any_tracked(std::span<const Tensor> inputs);
void check_finite(const char* name, const Tensor& t);

// --- primitives -------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

Tensor relu(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor abs(const Tensor& x);
/// x^p with constant exponent. For non-integer p the domain is x >= 0.
Tensor pow_scalar(const Tensor& x, double p);
Tensor minimum(const Tensor& a, const Tensor& b);
Tensor maximum(const Tensor& a, const Tensor& b);
Tensor clamp(const Tensor& x, double lo, double hi);

/// Matrix product over the last two axes, batched over equal leading axes.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose_last2(const Tensor& x);
/// x(..., in) @ w(in, out) + b(out), bias broadcast over rows.
Tensor affine(const Tensor& x, const Tensor& w, const Tensor& b);

/// Numerically stabilized softmax over the last axis.
Tensor softmax_last(const Tensor& x);
/// Normalization over the last axis with learned gain/shift.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                  double eps = 1e-5);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor concat(std::span<const Tensor> parts, int axis);
Tensor slice_last(const Tensor& x, int start, int len);
Tensor reshape(const Tensor& x, Shape shape);
/// Rows of x (axis 0) at the given indices; backward scatter-adds.
Tensor gather_rows(const Tensor& x, std::span<const int> indices);

/// The Eq.-style axial broadcast: bx(K,W,M) + by(K,H,M) -> (K,H,W,M), i.e.
/// out[k,i,j,m] = bx[k,j,m] + by[k,i,m], one addition per element.
Tensor broadcast_add(const Tensor& bx, const Tensor& by);

/// Value copy with the graph history cut.
Tensor detach(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator*(double c, const Tensor& x) { return scale(x, c); }

}  // namespace plaindet
