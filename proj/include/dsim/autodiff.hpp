#pragma once

// Reverse-mode automatic differentiation over dense row-major double tensors.
//
// A Tape records every operation whose inputs require gradients. Values live
// in tape nodes; a Var is a (tape, node) handle. Ops validate shapes and throw
// dsim::Error on shape mismatch, domain errors (log of non-positive, division
// by zero) and any non-finite result.

#include <deque>
#include <functional>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

#include "dsim/core.hpp"

namespace dsim::ad {

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double v) { return Tensor({}, std::vector<double>{v}); }
  static Tensor vector(std::vector<double> v);

  const Shape& shape() const { return shape_; }
  int rank() const { return static_cast<int>(shape_.size()); }
  int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
  std::size_t size() const { return data_.size(); }

  std::span<double> data() { return data_; }
  std::span<const double> data() const { return data_; }
  std::vector<double>& storage() { return data_; }
  const std::vector<double>& storage() const { return data_; }

  double& operator[](std::size_t i) { return data_[i]; }
  const double& operator[](std::size_t i) const { return data_[i]; }
  double item() const;

  Tensor reshaped(Shape shape) const;
  bool all_finite() const;

 private:
  Shape shape_;
  std::vector<double> data_;
};

class Tape;

class Var {
 public:
  Var() = default;

  Tape* tape() const { return tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }
  const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }
  std::size_t size() const { return value().size(); }
  double item() const { return value().item(); }
  bool requires_grad() const;

 private:
  friend class Tape;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Gradients {
 public:
  /// Gradient for a recorded node. Zero tensor of the right shape when the
  /// loss does not depend on it.
  Tensor operator[](Var v) const;
  bool has(Var v) const;

 private:
  friend class Tape;
  const Tape* tape_ = nullptr;
  std::vector<Tensor> grads_;
};

class Tape {
 public:
  /// Backward callback: grad_out is dL/d(output); grad_in[k] (null when input
  /// k needs no gradient) accumulates dL/d(input k).
  using BackwardFn =
      std::function<void(const Tensor& grad_out, std::span<Tensor*> grad_in)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value);
  /// Leaf whose value is owned elsewhere and outlives the tape.
  Var leaf_ref(const Tensor* value);
  Var constant(Tensor value);
  Var constant_ref(const Tensor* value);
  Var scalar(double v) { return constant(Tensor::scalar(v)); }

  /// Records an op. The backward callback is dropped when no input requires
  /// a gradient.
  Var record(Tensor value, std::vector<Var> inputs, BackwardFn backward,
             const char* op_name);

  Gradients backward(Var loss) const;

  std::size_t size() const { return nodes_.size(); }
  const Tensor& value(int id) const;
  bool requires_grad(int id) const;

 private:
  struct Node {
    Tensor owned;
    const Tensor* external = nullptr;
    std::vector<int> inputs;
    BackwardFn backward;
    bool requires_grad = false;
  };
  Var push(Node node);
  std::deque<Node> nodes_;
};

// ---- elementwise binary (equal shapes, or either side a single element) ----
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);
Var div(Var a, Var b);
/// Elementwise max/min. At ties both inputs receive zero gradient.
Var maximum(Var a, Var b);
Var minimum(Var a, Var b);
Var atan2(Var y, Var x);

Var add(Var a, double b);
Var mul(Var a, double b);
Var neg(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, Var b) { return mul(a, b); }
inline Var operator/(Var a, Var b) { return div(a, b); }
inline Var operator+(Var a, double b) { return add(a, b); }
inline Var operator+(double a, Var b) { return add(b, a); }
inline Var operator-(Var a, double b) { return add(a, -b); }
inline Var operator-(double a, Var b) { return add(neg(b), a); }
inline Var operator*(Var a, double b) { return mul(a, b); }
inline Var operator*(double a, Var b) { return mul(b, a); }
inline Var operator/(Var a, double b) { return mul(a, 1.0 / b); }
inline Var operator-(Var a) { return neg(a); }

// ---- elementwise unary ----
Var exp(Var a);
Var log(Var a);
Var sin(Var a);
Var cos(Var a);
Var sqrt(Var a);
Var square(Var a);
Var sigmoid(Var a);
Var tanh(Var a);
/// Subgradient 0 at the kink.
Var relu(Var a);
Var softplus(Var a);
/// Value wrapped to (-pi, pi]; gradient passes through unchanged.
Var wrap_angle(Var a);

// ---- reductions ----
Var sum(Var a);
Var mean(Var a);
/// Max/min over all elements. Tied extremes receive zero gradient.
Var max(Var a);
Var min(Var a);

// ---- linear algebra ----
/// (m x k) * (k x n).
Var matmul(Var a, Var b);
/// W (out x in) * x (in) + b (out).
Var linear(Var w, Var x, Var b);
/// Cross-correlation (no kernel flip). x: C x H x W, w: O x C x k x k, b: O.
Var conv2d(Var x, Var w, Var b, int stride, int padding);

// ---- shape ----
Var reshape(Var a, Shape shape);
/// Flat slice [start, start+len) into a 1-D tensor.
Var slice(Var a, std::size_t start, std::size_t len);
Var index(Var a, std::size_t i);
/// Concatenates the flattened inputs into a 1-D tensor.
Var concat(const std::vector<Var>& parts);
/// Numpy-style broadcast to a larger shape.
Var broadcast_to(Var a, Shape shape);

/// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
/// Throws if f is non-finite at a perturbed point.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps);
/// Same, restricted to the listed coordinates.
double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps, std::span<const std::size_t> coords);

}  // namespace dsim::ad
