#include "dsim/autodiff.hpp"

#include <memory>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

namespace dsim::ad {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw Error("negative dimension in shape " + shape_str(shape));
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
  if (data_.size() != shape_numel(shape_)) {
    throw Error("tensor: data length " + std::to_string(data_.size()) +
                " does not match shape " + shape_str(shape_));
  }
}

Tensor Tensor::vector(std::vector<double> v) {
  const int n = static_cast<int>(v.size());
  return Tensor({n}, std::move(v));
}

double Tensor::item() const {
  if (data_.size() != 1) {
    throw Error("tensor: item() on tensor of shape " + shape_str(shape_));
  }
  return data_[0];
}

Tensor Tensor::reshaped(Shape shape) const {
  if (shape_numel(shape) != data_.size()) {
    throw Error("reshape: cannot view " + shape_str(shape_) + " as " +
                shape_str(shape));
  }
  return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(),
                     [](double v) { return std::isfinite(v); });
}

const Tensor& Var::value() const {
  if (!tape_) throw Error("var: use of an unbound variable");
  return tape_->value(id_);
}

bool Var::requires_grad() const { return tape_ && tape_->requires_grad(id_); }

// ---------------------------------------------------------------------------
// Tape

const Tensor& Tape::value(int id) const {
  const Node& n = nodes_.at(static_cast<std::size_t>(id));
  return n.external ? *n.external : n.owned;
}

bool Tape::requires_grad(int id) const {
  return nodes_.at(static_cast<std::size_t>(id)).requires_grad;
}

Var Tape::push(Node node) {
  nodes_.push_back(std::move(node));
  return Var(this, static_cast<int>(nodes_.size() - 1));
}

Var Tape::leaf(Tensor value) {
  Node n;
  n.owned = std::move(value);
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::leaf_ref(const Tensor* value) {
  Node n;
  n.external = value;
  n.requires_grad = true;
  return push(std::move(n));
}

Var Tape::constant(Tensor value) {
  Node n;
  n.owned = std::move(value);
  return push(std::move(n));
}

Var Tape::constant_ref(const Tensor* value) {
  Node n;
  n.external = value;
  return push(std::move(n));
}

Var Tape::record(Tensor value, std::vector<Var> inputs, BackwardFn backward,
                 const char* op_name) {
  if (!value.all_finite()) {
    throw Error(std::string(op_name) + ": non-finite result");
  }
  Node n;
  n.owned = std::move(value);
  n.inputs.reserve(inputs.size());
  for (const Var& v : inputs) {
    if (v.tape() != this) {
      throw Error(std::string(op_name) + ": operand recorded on another tape");
    }
    n.inputs.push_back(v.id());
    n.requires_grad = n.requires_grad || requires_grad(v.id());
  }
  if (n.requires_grad) n.backward = std::move(backward);
  return push(std::move(n));
}

Gradients Tape::backward(Var loss) const {
  if (loss.tape() != this) throw Error("backward: loss from another tape");
  if (loss.size() != 1) {
    throw Error("backward: loss must be scalar, got shape " +
                shape_str(loss.shape()));
  }
  Gradients g;
  g.tape_ = this;
  g.grads_.resize(nodes_.size());
  g.grads_[static_cast<std::size_t>(loss.id())] = Tensor(loss.shape(), 1.0);
  std::vector<Tensor*> gin;
  for (int id = loss.id(); id >= 0; --id) {
    const Node& node = nodes_[static_cast<std::size_t>(id)];
    Tensor& gout = g.grads_[static_cast<std::size_t>(id)];
    if (gout.size() == 0 || !node.backward) continue;
    gin.assign(node.inputs.size(), nullptr);
    for (std::size_t k = 0; k < node.inputs.size(); ++k) {
      const int in = node.inputs[k];
      if (!requires_grad(in)) continue;
      Tensor& gi = g.grads_[static_cast<std::size_t>(in)];
      if (gi.size() == 0 && value(in).size() != 0) {
        gi = Tensor(value(in).shape(), 0.0);
      }
      gin[k] = &gi;
    }
    node.backward(gout, gin);
  }
  return g;
}

Tensor Gradients::operator[](Var v) const {
  if (has(v)) return grads_[static_cast<std::size_t>(v.id())];
  return Tensor(v.shape(), 0.0);
}

bool Gradients::has(Var v) const {
  return v.tape() == tape_ && v.id() >= 0 &&
         static_cast<std::size_t>(v.id()) < grads_.size() &&
         grads_[static_cast<std::size_t>(v.id())].size() != 0;
}

// ---------------------------------------------------------------------------
// elementwise helpers

namespace {

struct BinaryLayout {
  Shape shape;
  bool a_scalar = false;
  bool b_scalar = false;
  std::size_t n = 0;
};

BinaryLayout binary_layout(const Tensor& a, const Tensor& b, const char* op) {
  BinaryLayout l;
  if (a.shape() == b.shape()) {
    l.shape = a.shape();
  } else if (a.size() == 1) {
    l.shape = b.shape();
    l.a_scalar = true;
  } else if (b.size() == 1) {
    l.shape = a.shape();
    l.b_scalar = true;
  } else {
    throw Error(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                " vs " + shape_str(b.shape()));
  }
  l.n = shape_numel(l.shape);
  return l;
}

// f(a, b) -> value; da(a, b, out) and db(a, b, out) give local partials.
template <class F, class DA, class DB>
Var binary_op(Var a, Var b, const char* name, F f, DA da, DB db) {
  Tape* tape = a.tape();
  if (tape == nullptr || tape != b.tape()) {
    throw Error(std::string(name) + ": operands on different tapes");
  }
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  const BinaryLayout l = binary_layout(av, bv, name);
  Tensor out(l.shape);
  for (std::size_t i = 0; i < l.n; ++i) {
    out[i] = f(av[l.a_scalar ? 0 : i], bv[l.b_scalar ? 0 : i]);
  }
  const int ia = a.id(), ib = b.id();
  auto backward = [tape, ia, ib, l, da, db](const Tensor& g,
                                            std::span<Tensor*> gin) {
    const Tensor& av = tape->value(ia);
    const Tensor& bv = tape->value(ib);
    for (std::size_t i = 0; i < l.n; ++i) {
      const double x = av[l.a_scalar ? 0 : i];
      const double y = bv[l.b_scalar ? 0 : i];
      if (gin[0]) (*gin[0])[l.a_scalar ? 0 : i] += g[i] * da(x, y);
      if (gin[1]) (*gin[1])[l.b_scalar ? 0 : i] += g[i] * db(x, y);
    }
  };
  return tape->record(std::move(out), {a, b}, backward, name);
}

// f(x) -> value; df(x, y) local derivative given input x and output y.
template <class F, class DF>
Var unary_op(Var a, const char* name, F f, DF df) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  const int ia = a.id();
  const int io = static_cast<int>(tape->size());  // id the output will get
  auto backward = [tape, ia, io, df](const Tensor& g, std::span<Tensor*> gin) {
    const Tensor& x = tape->value(ia);
    const Tensor& y = tape->value(io);
    for (std::size_t i = 0; i < x.size(); ++i) {
      (*gin[0])[i] += g[i] * df(x[i], y[i]);
    }
  };
  return tape->record(std::move(out), {a}, backward, name);
}

double stable_sigmoid(double x) {
  if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

Var add(Var a, Var b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

Var div(Var a, Var b) {
  for (double d : b.value().data()) {
    if (d == 0.0) throw Error("div: division by zero");
  }
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var maximum(Var a, Var b) {
  return binary_op(
      a, b, "maximum", [](double x, double y) { return x > y ? x : y; },
      [](double x, double y) { return x > y ? 1.0 : 0.0; },
      [](double x, double y) { return y > x ? 1.0 : 0.0; });
}

Var minimum(Var a, Var b) {
  return binary_op(
      a, b, "minimum", [](double x, double y) { return x < y ? x : y; },
      [](double x, double y) { return x < y ? 1.0 : 0.0; },
      [](double x, double y) { return y < x ? 1.0 : 0.0; });
}

Var atan2(Var y, Var x) {
  const Tensor& yv = y.value();
  const Tensor& xv = x.value();
  const BinaryLayout l = binary_layout(yv, xv, "atan2");
  for (std::size_t i = 0; i < l.n; ++i) {
    if (yv[l.a_scalar ? 0 : i] == 0.0 && xv[l.b_scalar ? 0 : i] == 0.0) {
      throw Error("atan2: undefined at the origin");
    }
  }
  return binary_op(
      y, x, "atan2", [](double a, double b) { return std::atan2(a, b); },
      [](double a, double b) { return b / (a * a + b * b); },
      [](double a, double b) { return -a / (a * a + b * b); });
}

Var add(Var a, double b) {
  return unary_op(
      a, "add_scalar", [b](double x) { return x + b; },
      [](double, double) { return 1.0; });
}

Var mul(Var a, double b) {
  return unary_op(
      a, "mul_scalar", [b](double x) { return x * b; },
      [b](double, double) { return b; });
}

Var neg(Var a) { return mul(a, -1.0); }

Var exp(Var a) {
  return unary_op(
      a, "exp", [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().data()) {
    if (!(v > 0.0)) throw Error("log: non-positive argument");
  }
  return unary_op(
      a, "log", [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

Var sin(Var a) {
  return unary_op(
      a, "sin", [](double x) { return std::sin(x); },
      [](double x, double) { return std::cos(x); });
}

Var cos(Var a) {
  return unary_op(
      a, "cos", [](double x) { return std::cos(x); },
      [](double x, double) { return -std::sin(x); });
}

Var sqrt(Var a) {
  for (double v : a.value().data()) {
    if (v < 0.0) throw Error("sqrt: negative argument");
  }
  // zero gradient at 0 where the derivative is unbounded
  return unary_op(
      a, "sqrt", [](double x) { return std::sqrt(x); },
      [](double, double y) { return y > 0.0 ? 0.5 / y : 0.0; });
}

Var square(Var a) {
  return unary_op(
      a, "square", [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Var sigmoid(Var a) {
  return unary_op(a, "sigmoid", stable_sigmoid,
                  [](double, double y) { return y * (1.0 - y); });
}

Var tanh(Var a) {
  return unary_op(
      a, "tanh", [](double x) { return std::tanh(x); },
      [](double, double y) { return 1.0 - y * y; });
}

Var relu(Var a) {
  return unary_op(
      a, "relu", [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Var softplus(Var a) {
  return unary_op(
      a, "softplus",
      [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x))); },
      [](double x, double) { return stable_sigmoid(x); });
}

Var wrap_angle(Var a) {
  return unary_op(
      a, "wrap_angle", [](double x) { return dsim::wrap_angle(x); },
      [](double, double) { return 1.0; });
}

// ---------------------------------------------------------------------------
// reductions

Var sum(Var a) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  double s = 0.0;
  for (double v : av.data()) s += v;
  return tape->record(
      Tensor::scalar(s), {a},
      [](const Tensor& g, std::span<Tensor*> gin) {
        for (double& v : gin[0]->data()) v += g[0];
      },
      "sum");
}

Var mean(Var a) {
  const std::size_t n = a.size();
  if (n == 0) throw Error("mean: empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(n));
}

namespace {

Var extreme(Var a, bool want_max, const char* name) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  if (av.size() == 0) throw Error(std::string(name) + ": empty tensor");
  std::size_t best = 0;
  int count = 1;
  for (std::size_t i = 1; i < av.size(); ++i) {
    const bool better = want_max ? av[i] > av[best] : av[i] < av[best];
    if (better) {
      best = i;
      count = 1;
    } else if (av[i] == av[best]) {
      ++count;
    }
  }
  const bool unique = count == 1;
  return tape->record(
      Tensor::scalar(av[best]), {a},
      [best, unique](const Tensor& g, std::span<Tensor*> gin) {
        if (unique) (*gin[0])[best] += g[0];
      },
      name);
}

}  // namespace

Var max(Var a) { return extreme(a, true, "max"); }
Var min(Var a) { return extreme(a, false, "min"); }

// ---------------------------------------------------------------------------
// linear algebra

Var matmul(Var a, Var b) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw Error("matmul: incompatible shapes " + shape_str(av.shape()) +
                " x " + shape_str(bv.shape()));
  }
  const int m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  for (int i = 0; i < m; ++i) {
    double* row = &out[static_cast<std::size_t>(i) * n];
    for (int p = 0; p < k; ++p) {
      const double x = av[static_cast<std::size_t>(i) * k + p];
      const double* brow = &bv[static_cast<std::size_t>(p) * n];
      for (int j = 0; j < n; ++j) row[j] += x * brow[j];
    }
  }
  const int ia = a.id(), ib = b.id();
  return tape->record(
      std::move(out), {a, b},
      [tape, ia, ib, m, k, n](const Tensor& g, std::span<Tensor*> gin) {
        const Tensor& av = tape->value(ia);
        const Tensor& bv = tape->value(ib);
        if (gin[0]) {  // dA = G * B^T
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              double acc = 0.0;
              for (int j = 0; j < n; ++j)
                acc += g[static_cast<std::size_t>(i) * n + j] *
                       bv[static_cast<std::size_t>(p) * n + j];
              (*gin[0])[static_cast<std::size_t>(i) * k + p] += acc;
            }
        }
        if (gin[1]) {  // dB = A^T * G
          for (int i = 0; i < m; ++i)
            for (int p = 0; p < k; ++p) {
              const double x = av[static_cast<std::size_t>(i) * k + p];
              for (int j = 0; j < n; ++j)
                (*gin[1])[static_cast<std::size_t>(p) * n + j] +=
                    x * g[static_cast<std::size_t>(i) * n + j];
            }
        }
      },
      "matmul");
}

Var linear(Var w, Var x, Var b) {
  Tape* tape = w.tape();
  const Tensor& wv = w.value();
  const Tensor& xv = x.value();
  const Tensor& bv = b.value();
  if (wv.rank() != 2 || static_cast<std::size_t>(wv.dim(1)) != xv.size() ||
      static_cast<std::size_t>(wv.dim(0)) != bv.size()) {
    throw Error("linear: incompatible shapes W" + shape_str(wv.shape()) +
                " x" + shape_str(xv.shape()) + " b" + shape_str(bv.shape()));
  }
  const int out_dim = wv.dim(0), in_dim = wv.dim(1);
  Tensor out({out_dim});
  for (int o = 0; o < out_dim; ++o) {
    const double* row = &wv[static_cast<std::size_t>(o) * in_dim];
    double acc = bv[static_cast<std::size_t>(o)];
    for (int i = 0; i < in_dim; ++i) acc += row[i] * xv[static_cast<std::size_t>(i)];
    out[static_cast<std::size_t>(o)] = acc;
  }
  const int iw = w.id(), ix = x.id();
  return tape->record(
      std::move(out), {w, x, b},
      [tape, iw, ix, out_dim, in_dim](const Tensor& g, std::span<Tensor*> gin) {
        const Tensor& wv = tape->value(iw);
        const Tensor& xv = tape->value(ix);
        for (int o = 0; o < out_dim; ++o) {
          const double go = g[static_cast<std::size_t>(o)];
          if (go == 0.0) continue;
          const std::size_t off = static_cast<std::size_t>(o) * in_dim;
          if (gin[0]) {
            double* gw = &(*gin[0])[off];
            for (int i = 0; i < in_dim; ++i) gw[i] += go * xv[static_cast<std::size_t>(i)];
          }
          if (gin[1]) {
            double* gx = &(*gin[1])[0];
            const double* row = &wv[off];
            for (int i = 0; i < in_dim; ++i) gx[i] += go * row[i];
          }
        }
        if (gin[2]) {
          for (int o = 0; o < out_dim; ++o)
            (*gin[2])[static_cast<std::size_t>(o)] += g[static_cast<std::size_t>(o)];
        }
      },
      "linear");
}

Var conv2d(Var x, Var w, Var b, int stride, int padding) {
  Tape* tape = x.tape();
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  const Tensor& bv = b.value();
  if (xv.rank() != 3 || wv.rank() != 4 || wv.dim(1) != xv.dim(0) ||
      wv.dim(2) != wv.dim(3) || static_cast<int>(bv.size()) != wv.dim(0)) {
    throw Error("conv2d: incompatible shapes x" + shape_str(xv.shape()) +
                " w" + shape_str(wv.shape()) + " b" + shape_str(bv.shape()));
  }
  if (stride < 1 || padding < 0) throw Error("conv2d: bad stride/padding");
  const int C = xv.dim(0), H = xv.dim(1), W = xv.dim(2);
  const int O = wv.dim(0), K = wv.dim(2);
  const int Ho = (H + 2 * padding - K) / stride + 1;
  const int Wo = (W + 2 * padding - K) / stride + 1;
  if (Ho <= 0 || Wo <= 0) throw Error("conv2d: kernel larger than input");

  struct Geo {
    int C, H, W, O, K, Ho, Wo, s, p;
  } geo{C, H, W, O, K, Ho, Wo, stride, padding};

  // Patch matrix (Ho*Wo rows of C*K*K), kept for the backward pass.
  const std::size_t P = static_cast<std::size_t>(Ho) * Wo;
  const std::size_t CKK = static_cast<std::size_t>(C) * K * K;
  auto patches = std::make_shared<std::vector<double>>(P * CKK, 0.0);
  auto patch_src = std::make_shared<std::vector<std::ptrdiff_t>>(P * CKK, -1);
  for (int oy = 0; oy < Ho; ++oy) {
    for (int ox = 0; ox < Wo; ++ox) {
      const std::size_t row = (static_cast<std::size_t>(oy) * Wo + ox) * CKK;
      std::size_t j = 0;
      for (int c = 0; c < C; ++c) {
        for (int ky = 0; ky < K; ++ky) {
          const int iy = oy * stride - padding + ky;
          for (int kx = 0; kx < K; ++kx, ++j) {
            const int ix = ox * stride - padding + kx;
            if (iy < 0 || iy >= H || ix < 0 || ix >= W) continue;
            const auto src = (static_cast<std::ptrdiff_t>(c) * H + iy) * W + ix;
            (*patches)[row + j] = xv[static_cast<std::size_t>(src)];
            (*patch_src)[row + j] = src;
          }
        }
      }
    }
  }
  Tensor out({O, Ho, Wo});
  const double* wd = wv.storage().data();
  for (int o = 0; o < O; ++o) {
    const double* wo = wd + static_cast<std::size_t>(o) * CKK;
    for (std::size_t q = 0; q < P; ++q) {
      const double* pr = patches->data() + q * CKK;
      double acc = bv[static_cast<std::size_t>(o)];
      for (std::size_t j = 0; j < CKK; ++j) acc += wo[j] * pr[j];
      out[static_cast<std::size_t>(o) * P + q] = acc;
    }
  }
  const int iw = w.id();
  return tape->record(
      std::move(out), {x, w, b},
      [tape, iw, geo, P, CKK, patches, patch_src](const Tensor& g, std::span<Tensor*> gin) {
        const Tensor& wv = tape->value(iw);
        const int O = geo.O;
        const double* wd = wv.storage().data();
        std::vector<double> gpatch(gin[0] ? CKK : 0);
        for (int o = 0; o < O; ++o) {
          const double* gp = &g[static_cast<std::size_t>(o) * P];
          if (gin[2]) {
            double acc = 0.0;
            for (std::size_t q = 0; q < P; ++q) acc += gp[q];
            (*gin[2])[static_cast<std::size_t>(o)] += acc;
          }
          if (gin[1]) {
            double* gw = &(*gin[1])[static_cast<std::size_t>(o) * CKK];
            for (std::size_t q = 0; q < P; ++q) {
              const double gq = gp[q];
              if (gq == 0.0) continue;
              const double* pr = patches->data() + q * CKK;
              for (std::size_t j = 0; j < CKK; ++j) gw[j] += gq * pr[j];
            }
          }
        }
        if (gin[0]) {
          Tensor& gx = *gin[0];
          for (std::size_t q = 0; q < P; ++q) {
            std::fill(gpatch.begin(), gpatch.end(), 0.0);
            for (int o = 0; o < O; ++o) {
              const double gq = g[static_cast<std::size_t>(o) * P + q];
              if (gq == 0.0) continue;
              const double* wo = wd + static_cast<std::size_t>(o) * CKK;
              for (std::size_t j = 0; j < CKK; ++j) gpatch[j] += gq * wo[j];
            }
            const std::ptrdiff_t* src = patch_src->data() + q * CKK;
            for (std::size_t j = 0; j < CKK; ++j) {
              if (src[j] >= 0) gx[static_cast<std::size_t>(src[j])] += gpatch[j];
            }
          }
        }
      },
      "conv2d");
}

// ---------------------------------------------------------------------------
// shape ops

Var reshape(Var a, Shape shape) {
  Tape* tape = a.tape();
  Tensor out = a.value().reshaped(std::move(shape));
  return tape->record(
      std::move(out), {a},
      [](const Tensor& g, std::span<Tensor*> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[i] += g[i];
      },
      "reshape");
}

Var slice(Var a, std::size_t start, std::size_t len) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  if (start + len > av.size()) {
    throw Error("slice: range [" + std::to_string(start) + ", " +
                std::to_string(start + len) + ") out of bounds for " +
                shape_str(av.shape()));
  }
  std::vector<double> data(av.data().begin() + static_cast<std::ptrdiff_t>(start),
                           av.data().begin() + static_cast<std::ptrdiff_t>(start + len));
  return tape->record(
      Tensor({static_cast<int>(len)}, std::move(data)), {a},
      [start](const Tensor& g, std::span<Tensor*> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[start + i] += g[i];
      },
      "slice");
}

Var index(Var a, std::size_t i) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  if (i >= av.size()) throw Error("index: out of bounds");
  return tape->record(
      Tensor::scalar(av[i]), {a},
      [i](const Tensor& g, std::span<Tensor*> gin) { (*gin[0])[i] += g[0]; },
      "index");
}

Var concat(const std::vector<Var>& parts) {
  if (parts.empty()) throw Error("concat: no inputs");
  Tape* tape = parts.front().tape();
  std::vector<double> data;
  std::vector<std::size_t> offsets;
  for (const Var& p : parts) {
    offsets.push_back(data.size());
    const auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  const int n = static_cast<int>(data.size());
  return tape->record(
      Tensor({n}, std::move(data)), parts,
      [offsets](const Tensor& g, std::span<Tensor*> gin) {
        for (std::size_t k = 0; k < gin.size(); ++k) {
          if (!gin[k]) continue;
          Tensor& gi = *gin[k];
          for (std::size_t i = 0; i < gi.size(); ++i) gi[i] += g[offsets[k] + i];
        }
      },
      "concat");
}

Var broadcast_to(Var a, Shape shape) {
  Tape* tape = a.tape();
  const Tensor& av = a.value();
  const Shape& src = av.shape();
  if (src.size() > shape.size()) {
    throw Error("broadcast: cannot broadcast " + shape_str(src) + " to " +
                shape_str(shape));
  }
  // Source strides aligned to the trailing dimensions of `shape`; 0 where
  // the source dimension is broadcast.
  const std::size_t r = shape.size();
  std::vector<std::size_t> src_stride(r, 0);
  std::size_t stride = 1;
  for (std::size_t i = 0; i < src.size(); ++i) {
    const std::size_t sd = src.size() - 1 - i;
    const std::size_t od = r - 1 - i;
    if (src[sd] != shape[od] && src[sd] != 1) {
      throw Error("broadcast: cannot broadcast " + shape_str(src) + " to " +
                  shape_str(shape));
    }
    src_stride[od] = src[sd] == 1 ? 0 : stride;
    stride *= static_cast<std::size_t>(src[sd]);
  }
  const std::size_t n = shape_numel(shape);
  std::vector<std::size_t> map(n);
  for (std::size_t flat = 0; flat < n; ++flat) {
    std::size_t rem = flat, off = 0;
    for (std::size_t d = r; d-- > 0;) {
      const std::size_t idx = rem % static_cast<std::size_t>(shape[d]);
      rem /= static_cast<std::size_t>(shape[d]);
      off += idx * src_stride[d];
    }
    map[flat] = off;
  }
  Tensor out(shape);
  for (std::size_t i = 0; i < n; ++i) out[i] = av[map[i]];
  return tape->record(
      std::move(out), {a},
      [map = std::move(map)](const Tensor& g, std::span<Tensor*> gin) {
        for (std::size_t i = 0; i < g.size(); ++i) (*gin[0])[map[i]] += g[i];
      },
      "broadcast_to");
}

// ---------------------------------------------------------------------------

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps) {
  std::vector<std::size_t> coords(x.size());
  std::iota(coords.begin(), coords.end(), 0);
  return grad_check(f, x, eps, coords);
}

double grad_check(const std::function<Var(Tape&, Var)>& f, const Tensor& x,
                  double eps, std::span<const std::size_t> coords) {
  if (!(eps > 0.0)) throw Error("grad_check: eps must be positive");
  Tensor analytic;
  {
    Tape tape;
    Var xv = tape.leaf(x);
    Var y = f(tape, xv);
    analytic = tape.backward(y)[xv];
  }
  auto eval = [&](const Tensor& at) {
    Tape tape;
    const double v = f(tape, tape.constant(at)).item();
    if (!std::isfinite(v)) throw Error("grad_check: non-finite function value");
    return v;
  };
  double worst = 0.0;
  Tensor probe = x;
  for (std::size_t i : coords) {
    if (i >= x.size()) throw Error("grad_check: coordinate out of range");
    const double orig = probe[i];
    probe[i] = orig + eps;
    const double fp = eval(probe);
    probe[i] = orig - eps;
    const double fm = eval(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1.0, std::abs(analytic[i]));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dsim::ad
