// Copyright 2026 The msmk Authors
// Licensed under the Apache License, Version 2.0

#pragma once

#include <Eigen/Core>

#include <cmath>
#include <deque>
#include <functional>
#include <initializer_list>
#include <sstream>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "msmk/errors.hpp"

namespace msmk {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Wider type used for reductions (matmul inner products, mean/variance).
template <typename Scalar>
struct Accumulator {
  using type = Scalar;
};
template <>
struct Accumulator<float> {
  using type = double;
};
template <typename Scalar>
using accum_t = typename Accumulator<Scalar>::type;

struct Shape {
  Eigen::Index rows = 0;
  Eigen::Index cols = 0;

  Eigen::Index size() const { return rows * cols; }
  bool operator==(const Shape&) const = default;

  std::string str() const {
    std::ostringstream os;
    os << "[" << rows << "x" << cols << "]";
    return os.str();
  }
};

template <typename Derived>
Shape shape_of(const Eigen::DenseBase<Derived>& m) {
  return {m.rows(), m.cols()};
}

template <typename Scalar>
class Tape;

/// Handle to a value recorded on a Tape.
///
/// Tensors are rank-2 (rows x cols, row-major); vectors are 1 x n rows and
/// scalars are 1 x 1. A handle is cheap to copy and is only valid while its
/// tape is alive and has not been reset.
template <typename Scalar>
class Tensor {
 public:
  Tensor() = default;
  Tensor(Tape<Scalar>* tape, int id) : tape_(tape), id_(id) {}

  const Matrix<Scalar>& value() const { return tape_->value(id_); }
  const Matrix<Scalar>& grad() const { return tape_->grad(id_); }
  bool has_grad() const { return tape_->has_grad(id_); }
  bool requires_grad() const { return tape_->requires_grad(id_); }

  Shape shape() const { return shape_of(value()); }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

  Scalar item() const {
    if (rows() != 1 || cols() != 1) {
      throw DimensionError("item() needs a 1x1 tensor, got " + shape().str());
    }
    return value()(0, 0);
  }

  Tape<Scalar>& tape() const { return *tape_; }
  int id() const { return id_; }
  bool valid() const { return tape_ != nullptr; }

 private:
  Tape<Scalar>* tape_ = nullptr;
  int id_ = -1;
};

/// Ordered record of primitive operations for reverse-mode differentiation.
///
/// Records are appended in execution order, so every record's inputs precede
/// it and a single reverse sweep visits each record once. backward() may be
/// called once per recording; reset() clears the tape for reuse.
template <typename Scalar>
class Tape {
 public:
  using Mat = Matrix<Scalar>;
  using BackwardFn = std::function<void(Tape&, int)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Tensor<Scalar> constant(Mat value) { return push(std::move(value), false, {}, nullptr); }

  Tensor<Scalar> constant(Eigen::Index rows, Eigen::Index cols, Scalar fill) {
    return constant(Mat::Constant(rows, cols, fill));
  }

  Tensor<Scalar> scalar(Scalar v) { return constant(Mat::Constant(1, 1, v)); }

  /// Leaf that receives a gradient.
  Tensor<Scalar> variable(Mat value) { return push(std::move(value), true, {}, nullptr); }

  /// Binds an externally owned parameter; repeated binds reuse one leaf so
  /// all uses accumulate into a single gradient (see grad_of).
  Tensor<Scalar> parameter(const Mat& param) {
    auto it = bound_.find(&param);
    if (it != bound_.end()) return Tensor<Scalar>(this, it->second);
    Tensor<Scalar> t = grad_enabled_ ? variable(param) : constant(param);
    bound_.emplace(&param, t.id());
    return t;
  }

  /// Gradient of a bound parameter after backward(); nullptr if it was never
  /// bound or received no gradient.
  const Mat* grad_of(const Mat& param) const {
    auto it = bound_.find(&param);
    if (it == bound_.end()) return nullptr;
    const Node& n = nodes_[it->second];
    return n.grad.size() ? &n.grad : nullptr;
  }

  /// Appends a record. `inputs` must already be on this tape.
  Tensor<Scalar> record(Mat value, std::vector<int> inputs, BackwardFn fn) {
    bool needs = false;
    for (int i : inputs) needs = needs || nodes_[i].requires_grad;
    return push(std::move(value), needs, std::move(inputs), needs ? std::move(fn) : nullptr);
  }

  void backward(const Tensor<Scalar>& loss) {
    check_owned(loss);
    if (backward_done_) {
      throw ContractError("backward() already ran on this tape; call reset() first");
    }
    const Mat& v = nodes_[loss.id()].value;
    if (v.rows() != 1 || v.cols() != 1) {
      throw ContractError("backward() needs a scalar loss, got " + shape_of(v).str());
    }
    backward_done_ = true;
    for (Node& n : nodes_) {
      if (n.requires_grad) n.grad = Mat::Zero(n.value.rows(), n.value.cols());
    }
    if (!nodes_[loss.id()].requires_grad) return;
    nodes_[loss.id()].grad(0, 0) = Scalar(1);
    for (int id = loss.id(); id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.backward) n.backward(*this, id);
    }
  }

  /// With gradients off, parameters bind as constants, so nothing downstream
  /// keeps backward state. For inference.
  void set_grad_enabled(bool on) { grad_enabled_ = on; }
  bool grad_enabled() const { return grad_enabled_; }

  bool any_requires_grad(std::initializer_list<int> ids) const {
    for (int i : ids) {
      if (nodes_[i].requires_grad) return true;
    }
    return false;
  }

  void reset() {
    nodes_.clear();
    bound_.clear();
    backward_done_ = false;
  }

  const Mat& value(int id) const { return nodes_.at(id).value; }

  const Mat& grad(int id) const {
    const Node& n = nodes_.at(id);
    if (!n.grad.size()) throw ContractError("tensor has no gradient");
    return n.grad;
  }
  bool has_grad(int id) const { return nodes_.at(id).grad.size() != 0; }
  bool requires_grad(int id) const { return nodes_.at(id).requires_grad; }
  const std::vector<int>& inputs(int id) const { return nodes_.at(id).inputs; }

  /// Adds `g` into the gradient of `id` when that node needs one.
  template <typename Derived>
  void accumulate(int id, const Eigen::MatrixBase<Derived>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    n.grad += g;
  }

  bool needs_grad(int id) const { return nodes_[id].requires_grad; }
  std::size_t size() const { return nodes_.size(); }

  void check_owned(const Tensor<Scalar>& t) const {
    if (&t.tape() != this) throw ContractError("tensor belongs to a different tape");
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    std::vector<int> inputs;
    BackwardFn backward;
  };

  Tensor<Scalar> push(Mat value, bool requires_grad, std::vector<int> inputs, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, std::move(inputs), std::move(fn)});
    return Tensor<Scalar>(this, static_cast<int>(nodes_.size()) - 1);
  }

  std::deque<Node> nodes_;  // stable element addresses across push_back
  std::unordered_map<const void*, int> bound_;
  bool backward_done_ = false;
  bool grad_enabled_ = true;
};

namespace detail {

template <typename Scalar>
Tape<Scalar>& same_tape(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands live on different tapes");
  return a.tape();
}

/// Broadcast result shape: equal shapes, a 1x1 scalar, or a 1xC row expanded
/// over the leading (row) axis.
inline Shape broadcast_shape(Shape a, Shape b, const char* op) {
  if (a == b) return a;
  if (b.rows == 1 && b.cols == 1) return a;
  if (a.rows == 1 && a.cols == 1) return b;
  if (b.rows == 1 && b.cols == a.cols) return a;
  if (a.rows == 1 && a.cols == b.cols) return b;
  throw DimensionError(std::string(op) + ": shapes " + a.str() + " and " + b.str() +
                       " are not broadcast-compatible");
}

template <typename Scalar>
Matrix<Scalar> expand(const Matrix<Scalar>& m, Shape to) {
  if (shape_of(m) == to) return m;
  if (m.rows() == 1 && m.cols() == 1) return Matrix<Scalar>::Constant(to.rows, to.cols, m(0, 0));
  return m.replicate(to.rows, 1);
}

/// Sums a full-shape gradient back down to a broadcast operand's shape.
template <typename Scalar>
Matrix<Scalar> reduce_to(const Matrix<Scalar>& g, Shape to) {
  if (shape_of(g) == to) return g;
  if (to.rows == 1 && to.cols == 1) {
    Matrix<Scalar> r(1, 1);
    r(0, 0) = static_cast<Scalar>(g.template cast<accum_t<Scalar>>().sum());
    return r;
  }
  return g.template cast<accum_t<Scalar>>().colwise().sum().template cast<Scalar>();
}

/// Elementwise unary op; `deriv(x, y)` returns dy/dx elementwise.
template <typename Scalar, typename F, typename D>
Tensor<Scalar> unary(const Tensor<Scalar>& x, F value_fn, D deriv) {
  Tape<Scalar>& tape = x.tape();
  Matrix<Scalar> y = value_fn(x.value());
  const int xi = x.id();
  return tape.record(std::move(y), {xi}, [xi, deriv](Tape<Scalar>& t, int self) {
    t.accumulate(xi, t.grad(self).cwiseProduct(deriv(t.value(xi), t.value(self))));
  });
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise binary ops (broadcasting: scalar or trailing-axis row).
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> add(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "add");
  Matrix<Scalar> y = detail::expand(a.value(), s) + detail::expand(b.value(), s);
  const int ai = a.id(), bi = b.id();
  return tape.record(std::move(y), {ai, bi}, [ai, bi](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, detail::reduce_to(g, shape_of(t.value(ai))));
    if (t.needs_grad(bi)) t.accumulate(bi, detail::reduce_to(g, shape_of(t.value(bi))));
  });
}

template <typename Scalar>
Tensor<Scalar> sub(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "sub");
  Matrix<Scalar> y = detail::expand(a.value(), s) - detail::expand(b.value(), s);
  const int ai = a.id(), bi = b.id();
  return tape.record(std::move(y), {ai, bi}, [ai, bi](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, detail::reduce_to(g, shape_of(t.value(ai))));
    if (t.needs_grad(bi)) {
      Matrix<Scalar> neg = -g;
      t.accumulate(bi, detail::reduce_to(neg, shape_of(t.value(bi))));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "mul");
  Matrix<Scalar> y = detail::expand(a.value(), s).cwiseProduct(detail::expand(b.value(), s));
  const int ai = a.id(), bi = b.id();
  return tape.record(std::move(y), {ai, bi}, [ai, bi, s](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) {
      Matrix<Scalar> ga = g.cwiseProduct(detail::expand(t.value(bi), s));
      t.accumulate(ai, detail::reduce_to(ga, shape_of(t.value(ai))));
    }
    if (t.needs_grad(bi)) {
      Matrix<Scalar> gb = g.cwiseProduct(detail::expand(t.value(ai), s));
      t.accumulate(bi, detail::reduce_to(gb, shape_of(t.value(bi))));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> div(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "div");
  Matrix<Scalar> y = detail::expand(a.value(), s).cwiseQuotient(detail::expand(b.value(), s));
  const int ai = a.id(), bi = b.id();
  return tape.record(std::move(y), {ai, bi}, [ai, bi, s](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    const Matrix<Scalar> be = detail::expand(t.value(bi), s);
    if (t.needs_grad(ai)) {
      Matrix<Scalar> ga = g.cwiseQuotient(be);
      t.accumulate(ai, detail::reduce_to(ga, shape_of(t.value(ai))));
    }
    if (t.needs_grad(bi)) {
      // d(a/b)/db = -y/b
      Matrix<Scalar> gb = -g.cwiseProduct(t.value(self)).cwiseQuotient(be);
      t.accumulate(bi, detail::reduce_to(gb, shape_of(t.value(bi))));
    }
  });
}

/// Elementwise max; ties send the gradient to `a`.
template <typename Scalar>
Tensor<Scalar> maximum(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  const Shape s = detail::broadcast_shape(a.shape(), b.shape(), "maximum");
  Matrix<Scalar> y = detail::expand(a.value(), s).cwiseMax(detail::expand(b.value(), s));
  const int ai = a.id(), bi = b.id();
  return tape.record(std::move(y), {ai, bi}, [ai, bi, s](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    const Matrix<Scalar> ae = detail::expand(t.value(ai), s);
    const Matrix<Scalar> be = detail::expand(t.value(bi), s);
    Matrix<Scalar> pick_a = (ae.array() >= be.array()).template cast<Scalar>();
    if (t.needs_grad(ai)) {
      Matrix<Scalar> ga = g.cwiseProduct(pick_a);
      t.accumulate(ai, detail::reduce_to(ga, shape_of(t.value(ai))));
    }
    if (t.needs_grad(bi)) {
      Matrix<Scalar> gb = g.cwiseProduct((Scalar(1) - pick_a.array()).matrix());
      t.accumulate(bi, detail::reduce_to(gb, shape_of(t.value(bi))));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> operator+(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return add(a, b); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return sub(a, b); }
template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return mul(a, b); }
template <typename Scalar>
Tensor<Scalar> operator/(const Tensor<Scalar>& a, const Tensor<Scalar>& b) { return div(a, b); }

// ---------------------------------------------------------------------------
// Scalar-constant ops.
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> scale(const Tensor<Scalar>& x, Scalar s) {
  return detail::unary(
      x, [s](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v * s; },
      [s](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return Matrix<Scalar>::Constant(v.rows(), v.cols(), s);
      });
}

template <typename Scalar>
Tensor<Scalar> shift(const Tensor<Scalar>& x, Scalar s) {
  return detail::unary(
      x, [s](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.array() + s; },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return Matrix<Scalar>::Ones(v.rows(), v.cols());
      });
}

template <typename Scalar>
Tensor<Scalar> operator*(const Tensor<Scalar>& x, Scalar s) { return scale(x, s); }
template <typename Scalar>
Tensor<Scalar> operator*(Scalar s, const Tensor<Scalar>& x) { return scale(x, s); }
template <typename Scalar>
Tensor<Scalar> operator-(const Tensor<Scalar>& x) { return scale(x, Scalar(-1)); }

// ---------------------------------------------------------------------------
// Elementwise unary ops.
// ---------------------------------------------------------------------------

template <typename Scalar>
Tensor<Scalar> exp(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.array().exp(); },
      [](const Matrix<Scalar>&, const Matrix<Scalar>& y) -> Matrix<Scalar> { return y; });
}

template <typename Scalar>
Tensor<Scalar> log(const Tensor<Scalar>& x) {
  if ((x.value().array() <= Scalar(0)).any()) {
    throw NumericError("log of a non-positive value");
  }
  return detail::unary(
      x, [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.array().log(); },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return v.array().inverse();
      });
}

template <typename Scalar>
Tensor<Scalar> sigmoid(const Tensor<Scalar>& x) {
  return detail::unary(
      x,
      [](const Matrix<Scalar>& v) -> Matrix<Scalar> {
        return v.unaryExpr([](Scalar z) { return Scalar(1) / (Scalar(1) + std::exp(-z)); });
      },
      [](const Matrix<Scalar>&, const Matrix<Scalar>& y) -> Matrix<Scalar> {
        return y.array() * (Scalar(1) - y.array());
      });
}

template <typename Scalar>
Tensor<Scalar> tanh(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.array().tanh(); },
      [](const Matrix<Scalar>&, const Matrix<Scalar>& y) -> Matrix<Scalar> {
        return Scalar(1) - y.array().square();
      });
}

template <typename Scalar>
Tensor<Scalar> square(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.array().square(); },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> { return v * Scalar(2); });
}

/// |x|; the subgradient at 0 is 0.
template <typename Scalar>
Tensor<Scalar> abs(const Tensor<Scalar>& x) {
  return detail::unary(
      x, [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.array().abs(); },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return v.unaryExpr([](Scalar z) { return Scalar((z > 0) - (z < 0)); });
      });
}

namespace detail {
template <typename Scalar>
Scalar gelu_value(Scalar x) {
  return Scalar(0.5) * x * (Scalar(1) + std::erf(x * Scalar(0.7071067811865476)));
}
template <typename Scalar>
Scalar gelu_deriv(Scalar x) {
  const Scalar cdf = Scalar(0.5) * (Scalar(1) + std::erf(x * Scalar(0.7071067811865476)));
  const Scalar pdf = Scalar(0.3989422804014327) * std::exp(Scalar(-0.5) * x * x);
  return cdf + x * pdf;
}
template <typename Scalar>
Scalar softplus_value(Scalar x) {
  return std::log1p(std::exp(-std::abs(x))) + std::max(x, Scalar(0));
}
template <typename Scalar>
Scalar sigmoid_value(Scalar x) {
  return Scalar(1) / (Scalar(1) + std::exp(-x));
}
}  // namespace detail

/// GELU, exact form x * Phi(x).
template <typename Scalar>
Tensor<Scalar> gelu(const Tensor<Scalar>& x) {
  return detail::unary(
      x,
      [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.unaryExpr(&detail::gelu_value<Scalar>); },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return v.unaryExpr(&detail::gelu_deriv<Scalar>);
      });
}

/// x * sigmoid(x) (Swish).
template <typename Scalar>
Tensor<Scalar> silu(const Tensor<Scalar>& x) {
  return detail::unary(
      x,
      [](const Matrix<Scalar>& v) -> Matrix<Scalar> {
        return v.unaryExpr([](Scalar z) { return z * detail::sigmoid_value(z); });
      },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return v.unaryExpr([](Scalar z) {
          const Scalar s = detail::sigmoid_value(z);
          return s * (Scalar(1) + z * (Scalar(1) - s));
        });
      });
}

template <typename Scalar>
Tensor<Scalar> softplus(const Tensor<Scalar>& x) {
  return detail::unary(
      x,
      [](const Matrix<Scalar>& v) -> Matrix<Scalar> { return v.unaryExpr(&detail::softplus_value<Scalar>); },
      [](const Matrix<Scalar>& v, const Matrix<Scalar>&) -> Matrix<Scalar> {
        return v.unaryExpr(&detail::sigmoid_value<Scalar>);
      });
}

// ---------------------------------------------------------------------------
// Linear algebra and structural ops.
// ---------------------------------------------------------------------------

namespace detail {
template <typename Scalar, typename A, typename B>
Matrix<Scalar> product(const A& a, const B& b) {
  if constexpr (std::is_same_v<accum_t<Scalar>, Scalar>) {
    return a * b;
  } else {
    using Acc = accum_t<Scalar>;
    return (a.template cast<Acc>() * b.template cast<Acc>()).template cast<Scalar>();
  }
}
}  // namespace detail

template <typename Scalar>
Tensor<Scalar> matmul(const Tensor<Scalar>& a, const Tensor<Scalar>& b) {
  Tape<Scalar>& tape = detail::same_tape(a, b);
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul: inner dimensions disagree for " + a.shape().str() + " @ " +
                         b.shape().str());
  }
  Matrix<Scalar> y = detail::product<Scalar>(a.value(), b.value());
  const int ai = a.id(), bi = b.id();
  return tape.record(std::move(y), {ai, bi}, [ai, bi](Tape<Scalar>& t, int self) {
    const auto& g = t.grad(self);
    if (t.needs_grad(ai)) t.accumulate(ai, detail::product<Scalar>(g, t.value(bi).transpose()));
    if (t.needs_grad(bi)) t.accumulate(bi, detail::product<Scalar>(t.value(ai).transpose(), g));
  });
}

template <typename Scalar>
Tensor<Scalar> transpose(const Tensor<Scalar>& x) {
  Matrix<Scalar> y = x.value().transpose();
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi](Tape<Scalar>& t, int self) {
    t.accumulate(xi, t.grad(self).transpose());
  });
}

/// Row-major reinterpretation to a new shape with the same element count.
template <typename Scalar>
Tensor<Scalar> reshape(const Tensor<Scalar>& x, Eigen::Index rows, Eigen::Index cols) {
  if (rows * cols != x.value().size()) {
    throw DimensionError("reshape: cannot view " + x.shape().str() + " as " + Shape{rows, cols}.str());
  }
  Matrix<Scalar> y = Eigen::Map<const Matrix<Scalar>>(x.value().data(), rows, cols);
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi](Tape<Scalar>& t, int self) {
    const auto& in = t.value(xi);
    t.accumulate(xi, Eigen::Map<const Matrix<Scalar>>(t.grad(self).data(), in.rows(), in.cols()));
  });
}

/// Explicit expansion of a 1x1, 1xC or Rx1 tensor to rows x cols.
template <typename Scalar>
Tensor<Scalar> expand(const Tensor<Scalar>& x, Eigen::Index rows, Eigen::Index cols) {
  const Shape in = x.shape();
  const bool ok = (in.rows == rows || in.rows == 1) && (in.cols == cols || in.cols == 1);
  if (!ok) throw DimensionError("expand: cannot expand " + in.str() + " to " + Shape{rows, cols}.str());
  Matrix<Scalar> y = x.value().replicate(rows / in.rows, cols / in.cols);
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, in](Tape<Scalar>& t, int self) {
    using Acc = accum_t<Scalar>;
    Matrix<Acc> g = t.grad(self).template cast<Acc>();
    if (in.rows == 1 && g.rows() != 1) g = g.colwise().sum().eval();
    if (in.cols == 1 && g.cols() != 1) g = g.rowwise().sum().eval();
    t.accumulate(xi, g.template cast<Scalar>());
  });
}

template <typename Scalar>
Tensor<Scalar> slice_rows(const Tensor<Scalar>& x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw DimensionError("slice_rows: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + x.shape().str());
  }
  Matrix<Scalar> y = x.value().middleRows(begin, count);
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, begin, count](Tape<Scalar>& t, int self) {
    const auto& in = t.value(xi);
    Matrix<Scalar> g = Matrix<Scalar>::Zero(in.rows(), in.cols());
    g.middleRows(begin, count) = t.grad(self);
    t.accumulate(xi, g);
  });
}

template <typename Scalar>
Tensor<Scalar> slice_cols(const Tensor<Scalar>& x, Eigen::Index begin, Eigen::Index count) {
  if (begin < 0 || count < 0 || begin + count > x.cols()) {
    throw DimensionError("slice_cols: range [" + std::to_string(begin) + ", " +
                         std::to_string(begin + count) + ") outside " + x.shape().str());
  }
  Matrix<Scalar> y = x.value().middleCols(begin, count);
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, begin, count](Tape<Scalar>& t, int self) {
    const auto& in = t.value(xi);
    Matrix<Scalar> g = Matrix<Scalar>::Zero(in.rows(), in.cols());
    g.middleCols(begin, count) = t.grad(self);
    t.accumulate(xi, g);
  });
}

template <typename Scalar>
Tensor<Scalar> concat_rows(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ContractError("concat_rows: no inputs");
  Tape<Scalar>& tape = parts.front().tape();
  const Eigen::Index cols = parts.front().cols();
  Eigen::Index rows = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    tape.check_owned(p);
    if (p.cols() != cols) {
      throw DimensionError("concat_rows: column mismatch " + parts.front().shape().str() + " vs " +
                           p.shape().str());
    }
    rows += p.rows();
    ids.push_back(p.id());
  }
  Matrix<Scalar> y(rows, cols);
  Eigen::Index r = 0;
  for (const auto& p : parts) {
    y.middleRows(r, p.rows()) = p.value();
    r += p.rows();
  }
  return tape.record(std::move(y), ids, [ids](Tape<Scalar>& t, int self) {
    Eigen::Index r = 0;
    for (int id : ids) {
      const Eigen::Index n = t.value(id).rows();
      t.accumulate(id, t.grad(self).middleRows(r, n));
      r += n;
    }
  });
}

template <typename Scalar>
Tensor<Scalar> concat_cols(const std::vector<Tensor<Scalar>>& parts) {
  if (parts.empty()) throw ContractError("concat_cols: no inputs");
  Tape<Scalar>& tape = parts.front().tape();
  const Eigen::Index rows = parts.front().rows();
  Eigen::Index cols = 0;
  std::vector<int> ids;
  for (const auto& p : parts) {
    tape.check_owned(p);
    if (p.rows() != rows) {
      throw DimensionError("concat_cols: row mismatch " + parts.front().shape().str() + " vs " +
                           p.shape().str());
    }
    cols += p.cols();
    ids.push_back(p.id());
  }
  Matrix<Scalar> y(rows, cols);
  Eigen::Index c = 0;
  for (const auto& p : parts) {
    y.middleCols(c, p.cols()) = p.value();
    c += p.cols();
  }
  return tape.record(std::move(y), ids, [ids](Tape<Scalar>& t, int self) {
    Eigen::Index c = 0;
    for (int id : ids) {
      const Eigen::Index n = t.value(id).cols();
      t.accumulate(id, t.grad(self).middleCols(c, n));
      c += n;
    }
  });
}

// ---------------------------------------------------------------------------
// Reductions.
// ---------------------------------------------------------------------------

/// Sum of all elements, as a 1x1 tensor.
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x) {
  Matrix<Scalar> y(1, 1);
  y(0, 0) = static_cast<Scalar>(x.value().template cast<accum_t<Scalar>>().sum());
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi](Tape<Scalar>& t, int self) {
    const auto& in = t.value(xi);
    t.accumulate(xi, Matrix<Scalar>::Constant(in.rows(), in.cols(), t.grad(self)(0, 0)));
  });
}

/// Sum along an axis: axis 0 reduces rows (-> 1xC), axis 1 reduces columns (-> Rx1).
template <typename Scalar>
Tensor<Scalar> sum(const Tensor<Scalar>& x, int axis) {
  using Acc = accum_t<Scalar>;
  if (axis != 0 && axis != 1) throw ContractError("sum: axis must be 0 or 1");
  Matrix<Scalar> y = axis == 0 ? Matrix<Scalar>(x.value().template cast<Acc>().colwise().sum().template cast<Scalar>())
                               : Matrix<Scalar>(x.value().template cast<Acc>().rowwise().sum().template cast<Scalar>());
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, axis](Tape<Scalar>& t, int self) {
    const auto& in = t.value(xi);
    const auto& g = t.grad(self);
    if (axis == 0) {
      t.accumulate(xi, g.replicate(in.rows(), 1));
    } else {
      t.accumulate(xi, g.replicate(1, in.cols()));
    }
  });
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x) {
  return scale(sum(x), Scalar(1) / static_cast<Scalar>(x.value().size()));
}

template <typename Scalar>
Tensor<Scalar> mean(const Tensor<Scalar>& x, int axis) {
  const Eigen::Index n = axis == 0 ? x.rows() : x.cols();
  return scale(sum(x, axis), Scalar(1) / static_cast<Scalar>(n));
}

// ---------------------------------------------------------------------------
// Softmax.
// ---------------------------------------------------------------------------

/// Softmax along `axis` (1: across each row, 0: down each column), computed
/// with max subtraction.
template <typename Scalar>
Tensor<Scalar> softmax(const Tensor<Scalar>& x, int axis = 1) {
  if (axis != 0 && axis != 1) throw ContractError("softmax: axis must be 0 or 1");
  if (!x.value().allFinite()) throw NumericError("softmax: non-finite input");
  using Acc = accum_t<Scalar>;
  const Matrix<Scalar> in = axis == 1 ? x.value() : Matrix<Scalar>(x.value().transpose());
  Matrix<Scalar> y(in.rows(), in.cols());
  for (Eigen::Index r = 0; r < in.rows(); ++r) {
    const Scalar mx = in.row(r).maxCoeff();
    Eigen::Matrix<Acc, 1, Eigen::Dynamic> e = (in.row(r).array() - mx).template cast<Acc>().exp();
    y.row(r) = (e / e.sum()).template cast<Scalar>();
  }
  if (axis == 0) y.transposeInPlace();
  const int xi = x.id();
  return x.tape().record(std::move(y), {xi}, [xi, axis](Tape<Scalar>& t, int self) {
    const Matrix<Scalar>& s = t.value(self);
    const Matrix<Scalar>& g = t.grad(self);
    Matrix<Scalar> gx(s.rows(), s.cols());
    if (axis == 1) {
      for (Eigen::Index r = 0; r < s.rows(); ++r) {
        const Scalar dot = s.row(r).dot(g.row(r));
        gx.row(r) = s.row(r).array() * (g.row(r).array() - dot);
      }
    } else {
      for (Eigen::Index c = 0; c < s.cols(); ++c) {
        const Scalar dot = s.col(c).dot(g.col(c));
        gx.col(c) = s.col(c).array() * (g.col(c).array() - dot);
      }
    }
    t.accumulate(xi, gx);
  });
}

}  // namespace msmk
