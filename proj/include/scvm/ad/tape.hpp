#pragma once

// Batched reverse-mode differentiation over dense matrices.
//
// Every value on the tape is a matrix whose rows are batch entries. Leaves
// are parameters, inputs or constants; interior nodes record a backward rule
// that pushes the incoming adjoint to their parents. Forward-mode tangents
// (see dual.hpp) are built out of these same primitives, so reverse-over-
// forward derivatives come for free.

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "scvm/error.hpp"

namespace scvm::ad {

using Mat = Eigen::MatrixXd;
using Index = Eigen::Index;

class Tape;

// Handle to a tape node. A default-constructed Var is "absent": it stands for
// an identically-zero tangent and is skipped by the tangent arithmetic.
struct Var {
  Tape* tape = nullptr;
  std::int32_t id = -1;

  bool absent() const { return id < 0; }
  const Mat& value() const;
  Index rows() const { return value().rows(); }
  Index cols() const { return value().cols(); }
};

enum class Fn : std::uint8_t { Silu, Celu, Tanh, Exp, Log, Sin, Pow, Relu };

namespace detail {

// Polynomial coefficients (powers of u) of the n-th derivative of u, where u
// is sigmoid (u' = u - u^2) or tanh (u' = 1 - u^2). Tables are built once and
// are read-only afterwards.
inline constexpr int kMaxDerivativeOrder = 8;

inline std::vector<std::vector<double>> build_poly_table(bool is_tanh) {
  std::vector<std::vector<double>> table{{0.0, 1.0}};
  while (static_cast<int>(table.size()) <= kMaxDerivativeOrder) {
    const auto& p = table.back();
    std::vector<double> dp(p.size() > 1 ? p.size() - 1 : 1, 0.0);
    for (std::size_t k = 1; k < p.size(); ++k) dp[k - 1] = static_cast<double>(k) * p[k];
    std::vector<double> next(dp.size() + 2, 0.0);
    for (std::size_t k = 0; k < dp.size(); ++k) {
      if (is_tanh) {
        next[k] += dp[k];
      } else {
        next[k + 1] += dp[k];
      }
      next[k + 2] -= dp[k];
    }
    table.push_back(std::move(next));
  }
  return table;
}

inline const std::vector<double>& poly_derivative(bool is_tanh, int order) {
  static const auto sig = build_poly_table(false);
  static const auto th = build_poly_table(true);
  if (order > kMaxDerivativeOrder) throw UnsupportedPrimitiveError("derivative order too high");
  return is_tanh ? th[order] : sig[order];
}

inline double eval_poly(const std::vector<double>& p, double u) {
  double r = 0.0;
  for (std::size_t k = p.size(); k-- > 0;) r = r * u + p[k];
  return r;
}

inline double sigmoid(double z) {
  if (z >= 0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

// n-th derivative of the elementwise function `fn` at x.
inline double fn_derivative(Fn fn, int n, double x, double param) {
  switch (fn) {
    case Fn::Silu: {
      const double s = sigmoid(x);
      if (n == 0) return x * s;
      return x * eval_poly(poly_derivative(false, n), s) + n * eval_poly(poly_derivative(false, n - 1), s);
    }
    case Fn::Celu:
      if (x > 0) return n == 0 ? x : (n == 1 ? 1.0 : 0.0);
      return n == 0 ? std::expm1(x) : std::exp(x);
    case Fn::Tanh:
      return eval_poly(poly_derivative(true, n), std::tanh(x));
    case Fn::Exp:
      return std::exp(x);
    case Fn::Log: {
      if (n == 0) return std::log(x);
      double f = 1.0;
      for (int k = 1; k < n; ++k) f *= -static_cast<double>(k);
      return f * std::pow(x, -n);
    }
    case Fn::Sin:
      switch (n % 4) {
        case 0: return std::sin(x);
        case 1: return std::cos(x);
        case 2: return -std::sin(x);
        default: return -std::cos(x);
      }
    case Fn::Pow: {
      double f = 1.0;
      for (int k = 0; k < n; ++k) f *= (param - k);
      return f * std::pow(x, param - n);
    }
    case Fn::Relu:
      if (n == 0) return x > 0 ? x : 0.0;
      if (n == 1) return x > 0 ? 1.0 : 0.0;
      return 0.0;
  }
  return 0.0;
}

inline Eigen::ArrayXXd eval_poly(const std::vector<double>& p, const Eigen::ArrayXXd& u) {
  Eigen::ArrayXXd r = Eigen::ArrayXXd::Constant(u.rows(), u.cols(), p.back());
  for (std::size_t k = p.size() - 1; k-- > 0;) r = r * u + p[k];
  return r;
}

// Base quantity u of the polynomial derivative tables: sigmoid(x) for Silu,
// tanh(x) for Tanh. Eigen vectorizes exp but not tanh for doubles.
inline Eigen::ArrayXXd activation_base(Fn fn, const Mat& x) {
  if (fn == Fn::Silu) return 1.0 / (1.0 + (-x.array()).exp());
  return 2.0 / (1.0 + (-2.0 * x.array()).exp()) - 1.0;
}

inline bool has_activation_base(Fn fn) { return fn == Fn::Silu || fn == Fn::Tanh; }

// Array version of fn_derivative. `u` is activation_base(fn, x) when the
// function has one.
inline Mat fn_derivative(Fn fn, int n, const Mat& x, double param, const Eigen::ArrayXXd* u) {
  switch (fn) {
    case Fn::Silu:
      if (n == 0) return (x.array() * *u).matrix();
      return (x.array() * eval_poly(poly_derivative(false, n), *u) + n * eval_poly(poly_derivative(false, n - 1), *u)).matrix();
    case Fn::Tanh:
      return eval_poly(poly_derivative(true, n), *u).matrix();
    case Fn::Exp:
      return x.array().exp().matrix();
    default:
      return x.unaryExpr([=](double v) { return fn_derivative(fn, n, v, param); });
  }
}

}  // namespace detail

class Tape {
 public:
  using Backward = std::function<void(Tape&, const Mat&)>;

  Tape() { nodes_.reserve(256); }
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Mat value, bool requires_grad) {
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, false, nullptr, {}, -1});
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  Var constant(Mat value) { return leaf(std::move(value), false); }

  Var constant(Index rows, Index cols, double fill) { return leaf(Mat::Constant(rows, cols, fill), false); }

  // Appends an interior node. `backward` is dropped when no parent needs a gradient.
  Var push(Mat value, bool requires_grad, Backward backward, bool nonsmooth = false) {
    nonsmooth_ = nonsmooth_ || nonsmooth;
    nodes_.push_back(Node{std::move(value), Mat(), requires_grad, nonsmooth, requires_grad ? std::move(backward) : nullptr, {}, -1});
    return Var{this, static_cast<std::int32_t>(nodes_.size() - 1)};
  }

  const Mat& value(std::int32_t id) const { return nodes_[id].value; }

  // Cached activation_base of a node's value, shared by every derivative
  // order evaluated on that node.
  const Eigen::ArrayXXd& activation_base(std::int32_t id, Fn fn) {
    Node& n = nodes_[id];
    if (n.act_fn != static_cast<int>(fn)) {
      n.act = detail::activation_base(fn, n.value);
      n.act_fn = static_cast<int>(fn);
    }
    return n.act;
  }
  bool requires_grad(std::int32_t id) const { return nodes_[id].requires_grad; }
  bool has_nonsmooth() const { return nonsmooth_; }
  std::size_t size() const { return nodes_.size(); }

  template <class Expr>
  void accumulate(std::int32_t id, const Eigen::MatrixBase<Expr>& g) {
    Node& n = nodes_[id];
    if (!n.requires_grad) return;
    if (n.grad.size() == 0) {
      n.grad = g;
    } else {
      n.grad += g;
    }
  }

  // Reverse sweep from a 1x1 node. Gradients of leaves stay available through grad().
  void backward(Var root) {
    if (root.tape != this) throw ArgumentError("backward: variable belongs to another tape");
    const Mat& v = nodes_[root.id].value;
    if (v.rows() != 1 || v.cols() != 1) throw ShapeError("backward: root must be a 1x1 scalar");
    if (!nodes_[root.id].requires_grad) return;
    nodes_[root.id].grad = Mat::Ones(1, 1);
    for (std::int32_t i = root.id; i >= 0; --i) {
      Node& n = nodes_[i];
      if (!n.requires_grad || n.grad.size() == 0 || !n.backward) continue;
      Mat g = std::move(n.grad);
      n.backward(*this, g);
      n.grad.resize(0, 0);
    }
  }

  // Gradient of a leaf after backward(); zero if the leaf was never reached.
  Mat grad(Var v) const {
    const Node& n = nodes_[v.id];
    if (n.grad.size() == 0) return Mat::Zero(n.value.rows(), n.value.cols());
    return n.grad;
  }

 private:
  struct Node {
    Mat value;
    Mat grad;
    bool requires_grad;
    bool nonsmooth;
    Backward backward;
    Eigen::ArrayXXd act;
    int act_fn;
  };

  std::vector<Node> nodes_;
  bool nonsmooth_ = false;
};

inline const Mat& Var::value() const { return tape->value(id); }

namespace detail {

inline bool rg(const Var& v) { return v.tape->requires_grad(v.id); }

inline void same_tape(const Var& a, const Var& b) {
  if (a.tape != b.tape) throw ArgumentError("operands live on different tapes");
}

inline void same_shape(const Var& a, const Var& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols())
    throw ShapeError(std::string(op) + ": shape mismatch " + std::to_string(a.rows()) + "x" + std::to_string(a.cols()) +
                     " vs " + std::to_string(b.rows()) + "x" + std::to_string(b.cols()));
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Primitive operations on Var. Arguments must be present (non-absent).

inline Var add(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "add");
  const auto ia = a.id, ib = b.id;
  return a.tape->push(a.value() + b.value(), detail::rg(a) || detail::rg(b), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, g);
  });
}

inline Var sub(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "sub");
  const auto ia = a.id, ib = b.id;
  return a.tape->push(a.value() - b.value(), detail::rg(a) || detail::rg(b), [ia, ib](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ib, -g);
  });
}

inline Var mul(Var a, Var b) {
  detail::same_tape(a, b);
  detail::same_shape(a, b, "mul");
  const auto ia = a.id, ib = b.id;
  return a.tape->push(a.value().cwiseProduct(b.value()), detail::rg(a) || detail::rg(b),
                      [ia, ib](Tape& t, const Mat& g) {
                        t.accumulate(ia, g.cwiseProduct(t.value(ib)));
                        t.accumulate(ib, g.cwiseProduct(t.value(ia)));
                      });
}

inline Var scale(Var a, double c) {
  const auto ia = a.id;
  return a.tape->push(a.value() * c, detail::rg(a), [ia, c](Tape& t, const Mat& g) { t.accumulate(ia, g * c); });
}

inline Var neg(Var a) { return scale(a, -1.0); }

inline Var add_scalar(Var a, double c) {
  const auto ia = a.id;
  return a.tape->push(a.value().array() + c, detail::rg(a), [ia](Tape& t, const Mat& g) { t.accumulate(ia, g); });
}

// (R x n) * (n x m)
inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b);
  if (a.cols() != b.rows())
    throw ShapeError("matmul: inner dimensions " + std::to_string(a.cols()) + " and " + std::to_string(b.rows()));
  const auto ia = a.id, ib = b.id;
  return a.tape->push(a.value() * b.value(), detail::rg(a) || detail::rg(b), [ia, ib](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
    if (t.requires_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
  });
}

// Adds a 1 x m row to every row of a.
inline Var add_row(Var a, Var row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("add_row: row must be 1 x cols");
  const auto ia = a.id, ir = row.id;
  Mat v = a.value().rowwise() + row.value().row(0);
  return a.tape->push(std::move(v), detail::rg(a) || detail::rg(row), [ia, ir](Tape& t, const Mat& g) {
    t.accumulate(ia, g);
    t.accumulate(ir, g.colwise().sum());
  });
}

// Multiplies every row of a elementwise by a 1 x m row.
inline Var mul_row(Var a, Var row) {
  detail::same_tape(a, row);
  if (row.rows() != 1 || row.cols() != a.cols()) throw ShapeError("mul_row: row must be 1 x cols");
  const auto ia = a.id, ir = row.id;
  Mat v = a.value().array().rowwise() * row.value().row(0).array();
  return a.tape->push(std::move(v), detail::rg(a) || detail::rg(row), [ia, ir](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, (g.array().rowwise() * t.value(ir).row(0).array()).matrix());
    if (t.requires_grad(ir)) t.accumulate(ir, g.cwiseProduct(t.value(ia)).colwise().sum());
  });
}

// Multiplies every column of a (R x m) elementwise by c (R x 1).
inline Var mul_col(Var a, Var c) {
  detail::same_tape(a, c);
  if (c.cols() != 1 || c.rows() != a.rows()) throw ShapeError("mul_col: column must be rows x 1");
  const auto ia = a.id, ic = c.id;
  Mat v = a.value().array().colwise() * c.value().col(0).array();
  return a.tape->push(std::move(v), detail::rg(a) || detail::rg(c), [ia, ic](Tape& t, const Mat& g) {
    if (t.requires_grad(ia)) t.accumulate(ia, (g.array().colwise() * t.value(ic).col(0).array()).matrix());
    if (t.requires_grad(ic)) t.accumulate(ic, g.cwiseProduct(t.value(ia)).rowwise().sum());
  });
}

// R x 1 -> R x m by repeating the column.
inline Var bcast_col(Var c, Index m) {
  if (c.cols() != 1) throw ShapeError("bcast_col: expected a column");
  const auto ic = c.id;
  Mat v = c.value().replicate(1, m);
  return c.tape->push(std::move(v), detail::rg(c), [ic](Tape& t, const Mat& g) { t.accumulate(ic, g.rowwise().sum()); });
}

inline Var row_sum(Var a) {
  const auto ia = a.id;
  const Index m = a.cols();
  return a.tape->push(a.value().rowwise().sum(), detail::rg(a),
                      [ia, m](Tape& t, const Mat& g) { t.accumulate(ia, g.replicate(1, m)); });
}

inline Var sum_all(Var a) {
  const auto ia = a.id;
  const Index r = a.rows(), c = a.cols();
  Mat v(1, 1);
  v(0, 0) = a.value().sum();
  return a.tape->push(std::move(v), detail::rg(a),
                      [ia, r, c](Tape& t, const Mat& g) { t.accumulate(ia, Mat::Constant(r, c, g(0, 0))); });
}

inline Var slice_cols(Var a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.cols()) throw ShapeError("slice_cols: range out of bounds");
  const auto ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return a.tape->push(a.value().middleCols(start, n), detail::rg(a), [ia, r, c, start, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(r, c);
    full.middleCols(start, n) = g;
    t.accumulate(ia, full);
  });
}

inline Var slice_rows(Var a, Index start, Index n) {
  if (start < 0 || n < 0 || start + n > a.rows()) throw ShapeError("slice_rows: range out of bounds");
  const auto ia = a.id;
  const Index r = a.rows(), c = a.cols();
  return a.tape->push(a.value().middleRows(start, n), detail::rg(a), [ia, r, c, start, n](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(r, c);
    full.middleRows(start, n) = g;
    t.accumulate(ia, full);
  });
}

inline Var concat_cols(const std::vector<Var>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  if (parts.size() == 1) return parts[0];
  const Index r = parts[0].rows();
  Index c = 0;
  bool need = false;
  for (const auto& p : parts) {
    detail::same_tape(parts[0], p);
    if (p.rows() != r) throw ShapeError("concat_cols: row mismatch");
    c += p.cols();
    need = need || detail::rg(p);
  }
  Mat v(r, c);
  std::vector<std::pair<std::int32_t, Index>> spans;
  Index off = 0;
  for (const auto& p : parts) {
    v.middleCols(off, p.cols()) = p.value();
    spans.emplace_back(p.id, off);
    off += p.cols();
  }
  return parts[0].tape->push(std::move(v), need, [spans](Tape& t, const Mat& g) {
    for (const auto& [id, start] : spans) {
      if (t.requires_grad(id)) t.accumulate(id, g.middleCols(start, t.value(id).cols()));
    }
  });
}

// out.row(r) = a.row(idx[r])
inline Var gather_rows(Var a, std::vector<Index> idx) {
  const Index n = a.rows();
  for (Index i : idx)
    if (i < 0 || i >= n) throw ShapeError("gather_rows: index out of range");
  Mat v(static_cast<Index>(idx.size()), a.cols());
  for (std::size_t r = 0; r < idx.size(); ++r) v.row(static_cast<Index>(r)) = a.value().row(idx[r]);
  const auto ia = a.id;
  const Index c = a.cols();
  return a.tape->push(std::move(v), detail::rg(a), [ia, n, c, idx = std::move(idx)](Tape& t, const Mat& g) {
    Mat full = Mat::Zero(n, c);
    for (std::size_t r = 0; r < idx.size(); ++r) full.row(idx[r]) += g.row(static_cast<Index>(r));
    t.accumulate(ia, full);
  });
}

// Stacks k copies of a vertically.
inline Var tile_rows(Var a, int k) {
  if (k == 1) return a;
  const auto ia = a.id;
  const Index r = a.rows();
  return a.tape->push(a.value().replicate(k, 1), detail::rg(a), [ia, r, k](Tape& t, const Mat& g) {
    Mat acc = g.middleRows(0, r);
    for (int j = 1; j < k; ++j) acc += g.middleRows(j * r, r);
    t.accumulate(ia, acc);
  });
}

// For a (k*R x m) tangent stack, out[r] = sum_i sum_j w(i, j) * a(i*R + r, j).
// With w = identity and block i holding the derivative along e_i this is the
// divergence of the field.
inline Var block_contract(Var a, int k, const Mat& w) {
  if (a.rows() % k != 0) throw ShapeError("block_contract: rows not divisible by block count");
  if (w.rows() != k || w.cols() != a.cols()) throw ShapeError("block_contract: weight shape mismatch");
  const Index r = a.rows() / k;
  Mat v = Mat::Zero(r, 1);
  for (int i = 0; i < k; ++i) v += a.value().middleRows(i * r, r) * w.row(i).transpose();
  const auto ia = a.id;
  return a.tape->push(std::move(v), detail::rg(a), [ia, r, k, w](Tape& t, const Mat& g) {
    Mat full(k * r, w.cols());
    for (int i = 0; i < k; ++i) full.middleRows(i * r, r) = g.col(0) * w.row(i);
    t.accumulate(ia, full);
  });
}

// n-th derivative of an elementwise function.
inline Var elementwise(Fn fn, int order, Var a, double param = 0.0) {
  const Eigen::ArrayXXd* u = detail::has_activation_base(fn) ? &a.tape->activation_base(a.id, fn) : nullptr;
  Mat v = detail::fn_derivative(fn, order, a.value(), param, u);
  const auto ia = a.id;
  return a.tape->push(
      std::move(v), detail::rg(a),
      [ia, fn, order, param](Tape& t, const Mat& g) {
        const Eigen::ArrayXXd* u = detail::has_activation_base(fn) ? &t.activation_base(ia, fn) : nullptr;
        const Mat d = detail::fn_derivative(fn, order + 1, t.value(ia), param, u);
        t.accumulate(ia, g.cwiseProduct(d));
      },
      fn == Fn::Relu);
}

// Per-row L L^T x with L stored row-wise as a flattened d x r matrix (column
// major within each row: entry (i, j) at i + d*j).
inline Var lowrank_apply(Var lflat, Var x, int d, int rank) {
  detail::same_tape(lflat, x);
  const Index n = x.rows();
  if (x.cols() != d || lflat.cols() != d * rank || lflat.rows() != n) throw ShapeError("lowrank_apply: shape mismatch");
  Mat out(n, d);
  Mat lr(d, rank);
  for (Index r = 0; r < n; ++r) {
    for (int j = 0; j < rank; ++j)
      for (int i = 0; i < d; ++i) lr(i, j) = lflat.value()(r, i + d * j);
    out.row(r) = (lr * (lr.transpose() * x.value().row(r).transpose())).transpose();
  }
  const auto il = lflat.id, ix = x.id;
  return x.tape->push(std::move(out), detail::rg(lflat) || detail::rg(x), [il, ix, d, rank](Tape& t, const Mat& g) {
    const Mat& lv = t.value(il);
    const Mat& xv = t.value(ix);
    const Index n = xv.rows();
    Mat gx(n, d), gl(n, static_cast<Index>(d) * rank);
    for (Index r = 0; r < n; ++r) {
      Mat lr(d, rank);
      for (int j = 0; j < rank; ++j)
        for (int i = 0; i < d; ++i) lr(i, j) = lv(r, i + d * j);
      const Eigen::VectorXd xr = xv.row(r).transpose();
      const Eigen::VectorXd gr = g.row(r).transpose();
      // y = L L^T x : dy/dx^T g = L L^T g ; dL = g (L^T x)^T + x (L^T g)^T
      gx.row(r) = (lr * (lr.transpose() * gr)).transpose();
      const Mat dl = gr * (lr.transpose() * xr).transpose() + xr * (lr.transpose() * gr).transpose();
      for (int j = 0; j < rank; ++j)
        for (int i = 0; i < d; ++i) gl(r, i + d * j) = dl(i, j);
    }
    if (t.requires_grad(ix)) t.accumulate(ix, gx);
    if (t.requires_grad(il)) t.accumulate(il, gl);
  });
}

}  // namespace scvm::ad
