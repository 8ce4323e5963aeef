#pragma once

// Forward-mode tangents layered on top of the tape.
//
// Dual<T> carries a primal value and a stack of k tangent directions stored
// block-major: rows [j*R, (j+1)*R) of `tan` hold the derivative along
// direction j. Because the tangent arithmetic is expressed with tape
// primitives, reverse sweeps differentiate through it, and Dual<Dual<Var>>
// nests a second (single-direction) derivative.

#include <vector>

#include "scvm/ad/tape.hpp"

namespace scvm::ad {

template <class T>
struct Dual {
  T val;
  T tan;  // absent means an identically zero tangent
  int k = 1;

  bool absent() const { return val.absent(); }
  Index rows() const { return val.rows(); }
  Index cols() const { return val.cols(); }
};

template <class T>
struct is_dual : std::false_type {};
template <class T>
struct is_dual<Dual<T>> : std::true_type {};

// ---------------------------------------------------------------------------
// Helpers that treat absent operands as zero.

template <class T>
T opt_add(const T& a, const T& b) {
  if (a.absent()) return b;
  if (b.absent()) return a;
  return add(a, b);
}

inline Var zeros_like(const Var& proto, Index rows, Index cols) { return proto.tape->constant(Mat::Zero(rows, cols)); }

template <class T>
Dual<T> zeros_like(const Dual<T>& proto, Index rows, Index cols) {
  return Dual<T>{zeros_like(proto.val, rows, cols), T{}, proto.k};
}

inline Tape* tape_of(const Var& v) { return v.tape; }
template <class T>
Tape* tape_of(const Dual<T>& v) {
  return tape_of(v.val);
}

// ---------------------------------------------------------------------------
// Lifting.

template <class T>
Dual<T> lift(const T& v, int k = 1) {
  return Dual<T>{v, T{}, k};
}

template <class T>
Dual<T> make_dual(const T& v, const T& tan, int k = 1) {
  return Dual<T>{v, tan, k};
}

// ---------------------------------------------------------------------------
// Dual arithmetic.

template <class T>
Dual<T> tile_rows(const Dual<T>& a, int k) {
  if (k == 1) return a;
  if (a.k != 1) throw ShapeError("tile_rows: nested tangents must be single-direction");
  return Dual<T>{tile_rows(a.val, k), a.tan.absent() ? T{} : tile_rows(a.tan, k), 1};
}

template <class T>
Dual<T> add(const Dual<T>& a, const Dual<T>& b) {
  return Dual<T>{add(a.val, b.val), opt_add(a.tan, b.tan), std::max(a.k, b.k)};
}

template <class T>
Dual<T> sub(const Dual<T>& a, const Dual<T>& b) {
  T tan;
  if (b.tan.absent()) {
    tan = a.tan;
  } else if (a.tan.absent()) {
    tan = neg(b.tan);
  } else {
    tan = sub(a.tan, b.tan);
  }
  return Dual<T>{sub(a.val, b.val), tan, std::max(a.k, b.k)};
}

template <class T>
Dual<T> mul(const Dual<T>& a, const Dual<T>& b) {
  const int k = std::max(a.k, b.k);
  T ta = a.tan.absent() ? T{} : mul(a.tan, tile_rows(b.val, k));
  T tb = b.tan.absent() ? T{} : mul(tile_rows(a.val, k), b.tan);
  return Dual<T>{mul(a.val, b.val), opt_add(ta, tb), k};
}

template <class T>
Dual<T> scale(const Dual<T>& a, double c) {
  return Dual<T>{scale(a.val, c), a.tan.absent() ? T{} : scale(a.tan, c), a.k};
}

template <class T>
Dual<T> neg(const Dual<T>& a) {
  return scale(a, -1.0);
}

template <class T>
Dual<T> add_scalar(const Dual<T>& a, double c) {
  return Dual<T>{add_scalar(a.val, c), a.tan, a.k};
}

// Right operand is a tangent-free parameter.
template <class T>
Dual<T> matmul(const Dual<T>& a, const Var& w) {
  return Dual<T>{matmul(a.val, w), a.tan.absent() ? T{} : matmul(a.tan, w), a.k};
}

template <class T>
Dual<T> add_row(const Dual<T>& a, const Var& row) {
  return Dual<T>{add_row(a.val, row), a.tan, a.k};
}

template <class T>
Dual<T> mul_row(const Dual<T>& a, const Var& row) {
  return Dual<T>{mul_row(a.val, row), a.tan.absent() ? T{} : mul_row(a.tan, row), a.k};
}

template <class T>
Dual<T> mul_col(const Dual<T>& a, const Dual<T>& c) {
  const int k = std::max(a.k, c.k);
  T ta = a.tan.absent() ? T{} : mul_col(a.tan, tile_rows(c.val, k));
  T tc = c.tan.absent() ? T{} : mul_col(tile_rows(a.val, k), c.tan);
  return Dual<T>{mul_col(a.val, c.val), opt_add(ta, tc), k};
}

template <class T>
Dual<T> bcast_col(const Dual<T>& c, Index m) {
  return Dual<T>{bcast_col(c.val, m), c.tan.absent() ? T{} : bcast_col(c.tan, m), c.k};
}

template <class T>
Dual<T> row_sum(const Dual<T>& a) {
  return Dual<T>{row_sum(a.val), a.tan.absent() ? T{} : row_sum(a.tan), a.k};
}

template <class T>
Dual<T> slice_cols(const Dual<T>& a, Index start, Index n) {
  return Dual<T>{slice_cols(a.val, start, n), a.tan.absent() ? T{} : slice_cols(a.tan, start, n), a.k};
}

template <class T>
Dual<T> concat_cols(const std::vector<Dual<T>>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
  int k = 1;
  bool any_tan = false;
  for (const auto& p : parts) {
    k = std::max(k, p.k);
    any_tan = any_tan || !p.tan.absent();
  }
  std::vector<T> vals, tans;
  for (const auto& p : parts) {
    vals.push_back(p.val);
    if (any_tan) tans.push_back(p.tan.absent() ? zeros_like(p.val, k * p.rows(), p.cols()) : p.tan);
  }
  return Dual<T>{concat_cols(vals), any_tan ? concat_cols(tans) : T{}, k};
}

template <class T>
Dual<T> gather_rows(const Dual<T>& a, const std::vector<Index>& idx) {
  T tan;
  if (!a.tan.absent()) {
    const Index u = a.rows();
    std::vector<Index> expanded;
    expanded.reserve(idx.size() * a.k);
    for (int j = 0; j < a.k; ++j)
      for (Index i : idx) expanded.push_back(j * u + i);
    tan = gather_rows(a.tan, std::move(expanded));
  }
  return Dual<T>{gather_rows(a.val, idx), tan, a.k};
}

template <class T>
Dual<T> elementwise(Fn fn, int order, const Dual<T>& a, double param = 0.0) {
  T tan;
  if (!a.tan.absent()) tan = mul(tile_rows(elementwise(fn, order + 1, a.val, param), a.k), a.tan);
  return Dual<T>{elementwise(fn, order, a.val, param), tan, a.k};
}

template <class T>
Dual<T> lowrank_apply(const T& lflat, const Dual<T>& x, int d, int rank) {
  T tan;
  if (!x.tan.absent()) tan = lowrank_apply(tile_rows(lflat, x.k), x.tan, d, rank);
  return Dual<T>{lowrank_apply(lflat, x.val, d, rank), tan, x.k};
}

// ---------------------------------------------------------------------------
// Named elementwise functions, valid for Var and any Dual nesting.

template <class T>
T silu(const T& a) {
  return elementwise(Fn::Silu, 0, a);
}
template <class T>
T celu(const T& a) {
  return elementwise(Fn::Celu, 0, a);
}
template <class T>
T tanh(const T& a) {
  return elementwise(Fn::Tanh, 0, a);
}
template <class T>
T exp(const T& a) {
  return elementwise(Fn::Exp, 0, a);
}
template <class T>
T log(const T& a) {
  return elementwise(Fn::Log, 0, a);
}
template <class T>
T sin(const T& a) {
  return elementwise(Fn::Sin, 0, a);
}
template <class T>
T cos(const T& a) {
  return elementwise(Fn::Sin, 1, a);
}
template <class T>
T pow(const T& a, double p) {
  return elementwise(Fn::Pow, 0, a, p);
}
template <class T>
T relu(const T& a) {
  return elementwise(Fn::Relu, 0, a);
}

template <class T>
T square(const T& a) {
  return mul(a, a);
}

}  // namespace scvm::ad
