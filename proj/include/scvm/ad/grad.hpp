#pragma once

#include <functional>

#include "scvm/ad/dual.hpp"
#include "scvm/ad/params.hpp"

namespace scvm::ad {

// Scalar function of bound parameters, recorded on the given tape.
using ParamFn = std::function<Var(Tape&, const BoundParams&)>;
// Scalar function of a 1 x d input row.
using InputFn = std::function<Var(Tape&, const Var&)>;
// Vector field evaluated with a k-direction tangent stack.
using DualField = std::function<Dual<Var>(Tape&, const Dual<Var>&)>;
// Map of (t, x) with a single tangent direction carried on t.
using TimeField = std::function<Dual<Var>(Tape&, const Dual<Var>& t, const Var& x)>;

namespace detail {

inline void require_scalar(const Var& v, const char* who) {
  if (v.rows() != 1 || v.cols() != 1) throw ShapeError(std::string(who) + ": function must return a 1x1 scalar");
}

inline void require_smooth(const Tape& tape, const char* who) {
  if (tape.has_nonsmooth())
    throw UnsupportedPrimitiveError(std::string(who) + ": function uses a non-differentiable primitive");
}

}  // namespace detail

// Exact gradient of fn with respect to every entry of params.
inline Eigen::VectorXd param_grad(const ParamFn& fn, const ParamStore& params) {
  Tape tape;
  const BoundParams p = bind(tape, params, true);
  const Var out = fn(tape, p);
  detail::require_scalar(out, "param_grad");
  detail::require_smooth(tape, "param_grad");
  tape.backward(out);
  return collect_grad(tape, p, params);
}

inline Eigen::VectorXd input_grad(const InputFn& fn, const Eigen::VectorXd& x) {
  Tape tape;
  const Var xv = tape.leaf(Mat(x.transpose()), true);
  const Var out = fn(tape, xv);
  detail::require_scalar(out, "input_grad");
  detail::require_smooth(tape, "input_grad");
  tape.backward(out);
  return tape.grad(xv).row(0).transpose();
}

// Seeds the standard basis: the tangent stack for R rows in d dimensions is
// (d*R) x d with block i equal to a column of ones in position i.
inline Var basis_tangents(Tape& tape, Index rows, Index d) {
  Mat seed = Mat::Zero(d * rows, d);
  for (Index i = 0; i < d; ++i) seed.block(i * rows, i, rows, 1).setOnes();
  return tape.constant(std::move(seed));
}

// Trace of the Jacobian of field at x, one tangent direction per coordinate.
inline double divergence_exact(const DualField& field, const Eigen::VectorXd& x, int dim) {
  if (x.size() != dim) throw ShapeError("divergence_exact: point has wrong dimension");
  Tape tape;
  const Var xv = tape.constant(Mat(x.transpose()));
  const Dual<Var> in{xv, basis_tangents(tape, 1, dim), dim};
  const Dual<Var> out = field(tape, in);
  if (out.cols() != dim) throw ShapeError("divergence_exact: field output dimension differs from input dimension");
  if (out.tan.absent()) return 0.0;
  return block_contract(out.tan, dim, Mat::Identity(dim, dim)).value()(0, 0);
}

// Partial derivative in the scalar t of fn(t, x).
inline Eigen::VectorXd time_partial(const TimeField& fn, double t, const Eigen::VectorXd& x) {
  Tape tape;
  const Dual<Var> tv{tape.constant(Mat::Constant(1, 1, t)), tape.constant(Mat::Ones(1, 1)), 1};
  const Var xv = tape.constant(Mat(x.transpose()));
  const Dual<Var> out = fn(tape, tv, xv);
  if (out.tan.absent()) return Eigen::VectorXd::Zero(out.cols());
  return out.tan.value().row(0).transpose();
}

}  // namespace scvm::ad
