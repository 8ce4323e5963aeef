#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "scvm/error.hpp"
#include "scvm/ode.hpp"
#include "scvm/rng.hpp"

namespace scvm::reference {

using Eigen::MatrixXd;
using Eigen::VectorXd;

enum class MatrixFn { Exp, Sqrt, Inverse, Log };

// Function of a symmetric matrix through its eigendecomposition.
inline MatrixXd spd_matrix_fn(const MatrixXd& a, MatrixFn fn) {
  if (a.rows() != a.cols()) throw ShapeError("spd_matrix_fn: matrix must be square");
  if ((a - a.transpose()).cwiseAbs().maxCoeff() > 1e-8) throw ArgumentError("spd_matrix_fn: matrix is not symmetric");
  Eigen::SelfAdjointEigenSolver<MatrixXd> es(0.5 * (a + a.transpose()));
  VectorXd ev = es.eigenvalues();
  if (fn != MatrixFn::Exp && ev.minCoeff() <= 0) throw ArgumentError("spd_matrix_fn: matrix is not positive definite");
  for (Eigen::Index i = 0; i < ev.size(); ++i) {
    switch (fn) {
      case MatrixFn::Exp: ev(i) = std::exp(ev(i)); break;
      case MatrixFn::Sqrt: ev(i) = std::sqrt(ev(i)); break;
      case MatrixFn::Inverse: ev(i) = 1.0 / ev(i); break;
      case MatrixFn::Log: ev(i) = std::log(ev(i)); break;
    }
  }
  const MatrixXd& v = es.eigenvectors();
  const MatrixXd out = v * ev.asDiagonal() * v.transpose();
  return 0.5 * (out + out.transpose());
}

struct Gaussian {
  VectorXd mean;
  MatrixXd cov;
};

// Gaussian path of dX = -Gamma (X - beta) dt + sqrt(2) dW started at N(0, I).
inline Gaussian ou_solution(double t, const VectorXd& beta, const MatrixXd& gamma) {
  if (t < 0) throw ArgumentError("ou_solution: t must be nonnegative");
  if (gamma.rows() != beta.size() || gamma.cols() != beta.size()) throw ShapeError("ou_solution: dimension mismatch");
  Eigen::SelfAdjointEigenSolver<MatrixXd> check(0.5 * (gamma + gamma.transpose()));
  if ((gamma - gamma.transpose()).cwiseAbs().maxCoeff() > 1e-8 || check.eigenvalues().minCoeff() <= 0)
    throw ArgumentError("ou_solution: Gamma must be symmetric positive definite");
  const Eigen::Index d = beta.size();
  const MatrixXd id = MatrixXd::Identity(d, d);
  const MatrixXd e1 = spd_matrix_fn(-t * gamma, MatrixFn::Exp);
  const MatrixXd e2 = spd_matrix_fn(-2 * t * gamma, MatrixFn::Exp);
  Gaussian g;
  g.mean = (id - e1) * beta;
  g.cov = spd_matrix_fn(gamma, MatrixFn::Inverse) * (id - e2) + e2;
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  return g;
}

// Coefficients of dX = -Gamma_t (X - beta_t) dt + sqrt(2 D_t) dW.
struct LinearSde {
  std::function<MatrixXd(double)> gamma;
  std::function<VectorXd(double)> beta;
  std::function<MatrixXd(double)> diffusion;
};

// Mean and covariance at each requested time (ascending, >= 0) by integrating
// m' = -Gamma (m - beta), S' = -Gamma S - S Gamma^T + 2D from t = 0.
inline std::vector<Gaussian> tdou_moment_path(const std::vector<double>& times, const LinearSde& sde, const VectorXd& m0,
                                              const MatrixXd& s0, double tol = 1e-10) {
  const Eigen::Index d = m0.size();
  if (s0.rows() != d || s0.cols() != d) throw ShapeError("tdou_moments: dimension mismatch");
  Eigen::LLT<MatrixXd> llt(s0);
  if (llt.info() != Eigen::Success) throw ArgumentError("tdou_moments: initial covariance must be SPD");
  auto unpack = [d](const VectorXd& y, VectorXd& m, MatrixXd& s) {
    m = y.head(d);
    s = Eigen::Map<const MatrixXd>(y.data() + d, d, d);
    s = 0.5 * (s + s.transpose());
  };
  ode::Rhs rhs = [&](double t, const VectorXd& y) {
    VectorXd m;
    MatrixXd s;
    unpack(y, m, s);
    const MatrixXd g = sde.gamma(t);
    VectorXd dy(d + d * d);
    dy.head(d) = -g * (m - sde.beta(t));
    MatrixXd ds = -g * s - s * g.transpose() + 2 * sde.diffusion(t);
    ds = 0.5 * (ds + ds.transpose());
    dy.tail(d * d) = Eigen::Map<const VectorXd>(ds.data(), d * d);
    return dy;
  };
  VectorXd y0(d + d * d);
  y0.head(d) = m0;
  y0.tail(d * d) = Eigen::Map<const VectorXd>(s0.data(), d * d);
  double t_end = 0;
  for (double t : times) t_end = std::max(t_end, t);
  const ode::IntegratorConfig cfg{.rtol = tol, .atol = tol};
  const auto states = ode::integrate_with_checkpoints({rhs, 0.0, t_end, y0}, times, cfg);
  std::vector<Gaussian> out;
  for (const auto& y : states) {
    Gaussian g;
    unpack(y, g.mean, g.cov);
    out.push_back(std::move(g));
  }
  return out;
}

inline Gaussian tdou_moments(double t, const LinearSde& sde, const VectorXd& m0, const MatrixXd& s0, double tol = 1e-10) {
  return tdou_moment_path({t}, sde, m0, s0, tol).front();
}

// ---------------------------------------------------------------------------
// Barenblatt profile of d_t p = Laplacian(p^m):
//   p_t(x) = (t + t0)^(-alpha) (C - beta |x|^2 (t + t0)^(-2 alpha / d))_+^(1/(m-1))

enum class AlphaRule {
  Classical,  // d / (d(m-1) + 2)
  Printed,    // m / (d(m-1) + 2)
};

inline double barenblatt_alpha(double m, int d, AlphaRule rule) {
  const double den = d * (m - 1) + 2;
  return (rule == AlphaRule::Classical ? d : m) / den;
}

struct BarenblattProfile {
  double m = 2;
  int d = 1;
  double c = 1;
  double t0 = 1e-3;
  double alpha = 0;
  double beta = 0;

  // C fixed so that the support at t = 0 is the ball of radius `radius0`.
  static BarenblattProfile with_initial_radius(double m, int d, double t0, double radius0,
                                               AlphaRule rule = AlphaRule::Classical) {
    if (!(m > 1) || d < 1 || !(t0 > 0) || !(radius0 > 0)) throw ArgumentError("barenblatt: invalid parameters");
    BarenblattProfile p;
    p.m = m;
    p.d = d;
    p.t0 = t0;
    p.alpha = barenblatt_alpha(m, d, rule);
    p.beta = (m - 1) * p.alpha / (2.0 * d * m);
    p.c = p.beta * radius0 * radius0 * std::pow(t0, -2 * p.alpha / d);
    return p;
  }

  double support_radius(double t) const { return std::sqrt(c / beta) * std::pow(t + t0, alpha / d); }

  // Total mass, the same at every t.
  double mass() const {
    const double k = 1.0 / (m - 1);
    return std::pow(c, k + d / 2.0) * std::pow(beta, -d / 2.0) * std::pow(M_PI, d / 2.0) * std::tgamma(k + 1) /
           std::tgamma(k + 1 + d / 2.0);
  }

  double density(double t, const VectorXd& x) const {
    const double tau = t + t0;
    const double base = c - beta * x.squaredNorm() * std::pow(tau, -2 * alpha / d);
    if (base <= 0) return 0.0;
    return std::pow(tau, -alpha) * std::pow(base, 1.0 / (m - 1));
  }

  // Density of the normalized (probability) measure.
  double probability_density(double t, const VectorXd& x) const { return density(t, x) / mass(); }

  // The profile is self-similar: X_t = X_0 ((t + t0) / t0)^(alpha / d).
  double flow_scale(double t) const { return std::pow((t + t0) / t0, alpha / d); }
};

inline double barenblatt_density(const BarenblattProfile& p, double t, const VectorXd& x) {
  if (t < 0) throw ArgumentError("barenblatt_density: t must be nonnegative");
  if (x.size() != p.d) throw ShapeError("barenblatt_density: dimension mismatch");
  return p.density(t, x);
}

// ---------------------------------------------------------------------------
// Gaussian random-walk Metropolis-Hastings. Returns an n x d matrix.

struct MhOptions {
  double proposal_std = 0.1;
  int burn_in = 1000;
  int thinning = 10;
};

inline MatrixXd mh_sampler(const std::function<double(const VectorXd&)>& log_density, const VectorXd& x0, int n,
                           const MhOptions& opt, Stream& rng) {
  if (n < 0 || opt.burn_in < 0 || opt.thinning < 1 || !(opt.proposal_std > 0))
    throw ArgumentError("mh_sampler: invalid options");
  VectorXd x = x0;
  double lp = log_density(x);
  if (!std::isfinite(lp)) throw ArgumentError("mh_sampler: chain must start where the density is positive");
  const Eigen::Index d = x0.size();
  VectorXd prop(d);
  auto step = [&]() {
    for (Eigen::Index i = 0; i < d; ++i) prop(i) = x(i) + opt.proposal_std * rng.normal();
    const double lq = log_density(prop);
    const double u = rng.uniform();
    if (std::isfinite(lq) && std::log(u) < lq - lp) {
      x = prop;
      lp = lq;
      return true;
    }
    return false;
  };
  long accepted = 0;
  for (int i = 0; i < opt.burn_in; ++i) accepted += step();
  if (opt.burn_in > 0 && accepted < 0.01 * opt.burn_in)
    throw TuningError("mh_sampler: acceptance rate " + std::to_string(double(accepted) / opt.burn_in) +
                      " during burn-in is below 1%; use a smaller proposal_std");
  MatrixXd out(n, d);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < opt.thinning; ++j) step();
    out.row(i) = x.transpose();
  }
  return out;
}

}  // namespace scvm::reference
