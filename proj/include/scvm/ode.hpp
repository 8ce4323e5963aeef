#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <vector>

#include <Eigen/Dense>

#include "scvm/error.hpp"

namespace scvm::ode {

using State = Eigen::VectorXd;
using Rhs = std::function<State(double, const State&)>;

struct OdeProblem {
  Rhs rhs;
  double t0 = 0.0;
  double t1 = 1.0;
  State y0;
};

struct StepStats {
  long accepted_steps = 0;
  long rejected_steps = 0;
  long rhs_evaluations = 0;

  StepStats& operator+=(const StepStats& o) {
    accepted_steps += o.accepted_steps;
    rejected_steps += o.rejected_steps;
    rhs_evaluations += o.rhs_evaluations;
    return *this;
  }
};

enum class Method { Dopri5, Rk4 };

struct IntegratorConfig {
  Method method = Method::Dopri5;
  double rtol = 1e-4;
  double atol = 1e-4;
  int rk4_steps = 100;                 // uniform steps across the whole [t0, t1]
  std::optional<double> initial_step;  // magnitude; chosen automatically when empty
  long max_steps = 1'000'000;
};

struct Solution {
  State y;
  StepStats stats;
};

namespace detail {

inline void check_finite(const State& y, double t) {
  if (!y.allFinite()) throw DivergenceError("non-finite ODE state", t);
}

}  // namespace detail

inline State rk4_fixed(const OdeProblem& p, int n_steps) {
  if (n_steps < 1) throw ArgumentError("rk4_fixed: n_steps must be at least 1");
  const double h = (p.t1 - p.t0) / n_steps;
  State y = p.y0;
  for (int i = 0; i < n_steps; ++i) {
    const double t = p.t0 + i * h;
    const State k1 = p.rhs(t, y);
    const State k2 = p.rhs(t + 0.5 * h, y + 0.5 * h * k1);
    const State k3 = p.rhs(t + 0.5 * h, y + 0.5 * h * k2);
    const State k4 = p.rhs(t + h, y + h * k3);
    y += (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
    detail::check_finite(y, t + h);
  }
  return y;
}

// Dormand-Prince 5(4) with PI step-size control. Integration runs backward
// when t1 < t0.
inline Solution dopri5_adaptive(const OdeProblem& p, double rtol, double atol,
                                std::optional<double> initial_step = std::nullopt, long max_steps = 1'000'000) {
  if (!(rtol > 0) || !(atol > 0)) throw ArgumentError("dopri5: tolerances must be positive");
  Solution sol{p.y0, {}};
  const double span = p.t1 - p.t0;
  if (span == 0.0) return sol;
  const double dir = span > 0 ? 1.0 : -1.0;
  const double h_min = 1e-12 * std::abs(span);

  // Butcher tableau.
  constexpr double c2 = 1.0 / 5, c3 = 3.0 / 10, c4 = 4.0 / 5, c5 = 8.0 / 9;
  constexpr double a21 = 1.0 / 5;
  constexpr double a31 = 3.0 / 40, a32 = 9.0 / 40;
  constexpr double a41 = 44.0 / 45, a42 = -56.0 / 15, a43 = 32.0 / 9;
  constexpr double a51 = 19372.0 / 6561, a52 = -25360.0 / 2187, a53 = 64448.0 / 6561, a54 = -212.0 / 729;
  constexpr double a61 = 9017.0 / 3168, a62 = -355.0 / 33, a63 = 46732.0 / 5247, a64 = 49.0 / 176,
                   a65 = -5103.0 / 18656;
  constexpr double b1 = 35.0 / 384, b3 = 500.0 / 1113, b4 = 125.0 / 192, b5 = -2187.0 / 6784, b6 = 11.0 / 84;
  // b - b_hat (error weights).
  constexpr double e1 = 71.0 / 57600, e3 = -71.0 / 16695, e4 = 71.0 / 1920, e5 = -17253.0 / 339200, e6 = 22.0 / 525,
                   e7 = -1.0 / 40;

  auto& st = sol.stats;
  auto f = [&](double t, const State& y) {
    ++st.rhs_evaluations;
    return p.rhs(t, y);
  };
  auto err_norm = [&](const State& err, const State& y0, const State& y1) {
    const State sc = (atol + rtol * y0.cwiseAbs().cwiseMax(y1.cwiseAbs()).array()).matrix();
    return std::sqrt((err.array() / sc.array()).square().mean());
  };

  State y = p.y0;
  double t = p.t0;
  State k1 = f(t, y);
  detail::check_finite(k1, t);

  double h;
  if (initial_step) {
    h = std::min(std::abs(*initial_step), std::abs(span));
  } else {
    // Hairer-Norsett-Wanner starting step.
    const State sc = (atol + rtol * y.cwiseAbs().array()).matrix();
    const double d0 = std::sqrt((y.array() / sc.array()).square().mean());
    const double d1 = std::sqrt((k1.array() / sc.array()).square().mean());
    double h0 = (d0 < 1e-5 || d1 < 1e-5) ? 1e-6 : 0.01 * d0 / d1;
    h0 = std::min(h0, std::abs(span));
    const State k_probe = f(t + dir * h0, y + dir * h0 * k1);
    const double d2 = std::sqrt(((k_probe - k1).array() / sc.array()).square().mean()) / h0;
    const double dm = std::max(d1, d2);
    const double h1 = dm <= 1e-15 ? std::max(1e-6, h0 * 1e-3) : std::pow(0.01 / dm, 1.0 / 5);
    h = std::min({100 * h0, h1, std::abs(span)});
  }

  constexpr double safety = 0.9, fac_min = 0.2, fac_max = 10.0, beta = 0.04, alpha = 0.2 - 0.75 * beta;
  double err_old = 1e-4;
  bool last_rejected = false;
  long steps = 0;

  while (dir * (p.t1 - t) > 0) {
    if (++steps > max_steps) throw StiffnessError("dopri5: maximum number of steps exceeded", t);
    if (h < h_min) throw StiffnessError("dopri5: step size underflow", t);
    const bool final_step = h >= std::abs(p.t1 - t);
    const double hs = final_step ? (p.t1 - t) : dir * h;

    const State k2 = f(t + c2 * hs, y + hs * (a21 * k1));
    const State k3 = f(t + c3 * hs, y + hs * (a31 * k1 + a32 * k2));
    const State k4 = f(t + c4 * hs, y + hs * (a41 * k1 + a42 * k2 + a43 * k3));
    const State k5 = f(t + c5 * hs, y + hs * (a51 * k1 + a52 * k2 + a53 * k3 + a54 * k4));
    const State k6 = f(t + hs, y + hs * (a61 * k1 + a62 * k2 + a63 * k3 + a64 * k4 + a65 * k5));
    const State y_new = y + hs * (b1 * k1 + b3 * k3 + b4 * k4 + b5 * k5 + b6 * k6);
    const State k7 = f(t + hs, y_new);
    const State err = hs * (e1 * k1 + e3 * k3 + e4 * k4 + e5 * k5 + e6 * k6 + e7 * k7);

    const double en = err_norm(err, y, y_new);
    if (!std::isfinite(en)) {
      // Treat a non-finite trial as a failed step; give up once the step is tiny.
      ++st.rejected_steps;
      if (!y_new.allFinite() && std::abs(hs) <= 2 * h_min) throw DivergenceError("dopri5: non-finite state", t + hs);
      h = std::abs(hs) * fac_min;
      last_rejected = true;
      continue;
    }
    if (en <= 1.0) {
      ++st.accepted_steps;
      t = final_step ? p.t1 : t + hs;
      y = y_new;
      k1 = k7;
      detail::check_finite(y, t);
      double fac = en == 0.0 ? fac_max : safety * std::pow(en, -alpha) * std::pow(err_old, beta);
      fac = std::clamp(fac, fac_min, last_rejected ? 1.0 : fac_max);
      h = std::abs(hs) * fac;
      err_old = std::max(en, 1e-4);
      last_rejected = false;
    } else {
      ++st.rejected_steps;
      h = std::abs(hs) * std::max(fac_min, safety * std::pow(en, -alpha));
      last_rejected = true;
    }
  }
  sol.y = y;
  return sol;
}

inline Solution integrate(const OdeProblem& p, const IntegratorConfig& cfg) {
  if (cfg.method == Method::Rk4) {
    Solution s{rk4_fixed(p, cfg.rk4_steps), {}};
    s.stats.accepted_steps = cfg.rk4_steps;
    s.stats.rhs_evaluations = 4L * cfg.rk4_steps;
    return s;
  }
  return dopri5_adaptive(p, cfg.rtol, cfg.atol, cfg.initial_step, cfg.max_steps);
}

// States at each requested time, integrating segment by segment from t0.
// Step control restarts at every checkpoint. Times must be sorted in the
// direction of integration and lie within [t0, t1].
inline std::vector<State> integrate_with_checkpoints(const OdeProblem& p, const std::vector<double>& times,
                                                     const IntegratorConfig& cfg, StepStats* stats = nullptr) {
  const double dir = p.t1 >= p.t0 ? 1.0 : -1.0;
  const double lo = std::min(p.t0, p.t1), hi = std::max(p.t0, p.t1);
  for (std::size_t i = 0; i < times.size(); ++i) {
    if (times[i] < lo || times[i] > hi) throw ArgumentError("integrate_with_checkpoints: time outside [t0, t1]");
    if (i > 0 && dir * (times[i] - times[i - 1]) < 0) throw ArgumentError("integrate_with_checkpoints: times not sorted");
  }
  std::vector<State> out;
  out.reserve(times.size());
  State y = p.y0;
  double t = p.t0;
  for (double target : times) {
    if (target != t) {
      OdeProblem seg{p.rhs, t, target, y};
      IntegratorConfig c = cfg;
      if (cfg.method == Method::Rk4)
        c.rk4_steps = std::max(1, static_cast<int>(std::ceil(cfg.rk4_steps * std::abs(target - t) / (hi - lo))));
      Solution s = integrate(seg, c);
      if (stats) *stats += s.stats;
      y = std::move(s.y);
      t = target;
    }
    out.push_back(y);
  }
  return out;
}

}  // namespace scvm::ode
