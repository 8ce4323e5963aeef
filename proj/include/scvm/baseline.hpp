#pragma once

#include <cmath>
#include <functional>
#include <ostream>
#include <sstream>
#include <iomanip>
#include <string>
#include <vector>

#include "scvm/pde.hpp"

namespace scvm::baseline {

using Eigen::Index;
using Mat = Eigen::MatrixXd;

struct ParticleEnsemble {
  Mat positions;  // n x d
  double time = 0;
};

using DriftFn = std::function<Mat(double t, const Mat& x)>;
using DiffusionFn = std::function<Mat(double t)>;

inline constexpr double kDivergenceBound = 1e8;

namespace detail {

// Factor S with S S^T = 2 D dt; D may be singular.
inline Mat noise_factor(const Mat& d, double dt) {
  const Mat a = 2 * dt * 0.5 * (d + d.transpose());
  const Eigen::SelfAdjointEigenSolver<Mat> es(a);
  const Eigen::VectorXd ev = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return es.eigenvectors() * ev.asDiagonal();
}

}  // namespace detail

// Euler-Maruyama for dX = b_t(X) dt + sqrt(2 D_t) dW on the grid t_k = k dt
// (the last step is shortened to land on T). Each requested time is recorded
// at the first grid point at or after it.
inline std::vector<ParticleEnsemble> em_simulate(const DriftFn& drift, const DiffusionFn& diffusion, Mat x, double dt,
                                                 double total_time, Stream& rng, const std::vector<double>& record_times) {
  if (!(dt > 0)) throw ArgumentError("em_simulate: dt must be positive");
  if (!(total_time >= 0)) throw ArgumentError("em_simulate: T must be nonnegative");
  for (std::size_t i = 0; i < record_times.size(); ++i) {
    if (record_times[i] < 0 || record_times[i] > total_time)
      throw ArgumentError("em_simulate: record times must lie in [0, T]");
    if (i > 0 && record_times[i] < record_times[i - 1]) throw ArgumentError("em_simulate: record times must be sorted");
  }
  const Index n = x.rows(), d = x.cols();
  const long steps = static_cast<long>(std::ceil(total_time / dt - 1e-9));
  std::vector<ParticleEnsemble> out;
  std::size_t next = 0;
  auto record = [&](double t) {
    while (next < record_times.size() && record_times[next] <= t + 1e-12) {
      out.push_back({x, t});
      ++next;
    }
  };
  double t = 0;
  record(t);
  Stream noise = rng.split("noise");
  Mat last_d;
  Mat factor;
  for (long k = 0; k < steps; ++k) {
    const double h = std::min(dt, total_time - t);
    const Mat dk = diffusion(t);
    if (dk.rows() != d || dk.cols() != d) throw ShapeError("em_simulate: diffusion matrix has the wrong shape");
    if (k == 0 || h != dt || dk != last_d) {
      factor = detail::noise_factor(dk, h);
      last_d = dk;
    }
    const Mat b = drift(t, x);
    if (b.rows() != n || b.cols() != d) throw ShapeError("em_simulate: drift has the wrong shape");
    x += h * b;
    if (!factor.isZero(0.0)) x += noise.normal_matrix(n, d) * factor.transpose();
    t = (k + 1 == steps) ? total_time : (k + 1) * dt;
    if (!x.allFinite() || x.cwiseAbs().maxCoeff() > kDivergenceBound) {
      std::ostringstream os;
      os << "em_simulate: particles diverged at step " << k + 1;
      throw DivergenceError(os.str(), t);
    }
    record(t);
  }
  return out;
}

inline double default_dt(const std::string& problem) { return problem == "obstacles" ? 0.005 : 0.01; }

// Fokker-Planck right-hand side b, D simulated from its initial measure. A
// drift that needs E[mu_t] gets the current ensemble mean.
inline std::vector<ParticleEnsemble> em_simulate(const pde::PdeRhs& rhs, Index n, double dt, Stream& rng,
                                                 const std::vector<double>& record_times) {
  if (!rhs.has_decomposition())
    throw CapabilityError(rhs.name() + ": the particle baseline needs a Fokker-Planck decomposition");
  if (rhs.drift_needs().score || rhs.drift_needs().density)
    throw CapabilityError(rhs.name() + ": the drift depends on the density, which particles do not provide");
  Stream init = rng.split("initial");
  const Mat x0 = rhs.initial().sample(n, init);
  const DriftFn drift = [&rhs](double t, const Mat& x) {
    const auto ctx = pde::FlowContext::from_particles(x);
    return rhs.drift(ctx, flow::TimeGrid::constant(t, x.rows()), x);
  };
  Stream sim = rng.split("em");
  return em_simulate(drift, [&rhs](double t) { return rhs.diffusion(t); }, x0, dt, rhs.total_time(), sim, record_times);
}

// Columns t, particle, x0..x{d-1}.
inline void write_snapshots_csv(std::ostream& os, const std::vector<ParticleEnsemble>& snaps) {
  if (snaps.empty()) return;
  const Index d = snaps.front().positions.cols();
  os << "t,particle";
  for (Index j = 0; j < d; ++j) os << ",x" << j;
  os << '\n';
  std::ostringstream line;
  line << std::setprecision(17);
  for (const auto& s : snaps)
    for (Index i = 0; i < s.positions.rows(); ++i) {
      line.str("");
      line << s.time << ',' << i;
      for (Index j = 0; j < d; ++j) line << ',' << s.positions(i, j);
      line << '\n';
      os << line.str();
    }
}

}  // namespace scvm::baseline
