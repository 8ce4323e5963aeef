#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "scvm/flowmodel.hpp"
#include "scvm/pde.hpp"
#include "scvm/reference.hpp"
#include "scvm/trainer.hpp"

namespace scvm::metrics {

using Eigen::Index;
using Eigen::VectorXd;
using flow::FlowModel;
using flow::TimeGrid;
using Mat = Eigen::MatrixXd;

using Warnings = std::vector<std::string>;

struct Stat {
  double mean = 0;
  double std = 0;  // sample standard deviation across repeats (0 for a single repeat)
  std::vector<double> values;
};

inline Stat summarize(std::vector<double> values) {
  if (values.empty()) throw ArgumentError("summarize: no values");
  Stat s;
  const double n = static_cast<double>(values.size());
  for (double v : values) s.mean += v;
  s.mean /= n;
  if (values.size() > 1) {
    double ss = 0;
    for (double v : values) ss += (v - s.mean) * (v - s.mean);
    s.std = std::sqrt(ss / (n - 1));
  }
  s.values = std::move(values);
  return s;
}

// Repeat r receives rng.split("repeat", r).
inline Stat repeated(int repeats, const Stream& rng, const std::function<double(Stream&)>& estimate) {
  if (repeats < 1) throw ArgumentError("metrics: repeats must be at least 1");
  std::vector<double> v;
  for (int r = 0; r < repeats; ++r) {
    Stream s = rng.split("repeat", static_cast<std::uint64_t>(r));
    v.push_back(estimate(s));
  }
  return summarize(std::move(v));
}

// A distribution that can be sampled and whose log density can be evaluated.
struct Distribution {
  std::string name;
  std::function<Mat(Index, Stream&)> sample;
  std::function<VectorXd(const Mat&)> log_density;
};

inline Distribution model_at(const FlowModel& m, double t, std::string name = "model") {
  return {std::move(name),
          [&m, t](Index n, Stream& rng) { return m.flow_map(TimeGrid::constant(t, n), m.base().sample(n, rng)); },
          [&m, t](const Mat& x) { return m.log_density(TimeGrid::constant(t, x.rows()), x); }};
}

inline VectorXd gaussian_log_density(const reference::Gaussian& g, const Mat& x) {
  const Eigen::LLT<Mat> llt(g.cov);
  if (llt.info() != Eigen::Success) throw ArgumentError("gaussian density: covariance is not positive definite");
  const Index d = g.mean.size();
  const Mat c = (x.rowwise() - g.mean.transpose()).transpose();
  const Mat z = llt.matrixL().solve(c);
  const double log_norm = -0.5 * static_cast<double>(d) * std::log(2 * M_PI) - Mat(llt.matrixL()).diagonal().array().log().sum();
  return (log_norm - 0.5 * z.colwise().squaredNorm().array()).matrix().transpose();
}

inline Mat gaussian_sample(const reference::Gaussian& g, Index n, Stream& rng) {
  const Eigen::LLT<Mat> llt(g.cov);
  if (llt.info() != Eigen::Success) throw ArgumentError("gaussian sample: covariance is not positive definite");
  return (rng.normal_matrix(n, g.mean.size()) * Mat(llt.matrixL()).transpose()).rowwise() + g.mean.transpose();
}

inline Distribution gaussian(const reference::Gaussian& g, std::string name = "reference") {
  return {std::move(name), [g](Index n, Stream& rng) { return gaussian_sample(g, n, rng); },
          [g](const Mat& x) { return gaussian_log_density(g, x); }};
}

namespace detail {

// Mean over draws of `from` of g(log from - log to).
inline double mc_term(const Distribution& from, const Distribution& to, Index n, Stream& rng,
                      const std::function<double(double)>& g) {
  const Mat x = from.sample(n, rng);
  const VectorXd lf = from.log_density(x), lt = to.log_density(x);
  double acc = 0;
  for (Index i = 0; i < x.rows(); ++i) {
    if (lt(i) == -std::numeric_limits<double>::infinity())
      throw SupportMismatchError("log density of '" + to.name + "' is -inf at a sample of '" + from.name + "'");
    if (lf(i) == -std::numeric_limits<double>::infinity())
      throw SupportMismatchError("log density of '" + from.name + "' is -inf at one of its own samples");
    acc += g(lf(i) - lt(i));
  }
  return acc / static_cast<double>(x.rows());
}

}  // namespace detail

// KL(p || q) + KL(q || p) by Monte Carlo. Negative directional estimates are
// replaced by their absolute value.
inline Stat sym_kl(const Distribution& p, const Distribution& q, Index n, int repeats, const Stream& rng) {
  return repeated(repeats, rng, [&](Stream& s) {
    Stream sp = s.split("p"), sq = s.split("q");
    const auto id = [](double v) { return v; };
    return std::abs(detail::mc_term(p, q, n, sp, id)) + std::abs(detail::mc_term(q, p, n, sq, id));
  });
}

// D_f(p || q) = E_{X~q}[(log p(X) - log q(X))^2 / 2]. The sampled side always
// draws from the repeat stream's "sampled" child, so sym_f_div is exactly the
// sum of both directions under a shared rng.
inline Stat f_div(const Distribution& p, const Distribution& q, Index n, int repeats, const Stream& rng) {
  return repeated(repeats, rng, [&](Stream& s) {
    Stream sq = s.split("sampled");
    return detail::mc_term(q, p, n, sq, [](double v) { return v * v / 2; });
  });
}

inline Stat sym_f_div(const Distribution& p, const Distribution& q, Index n, int repeats, const Stream& rng) {
  return repeated(repeats, rng, [&](Stream& s) {
    Stream sq = s.split("sampled"), sp = s.split("sampled");
    const auto sq2 = [](double v) { return v * v / 2; };
    return detail::mc_term(q, p, n, sq, sq2) + detail::mc_term(p, q, n, sp, sq2);
  });
}

// ---------------------------------------------------------------------------
// Transport distances.

inline constexpr Index kMaxAssignment = 1024;

// Minimum-cost perfect assignment on a square cost matrix by shortest
// augmenting paths with potentials. Returns col_of[row].
inline std::vector<Index> solve_assignment(const Mat& cost) {
  const Index n = cost.rows();
  if (cost.cols() != n) throw ShapeError("assignment: cost matrix must be square");
  const double inf = std::numeric_limits<double>::infinity();
  // 1-based arrays; index 0 is the virtual root.
  std::vector<double> u(n + 1, 0), v(n + 1, 0), minv(n + 1);
  std::vector<Index> row_of(n + 1, 0), way(n + 1, 0);
  std::vector<char> used(n + 1);
  for (Index i = 1; i <= n; ++i) {
    row_of[0] = i;
    Index j0 = 0;
    std::fill(minv.begin(), minv.end(), inf);
    std::fill(used.begin(), used.end(), 0);
    do {
      used[j0] = 1;
      const Index i0 = row_of[j0];
      double delta = inf;
      Index j1 = 0;
      for (Index j = 1; j <= n; ++j) {
        if (used[j]) continue;
        const double cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
        if (cur < minv[j]) {
          minv[j] = cur;
          way[j] = j0;
        }
        if (minv[j] < delta) {
          delta = minv[j];
          j1 = j;
        }
      }
      for (Index j = 0; j <= n; ++j) {
        if (used[j]) {
          u[row_of[j]] += delta;
          v[j] -= delta;
        } else {
          minv[j] -= delta;
        }
      }
      j0 = j1;
    } while (row_of[j0] != 0);
    do {
      const Index j1 = way[j0];
      row_of[j0] = row_of[j1];
      j0 = j1;
    } while (j0 != 0);
  }
  std::vector<Index> col_of(n);
  for (Index j = 1; j <= n; ++j) col_of[row_of[j] - 1] = j - 1;
  return col_of;
}

// Wasserstein-2 distance between two equal-size empirical measures.
inline double w2_empirical(const Mat& a, const Mat& b) {
  if (a.rows() != b.rows()) throw ArgumentError("w2: sample counts differ (" + std::to_string(a.rows()) + " vs " + std::to_string(b.rows()) + ")");
  if (a.cols() != b.cols()) throw ShapeError("w2: dimensions differ");
  if (a.rows() < 1) throw ArgumentError("w2: empty sample set");
  if (a.rows() > kMaxAssignment)
    throw CapacityError("w2: " + std::to_string(a.rows()) + " samples exceed the exact solver bound of " +
                        std::to_string(kMaxAssignment) + "; subsample and repeat instead");
  const Index n = a.rows();
  Mat cost(n, n);
  for (Index i = 0; i < n; ++i)
    for (Index j = 0; j < n; ++j) cost(i, j) = (a.row(i) - b.row(j)).squaredNorm();
  const auto col = solve_assignment(cost);
  // Summing the matched costs in sorted order makes the result exactly symmetric in (a, b).
  std::vector<double> matched(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) matched[static_cast<std::size_t>(i)] = cost(i, col[static_cast<std::size_t>(i)]);
  std::sort(matched.begin(), matched.end());
  double total = 0;
  for (double c : matched) total += c;
  return std::sqrt(total / static_cast<double>(n));
}

inline reference::Gaussian fit_gaussian(const Mat& x, Warnings* warnings = nullptr, const std::string& label = "samples") {
  if (x.rows() <= x.cols()) throw ArgumentError("fit_gaussian: need more samples than dimensions");
  reference::Gaussian g;
  g.mean = x.colwise().mean().transpose();
  const Mat c = x.rowwise() - g.mean.transpose();
  g.cov = c.transpose() * c / static_cast<double>(x.rows() - 1);
  g.cov = 0.5 * (g.cov + g.cov.transpose());
  const Eigen::SelfAdjointEigenSolver<Mat> es(g.cov, Eigen::EigenvaluesOnly);
  if (es.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff())) {
    g.cov += 1e-8 * Mat::Identity(x.cols(), x.cols());
    if (warnings) warnings->push_back(label + ": singular covariance regularized with 1e-8 I");
  }
  return g;
}

inline double bures_wasserstein(const reference::Gaussian& g1, const reference::Gaussian& g2) {
  using reference::MatrixFn;
  if (g1.mean.size() != g2.mean.size()) throw ShapeError("bures_wasserstein: dimensions differ");
  const Mat r2 = reference::spd_matrix_fn(g2.cov, MatrixFn::Sqrt);
  const Mat inner = r2 * g1.cov * r2;
  const Mat cross = reference::spd_matrix_fn(0.5 * (inner + inner.transpose()), MatrixFn::Sqrt);
  const double bw2 = (g1.mean - g2.mean).squaredNorm() + (g1.cov + g2.cov - 2 * cross).trace();
  return std::sqrt(std::max(0.0, bw2));
}

// Gaussians fitted to both sample sets.
inline double bures_wasserstein(const Mat& a, const Mat& b, Warnings* warnings = nullptr) {
  return bures_wasserstein(fit_gaussian(a, warnings, "first sample set"), fit_gaussian(b, warnings, "second sample set"));
}

// Gaussian fitted to the samples against exact moments.
inline double bures_wasserstein(const Mat& a, const reference::Gaussian& exact, Warnings* warnings = nullptr) {
  return bures_wasserstein(fit_gaussian(a, warnings), exact);
}

// ---------------------------------------------------------------------------
// Densities on a box.

using DensityFn = std::function<VectorXd(const Mat&)>;

// TV(p, q) = (1/2) int |p - q| over the box [lo, hi], by uniform Monte Carlo.
inline double tv_compact(const DensityFn& p, const DensityFn& q, const VectorXd& lo, const VectorXd& hi, Index n,
                         Stream& rng) {
  if (lo.size() != hi.size() || (hi - lo).minCoeff() <= 0) throw ArgumentError("tv: invalid box");
  if (n < 1) throw ArgumentError("tv: n must be positive");
  const Index d = lo.size();
  Mat x = rng.uniform_matrix(n, d, 0.0, 1.0);
  for (Index j = 0; j < d; ++j) x.col(j) = lo(j) + (hi(j) - lo(j)) * x.col(j).array();
  const double vol = (hi - lo).prod();
  return vol / (2.0 * static_cast<double>(n)) * (p(x) - q(x)).cwiseAbs().sum();
}

// Gaussian kernel density estimate with Scott's rule: H = cov * n^{-2/(d+4)}.
class Kde {
 public:
  explicit Kde(Mat samples, Warnings* warnings = nullptr) : x_(std::move(samples)) {
    const Index n = x_.rows(), d = x_.cols();
    if (n < 2) throw ArgumentError("kde: need at least two samples");
    const VectorXd m = x_.colwise().mean().transpose();
    const Mat c = x_.rowwise() - m.transpose();
    Mat cov = c.transpose() * c / static_cast<double>(n - 1);
    cov = 0.5 * (cov + cov.transpose());
    const Eigen::SelfAdjointEigenSolver<Mat> es(cov, Eigen::EigenvaluesOnly);
    if (es.eigenvalues().minCoeff() <= 1e-12 * std::max(1.0, es.eigenvalues().maxCoeff())) {
      cov += 1e-8 * Mat::Identity(d, d);
      if (warnings) warnings->push_back("kde: degenerate sample covariance regularized with 1e-8 I");
    }
    factor_ = std::pow(static_cast<double>(n), -2.0 / (d + 4.0));
    bandwidth_ = cov * factor_;
    llt_.compute(bandwidth_);
    z_ = llt_.matrixL().solve(x_.transpose());
    log_norm_ = -0.5 * d * std::log(2 * M_PI) - Mat(llt_.matrixL()).diagonal().array().log().sum() - std::log(static_cast<double>(n));
  }

  const Mat& bandwidth() const { return bandwidth_; }
  double scott_factor() const { return factor_; }

  VectorXd log_density(const Mat& q) const {
    if (q.cols() != x_.cols()) throw ShapeError("kde: query dimension mismatch");
    const Mat zq = llt_.matrixL().solve(q.transpose());
    VectorXd out(q.rows());
    VectorXd e(x_.rows());
    for (Index i = 0; i < q.rows(); ++i) {
      e = -0.5 * (z_.colwise() - zq.col(i)).colwise().squaredNorm().transpose();
      const double mx = e.maxCoeff();
      out(i) = log_norm_ + mx + std::log((e.array() - mx).exp().sum());
    }
    return out;
  }

 private:
  Mat x_, bandwidth_, z_;
  Eigen::LLT<Mat> llt_;
  double factor_ = 1, log_norm_ = 0;
};

inline VectorXd kde_log_density(const Mat& samples, const Mat& x, Warnings* warnings = nullptr) {
  return Kde(samples, warnings).log_density(x);
}

// ---------------------------------------------------------------------------
// Self-consistency (1/BL) sum |v(y) - f(y; mu^theta)|^2 at theta' = theta.
// std is the standard error of the per-sample residuals.

struct SelfConsistency {
  double mean = 0;
  double std = 0;
  Index n_samples = 0;
};

inline std::shared_ptr<const FlowModel> consistency_copy(const FlowModel& model, const pde::PdeRhs& rhs) {
  std::unique_ptr<FlowModel> m = model.clone();
  if (rhs.needs().score && !m->has_score() && m->can_enable_score()) m->enable_score(true);
  return m;
}

namespace detail {

inline SelfConsistency residual_stats(const VectorXd& terms) {
  SelfConsistency out;
  out.n_samples = terms.size();
  out.mean = terms.mean();
  if (terms.size() > 1)
    out.std = std::sqrt((terms.array() - out.mean).square().sum() / static_cast<double>(terms.size() - 1) /
                        static_cast<double>(terms.size()));
  return out;
}

inline SelfConsistency residual(const FlowModel& model, const pde::PdeRhs& rhs, const std::vector<double>& times,
                                const Mat& x0, const Stream& rng, Index n_mean) {
  const auto frozen = consistency_copy(model, rhs);
  const pde::FlowContext ctx(frozen, rng.split("ctx"), n_mean);
  const train::FrozenBatch fb = train::frozen_samples(*frozen, times, x0);
  const Mat r = frozen->velocity(fb.grid, fb.y) - rhs.evaluate(ctx, fb.grid, fb.y);
  return residual_stats(r.rowwise().squaredNorm());
}

}  // namespace detail

inline SelfConsistency self_consistency(const FlowModel& model, const pde::PdeRhs& rhs, int n_times, Index n_samples,
                                        const Stream& rng, Index n_mean = 1024) {
  if (n_samples < 1) throw ArgumentError("self_consistency: n_samples must be positive");
  Stream base_rng = rng.split("base"), time_rng = rng.split("times");
  const Mat x0 = model.base().sample(n_samples, base_rng);
  const auto times = train::stratified_times(n_times, rhs.total_time(), time_rng);
  return detail::residual(model, rhs, times, x0, rng, n_mean);
}

// Residual mean |v_t - f_t|^2 over mu_t at a single time.
inline SelfConsistency self_consistency_at(const FlowModel& model, const pde::PdeRhs& rhs, double t, Index n_samples,
                                           const Stream& rng, Index n_mean = 1024) {
  if (n_samples < 1) throw ArgumentError("self_consistency: n_samples must be positive");
  Stream base_rng = rng.split("base");
  return detail::residual(model, rhs, {t}, model.base().sample(n_samples, base_rng), rng, n_mean);
}

// ---------------------------------------------------------------------------

struct MetricRecord {
  double t = 0;
  std::string metric;
  double mean = 0;
  double std = 0;
  int n_repeats = 1;
  Index n_samples = 0;
};

struct MetricReport {
  std::vector<MetricRecord> records;

  void add(double t, std::string metric, double mean, double std, int n_repeats, Index n_samples) {
    if (!(std >= 0) || n_repeats < 1) throw ArgumentError("metric report: need std >= 0 and n_repeats >= 1");
    records.push_back({t, std::move(metric), mean, std, n_repeats, n_samples});
  }
  void add(double t, std::string metric, const Stat& s, Index n_samples) {
    add(t, std::move(metric), s.mean, s.std, static_cast<int>(s.values.size()), n_samples);
  }

  void write_csv(std::ostream& os) const {
    os << "t,metric,mean,std,n_repeats,n_samples\n";
    std::ostringstream line;
    for (const auto& r : records) {
      line.str("");
      line << std::setprecision(17) << r.t << ',' << r.metric << ',' << r.mean << ',' << r.std << ',' << r.n_repeats
           << ',' << r.n_samples << '\n';
      os << line.str();
    }
  }
};

}  // namespace scvm::metrics
