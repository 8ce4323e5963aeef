#pragma once

#include <cmath>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "scvm/flowmodel.hpp"
#include "scvm/reference.hpp"

namespace scvm::pde {

using flow::FlowModel;
using flow::TimeGrid;
using Eigen::Index;

struct Needs {
  bool score = false;
  bool density = false;
  bool mean = false;
};

// Read-only view of the frozen flow mu^{theta'} used on the right-hand side.
// Nothing here records gradients.
class FlowContext {
 public:
  FlowContext(std::shared_ptr<const FlowModel> frozen, Stream rng, Index n_mean = 1024)
      : model_(std::move(frozen)), rng_(rng), n_mean_(n_mean) {
    if (!model_) throw ArgumentError("flow context: missing model");
  }

  // Context backed by a particle ensemble: only the mean of mu_t is available.
  static FlowContext from_particles(const Mat& particles) {
    FlowContext c;
    c.particle_mean_ = particles.colwise().mean();
    return c;
  }

  const FlowModel& model() const {
    if (!model_) throw CapabilityError("flow context: backed by particles, no flow model");
    return *model_;
  }
  Index n_mean() const { return n_mean_; }

  Mat score(const TimeGrid& g, const Mat& x) const {
    if (!model_) throw CapabilityError("flow context: particle ensembles have no score");
    if (!model_->has_score())
      throw CapabilityError("this right-hand side needs the score of mu_t, which the " + model_->kind() +
                            " model cannot provide; use the ibp loss with a Fokker-Planck decomposition");
    return model_->score(g, x);
  }

  VectorXd log_density(const TimeGrid& g, const Mat& x) const { return model().log_density(g, x); }

  // Fresh draws from mu_t; the same (context, t) always gives the same draws.
  Mat samples(double t, Index n) const {
    model();
    std::uint64_t bits;
    std::memcpy(&bits, &t, sizeof bits);
    Stream s = rng_.split("ctx.samples", bits);
    const Mat x0 = model_->base().sample(n, s);
    return model_->flow_map(TimeGrid::constant(t, n), x0);
  }

  // Monte Carlo estimate of E[mu_t] for each unique time of the grid (rows of the result).
  Mat means(const TimeGrid& g) const {
    if (!model_) return particle_mean_.replicate(g.unique.size(), 1);
    Mat out(g.unique.size(), model_->dim());
    for (Index u = 0; u < g.unique.size(); ++u) out.row(u) = samples(g.unique(u), n_mean_).colwise().mean();
    return out;
  }

 private:
  FlowContext() : n_mean_(0) {}

  std::shared_ptr<const FlowModel> model_;
  Stream rng_;
  Index n_mean_;
  Eigen::RowVectorXd particle_mean_;
};

// f_t(x; mu_t) for a batch of rows. Fokker-Planck problems additionally
// expose f = b - D grad log p with x-independent D_t.
class PdeRhs {
 public:
  PdeRhs(std::string name, int dim, double total_time, std::shared_ptr<const InitialMeasure> initial)
      : name_(std::move(name)), dim_(dim), total_time_(total_time), initial_(std::move(initial)) {
    if (!(total_time_ > 0)) throw ArgumentError(name_ + ": total time must be positive");
    if (!initial_ || initial_->dim() != dim_) throw ShapeError(name_ + ": initial measure dimension mismatch");
  }
  virtual ~PdeRhs() = default;

  const std::string& name() const { return name_; }
  int dim() const { return dim_; }
  double total_time() const { return total_time_; }
  const InitialMeasure& initial() const { return *initial_; }
  std::shared_ptr<const InitialMeasure> initial_ptr() const { return initial_; }

  virtual Needs needs() const = 0;
  virtual Mat evaluate(const FlowContext& ctx, const TimeGrid& g, const Mat& x) const = 0;

  virtual bool has_decomposition() const { return false; }
  virtual Needs drift_needs() const { return {}; }
  virtual Mat drift(const FlowContext&, const TimeGrid&, const Mat&) const {
    throw CapabilityError(name_ + ": no Fokker-Planck decomposition");
  }
  virtual Mat diffusion(double) const { throw CapabilityError(name_ + ": no Fokker-Planck decomposition"); }

 protected:
  void check(const TimeGrid& g, const Mat& x) const {
    if (x.cols() != dim_) throw ShapeError(name_ + ": points must have " + std::to_string(dim_) + " columns");
    if (g.rows() != x.rows()) throw ShapeError(name_ + ": time grid and batch sizes differ");
  }

  std::string name_;
  int dim_;
  double total_time_;
  std::shared_ptr<const InitialMeasure> initial_;
};

// f = b - D grad log p_t with the score taken from the frozen flow.
class FokkerPlanckRhs : public PdeRhs {
 public:
  using PdeRhs::PdeRhs;

  Needs needs() const override {
    Needs n = drift_needs();
    n.score = true;
    return n;
  }
  bool has_decomposition() const override { return true; }

  Mat evaluate(const FlowContext& ctx, const TimeGrid& g, const Mat& x) const override {
    check(g, x);
    Mat f = drift(ctx, g, x);
    const Mat s = ctx.score(g, x);
    for (Index u = 0; u < g.unique.size(); ++u) {
      const Mat dt = diffusion(g.unique(u)).transpose();
      for (Index r = 0; r < x.rows(); ++r)
        if (g.row_of[static_cast<std::size_t>(r)] == u) f.row(r) -= s.row(r) * dt;
    }
    return f;
  }
};

// ---------------------------------------------------------------------------
// Targets of the KL Wasserstein gradient flow.

struct Target {
  std::string name;
  int dim = 0;
  std::function<VectorXd(const Mat&)> log_density;
  std::function<Mat(const Mat&)> score;
};

struct MogTarget {
  Mat means;  // one component mean per row; identity covariances, uniform weights
};

inline VectorXd mog_log_density(const MogTarget& t, const Mat& x) {
  const Index k = t.means.rows(), d = t.means.cols();
  if (x.cols() != d) throw ShapeError("mog: dimension mismatch");
  VectorXd out(x.rows());
  const double c = -std::log(static_cast<double>(k)) - 0.5 * d * std::log(2 * M_PI);
  for (Index r = 0; r < x.rows(); ++r) {
    const VectorXd e = -0.5 * (t.means.rowwise() - x.row(r)).rowwise().squaredNorm();
    const double m = e.maxCoeff();
    out(r) = m + std::log((e.array() - m).exp().sum()) + c;
  }
  return out;
}

inline Mat mog_score(const MogTarget& t, const Mat& x) {
  if (x.cols() != t.means.cols()) throw ShapeError("mog: dimension mismatch");
  Mat out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const VectorXd e = -0.5 * (t.means.rowwise() - x.row(r)).rowwise().squaredNorm();
    VectorXd w = (e.array() - e.maxCoeff()).exp();
    w /= w.sum();
    out.row(r) = w.transpose() * t.means - x.row(r);
  }
  return out;
}

inline Target mog_target(const MogTarget& mog) {
  return {"mixture of gaussians", static_cast<int>(mog.means.cols()),
          [mog](const Mat& x) { return mog_log_density(mog, x); }, [mog](const Mat& x) { return mog_score(mog, x); }};
}

// Means drawn uniformly from [-half_width, half_width]^d.
inline MogTarget random_mog(int d, int components, double half_width, Stream& rng) {
  return {rng.uniform_matrix(components, d, -half_width, half_width)};
}

// N(beta, Gamma^{-1}).
inline Target gaussian_target(const VectorXd& beta, const Mat& gamma) {
  const Index d = beta.size();
  if (gamma.rows() != d || gamma.cols() != d) throw ShapeError("gaussian target: dimension mismatch");
  Eigen::LLT<Mat> llt(gamma);
  if (llt.info() != Eigen::Success) throw ArgumentError("gaussian target: Gamma must be positive definite");
  const double log_norm = -0.5 * d * std::log(2 * M_PI) + Mat(llt.matrixL()).diagonal().array().log().sum();
  return {"gaussian", static_cast<int>(d),
          [beta, gamma, log_norm](const Mat& x) {
            const Mat c = x.rowwise() - beta.transpose();
            return VectorXd((log_norm - 0.5 * ((c * gamma).cwiseProduct(c)).rowwise().sum().array()).matrix());
          },
          [beta, gamma](const Mat& x) { return Mat(-(x.rowwise() - beta.transpose()) * gamma); }};
}

// KL(mu || p*) gradient flow: f = grad log p* - grad log p_t, i.e. b = grad log p*, D = I.
class KlWgfRhs : public FokkerPlanckRhs {
 public:
  KlWgfRhs(Target target, double total_time, std::shared_ptr<const InitialMeasure> initial)
      : FokkerPlanckRhs("kl_wgf(" + target.name + ")", target.dim, total_time, std::move(initial)),
        target_(std::move(target)) {}

  const Target& target() const { return target_; }
  Mat drift(const FlowContext&, const TimeGrid& g, const Mat& x) const override {
    check(g, x);
    return target_.score(x);
  }
  Mat diffusion(double) const override { return Mat::Identity(dim_, dim_); }

 private:
  Target target_;
};

inline Mat kl_wgf_rhs(const KlWgfRhs& rhs, const FlowContext& ctx, const TimeGrid& g, const Mat& x) {
  return rhs.evaluate(ctx, g, x);
}

// Porous medium equation d_t p = Lap(p^m) on a measure of total mass `mass`:
// f = -m (mass * q)^(m-1) grad log q for the normalized model density q.
class PmeRhs : public PdeRhs {
 public:
  PmeRhs(double m, double mass, double total_time, std::shared_ptr<const InitialMeasure> initial)
      : PdeRhs("pme", initial->dim(), total_time, initial), m_(m), mass_(mass) {
    if (!(m_ > 1)) throw ArgumentError("pme: exponent m must exceed 1");
    if (!(mass_ > 0)) throw ArgumentError("pme: mass must be positive");
  }

  double exponent() const { return m_; }
  double mass() const { return mass_; }
  Needs needs() const override { return {.score = true, .density = true}; }

  Mat evaluate(const FlowContext& ctx, const TimeGrid& g, const Mat& x) const override {
    check(g, x);
    const Mat s = ctx.score(g, x);
    const VectorXd lp = ctx.log_density(g, x);
    const VectorXd coef = (-m_ * ((m_ - 1) * (lp.array() + std::log(mass_))).exp()).matrix();
    return s.array().colwise() * coef.array();
  }

 private:
  double m_, mass_;
};

// ---------------------------------------------------------------------------
// Time-dependent OU trap and the flock-of-birds interaction.

struct TrapConfig {
  Mat gamma;                                   // constant Gamma
  std::function<VectorXd(double)> beta;        // attraction centre beta_t
  double sigma2 = 0.25;                        // D = sigma2 * I
};

// beta_t = a (sin(pi w t), cos(pi w t)), with t appended in 3D.
inline std::function<VectorXd(double)> harmonic_trap(int d, double a, double omega) {
  if (d != 2 && d != 3) throw ArgumentError("harmonic trap: dimension must be 2 or 3");
  return [d, a, omega](double t) {
    VectorXd b(d);
    b(0) = a * std::sin(M_PI * omega * t);
    b(1) = a * std::cos(M_PI * omega * t);
    if (d == 3) b(2) = t;
    return b;
  };
}

// beta_t = a (cos(2 pi w t), 0.5 sin(2 pi w t)).
inline std::function<VectorXd(double)> infinity_trap(double a, double omega) {
  return [a, omega](double t) {
    return VectorXd(Eigen::Vector2d(a * std::cos(2 * M_PI * omega * t), 0.5 * a * std::sin(2 * M_PI * omega * t)));
  };
}

// f = Gamma (beta_t - x) - D grad log p_t.
class TdouRhs : public FokkerPlanckRhs {
 public:
  TdouRhs(TrapConfig cfg, double total_time, std::shared_ptr<const InitialMeasure> initial,
          std::string name = "tdou")
      : FokkerPlanckRhs(std::move(name), static_cast<int>(cfg.gamma.rows()), total_time, std::move(initial)),
        cfg_(std::move(cfg)) {}

  const TrapConfig& config() const { return cfg_; }

  Mat drift(const FlowContext&, const TimeGrid& g, const Mat& x) const override {
    check(g, x);
    return attraction(g, x);
  }
  Mat diffusion(double) const override { return cfg_.sigma2 * Mat::Identity(dim_, dim_); }

  reference::LinearSde moment_sde() const {
    return {[g = cfg_.gamma](double) { return g; }, cfg_.beta,
            [d = dim_, s = cfg_.sigma2](double) { return Mat(s * Mat::Identity(d, d)); }};
  }

 protected:
  Mat attraction(const TimeGrid& g, const Mat& x) const {
    Mat b(x.rows(), x.cols());
    std::vector<VectorXd> centres;
    for (Index u = 0; u < g.unique.size(); ++u) centres.push_back(cfg_.beta(g.unique(u)));
    for (Index r = 0; r < x.rows(); ++r)
      b.row(r) = (cfg_.gamma * (centres[static_cast<std::size_t>(g.row_of[static_cast<std::size_t>(r)])] -
                                x.row(r).transpose()))
                     .transpose();
    return b;
  }

  TrapConfig cfg_;
};

// f = Gamma (beta_t - x) + alpha_t (x - E[mu_t]) - D grad log p_t,
// alpha_t = amplitude * sin(pi w t).
class BirdsRhs : public TdouRhs {
 public:
  BirdsRhs(TrapConfig cfg, double alpha_amplitude, double alpha_omega, double total_time,
           std::shared_ptr<const InitialMeasure> initial)
      : TdouRhs(std::move(cfg), total_time, std::move(initial), "birds"),
        amplitude_(alpha_amplitude),
        omega_(alpha_omega) {}

  double alpha(double t) const { return amplitude_ * std::sin(M_PI * omega_ * t); }
  Needs drift_needs() const override { return {.mean = true}; }

  Mat drift(const FlowContext& ctx, const TimeGrid& g, const Mat& x) const override {
    check(g, x);
    Mat b = attraction(g, x);
    const Mat means = ctx.means(g);
    for (Index r = 0; r < x.rows(); ++r) {
      const Index u = g.row_of[static_cast<std::size_t>(r)];
      b.row(r) += alpha(g.unique(u)) * (x.row(r) - means.row(u));
    }
    return b;
  }

 private:
  double amplitude_, omega_;
};

// ---------------------------------------------------------------------------
// Flow around segment obstacles.

inline Eigen::Vector2d segment_projection(const Eigen::Vector2d& p, const Eigen::Vector2d& a, const Eigen::Vector2d& b) {
  const Eigen::Vector2d ab = b - a;
  const double len2 = ab.squaredNorm();
  if (len2 == 0.0) throw ArgumentError("segment_projection: segment endpoints coincide");
  const double s = std::clamp((p - a).dot(ab) / len2, 0.0, 1.0);
  return a + s * ab;
}

struct Segment {
  Eigen::Vector2d a, b;
};

struct ObstacleConfig {
  std::vector<Segment> segments;
  Eigen::Vector2d sink{4.0, 0.0};
  double repulsion = 20.0;
  double kernel_variance = 0.04;
};

// f = (q - x) + c sum_i unit(x - pi_i(x)) phi(|x - pi_i(x)|) - grad log p_t,
// phi the N(0, kernel_variance) density.
class ObstacleRhs : public FokkerPlanckRhs {
 public:
  ObstacleRhs(ObstacleConfig cfg, double total_time, std::shared_ptr<const InitialMeasure> initial)
      : FokkerPlanckRhs("obstacles", 2, total_time, std::move(initial)), cfg_(std::move(cfg)) {
    for (const auto& s : cfg_.segments)
      if (s.a == s.b) throw ArgumentError("obstacles: segment endpoints coincide");
  }

  const ObstacleConfig& config() const { return cfg_; }

  Eigen::Vector2d drift_at(const Eigen::Vector2d& x) const {
    Eigen::Vector2d b = cfg_.sink - x;
    const double norm = 1.0 / std::sqrt(2 * M_PI * cfg_.kernel_variance);
    for (const auto& s : cfg_.segments) {
      const Eigen::Vector2d diff = x - segment_projection(x, s.a, s.b);
      const double dist = diff.norm();
      if (dist == 0.0) continue;  // on the obstacle: direction undefined
      b += cfg_.repulsion * norm * std::exp(-0.5 * dist * dist / cfg_.kernel_variance) * diff / dist;
    }
    return b;
  }

  Mat drift(const FlowContext&, const TimeGrid& g, const Mat& x) const override {
    check(g, x);
    Mat b(x.rows(), 2);
    for (Index r = 0; r < x.rows(); ++r) b.row(r) = drift_at(x.row(r).transpose()).transpose();
    return b;
  }
  Mat diffusion(double) const override { return Mat::Identity(2, 2); }

 private:
  ObstacleConfig cfg_;
};

inline ObstacleConfig default_obstacles() {
  ObstacleConfig c;
  c.segments = {{{0, 3}, {3, 0.5}}, {{1, 0}, {1.5, 0}}, {{-2, -4}, {6, 0}}};
  return c;
}

}  // namespace scvm::pde
