#pragma once

#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

#include <Eigen/Dense>

#include "scvm/error.hpp"
#include "scvm/reference.hpp"
#include "scvm/rng.hpp"

namespace scvm {

using Mat = Eigen::MatrixXd;
using Eigen::VectorXd;

// Initial measure mu_0. All batched calls take and return one point per row.
class InitialMeasure {
 public:
  virtual ~InitialMeasure() = default;
  virtual std::string kind() const = 0;
  virtual std::string describe() const = 0;
  virtual int dim() const = 0;
  virtual Mat sample(Eigen::Index n, Stream& rng) const = 0;
  // -infinity where the density vanishes.
  virtual VectorXd log_density(const Mat& x) const = 0;
  virtual Mat score(const Mat& x) const = 0;
  virtual std::shared_ptr<const InitialMeasure> clone() const = 0;
};

class GaussianMeasure : public InitialMeasure {
 public:
  GaussianMeasure(VectorXd mean, Mat cov) : mean_(std::move(mean)), cov_(std::move(cov)) {
    if (cov_.rows() != mean_.size() || cov_.cols() != mean_.size()) throw ShapeError("gaussian: covariance shape mismatch");
    Eigen::LLT<Mat> llt(cov_);
    if (llt.info() != Eigen::Success) throw ArgumentError("gaussian: covariance must be positive definite");
    chol_ = llt.matrixL();
    precision_ = llt.solve(Mat::Identity(mean_.size(), mean_.size()));
    log_norm_ = -0.5 * mean_.size() * std::log(2 * M_PI) - chol_.diagonal().array().log().sum();
  }

  static GaussianMeasure isotropic(int d, double variance, VectorXd mean = {}) {
    if (mean.size() == 0) mean = VectorXd::Zero(d);
    return {std::move(mean), variance * Mat::Identity(d, d)};
  }

  std::string kind() const override { return "gaussian"; }
  std::string describe() const override {
    std::ostringstream os;
    os.precision(17);
    os << "gaussian(mean=[" << mean_.transpose() << "], cov_diag=[" << cov_.diagonal().transpose() << "])";
    return os.str();
  }
  int dim() const override { return static_cast<int>(mean_.size()); }
  const VectorXd& mean() const { return mean_; }
  const Mat& cov() const { return cov_; }

  Mat sample(Eigen::Index n, Stream& rng) const override {
    return (rng.normal_matrix(n, dim()) * chol_.transpose()).rowwise() + mean_.transpose();
  }
  VectorXd log_density(const Mat& x) const override {
    const Mat c = x.rowwise() - mean_.transpose();
    return (log_norm_ - 0.5 * ((c * precision_).cwiseProduct(c)).rowwise().sum().array()).matrix();
  }
  Mat score(const Mat& x) const override { return -(x.rowwise() - mean_.transpose()) * precision_; }
  std::shared_ptr<const InitialMeasure> clone() const override { return std::make_shared<GaussianMeasure>(*this); }

 private:
  VectorXd mean_;
  Mat cov_, chol_, precision_;
  double log_norm_ = 0;
};

// Normalized Barenblatt profile at t = 0, sampled by Metropolis-Hastings.
// Each call runs a fresh chain from the origin.
class BarenblattMeasure : public InitialMeasure {
 public:
  // Without explicit options: burn-in 1000, thinning 10, proposal_std = 0.1 * initial support radius.
  explicit BarenblattMeasure(reference::BarenblattProfile profile, std::optional<reference::MhOptions> mh = std::nullopt)
      : profile_(profile), log_mass_(std::log(profile.mass())) {
    if (mh) {
      mh_ = *mh;
    } else {
      mh_.proposal_std = 0.1 * profile_.support_radius(0);
    }
  }

  std::string kind() const override { return "barenblatt"; }
  std::string describe() const override {
    std::ostringstream os;
    os.precision(17);
    os << "barenblatt(m=" << profile_.m << ", d=" << profile_.d << ", C=" << profile_.c << ", t0=" << profile_.t0
       << ", alpha=" << profile_.alpha << ")";
    return os.str();
  }
  int dim() const override { return profile_.d; }
  const reference::BarenblattProfile& profile() const { return profile_; }

  Mat sample(Eigen::Index n, Stream& rng) const override {
    auto logp = [this](const VectorXd& x) { return log_one(x); };
    return reference::mh_sampler(logp, VectorXd::Zero(dim()), static_cast<int>(n), mh_, rng);
  }
  VectorXd log_density(const Mat& x) const override {
    VectorXd out(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) out(i) = log_one(x.row(i).transpose());
    return out;
  }
  Mat score(const Mat& x) const override {
    const auto& p = profile_;
    const double k = 1.0 / (p.m - 1);
    const double s = p.beta * std::pow(p.t0, -2 * p.alpha / p.d);
    Mat out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      const double base = p.c - s * x.row(i).squaredNorm();
      out.row(i) = base > 0 ? (-2 * k * s / base * x.row(i)).eval()
                            : Eigen::RowVectorXd::Constant(x.cols(), std::numeric_limits<double>::quiet_NaN());
    }
    return out;
  }
  std::shared_ptr<const InitialMeasure> clone() const override { return std::make_shared<BarenblattMeasure>(*this); }

 private:
  double log_one(const VectorXd& x) const {
    const double p = profile_.density(0, x);
    return p > 0 ? std::log(p) - log_mass_ : -std::numeric_limits<double>::infinity();
  }

  reference::BarenblattProfile profile_;
  reference::MhOptions mh_;
  double log_mass_;
};

class CustomMeasure : public InitialMeasure {
 public:
  using Sampler = std::function<Mat(Eigen::Index, Stream&)>;
  using LogDensity = std::function<VectorXd(const Mat&)>;
  using Score = std::function<Mat(const Mat&)>;

  CustomMeasure(int dim, std::string name, Sampler sampler, LogDensity log_density, Score score)
      : dim_(dim), name_(std::move(name)), sampler_(std::move(sampler)), log_density_(std::move(log_density)),
        score_(std::move(score)) {}

  std::string kind() const override { return "custom"; }
  std::string describe() const override { return "custom(" + name_ + ")"; }
  int dim() const override { return dim_; }
  Mat sample(Eigen::Index n, Stream& rng) const override { return sampler_(n, rng); }
  VectorXd log_density(const Mat& x) const override { return log_density_(x); }
  Mat score(const Mat& x) const override {
    if (!score_) throw CapabilityError("custom measure '" + name_ + "' has no score");
    return score_(x);
  }
  std::shared_ptr<const InitialMeasure> clone() const override { return std::make_shared<CustomMeasure>(*this); }

 private:
  int dim_;
  std::string name_;
  Sampler sampler_;
  LogDensity log_density_;
  Score score_;
};

}  // namespace scvm
