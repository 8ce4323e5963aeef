#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "scvm/reference.hpp"

namespace {

using namespace scvm;
using namespace scvm::reference;

MatrixXd random_spd(Stream& rng, int d) {
  const MatrixXd a = rng.normal_matrix(d, d);
  return a * a.transpose() + 0.5 * MatrixXd::Identity(d, d);
}

TEST(SpdMatrixFn, Examples) {
  EXPECT_TRUE(spd_matrix_fn(MatrixXd::Zero(3, 3), MatrixFn::Exp).isApprox(MatrixXd::Identity(3, 3)));
  const MatrixXd r = spd_matrix_fn(Eigen::Vector2d(4, 9).asDiagonal(), MatrixFn::Sqrt);
  EXPECT_NEAR((r - MatrixXd(Eigen::Vector2d(2, 3).asDiagonal())).norm(), 0, 1e-14);
  Stream rng(1);
  for (int i = 0; i < 20; ++i) {
    const MatrixXd a = random_spd(rng, 4);
    const MatrixXd s = spd_matrix_fn(a, MatrixFn::Sqrt);
    EXPECT_LT((s * s - a).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((spd_matrix_fn(a, MatrixFn::Inverse) * a - MatrixXd::Identity(4, 4)).cwiseAbs().maxCoeff(), 1e-10);
    EXPECT_LT((spd_matrix_fn(spd_matrix_fn(a, MatrixFn::Log), MatrixFn::Exp) - a).cwiseAbs().maxCoeff(), 1e-9);
    EXPECT_EQ(s, s.transpose());
  }
}

TEST(SpdMatrixFn, Errors) {
  MatrixXd a(2, 2);
  a << 1, 0.5, 0.4, 1;
  EXPECT_THROW(spd_matrix_fn(a, MatrixFn::Sqrt), ArgumentError);
  EXPECT_THROW(spd_matrix_fn(-MatrixXd::Identity(2, 2), MatrixFn::Log), ArgumentError);
  EXPECT_THROW(spd_matrix_fn(MatrixXd::Identity(2, 3), MatrixFn::Exp), ShapeError);
}

TEST(OuSolution, Limits) {
  Stream rng(2);
  const MatrixXd g = random_spd(rng, 3);
  const VectorXd b = rng.normal_matrix(3, 1);
  const Gaussian g0 = ou_solution(0, b, g);
  EXPECT_LT(g0.mean.norm(), 1e-15);
  EXPECT_LT((g0.cov - MatrixXd::Identity(3, 3)).norm(), 1e-12);
  const double lmin = Eigen::SelfAdjointEigenSolver<MatrixXd>(g).eigenvalues().minCoeff();
  const Gaussian ginf = ou_solution(50 / lmin, b, g);
  EXPECT_LT((ginf.mean - b).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_LT((ginf.cov - g.inverse()).cwiseAbs().maxCoeff(), 1e-8);
  EXPECT_THROW(ou_solution(1, b, -g), ArgumentError);
  EXPECT_THROW(ou_solution(-1, b, g), ArgumentError);
}

TEST(OuSolution, CovarianceStaysPositiveDefinite) {
  Stream rng(3);
  const MatrixXd g = random_spd(rng, 4);
  for (double t = 0; t <= 10; t += 0.05) {
    const Gaussian s = ou_solution(t, VectorXd::Ones(4), g);
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<MatrixXd>(s.cov).eigenvalues().minCoeff(), 0) << t;
  }
}

TEST(TdouMoments, MatchesClosedFormOu) {
  Stream rng(4);
  const MatrixXd g = (rng.uniform_matrix(3, 1, 0.5, 3.0)).asDiagonal();
  const VectorXd b = rng.normal_matrix(3, 1);
  const LinearSde sde{[&](double) { return g; }, [&](double) { return b; },
                      [](double) { return MatrixXd(MatrixXd::Identity(3, 3)); }};
  const std::vector<double> ts{0.0, 0.3, 1.0, 2.0};
  const auto path = tdou_moment_path(ts, sde, VectorXd::Zero(3), MatrixXd::Identity(3, 3));
  for (std::size_t i = 0; i < ts.size(); ++i) {
    const Gaussian ou = ou_solution(ts[i], b, g);
    EXPECT_LT((path[i].mean - ou.mean).cwiseAbs().maxCoeff(), 1e-6);
    EXPECT_LT((path[i].cov - ou.cov).cwiseAbs().maxCoeff(), 1e-6);
  }
  // A full (non-diagonal) Gamma as well.
  const MatrixXd gf = random_spd(rng, 2);
  const LinearSde sf{[&](double) { return gf; }, [](double) { return VectorXd(Eigen::Vector2d(1, -1)); },
                     [](double) { return MatrixXd(MatrixXd::Identity(2, 2)); }};
  const Gaussian a = tdou_moments(1.5, sf, VectorXd::Zero(2), MatrixXd::Identity(2, 2));
  const Gaussian e = ou_solution(1.5, Eigen::Vector2d(1, -1), gf);
  EXPECT_LT((a.cov - e.cov).cwiseAbs().maxCoeff(), 1e-6);
  EXPECT_LT((a.mean - e.mean).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(TdouMoments, StationaryCovarianceAndSymmetry) {
  const double s2 = 0.25;
  const LinearSde sde{[](double) { return MatrixXd(MatrixXd::Identity(2, 2)); },
                      [](double t) { return VectorXd(Eigen::Vector2d(3 * std::sin(M_PI * t), 3 * std::cos(M_PI * t))); },
                      [&](double) { return MatrixXd(s2 * MatrixXd::Identity(2, 2)); }};
  const Gaussian g0 = tdou_moments(0, sde, Eigen::Vector2d(0, 3), s2 * MatrixXd::Identity(2, 2));
  EXPECT_EQ(g0.mean, Eigen::Vector2d(0, 3));
  std::vector<double> ts;
  for (int i = 0; i <= 20; ++i) ts.push_back(0.5 * i);
  const auto path = tdou_moment_path(ts, sde, Eigen::Vector2d(0, 3), s2 * MatrixXd::Identity(2, 2));
  for (const auto& g : path) EXPECT_LT((g.cov - s2 * MatrixXd::Identity(2, 2)).norm(), 1e-9);

  // Anisotropic Gamma: covariance stays symmetric and positive definite.
  const LinearSde aniso{[](double t) { return MatrixXd(Eigen::Vector2d(1 + 0.5 * std::sin(t), 3).asDiagonal()); },
                        sde.beta, sde.diffusion};
  const auto p2 = tdou_moment_path(ts, aniso, Eigen::Vector2d(0, 3), MatrixXd::Identity(2, 2));
  for (const auto& g : p2) {
    EXPECT_LT((g.cov - g.cov.transpose()).norm(), 1e-10);
    EXPECT_GT(Eigen::SelfAdjointEigenSolver<MatrixXd>(g.cov).eigenvalues().minCoeff(), 0);
  }
}

// d_t p - d_xx p^2 at interior points, by central differences.
double pme_residual(const BarenblattProfile& p, double t, double x) {
  const double h = 1e-4;
  auto pd = [&](double tt, double xx) { return p.density(tt, VectorXd::Constant(1, xx)); };
  const double dt = (pd(t + h, x) - pd(t - h, x)) / (2 * h);
  auto p2 = [&](double xx) { return std::pow(pd(t, xx), 2); };
  const double dxx = (p2(x + h) - 2 * p2(x) + p2(x - h)) / (h * h);
  return std::abs(dt - dxx);
}

TEST(Barenblatt, ResidualOracleSelectsExactlyOneAlpha) {
  double worst[2] = {0, 0};
  int idx = 0;
  for (AlphaRule rule : {AlphaRule::Classical, AlphaRule::Printed}) {
    const auto prof = BarenblattProfile::with_initial_radius(2, 1, 1e-3, 0.25, rule);
    for (double t : {0.5, 1.0, 2.0}) {
      const double r = prof.support_radius(t);
      for (double frac : {-0.8, -0.3, 0.1, 0.5, 0.7}) worst[idx] = std::max(worst[idx], pme_residual(prof, t, frac * r));
    }
    ++idx;
  }
  EXPECT_LT(worst[0], 1e-6) << "classical alpha";
  EXPECT_GT(worst[1], 1e-3) << "printed alpha";
}

TEST(Barenblatt, Examples) {
  const auto p = BarenblattProfile::with_initial_radius(2, 2, 1e-3, 0.25);
  const double t = 0.01;
  EXPECT_DOUBLE_EQ(barenblatt_density(p, t, VectorXd::Zero(2)), std::pow(t + p.t0, -p.alpha) * p.c);
  EXPECT_EQ(barenblatt_density(p, t, VectorXd::Constant(2, p.support_radius(t))), 0.0);
  EXPECT_NEAR(p.support_radius(0), 0.25, 1e-14);
  EXPECT_THROW(barenblatt_density(p, -1, VectorXd::Zero(2)), ArgumentError);
}

TEST(Barenblatt, MassConservedAndMatchesClosedForm) {
  const auto p1 = BarenblattProfile::with_initial_radius(2, 1, 1e-3, 0.25);
  for (double t : {0.0, 0.004, 0.01, 0.02, 0.025}) {
    const double r = p1.support_radius(t);
    const int n = 200000;
    double mass = 0;
    for (int i = 0; i < n; ++i) mass += p1.density(t, VectorXd::Constant(1, -r + (i + 0.5) * 2 * r / n));
    mass *= 2 * r / n;
    EXPECT_LT(std::abs(mass - p1.mass()), 1e-4) << t;
  }
  const auto p2 = BarenblattProfile::with_initial_radius(2, 2, 1e-3, 0.25);
  for (double t : {0.0, 0.004, 0.01, 0.02, 0.025}) {
    const double r = p2.support_radius(t);
    const int n = 1000;
    const double hx = 2 * r / n;
    double mass = 0;
    for (int i = 0; i < n; ++i)
      for (int j = 0; j < n; ++j)
        mass += p2.density(t, Eigen::Vector2d(-r + (i + 0.5) * hx, -r + (j + 0.5) * hx));
    mass *= hx * hx;
    EXPECT_LT(std::abs(mass - p2.mass()) / p2.mass(), 1e-4) << t;
  }
}

// Batch-means standard error for a correlated chain.
double batch_se(const VectorXd& v, int batches) {
  const int len = static_cast<int>(v.size()) / batches;
  VectorXd means(batches);
  for (int b = 0; b < batches; ++b) means(b) = v.segment(b * len, len).mean();
  const double mu = means.mean();
  return std::sqrt((means.array() - mu).square().sum() / (batches - 1) / batches);
}

TEST(MhSampler, StandardNormalMoments) {
  Stream rng(10);
  const MatrixXd s = mh_sampler([](const VectorXd& x) { return -0.5 * x.squaredNorm(); }, VectorXd::Zero(1), 10000,
                                {.proposal_std = 1.0}, rng);
  const VectorXd x = s.col(0);
  const double mean = x.mean();
  EXPECT_LT(std::abs(mean), 3 * batch_se(x, 50));
  const double var = (x.array() - mean).square().mean();
  EXPECT_LT(std::abs(var - 1), 0.1);
  const VectorXd z = ((x.array() - mean) / std::sqrt(var)).cube().matrix();
  EXPECT_LT(std::abs(z.mean()), 3 * batch_se(z, 50));
}

TEST(MhSampler, UniformChiSquare) {
  Stream rng(11);
  auto logp = [](const VectorXd& x) {
    return (x(0) >= 0 && x(0) <= 1) ? 0.0 : -std::numeric_limits<double>::infinity();
  };
  const int n = 5000, bins = 20;
  const MatrixXd s = mh_sampler(logp, VectorXd::Constant(1, 0.5), n, {.proposal_std = 0.5, .burn_in = 1000, .thinning = 50}, rng);
  std::vector<int> counts(bins, 0);
  for (int i = 0; i < n; ++i) ++counts[std::min(bins - 1, static_cast<int>(s(i, 0) * bins))];
  const double expected = double(n) / bins;
  double chi2 = 0;
  for (int c : counts) chi2 += (c - expected) * (c - expected) / expected;
  EXPECT_LT(chi2, 36.19);  // 99% quantile, 19 degrees of freedom
}

TEST(MhSampler, Errors) {
  Stream rng(12);
  auto narrow = [](const VectorXd& x) { return -0.5 * x.squaredNorm() / 1e-8; };
  EXPECT_THROW(mh_sampler(narrow, VectorXd::Zero(1), 10, {.proposal_std = 10.0}, rng), TuningError);
  auto compact = [](const VectorXd& x) { return std::abs(x(0)) < 1 ? 0.0 : -std::numeric_limits<double>::infinity(); };
  EXPECT_THROW(mh_sampler(compact, VectorXd::Constant(1, 5), 10, {}, rng), ArgumentError);
}

TEST(MhSampler, Deterministic) {
  auto logp = [](const VectorXd& x) { return -0.5 * x.squaredNorm(); };
  Stream a(5), b(5);
  EXPECT_EQ(mh_sampler(logp, VectorXd::Zero(2), 100, {}, a), mh_sampler(logp, VectorXd::Zero(2), 100, {}, b));
}

}  // namespace
