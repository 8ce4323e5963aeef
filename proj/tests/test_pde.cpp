#include <gtest/gtest.h>

#include <cmath>

#include "scvm/node.hpp"
#include "scvm/pde.hpp"
#include "scvm/tipf.hpp"
#include "affine_flow.hpp"
#include "test_util.hpp"

namespace {

using namespace scvm;
using namespace scvm::pde;
using flow::TimeGrid;
using scvm::testing::fd_gradient;
using scvm::testing::rel_error;
using scvm::testing::AffineGaussianFlow;

std::shared_ptr<const flow::FlowModel> static_gaussian(const VectorXd& mean, double sd) {
  const auto d = mean.size();
  return std::make_shared<AffineGaussianFlow>([mean](double) { return mean; },
                                              [d, sd](double) { return VectorXd(VectorXd::Constant(d, sd)); },
                                              [d](double) { return VectorXd(VectorXd::Zero(d)); },
                                              [d](double) { return VectorXd(VectorXd::Zero(d)); });
}

FlowContext ctx_of(std::shared_ptr<const flow::FlowModel> m) { return FlowContext(std::move(m), Stream(1)); }

TEST(Mog, Score) {
  const MogTarget one{Mat(Eigen::RowVector2d(1, 2))};
  const Mat x = Eigen::RowVector2d(0.5, -1);
  EXPECT_LT((mog_score(one, x) - (Eigen::RowVector2d(1, 2) - Eigen::RowVector2d(0.5, -1))).norm(), 1e-14);
  Mat two(2, 2);
  two << 1.5, -2, -1.5, 2;
  EXPECT_LT(mog_score({two}, Mat::Zero(1, 2)).norm(), 1e-14);
  Stream rng(2);
  const MogTarget ten = random_mog(2, 10, 5.0, rng);
  for (int i = 0; i < 20; ++i) {
    const VectorXd p = 3 * rng.normal_matrix(2, 1);
    const VectorXd fd = fd_gradient([&](const VectorXd& y) { return mog_log_density(ten, y.transpose())(0); }, p, 1e-6);
    EXPECT_LT(rel_error(mog_score(ten, p.transpose()).row(0).transpose(), fd), 1e-5);
  }
  // Normalization in 1D.
  const MogTarget m1 = random_mog(1, 3, 2.0, rng);
  double mass = 0;
  for (int i = 0; i < 40000; ++i) mass += std::exp(mog_log_density(m1, Mat::Constant(1, 1, -20 + (i + 0.5) * 1e-3))(0)) * 1e-3;
  EXPECT_NEAR(mass, 1.0, 1e-8);
}

TEST(KlWgf, StationaryAtTarget) {
  KlWgfRhs rhs(gaussian_target(VectorXd::Zero(2), Mat::Identity(2, 2)), 1.0,
               std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 1.0)));
  const FlowContext ctx = ctx_of(static_gaussian(VectorXd::Zero(2), 1.0));
  Stream rng(3);
  const Mat x = rng.normal_matrix(50, 2);
  EXPECT_LT(kl_wgf_rhs(rhs, ctx, TimeGrid::constant(0.3, 50), x).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(KlWgf, TwoAnalyticScores) {
  KlWgfRhs rhs(gaussian_target(VectorXd::Zero(2), Mat::Identity(2, 2)), 1.0,
               std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 4.0)));
  const FlowContext ctx = ctx_of(static_gaussian(VectorXd::Zero(2), 2.0));
  Stream rng(4);
  const Mat x = rng.normal_matrix(20, 2);
  EXPECT_LT((rhs.evaluate(ctx, TimeGrid::constant(0.5, 20), x) + 0.75 * x).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(Pme, UniformRegionGivesZero) {
  auto uniform = std::make_shared<CustomMeasure>(
      1, "uniform",
      [](Index n, Stream& rng) { return rng.uniform_matrix(n, 1, -1, 1); },
      [](const Mat& x) { return VectorXd(VectorXd::Constant(x.rows(), std::log(0.5))); },
      [](const Mat& x) { return Mat(Mat::Zero(x.rows(), x.cols())); });
  auto model = std::make_shared<flow::TipfModel>(1, uniform, flow::TipfSpec{.hidden_sizes = {4}, .time_embed_dim = 2, .time_hidden = 4});
  Stream rng(5);
  model->initialize(rng);
  PmeRhs rhs(2, 1.0, 1.0, uniform);
  const FlowContext ctx(model, Stream(1));
  EXPECT_EQ(rhs.evaluate(ctx, TimeGrid::constant(0.1, 3), Mat(Eigen::Vector3d(-0.5, 0, 0.7))).cwiseAbs().maxCoeff(), 0.0);
  EXPECT_TRUE(rhs.needs().score && rhs.needs().density);
  EXPECT_FALSE(rhs.has_decomposition());
}

TEST(Pme, GaussianPotentialFiniteDifferences) {
  auto base = std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(1, 1.0));
  PmeRhs rhs(2, 1.0, 1.0, base);
  const FlowContext ctx = ctx_of(static_gaussian(VectorXd::Zero(1), 1.0));
  auto p = [](double x) { return std::exp(-0.5 * x * x) / std::sqrt(2 * M_PI); };
  for (double x : {-1.3, 0.4, 2.1}) {
    const double f = rhs.evaluate(ctx, TimeGrid::constant(0, 1), Mat::Constant(1, 1, x))(0, 0);
    const double h = 1e-5;
    const double fd = -(2 * p(x + h) - 2 * p(x - h)) / (2 * h);
    EXPECT_LT(rel_error(f, fd), 1e-4);
    EXPECT_LT(rel_error(f, 2 * x * p(x)), 1e-12);
  }
}

// The exact Barenblatt flow, X_t = X_0 * scale(t), as a flow model.
class BarenblattFlow : public AffineGaussianFlow {
 public:
  explicit BarenblattFlow(reference::BarenblattProfile p)
      : AffineGaussianFlow([](double) { return VectorXd(VectorXd::Zero(1)); },
                           [](double) { return VectorXd(VectorXd::Ones(1)); },
                           [](double) { return VectorXd(VectorXd::Zero(1)); },
                           [](double) { return VectorXd(VectorXd::Zero(1)); }),
        p_(p) {
    base_ = std::make_shared<BarenblattMeasure>(p);
  }
  VectorXd log_density(const TimeGrid& g, const Mat& x) const override {
    VectorXd out(x.rows());
    for (Index r = 0; r < x.rows(); ++r) out(r) = std::log(p_.probability_density(g.time_of_row(r), x.row(r).transpose()));
    return out;
  }
  Mat score(const TimeGrid& g, const Mat& x) const override {
    Mat s(x.rows(), 1);
    for (Index r = 0; r < x.rows(); ++r) {
      const double t = g.time_of_row(r), tau = t + p_.t0;
      const double k = std::pow(tau, -2 * p_.alpha / p_.d) * p_.beta;
      s(r, 0) = -2 * k * x(r, 0) / (p_.c - k * x(r, 0) * x(r, 0)) / (p_.m - 1);
    }
    return s;
  }

 private:
  reference::BarenblattProfile p_;
};

TEST(Pme, BarenblattTransportField) {
  const auto prof = reference::BarenblattProfile::with_initial_radius(2, 1, 1e-3, 0.25);
  auto model = std::make_shared<BarenblattFlow>(prof);
  PmeRhs rhs(2, prof.mass(), 0.025, model->base_ptr());
  const FlowContext ctx(model, Stream(1));
  for (double t : {0.0, 0.004, 0.025}) {
    for (double frac : {-0.7, 0.2, 0.9}) {
      const double x0 = frac * prof.support_radius(0);
      const double xt = x0 * prof.flow_scale(t);
      const double h = 1e-7;
      const double v = x0 * (prof.flow_scale(t + h) - prof.flow_scale(t - h)) / (2 * h);
      const double f = rhs.evaluate(ctx, TimeGrid::constant(t, 1), Mat::Constant(1, 1, xt))(0, 0);
      EXPECT_LT(rel_error(f, v), 1e-6) << t << " " << frac;
    }
  }
}

TrapConfig trap2d(double sigma2 = 0.25) {
  return {Mat(Eigen::Vector2d(1, 3).asDiagonal()), harmonic_trap(2, 3.0, 1.0), sigma2};
}

TEST(Tdou, ZeroAtTrapCentre) {
  const TrapConfig cfg = trap2d();
  const VectorXd b0 = cfg.beta(0);
  TdouRhs rhs(cfg, 10, std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 0.25, b0)));
  const FlowContext ctx = ctx_of(static_gaussian(b0, 0.5));
  EXPECT_LT(rhs.evaluate(ctx, TimeGrid::constant(0, 1), b0.transpose()).norm(), 1e-14);
}

TEST(Tdou, MatchesGaussianPathVelocity) {
  const VectorXd beta = Eigen::Vector2d(1.0, -2.0);
  const VectorXd m0 = Eigen::Vector2d(0.3, 0.5);
  const VectorXd s0 = Eigen::Vector2d(2.0, 0.5);  // variances
  // Gamma = I, D = I: m_t = beta + e^{-t}(m0 - beta), S_t = 1 + e^{-2t}(S0 - 1).
  auto mean = [=](double t) { return VectorXd(beta + std::exp(-t) * (m0 - beta)); };
  auto dmean = [=](double t) { return VectorXd(-std::exp(-t) * (m0 - beta)); };
  auto var = [=](double t) { return VectorXd((1 + std::exp(-2 * t) * (s0.array() - 1)).matrix()); };
  auto sd = [=](double t) { return VectorXd(var(t).array().sqrt().matrix()); };
  auto dsd = [=](double t) {
    return VectorXd((-std::exp(-2 * t) * (s0.array() - 1) / sd(t).array()).matrix());
  };
  auto model = std::make_shared<AffineGaussianFlow>(mean, sd, dmean, dsd);
  TdouRhs rhs({Mat::Identity(2, 2), [=](double) { return beta; }, 1.0}, 2, model->base_ptr());
  const FlowContext ctx(model, Stream(1));
  Stream rng(6);
  for (double t : {0.0, 0.5, 1.7}) {
    const Mat x = rng.normal_matrix(10, 2);
    const TimeGrid g = TimeGrid::constant(t, 10);
    EXPECT_LT((rhs.evaluate(ctx, g, x) - model->velocity(g, x)).cwiseAbs().maxCoeff(), 1e-6);
  }
  // The moment ODE from the rhs configuration agrees with the closed forms.
  const auto g = reference::tdou_moments(1.7, rhs.moment_sde(), m0, Mat(s0.asDiagonal()));
  EXPECT_LT((g.mean - mean(1.7)).norm(), 1e-8);
  EXPECT_LT((g.cov.diagonal() - var(1.7)).norm(), 1e-8);
}

TEST(Decomposition, DirectEqualsDriftMinusDiffusedScore) {
  Stream rng(7);
  const auto ctx_model = std::make_shared<flow::TipfModel>(
      2, std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 1.0)),
      flow::TipfSpec{.hidden_sizes = {6}, .time_embed_dim = 4, .time_hidden = 4});
  ctx_model->initialize(rng);
  for (double& v : ctx_model->params().values()) v += 0.2 * rng.normal();
  const FlowContext ctx(ctx_model, Stream(9), 256);
  auto base = ctx_model->base_ptr();
  std::vector<std::unique_ptr<PdeRhs>> problems;
  problems.push_back(std::make_unique<KlWgfRhs>(mog_target(random_mog(2, 10, 5, rng)), 5.0, base));
  problems.push_back(std::make_unique<TdouRhs>(trap2d(), 10.0, base));
  problems.push_back(std::make_unique<BirdsRhs>(TrapConfig{Mat::Identity(2, 2), infinity_trap(3, 0.5), 0.25}, 2.0, 0.5, 10.0, base));
  problems.push_back(std::make_unique<ObstacleRhs>(default_obstacles(), 5.0, base));
  const Index n = 1000;
  TimeGrid g;
  g.unique = rng.uniform_matrix(20, 1, 0, 5);
  for (Index r = 0; r < n; ++r) g.row_of.push_back(r % 20);
  const Mat x = 2 * rng.normal_matrix(n, 2);
  for (const auto& p : problems) {
    ASSERT_TRUE(p->has_decomposition()) << p->name();
    const Mat f = p->evaluate(ctx, g, x);
    const Mat s = ctx.score(g, x);
    const Mat b = p->drift(ctx, g, x);
    Mat expect(n, 2);
    for (Index r = 0; r < n; ++r) expect.row(r) = b.row(r) - s.row(r) * p->diffusion(g.time_of_row(r)).transpose();
    EXPECT_LT((f - expect).cwiseAbs().maxCoeff(), 1e-10) << p->name();
    // Pure: repeated calls agree bitwise.
    EXPECT_EQ(f, p->evaluate(ctx, g, x)) << p->name();
  }
}

TEST(Birds, ReducesToTdouWhenAlphaVanishes) {
  const TrapConfig cfg{Mat::Identity(2, 2), infinity_trap(3, 0.5), 0.25};
  auto base = std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 0.25));
  BirdsRhs birds(cfg, 2.0, 0.5, 10, base);
  TdouRhs tdou(cfg, 10, base);
  EXPECT_EQ(birds.alpha(0), 0.0);
  const FlowContext ctx = ctx_of(static_gaussian(VectorXd::Zero(2), 0.5));
  Stream rng(8);
  const Mat x = rng.normal_matrix(10, 2);
  const TimeGrid g = TimeGrid::constant(0, 10);
  EXPECT_LT((birds.evaluate(ctx, g, x) - tdou.evaluate(ctx, g, x)).cwiseAbs().maxCoeff(), 1e-14);
  EXPECT_TRUE(birds.needs().mean);
}

TEST(Birds, InteractionVanishesAtMean) {
  const TrapConfig cfg{Mat::Identity(2, 2), infinity_trap(3, 0.5), 0.25};
  auto base = std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 0.25));
  BirdsRhs birds(cfg, 2.0, 0.5, 10, base);
  TdouRhs tdou(cfg, 10, base);
  const FlowContext ctx = ctx_of(static_gaussian(VectorXd::Zero(2), 0.5));
  const double t = 0.5;  // alpha = 2 sin(pi/4) != 0
  const TimeGrid g = TimeGrid::constant(t, 1);
  const Mat x = ctx.means(g);
  EXPECT_LT((birds.drift(ctx, g, x) - tdou.drift(ctx, g, x)).norm(), 1e-14);
}

TEST(Birds, MonteCarloMeanWithinErrorBars) {
  const VectorXd mu = Eigen::Vector2d(1.0, -0.5);
  const FlowContext ctx(static_gaussian(mu, 0.7), Stream(10), 10000);
  const Mat m = ctx.means(TimeGrid::constant(0.3, 1));
  const double se = 0.7 / std::sqrt(10000.0);
  for (int i = 0; i < 2; ++i) EXPECT_LT(std::abs(m(0, i) - mu(i)), 3 * se);
}

TEST(Obstacles, DriftExamples) {
  auto base = std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 0.25));
  ObstacleRhs rhs(default_obstacles(), 5.0, base);
  const Eigen::Vector2d far(-6, 6);
  EXPECT_LT((rhs.drift_at(far) - (Eigen::Vector2d(4, 0) - far)).norm(), 1e-12);
  EXPECT_LT(rhs.drift_at(Eigen::Vector2d(4, 0)).norm(), 1e-2);

  ObstacleConfig one;
  one.segments = {{{0, 0}, {1, 0}}};
  one.sink = Eigen::Vector2d(0.5, 0.2);
  ObstacleRhs single(one, 5.0, base);
  const double phi = std::exp(-0.5 * 0.04 / 0.04) / std::sqrt(2 * M_PI * 0.04);
  const Eigen::Vector2d b = single.drift_at(Eigen::Vector2d(0.5, 0.2));
  EXPECT_NEAR(b(0), 0.0, 1e-14);
  EXPECT_NEAR(b(1), 20 * phi, 1e-12);
  // On the segment: no repulsion from it.
  one.sink = Eigen::Vector2d(0.5, 0.0);
  EXPECT_EQ(ObstacleRhs(one, 5.0, base).drift_at(Eigen::Vector2d(0.5, 0.0)), Eigen::Vector2d::Zero());
}

TEST(SegmentProjection, Examples) {
  const Eigen::Vector2d a(0, 0), b(2, 1);
  EXPECT_EQ(segment_projection(Eigen::Vector2d(-2, -1), a, b), a);
  EXPECT_EQ(segment_projection(Eigen::Vector2d(1, 0.5), a, b), Eigen::Vector2d(1, 0.5));
  EXPECT_THROW(segment_projection(Eigen::Vector2d(1, 1), a, a), ArgumentError);
  Stream rng(11);
  for (int trial = 0; trial < 5; ++trial) {
    const Eigen::Vector2d p = 3 * Eigen::Vector2d(rng.normal(), rng.normal());
    const Eigen::Vector2d q = segment_projection(p, a, b);
    double best = 1e300;
    Eigen::Vector2d arg;
    for (int i = 0; i < 100000; ++i) {
      const Eigen::Vector2d c = a + rng.uniform() * (b - a);
      if ((c - p).norm() < best) {
        best = (c - p).norm();
        arg = c;
      }
    }
    EXPECT_LT((arg - q).norm(), 1e-4);
  }
}

TEST(Capability, NodeContextHasNoScore) {
  flow::NodeSpec s;
  s.hidden_sizes = {4};
  s.time_embed_dim = 2;
  s.time_hidden = 4;
  s.skip_rank = 0;
  auto base = std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(2, 1.0));
  auto model = std::make_shared<flow::NodeModel>(2, base, s);
  Stream rng(1);
  model->initialize(rng);
  TdouRhs rhs(trap2d(), 10, base);
  const FlowContext ctx(model, Stream(2));
  EXPECT_THROW(rhs.evaluate(ctx, TimeGrid::constant(0.5, 1), Mat::Zero(1, 2)), CapabilityError);
  EXPECT_NO_THROW(rhs.drift(ctx, TimeGrid::constant(0.5, 1), Mat::Zero(1, 2)));
}

}  // namespace
