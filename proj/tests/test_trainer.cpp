#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "scvm/node.hpp"
#include "scvm/tipf.hpp"
#include "scvm/trainer.hpp"
#include "test_util.hpp"

namespace {

using namespace scvm;
using namespace scvm::flow;
using namespace scvm::train;
using pde::FlowContext;

std::shared_ptr<const InitialMeasure> std_normal(int d) {
  return std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(d, 1.0));
}

TipfSpec small_tipf() { return {.hidden_sizes = {8, 8}, .time_embed_dim = 4, .time_hidden = 8}; }

TipfModel random_tipf(int d, std::uint64_t seed, double scale = 0.3) {
  TipfModel m(d, std_normal(d), small_tipf());
  Stream rng(seed);
  m.initialize(rng);
  Stream p(seed + 1);
  for (double& v : m.params().values()) v += scale * p.normal();
  return m;
}

// One-parameter flow Phi_t(x) = exp(theta t) x on N(0, 1), so mu_t = N(0, exp(2 theta t)).
class ScaleFlow : public FlowModel {
 public:
  explicit ScaleFlow(double theta) : FlowModel(1, std_normal(1)) {
    params_.add("theta", 1, 1);
    params_.values()[0] = theta;
  }
  double theta() const { return params_.values()[0]; }

  std::string kind() const override { return "scale"; }
  std::string describe() const override { return "scale"; }
  bool exact_density() const override { return true; }
  bool exact_inverse() const override { return true; }
  bool has_score() const override { return true; }
  std::unique_ptr<FlowModel> clone() const override { return std::make_unique<ScaleFlow>(*this); }
  void initialize(Stream&) override {}

  Mat flow_map(const TimeGrid& g, const Mat& x) const override {
    Mat y = x;
    for (Index r = 0; r < x.rows(); ++r) y(r, 0) *= std::exp(theta() * g.time_of_row(r));
    return y;
  }
  InverseResult inverse_map(const TimeGrid& g, const Mat& y) const override {
    InverseResult out{y, VectorXd(y.rows())};
    for (Index r = 0; r < y.rows(); ++r) {
      const double t = g.time_of_row(r);
      out.point(r, 0) *= std::exp(-theta() * t);
      out.log_det(r) = -theta() * t;
    }
    return out;
  }
  Mat velocity(const TimeGrid&, const Mat& x) const override { return theta() * x; }
  VectorXd log_density(const TimeGrid& g, const Mat& x) const override {
    const auto r = inverse_map(g, x);
    return base_->log_density(r.point) + r.log_det;
  }
  Mat score(const TimeGrid& g, const Mat& x) const override {
    Mat s(x.rows(), 1);
    for (Index r = 0; r < x.rows(); ++r) s(r, 0) = -x(r, 0) * std::exp(-2 * theta() * g.time_of_row(r));
    return s;
  }
  Var velocity_tape(Tape&, const BoundParams& p, const TimeGrid&, const Var& x) const override {
    return ad::matmul(x, p[0]);
  }
  Dual<Var> velocity_tape(Tape&, const BoundParams& p, const TimeGrid&, const Dual<Var>& x) const override {
    return ad::matmul(x, p[0]);
  }
};

// KL flow towards N(0, 1). Under ScaleFlow, f(x) = -x + x exp(-2 theta t).
std::shared_ptr<pde::KlWgfRhs> kl_to_standard(int d, double T = 1.0) {
  return std::make_shared<pde::KlWgfRhs>(pde::gaussian_target(VectorXd::Zero(d), Mat::Identity(d, d)), T, std_normal(d));
}

// b constant, D = 0, so f = b.
class ConstantDriftRhs : public pde::FokkerPlanckRhs {
 public:
  ConstantDriftRhs(VectorXd b) : FokkerPlanckRhs("const", static_cast<int>(b.size()), 1.0, std_normal(static_cast<int>(b.size()))), b_(std::move(b)) {}
  Mat drift(const FlowContext&, const TimeGrid&, const Mat& x) const override { return b_.transpose().replicate(x.rows(), 1); }
  Mat diffusion(double) const override { return Mat::Zero(dim_, dim_); }

 private:
  VectorXd b_;
};

// Phi_t(x) = x + c t, so v = c everywhere.
class ConstantFlow : public FlowModel {
 public:
  explicit ConstantFlow(const VectorXd& c) : FlowModel(static_cast<int>(c.size()), std_normal(static_cast<int>(c.size()))) {
    params_.add("c", 1, c.size());
    params_.assign(c);
  }
  Eigen::RowVectorXd c() const { return params_.view(0); }

  std::string kind() const override { return "constant"; }
  std::string describe() const override { return "constant"; }
  bool exact_density() const override { return true; }
  bool exact_inverse() const override { return true; }
  bool has_score() const override { return true; }
  std::unique_ptr<FlowModel> clone() const override { return std::make_unique<ConstantFlow>(*this); }
  void initialize(Stream&) override {}

  Mat flow_map(const TimeGrid& g, const Mat& x) const override {
    Mat y = x;
    for (Index r = 0; r < x.rows(); ++r) y.row(r) += g.time_of_row(r) * c();
    return y;
  }
  InverseResult inverse_map(const TimeGrid& g, const Mat& y) const override {
    InverseResult out{y, VectorXd::Zero(y.rows())};
    for (Index r = 0; r < y.rows(); ++r) out.point.row(r) -= g.time_of_row(r) * c();
    return out;
  }
  Mat velocity(const TimeGrid&, const Mat& x) const override { return c().replicate(x.rows(), 1); }
  VectorXd log_density(const TimeGrid& g, const Mat& x) const override { return base_->log_density(inverse_map(g, x).point); }
  Mat score(const TimeGrid& g, const Mat& x) const override { return base_->score(inverse_map(g, x).point); }
  Var velocity_tape(Tape&, const BoundParams& p, const TimeGrid&, const Var& x) const override {
    return ad::add_row(ad::scale(x, 0.0), p[0]);
  }
  Dual<Var> velocity_tape(Tape&, const BoundParams& p, const TimeGrid&, const Dual<Var>& x) const override {
    return ad::add_row(ad::scale(x, 0.0), p[0]);
  }
};

double simpson(const std::function<double(double)>& f, double a, double b, int n = 2000) {
  const double h = (b - a) / n;
  double s = f(a) + f(b);
  for (int i = 1; i < n; ++i) s += (i % 2 ? 4 : 2) * f(a + i * h);
  return s * h / 3;
}

// ---------------------------------------------------------------------------

TEST(Trainer, StratifiedTimesOnePerStratum) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Stream rng(seed);
    const auto t = stratified_times(7, 2.5, rng);
    ASSERT_EQ(t.size(), 7u);
    for (int l = 0; l < 7; ++l) {
      EXPECT_GE(t[l], l * 2.5 / 7);
      EXPECT_LE(t[l], (l + 1) * 2.5 / 7);
    }
  }
  Stream a(3), b(3);
  EXPECT_EQ(stratified_times(5, 1.0, a), stratified_times(5, 1.0, b));
  Stream c(1);
  EXPECT_THROW(stratified_times(0, 1.0, c), ArgumentError);
}

TEST(Trainer, CosineScheduleEndpoints) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 1e-3, 1e-5), 1e-3);
  EXPECT_DOUBLE_EQ(cosine_lr(100, 100, 1e-3, 1e-5), 1e-5);
  EXPECT_NEAR(cosine_lr(50, 100, 1e-3, 1e-5), (1e-3 + 1e-5) / 2, 1e-15);
  for (long k = 1; k <= 100; ++k) EXPECT_LE(cosine_lr(k, 100, 1e-3, 1e-5), cosine_lr(k - 1, 100, 1e-3, 1e-5));
}

TEST(Trainer, AdamFirstStepIsSignStep) {
  OptimizerState s;
  VectorXd g(3);
  g << 2.0, -0.5, 1e-3;
  const VectorXd d = adam_update(s, g, 0.1, 0.9, 0.9, 0.0);
  for (Index i = 0; i < 3; ++i) EXPECT_NEAR(d(i), -0.1 * (g(i) > 0 ? 1 : -1), 1e-12);
  EXPECT_EQ(s.step, 1);
  // Second step against a hand computation.
  VectorXd g2(3);
  g2 << 1.0, 1.0, 1.0;
  const VectorXd d2 = adam_update(s, g2, 0.1, 0.9, 0.9, 1e-8);
  for (Index i = 0; i < 3; ++i) {
    const double m = (0.9 * 0.1 * g(i) + 0.1 * g2(i)) / (1 - 0.81);
    const double v = (0.9 * 0.1 * g(i) * g(i) + 0.1 * g2(i) * g2(i)) / (1 - 0.81);
    EXPECT_NEAR(d2(i), -0.1 * m / (std::sqrt(v) + 1e-8), 1e-12);
  }
}

TEST(Trainer, ResolveLoss) {
  const auto kl = kl_to_standard(2);
  const auto pme = std::make_shared<pde::PmeRhs>(2.0, 1.0, 1.0, std_normal(2));
  const TipfModel tipf = random_tipf(2, 1);
  NodeSpec ns;
  ns.hidden_sizes = {4};
  ns.time_embed_dim = 2;
  ns.time_hidden = 4;
  ns.skip_rank = 1;
  ns.skip_hidden = 4;
  const NodeModel node(2, std_normal(2), ns);
  EXPECT_EQ(resolve_loss(LossKind::Auto, tipf, *kl), LossKind::Direct);
  EXPECT_EQ(resolve_loss(LossKind::Auto, node, *kl), LossKind::Ibp);
  EXPECT_EQ(resolve_loss(LossKind::Auto, node, *pme), LossKind::Direct);
  EXPECT_EQ(resolve_loss(LossKind::Ibp, tipf, *kl), LossKind::Ibp);
  EXPECT_EQ(parse_loss_kind("ibp"), LossKind::Ibp);
  EXPECT_THROW(parse_loss_kind("adjoint"), ArgumentError);
}

// Loss and gradient for the scale flow against the closed form on the same draws.
TEST(Trainer, DirectLossOnScaleFlow) {
  const double theta = 0.3;
  auto model = std::make_shared<ScaleFlow>(theta);
  const auto rhs = kl_to_standard(1);
  const FlowContext ctx(model, Stream(1));
  Stream rng(2);
  const Mat x0 = model->base().sample(64, rng);
  const std::vector<double> times{0.1, 0.45, 0.9};
  const LossValue lv = loss_direct(*model, ctx, *rhs, times, x0);
  double loss = 0, grad = 0;
  for (double t : times) {
    const double e = std::exp(2 * theta * t), r = theta + 1 - 1 / e;
    for (Index b = 0; b < x0.rows(); ++b) {
      loss += r * r * e * x0(b, 0) * x0(b, 0);
      grad += 2 * r * e * x0(b, 0) * x0(b, 0);
    }
  }
  const double n = 3.0 * 64;
  EXPECT_NEAR(lv.value, loss / n, 1e-12);
  ASSERT_EQ(lv.grad.size(), 1);
  EXPECT_NEAR(lv.grad(0), grad / n, 1e-12);
}

TEST(Trainer, DirectLossSinglePoint) {
  const ConstantFlow m(Eigen::Vector2d(1, 0));
  const ConstantDriftRhs rhs(Eigen::Vector2d(0, 1));
  const FlowContext ctx(m.clone(), Stream(1));
  const LossValue lv = loss_direct(m, ctx, rhs, {0.3}, Mat::Zero(1, 2));
  EXPECT_DOUBLE_EQ(lv.value, 2.0);
}

TEST(Trainer, DirectLossPermutationInvariant) {
  const TipfModel m = random_tipf(2, 6);
  const auto rhs = kl_to_standard(2);
  const FlowContext ctx(m.clone(), Stream(1));
  Stream rng(2);
  const Mat x0 = m.base().sample(25, rng);
  Eigen::PermutationMatrix<Eigen::Dynamic> perm(25);
  perm.setIdentity();
  std::reverse(perm.indices().data(), perm.indices().data() + 25);
  const Mat xp = perm * x0;
  const std::vector<double> times{0.1, 0.6};
  EXPECT_NEAR(loss_direct(m, ctx, *rhs, times, x0, false).value, loss_direct(m, ctx, *rhs, times, xp, false).value, 1e-12);
}

// v = c and D = I: the divergence term vanishes, leaving |c|^2 - 2 c.mean(b).
TEST(Trainer, IbpConstantField) {
  const VectorXd c = Eigen::Vector2d(0.4, -0.3);
  const ConstantFlow m(c);
  const auto rhs = kl_to_standard(2);
  const FlowContext ctx(m.clone(), Stream(1));
  Stream rng(2);
  const Mat x0 = m.base().sample(30, rng);
  const std::vector<double> times{0.2, 0.8};
  const FrozenBatch fb = frozen_samples(m, times, x0);
  const Mat b = rhs->drift(ctx, fb.grid, fb.y);
  const double expected = c.squaredNorm() - 2 * c.dot(b.colwise().mean().transpose());
  EXPECT_NEAR(loss_ibp(m, ctx, *rhs, times, x0, false).value, expected, 1e-12);
}

TEST(Trainer, IbpWithoutDiffusionIsShiftedDirect) {
  const TipfModel m = random_tipf(2, 3);
  auto frozen = std::make_shared<TipfModel>(m);
  const VectorXd b = Eigen::Vector2d(0.7, -1.2);
  const ConstantDriftRhs rhs(b);
  const FlowContext ctx(frozen, Stream(4));
  Stream rng(5);
  const Mat x0 = m.base().sample(40, rng);
  const std::vector<double> times{0.2, 0.7};
  const LossValue direct = loss_direct(m, ctx, rhs, times, x0);
  const LossValue ibp = loss_ibp(m, ctx, rhs, times, x0);
  EXPECT_NEAR(ibp.value + b.squaredNorm(), direct.value, 1e-10);
  EXPECT_LT((ibp.grad - direct.grad).norm(), 1e-10 * (1 + direct.grad.norm()));
}

// Identity flow: v = 0 and div v = 0, so the ibp loss vanishes whatever b is.
TEST(Trainer, IbpZeroField) {
  TipfModel m(1, std_normal(1), small_tipf());
  Stream init(1);
  m.initialize(init);
  auto frozen = std::make_shared<TipfModel>(m);
  const auto rhs = kl_to_standard(1);
  const FlowContext ctx(frozen, Stream(2));
  Stream rng(3);
  const Mat x0 = m.base().sample(30, rng);
  const std::vector<double> times{0.5};
  EXPECT_NEAR(loss_ibp(m, ctx, *rhs, times, x0, false).value, 0.0, 1e-14);
}

// Both estimators are unbiased for the same gradient when the frozen score is
// exact; their difference shrinks like n^{-1/2}.
TEST(Trainer, IbpAndDirectGradientsAgreeAtMonteCarloRate) {
  const TipfModel m = random_tipf(2, 7, 0.2);
  auto frozen = std::make_shared<TipfModel>(m);
  const auto rhs = kl_to_standard(2);
  const FlowContext ctx(frozen, Stream(8));
  const std::vector<double> times{0.5};
  std::vector<double> log_n, log_err;
  for (Index n : {100, 1000, 10000, 100000}) {
    double err = 0;
    const int reps = n >= 100000 ? 2 : 6;
    for (int r = 0; r < reps; ++r) {
      Stream rng = Stream(9).split("rep", static_cast<std::uint64_t>(r * 1000003 + n));
      const Mat x0 = m.base().sample(n, rng);
      const VectorXd gd = loss_direct(m, ctx, *rhs, times, x0).grad;
      const VectorXd gi = loss_ibp(m, ctx, *rhs, times, x0).grad;
      err += (gd - gi).squaredNorm() / reps;
    }
    log_n.push_back(std::log(static_cast<double>(n)));
    log_err.push_back(0.5 * std::log(err));
  }
  const Index k = static_cast<Index>(log_n.size());
  const Eigen::Map<VectorXd> xs(log_n.data(), k), ys(log_err.data(), k);
  const double xm = xs.mean(), ym = ys.mean();
  const double slope = ((xs.array() - xm) * (ys.array() - ym)).sum() / (xs.array() - xm).square().sum();
  EXPECT_NEAR(slope, -0.5, 0.15);
}

TEST(Trainer, ZeroLearningRateLeavesParameters) {
  TipfModel m = random_tipf(2, 11);
  const auto before = m.params().values();
  TrainConfig cfg;
  cfg.n_train = 3;
  cfg.batch = 16;
  cfg.n_times = 2;
  cfg.lr_init = 0.0;
  run_training(m, *kl_to_standard(2), cfg);
  EXPECT_EQ(m.params().values(), before);
}

TEST(Trainer, Deterministic) {
  TrainConfig cfg;
  cfg.n_train = 4;
  cfg.batch = 16;
  cfg.n_times = 3;
  cfg.seed = 42;
  cfg.lr_init = 1e-2;
  std::vector<double> losses[2];
  std::vector<double> params[2];
  for (int run = 0; run < 2; ++run) {
    TipfModel m = random_tipf(2, 12);
    run_training(m, *kl_to_standard(2), cfg, [&](const StepResult& r, const FlowModel&) { losses[run].push_back(r.loss); });
    params[run] = m.params().values();
  }
  EXPECT_EQ(losses[0], losses[1]);
  EXPECT_EQ(params[0], params[1]);
}

// mu_t = N(0, I) is stationary for the KL flow to N(0, I); the identity TIPF is exact.
TEST(Trainer, StationarySolutionHasZeroGradient) {
  TipfModel m(2, std_normal(2), small_tipf());
  Stream init(5);
  m.initialize(init);
  TrainState state;
  TrainConfig cfg;
  cfg.n_train = 10;
  cfg.batch = 64;
  cfg.n_times = 4;
  cfg.loss_kind = LossKind::Direct;
  const auto before = m.params().values();
  const StepResult r = scvm_step(state, m, *kl_to_standard(2), cfg);
  EXPECT_LT(r.grad_norm, 1e-8);
  EXPECT_LT(r.loss, 1e-16);
  for (std::size_t i = 0; i < before.size(); ++i) EXPECT_NEAR(m.params().values()[i], before[i], 1e-6);
}

// The step must evaluate samples and the right-hand side on a frozen copy.
TEST(Trainer, StepUsesFrozenCopy) {
  TipfModel m = random_tipf(2, 13);
  const TipfModel copy = m;
  const auto rhs = kl_to_standard(2);
  TrainConfig cfg;
  cfg.n_train = 10;
  cfg.batch = 32;
  cfg.n_times = 3;
  cfg.seed = 77;
  cfg.init_penalty_weight = 0.0;
  cfg.grad_clip = 0.0;
  TrainState state;
  const StepResult r = scvm_step(state, m, *rhs, cfg);

  Stream step = Stream(77).split("step", 0);
  Stream base_rng = step.split("base"), time_rng = step.split("times");
  const Mat x0 = copy.base().sample(32, base_rng);
  const auto times = stratified_times(3, 1.0, time_rng);
  EXPECT_EQ(times, r.times);
  const FlowContext ctx(std::make_shared<TipfModel>(copy), step.split("ctx"), cfg.n_mean);
  const LossValue lv = loss_direct(copy, ctx, *rhs, times, x0);
  EXPECT_NEAR(r.loss, lv.value, 1e-12);
  OptimizerState opt;
  const VectorXd expected = copy.params().flat() + adam_update(opt, lv.grad, cfg.lr_init);
  EXPECT_LT((m.params().flat() - expected).norm(), 1e-12);
}

TEST(Trainer, NonFiniteLossIsReported) {
  ScaleFlow m(1e3);
  TrainConfig cfg;
  cfg.n_train = 1;
  cfg.batch = 8;
  cfg.n_times = 2;
  EXPECT_THROW(run_training(m, *kl_to_standard(1), cfg), TrainingError);
}

// ---------------------------------------------------------------------------
// Gradient bias.

// Population oracle for the scale flow: L(theta) = (1/T) int (theta + 1 - e^{-2 theta t})^2 e^{2 theta t} dt.
// dL/dtheta splits into the density variation (T1), the velocity variation
// (T2, the iterative gradient) and the right-hand-side variation (T3).
TEST(Bias, ScaleFlowDecomposition) {
  const double theta = 0.4, T = 1.0;
  auto L = [&](double th) {
    return simpson([&](double t) { return std::pow(th + 1 - std::exp(-2 * th * t), 2) * std::exp(2 * th * t); }, 0, T) / T;
  };
  // Term integrands in x evaluated with E[x^2] = 1 and E[x^4] = 3 under the base.
  auto t1 = simpson([&](double t) {
    // int dtheta p |v-f|^2 dx with p_t = N(0, s^2), s = e^{theta t}: d/dtheta p = p t (y^2/s^2 - 1).
    const double s2 = std::exp(2 * theta * t), r = theta + 1 - 1 / s2;
    return t * r * r * s2 * (3 - 1);
  }, 0, T) / T;
  auto t2 = simpson([&](double t) {
    const double s2 = std::exp(2 * theta * t), r = theta + 1 - 1 / s2;
    return 2 * r * s2;
  }, 0, T) / T;
  auto t3 = simpson([&](double t) {
    const double s2 = std::exp(2 * theta * t), r = theta + 1 - 1 / s2;
    return -2 * r * (-2 * t / s2) * s2;
  }, 0, T) / T;
  const double h = 1e-5;
  const double full = (L(theta + h) - L(theta - h)) / (2 * h);
  EXPECT_NEAR(t1 + t2 + t3, full, 1e-7);

  ScaleFlow m(theta);
  BiasConfig cfg;
  cfg.batch = 20000;
  cfg.n_times = 20;
  cfg.seed = 3;
  const BiasReport rep = bias_diagnostic(m, *kl_to_standard(1, T), cfg);
  // Monte Carlo over x and stratified t; the x^2 factor dominates with relative sd sqrt(2/B).
  EXPECT_NEAR(rep.iterative_grad(0), t2, 5 * std::sqrt(2.0 / cfg.batch) * std::abs(t2) + 0.01);
  EXPECT_NEAR(rep.full_grad(0), full, 5 * std::sqrt(2.0 / cfg.batch) * std::abs(full) + 0.05);
  EXPECT_GT(std::abs(rep.full_grad(0) - rep.iterative_grad(0)), 0.5);
}

// On the sampled draws the two gradients have closed forms.
TEST(Bias, ScaleFlowSampleLevel) {
  const double theta = -0.2;
  ScaleFlow m(theta);
  BiasConfig cfg;
  cfg.batch = 50;
  cfg.n_times = 4;
  cfg.seed = 11;
  const BiasReport rep = bias_diagnostic(m, *kl_to_standard(1), cfg);
  Stream rng(11);
  Stream base_rng = rng.split("base"), time_rng = rng.split("times");
  const Mat x0 = m.base().sample(50, base_rng);
  const auto times = stratified_times(4, 1.0, time_rng);
  double gi = 0, gf = 0;
  for (double t : times)
    for (Index b = 0; b < 50; ++b) {
      const double x2 = x0(b, 0) * x0(b, 0), e = std::exp(2 * theta * t), r = theta + 1 - 1 / e;
      gi += 2 * r * e * x2;
      // d/dtheta [r^2 e x^2] = 2 r (1 + 2 t / e) e x^2 + r^2 2 t e x^2
      gf += (2 * r * (1 + 2 * t / e) * e + r * r * 2 * t * e) * x2;
    }
  EXPECT_NEAR(rep.iterative_grad(0), gi / 200, 1e-10);
  EXPECT_NEAR(rep.full_grad(0), gf / 200, 1e-6);
  EXPECT_NEAR(rep.cosine, 1.0, 1e-12);  // one parameter, same sign here
}

TEST(Bias, CosineSentinelAndCapability) {
  TipfModel m(2, std_normal(2), small_tipf());
  Stream init(5);
  m.initialize(init);
  BiasConfig cfg;
  cfg.batch = 16;
  cfg.n_times = 2;
  const BiasReport rep = bias_diagnostic(m, *kl_to_standard(2), cfg);
  EXPECT_TRUE(std::isnan(rep.cosine));

  NodeSpec ns;
  ns.hidden_sizes = {4};
  ns.time_embed_dim = 2;
  ns.time_hidden = 4;
  ns.skip_rank = 1;
  ns.skip_hidden = 4;
  const NodeModel node(2, std_normal(2), ns);
  EXPECT_THROW(bias_diagnostic(node, *kl_to_standard(2), cfg), CapabilityError);
}

TEST(Bias, TipfGradientsDiffer) {
  const TipfModel m = random_tipf(1, 21, 0.3);
  BiasConfig cfg;
  cfg.batch = 64;
  cfg.n_times = 3;
  const BiasReport rep = bias_diagnostic(m, *kl_to_standard(1), cfg);
  EXPECT_TRUE(std::isfinite(rep.cosine));
  EXPECT_LE(std::abs(rep.cosine), 1.0 + 1e-12);
  EXPECT_GT((rep.full_grad - rep.iterative_grad).norm(), 1e-6);
}

}  // namespace
