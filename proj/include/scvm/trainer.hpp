#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <limits>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "scvm/flowmodel.hpp"
#include "scvm/pde.hpp"

namespace scvm::train {

using flow::FlowModel;
using flow::TimeGrid;
using pde::FlowContext;
using pde::PdeRhs;
using Eigen::Index;

enum class LossKind { Direct, Ibp, Auto };

inline std::string to_string(LossKind k) {
  switch (k) {
    case LossKind::Direct: return "direct";
    case LossKind::Ibp: return "ibp";
    default: return "auto";
  }
}

inline LossKind parse_loss_kind(const std::string& s) {
  if (s == "direct") return LossKind::Direct;
  if (s == "ibp") return LossKind::Ibp;
  if (s == "auto") return LossKind::Auto;
  throw ArgumentError("unknown loss kind '" + s + "' (expected direct, ibp or auto)");
}

struct TrainConfig {
  long n_train = 100000;
  Index batch = 1000;
  int n_times = 10;
  double total_time = 1.0;
  double lr_init = 1e-3;
  double lr_final_fraction = 0.01;
  double adam_b1 = 0.9;
  double adam_b2 = 0.9;
  double adam_eps = 1e-8;
  LossKind loss_kind = LossKind::Auto;
  double init_penalty_weight = 1.0;
  std::uint64_t seed = 0;
  long eval_every = 1000;
  double grad_clip = 10.0;       // global-norm clip; <= 0 disables
  Index n_mean = 1024;           // Monte Carlo samples for E[mu_t]
  Index max_chunk_rows = 4096;   // rows per tape when accumulating the loss gradient

  void validate() const {
    if (n_train < 0) throw ArgumentError("train: n_train must be nonnegative");
    if (batch < 1 || n_times < 1) throw ArgumentError("train: batch and n_times must be at least 1");
    if (!(total_time > 0)) throw ArgumentError("train: total_time must be positive");
    if (!(lr_final_fraction > 0) || lr_final_fraction > 1) throw ArgumentError("train: lr_final_fraction must be in (0, 1]");
    if (lr_init < 0) throw ArgumentError("train: lr_init must be nonnegative");
    if (max_chunk_rows < 1 || n_mean < 1) throw ArgumentError("train: max_chunk_rows and n_mean must be positive");
  }
};

// One uniform draw in each stratum [(l-1)T/L, lT/L], in order.
inline std::vector<double> stratified_times(int n_times, double total_time, Stream& rng) {
  if (n_times < 1 || !(total_time > 0)) throw ArgumentError("stratified_times: need L >= 1 and T > 0");
  std::vector<double> t(static_cast<std::size_t>(n_times));
  const double w = total_time / n_times;
  for (int l = 0; l < n_times; ++l) t[static_cast<std::size_t>(l)] = std::min(total_time, (l + rng.uniform()) * w);
  return t;
}

inline double cosine_lr(long k, long n, double lr_init, double lr_final) {
  if (n <= 0) return lr_init;
  const double c = std::cos(M_PI * std::min<double>(static_cast<double>(k), static_cast<double>(n)) / static_cast<double>(n));
  return lr_final + (lr_init - lr_final) * (1 + c) / 2;
}

struct OptimizerState {
  VectorXd m, v;
  long step = 0;
};

// Adam with bias correction; returns the parameter increment.
inline VectorXd adam_update(OptimizerState& s, const VectorXd& grad, double lr, double b1 = 0.9, double b2 = 0.9,
                            double eps = 1e-8) {
  if (s.m.size() == 0) {
    s.m = VectorXd::Zero(grad.size());
    s.v = VectorXd::Zero(grad.size());
  }
  if (s.m.size() != grad.size()) throw ShapeError("adam: gradient length does not match optimizer state");
  ++s.step;
  s.m = b1 * s.m + (1 - b1) * grad;
  s.v = b2 * s.v + (1 - b2) * grad.cwiseAbs2();
  const double c1 = 1 - std::pow(b1, static_cast<double>(s.step));
  const double c2 = 1 - std::pow(b2, static_cast<double>(s.step));
  return (-lr * (s.m.array() / c1) / ((s.v.array() / c2).sqrt() + eps)).matrix();
}

inline LossKind resolve_loss(LossKind k, const FlowModel& model, const PdeRhs& rhs) {
  if (k != LossKind::Auto) return k;
  return (model.kind() == "node" && rhs.has_decomposition()) ? LossKind::Ibp : LossKind::Direct;
}

// ---------------------------------------------------------------------------
// Losses. Samples y_{b,l} = Phi^{theta'}_{t_l}(x_b) and the right-hand side
// come from the frozen context; only the velocity v^theta carries gradients.

struct FrozenBatch {
  TimeGrid grid;  // l-major blocks of B rows
  Mat y;
};

inline FrozenBatch frozen_samples(const FlowModel& frozen, const std::vector<double>& times, const Mat& x0) {
  const auto path = frozen.flow_map_path(times, x0);
  FrozenBatch fb{TimeGrid::stacked(times, x0.rows()), Mat(x0.rows() * static_cast<Index>(times.size()), x0.cols())};
  for (std::size_t l = 0; l < path.size(); ++l) fb.y.middleRows(static_cast<Index>(l) * x0.rows(), x0.rows()) = path[l];
  return fb;
}

struct LossValue {
  double value = 0;
  VectorXd grad;  // empty unless requested
};

namespace detail {

struct Chunk {
  TimeGrid grid;
  Index begin, rows;
};

// Splits rows into runs sharing one unique time, at most max_rows long.
inline std::vector<Chunk> chunks(const TimeGrid& g, Index max_rows) {
  std::vector<Chunk> out;
  Index r = 0;
  while (r < g.rows()) {
    const Index u = g.row_of[static_cast<std::size_t>(r)];
    Index e = r;
    while (e < g.rows() && g.row_of[static_cast<std::size_t>(e)] == u && e - r < max_rows) ++e;
    out.push_back({TimeGrid::constant(g.unique(u), e - r), r, e - r});
    r = e;
  }
  return out;
}

template <class RowLoss>
LossValue accumulate(const FlowModel& model, const TimeGrid& g, Index max_rows, bool with_grad, RowLoss&& row_loss) {
  LossValue out;
  if (with_grad) out.grad = VectorXd::Zero(static_cast<Index>(model.params().size()));
  const double inv_n = 1.0 / static_cast<double>(g.rows());
  for (const Chunk& c : chunks(g, max_rows)) {
    ad::Tape tape;
    const auto p = ad::bind(tape, model.params(), with_grad);
    const ad::Var l = ad::scale(row_loss(tape, p, c), inv_n);
    out.value += l.value()(0, 0);
    if (with_grad) {
      if (tape.has_nonsmooth()) throw UnsupportedPrimitiveError("loss uses a non-differentiable primitive");
      tape.backward(l);
      out.grad += ad::collect_grad(tape, p, model.params());
    }
  }
  return out;
}

}  // namespace detail

// (1/BL) sum |v^theta(y) - f(y; mu^{theta'})|^2 given precomputed targets f.
inline LossValue loss_direct_on(const FlowModel& model, const FrozenBatch& fb, const Mat& f, bool with_grad = true,
                                Index max_rows = 4096) {
  return detail::accumulate(model, fb.grid, max_rows, with_grad, [&](ad::Tape& tape, const ad::BoundParams& p, const detail::Chunk& c) {
    const ad::Var v = model.velocity_tape(tape, p, c.grid, tape.constant(fb.y.middleRows(c.begin, c.rows)));
    return ad::sum_all(ad::square(ad::sub(v, tape.constant(f.middleRows(c.begin, c.rows)))));
  });
}

// (1/BL) sum |v|^2 - 2 v.b - 2 div(D^T v) given precomputed drifts b.
inline LossValue loss_ibp_on(const FlowModel& model, const FrozenBatch& fb, const Mat& b, const PdeRhs& rhs,
                             bool with_grad = true, Index max_rows = 4096) {
  const int d = model.dim();
  return detail::accumulate(model, fb.grid, max_rows, with_grad, [&](ad::Tape& tape, const ad::BoundParams& p, const detail::Chunk& c) {
    const ad::Dual<ad::Var> in{tape.constant(fb.y.middleRows(c.begin, c.rows)), ad::basis_tangents(tape, c.rows, d), d};
    const ad::Dual<ad::Var> v = model.velocity_tape(tape, p, c.grid, in);
    ad::Var l = ad::sub(ad::sum_all(ad::square(v.val)),
                        ad::scale(ad::sum_all(ad::mul(v.val, tape.constant(b.middleRows(c.begin, c.rows)))), 2.0));
    if (!v.tan.absent()) {
      const Mat w = rhs.diffusion(c.grid.unique(0)).transpose();
      l = ad::sub(l, ad::scale(ad::sum_all(ad::block_contract(v.tan, d, w)), 2.0));
    }
    return l;
  });
}

inline LossValue loss_direct(const FlowModel& model, const FlowContext& ctx, const PdeRhs& rhs,
                             const std::vector<double>& times, const Mat& x0, bool with_grad = true) {
  const FrozenBatch fb = frozen_samples(ctx.model(), times, x0);
  return loss_direct_on(model, fb, rhs.evaluate(ctx, fb.grid, fb.y), with_grad);
}

inline LossValue loss_ibp(const FlowModel& model, const FlowContext& ctx, const PdeRhs& rhs,
                          const std::vector<double>& times, const Mat& x0, bool with_grad = true) {
  if (!rhs.has_decomposition())
    throw CapabilityError(rhs.name() + ": the ibp loss needs a Fokker-Planck decomposition");
  const FrozenBatch fb = frozen_samples(ctx.model(), times, x0);
  return loss_ibp_on(model, fb, rhs.drift(ctx, fb.grid, fb.y), rhs, with_grad);
}

// ---------------------------------------------------------------------------
// One iteration of the biased-gradient scheme.

struct StepResult {
  long iteration = 0;
  double loss = 0;          // velocity-matching part
  double penalty = 0;       // weighted initial-condition penalty
  double grad_norm = 0;     // before clipping
  double lr = 0;
  std::vector<double> times;
};

struct TrainState {
  OptimizerState opt;
  long iteration = 0;
};

inline StepResult scvm_step(TrainState& state, FlowModel& model, const PdeRhs& rhs, const TrainConfig& cfg) {
  const LossKind kind = resolve_loss(cfg.loss_kind, model, rhs);
  if (kind == LossKind::Ibp && !rhs.has_decomposition())
    throw CapabilityError(rhs.name() + ": the ibp loss needs a Fokker-Planck decomposition");

  StepResult res;
  res.iteration = state.iteration;
  Stream step = Stream(cfg.seed).split("step", static_cast<std::uint64_t>(state.iteration));
  Stream base_rng = step.split("base"), time_rng = step.split("times");
  const Mat x0 = model.base().sample(cfg.batch, base_rng);
  res.times = stratified_times(cfg.n_times, cfg.total_time, time_rng);

  // theta' <- theta
  std::shared_ptr<const FlowModel> frozen = model.clone();
  const FlowContext ctx(frozen, step.split("ctx"), cfg.n_mean);
  const FrozenBatch fb = frozen_samples(*frozen, res.times, x0);

  LossValue lv = kind == LossKind::Direct
                     ? loss_direct_on(model, fb, rhs.evaluate(ctx, fb.grid, fb.y), true, cfg.max_chunk_rows)
                     : loss_ibp_on(model, fb, rhs.drift(ctx, fb.grid, fb.y), rhs, true, cfg.max_chunk_rows);
  res.loss = lv.value;

  if (cfg.init_penalty_weight > 0) {
    ad::Tape tape;
    const auto p = ad::bind(tape, model.params(), true);
    if (auto pen = model.init_penalty(tape, p, tape.constant(x0))) {
      const ad::Var w = ad::scale(*pen, cfg.init_penalty_weight);
      tape.backward(w);
      res.penalty = w.value()(0, 0);
      lv.grad += ad::collect_grad(tape, p, model.params());
    }
  }

  res.grad_norm = lv.grad.norm();
  if (!std::isfinite(res.loss) || !std::isfinite(res.penalty) || !std::isfinite(res.grad_norm)) {
    std::ostringstream os;
    os << "non-finite training step at iteration " << state.iteration << ": loss=" << res.loss
       << " penalty=" << res.penalty << " grad_norm=" << res.grad_norm << " times=[";
    for (std::size_t i = 0; i < res.times.size(); ++i) os << (i ? "," : "") << res.times[i];
    os << "]";
    throw TrainingError(os.str());
  }
  if (cfg.grad_clip > 0 && res.grad_norm > cfg.grad_clip) lv.grad *= cfg.grad_clip / res.grad_norm;

  res.lr = cosine_lr(state.iteration, cfg.n_train, cfg.lr_init, cfg.lr_init * cfg.lr_final_fraction);
  const VectorXd delta = adam_update(state.opt, lv.grad, res.lr, cfg.adam_b1, cfg.adam_b2, cfg.adam_eps);
  model.params().flat() += delta;
  ++state.iteration;
  return res;
}

// Runs cfg.n_train steps; the callback sees every step.
inline TrainState run_training(FlowModel& model, const PdeRhs& rhs, const TrainConfig& cfg,
                        const std::function<void(const StepResult&, const FlowModel&)>& on_step = {}) {
  cfg.validate();
  TrainState state;
  for (long k = 0; k < cfg.n_train; ++k) {
    const StepResult r = scvm_step(state, model, rhs, cfg);
    if (on_step) on_step(r, model);
  }
  return state;
}

// ---------------------------------------------------------------------------
// Gradient bias diagnostic.

struct BiasConfig {
  Index batch = 256;
  int n_times = 10;
  std::uint64_t seed = 0;
  double fd_step = 1e-5;
  Index n_mean = 1024;
};

struct BiasReport {
  double iterative_grad_norm = 0;
  double full_grad_norm = 0;
  double cosine = std::numeric_limits<double>::quiet_NaN();  // NaN when either gradient vanishes
  VectorXd iterative_grad, full_grad;
};

// Compares the scheme's gradient (frozen samples and right-hand side) with a
// central-difference gradient of the full loss L(theta), where samples and
// f move with theta. Both use the same base draws and times.
inline BiasReport bias_diagnostic(const FlowModel& model, const PdeRhs& rhs, const BiasConfig& cfg) {
  if (!model.exact_density())
    throw CapabilityError("bias diagnostic: needs a model with exact density (tipf), got " + model.kind());
  Stream rng(cfg.seed);
  Stream base_rng = rng.split("base"), time_rng = rng.split("times");
  const Mat x0 = model.base().sample(cfg.batch, base_rng);
  const std::vector<double> times = stratified_times(cfg.n_times, rhs.total_time(), time_rng);
  const Stream ctx_rng = rng.split("ctx");

  auto full_loss = [&](const FlowModel& m, bool with_grad) {
    std::shared_ptr<const FlowModel> frozen = m.clone();
    const FlowContext ctx(frozen, ctx_rng, cfg.n_mean);
    return loss_direct(m, ctx, rhs, times, x0, with_grad);
  };

  BiasReport rep;
  rep.iterative_grad = full_loss(model, true).grad;
  const Index n = rep.iterative_grad.size();
  rep.full_grad = VectorXd(n);
  std::unique_ptr<FlowModel> probe = model.clone();
  for (Index i = 0; i < n; ++i) {
    double& p = probe->params().values()[static_cast<std::size_t>(i)];
    const double orig = p;
    const double h = cfg.fd_step * std::max(1.0, std::abs(orig));
    p = orig + h;
    const double lp = full_loss(*probe, false).value;
    p = orig - h;
    const double lm = full_loss(*probe, false).value;
    p = orig;
    rep.full_grad(i) = (lp - lm) / (2 * h);
  }
  rep.iterative_grad_norm = rep.iterative_grad.norm();
  rep.full_grad_norm = rep.full_grad.norm();
  if (rep.iterative_grad_norm > 1e-12 && rep.full_grad_norm > 1e-12)
    rep.cosine = rep.iterative_grad.dot(rep.full_grad) / (rep.iterative_grad_norm * rep.full_grad_norm);
  return rep;
}

}  // namespace scvm::train
