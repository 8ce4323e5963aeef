#pragma once

// Problems, models, training runs and evaluation plans assembled from a Config.

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "scvm/baseline.hpp"
#include "scvm/cli/config.hpp"
#include "scvm/metrics.hpp"
#include "scvm/node.hpp"
#include "scvm/pde.hpp"
#include "scvm/reference.hpp"
#include "scvm/tipf.hpp"
#include "scvm/trainer.hpp"

namespace scvm::cli {

using Eigen::Index;
using Eigen::VectorXd;
using Mat = Eigen::MatrixXd;
namespace fs = std::filesystem;

// Stream labels, recorded in every config snapshot.
inline constexpr const char* kStreamLabels =
    "init | step/<k>/{base,times,ctx} | curve/<k> | eval/<metric>/t/<i> | eval/samples/<i> | baseline | "
    "problem: mog.means, ou.target";

inline const std::vector<std::string>& problem_names() {
  static const std::vector<std::string> n = {"ou", "mog", "pme", "tdou", "birds", "obstacles"};
  return n;
}

inline const std::vector<std::string>& metric_names() {
  static const std::vector<std::string> n = {"sym_kl", "sym_f_div", "bw", "w2", "tv", "self_consistency"};
  return n;
}

// Tapes allocate and free large buffers every step; keep them in the heap
// instead of round-tripping through mmap.
inline void tune_allocator() {
#ifdef __GLIBC__
  mallopt(M_MMAP_THRESHOLD, 256 << 20);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  mallopt(M_TOP_PAD, 256 << 20);
#endif
}

struct Problem {
  std::string name;
  int dim = 0;
  double total_time = 1;
  std::shared_ptr<const InitialMeasure> initial;
  std::shared_ptr<const pde::PdeRhs> rhs;

  // Exact Gaussian marginals of the solution (ou, tdou).
  std::function<reference::Gaussian(double)> gaussian;
  // What eval compares against at time t; log_density may be empty.
  std::function<metrics::Distribution(double)> reference;
  std::string reference_note;  // "solution", "target" or "particles"
  // Box for TV at time t.
  std::function<std::pair<VectorXd, VectorXd>(double)> tv_box;
  std::vector<std::string> default_metrics;
  std::optional<reference::BarenblattProfile> barenblatt;
};

namespace detail {

inline std::shared_ptr<const GaussianMeasure> iso_gaussian(int d, double variance, VectorXd mean = {}) {
  return std::make_shared<GaussianMeasure>(GaussianMeasure::isotropic(d, variance, std::move(mean)));
}

inline std::function<metrics::Distribution(double)> gaussian_reference(std::function<reference::Gaussian(double)> g) {
  return [g](double t) { return metrics::gaussian(g(t)); };
}

inline std::function<std::pair<VectorXd, VectorXd>(double)> gaussian_box(std::function<reference::Gaussian(double)> g) {
  return [g](double t) {
    const reference::Gaussian r = g(t);
    const VectorXd sd = r.cov.diagonal().cwiseSqrt();
    return std::make_pair(VectorXd(r.mean - 6 * sd), VectorXd(r.mean + 6 * sd));
  };
}

inline Mat spd_from_list(const std::vector<double>& v, int d, const std::string& key) {
  if (static_cast<int>(v.size()) != d * d) throw ConfigError(key + ": expected " + std::to_string(d * d) + " entries");
  Mat m(d, d);
  for (int r = 0; r < d; ++r)
    for (int c = 0; c < d; ++c) m(r, c) = v[static_cast<std::size_t>(r * d + c)];
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw ConfigError(key + ": matrix must be symmetric");
  Eigen::LLT<Mat> llt(m);
  if (llt.info() != Eigen::Success) throw ConfigError(key + ": matrix must be positive definite");
  return m;
}

inline Problem ou_problem(const Config& c, int d, double T) {
  Problem p;
  Stream rng = Stream(c.unsigned_integer("problem.seed")).split("ou.target");
  VectorXd beta(d);
  const auto b = c.reals("problem.beta");
  if (b.empty()) {
    beta = rng.uniform_matrix(d, 1, -1.0, 1.0);
  } else {
    if (static_cast<int>(b.size()) != d) throw ConfigError("problem.beta: expected " + std::to_string(d) + " entries");
    beta = Eigen::Map<const VectorXd>(b.data(), d);
  }
  Mat gamma;
  const auto g = c.reals("problem.gamma");
  if (g.empty()) {
    // Random rotation with eigenvalues in [0.5, 2].
    const Eigen::HouseholderQR<Mat> qr(rng.normal_matrix(d, d));
    const Mat q = qr.householderQ();
    const VectorXd ev = rng.uniform_matrix(d, 1, 0.5, 2.0);
    gamma = q * ev.asDiagonal() * q.transpose();
    gamma = 0.5 * (gamma + gamma.transpose());
  } else {
    gamma = spd_from_list(g, d, "problem.gamma");
  }
  p.initial = iso_gaussian(d, c.real("problem.init_variance"));
  p.rhs = std::make_shared<pde::KlWgfRhs>(pde::gaussian_target(beta, gamma), T, p.initial);
  p.gaussian = [beta, gamma](double t) { return reference::ou_solution(t, beta, gamma); };
  p.reference = gaussian_reference(p.gaussian);
  p.reference_note = "solution";
  p.tv_box = gaussian_box(p.gaussian);
  p.default_metrics = {"sym_kl", "bw", "w2", "self_consistency"};
  if (c.real("problem.init_variance") != 1.0) {
    // The closed form assumes mu_0 = N(0, I).
    p.gaussian = nullptr;
    p.reference = nullptr;
    p.tv_box = nullptr;
  }
  return p;
}

inline Problem mog_problem(const Config& c, int d, double T) {
  Problem p;
  Stream rng = Stream(c.unsigned_integer("problem.seed")).split("mog.means");
  const long k = c.integer("problem.components");
  if (k < 1) throw ConfigError("problem.components: must be at least 1");
  const pde::MogTarget mog = pde::random_mog(d, static_cast<int>(k), c.real("problem.half_width"), rng);
  p.initial = iso_gaussian(d, c.real("problem.init_variance"));
  p.rhs = std::make_shared<pde::KlWgfRhs>(pde::mog_target(mog), T, p.initial);
  p.reference = [mog](double) {
    metrics::Distribution dist;
    dist.name = "target";
    dist.sample = [mog](Index n, Stream& s) {
      Mat x = s.normal_matrix(n, mog.means.cols());
      for (Index i = 0; i < n; ++i) x.row(i) += mog.means.row(static_cast<Index>(s.index(static_cast<std::size_t>(mog.means.rows()))));
      return x;
    };
    dist.log_density = [mog](const Mat& x) { return pde::mog_log_density(mog, x); };
    return dist;
  };
  p.reference_note = "target";
  p.default_metrics = {"sym_kl", "self_consistency"};
  return p;
}

inline Problem pme_problem(const Config& c, int d, double T) {
  Problem p;
  const std::string rule = c.choice("problem.alpha_rule", {"classical", "printed"});
  const auto prof = reference::BarenblattProfile::with_initial_radius(
      c.real("problem.m"), d, c.real("problem.t0"), c.real("problem.radius0"),
      rule == "classical" ? reference::AlphaRule::Classical : reference::AlphaRule::Printed);
  p.barenblatt = prof;
  auto initial = std::make_shared<BarenblattMeasure>(prof);
  p.initial = initial;
  p.rhs = std::make_shared<pde::PmeRhs>(prof.m, prof.mass(), T, p.initial);
  p.reference = [prof, initial](double t) {
    metrics::Distribution dist;
    dist.name = "barenblatt";
    dist.sample = [prof, initial, t](Index n, Stream& s) { return Mat(initial->sample(n, s) * prof.flow_scale(t)); };
    dist.log_density = [prof, t](const Mat& x) {
      VectorXd out(x.rows());
      for (Index i = 0; i < x.rows(); ++i) {
        const double q = prof.probability_density(t, x.row(i).transpose());
        out(i) = q > 0 ? std::log(q) : -std::numeric_limits<double>::infinity();
      }
      return out;
    };
    return dist;
  };
  p.reference_note = "solution";
  p.tv_box = [prof, d](double t) {
    const double r = 1.25 * prof.support_radius(t);
    return std::make_pair(VectorXd(VectorXd::Constant(d, -r)), VectorXd(VectorXd::Constant(d, r)));
  };
  p.default_metrics = {"tv", "self_consistency"};
  return p;
}

inline Problem tdou_problem(const Config& c, int d, double T) {
  Problem p;
  const auto diag = c.reals("problem.gamma");
  Mat gamma = Mat::Identity(d, d);
  if (!diag.empty()) {
    if (static_cast<int>(diag.size()) != d) throw ConfigError("problem.gamma: expected " + std::to_string(d) + " diagonal entries");
    for (int i = 0; i < d; ++i) {
      if (!(diag[static_cast<std::size_t>(i)] > 0)) throw ConfigError("problem.gamma: entries must be positive");
      gamma(i, i) = diag[static_cast<std::size_t>(i)];
    }
  }
  pde::TrapConfig trap{gamma, pde::harmonic_trap(d, c.real("problem.a"), c.real("problem.omega")), c.real("problem.sigma2")};
  const VectorXd m0 = trap.beta(0.0);
  const double v0 = c.real("problem.init_variance");
  p.initial = iso_gaussian(d, v0, m0);
  auto rhs = std::make_shared<pde::TdouRhs>(trap, T, p.initial);
  p.rhs = rhs;
  const reference::LinearSde sde = rhs->moment_sde();
  p.gaussian = [sde, m0, v0, d](double t) { return reference::tdou_moments(t, sde, m0, v0 * Mat::Identity(d, d)); };
  p.reference = gaussian_reference(p.gaussian);
  p.reference_note = "solution";
  p.tv_box = gaussian_box(p.gaussian);
  p.default_metrics = {"w2", "bw", "sym_kl", "self_consistency"};
  return p;
}

inline Problem birds_problem(const Config& c, int d, double T) {
  if (d != 2) throw ConfigError("problem.dim: birds is two-dimensional");
  Problem p;
  const double omega = c.real("problem.omega");
  pde::TrapConfig trap{Mat::Identity(2, 2), pde::infinity_trap(c.real("problem.a"), omega), c.real("problem.sigma2")};
  p.initial = iso_gaussian(2, c.real("problem.init_variance"));
  auto rhs = std::make_shared<pde::BirdsRhs>(trap, c.real("problem.alpha_amplitude"), omega, T, p.initial);
  p.rhs = rhs;
  const double dt = c.real("baseline.dt") > 0 ? c.real("baseline.dt") : baseline::default_dt("birds");
  p.reference = [rhs, dt](double t) {
    metrics::Distribution dist;
    dist.name = "euler-maruyama";
    dist.sample = [rhs, dt, t](Index n, Stream& s) {
      return baseline::em_simulate(*rhs, n, dt, s, {t}).back().positions;
    };
    return dist;
  };
  p.reference_note = "particles";
  p.default_metrics = {"w2", "bw", "self_consistency"};
  return p;
}

inline Problem obstacles_problem(const Config& c, int d, double T) {
  if (d != 2) throw ConfigError("problem.dim: obstacles is two-dimensional");
  Problem p;
  pde::ObstacleConfig oc = pde::default_obstacles();
  oc.repulsion = c.real("problem.repulsion");
  oc.kernel_variance = c.real("problem.kernel_variance");
  p.initial = iso_gaussian(2, c.real("problem.init_variance"));
  p.rhs = std::make_shared<pde::ObstacleRhs>(oc, T, p.initial);
  p.default_metrics = {"self_consistency"};
  return p;
}

}  // namespace detail

inline Problem build_problem(const Config& c) {
  const std::string name = c.choice("problem.name", problem_names());
  const long d = c.integer("problem.dim");
  if (d < 1) throw ConfigError("problem.dim: must be at least 1");
  const double T = c.real("problem.total_time");
  if (!(T > 0)) throw ConfigError("problem.total_time: must be positive");
  if (!(c.real("problem.init_variance") > 0)) throw ConfigError("problem.init_variance: must be positive");
  const int di = static_cast<int>(d);
  Problem p;
  try {
    if (name == "ou") p = detail::ou_problem(c, di, T);
    else if (name == "mog") p = detail::mog_problem(c, di, T);
    else if (name == "pme") p = detail::pme_problem(c, di, T);
    else if (name == "tdou") p = detail::tdou_problem(c, di, T);
    else if (name == "birds") p = detail::birds_problem(c, di, T);
    else p = detail::obstacles_problem(c, di, T);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("problem '") + name + "': " + e.what());
  }
  p.name = name;
  p.dim = di;
  p.total_time = T;
  return p;
}

// ---------------------------------------------------------------------------
// Models.

inline std::unique_ptr<flow::FlowModel> build_model(const Config& c, const Problem& p) {
  const std::string kind = c.choice("model.kind", {"tipf", "node"});
  const auto act = ad::parse_activation(c.choice("model.activation", {"silu", "celu"}));
  const auto hidden = c.integers("model.hidden");
  const int te = static_cast<int>(c.integer("model.time_embed_dim"));
  const int th = static_cast<int>(c.integer("model.time_hidden"));
  // auto: the slowest feature covers half a period over [0, T], so no two times share an embedding.
  const double ts = c.str("model.time_scale") == "auto" ? p.total_time / M_PI : c.real("model.time_scale");
  if (!(ts > 0)) throw ConfigError("model.time_scale: must be positive or auto");
  try {
    if (kind == "tipf") {
      flow::TipfSpec s;
      s.hidden_sizes = hidden;
      s.activation = act;
      s.use_layer_norm = c.boolean("model.layer_norm");
      s.time_embed_dim = te;
      s.time_hidden = th;
      s.time_scale = ts;
      s.scale_bound = c.real("model.scale_bound");
      return std::make_unique<flow::TipfModel>(p.dim, p.initial, s);
    }
    flow::NodeSpec s;
    s.hidden_sizes = hidden;
    s.activation = act;
    s.use_layer_norm = c.boolean("model.layer_norm");
    s.time_embed_dim = te;
    s.time_hidden = th;
    s.time_scale = ts;
    s.skip_rank = static_cast<int>(c.integer("model.skip_rank"));
    s.skip_hidden = static_cast<int>(c.integer("model.skip_hidden"));
    s.enable_score = c.boolean("model.enable_score");
    s.ode.rtol = c.real("model.rtol");
    s.ode.atol = c.real("model.atol");
    return std::make_unique<flow::NodeModel>(p.dim, p.initial, s);
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError(std::string("model: ") + e.what());
  }
}

inline std::unique_ptr<flow::FlowModel> initial_model(const Config& c, const Problem& p) {
  auto m = build_model(c, p);
  Stream init = Stream(c.unsigned_integer("seed")).split("init");
  m->initialize(init);
  return m;
}

// ---------------------------------------------------------------------------
// Training.

inline train::TrainConfig train_config(const Config& c, const Problem& p) {
  train::TrainConfig t;
  t.n_train = c.integer("train.n_train");
  t.batch = c.integer("train.batch");
  t.n_times = static_cast<int>(c.integer("train.n_times"));
  t.total_time = p.total_time;
  t.lr_init = c.real("train.lr_init");
  t.lr_final_fraction = c.real("train.lr_final_fraction");
  t.adam_b1 = c.real("train.adam_b1");
  t.adam_b2 = c.real("train.adam_b2");
  t.loss_kind = train::parse_loss_kind(c.choice("train.loss", {"direct", "ibp", "auto"}));
  t.init_penalty_weight = c.real("train.init_penalty_weight");
  t.seed = c.unsigned_integer("seed");
  t.eval_every = c.integer("train.eval_every");
  t.grad_clip = c.real("train.grad_clip");
  t.n_mean = c.integer("train.n_mean");
  try {
    t.validate();
  } catch (const Error& e) {
    throw ConfigError(e.what());
  }
  if (c.integer("train.sc_samples") < 1) throw ConfigError("train.sc_samples: must be at least 1");
  if (c.integer("train.checkpoint_every") < 0) throw ConfigError("train.checkpoint_every: must be nonnegative");
  return t;
}

struct CurveRow {
  long iteration = 0;
  double loss = std::numeric_limits<double>::quiet_NaN();  // NaN on the final row (no step taken)
  double penalty = std::numeric_limits<double>::quiet_NaN();
  double grad_norm = std::numeric_limits<double>::quiet_NaN();
  double lr = std::numeric_limits<double>::quiet_NaN();
  double self_consistency = 0;
  double self_consistency_se = 0;
  double wall_seconds = 0;  // not part of training_curve.csv
};

struct TrainHooks {
  std::function<void(long iteration, const flow::FlowModel&)> checkpoint;
  std::function<void(const CurveRow&)> row;
};

// Runs N_train steps. A curve row is recorded before steps 0, eval_every,
// 2 eval_every, ... and after the last step; rows carry that step's loss and
// the self-consistency of the parameters the step started from.
inline std::vector<CurveRow> run_train(const Config& c, const Problem& p, flow::FlowModel& model,
                                       const TrainHooks& hooks = {}) {
  const train::TrainConfig tc = train_config(c, p);
  const Index sc_n = c.integer("train.sc_samples");
  const long ck_every = c.integer("train.checkpoint_every");
  const Stream curve = Stream(tc.seed).split("curve");
  const auto start = std::chrono::steady_clock::now();
  auto measure = [&](long k) {
    const auto s = metrics::self_consistency(model, *p.rhs, tc.n_times, sc_n, curve.split("k", static_cast<std::uint64_t>(k)),
                                             tc.n_mean);
    CurveRow r;
    r.iteration = k;
    r.self_consistency = s.mean;
    r.self_consistency_se = s.std;
    return r;
  };
  std::vector<CurveRow> rows;
  train::TrainState state;
  for (long k = 0; k < tc.n_train; ++k) {
    std::optional<CurveRow> row;
    if (tc.eval_every > 0 ? k % tc.eval_every == 0 : k == 0) row = measure(k);
    const train::StepResult r = train::scvm_step(state, model, *p.rhs, tc);
    if (row) {
      row->loss = r.loss;
      row->penalty = r.penalty;
      row->grad_norm = r.grad_norm;
      row->lr = r.lr;
      row->wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      rows.push_back(*row);
      if (hooks.row) hooks.row(*row);
    }
    if (hooks.checkpoint && ck_every > 0 && (k + 1) % ck_every == 0 && k + 1 < tc.n_train) hooks.checkpoint(k + 1, model);
  }
  CurveRow last = measure(tc.n_train);
  last.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  rows.push_back(last);
  if (hooks.row) hooks.row(last);
  if (hooks.checkpoint) hooks.checkpoint(tc.n_train, model);
  return rows;
}

inline std::string fmt(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline void write_curve_csv(std::ostream& os, const std::vector<CurveRow>& rows) {
  os << "iteration,loss,penalty,grad_norm,lr,self_consistency,self_consistency_se\n";
  for (const auto& r : rows)
    os << r.iteration << ',' << fmt(r.loss) << ',' << fmt(r.penalty) << ',' << fmt(r.grad_norm) << ',' << fmt(r.lr) << ','
       << fmt(r.self_consistency) << ',' << fmt(r.self_consistency_se) << '\n';
}

// ---------------------------------------------------------------------------
// Checkpoints: <stem>.params (binary parameter file) + <stem>.json sidecar
// holding the resolved config needed to rebuild the model.

inline constexpr int kCheckpointVersion = 1;

inline void write_checkpoint(const fs::path& dir, const std::string& stem, const flow::FlowModel& model, const Config& c,
                             long iteration) {
  fs::create_directories(dir);
  ad::save_params((dir / (stem + ".params")).string(), model.params(), model.describe());
  nlohmann::json j;
  j["format"] = "scvm-checkpoint";
  j["version"] = kCheckpointVersion;
  j["iteration"] = iteration;
  j["params"] = stem + ".params";
  j["model"] = {{"kind", model.kind()}, {"dim", model.dim()}, {"n_params", model.params().size()},
                {"description", model.describe()}};
  j["config"] = c.values();
  std::ofstream f(dir / (stem + ".json"));
  f << j.dump(2) << '\n';
}

struct LoadedCheckpoint {
  Config config;
  Problem problem;
  std::unique_ptr<flow::FlowModel> model;
  long iteration = 0;
};

// Accepts either the .params or the .json path.
inline LoadedCheckpoint load_checkpoint(const fs::path& path) {
  fs::path json_path = path, params_path;
  json_path.replace_extension(".json");
  std::ifstream f(json_path);
  if (!f) throw ConfigError("cannot read checkpoint sidecar '" + json_path.string() + "'");
  nlohmann::json j;
  try {
    f >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("checkpoint sidecar '" + json_path.string() + "': " + e.what());
  }
  if (j.value("format", "") != "scvm-checkpoint" || j.value("version", 0) != kCheckpointVersion)
    throw ConfigError("'" + json_path.string() + "' is not a version " + std::to_string(kCheckpointVersion) + " checkpoint");
  LoadedCheckpoint out;
  for (const auto& [k, v] : j.at("config").items()) out.config.set(k, v.get<std::string>(), json_path.string());
  out.iteration = j.at("iteration").get<long>();
  params_path = json_path.parent_path() / j.at("params").get<std::string>();
  out.problem = build_problem(out.config);
  out.model = build_model(out.config, out.problem);
  ad::LoadedParams lp = ad::load_params(params_path.string());
  if (!lp.store.same_layout(out.model->params()))
    throw ConfigError("checkpoint parameters do not match the model described by its config");
  out.model->params() = std::move(lp.store);
  return out;
}

// ---------------------------------------------------------------------------
// Evaluation.

inline std::vector<double> eval_times(const Config& c, const Problem& p) {
  std::vector<double> t = c.reals("eval.times");
  if (!t.empty()) {
    for (double x : t)
      if (x < 0 || x > p.total_time) throw ConfigError("eval.times: times must lie in [0, " + fmt(p.total_time) + "]");
    return t;
  }
  const long n = c.integer("eval.n_grid");
  if (n < 1) throw ConfigError("eval.n_grid: must be at least 1");
  if (n == 1) return {p.total_time};
  for (long i = 0; i < n; ++i) t.push_back(p.total_time * static_cast<double>(i) / static_cast<double>(n - 1));
  return t;
}

inline std::vector<std::string> eval_metrics(const Config& c, const Problem& p) {
  auto m = split_list(c.str("eval.metrics"));
  if (m.empty()) return p.default_metrics;
  const auto& valid = metric_names();
  for (const auto& name : m)
    if (std::find(valid.begin(), valid.end(), name) == valid.end()) {
      std::string list;
      for (const auto& v : valid) list += (list.empty() ? "" : ", ") + v;
      throw ConfigError("eval.metrics: unknown metric '" + name + "' (valid: " + list + ")");
    }
  return m;
}

struct Skipped {
  std::string metric;
  std::optional<double> t;  // empty: every time
  std::string reason;
};

struct EvalResult {
  metrics::MetricReport report;
  std::vector<Skipped> skipped;
  metrics::Warnings warnings;
  std::vector<std::pair<double, Mat>> samples;
};

namespace detail {

// Optimal affine map from N(m0, S0) to N(m1, S1).
inline std::function<Mat(const Mat&)> gaussian_ot_map(const VectorXd& m0, const Mat& s0, const reference::Gaussian& g) {
  using reference::MatrixFn;
  using reference::spd_matrix_fn;
  const Mat r0 = spd_matrix_fn(s0, MatrixFn::Sqrt);
  const Mat r0i = spd_matrix_fn(r0, MatrixFn::Inverse);
  const Mat inner = r0 * g.cov * r0;
  const Mat a = r0i * spd_matrix_fn(0.5 * (inner + inner.transpose()), MatrixFn::Sqrt) * r0i;
  return [m0, a, m1 = g.mean](const Mat& x) { return Mat((x.rowwise() - m0.transpose()) * a.transpose()).rowwise() + m1.transpose(); };
}

// Why `metric` cannot run at all on this problem/model, or empty.
inline std::string static_skip_reason(const std::string& metric, const Problem& p) {
  if (metric == "self_consistency") return "";
  if (!p.reference) return "problem '" + p.name + "' has no reference solution";
  const bool density = static_cast<bool>(p.reference(0.0).log_density);
  if ((metric == "sym_kl" || metric == "sym_f_div" || metric == "tv") && !density)
    return "the " + p.reference_note + " reference of '" + p.name + "' has samples but no density";
  if (metric == "tv" && !p.tv_box) return "no bounded domain for TV on '" + p.name + "'";
  return "";
}

}  // namespace detail

inline EvalResult evaluate(const Config& c, const Problem& p, const flow::FlowModel& model) {
  const auto times = eval_times(c, p);
  const auto names = eval_metrics(c, p);
  const Index n = c.integer("eval.n");
  const int repeats = static_cast<int>(c.integer("eval.repeats"));
  const Index w2_n = c.integer("eval.w2_n");
  const Index tv_n = c.integer("eval.tv_n");
  const Index sc_n = c.integer("eval.sc_samples");
  const Index n_mean = c.integer("train.n_mean");
  const long dump = c.integer("eval.dump_samples");
  const std::string coupling = c.choice("eval.w2_coupling", {"shared", "independent"});
  if (n < 2 || repeats < 1 || w2_n < 1 || tv_n < 1 || sc_n < 1 || dump < 0)
    throw ConfigError("eval: sample counts must be positive (eval.n >= 2)");
  if (w2_n > metrics::kMaxAssignment)
    throw ConfigError("eval.w2_n: the exact assignment solver is limited to " + std::to_string(metrics::kMaxAssignment) +
                      " samples");

  const Stream root = Stream(c.unsigned_integer("seed")).split("eval");
  const auto* base_gauss = dynamic_cast<const GaussianMeasure*>(p.initial.get());
  EvalResult out;

  for (const auto& name : names) {
    const std::string why = detail::static_skip_reason(name, p);
    if (!why.empty()) {
      out.skipped.push_back({name, std::nullopt, why});
      continue;
    }
    const Stream mrng = root.split(name);
    for (std::size_t i = 0; i < times.size(); ++i) {
      const double t = times[i];
      const Stream rng = mrng.split("t", i);
      try {
        if (name == "self_consistency") {
          const auto s = metrics::self_consistency_at(model, *p.rhs, t, sc_n, rng, n_mean);
          out.report.add(t, name, s.mean, s.std, 1, sc_n);
          continue;
        }
        const metrics::Distribution ref = p.reference(t);
        const metrics::Distribution mod = metrics::model_at(model, t);
        if (name == "sym_kl") {
          out.report.add(t, name, metrics::sym_kl(mod, ref, n, repeats, rng), n);
        } else if (name == "sym_f_div") {
          out.report.add(t, name, metrics::sym_f_div(mod, ref, n, repeats, rng), n);
        } else if (name == "bw") {
          const auto s = metrics::repeated(repeats, rng, [&](Stream& r) {
            Stream a = r.split("model"), b = r.split("reference");
            const Mat x = mod.sample(n, a);
            if (p.gaussian) return metrics::bures_wasserstein(x, p.gaussian(t), &out.warnings);
            return metrics::bures_wasserstein(x, ref.sample(n, b), &out.warnings);
          });
          out.report.add(t, name, s, n);
        } else if (name == "w2") {
          const bool shared = coupling == "shared" && p.gaussian && base_gauss;
          const auto s = metrics::repeated(repeats, rng, [&](Stream& r) {
            Stream a = r.split("model"), b = r.split("reference");
            if (shared) {
              const Mat x0 = p.initial->sample(w2_n, a);
              const Mat y = model.flow_map(flow::TimeGrid::constant(t, w2_n), x0);
              return metrics::w2_empirical(y, detail::gaussian_ot_map(base_gauss->mean(), base_gauss->cov(), p.gaussian(t))(x0));
            }
            return metrics::w2_empirical(mod.sample(w2_n, a), ref.sample(w2_n, b));
          });
          out.report.add(t, name, s, w2_n);
        } else if (name == "tv") {
          const auto [lo, hi] = p.tv_box(t);
          const auto s = metrics::repeated(repeats, rng, [&](Stream& r) {
            return metrics::tv_compact([&](const Mat& x) { return VectorXd(mod.log_density(x).array().exp()); },
                                       [&](const Mat& x) { return VectorXd(ref.log_density(x).array().exp()); }, lo, hi, tv_n,
                                       r);
          });
          out.report.add(t, name, s, tv_n);
        }
      } catch (const SupportMismatchError& e) {
        out.skipped.push_back({name, t, e.what()});
      } catch (const CapabilityError& e) {
        out.skipped.push_back({name, t, e.what()});
      }
    }
  }

  if (dump > 0) {
    for (std::size_t i = 0; i < times.size(); ++i) {
      Stream s = root.split("samples", i);
      out.samples.emplace_back(times[i], model.sample_path({times[i]}, dump, s).front());
    }
  }
  return out;
}

inline void write_skipped_csv(std::ostream& os, const std::vector<Skipped>& skipped) {
  os << "metric,t,reason\n";
  for (const auto& s : skipped) {
    std::string reason = s.reason;
    for (auto& ch : reason)
      if (ch == '"') ch = '\'';
    os << s.metric << ',' << (s.t ? fmt(*s.t) : "") << ",\"" << reason << "\"\n";
  }
}

inline void write_samples_csv(std::ostream& os, const std::vector<std::pair<double, Mat>>& samples) {
  std::vector<baseline::ParticleEnsemble> snaps;
  for (const auto& [t, x] : samples) snaps.push_back({x, t});
  if (snaps.empty()) return;
  baseline::write_snapshots_csv(os, snaps);
}

// ---------------------------------------------------------------------------
// Reference dumps: t, mean_i, cov_i_j (plus support_radius for pme).

inline void write_reference_csv(std::ostream& os, const Problem& p, const std::vector<double>& times) {
  const int d = p.dim;
  if (!p.gaussian && !p.barenblatt)
    throw CapabilityError("problem '" + p.name + "' has no closed-form reference path");
  os << "t";
  if (p.barenblatt) os << ",support_radius";
  for (int i = 0; i < d; ++i) os << ",mean_" << i;
  for (int i = 0; i < d; ++i)
    for (int j = 0; j < d; ++j) os << ",cov_" << i << '_' << j;
  os << '\n';
  for (double t : times) {
    reference::Gaussian g;
    os << fmt(t);
    if (p.barenblatt) {
      // Per-coordinate variance of (1 - |x|^2 / R^2)_+^k on the ball of radius R is R^2 / (d + 2k + 2).
      const auto& b = *p.barenblatt;
      const double r = b.support_radius(t);
      g.mean = VectorXd::Zero(d);
      g.cov = r * r / (d + 2.0 / (b.m - 1) + 2) * Mat::Identity(d, d);
      os << ',' << fmt(r);
    } else {
      g = p.gaussian(t);
    }
    for (int i = 0; i < d; ++i) os << ',' << fmt(g.mean(i));
    for (int i = 0; i < d; ++i)
      for (int j = 0; j < d; ++j) os << ',' << fmt(g.cov(i, j));
    os << '\n';
  }
}

// ---------------------------------------------------------------------------
// Euler-Maruyama particle baseline.

inline std::vector<baseline::ParticleEnsemble> run_baseline(const Config& c, const Problem& p) {
  const Index n = c.integer("baseline.n");
  if (n < 1) throw ConfigError("baseline.n: must be at least 1");
  const double dt = c.real("baseline.dt") > 0 ? c.real("baseline.dt") : baseline::default_dt(p.name);
  Stream rng = Stream(c.unsigned_integer("seed")).split("baseline");
  return baseline::em_simulate(*p.rhs, n, dt, rng, eval_times(c, p));
}

inline train::BiasConfig bias_config(const Config& c) {
  train::BiasConfig b;
  b.batch = c.integer("bias.batch");
  b.n_times = static_cast<int>(c.integer("bias.n_times"));
  b.fd_step = c.real("bias.fd_step");
  b.seed = c.unsigned_integer("seed");
  b.n_mean = c.integer("train.n_mean");
  if (b.batch < 1 || b.n_times < 1 || !(b.fd_step > 0)) throw ConfigError("bias: batch, n_times and fd_step must be positive");
  return b;
}

inline std::string snapshot_text(const Config& c) {
  return std::string("# resolved configuration\n# streams: ") + kStreamLabels + "\n" + c.snapshot();
}

}  // namespace scvm::cli
