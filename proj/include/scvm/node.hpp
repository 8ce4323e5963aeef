#pragma once

#include <algorithm>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "scvm/flowmodel.hpp"
#include "scvm/ode.hpp"

namespace scvm::flow {

struct NodeSpec {
  std::vector<int> hidden_sizes{256, 256, 256};
  ad::Activation activation = ad::Activation::Silu;
  bool use_layer_norm = true;
  int time_embed_dim = 64;
  int time_hidden = 64;
  double time_scale = 1.0;
  int skip_rank = 20;         // 0 disables the low-rank linear skip
  int skip_hidden = 64;       // hidden width of the network producing L(t), c(t)
  bool enable_score = false;  // expensive augmented-ODE score path
  ode::IntegratorConfig ode{};
};

// Neural ODE: v_t(x) = net(t, x) + L(t) L(t)^T x + c(t), with L(t) a d x r
// matrix produced by a small time-only network.
class NodeModel : public FlowModel {
 public:
  NodeModel(int dim, std::shared_ptr<const InitialMeasure> base, NodeSpec spec = {})
      : FlowModel(dim, std::move(base)), spec_(std::move(spec)) {
    if (spec_.time_embed_dim <= 0) throw ShapeError("node: the velocity network needs a time input");
    net_ = ad::Mlp({.input_dim = dim,
                    .hidden_sizes = spec_.hidden_sizes,
                    .output_dim = dim,
                    .activation = spec_.activation,
                    .use_layer_norm = spec_.use_layer_norm,
                    .time_embed_dim = spec_.time_embed_dim,
                    .time_hidden = spec_.time_hidden,
                    .time_scale = spec_.time_scale},
                   params_, "velocity.");
    if (spec_.skip_rank > 0) {
      skip_ = ad::Mlp({.input_dim = 0,
                       .hidden_sizes = {spec_.skip_hidden},
                       .output_dim = dim * spec_.skip_rank + dim,
                       .activation = spec_.activation,
                       .time_embed_dim = spec_.time_embed_dim,
                       .time_hidden = spec_.time_hidden,
                       .time_scale = spec_.time_scale},
                      params_, "skip.");
    }
  }

  std::string kind() const override { return "node"; }
  std::string describe() const override {
    std::ostringstream os;
    os << "node(dim=" << dim_ << ", net=" << net_.spec().describe() << ", skip_rank=" << spec_.skip_rank
       << ", rtol=" << spec_.ode.rtol << ", atol=" << spec_.ode.atol << ", base=" << base_->describe() << ")";
    return os.str();
  }
  bool exact_density() const override { return false; }
  bool exact_inverse() const override { return false; }
  bool has_score() const override { return spec_.enable_score; }
  bool can_enable_score() const override { return true; }
  void enable_score(bool on) override { spec_.enable_score = on; }
  std::unique_ptr<FlowModel> clone() const override { return std::make_unique<NodeModel>(*this); }
  const NodeSpec& spec() const { return spec_; }
  NodeSpec& spec() { return spec_; }

  void initialize(Stream& rng) override {
    Stream a = rng.split("node.velocity");
    net_.init(params_, a, 1.0);
    if (spec_.skip_rank > 0) {
      Stream b = rng.split("node.skip");
      skip_.init(params_, b, 0.1);
    }
  }

  // ---------------------------------------------------------------------
  // Velocity on a tape.

  template <class T>
  T velocity_generic(Tape& tape, const BoundParams& p, const ad::TimeInput<T>& time, const T& x) const {
    T v = net_.apply<T>(p, &time, x);
    if (spec_.skip_rank > 0) {
      const ad::TimeInput<Var> tonly{plain(time.unique), {}};
      Var out = skip_.apply<Var>(p, &tonly, std::nullopt);
      out = ad::gather_rows(out, time.row_of);
      const int lr = dim_ * spec_.skip_rank;
      const Var lflat = ad::slice_cols(out, 0, lr);
      const Var c = ad::slice_cols(out, lr, dim_);
      v = ad::add(v, ad::add(lowrank(lflat, x), lift_like(c, x)));
    }
    (void)tape;
    return v;
  }

  Var velocity_tape(Tape& tape, const BoundParams& p, const TimeGrid& g, const Var& x) const override {
    return velocity_generic<Var>(tape, p, time_input(tape, g), x);
  }
  Dual<Var> velocity_tape(Tape& tape, const BoundParams& p, const TimeGrid& g, const Dual<Var>& x) const override {
    return velocity_generic<Dual<Var>>(tape, p, time_input(tape, g, x.k), x);
  }

  Mat velocity(const TimeGrid& g, const Mat& x) const override {
    check_batch(g, x);
    Tape tape;
    const BoundParams p = ad::bind(tape, params_, false);
    return velocity_tape(tape, p, g, tape.constant(x)).value();
  }

  // ---------------------------------------------------------------------
  // Integration.

  Mat flow_map(const TimeGrid& g, const Mat& x) const override {
    check_batch(g, x);
    Mat out(x.rows(), x.cols());
    const auto groups = g.groups();
    for (std::size_t u = 0; u < groups.size(); ++u) {
      if (groups[u].empty()) continue;
      const Mat y = integrate_points(0.0, g.unique(static_cast<Index>(u)), select_rows(x, groups[u]));
      for (std::size_t i = 0; i < groups[u].size(); ++i) out.row(groups[u][i]) = y.row(static_cast<Index>(i));
    }
    return out;
  }

  // One checkpointed integration of the whole batch through all times.
  std::vector<Mat> flow_map_path(const std::vector<double>& times, const Mat& x0) const override {
    if (x0.cols() != dim_) throw ShapeError("node: points must have " + std::to_string(dim_) + " columns");
    if (times.empty()) return {};
    const double t_end = *std::max_element(times.begin(), times.end());
    const Index n = x0.rows();
    const auto states = ode::integrate_with_checkpoints({velocity_rhs(n), 0.0, t_end, flatten(x0)}, times, spec_.ode);
    std::vector<Mat> out;
    for (const auto& s : states) out.push_back(unflatten(s, n));
    return out;
  }

  // Integrates (z, l) backward from t to 0 with dl/ds = div v_s(z); the
  // inverse log-determinant is l(0).
  InverseResult inverse_map(const TimeGrid& g, const Mat& y) const override {
    check_batch(g, y);
    InverseResult out{Mat(y.rows(), y.cols()), VectorXd(y.rows())};
    const auto groups = g.groups();
    for (std::size_t u = 0; u < groups.size(); ++u) {
      if (groups[u].empty()) continue;
      const double t = g.unique(static_cast<Index>(u));
      const Mat yu = select_rows(y, groups[u]);
      const Index n = yu.rows();
      VectorXd s0(n * dim_ + n);
      s0 << flatten(yu), VectorXd::Zero(n);
      const VectorXd s = ode::integrate({augmented_rhs(n), t, 0.0, s0}, spec_.ode).y;
      for (std::size_t i = 0; i < groups[u].size(); ++i) {
        out.point.row(groups[u][i]) = unflatten(s.head(n * dim_), n).row(static_cast<Index>(i));
        out.log_det(groups[u][i]) = s(n * dim_ + static_cast<Index>(i));
      }
    }
    return out;
  }

  VectorXd log_density(const TimeGrid& g, const Mat& x) const override {
    const InverseResult r = inverse_map(g, x);
    return base_->log_density(r.point) + r.log_det;
  }

  // Integrates to the base point z0, then forward along the trajectory with
  // ds/dt = -J_v^T s - grad(div v), s(0) = grad log p_0(z0).
  Mat score(const TimeGrid& g, const Mat& x) const override {
    if (!spec_.enable_score)
      throw CapabilityError(
          "node: score is disabled (expensive); supply a Fokker-Planck decomposition and use the ibp loss, or set "
          "model.enable_score=true");
    check_batch(g, x);
    Mat out(x.rows(), x.cols());
    const auto groups = g.groups();
    for (std::size_t u = 0; u < groups.size(); ++u) {
      if (groups[u].empty()) continue;
      const double t = g.unique(static_cast<Index>(u));
      const Mat xu = select_rows(x, groups[u]);
      const Index n = xu.rows();
      const Mat z0 = integrate_points(t, 0.0, xu);
      VectorXd s0(2 * n * dim_);
      s0 << flatten(z0), flatten(base_->score(z0));
      const VectorXd s = ode::integrate({score_rhs(n), 0.0, t, s0}, spec_.ode).y;
      const Mat sc = unflatten(s.tail(n * dim_), n);
      for (std::size_t i = 0; i < groups[u].size(); ++i) out.row(groups[u][i]) = sc.row(static_cast<Index>(i));
    }
    return out;
  }

 private:
  static Var plain(const Var& v) { return v; }
  static Var plain(const Dual<Var>& v) { return v.val; }

  static Var lift_like(const Var& c, const Var&) { return c; }
  static Dual<Var> lift_like(const Var& c, const Dual<Var>& x) { return ad::lift(c, x.k); }

  Var lowrank(const Var& lflat, const Var& x) const { return ad::lowrank_apply(lflat, x, dim_, spec_.skip_rank); }
  Dual<Var> lowrank(const Var& lflat, const Dual<Var>& x) const {
    return ad::lowrank_apply(lflat, x, dim_, spec_.skip_rank);
  }

  // Row-major flattening so each point occupies a contiguous block.
  VectorXd flatten(const Mat& x) const {
    VectorXd v(x.size());
    for (Index r = 0; r < x.rows(); ++r) v.segment(r * dim_, dim_) = x.row(r).transpose();
    return v;
  }
  Mat unflatten(const VectorXd& v, Index n) const {
    Mat x(n, dim_);
    for (Index r = 0; r < n; ++r) x.row(r) = v.segment(r * dim_, dim_).transpose();
    return x;
  }

  Mat integrate_points(double t0, double t1, const Mat& x) const {
    if (t0 == t1) return x;
    return unflatten(ode::integrate({velocity_rhs(x.rows()), t0, t1, flatten(x)}, spec_.ode).y, x.rows());
  }

  ode::Rhs velocity_rhs(Index n) const {
    return [this, n](double t, const VectorXd& s) { return flatten(velocity(TimeGrid::constant(t, n), unflatten(s, n))); };
  }

  ode::Rhs augmented_rhs(Index n) const {
    return [this, n](double t, const VectorXd& s) {
      const Mat z = unflatten(s.head(n * dim_), n);
      Tape tape;
      const BoundParams p = ad::bind(tape, params_, false);
      const TimeGrid g = TimeGrid::constant(t, n);
      const Dual<Var> in{tape.constant(z), ad::basis_tangents(tape, n, dim_), dim_};
      const Dual<Var> v = velocity_tape(tape, p, g, in);
      VectorXd ds(n * dim_ + n);
      ds.head(n * dim_) = flatten(v.val.value());
      ds.tail(n) = v.tan.absent() ? VectorXd::Zero(n)
                                  : VectorXd(ad::block_contract(v.tan, dim_, Mat::Identity(dim_, dim_)).value().col(0));
      return ds;
    };
  }

  ode::Rhs score_rhs(Index n) const {
    return [this, n](double t, const VectorXd& s) {
      const Mat z = unflatten(s.head(n * dim_), n);
      const Mat sc = unflatten(s.tail(n * dim_), n);
      Tape tape;
      const BoundParams p = ad::bind(tape, params_, false);
      const TimeGrid g = TimeGrid::constant(t, n);
      const Var zl = tape.leaf(z, true);
      const Dual<Var> in{zl, ad::basis_tangents(tape, n, dim_), dim_};
      const Dual<Var> v = velocity_tape(tape, p, g, in);
      // Rows are independent, so one reverse sweep of sum(v . s + div v)
      // yields J_v^T s + grad(div v) row by row.
      Var obj = ad::sum_all(ad::mul(v.val, tape.constant(sc)));
      if (!v.tan.absent()) obj = ad::add(obj, ad::sum_all(ad::block_contract(v.tan, dim_, Mat::Identity(dim_, dim_))));
      tape.backward(obj);
      VectorXd ds(2 * n * dim_);
      ds.head(n * dim_) = flatten(v.val.value());
      ds.tail(n * dim_) = -flatten(tape.grad(zl));
      return ds;
    };
  }

  NodeSpec spec_;
  ad::Mlp net_;
  ad::Mlp skip_;
};

}  // namespace scvm::flow
