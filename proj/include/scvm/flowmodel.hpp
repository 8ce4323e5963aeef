#pragma once

#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "scvm/ad/grad.hpp"
#include "scvm/ad/mlp.hpp"
#include "scvm/measure.hpp"

namespace scvm::flow {

using ad::BoundParams;
using ad::Dual;
using ad::Index;
using ad::Tape;
using ad::Var;

// Times attached to a batch: row r is evaluated at unique[row_of[r]].
struct TimeGrid {
  VectorXd unique;
  std::vector<Index> row_of;

  Index rows() const { return static_cast<Index>(row_of.size()); }
  double time_of_row(Index r) const { return unique(row_of[static_cast<std::size_t>(r)]); }

  static TimeGrid constant(double t, Index rows) {
    return {VectorXd::Constant(1, t), std::vector<Index>(static_cast<std::size_t>(rows), 0)};
  }

  // times.size() blocks of `per_time` rows, block l at times[l].
  static TimeGrid stacked(const std::vector<double>& times, Index per_time) {
    TimeGrid g;
    g.unique = Eigen::Map<const VectorXd>(times.data(), static_cast<Index>(times.size()));
    for (std::size_t l = 0; l < times.size(); ++l)
      for (Index b = 0; b < per_time; ++b) g.row_of.push_back(static_cast<Index>(l));
    return g;
  }

  // Row indices for each unique time.
  std::vector<std::vector<Index>> groups() const {
    std::vector<std::vector<Index>> out(static_cast<std::size_t>(unique.size()));
    for (Index r = 0; r < rows(); ++r) out[static_cast<std::size_t>(row_of[static_cast<std::size_t>(r)])].push_back(r);
    return out;
  }
};

// Unique times as a tape constant, lifted to T with k tangent directions.
inline ad::TimeInput<Var> time_input(Tape& tape, const TimeGrid& g) { return {tape.constant(Mat(g.unique)), g.row_of}; }

inline ad::TimeInput<Dual<Var>> time_input(Tape& tape, const TimeGrid& g, int k) {
  return {ad::lift(tape.constant(Mat(g.unique)), k), g.row_of};
}

inline Mat select_rows(const Mat& x, const std::vector<Index>& rows) {
  Mat out(static_cast<Index>(rows.size()), x.cols());
  for (std::size_t i = 0; i < rows.size(); ++i) out.row(static_cast<Index>(i)) = x.row(rows[i]);
  return out;
}

struct InverseResult {
  Mat point;
  VectorXd log_det;  // log |det J| of the inverse map
};

// A time-indexed family of maps Phi_t pushing the base measure forward.
// Batched calls take one point per row.
class FlowModel {
 public:
  FlowModel(int dim, std::shared_ptr<const InitialMeasure> base) : dim_(dim), base_(std::move(base)) {
    if (dim_ < 1) throw ShapeError("flow model: dimension must be positive");
    if (!base_ || base_->dim() != dim_) throw ShapeError("flow model: base measure dimension mismatch");
  }
  virtual ~FlowModel() = default;

  virtual std::string kind() const = 0;
  virtual std::string describe() const = 0;
  virtual bool exact_density() const = 0;
  virtual bool exact_inverse() const = 0;
  virtual bool has_score() const = 0;
  virtual std::unique_ptr<FlowModel> clone() const = 0;
  virtual void initialize(Stream& rng) = 0;
  // Models whose score is available only through an opt-in expensive path.
  virtual bool can_enable_score() const { return false; }
  virtual void enable_score(bool) {}

  int dim() const { return dim_; }
  const InitialMeasure& base() const { return *base_; }
  std::shared_ptr<const InitialMeasure> base_ptr() const { return base_; }
  ad::ParamStore& params() { return params_; }
  const ad::ParamStore& params() const { return params_; }

  virtual Mat flow_map(const TimeGrid& g, const Mat& x) const = 0;
  virtual InverseResult inverse_map(const TimeGrid& g, const Mat& y) const = 0;
  virtual Mat velocity(const TimeGrid& g, const Mat& x) const = 0;
  virtual VectorXd log_density(const TimeGrid& g, const Mat& x) const = 0;
  virtual Mat score(const TimeGrid& g, const Mat& x) const = 0;

  // States at each (sorted) time for base points x0.
  virtual std::vector<Mat> flow_map_path(const std::vector<double>& times, const Mat& x0) const {
    std::vector<Mat> out;
    for (double t : times) out.push_back(flow_map(TimeGrid::constant(t, x0.rows()), x0));
    return out;
  }

  std::vector<Mat> sample_path(const std::vector<double>& times, Index n, Stream& rng) const {
    if (n < 1) throw ArgumentError("sample_path: n must be at least 1");
    return flow_map_path(times, base_->sample(n, rng));
  }

  // Divergence of the velocity field at each row.
  VectorXd velocity_divergence(const TimeGrid& g, const Mat& x) const {
    check_batch(g, x);
    Tape tape;
    const BoundParams p = ad::bind(tape, params_, false);
    const Dual<Var> in{tape.constant(x), ad::basis_tangents(tape, x.rows(), dim_), dim_};
    const Dual<Var> v = velocity_tape(tape, p, g, in);
    if (v.tan.absent()) return VectorXd::Zero(x.rows());
    return ad::block_contract(v.tan, dim_, Mat::Identity(dim_, dim_)).value().col(0);
  }

  // Training hooks: the velocity field recorded on a tape with bound parameters.
  virtual Var velocity_tape(Tape& tape, const BoundParams& p, const TimeGrid& g, const Var& x) const = 0;
  virtual Dual<Var> velocity_tape(Tape& tape, const BoundParams& p, const TimeGrid& g, const Dual<Var>& x) const = 0;
  // Penalty enforcing Phi_0 = identity, if the architecture does not guarantee it.
  virtual std::optional<Var> init_penalty(Tape&, const BoundParams&, const Var&) const { return std::nullopt; }

 protected:
  void check_batch(const TimeGrid& g, const Mat& x) const {
    if (x.cols() != dim_) throw ShapeError("flow model: points must have " + std::to_string(dim_) + " columns");
    if (g.rows() != x.rows()) throw ShapeError("flow model: time grid and batch sizes differ");
  }

  int dim_;
  std::shared_ptr<const InitialMeasure> base_;
  ad::ParamStore params_;
};

// ---------------------------------------------------------------------------
// Single-point conveniences.

inline Mat as_row(const VectorXd& x) { return x.transpose(); }

inline VectorXd flow_map(const FlowModel& m, double t, const VectorXd& x) {
  return m.flow_map(TimeGrid::constant(t, 1), as_row(x)).row(0).transpose();
}

inline std::pair<VectorXd, double> inverse_map(const FlowModel& m, double t, const VectorXd& y) {
  const InverseResult r = m.inverse_map(TimeGrid::constant(t, 1), as_row(y));
  return {r.point.row(0).transpose(), r.log_det(0)};
}

inline VectorXd velocity(const FlowModel& m, double t, const VectorXd& x) {
  return m.velocity(TimeGrid::constant(t, 1), as_row(x)).row(0).transpose();
}

inline double log_density(const FlowModel& m, double t, const VectorXd& x) {
  return m.log_density(TimeGrid::constant(t, 1), as_row(x))(0);
}

inline VectorXd score(const FlowModel& m, double t, const VectorXd& x) {
  return m.score(TimeGrid::constant(t, 1), as_row(x)).row(0).transpose();
}

}  // namespace scvm::flow
