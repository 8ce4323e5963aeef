#pragma once

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "scvm/flowmodel.hpp"

namespace scvm::flow {

struct TipfSpec {
  std::vector<int> hidden_sizes{64, 128, 128};
  ad::Activation activation = ad::Activation::Silu;
  bool use_layer_norm = false;
  int time_embed_dim = 64;
  int time_hidden = 64;
  double time_scale = 1.0;
  double scale_bound = 4.0;  // s = bound * tanh(raw / bound)
};

namespace detail {

// Attaches a time-derivative direction to a point type. For Var the result is
// Dual<Var>; for a Dual<Var> carrying k spatial directions the time direction
// goes innermost, giving Dual<Dual<Var>> with inner k = 1.
template <class T>
struct TimeLift;

template <>
struct TimeLift<Var> {
  using Type = Dual<Var>;
  static Type point(const Var& z) { return ad::lift(z); }
  static Type time(const Var& t, Tape& tape) { return {t, tape.constant(Mat::Ones(t.rows(), 1)), 1}; }
  static Var extract(const Type& out, Tape& tape) {
    return out.tan.absent() ? tape.constant(Mat::Zero(out.rows(), out.cols())) : out.tan;
  }
};

template <>
struct TimeLift<Dual<Var>> {
  using Type = Dual<Dual<Var>>;
  static Type point(const Dual<Var>& z) {
    return {ad::lift(z.val), z.tan.absent() ? Dual<Var>{} : ad::lift(z.tan), z.k};
  }
  static Type time(const Dual<Var>& t, Tape& tape) {
    return {Dual<Var>{t.val, tape.constant(Mat::Ones(t.rows(), 1)), 1}, Dual<Var>{}, t.k};
  }
  static Dual<Var> extract(const Type& out, Tape& tape) {
    Var val = out.val.tan.absent() ? tape.constant(Mat::Zero(out.rows(), out.cols())) : out.val.tan;
    Var tan = (out.tan.absent() || out.tan.tan.absent()) ? Var{} : out.tan.tan;
    return {val, tan, out.k};
  }
};

}  // namespace detail

// Time-conditioned invertible flow built from 2*dim affine coupling layers.
// Layer k rescales and shifts coordinate k mod dim:
//   y_i = x_i * exp(s(t, x_{-i})) + r(t, x_{-i}).
class TipfModel : public FlowModel {
 public:
  TipfModel(int dim, std::shared_ptr<const InitialMeasure> base, TipfSpec spec = {})
      : FlowModel(dim, std::move(base)), spec_(std::move(spec)) {
    const ad::MlpSpec net{.input_dim = dim - 1,
                          .hidden_sizes = spec_.hidden_sizes,
                          .output_dim = 1,
                          .activation = spec_.activation,
                          .use_layer_norm = spec_.use_layer_norm,
                          .time_embed_dim = spec_.time_embed_dim,
                          .time_hidden = spec_.time_hidden,
                          .time_scale = spec_.time_scale};
    if (dim == 1 && spec_.time_embed_dim == 0) throw ShapeError("tipf: a 1D flow needs a time input");
    if (!(spec_.scale_bound > 0)) throw ArgumentError("tipf: scale_bound must be positive");
    for (int k = 0; k < 2 * dim; ++k) {
      const std::string p = "layer" + std::to_string(k) + ".";
      layers_.push_back({k % dim, ad::Mlp(net, params_, p + "s."), ad::Mlp(net, params_, p + "r.")});
    }
  }

  std::string kind() const override { return "tipf"; }
  std::string describe() const override {
    std::ostringstream os;
    os << "tipf(dim=" << dim_ << ", layers=" << layers_.size() << ", conditioner=" << layers_[0].s.spec().describe()
       << ", scale_bound=" << spec_.scale_bound << ", base=" << base_->describe() << ")";
    return os.str();
  }
  bool exact_density() const override { return true; }
  bool exact_inverse() const override { return true; }
  bool has_score() const override { return true; }
  std::unique_ptr<FlowModel> clone() const override { return std::make_unique<TipfModel>(*this); }
  const TipfSpec& spec() const { return spec_; }
  int num_layers() const { return static_cast<int>(layers_.size()); }

  // Hidden layers get LeCun-normal weights; conditioner output layers start at
  // zero so the initial flow is the identity at every t.
  void initialize(Stream& rng) override {
    for (std::size_t k = 0; k < layers_.size(); ++k) {
      Stream ls = rng.split("tipf.layer", k);
      layers_[k].s.init(params_, ls, 0.0);
      layers_[k].r.init(params_, ls, 0.0);
    }
  }

  template <class T>
  struct Pass {
    T y;
    T log_det;  // R x 1; absent when every layer is skipped
  };

  template <class T>
  Pass<T> forward(const BoundParams& p, const ad::TimeInput<T>& time, const T& x) const {
    Pass<T> out{x, T{}};
    for (const auto& layer : layers_) {
      const auto [s, r] = conditioner(layer, p, time, out.y);
      const T yi = ad::add(ad::mul(ad::slice_cols(out.y, layer.coord, 1), ad::exp(s)), r);
      out.y = replace_col(out.y, layer.coord, yi);
      out.log_det = ad::opt_add(out.log_det, s);
    }
    return out;
  }

  template <class T>
  Pass<T> inverse(const BoundParams& p, const ad::TimeInput<T>& time, const T& y) const {
    Pass<T> out{y, T{}};
    for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) {
      const auto [s, r] = conditioner(*it, p, time, out.y);
      const T xi = ad::mul(ad::sub(ad::slice_cols(out.y, it->coord, 1), r), ad::exp(ad::neg(s)));
      out.y = replace_col(out.y, it->coord, xi);
      out.log_det = ad::opt_add(out.log_det, ad::neg(s));
    }
    return out;
  }

  Mat flow_map(const TimeGrid& g, const Mat& x) const override {
    check_batch(g, x);
    Tape tape;
    const BoundParams p = ad::bind(tape, params_, false);
    return forward<Var>(p, time_input(tape, g), tape.constant(x)).y.value();
  }

  InverseResult inverse_map(const TimeGrid& g, const Mat& y) const override {
    check_batch(g, y);
    Tape tape;
    const BoundParams p = ad::bind(tape, params_, false);
    const Pass<Var> r = inverse<Var>(p, time_input(tape, g), tape.constant(y));
    return {r.y.value(), r.log_det.value().col(0)};
  }

  VectorXd log_density(const TimeGrid& g, const Mat& x) const override {
    const InverseResult r = inverse_map(g, x);
    return base_->log_density(r.point) + r.log_det;
  }

  // Gradient of log_density through the inverse map. The base log-density
  // enters through a linear surrogate with the same gradient.
  Mat score(const TimeGrid& g, const Mat& x) const override {
    check_batch(g, x);
    Tape tape;
    const BoundParams p = ad::bind(tape, params_, false);
    const Var xv = tape.leaf(x, true);
    const Pass<Var> r = inverse<Var>(p, time_input(tape, g), xv);
    const Var base_term = ad::sum_all(ad::mul(r.y, tape.constant(base_->score(r.y.value()))));
    tape.backward(ad::add(base_term, ad::sum_all(r.log_det)));
    return tape.grad(xv);
  }

  Mat velocity(const TimeGrid& g, const Mat& x) const override {
    check_batch(g, x);
    Tape tape;
    const BoundParams p = ad::bind(tape, params_, false);
    return velocity_tape(tape, p, g, tape.constant(x)).value();
  }

  // v_t(y) = d/dt Phi_t(z) at z = Phi_t^{-1}(y), held fixed.
  Var velocity_tape(Tape& tape, const BoundParams& p, const TimeGrid& g, const Var& y) const override {
    return velocity_generic<Var>(tape, p, time_input(tape, g), y);
  }

  Dual<Var> velocity_tape(Tape& tape, const BoundParams& p, const TimeGrid& g, const Dual<Var>& y) const override {
    return velocity_generic<Dual<Var>>(tape, p, time_input(tape, g, y.k), y);
  }

  // Mean over rows of |Phi_0(x) - x|^2.
  std::optional<Var> init_penalty(Tape& tape, const BoundParams& p, const Var& x0) const override {
    const TimeGrid g = TimeGrid::constant(0.0, x0.rows());
    const Var y = forward<Var>(p, time_input(tape, g), x0).y;
    return ad::scale(ad::sum_all(ad::square(ad::sub(y, x0))), 1.0 / static_cast<double>(x0.rows()));
  }

 private:
  struct Layer {
    int coord;
    ad::Mlp s, r;
  };

  template <class T>
  std::pair<T, T> conditioner(const Layer& layer, const BoundParams& p, const ad::TimeInput<T>& time, const T& y) const {
    std::optional<T> rest;
    if (dim_ > 1) {
      std::vector<T> parts;
      if (layer.coord > 0) parts.push_back(ad::slice_cols(y, 0, layer.coord));
      if (layer.coord < dim_ - 1) parts.push_back(ad::slice_cols(y, layer.coord + 1, dim_ - 1 - layer.coord));
      rest = parts.size() == 1 ? parts[0] : ad::concat_cols(parts);
    }
    const double b = spec_.scale_bound;
    const T s = ad::scale(ad::tanh(ad::scale(layer.s.apply<T>(p, &time, rest), 1.0 / b)), b);
    return {s, layer.r.apply<T>(p, &time, rest)};
  }

  template <class T>
  T replace_col(const T& y, int i, const T& col) const {
    if (dim_ == 1) return col;
    std::vector<T> parts;
    if (i > 0) parts.push_back(ad::slice_cols(y, 0, i));
    parts.push_back(col);
    if (i < dim_ - 1) parts.push_back(ad::slice_cols(y, i + 1, dim_ - 1 - i));
    return ad::concat_cols(parts);
  }

  template <class T>
  T velocity_generic(Tape& tape, const BoundParams& p, const ad::TimeInput<T>& time, const T& y) const {
    using L = detail::TimeLift<T>;
    const T z = inverse<T>(p, time, y).y;
    const ad::TimeInput<typename L::Type> tdual{L::time(time.unique, tape), time.row_of};
    return L::extract(forward<typename L::Type>(p, tdual, L::point(z)).y, tape);
  }

  TipfSpec spec_;
  std::vector<Layer> layers_;
};

}  // namespace scvm::flow
