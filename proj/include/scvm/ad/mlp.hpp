#pragma once

#include <cmath>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "scvm/ad/dual.hpp"
#include "scvm/ad/params.hpp"
#include "scvm/rng.hpp"

namespace scvm::ad {

enum class Activation { Silu, Celu };

inline std::string to_string(Activation a) { return a == Activation::Silu ? "silu" : "celu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "silu") return Activation::Silu;
  if (s == "celu") return Activation::Celu;
  throw ArgumentError("unknown activation '" + s + "' (expected silu or celu)");
}

struct MlpSpec {
  int input_dim = 1;
  std::vector<int> hidden_sizes{64};  // empty: a single affine layer
  int output_dim = 1;
  Activation activation = Activation::Silu;
  bool use_layer_norm = false;
  int time_embed_dim = 0;  // 0: no time input; otherwise even
  int time_hidden = 64;    // width of the two dense layers after the embedding
  double time_scale = 1.0;  // embedding frequencies are 2^k / time_scale

  void validate() const {
    if (input_dim < 0 || output_dim <= 0) throw ShapeError("mlp: dimensions must be positive");
    if (input_dim == 0 && time_embed_dim == 0) throw ShapeError("mlp: needs a spatial or a time input");
    for (int h : hidden_sizes)
      if (h <= 0) throw ShapeError("mlp: hidden sizes must be positive");
    if (time_embed_dim < 0 || time_embed_dim % 2 != 0) throw ShapeError("mlp: time_embed_dim must be even");
    if (time_embed_dim > 0 && time_hidden <= 0) throw ShapeError("mlp: time_hidden must be positive");
    if (time_embed_dim > 0 && hidden_sizes.empty()) throw ShapeError("mlp: a time input requires a hidden layer");
    if (!(time_scale > 0)) throw ShapeError("mlp: time_scale must be positive");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "mlp(in=" << input_dim << ", hidden=[";
    for (std::size_t i = 0; i < hidden_sizes.size(); ++i) os << (i ? "," : "") << hidden_sizes[i];
    os << "], out=" << output_dim << ", act=" << to_string(activation) << ", layer_norm=" << use_layer_norm
       << ", time_embed=" << time_embed_dim << ", time_hidden=" << time_hidden;
    if (time_scale != 1.0) os << ", time_scale=" << time_scale;
    os << ")";
    return os.str();
  }
};

// Per-row times, possibly deduplicated: row r of the batch uses unique[row_of[r]].
// An empty row_of means one time per row.
template <class T>
struct TimeInput {
  T unique;
  std::vector<Index> row_of;
};

inline TimeInput<Var> single_time(Tape& tape, double t, Index rows) {
  return {tape.constant(Mat::Constant(1, 1, t)), std::vector<Index>(static_cast<std::size_t>(rows), 0)};
}

inline TimeInput<Var> per_row_times(Tape& tape, const Eigen::VectorXd& t) { return {tape.constant(Mat(t)), {}}; }

// Fully connected network with optional sinusoidal time input. The time t is
// embedded as (sin(w_k t), cos(w_k t)), w_k = 2^k / time_scale for
// k < time_embed_dim/2. The features repeat with period 2 pi time_scale, so
// time_scale must be large enough for the horizon. They are then passed
// through two dense+activation layers and fed to the first hidden layer
// alongside x. Hidden layers compute act(norm(W h + b)).
class Mlp {
 public:
  Mlp() = default;

  Mlp(MlpSpec spec, ParamStore& store, const std::string& prefix) : spec_(std::move(spec)), first_(store.layout().size()) {
    spec_.validate();
    const auto& s = spec_;
    if (s.time_embed_dim > 0) {
      t0_w_ = store.add(prefix + "time.fc0.w", s.time_embed_dim, s.time_hidden);
      t0_b_ = store.add(prefix + "time.fc0.b", 1, s.time_hidden);
      t1_w_ = store.add(prefix + "time.fc1.w", s.time_hidden, s.time_hidden);
      t1_b_ = store.add(prefix + "time.fc1.b", 1, s.time_hidden);
    }
    int in = s.input_dim;
    for (std::size_t l = 0; l < s.hidden_sizes.size(); ++l) {
      const int h = s.hidden_sizes[l];
      Layer layer;
      const std::string p = prefix + "fc" + std::to_string(l) + ".";
      if (in > 0) layer.w = store.add(p + "w", in, h);
      if (l == 0 && s.time_embed_dim > 0) layer.wt = store.add(p + "wt", s.time_hidden, h);
      layer.b = store.add(p + "b", 1, h);
      if (s.use_layer_norm) {
        layer.ln_scale = store.add(prefix + "ln" + std::to_string(l) + ".scale", 1, h);
        layer.ln_offset = store.add(prefix + "ln" + std::to_string(l) + ".offset", 1, h);
      }
      layer.fan_in = in + ((l == 0 && s.time_embed_dim > 0) ? s.time_hidden : 0);
      layers_.push_back(layer);
      in = h;
    }
    Layer out;
    out.w = store.add(prefix + "out.w", in, s.output_dim);
    out.b = store.add(prefix + "out.b", 1, s.output_dim);
    out.fan_in = in;
    out_ = out;
    for (std::size_t i = first_; i < store.layout().size(); ++i)
      expected_.push_back({i, store.layout()[i].rows, store.layout()[i].cols});
  }

  const MlpSpec& spec() const { return spec_; }

  // Throws ShapeError unless `store` holds every block this network registered, with the right shapes.
  void check(const ParamStore& store) const {
    for (const auto& [idx, rows, cols] : expected_) {
      if (idx >= store.layout().size() || store.layout()[idx].rows != rows || store.layout()[idx].cols != cols)
        throw ShapeError("mlp: parameter store does not match " + spec_.describe());
    }
  }

  // LeCun-normal weights, zero biases, unit layer-norm scales. The output
  // layer weights are multiplied by output_scale (0 gives a zero network).
  void init(ParamStore& store, Stream& rng, double output_scale = 1.0) const {
    auto fill = [&](std::optional<std::size_t> idx, double std_dev) {
      if (!idx) return;
      auto v = store.view(*idx);
      for (Index c = 0; c < v.cols(); ++c)
        for (Index r = 0; r < v.rows(); ++r) v(r, c) = std_dev * rng.normal();
    };
    auto zero = [&](std::optional<std::size_t> idx) {
      if (idx) store.view(*idx).setZero();
    };
    if (t0_w_) {
      fill(t0_w_, 1.0 / std::sqrt(static_cast<double>(spec_.time_embed_dim)));
      zero(t0_b_);
      fill(t1_w_, 1.0 / std::sqrt(static_cast<double>(spec_.time_hidden)));
      zero(t1_b_);
    }
    for (const auto& l : layers_) {
      const double sd = 1.0 / std::sqrt(static_cast<double>(l.fan_in));
      fill(l.w, sd);
      fill(l.wt, sd);
      zero(l.b);
      if (l.ln_scale) store.view(*l.ln_scale).setOnes();
      zero(l.ln_offset);
    }
    fill(out_.w, output_scale / std::sqrt(static_cast<double>(out_.fan_in)));
    zero(out_.b);
  }

  // Batched evaluation. `x` is R x input_dim (absent iff input_dim == 0);
  // `time` must be supplied iff the spec has a time input.
  template <class T>
  T apply(const BoundParams& p, const TimeInput<T>* time, const std::optional<T>& x) const {
    const auto& s = spec_;
    if (s.input_dim > 0 && (!x || x->cols() != s.input_dim))
      throw ShapeError("mlp: expected input with " + std::to_string(s.input_dim) + " columns");
    if ((s.time_embed_dim > 0) != (time != nullptr)) throw ShapeError("mlp: time input presence does not match spec");

    std::optional<T> time_features;
    if (time) time_features = embed_time(p, *time);

    std::optional<T> h = (s.input_dim > 0) ? x : std::nullopt;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
      const Layer& layer = layers_[l];
      std::optional<T> z;
      if (h) z = matmul(*h, p[*layer.w]);
      if (l == 0 && time_features) {
        T zt = matmul(*time_features, p[*layer.wt]);
        if (!time->row_of.empty()) zt = gather_rows(zt, time->row_of);
        z = z ? add(*z, zt) : zt;
      }
      T a = add_row(*z, p[layer.b]);
      if (layer.ln_scale) a = layer_norm(a, p[*layer.ln_scale], p[*layer.ln_offset]);
      h = activate(a);
    }
    return add_row(matmul(*h, p[*out_.w]), p[out_.b]);
  }

 private:
  struct Layer {
    std::optional<std::size_t> w, wt;
    std::size_t b = 0;
    std::optional<std::size_t> ln_scale, ln_offset;
    int fan_in = 0;
  };

  template <class T>
  T activate(const T& a) const {
    return spec_.activation == Activation::Silu ? silu(a) : celu(a);
  }

  template <class T>
  T embed_time(const BoundParams& p, const TimeInput<T>& time) const {
    const int half = spec_.time_embed_dim / 2;
    Mat freqs(1, half);
    for (int k = 0; k < half; ++k) freqs(0, k) = std::ldexp(1.0, k) / spec_.time_scale;
    Tape* tape = tape_of(time.unique);
    const T angles = matmul(time.unique, tape->constant(freqs));
    const T emb = concat_cols(std::vector<T>{sin(angles), cos(angles)});
    const T h0 = activate(add_row(matmul(emb, p[*t0_w_]), p[*t0_b_]));
    return activate(add_row(matmul(h0, p[*t1_w_]), p[*t1_b_]));
  }

  template <class T>
  static T layer_norm(const T& a, const Var& gain, const Var& offset) {
    const double inv_m = 1.0 / static_cast<double>(a.cols());
    const T mean = scale(row_sum(a), inv_m);
    const T centered = sub(a, bcast_col(mean, a.cols()));
    const T var = scale(row_sum(square(centered)), inv_m);
    const T inv_std = pow(add_scalar(var, 1e-6), -0.5);
    return add_row(mul_row(mul_col(centered, inv_std), gain), offset);
  }

  struct Expected {
    std::size_t idx;
    Index rows, cols;
  };

  MlpSpec spec_;
  std::size_t first_ = 0;
  std::vector<Expected> expected_;
  std::optional<std::size_t> t0_w_, t0_b_, t1_w_, t1_b_;
  std::vector<Layer> layers_;
  Layer out_;
};

// Single-point convenience evaluation on a private tape.
inline Eigen::VectorXd mlp_apply(const Mlp& net, const ParamStore& params, std::optional<double> t, const Eigen::VectorXd& x) {
  const auto& s = net.spec();
  if (x.size() != s.input_dim) throw ShapeError("mlp_apply: input has length " + std::to_string(x.size()) + ", expected " + std::to_string(s.input_dim));
  if (s.time_embed_dim > 0 && !t) throw ShapeError("mlp_apply: network expects a time input");
  net.check(params);
  Tape tape;
  const BoundParams p = bind(tape, params, false);
  std::optional<Var> xv;
  if (s.input_dim > 0) xv = tape.constant(Mat(x.transpose()));
  std::optional<TimeInput<Var>> time;
  if (s.time_embed_dim > 0) time = single_time(tape, *t, 1);
  const Var out = net.apply(p, time ? &*time : nullptr, xv);
  return out.value().row(0).transpose();
}

}  // namespace scvm::ad
