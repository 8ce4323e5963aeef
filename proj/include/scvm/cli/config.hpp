#pragma once

// Flat key = value configuration with dotted sections.
//
//   # comment
//   problem.name = ou
//   train.batch = 256
//
// Resolution order: schema defaults, the preset named by `preset` (if any),
// the config file, then command-line overrides.

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "scvm/error.hpp"

namespace scvm::cli {

struct KeySpec {
  std::string key;
  std::string default_value;
  std::string help;
};

inline const std::vector<KeySpec>& schema() {
  static const std::vector<KeySpec> keys = {
      {"preset", "", "problem preset this config extends"},
      {"seed", "0", "root seed for model init, training and evaluation"},
      {"output.dir", "out", "directory receiving all artifacts"},

      {"problem.name", "", "ou, mog, pme, tdou, birds or obstacles"},
      {"problem.dim", "2", "spatial dimension"},
      {"problem.total_time", "1", "time horizon T"},
      {"problem.seed", "0", "seed for randomly generated problem data"},
      {"problem.beta", "", "ou: target mean (comma list; empty draws one from problem.seed)"},
      {"problem.gamma", "", "ou: target precision, row-major; tdou: diagonal of Gamma"},
      {"problem.components", "10", "mog: number of components"},
      {"problem.half_width", "5", "mog: means are uniform in [-w, w]^d"},
      {"problem.init_variance", "1", "variance of the isotropic Gaussian initial measure"},
      {"problem.m", "2", "pme: exponent"},
      {"problem.t0", "1e-3", "pme: starting time of the Barenblatt profile"},
      {"problem.radius0", "0.25", "pme: support radius at t = 0"},
      {"problem.alpha_rule", "classical", "pme: classical or printed Barenblatt exponent"},
      {"problem.a", "3", "tdou/birds: trap amplitude"},
      {"problem.omega", "1", "tdou/birds: trap frequency"},
      {"problem.sigma2", "0.25", "tdou/birds: D = sigma2 I"},
      {"problem.alpha_amplitude", "2", "birds: alpha_t = amplitude sin(pi omega t)"},
      {"problem.repulsion", "20", "obstacles: repulsion strength"},
      {"problem.kernel_variance", "0.04", "obstacles: variance of the repulsion kernel"},

      {"model.kind", "tipf", "tipf or node"},
      {"model.hidden", "64,128,128", "hidden layer widths"},
      {"model.activation", "silu", "silu or celu"},
      {"model.layer_norm", "false", "layer normalization in hidden layers"},
      {"model.time_embed_dim", "64", "sinusoidal time embedding size (even)"},
      {"model.time_hidden", "64", "width of the time feature layers"},
      {"model.time_scale", "auto", "embedding frequencies are 2^k / time_scale (auto: T / pi)"},
      {"model.scale_bound", "4", "tipf: bound on the log-scale"},
      {"model.skip_rank", "20", "node: rank of the linear skip (0 disables)"},
      {"model.skip_hidden", "64", "node: hidden width of the skip network"},
      {"model.rtol", "1e-4", "node: integrator relative tolerance"},
      {"model.atol", "1e-4", "node: integrator absolute tolerance"},
      {"model.enable_score", "false", "node: enable the augmented-ODE score"},

      {"train.n_train", "20000", "training iterations"},
      {"train.batch", "256", "base samples per step (B)"},
      {"train.n_times", "10", "stratified times per step (L)"},
      {"train.lr_init", "1e-3", "initial learning rate"},
      {"train.lr_final_fraction", "0.01", "final / initial learning rate"},
      {"train.adam_b1", "0.9", "Adam first-moment decay"},
      {"train.adam_b2", "0.9", "Adam second-moment decay"},
      {"train.loss", "auto", "direct, ibp or auto"},
      {"train.init_penalty_weight", "1", "weight of the initial-condition penalty"},
      {"train.grad_clip", "10", "global gradient norm clip (<= 0 disables)"},
      {"train.n_mean", "1024", "samples for E[mu_t]"},
      {"train.eval_every", "1000", "iterations between training-curve rows"},
      {"train.checkpoint_every", "0", "iterations between checkpoints (0: final only)"},
      {"train.sc_samples", "256", "base samples for the training-curve self-consistency"},

      {"eval.times", "", "evaluation times (comma list; empty: uniform grid)"},
      {"eval.n_grid", "11", "points of the uniform grid on [0, T]"},
      {"eval.metrics", "", "comma list; empty: problem default"},
      {"eval.n", "10000", "samples per divergence / BW estimate"},
      {"eval.repeats", "1", "independent repeats per metric"},
      {"eval.w2_n", "1024", "samples per empirical W2 (<= 1024)"},
      {"eval.w2_coupling", "shared", "shared or independent base draws for W2 against Gaussian references"},
      {"eval.tv_n", "50000", "uniform points for TV"},
      {"eval.sc_samples", "1024", "samples per self-consistency estimate"},
      {"eval.dump_samples", "0", "model samples per time written to samples.csv"},

      {"baseline.n", "1024", "particles"},
      {"baseline.dt", "0", "Euler-Maruyama step (0: problem default)"},

      {"bias.batch", "256", "base samples"},
      {"bias.n_times", "10", "stratified times"},
      {"bias.fd_step", "1e-5", "relative central-difference step"},
  };
  return keys;
}

inline bool known_key(const std::string& key) {
  const auto& s = schema();
  return std::any_of(s.begin(), s.end(), [&](const KeySpec& k) { return k.key == key; });
}

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  if (trim(s).empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(trim(item));
  return out;
}

class Config {
 public:
  using Map = std::map<std::string, std::string>;

  Config() {
    for (const auto& k : schema()) values_[k.key] = k.default_value;
  }

  void set(const std::string& key, const std::string& value, const std::string& origin) {
    if (!known_key(key)) throw ConfigError(origin + ": unknown key '" + key + "'");
    values_[key] = value;
  }

  // "key=value" from the command line.
  void set_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not of the form key=value");
    set(trim(kv.substr(0, eq)), trim(kv.substr(eq + 1)), "command line");
  }

  static Map parse(std::istream& in, const std::string& origin) {
    Map out;
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      const auto hash = line.find('#');
      if (hash != std::string::npos) line = line.substr(0, hash);
      line = trim(line);
      if (line.empty()) continue;
      const auto eq = line.find('=');
      const std::string where = origin + ":" + std::to_string(lineno);
      if (eq == std::string::npos) throw ConfigError(where + ": expected key = value");
      const std::string key = trim(line.substr(0, eq));
      if (!known_key(key)) throw ConfigError(where + ": unknown key '" + key + "'");
      if (out.count(key)) throw ConfigError(where + ": duplicate key '" + key + "'");
      out[key] = trim(line.substr(eq + 1));
    }
    return out;
  }

  static Map parse_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot read config file '" + path.string() + "'");
    return parse(f, path.string());
  }

  void merge(const Map& m, const std::string& origin) {
    for (const auto& [k, v] : m) set(k, v, origin);
  }

  const std::string& str(const std::string& key) const {
    const auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("unknown key '" + key + "'");
    return it->second;
  }

  long integer(const std::string& key) const {
    const std::string& s = str(key);
    long v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size()) throw ConfigError(key + ": expected an integer, got '" + s + "'");
    return v;
  }

  std::uint64_t unsigned_integer(const std::string& key) const {
    const std::string& s = str(key);
    std::uint64_t v = 0;
    const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
    if (ec != std::errc() || p != s.data() + s.size())
      throw ConfigError(key + ": expected a nonnegative integer, got '" + s + "'");
    return v;
  }

  double real(const std::string& key) const { return parse_real(key, str(key)); }

  bool boolean(const std::string& key) const {
    const std::string& s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw ConfigError(key + ": expected true or false, got '" + s + "'");
  }

  std::vector<double> reals(const std::string& key) const {
    std::vector<double> out;
    for (const auto& item : split_list(str(key))) out.push_back(parse_real(key, item));
    return out;
  }

  std::vector<int> integers(const std::string& key) const {
    std::vector<int> out;
    for (const auto& item : split_list(str(key))) {
      int v = 0;
      const auto [p, ec] = std::from_chars(item.data(), item.data() + item.size(), v);
      if (ec != std::errc() || p != item.data() + item.size())
        throw ConfigError(key + ": expected a list of integers, got '" + str(key) + "'");
      out.push_back(v);
    }
    return out;
  }

  std::string choice(const std::string& key, const std::vector<std::string>& allowed) const {
    const std::string& s = str(key);
    if (std::find(allowed.begin(), allowed.end(), s) != allowed.end()) return s;
    std::string list;
    for (const auto& a : allowed) list += (list.empty() ? "" : ", ") + a;
    throw ConfigError(key + ": '" + s + "' is not one of " + list);
  }

  const Map& values() const { return values_; }

  // Sorted key = value lines; parses back to the same config.
  std::string snapshot() const {
    std::ostringstream os;
    for (const auto& [k, v] : values_) os << k << " = " << v << '\n';
    return os.str();
  }

 private:
  static double parse_real(const std::string& key, const std::string& s) {
    std::istringstream is(s);
    is.imbue(std::locale::classic());
    double v = 0;
    is >> v;
    if (s.empty() || is.fail() || !is.eof()) throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
  }

  Map values_;
};

// Directory holding <name>.conf presets.
inline std::filesystem::path preset_dir() {
  if (const char* env = std::getenv("SCVM_PRESET_DIR")) return env;
#ifdef SCVM_PRESET_DIR
  return SCVM_PRESET_DIR;
#else
  return "presets";
#endif
}

inline std::vector<std::string> preset_names(const std::filesystem::path& dir = preset_dir()) {
  std::vector<std::string> out;
  std::error_code ec;
  for (const auto& e : std::filesystem::directory_iterator(dir, ec))
    if (e.path().extension() == ".conf") out.push_back(e.path().stem().string());
  std::sort(out.begin(), out.end());
  return out;
}

// Builds a config from an optional preset name, an optional file and overrides.
inline Config resolve_config(const std::string& preset, const std::string& file, const std::vector<std::string>& overrides,
                             const std::filesystem::path& presets = preset_dir()) {
  Config cfg;
  Config::Map from_file;
  if (!file.empty()) from_file = Config::parse_file(file);
  Config::Map cli;
  for (const auto& kv : overrides) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + kv + "' is not of the form key=value");
    cli[trim(kv.substr(0, eq))] = trim(kv.substr(eq + 1));
  }
  std::string name = preset;
  if (cli.count("preset")) name = cli["preset"];
  else if (name.empty() && from_file.count("preset")) name = from_file["preset"];
  if (!name.empty()) {
    const auto path = presets / (name + ".conf");
    if (!std::filesystem::exists(path)) {
      std::string list;
      for (const auto& p : preset_names(presets)) list += (list.empty() ? "" : ", ") + p;
      throw ConfigError("unknown preset '" + name + "' (available: " + list + ")");
    }
    auto m = Config::parse_file(path);
    m.erase("preset");
    cfg.merge(m, path.string());
    cfg.set("preset", name, "preset");
  }
  cfg.merge(from_file, file);
  for (const auto& kv : overrides) cfg.set_override(kv);
  return cfg;
}

}  // namespace scvm::cli
