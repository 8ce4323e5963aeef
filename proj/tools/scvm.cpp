// scvm: train, evaluate and compare flow models on the bundled problems.
//
// Exit codes: 0 success, 1 configuration error, 2 runtime or numerical error.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "scvm/cli/experiment.hpp"

namespace fs = std::filesystem;
using namespace scvm;
using namespace scvm::cli;

namespace {

constexpr int kOk = 0;
constexpr int kConfigError = 1;
constexpr int kRuntimeError = 2;

struct Args {
  std::string preset;
  std::string checkpoint;
  std::vector<std::string> positional;  // [config file] key=value ...
};

void split_positional(const Args& a, std::string& file, std::vector<std::string>& overrides) {
  for (const auto& s : a.positional) {
    if (s.find('=') != std::string::npos) {
      overrides.push_back(s);
    } else if (file.empty()) {
      file = s;
    } else {
      throw ConfigError("unexpected argument '" + s + "' (only one config file may be given)");
    }
  }
}

Config config_from(const Args& a) {
  std::string file;
  std::vector<std::string> overrides;
  split_positional(a, file, overrides);
  Config c = resolve_config(a.preset, file, overrides);
  if (c.str("problem.name").empty()) throw ConfigError("problem.name is not set (pass a config file or --preset)");
  return c;
}

fs::path output_dir(const Config& c) {
  const fs::path dir = c.str("output.dir");
  fs::create_directories(dir);
  return dir;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  f << text;
}

template <class Fn>
void write_with(const fs::path& path, Fn&& fn) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot write '" + path.string() + "'");
  fn(f);
}

void print_warnings(const metrics::Warnings& w) {
  for (const auto& s : w) std::cerr << "warning: " << s << '\n';
}

// ---------------------------------------------------------------------------

int cmd_train(const Args& a) {
  Config c;
  Problem p;
  std::unique_ptr<flow::FlowModel> model;
  fs::path dir;
  try {
    c = config_from(a);
    p = build_problem(c);
    model = initial_model(c, p);
    train_config(c, p);
    dir = output_dir(c);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  write_text(dir / "train_config.resolved", snapshot_text(c));
  std::cerr << "training " << model->describe() << " on " << p.rhs->name() << " (" << model->params().size()
            << " parameters)\n";

  std::ofstream timing(dir / "timing.csv", std::ios::binary);
  timing << "iteration,wall_seconds\n";
  TrainHooks hooks;
  hooks.checkpoint = [&](long k, const flow::FlowModel& m) {
    write_checkpoint(dir, k == c.integer("train.n_train") ? "checkpoint_final" : "checkpoint_" + std::to_string(k), m, c, k);
  };
  hooks.row = [&](const CurveRow& r) {
    timing << r.iteration << ',' << fmt(r.wall_seconds) << '\n' << std::flush;
    std::cerr << "iter " << r.iteration << "  loss " << r.loss << "  self-consistency " << r.self_consistency << "  lr " << r.lr
              << "  " << r.wall_seconds << " s\n";
  };
  try {
    const auto rows = run_train(c, p, *model, hooks);
    write_with(dir / "training_curve.csv", [&](std::ostream& os) { write_curve_csv(os, rows); });
  } catch (const CapabilityError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    const fs::path snap = dir / "failure.txt";
    write_text(snap, std::string(e.what()) + "\n");
    std::cerr << "training failed: " << e.what() << "\ndiagnostic snapshot: " << snap.string() << '\n';
    return kRuntimeError;
  }
  std::cerr << "wrote " << (dir / "checkpoint_final.params").string() << '\n';
  return kOk;
}

int cmd_eval(const Args& a) {
  LoadedCheckpoint ck;
  std::vector<std::string> overrides;
  fs::path dir;
  try {
    std::string file;
    split_positional(a, file, overrides);
    if (a.checkpoint.empty() && file.empty()) throw ConfigError("eval needs a checkpoint (.params or .json)");
    ck = load_checkpoint(a.checkpoint.empty() ? file : a.checkpoint);
    for (const auto& kv : overrides) {
      const std::string key = trim(kv.substr(0, kv.find('=')));
      if (key.rfind("eval.", 0) != 0 && key.rfind("output.", 0) != 0 && key != "seed")
        throw ConfigError("'" + key + "' cannot be changed when evaluating a checkpoint (only eval.*, output.dir, seed)");
      ck.config.set_override(kv);
    }
    eval_metrics(ck.config, ck.problem);
    eval_times(ck.config, ck.problem);
    dir = output_dir(ck.config);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  write_text(dir / "eval_config.resolved", snapshot_text(ck.config));
  try {
    const EvalResult r = evaluate(ck.config, ck.problem, *ck.model);
    write_with(dir / "metrics.csv", [&](std::ostream& os) { r.report.write_csv(os); });
    write_with(dir / "skipped.csv", [&](std::ostream& os) { write_skipped_csv(os, r.skipped); });
    if (!r.samples.empty()) write_with(dir / "samples.csv", [&](std::ostream& os) { write_samples_csv(os, r.samples); });
    print_warnings(r.warnings);
    for (const auto& s : r.skipped) std::cerr << "skipped " << s.metric << ": " << s.reason << '\n';
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    std::cerr << "evaluation failed: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int cmd_reference(const Args& a) {
  Config c;
  Problem p;
  fs::path dir;
  std::vector<double> times;
  try {
    c = config_from(a);
    p = build_problem(c);
    times = eval_times(c, p);
    if (!p.gaussian && !p.barenblatt)
      throw CapabilityError("unsupported: problem '" + p.name + "' has no closed-form reference path");
    dir = output_dir(c);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  write_text(dir / "reference_config.resolved", snapshot_text(c));
  try {
    write_with(dir / "reference.csv", [&](std::ostream& os) { write_reference_csv(os, p, times); });
  } catch (const Error& e) {
    std::cerr << "reference failed: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int cmd_baseline(const Args& a) {
  Config c;
  Problem p;
  fs::path dir;
  try {
    c = config_from(a);
    p = build_problem(c);
    eval_times(c, p);
    if (!p.rhs->has_decomposition() || p.rhs->drift_needs().score || p.rhs->drift_needs().density)
      throw CapabilityError("unsupported: problem '" + p.name + "' has no particle (Fokker-Planck) form");
    dir = output_dir(c);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  write_text(dir / "baseline_config.resolved", snapshot_text(c));
  try {
    const auto snaps = run_baseline(c, p);
    write_with(dir / "baseline.csv", [&](std::ostream& os) { baseline::write_snapshots_csv(os, snaps); });
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  } catch (const Error& e) {
    std::cerr << "baseline failed: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

int cmd_bias(const Args& a) {
  Config c;
  Problem p;
  std::unique_ptr<flow::FlowModel> model;
  train::BiasConfig bc;
  fs::path dir;
  try {
    if (!a.checkpoint.empty()) {
      LoadedCheckpoint ck = load_checkpoint(a.checkpoint);
      std::string file;
      std::vector<std::string> overrides;
      split_positional(a, file, overrides);
      if (!file.empty()) throw ConfigError("give either --checkpoint or a config file, not both");
      c = ck.config;
      for (const auto& kv : overrides) c.set_override(kv);
      p = std::move(ck.problem);
      model = std::move(ck.model);
    } else {
      c = config_from(a);
      p = build_problem(c);
      model = initial_model(c, p);
    }
    bc = bias_config(c);
    if (!model->exact_density())
      throw CapabilityError("unsupported: the bias diagnostic needs a model with exact density (tipf), got " + model->kind());
    dir = output_dir(c);
  } catch (const Error& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kConfigError;
  }
  write_text(dir / "bias_config.resolved", snapshot_text(c));
  try {
    const auto r = train::bias_diagnostic(*model, *p.rhs, bc);
    write_with(dir / "bias.csv", [&](std::ostream& os) {
      os << "iterative_grad_norm,full_grad_norm,cosine\n"
         << fmt(r.iterative_grad_norm) << ',' << fmt(r.full_grad_norm) << ',' << fmt(r.cosine) << '\n';
    });
  } catch (const Error& e) {
    std::cerr << "bias diagnostic failed: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"Self-consistent velocity matching for Fokker-Planck-type equations"};
  app.require_subcommand(1);
  Args args;

  auto add_common = [&](CLI::App* sub, bool with_preset) {
    if (with_preset) sub->add_option("--preset", args.preset, "problem preset (see presets/)");
    sub->add_option("args", args.positional, "[config file] key=value ...");
  };
  auto* train = app.add_subcommand("train", "train a model and write checkpoints and the training curve");
  add_common(train, true);
  auto* eval = app.add_subcommand("eval", "evaluate a checkpoint: metrics.csv, skipped.csv, samples.csv");
  eval->add_option("--checkpoint", args.checkpoint, "checkpoint .params or .json");
  add_common(eval, false);
  auto* ref = app.add_subcommand("reference", "dump the closed-form reference path");
  add_common(ref, true);
  auto* base = app.add_subcommand("baseline", "Euler-Maruyama particle snapshots");
  add_common(base, true);
  auto* bias = app.add_subcommand("diagnose-bias", "compare the iterative gradient with the full-loss gradient");
  bias->add_option("--checkpoint", args.checkpoint, "checkpoint to diagnose (default: freshly initialized model)");
  add_common(bias, true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfigError;
  }

  try {
    if (*train) return cmd_train(args);
    if (*eval) return cmd_eval(args);
    if (*ref) return cmd_reference(args);
    if (*base) return cmd_baseline(args);
    if (*bias) return cmd_bias(args);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kRuntimeError;
  }
  return kConfigError;
}
