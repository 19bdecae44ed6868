// SPDX-License-Identifier: Apache-2.0
//
// mult: dataset generation, training, evaluation, attention export, gradient
// checks and ablation sweeps.
//
// Exit codes: 0 success, 1 verification or training failure, 2 usage error.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "mult/checkpoint.hpp"
#include "mult/config.hpp"
#include "mult/ctc.hpp"
#include "mult/data.hpp"
#include "mult/error.hpp"
#include "mult/gradcheck.hpp"
#include "mult/metrics.hpp"
#include "mult/train.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;

namespace {

constexpr int kOk = 0;
constexpr int kFailure = 1;
constexpr int kUsage = 2;

/// Reported as a usage error (exit 2).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

ordered_json metrics_json(const mult::MetricReport& r) {
  ordered_json j = ordered_json::object();
  for (const auto& [name, value] : r.entries()) j[name] = value;
  return j;
}

ordered_json echo_json(const mult::KeyValueList& kvs) {
  ordered_json j = ordered_json::object();
  for (const auto& kv : kvs) j[kv.key] = kv.value;
  return j;
}

void write_json(const ordered_json& j, const fs::path& path) {
  std::ofstream f(path, std::ios::trunc);
  if (!f) throw mult::InputError("cannot open '" + path.string() + "' for writing");
  f << j.dump(2) << "\n";
}

mult::RunConfig load_config_or_default(const std::string& path) {
  if (path.empty()) return mult::RunConfig{};
  return mult::load_run_config(path);
}

void check_schema(const mult::MulTConfig& cfg, const mult::Dataset& data) {
  for (mult::Modality m : mult::kModalities) {
    if (cfg.input_dim(m) != data.dims[mult::index_of(m)]) {
      throw UsageError("schema mismatch: config input_dim_" + mult::modality_name(m) + " = " +
                       std::to_string(cfg.input_dim(m)) + " but the dataset has dim " +
                       std::to_string(data.dims[mult::index_of(m)]));
    }
  }
  if (cfg.task != data.label_kind) throw UsageError("schema mismatch: config task differs from the dataset labels");
}

std::size_t max_language_length(const mult::Dataset& data) {
  std::size_t t = 0;
  for (const auto& s : data.samples) t = std::max(t, s.x.length(mult::Modality::L));
  return t;
}

// ---------------------------------------------------------------------------

struct GenArgs {
  std::string spec = "crossmodal_conjunction";
  std::string config;
  std::size_t n = 0;
  std::string out;
  std::optional<std::uint64_t> seed;
};

int cmd_gen(const GenArgs& a) {
  mult::SyntheticTaskSpec spec;
  if (!a.config.empty()) spec = mult::load_run_config(a.config).data;
  if (fs::is_regular_file(a.spec)) {
    spec = mult::load_run_config(a.spec).data;
  } else {
    spec.dependency = mult::parse_dependency(a.spec);
  }
  if (a.seed) spec.seed = *a.seed;
  const mult::Dataset ds = mult::generate_synthetic(spec, a.n);
  mult::save_dataset(ds, a.out);
  std::printf("wrote %zu samples to %s (class balance %.4f)\n", ds.size(), a.out.c_str(), ds.class_balance());
  return kOk;
}

struct TrainArgs {
  std::string config;
  std::string data;
  std::string out;
  std::string variant;
  std::optional<std::size_t> epochs;
  std::optional<std::uint64_t> seed;
};

struct TrainOutcome {
  mult::TrainResult result;
  mult::MetricReport val;
  double runtime = 0.0;
};

TrainOutcome train_and_write(mult::RunConfig cfg, const mult::Dataset& data, const fs::path& out, bool quiet) {
  if (cfg.model.variant == mult::Variant::CtcEarlyFusion && cfg.model.ctc_max_slots == 0) {
    cfg.model.ctc_max_slots = max_language_length(data);
  }
  check_schema(cfg.model, data);
  fs::create_directories(out);
  const auto t0 = std::chrono::steady_clock::now();
  auto model = mult::make_model(cfg.model, cfg.train.seed);
  auto [tr, val] = mult::split_dataset(data, 1.0 - cfg.train.val_fraction, cfg.train.seed);
  const mult::Dataset& val_set = val.samples.empty() ? tr : val;
  mult::TrainHooks hooks;
  hooks.stop_after = [&](const mult::EpochRecord& r) {
    if (!quiet) {
      std::printf("epoch %zu  train_loss %.6f  val_loss %.6f  lr %.3g  val_%s %.4f\n", r.epoch, r.train_loss,
                  r.val_loss, r.lr, cfg.model.task == mult::TaskKind::Sentiment ? "acc2" : "acc",
                  r.val_metrics.headline_accuracy());
      std::fflush(stdout);
    }
    return false;
  };
  TrainOutcome o;
  o.result = mult::train(*model, tr, val_set, cfg.train, &hooks);
  o.val = mult::evaluate(*model, val_set, cfg.train.zero_labels);
  o.runtime = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

  mult::write_history_csv(o.result.history, cfg.model.task, (out / "history.csv").string());
  mult::save_checkpoint(*model, cfg.train.seed, (out / "best.ckpt").string());
  ordered_json report;
  report["metrics"] = metrics_json(o.val);
  report["config_echo"] = echo_json(mult::to_key_values(cfg));
  report["runtime_sec"] = o.runtime;
  report["best_epoch"] = o.result.best_epoch;
  report["best_val_loss"] = o.result.best_val_loss;
  report["train_samples"] = tr.size();
  report["val_samples"] = val_set.size();
  write_json(report, out / "report.json");
  return o;
}

int cmd_train(const TrainArgs& a) {
  mult::RunConfig cfg = load_config_or_default(a.config);
  if (!a.variant.empty()) mult::parse_variant(a.variant, cfg.model);
  if (a.epochs) cfg.train.epochs = *a.epochs;
  if (a.seed) cfg.train.seed = *a.seed;
  cfg.validate();
  const mult::Dataset data = mult::load_dataset(a.data);
  const TrainOutcome o = train_and_write(cfg, data, a.out, false);
  std::printf("%s\n", metrics_json(o.val).dump().c_str());
  return kOk;
}

struct EvalArgs {
  std::string ckpt;
  std::string data;
  std::string out;
  std::string zero_labels = "exclude";
};

int cmd_eval(const EvalArgs& a) {
  auto loaded = mult::load_checkpoint(a.ckpt);
  const mult::Dataset data = mult::load_dataset(a.data);
  check_schema(loaded.model->config(), data);
  const auto t0 = std::chrono::steady_clock::now();
  const auto zero = a.zero_labels == "negative" ? mult::ZeroLabelPolicy::AsNegative : mult::ZeroLabelPolicy::Exclude;
  const mult::MetricReport report = mult::evaluate(*loaded.model, data, zero);
  ordered_json j;
  j["metrics"] = metrics_json(report);
  j["config_echo"] = echo_json(mult::model_key_values(loaded.model->config()));
  j["runtime_sec"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  if (!a.out.empty()) write_json(j, a.out);
  std::printf("%s\n", j["metrics"].dump().c_str());
  return kOk;
}

struct AttnArgs {
  std::string ckpt;
  std::string data;
  std::size_t sample = 0;
  std::string direction = "V_to_L";
  int layer = 1;
  std::string out;
};

fs::path head_path(const fs::path& out, std::size_t head) {
  fs::path p = out;
  const std::string stem = p.stem().string();
  const std::string ext = p.has_extension() ? p.extension().string() : ".csv";
  return p.replace_filename(stem + "_head" + std::to_string(head) + ext);
}

int cmd_attn(const AttnArgs& a) {
  auto loaded = mult::load_checkpoint(a.ckpt);
  const mult::MulTConfig& cfg = loaded.model->config();
  const mult::Dataset data = mult::load_dataset(a.data);
  check_schema(cfg, data);
  if (a.sample >= data.size()) {
    throw UsageError("sample " + std::to_string(a.sample) + " out of range [0, " + std::to_string(data.size()) + ")");
  }
  std::pair<mult::Modality, mult::Modality> dir;
  try {
    dir = mult::parse_direction(a.direction);
  } catch (const mult::ConfigError& e) {
    throw UsageError(e.what());
  }
  const int depth = static_cast<int>(cfg.layers);
  if (a.layer < 1 || a.layer > depth) {
    throw UsageError("layer " + std::to_string(a.layer) + " out of range; valid layers are 1.." +
                     std::to_string(depth));
  }
  mult::Tape tape(false);
  mult::ForwardOptions opts;
  opts.capture_attention = true;
  const mult::ForwardResult r = loaded.model->forward(tape, data.samples[a.sample].x, opts);
  const std::string src = mult::modality_name(dir.first), tgt = mult::modality_name(dir.second);
  std::size_t written = 0;
  for (const auto& m : r.attention) {
    if (m.source != src || m.target != tgt || m.layer != a.layer) continue;
    mult::check_row_stochastic(m.scores, 1e-6, "attention export");
    const fs::path path = head_path(a.out, static_cast<std::size_t>(m.head));
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw mult::InputError("cannot open '" + path.string() + "' for writing");
    f << tgt << "\\" << src;
    for (std::size_t j = 0; j < m.scores.cols(); ++j) f << "," << j;
    f << "\n";
    char buf[40];
    for (std::size_t i = 0; i < m.scores.rows(); ++i) {
      f << i;
      for (std::size_t j = 0; j < m.scores.cols(); ++j) {
        std::snprintf(buf, sizeof buf, "%.17g", m.scores.at(i, j));
        f << "," << buf;
      }
      f << "\n";
    }
    std::printf("wrote %s (%zu x %zu)\n", path.string().c_str(), m.scores.rows(), m.scores.cols());
    ++written;
  }
  if (written == 0) {
    throw UsageError("model variant " + mult::variant_name(cfg.variant, cfg.variant_modality) +
                     " has no crossmodal transformer " + a.direction);
  }
  return kOk;
}

struct GradArgs {
  std::string config;
  double eps = 1e-5;
  double threshold = 1e-4;
  std::uint64_t seed = 11;
  std::string inject_fault;
};

int cmd_gradcheck(const GradArgs& a) {
  if (!a.config.empty()) (void)mult::load_run_config(a.config);
  mult::GradCheckOptions opts;
  opts.eps = a.eps;
  opts.threshold = a.threshold;
  opts.seed = a.seed;
  opts.inject_fault = a.inject_fault;
  const mult::GradCheckReport report = mult::run_gradcheck_suite(opts);
  std::printf("%-24s %-14s %-10s %s\n", "component", "max_rel_error", "coords", "status");
  for (const auto& e : report.entries) {
    std::printf("%-24s %-14.3e %-10zu %s\n", e.component.c_str(), e.max_rel_error, e.coordinates,
                e.pass ? "ok" : ("FAIL at " + e.worst).c_str());
  }
  if (!report.all_pass()) {
    std::string names;
    for (const auto& n : report.failures()) names += (names.empty() ? "" : ", ") + n;
    std::fprintf(stderr, "gradient check failed (threshold %.1e): %s\n", report.threshold, names.c_str());
    return kFailure;
  }
  return kOk;
}

struct InitArgs {
  std::string config;
  std::string data;
  std::string out;
  bool zero = false;
  std::optional<std::uint64_t> seed;
};

int cmd_init(const InitArgs& a) {
  mult::RunConfig cfg = load_config_or_default(a.config);
  if (a.seed) cfg.train.seed = *a.seed;
  if (!a.data.empty()) {
    const mult::Dataset data = mult::load_dataset(a.data);
    check_schema(cfg.model, data);
    if (cfg.model.variant == mult::Variant::CtcEarlyFusion && cfg.model.ctc_max_slots == 0) {
      cfg.model.ctc_max_slots = max_language_length(data);
    }
  }
  auto model = mult::make_model(cfg.model, cfg.train.seed);
  if (a.zero) {
    for (mult::Parameter* p : model->parameters()) std::fill(p->tensor.values().begin(), p->tensor.values().end(), 0.0);
  }
  mult::save_checkpoint(*model, cfg.train.seed, a.out);
  std::printf("wrote %s (%zu parameters)\n", a.out.c_str(), mult::parameter_count(model->parameters()));
  return kOk;
}

struct SweepArgs {
  std::string config;
  std::string data;
  std::string out;
  std::vector<std::string> variants{"full", "lf_transformer", "ef_transformer", "unimodal_L", "unimodal_V",
                                    "unimodal_A"};
};

int cmd_sweep(const SweepArgs& a) {
  const mult::RunConfig base = load_config_or_default(a.config);
  const mult::Dataset data = mult::load_dataset(a.data);
  fs::create_directories(a.out);
  std::ofstream csv(fs::path(a.out) / "sweep.csv", std::ios::trunc);
  mult::MetricReport blank;
  blank.kind = base.model.task;
  csv << "variant,best_epoch,runtime_sec";
  for (const auto& [name, v] : blank.entries()) csv << "," << name;
  csv << "\n";
  for (const auto& v : a.variants) {
    mult::RunConfig cfg = base;
    mult::parse_variant(v, cfg.model);
    cfg.validate();
    const TrainOutcome o = train_and_write(cfg, data, fs::path(a.out) / v, true);
    csv << v << "," << o.result.best_epoch << "," << o.runtime;
    for (const auto& [name, value] : o.val.entries()) csv << "," << mult::format_double(value);
    csv << "\n";
    std::printf("%-22s val %s\n", v.c_str(), metrics_json(o.val).dump().c_str());
    std::fflush(stdout);
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multimodal transformer toolkit"};
  app.require_subcommand(1);

  GenArgs gen;
  auto* g = app.add_subcommand("gen", "Generate a synthetic dataset (MMSEQ1 + JSON manifest)");
  g->add_option("--spec", gen.spec, "Dependency rule (crossmodal_conjunction, unimodal_leak, none) or a config file");
  g->add_option("--config", gen.config, "Config file supplying data_* keys");
  g->add_option("--n", gen.n, "Number of samples")->required()->check(CLI::PositiveNumber);
  g->add_option("--out", gen.out, "Output dataset path")->required();
  g->add_option("--seed", gen.seed, "Override the generator seed");

  TrainArgs tr;
  auto* t = app.add_subcommand("train", "Train a model; writes history.csv, best.ckpt, report.json");
  t->add_option("--config", tr.config, "Config file");
  t->add_option("--data", tr.data, "Dataset path")->required();
  t->add_option("--out", tr.out, "Output directory")->required();
  t->add_option("--variant", tr.variant, "Override the model variant");
  t->add_option("--epochs", tr.epochs, "Override the epoch count");
  t->add_option("--seed", tr.seed, "Override the training seed");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
  e->add_option("--ckpt", ev.ckpt, "Checkpoint")->required();
  e->add_option("--data", ev.data, "Dataset path")->required();
  e->add_option("--out", ev.out, "Optional report.json path");
  e->add_option("--zero-labels", ev.zero_labels, "exclude or negative")
      ->check(CLI::IsMember({"exclude", "negative"}));

  AttnArgs at;
  auto* an = app.add_subcommand("attn", "Export crossmodal attention matrices as per-head CSV files");
  an->add_option("--ckpt", at.ckpt, "Checkpoint")->required();
  an->add_option("--data", at.data, "Dataset path")->required();
  an->add_option("--sample", at.sample, "Sample index")->required();
  an->add_option("--direction", at.direction, "Direction such as V_to_L");
  an->add_option("--layer", at.layer, "Block index, 1-based");
  an->add_option("--out", at.out, "Output CSV path; one file per head (<stem>_headN.csv)")->required();

  GradArgs ga;
  auto* gc = app.add_subcommand("gradcheck", "Finite-difference gradient checks for every layer type");
  gc->add_option("--config", ga.config, "Config file (validated)");
  gc->add_option("--eps", ga.eps, "Central-difference step");
  gc->add_option("--threshold", ga.threshold, "Maximum relative error");
  gc->add_option("--seed", ga.seed, "Seed for the random cases");
  gc->add_option("--inject-fault", ga.inject_fault, "Corrupt one component's backward")->group("");

  InitArgs in;
  auto* ini = app.add_subcommand("init", "Write a freshly initialised (or zeroed) checkpoint");
  ini->add_option("--config", in.config, "Config file");
  ini->add_option("--data", in.data, "Dataset whose schema the model must match");
  ini->add_option("--out", in.out, "Checkpoint path")->required();
  ini->add_flag("--zero", in.zero, "Set every parameter to zero");
  ini->add_option("--seed", in.seed, "Override the initialisation seed");

  SweepArgs sw;
  auto* s = app.add_subcommand("sweep", "Train several variants on one dataset; writes sweep.csv");
  s->add_option("--config", sw.config, "Config file");
  s->add_option("--data", sw.data, "Dataset path")->required();
  s->add_option("--out", sw.out, "Output directory")->required();
  s->add_option("--variants", sw.variants, "Variants to train")->delimiter(',');

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& err) {
    const int code = app.exit(err);
    return code == 0 ? kOk : kUsage;
  }

  try {
    if (*g) return cmd_gen(gen);
    if (*t) return cmd_train(tr);
    if (*e) return cmd_eval(ev);
    if (*an) return cmd_attn(at);
    if (*gc) return cmd_gradcheck(ga);
    if (*ini) return cmd_init(in);
    if (*s) return cmd_sweep(sw);
  } catch (const UsageError& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kUsage;
  } catch (const mult::ConfigError& err) {
    std::fprintf(stderr, "config error: %s\n", err.what());
    return kUsage;
  } catch (const std::exception& err) {
    std::fprintf(stderr, "error: %s\n", err.what());
    return kFailure;
  }
  return kUsage;
}
