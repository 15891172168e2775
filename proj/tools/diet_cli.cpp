// SPDX-License-Identifier: Apache-2.0
//
// diet: verification, training, benchmarking and visualisation front end.
#include <chrono>
#include <cstdio>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "diet/analysis.hpp"
#include "diet/bench.hpp"
#include "diet/model.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace diet;

namespace {

constexpr int kExitFail = 1;
constexpr int kExitError = 2;
constexpr int kExitDiverged = 3;

struct RunConfig {
  std::string command;
  std::uint64_t seed = 0;
  std::string out = "out";

  // Attention / scheme.
  long n = 32;
  long d = 32;
  long heads = 4;
  long d_h = 0;  // 0: d / heads
  long layers = 2;
  long d_p = 8;
  std::string scheme = "diet-abs";
  std::string sharing = "none";
  long segments = 1;
  std::string segment_location = "none";
  long linformer_k = 0;  // 0: n / 4 for linformer-diet-abs
  long clip = 16;
  bool shaw_value = false;
  long num_buckets = 32;
  long max_distance = 128;

  // verify
  long trials = 1000;
  long equiv_inputs = 100;
  long grad_entries = 16;
  long batches = 5;
  bool inject_grad_fault = false;

  // train / viz / rank-scan
  std::string task = "position-probe";
  long steps = 2000;
  double lr = 1e-3;
  std::string optimizer = "adam";
  long batch_size = 8;
  std::string loss = "ce";
  long vocab = 16;
  long shift = 1;
  double expect_accuracy = -1.0;
  std::string checkpoint;
  std::string color_map = "blue-red";

  // bench
  long reps = 30;
  long warmup = 3;
  long threads = 1;
  bool no_cache = false;
  bool scaling = false;
  bool check = false;
};

json to_json(const RunConfig& c) {
  return {{"command", c.command},
          {"seed", c.seed},
          {"out", c.out},
          {"n", c.n},
          {"d", c.d},
          {"heads", c.heads},
          {"d_h", c.d_h},
          {"layers", c.layers},
          {"d_p", c.d_p},
          {"scheme", c.scheme},
          {"sharing", c.sharing},
          {"segments", c.segments},
          {"segment_location", c.segment_location},
          {"linformer_k", c.linformer_k},
          {"clip", c.clip},
          {"shaw_value", c.shaw_value},
          {"num_buckets", c.num_buckets},
          {"max_distance", c.max_distance},
          {"trials", c.trials},
          {"equiv_inputs", c.equiv_inputs},
          {"grad_entries", c.grad_entries},
          {"batches", c.batches},
          {"inject_grad_fault", c.inject_grad_fault},
          {"task", c.task},
          {"steps", c.steps},
          {"lr", c.lr},
          {"optimizer", c.optimizer},
          {"batch_size", c.batch_size},
          {"loss", c.loss},
          {"vocab", c.vocab},
          {"shift", c.shift},
          {"expect_accuracy", c.expect_accuracy},
          {"checkpoint", c.checkpoint},
          {"color_map", c.color_map},
          {"reps", c.reps},
          {"warmup", c.warmup},
          {"threads", c.threads},
          {"no_cache", c.no_cache},
          {"scaling", c.scaling},
          {"check", c.check}};
}

template <typename T>
void take(const json& j, const char* key, T& value) {
  if (j.contains(key)) value = j.at(key).get<T>();
}

/// Fields present in `j` overwrite `c`; unknown keys are rejected.
void apply_json(const json& j, RunConfig& c) {
  const json known = to_json(c);
  for (const auto& [key, _] : j.items()) {
    if (!known.contains(key)) throw ConfigError("config file: unknown key '" + key + "'");
  }
  take(j, "seed", c.seed);
  take(j, "out", c.out);
  take(j, "n", c.n);
  take(j, "d", c.d);
  take(j, "heads", c.heads);
  take(j, "d_h", c.d_h);
  take(j, "layers", c.layers);
  take(j, "d_p", c.d_p);
  take(j, "scheme", c.scheme);
  take(j, "sharing", c.sharing);
  take(j, "segments", c.segments);
  take(j, "segment_location", c.segment_location);
  take(j, "linformer_k", c.linformer_k);
  take(j, "clip", c.clip);
  take(j, "shaw_value", c.shaw_value);
  take(j, "num_buckets", c.num_buckets);
  take(j, "max_distance", c.max_distance);
  take(j, "trials", c.trials);
  take(j, "equiv_inputs", c.equiv_inputs);
  take(j, "grad_entries", c.grad_entries);
  take(j, "batches", c.batches);
  take(j, "inject_grad_fault", c.inject_grad_fault);
  take(j, "task", c.task);
  take(j, "steps", c.steps);
  take(j, "lr", c.lr);
  take(j, "optimizer", c.optimizer);
  take(j, "batch_size", c.batch_size);
  take(j, "loss", c.loss);
  take(j, "vocab", c.vocab);
  take(j, "shift", c.shift);
  take(j, "expect_accuracy", c.expect_accuracy);
  take(j, "checkpoint", c.checkpoint);
  take(j, "color_map", c.color_map);
  take(j, "reps", c.reps);
  take(j, "warmup", c.warmup);
  take(j, "threads", c.threads);
  take(j, "no_cache", c.no_cache);
  take(j, "scaling", c.scaling);
  take(j, "check", c.check);
}

AttentionConfig attention_config(const RunConfig& c) {
  AttentionConfig a;
  a.n = c.n;
  a.d = c.d;
  a.heads = c.heads;
  a.d_h = c.d_h > 0 ? c.d_h : std::max<long>(1, c.d / std::max<long>(1, c.heads));
  a.layers = c.layers;
  set_variant(a, c.scheme);
  if (auto* abs = std::get_if<scheme::DietAbs>(&a.scheme)) abs->d_p = c.d_p;
  if (auto* shaw = std::get_if<scheme::ShawRel>(&a.scheme)) *shaw = {c.clip, c.shaw_value};
  if (auto* t5 = std::get_if<scheme::T5Bucketed>(&a.scheme)) *t5 = {c.num_buckets, c.max_distance};
  if (c.linformer_k > 0) a.linformer_k = c.linformer_k;
  a.sharing = parse_sharing(c.sharing);
  a.num_segments = c.segments;
  a.segment_location = parse_segment_location(c.segment_location);
  if (a.num_segments > 1 && a.segment_location == SegmentLocation::None) {
    throw ConfigError("--segments above 1 needs --segment-location input or per-head");
  }
  a.validate();
  return a;
}

Task make_task(const RunConfig& c) {
  Task task;
  if (c.task == "position-probe") {
    task = Task::position_probe(c.n);
  } else if (c.task == "selective-copy") {
    task = Task::selective_copy(c.n, c.vocab, c.shift);
  } else {
    throw ConfigError("unknown task '" + c.task + "'");
  }
  task.num_segments = c.segments;
  return task;
}

LossKind loss_kind(const std::string& name) {
  if (name == "ce") return LossKind::CrossEntropy;
  if (name == "mse") return LossKind::MeanSquared;
  throw ConfigError("unknown loss '" + name + "'");
}

ColorMap color_map(const std::string& name) {
  if (name == "blue-red") return ColorMap::BlueRed;
  if (name == "grayscale") return ColorMap::Grayscale;
  throw ConfigError("unknown color map '" + name + "'");
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::trunc | std::ios::binary);
  if (!out) throw IoError("cannot write " + path.string());
  out << text;
  if (!out) throw IoError("write failed for " + path.string());
}

void write_json(const fs::path& path, const json& j) { write_text(path, j.dump(2) + "\n"); }

std::string utc_now() {
  const std::time_t t = std::time(nullptr);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", std::gmtime(&t));
  return buf;
}

/// Deterministic run_config.json; timestamps go to run_meta.json.
class Outputs {
 public:
  explicit Outputs(const RunConfig& c) : dir_(c.out), config_(to_json(c)), started_(utc_now()) {
    fs::create_directories(dir_);
    write_json(dir_ / "run_config.json", config_);
  }

  fs::path operator/(const std::string& name) const { return dir_ / name; }
  const json& config() const { return config_; }

  void finish(int status) const {
    write_json(dir_ / "run_meta.json", {{"started_utc", started_}, {"finished_utc", utc_now()}, {"exit_status", status}});
  }

 private:
  fs::path dir_;
  json config_;
  std::string started_;
};

// ---------------------------------------------------------------- verify

CheckResult suite_theorem1(const RunConfig& c, const AttentionConfig& a) {
  const RankReport r = verify_theorem1(a.n, a.d, a.d_h, c.d_p, c.trials, c.seed);
  return {"theorem1-rank-bound", r.passed, r.to_json()};
}

CheckResult suite_theorem2(const RunConfig& c, const AttentionConfig& a) {
  AttentionConfig ac = a;
  set_variant(ac, "input-add");
  ac.layers = 2;
  const Task task = Task::selective_copy(ac.n, c.vocab, c.shift);
  Model model = init_model(model_config_for(task, ac), c.seed);
  randomize(model, 0.2, c.seed + 1);
  Rng rng = Rng(c.seed).split(40);
  CheckResult result{"theorem2-gradient-equality", true, json::object()};
  json per_loss = json::object();
  for (const auto& [name, kind] : {std::pair{"ce", LossKind::CrossEntropy}, std::pair{"mse", LossKind::MeanSquared}}) {
    Index unequal = 0;
    double worst_diff = 0.0;
    double fd_error = 0.0;
    for (long b = 0; b < c.batches; ++b) {
      const Batch batch = task.batch(2, rng);
      GradCheckOptions opts;
      opts.max_entries = c.grad_entries;
      opts.seed = c.seed;
      opts.finite_differences = b == 0;
      const GradCheckReport r = verify_theorem2(model, batch, kind, opts);
      if (!r.x_equals_p) ++unequal;
      worst_diff = std::max(worst_diff, r.x_vs_p_max_abs_diff);
      fd_error = std::max(fd_error, r.max_rel_error());
    }
    per_loss[name] = {{"batches", c.batches},
                      {"unequal_batches", unequal},
                      {"max_abs_diff", worst_diff},
                      {"fd_max_rel_error", fd_error}};
    if (unequal != 0 || fd_error > 1e-4) result.passed = false;
  }
  result.details = per_loss;
  return result;
}

CheckResult suite_gradients(const RunConfig& c, const AttentionConfig& a) {
  CheckResult result{"finite-difference-gradients", true, json::object()};
  for (const std::string name : {"input-add", "diet-abs", "diet-rel", "shaw", "t5", "linformer-diet-abs"}) {
    AttentionConfig ac = a;
    ac.linformer_k.reset();
    set_variant(ac, name);
    if (auto* abs = std::get_if<scheme::DietAbs>(&ac.scheme)) abs->d_p = std::max<long>(1, std::min<long>(c.d_p, ac.n));
    if (auto* shaw = std::get_if<scheme::ShawRel>(&ac.scheme)) *shaw = {c.clip, true};
    if (ac.linformer() && ac.segment_location == SegmentLocation::PerHead) {
      ac.segment_location = SegmentLocation::None;
      ac.num_segments = 1;
    }
    Task task = Task::selective_copy(ac.n, c.vocab, c.shift);
    task.num_segments = ac.num_segments;
    Model model = init_model(model_config_for(task, ac), c.seed);
    randomize(model, 0.2, c.seed + 2);
    Rng rng = Rng(c.seed).split(41);
    const Batch batch = task.batch(1, rng);
    GradCheckOptions opts;
    opts.max_entries = c.grad_entries;
    opts.seed = c.seed;
    opts.inject_fault = c.inject_grad_fault;
    const GradCheckReport r = gradient_check(model, batch, LossKind::CrossEntropy, opts);
    const bool ok = r.max_rel_error() <= 1e-4;
    json entry = r.to_json();
    entry["passed"] = ok;
    result.details[name] = entry;
    if (!ok) result.passed = false;
  }
  return result;
}

int cmd_verify(const RunConfig& c) {
  const Outputs out(c);
  // d_p = 0 is meaningful for the rank theorem only; other suites keep the default.
  RunConfig base = c;
  if (base.d_p < 1) base.d_p = RunConfig{}.d_p;
  const AttentionConfig a = attention_config(base);
  std::vector<CheckResult> results;
  const auto run = [&](const char* name, auto&& fn) {
    try {
      results.push_back(fn());
    } catch (const Error& e) {
      results.push_back({name, false, {{"error", e.what()}}});
    }
    std::fprintf(stderr, "%s %s\n", results.back().passed ? "PASS" : "FAIL", results.back().name.c_str());
  };
  run("theorem1-rank-bound", [&] { return suite_theorem1(c, a); });
  run("theorem2-gradient-equality", [&] { return suite_theorem2(c, a); });
  run("zero-parameter-equivalence", [&] { return check_zero_parameter_equivalence(a, c.equiv_inputs, c.seed); });
  run("finite-difference-gradients", [&] { return suite_gradients(c, a); });
  run("toeplitz", [&] { return check_toeplitz(a, c.seed); });
  run("sharing-census", [&] { return check_sharing_census(a); });

  json report;
  report["run_config"] = out.config();
  report["suites"] = json::array();
  bool all = true;
  Index passed = 0;
  for (const auto& r : results) {
    report["suites"].push_back({{"name", r.name}, {"passed", r.passed}, {"details", r.details}});
    all = all && r.passed;
    passed += r.passed ? 1 : 0;
  }
  report["suites_passed"] = passed;
  report["passed"] = all;
  write_json(out / "verify_report.json", report);
  const int status = all ? 0 : kExitFail;
  out.finish(status);
  return status;
}

// ---------------------------------------------------------------- train

int cmd_train(const RunConfig& c) {
  const Outputs out(c);
  const Task task = make_task(c);
  const AttentionConfig a = attention_config(c);
  Model model = init_model(model_config_for(task, a), c.seed);
  TrainOptions opts;
  opts.steps = c.steps;
  opts.batch_size = c.batch_size;
  opts.loss = loss_kind(c.loss);
  opts.seed = c.seed;
  if (c.optimizer == "adam") {
    opts.optimizer = Adam{c.lr};
  } else if (c.optimizer == "sgd") {
    opts.optimizer = Sgd{c.lr};
  } else {
    throw ConfigError("unknown optimizer '" + c.optimizer + "'");
  }
  History history;
  try {
    history = train(model, task, opts);
  } catch (const DivergenceError& e) {
    write_json(out / "train_summary.json", {{"run_config", out.config()}, {"diverged_at_step", e.step()}, {"error", e.what()}});
    std::fprintf(stderr, "error: %s\n", e.what());
    out.finish(kExitDiverged);
    return kExitDiverged;
  }
  write_text(out / "history.csv", history.to_csv());
  save_checkpoint(model, out / "checkpoint", out.config());
  const bool ok = c.expect_accuracy < 0.0 || history.final_metric >= c.expect_accuracy;
  write_json(out / "train_summary.json", {{"run_config", out.config()},
                                          {"task", task.name()},
                                          {"steps", c.steps},
                                          {"final_loss", history.steps.back().loss},
                                          {"final_accuracy", history.final_metric},
                                          {"chance", 1.0 / static_cast<double>(task.num_classes)},
                                          {"expect_accuracy", c.expect_accuracy},
                                          {"passed", ok}});
  std::fprintf(stderr, "final accuracy %.4f\n", history.final_metric);
  const int status = ok ? 0 : kExitFail;
  out.finish(status);
  return status;
}

// ---------------------------------------------------------------- bench

int cmd_bench(const RunConfig& c) {
  const Outputs out(c);
  AttentionConfig a = attention_config(c);
  a.linformer_k.reset();
  BenchOptions opts;
  opts.reps = c.reps;
  opts.warmup = c.warmup;
  opts.seed = c.seed;
  opts.batch_size = c.batch_size;
  opts.threads = c.threads;
  opts.use_cache = !c.no_cache;
  if (c.linformer_k > 0) a.linformer_k = c.linformer_k;
  const BenchReport report = compare_all(a, opts);
  write_text(out / "bench.csv", report.to_csv());
  json j = report.to_json();
  j["run_config"] = out.config();

  bool ok = true;
  if (c.check) {
    const double abs_ratio = report.find("diet-abs", BenchMode::Inference).rel_slowdown;
    const double shaw = report.find("shaw", BenchMode::Inference).median_ns;
    const double rel = report.find("diet-rel", BenchMode::Inference).median_ns;
    j["checks"] = {{"diet_abs_inference_slowdown", abs_ratio},
                   {"diet_abs_within_1_10", abs_ratio <= 1.10},
                   {"shaw_slower_than_diet_rel", shaw > rel}};
    ok = abs_ratio <= 1.10 && shaw > rel;
  }
  if (c.scaling) {
    std::string csv;
    for (const std::string name : {"none", "linformer-diet-abs"}) {
      AttentionConfig sc = a;
      sc.layers = 1;
      sc.num_segments = 1;
      sc.segment_location = SegmentLocation::None;
      sc.linformer_k.reset();
      if (name == "linformer-diet-abs") sc.linformer_k = c.linformer_k > 0 ? c.linformer_k : 32;
      set_variant(sc, name);
      const ScalingReport sr = scaling_sweep(sc, {64, 128, 256, 512}, opts);
      const std::string body = sr.to_csv();
      csv += csv.empty() ? body : body.substr(body.find('\n') + 1);
      j["scaling"][name] = sr.slope;
    }
    write_text(out / "scaling.csv", csv);
  }
  write_json(out / "bench.json", j);
  const int status = ok ? 0 : kExitFail;
  out.finish(status);
  return status;
}

// ---------------------------------------------------------------- viz / rank-scan

Model load_model(const RunConfig& c, Task& task) {
  if (c.checkpoint.empty()) throw ConfigError("--checkpoint is required");
  const fs::path stem = c.checkpoint;
  if (!fs::exists(fs::path(stem.string() + ".json"))) throw IoError("checkpoint not found: " + stem.string() + ".json");
  Model model = load_checkpoint(stem);
  const Archive archive = load_archive(stem);
  RunConfig saved = c;
  if (archive.metadata.contains("run")) apply_json(archive.metadata.at("run"), saved);
  task = make_task(saved);
  task.n = model.config.attention.n;
  return model;
}

json heatmaps_for(const Model& model, const Example& ex, const Outputs& out, ColorMap cmap) {
  json summary = json::array();
  const auto scores = attention_scores(model, ex.tokens, ex.segments ? &*ex.segments : nullptr);
  for (std::size_t l = 0; l < scores.size(); ++l) {
    for (std::size_t h = 0; h < scores[l].size(); ++h) {
      const std::string tag = "l" + std::to_string(l) + "_h" + std::to_string(h);
      const auto& hs = scores[l][h];
      export_heatmap(hs.scores, out / ("scores_" + tag + ".svg"), cmap, "scores layer " + std::to_string(l) + " head " + std::to_string(h));
      json entry = {{"layer", l}, {"head", h}};
      if (hs.bias) {
        export_heatmap(*hs.bias, out / ("bias_" + tag + ".svg"), cmap, "bias layer " + std::to_string(l) + " head " + std::to_string(h));
        write_matrix_csv(*hs.bias, out / ("bias_" + tag + ".csv"));
        if (hs.bias->rows() == hs.bias->cols()) entry["bias"] = diagonal_stats(*hs.bias).to_json();
      }
      summary.push_back(entry);
    }
  }
  return summary;
}

int cmd_viz(const RunConfig& c) {
  const Outputs out(c);
  Task task;
  const Model model = load_model(c, task);
  Rng rng = Rng(c.seed).split(50);
  const Batch batch = task.batch(std::max<long>(1, c.batch_size), rng);
  json summary;
  summary["run_config"] = out.config();
  summary["heads"] = heatmaps_for(model, batch.front(), out, color_map(c.color_map));

  const RankReport ranks = rank_scan(model, batch);
  json rj = ranks.to_json();
  rj["run_config"] = out.config();
  write_json(out / "rank_report.json", rj);
  write_text(out / "rank_report.csv", ranks.to_csv());

  std::optional<Matrix> embedding;
  if (model.position.input_table().size() > 0) {
    embedding = model.position.input_table();
  } else if (std::holds_alternative<scheme::DietAbs>(model.position.scheme())) {
    embedding = model.position.slot(0, 0).p_q;
  }
  if (embedding) {
    try {
      const CosineStats stats = position_cosine_stats(*embedding);
      write_text(out / "cosine_histogram.csv", stats.to_csv());
      summary["cosine"] = stats.to_json();
    } catch (const NumericError& e) {
      summary["cosine"] = {{"error", e.what()}};
    }
  }
  write_json(out / "viz_summary.json", summary);
  out.finish(0);
  return 0;
}

int cmd_rank_scan(const RunConfig& c) {
  const Outputs out(c);
  Task task;
  Model model;
  if (!c.checkpoint.empty()) {
    model = load_model(c, task);
  } else {
    task = make_task(c);
    model = init_model(model_config_for(task, attention_config(c)), c.seed);
  }
  Rng rng = Rng(c.seed).split(51);
  const RankReport ranks = rank_scan(model, task.batch(std::max<long>(1, c.batch_size), rng));
  json rj = ranks.to_json();
  rj["run_config"] = out.config();
  write_json(out / "rank_report.json", rj);
  write_text(out / "rank_report.csv", ranks.to_csv());
  out.finish(0);
  return 0;
}

// ---------------------------------------------------------------- wiring

void add_common(CLI::App* app, RunConfig& c) {
  app->add_option("--seed", c.seed, "random seed");
  app->add_option("--out", c.out, "output directory (created if absent)");
  app->add_option("--n", c.n, "sequence length");
  app->add_option("--d", c.d, "hidden size");
  app->add_option("--heads", c.heads, "attention heads");
  app->add_option("--d-h", c.d_h, "per-head size (default d / heads)");
  app->add_option("--layers", c.layers, "transformer blocks");
  app->add_option("--d-p", c.d_p, "DIET-ABS rank (and theorem 1 d_p in verify)");
  app->add_option("--scheme", c.scheme, "position scheme")->check(CLI::IsMember(variant_names()));
  app->add_option("--sharing", c.sharing, "parameter sharing")->check(CLI::IsMember({"none", "layer", "head"}));
  app->add_option("--segments", c.segments, "number of segments");
  app->add_option("--segment-location", c.segment_location, "segment encoding location")
      ->check(CLI::IsMember({"input", "per-head", "none"}));
  app->add_option("--linformer-k", c.linformer_k, "Linformer projected length");
  app->add_option("--clip", c.clip, "Shaw clipping distance");
  app->add_flag("--shaw-value", c.shaw_value, "Shaw relative value embeddings");
  app->add_option("--num-buckets", c.num_buckets, "T5 bucket count");
  app->add_option("--max-distance", c.max_distance, "T5 max distance");
  app->add_option("--config", "JSON config file; flags override it");
}

void add_task_flags(CLI::App* app, RunConfig& c) {
  app->add_option("--task", c.task, "synthetic task")->check(CLI::IsMember({"position-probe", "selective-copy"}));
  app->add_option("--vocab", c.vocab, "selective-copy vocabulary");
  app->add_option("--shift", c.shift, "selective-copy offset");
  app->add_option("--batch-size", c.batch_size, "batch size");
}

/// Loads --config before flag parsing so that flags override the file.
void preload_config(int argc, char** argv, RunConfig& c) {
  for (int i = 1; i < argc; ++i) {
    const std::string arg = argv[i];
    std::string path;
    if (arg == "--config" && i + 1 < argc) path = argv[i + 1];
    if (arg.rfind("--config=", 0) == 0) path = arg.substr(9);
    if (path.empty()) continue;
    std::ifstream in(path);
    if (!in) throw IoError("cannot read config file " + path);
    json j;
    try {
      in >> j;
    } catch (const json::exception& e) {
      throw ConfigError("config file " + path + ": " + e.what());
    }
    apply_json(j, c);
  }
}

}  // namespace

int main(int argc, char** argv) {
  RunConfig c;
  try {
    preload_config(argc, argv, c);
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }

  CLI::App app{"Attention position-encoding verification and experiments"};
  app.require_subcommand(1);

  auto* verify = app.add_subcommand("verify", "rank and gradient theorems, equivalence and structure checks");
  add_common(verify, c);
  verify->add_option("--trials", c.trials, "random draws for the rank bound");
  verify->add_option("--equiv-inputs", c.equiv_inputs, "random inputs for zero-parameter equivalence");
  verify->add_option("--grad-entries", c.grad_entries, "entries per tensor in finite differences (0: all)");
  verify->add_option("--batches", c.batches, "batches for gradient equality");
  verify->add_option("--vocab", c.vocab, "toy model vocabulary");
  verify->add_option("--shift", c.shift, "toy task offset");
  verify->add_flag("--inject-grad-fault", c.inject_grad_fault, "test hook: corrupt one analytic gradient");

  auto* train_cmd = app.add_subcommand("train", "train on a synthetic task; writes history and checkpoint");
  add_common(train_cmd, c);
  add_task_flags(train_cmd, c);
  train_cmd->add_option("--steps", c.steps, "optimizer steps");
  train_cmd->add_option("--lr", c.lr, "learning rate");
  train_cmd->add_option("--optimizer", c.optimizer, "optimizer")->check(CLI::IsMember({"adam", "sgd"}));
  train_cmd->add_option("--loss", c.loss, "loss")->check(CLI::IsMember({"ce", "mse"}));
  train_cmd->add_option("--expect-accuracy", c.expect_accuracy, "exit 1 if held-out accuracy is lower");

  auto* bench = app.add_subcommand("bench", "time training steps and inference for every scheme");
  add_common(bench, c);
  bench->add_option("--reps", c.reps, "timed repetitions (>= 10)");
  bench->add_option("--warmup", c.warmup, "discarded warmup steps (>= 3)");
  bench->add_option("--batch-size", c.batch_size, "sequences per step");
  bench->add_option("--threads", c.threads, "inference threads (1 for reproducible timing)");
  bench->add_flag("--no-cache", c.no_cache, "recompute biases during inference");
  bench->add_flag("--scaling", c.scaling, "also sweep n for full and Linformer attention");
  bench->add_flag("--check", c.check, "exit 1 unless the cost ordering holds");

  auto* viz = app.add_subcommand("viz", "heatmaps, rank report and cosine histogram from a checkpoint");
  add_common(viz, c);
  add_task_flags(viz, c);
  viz->add_option("--checkpoint", c.checkpoint, "checkpoint stem")->required();
  viz->add_option("--color-map", c.color_map, "heatmap colours")->check(CLI::IsMember({"blue-red", "grayscale"}));

  auto* scan = app.add_subcommand("rank-scan", "numerical ranks of every head's score matrices");
  add_common(scan, c);
  add_task_flags(scan, c);
  scan->add_option("--checkpoint", c.checkpoint, "checkpoint stem (default: fresh model)");

  CLI11_PARSE(app, argc, argv);

  try {
    c.command = app.get_subcommands().front()->get_name();
    if (verify->parsed()) return cmd_verify(c);
    if (train_cmd->parsed()) return cmd_train(c);
    if (bench->parsed()) return cmd_bench(c);
    if (viz->parsed()) return cmd_viz(c);
    if (scan->parsed()) return cmd_rank_scan(c);
  } catch (const DivergenceError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitDiverged;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitError;
  }
  return kExitError;
}
