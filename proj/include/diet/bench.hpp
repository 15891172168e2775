// SPDX-License-Identifier: Apache-2.0
//
// Wall-clock micro-benchmarks of training steps and inference passes per
// position scheme.
#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <json.hpp>

#include "diet/model.hpp"

namespace diet {

enum class BenchMode { Train, Inference };

std::string bench_mode_name(BenchMode mode);
BenchMode parse_bench_mode(const std::string& name);

struct BenchOptions {
  Index reps = 30;
  Index warmup = 3;
  std::uint64_t seed = 0;
  Index batch_size = 8;
  /// Inference reuses a prebuilt bias cache.
  bool use_cache = true;
  /// Inference only: split the batch across this many threads. 1 is the
  /// acceptance setting.
  Index threads = 1;
  /// Minimum wall time of one repetition; short steps are looped until a
  /// repetition lasts this long and the per-step mean is recorded.
  double min_rep_seconds = 2e-3;
  /// Timer tick used by the resolution check; 0 measures it.
  double timer_tick_ns = 0.0;
};

struct BenchEntry {
  std::string scheme;  ///< variant name
  BenchMode mode = BenchMode::Inference;
  AttentionConfig config;
  Index reps = 0;
  Index inner = 1;  ///< steps per repetition
  std::vector<double> samples_ns;  ///< per-step time of each repetition
  double mean_ns = 0.0;
  double stdev_ns = 0.0;
  double min_ns = 0.0;
  double median_ns = 0.0;
  double rel_slowdown = 1.0;  ///< median_ns / baseline median_ns
  /// Sum of every output of one step (logits, or loss and gradients); equal
  /// across runs with the same seed.
  double checksum = 0.0;
};

struct BenchReport {
  std::vector<BenchEntry> entries;
  nlohmann::json config;

  /// Sets rel_slowdown per mode against the named baseline (input-add).
  void apply_baseline(const std::string& baseline = "input-add");
  const BenchEntry& find(const std::string& scheme, BenchMode mode) const;

  /// scheme,mode,n,d,h,d_h,reps,mean_ns,stdev_ns,min_ns,rel_slowdown
  std::string to_csv() const;
  nlohmann::json to_json() const;
};

/// The model, batch and step function of one benchmark, exposed so tests can
/// check that the timed work is the same math as the library entry points.
struct BenchWorkload {
  Model model;
  Batch batch;
  std::optional<BiasCache> cache;
  BenchMode mode = BenchMode::Inference;
  Index threads = 1;

  BenchWorkload(const AttentionConfig& config, BenchMode mode, const BenchOptions& options);
  /// One step; returns its checksum.
  double step() const;
};

/// Times one scheme (the variant name selects it; other fields of `config`
/// are kept). Throws ConfigError for reps < 10 or warmup < 3 and
/// MeasurementError if one step spans fewer than 100 timer ticks.
BenchEntry bench_scheme(const AttentionConfig& config, const std::string& scheme, BenchMode mode,
                        const BenchOptions& options);

/// Every variant in both modes, repetitions interleaved round-robin across
/// variants so drift affects all of them alike. rel_slowdown is filled in.
BenchReport compare_all(const AttentionConfig& config, const BenchOptions& options,
                        const std::vector<std::string>& schemes = variant_names());

/// Median inference time of one attention layer (multi_head) against n.
struct ScalingPoint {
  Index n = 0;
  double median_ns = 0.0;
};

struct ScalingReport {
  std::string scheme;
  std::vector<ScalingPoint> points;
  double slope = 0.0;  ///< least-squares slope of log(time) against log(n)

  std::string to_csv() const;  ///< "scheme,n,median_ns,slope"
};

ScalingReport scaling_sweep(const AttentionConfig& config, const std::vector<Index>& ns,
                            const BenchOptions& options);

/// Least-squares slope of log(y) against log(x).
double log_log_slope(const std::vector<double>& x, const std::vector<double>& y);

/// Smallest observable nonzero difference between two steady_clock reads, ns.
double timer_resolution_ns();

}  // namespace diet
