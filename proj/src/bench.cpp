// SPDX-License-Identifier: Apache-2.0
#include "diet/bench.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>
#include <thread>

namespace diet {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ns(Clock::time_point start, Clock::time_point stop) {
  return static_cast<double>(std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count());
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t m = v.size() / 2;
  return v.size() % 2 == 1 ? v[m] : 0.5 * (v[m - 1] + v[m]);
}

void check_options(const BenchOptions& options) {
  if (options.reps < 10) throw ConfigError("bench: reps must be at least 10, got " + std::to_string(options.reps));
  if (options.warmup < 3) throw ConfigError("bench: warmup must be at least 3, got " + std::to_string(options.warmup));
  if (options.batch_size < 1) throw ConfigError("bench: batch size must be positive");
  if (options.threads < 1) throw ConfigError("bench: threads must be positive");
}

ModelConfig bench_model_config(const AttentionConfig& config) {
  ModelConfig mc;
  mc.attention = config;
  mc.vocab = 64;
  mc.num_classes = 32;
  return mc;
}

std::optional<SegmentMap> bench_segments(const AttentionConfig& config) {
  if (config.num_segments <= 1) return std::nullopt;
  std::vector<Index> lengths(static_cast<std::size_t>(config.num_segments), config.n / config.num_segments);
  lengths.back() += config.n % config.num_segments;
  return SegmentMap::runs(lengths);
}

/// Same batch for every scheme: depends only on seed, n and the batch size.
Batch bench_batch(const AttentionConfig& config, const BenchOptions& options) {
  Rng rng = Rng(options.seed).split(20);
  const auto segments = bench_segments(config);
  Batch batch;
  for (Index b = 0; b < options.batch_size; ++b) {
    Example ex;
    for (Index i = 0; i < config.n; ++i) {
      ex.tokens.push_back(static_cast<Index>(rng.below(64)));
      ex.labels.push_back(static_cast<Index>(rng.below(32)));
    }
    ex.segments = segments;
    batch.push_back(std::move(ex));
  }
  return batch;
}

bool cacheable(const PositionParams& params, const std::optional<SegmentMap>& segments) {
  return is_bias_scheme(params.scheme()) ||
         (params.segment_location() == SegmentLocation::PerHead && segments.has_value());
}

double sum_all(const Matrix& m) { return m.sum(); }

}  // namespace

std::string bench_mode_name(BenchMode mode) { return mode == BenchMode::Train ? "train" : "inference"; }

BenchMode parse_bench_mode(const std::string& name) {
  if (name == "train") return BenchMode::Train;
  if (name == "inference") return BenchMode::Inference;
  throw ConfigError("unknown bench mode '" + name + "'");
}

double timer_resolution_ns() {
  double best = 0.0;
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = Clock::now();
    auto b = Clock::now();
    while (b == a) b = Clock::now();
    const double d = elapsed_ns(a, b);
    if (best == 0.0 || d < best) best = d;
  }
  return best;
}

namespace {
double tick_ns(const BenchOptions& options) {
  return options.timer_tick_ns > 0.0 ? options.timer_tick_ns : timer_resolution_ns();
}
}  // namespace

BenchWorkload::BenchWorkload(const AttentionConfig& config, BenchMode mode_, const BenchOptions& options)
    : model(init_model(bench_model_config(config), options.seed)),
      batch(bench_batch(config, options)),
      mode(mode_),
      threads(options.threads) {
  // Nonzero positional parameters, so the timed bias work is not a no-op.
  Rng rng = Rng(options.seed).split(21);
  for (auto& t : model.position.tensors()) {
    for (Index i = 0; i < t.value->size(); ++i) t.value->data()[i] = 0.02 * rng.normal();
  }
  if (mode == BenchMode::Inference && options.use_cache && cacheable(model.position, batch.front().segments)) {
    const auto& segments = batch.front().segments;
    cache = build_cache(model.position, config.n, segments ? &*segments : nullptr);
  }
}

double BenchWorkload::step() const {
  if (mode == BenchMode::Train) {
    const LossAndGrads lg = loss_and_grads(model, batch, LossKind::CrossEntropy);
    double sum = lg.loss;
    for (const auto& t : lg.grads.weights.tensors()) sum += sum_all(*t.value);
    for (const auto& t : lg.grads.position.tensors()) sum += sum_all(*t.value);
    return sum;
  }
  const BiasCache* c = cache ? &*cache : nullptr;
  const auto run = [&](std::size_t begin, std::size_t end, double& out) {
    double sum = 0.0;
    for (std::size_t b = begin; b < end; ++b) {
      const auto& ex = batch[b];
      sum += sum_all(forward(model, ex.tokens, ex.segments ? &*ex.segments : nullptr, c));
    }
    out = sum;
  };
  if (threads <= 1) {
    double sum = 0.0;
    run(0, batch.size(), sum);
    return sum;
  }
  // Fixed partition and in-order reduction keep the checksum deterministic.
  const auto workers = static_cast<std::size_t>(std::min<Index>(threads, static_cast<Index>(batch.size())));
  std::vector<double> partial(workers, 0.0);
  {
    std::vector<std::jthread> pool;
    for (std::size_t w = 0; w < workers; ++w) {
      const std::size_t begin = batch.size() * w / workers;
      const std::size_t end = batch.size() * (w + 1) / workers;
      pool.emplace_back([&, begin, end, w] { run(begin, end, partial[w]); });
    }
  }
  return std::accumulate(partial.begin(), partial.end(), 0.0);
}

namespace {

/// Measures steps of one workload; run_rep may be called repeatedly and in
/// any interleaving with other timers.
class RepTimer {
 public:
  RepTimer(const AttentionConfig& config, const std::string& scheme, BenchMode mode, const BenchOptions& options,
           double resolution_ns)
      : workload_(config, mode, options), options_(options), resolution_ns_(resolution_ns) {
    entry_.scheme = scheme;
    entry_.mode = mode;
    entry_.config = config;
  }

  void warmup() {
    for (Index i = 0; i < options_.warmup; ++i) entry_.checksum = workload_.step();
    // Calibrate the inner loop from one extra step.
    const auto start = Clock::now();
    workload_.step();
    const double one = std::max(elapsed_ns(start, Clock::now()), 1.0);
    if (one < 100.0 * resolution_ns_) {
      throw MeasurementError("bench: one step of '" + entry_.scheme + "' took " + std::to_string(one) +
                             " ns, under 100 timer ticks; use a larger config (n, d or batch size)");
    }
    entry_.inner = std::max<Index>(1, static_cast<Index>(std::ceil(options_.min_rep_seconds * 1e9 / one)));
  }

  void run_rep() {
    const auto start = Clock::now();
    for (Index i = 0; i < entry_.inner; ++i) workload_.step();
    const double total = elapsed_ns(start, Clock::now());
    entry_.samples_ns.push_back(total / static_cast<double>(entry_.inner));
  }

  BenchEntry finish() {
    const auto& s = entry_.samples_ns;
    entry_.reps = static_cast<Index>(s.size());
    entry_.mean_ns = std::accumulate(s.begin(), s.end(), 0.0) / static_cast<double>(s.size());
    double var = 0.0;
    for (double v : s) var += (v - entry_.mean_ns) * (v - entry_.mean_ns);
    entry_.stdev_ns = s.size() > 1 ? std::sqrt(var / static_cast<double>(s.size() - 1)) : 0.0;
    entry_.min_ns = *std::min_element(s.begin(), s.end());
    entry_.median_ns = median(s);
    return entry_;
  }

 private:
  BenchWorkload workload_;
  BenchOptions options_;
  double resolution_ns_;
  BenchEntry entry_;
};

AttentionConfig with_variant(const AttentionConfig& base, const std::string& scheme) {
  AttentionConfig config = base;
  set_variant(config, scheme);
  // Keep the scheme parameters of the base config when the names agree.
  if (base.scheme.index() == config.scheme.index()) config.scheme = base.scheme;
  if (std::holds_alternative<scheme::DietAbs>(config.scheme)) {
    auto& abs = std::get<scheme::DietAbs>(config.scheme);
    abs.d_p = std::min(abs.d_p, config.n);
  }
  config.validate();
  return config;
}

}  // namespace

BenchEntry bench_scheme(const AttentionConfig& config, const std::string& scheme, BenchMode mode,
                        const BenchOptions& options) {
  check_options(options);
  RepTimer timer(with_variant(config, scheme), scheme, mode, options, tick_ns(options));
  timer.warmup();
  for (Index r = 0; r < options.reps; ++r) timer.run_rep();
  return timer.finish();
}

BenchReport compare_all(const AttentionConfig& config, const BenchOptions& options,
                        const std::vector<std::string>& schemes) {
  check_options(options);
  const double resolution = tick_ns(options);
  BenchReport report;
  report.config = to_json(config);
  report.config["reps"] = options.reps;
  report.config["warmup"] = options.warmup;
  report.config["batch_size"] = options.batch_size;
  report.config["seed"] = options.seed;
  report.config["use_cache"] = options.use_cache;
  report.config["threads"] = options.threads;
  report.config["timer_resolution_ns"] = resolution;

  for (const BenchMode mode : {BenchMode::Train, BenchMode::Inference}) {
    std::vector<RepTimer> timers;
    timers.reserve(schemes.size());
    for (const auto& s : schemes) timers.emplace_back(with_variant(config, s), s, mode, options, resolution);
    for (auto& t : timers) t.warmup();
    for (Index r = 0; r < options.reps; ++r) {
      for (auto& t : timers) t.run_rep();
    }
    for (auto& t : timers) report.entries.push_back(t.finish());
  }
  report.apply_baseline();
  return report;
}

void BenchReport::apply_baseline(const std::string& baseline) {
  for (auto& e : entries) {
    const auto it = std::find_if(entries.begin(), entries.end(),
                                 [&](const BenchEntry& b) { return b.scheme == baseline && b.mode == e.mode; });
    e.rel_slowdown = it == entries.end() ? std::nan("") : e.median_ns / it->median_ns;
  }
}

const BenchEntry& BenchReport::find(const std::string& scheme, BenchMode mode) const {
  for (const auto& e : entries) {
    if (e.scheme == scheme && e.mode == mode) return e;
  }
  throw InputError("bench report has no entry for " + scheme + "/" + bench_mode_name(mode));
}

std::string BenchReport::to_csv() const {
  std::ostringstream os;
  os << "scheme,mode,n,d,h,d_h,reps,mean_ns,stdev_ns,min_ns,rel_slowdown\n";
  char buf[256];
  for (const auto& e : entries) {
    std::snprintf(buf, sizeof(buf), "%s,%s,%ld,%ld,%ld,%ld,%ld,%.1f,%.1f,%.1f,%.4f\n", e.scheme.c_str(),
                  bench_mode_name(e.mode).c_str(), static_cast<long>(e.config.n), static_cast<long>(e.config.d),
                  static_cast<long>(e.config.heads), static_cast<long>(e.config.d_h), static_cast<long>(e.reps),
                  e.mean_ns, e.stdev_ns, e.min_ns, e.rel_slowdown);
    os << buf;
  }
  return os.str();
}

nlohmann::json BenchReport::to_json() const {
  nlohmann::json j;
  j["config"] = config;
  j["entries"] = nlohmann::json::array();
  for (const auto& e : entries) {
    j["entries"].push_back({{"scheme", e.scheme},
                            {"mode", bench_mode_name(e.mode)},
                            {"reps", e.reps},
                            {"inner", e.inner},
                            {"mean_ns", e.mean_ns},
                            {"stdev_ns", e.stdev_ns},
                            {"min_ns", e.min_ns},
                            {"median_ns", e.median_ns},
                            {"rel_slowdown", e.rel_slowdown},
                            {"checksum", e.checksum}});
  }
  return j;
}

// ---------------------------------------------------------------- scaling

double log_log_slope(const std::vector<double>& x, const std::vector<double>& y) {
  if (x.size() != y.size() || x.size() < 2) throw ConfigError("log_log_slope: need at least two matching points");
  const auto count = static_cast<double>(x.size());
  double mx = 0.0, my = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    if (x[i] <= 0.0 || y[i] <= 0.0) throw ConfigError("log_log_slope: values must be positive");
    mx += std::log(x[i]);
    my += std::log(y[i]);
  }
  mx /= count;
  my /= count;
  double sxy = 0.0, sxx = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double dx = std::log(x[i]) - mx;
    sxy += dx * (std::log(y[i]) - my);
    sxx += dx * dx;
  }
  return sxy / sxx;
}

ScalingReport scaling_sweep(const AttentionConfig& config, const std::vector<Index>& ns, const BenchOptions& options) {
  check_options(options);
  const double resolution = tick_ns(options);
  ScalingReport report;
  report.scheme = variant_name(config);
  std::vector<double> xs, ys;
  for (const Index n : ns) {
    AttentionConfig c = config;
    c.n = n;
    c.validate();
    Rng rng = Rng(options.seed).split(static_cast<std::uint64_t>(n));
    const LayerWeights weights = init_layer_weights(c, rng);
    PositionParams params = init_params(c, options.seed);
    for (auto& t : params.tensors()) {
      for (Index i = 0; i < t.value->size(); ++i) t.value->data()[i] = 0.02 * rng.normal();
    }
    const Matrix x = randn_matrix(n, c.d, 1.0, rng);
    std::optional<BiasCache> cache;
    if (is_bias_scheme(params.scheme())) cache = build_cache(params, n);
    const BiasCache* cp = cache ? &*cache : nullptr;

    const auto step = [&] { return multi_head(x, weights, params, 0, nullptr, c, cp); };
    for (Index i = 0; i < options.warmup; ++i) step();
    const auto start = Clock::now();
    step();
    const double one = std::max(elapsed_ns(start, Clock::now()), 1.0);
    if (one < 100.0 * resolution) {
      throw MeasurementError("scaling_sweep: one step under 100 timer ticks at n=" + std::to_string(n));
    }
    const auto inner = std::max<Index>(1, static_cast<Index>(std::ceil(options.min_rep_seconds * 1e9 / one)));
    std::vector<double> samples;
    for (Index r = 0; r < options.reps; ++r) {
      const auto t0 = Clock::now();
      for (Index i = 0; i < inner; ++i) step();
      const double total = elapsed_ns(t0, Clock::now());
      samples.push_back(total / static_cast<double>(inner));
    }
    report.points.push_back({n, median(samples)});
    xs.push_back(static_cast<double>(n));
    ys.push_back(report.points.back().median_ns);
  }
  report.slope = log_log_slope(xs, ys);
  return report;
}

std::string ScalingReport::to_csv() const {
  std::ostringstream os;
  os << "scheme,n,median_ns,slope\n";
  char buf[160];
  for (const auto& p : points) {
    std::snprintf(buf, sizeof(buf), "%s,%ld,%.1f,%.4f\n", scheme.c_str(), static_cast<long>(p.n), p.median_ns, slope);
    os << buf;
  }
  return os.str();
}

}  // namespace diet
