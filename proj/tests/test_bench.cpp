// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>
#include <sstream>

#include "diet/bench.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace diet;

namespace {

AttentionConfig tiny() {
  AttentionConfig c;
  c.n = 16;
  c.d = 16;
  c.heads = 2;
  c.d_h = 8;
  c.layers = 1;
  return c;
}

BenchOptions quick() {
  BenchOptions o;
  o.reps = 10;
  o.warmup = 3;
  o.batch_size = 2;
  o.min_rep_seconds = 1e-4;
  o.timer_tick_ns = 1e-3;
  return o;
}

}  // namespace

TEST(BenchOptionsTest, Validation) {
  BenchOptions o = quick();
  o.reps = 9;
  EXPECT_THROW((void)bench_scheme(tiny(), "diet-abs", BenchMode::Inference, o), ConfigError);
  o = quick();
  o.warmup = 2;
  EXPECT_THROW((void)bench_scheme(tiny(), "diet-abs", BenchMode::Inference, o), ConfigError);
  EXPECT_THROW((void)bench_scheme(tiny(), "rope", BenchMode::Inference, quick()), ConfigError);
  EXPECT_THROW((void)parse_bench_mode("eval"), ConfigError);
  EXPECT_EQ(parse_bench_mode(bench_mode_name(BenchMode::Train)), BenchMode::Train);
}

TEST(BenchOptionsTest, CoarseTimerRaisesMeasurementError) {
  BenchOptions o = quick();
  o.timer_tick_ns = 1e12;
  EXPECT_THROW((void)bench_scheme(tiny(), "diet-abs", BenchMode::Inference, o), MeasurementError);
  EXPECT_THROW((void)scaling_sweep(tiny(), {16, 32}, o), MeasurementError);
}

TEST(BenchEntryTest, StatisticsAreConsistent) {
  const BenchEntry e = bench_scheme(tiny(), "diet-rel", BenchMode::Train, quick());
  EXPECT_EQ(e.scheme, "diet-rel");
  EXPECT_EQ(e.reps, 10);
  ASSERT_EQ(e.samples_ns.size(), 10u);
  std::vector<double> sorted = e.samples_ns;
  std::sort(sorted.begin(), sorted.end());
  EXPECT_DOUBLE_EQ(e.min_ns, sorted.front());
  EXPECT_DOUBLE_EQ(e.median_ns, 0.5 * (sorted[4] + sorted[5]));
  double mean = 0.0;
  for (double s : sorted) mean += s;
  EXPECT_NEAR(e.mean_ns, mean / 10.0, 1e-6 * mean);
  EXPECT_GE(e.stdev_ns, 0.0);
  EXPECT_GE(e.inner, 1);
}

TEST(BenchWorkloadTest, ChecksumDeterministicAndCacheExact) {
  for (const char* v : {"diet-abs", "diet-rel", "t5", "linformer-diet-abs"}) {
    AttentionConfig c = tiny();
    set_variant(c, v);
    BenchOptions cached = quick();
    BenchOptions uncached = quick();
    uncached.use_cache = false;
    const BenchWorkload a(c, BenchMode::Inference, cached);
    const BenchWorkload b(c, BenchMode::Inference, uncached);
    ASSERT_TRUE(a.cache.has_value()) << v;
    EXPECT_FALSE(b.cache.has_value());
    EXPECT_EQ(a.step(), a.step());
    EXPECT_EQ(a.step(), b.step()) << v;
    for (const auto& ex : a.batch) {
      EXPECT_TRUE(oracle::bitwise_equal(forward(a.model, ex.tokens, nullptr, &*a.cache), forward(a.model, ex.tokens)));
    }
  }
}

TEST(BenchWorkloadTest, ThreadsDoNotChangeOutputs) {
  AttentionConfig c = tiny();
  set_variant(c, "shaw");
  BenchOptions one = quick();
  BenchOptions four = quick();
  four.threads = 4;
  four.batch_size = one.batch_size = 5;
  EXPECT_EQ(BenchWorkload(c, BenchMode::Inference, one).step(), BenchWorkload(c, BenchMode::Inference, four).step());
}

TEST(BenchReportTest, CompareAllRowsAndBaseline) {
  const std::vector<std::string> schemes = {"input-add", "diet-abs", "shaw"};
  const BenchReport r = compare_all(tiny(), quick(), schemes);
  EXPECT_EQ(r.entries.size(), 6u);
  for (auto mode : {BenchMode::Train, BenchMode::Inference}) {
    EXPECT_EQ(r.find("input-add", mode).rel_slowdown, 1.0);
    const auto& abs = r.find("diet-abs", mode);
    EXPECT_DOUBLE_EQ(abs.rel_slowdown, abs.median_ns / r.find("input-add", mode).median_ns);
  }
  EXPECT_THROW((void)r.find("t5", BenchMode::Train), InputError);
  const std::string csv = r.to_csv();
  std::istringstream in(csv);
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line, "scheme,mode,n,d,h,d_h,reps,mean_ns,stdev_ns,min_ns,rel_slowdown");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  EXPECT_EQ(rows, 6);
  EXPECT_EQ(r.to_json()["entries"].size(), 6u);
}

TEST(Scaling, LogLogSlopeOnSyntheticData) {
  std::vector<double> x = {64, 128, 256, 512}, y;
  for (double v : x) y.push_back(3.0 * v * v);
  EXPECT_NEAR(log_log_slope(x, y), 2.0, 1e-12);
  y.clear();
  for (double v : x) y.push_back(7.0 * v);
  EXPECT_NEAR(log_log_slope(x, y), 1.0, 1e-12);
  EXPECT_THROW((void)log_log_slope({1.0}, {1.0}), ConfigError);
  EXPECT_THROW((void)log_log_slope({1.0, -1.0}, {1.0, 2.0}), ConfigError);
}

TEST(Scaling, SweepReportsEveryPoint) {
  AttentionConfig c = tiny();
  set_variant(c, "linformer-diet-abs");
  c.linformer_k = 8;
  const ScalingReport r = scaling_sweep(c, {16, 32, 64}, quick());
  EXPECT_EQ(r.scheme, "linformer-diet-abs");
  ASSERT_EQ(r.points.size(), 3u);
  for (const auto& p : r.points) EXPECT_GT(p.median_ns, 0.0);
  EXPECT_TRUE(std::isfinite(r.slope));
  EXPECT_EQ(r.to_csv().rfind("scheme,n,median_ns,slope\n", 0), 0u);
}

TEST(Timer, ResolutionPositive) { EXPECT_GT(timer_resolution_ns(), 0.0); }
