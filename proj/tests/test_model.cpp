// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "diet/model.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace diet;
using testing_util::small_config;

namespace {

ModelConfig model_config(const std::string& variant, Index n = 8) {
  ModelConfig c;
  c.attention = small_config(variant, n);
  if (c.attention.linformer()) c.attention.linformer_k = n / 2;
  c.vocab = 6;
  c.num_classes = 5;
  c.d_ff = 12;
  return c;
}

Model random_model(const ModelConfig& c, std::uint64_t seed, double stddev = 0.3) {
  Model m = init_model(c, seed);
  randomize(m, stddev, seed + 100);
  return m;
}

Batch random_batch(const ModelConfig& c, Index size, std::uint64_t seed, const SegmentMap* segs = nullptr) {
  Rng rng(seed);
  Batch batch;
  for (Index b = 0; b < size; ++b) {
    Example ex;
    for (Index i = 0; i < c.attention.n; ++i) {
      ex.tokens.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(c.vocab))));
      ex.labels.push_back(static_cast<Index>(rng.below(static_cast<std::uint64_t>(c.num_classes))));
    }
    if (segs != nullptr) ex.segments = *segs;
    batch.push_back(std::move(ex));
  }
  return batch;
}

Matrix ref_layer_norm(const Matrix& x, const Matrix& g, const Matrix& b) {
  Matrix out(x.rows(), x.cols());
  for (Index i = 0; i < x.rows(); ++i) {
    double mean = 0.0;
    for (Index c = 0; c < x.cols(); ++c) mean += x(i, c);
    mean /= x.cols();
    double var = 0.0;
    for (Index c = 0; c < x.cols(); ++c) var += (x(i, c) - mean) * (x(i, c) - mean);
    var /= x.cols();
    for (Index c = 0; c < x.cols(); ++c) out(i, c) = (x(i, c) - mean) / std::sqrt(var + 1e-5) * g(0, c) + b(0, c);
  }
  return out;
}

Matrix add_row(Matrix m, const Matrix& row) {
  for (Index i = 0; i < m.rows(); ++i) m.row(i) += row.row(0);
  return m;
}

// Forward pass written out with loop products and per-entry position terms.
Matrix reference_forward(const Model& m, const Example& ex) {
  const auto& cfg = m.config.attention;
  const auto& p = m.position;
  const Index n = static_cast<Index>(ex.tokens.size());
  Matrix z(n, cfg.d);
  for (Index i = 0; i < n; ++i) {
    z.row(i) = m.weights.token_embedding.row(ex.tokens[static_cast<std::size_t>(i)]);
    if (p.input_table().size() > 0) z.row(i) += p.input_table().row(i);
    if (p.segment_table().size() > 0 && ex.segments) z.row(i) += p.segment_table().row((*ex.segments)[i]);
  }
  const double s = std::sqrt(static_cast<double>(cfg.d));
  for (Index l = 0; l < cfg.layers; ++l) {
    const auto& blk = m.weights.blocks[static_cast<std::size_t>(l)];
    const Matrix h1 = ref_layer_norm(z, blk.ln1_gain, blk.ln1_bias);
    const Matrix src = cfg.linformer() ? oracle::matmul(blk.attention.projection, h1) : h1;
    Matrix concat(n, cfg.heads * cfg.d_h);
    for (Index h = 0; h < cfg.heads; ++h) {
      const auto& w = blk.attention.heads[static_cast<std::size_t>(h)];
      const Matrix q = oracle::matmul(h1, w.w_q);
      const Matrix k = oracle::matmul(src, w.w_k);
      const Matrix v = oracle::matmul(src, w.w_v);
      const PositionSlot* slot = p.slot_count() > 0 ? &p.slot(l, h) : nullptr;
      Matrix a(n, k.rows());
      for (Index i = 0; i < n; ++i) {
        for (Index j = 0; j < k.rows(); ++j) {
          double dot = 0.0;
          for (Index c = 0; c < cfg.d_h; ++c) dot += q(i, c) * k(j, c);
          if (const auto* shaw = std::get_if<scheme::ShawRel>(&cfg.scheme)) {
            const Index r = std::clamp<Index>(j - i, -shaw->clip, shaw->clip) + shaw->clip;
            for (Index c = 0; c < cfg.d_h; ++c) dot += q(i, c) * slot->shaw_key(r, c);
          }
          double bias = 0.0;
          if (std::holds_alternative<scheme::DietAbs>(cfg.scheme)) {
            for (Index c = 0; c < slot->p_q.cols(); ++c) bias += slot->p_q(i, c) * slot->p_k(j, c);
          } else if (std::holds_alternative<scheme::DietRel>(cfg.scheme)) {
            bias = slot->rel(0, i - j + cfg.n - 1);
          } else if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&cfg.scheme)) {
            bias = slot->buckets(0, t5_bucket(i - j, t5->num_buckets, t5->max_distance));
          }
          if (cfg.segment_location == SegmentLocation::PerHead && ex.segments) {
            bias += slot->segment((*ex.segments)[i], (*ex.segments)[j]);
          }
          a(i, j) = dot / s + bias;
        }
      }
      const Matrix probs = oracle::softmax_rows(a);
      Matrix out = oracle::matmul(probs, v);
      if (const auto* shaw = std::get_if<scheme::ShawRel>(&cfg.scheme); shaw && shaw->with_value) {
        for (Index i = 0; i < n; ++i) {
          for (Index j = 0; j < n; ++j) {
            const Index r = std::clamp<Index>(j - i, -shaw->clip, shaw->clip) + shaw->clip;
            out.row(i) += probs(i, j) * slot->shaw_value.row(r);
          }
        }
      }
      concat.middleCols(h * cfg.d_h, cfg.d_h) = out;
    }
    const Matrix mid = z + oracle::matmul(concat, blk.attention.w_o);
    const Matrix h2 = ref_layer_norm(mid, blk.ln2_gain, blk.ln2_bias);
    Matrix pre = add_row(oracle::matmul(h2, blk.ff_in), blk.ff_in_bias);
    for (Index i = 0; i < pre.size(); ++i) {
      const double u = pre.data()[i];
      pre.data()[i] = 0.5 * u * (1.0 + std::erf(u / std::sqrt(2.0)));
    }
    z = mid + add_row(oracle::matmul(pre, blk.ff_out), blk.ff_out_bias);
  }
  const Matrix out = ref_layer_norm(z, m.weights.final_gain, m.weights.final_bias);
  return add_row(oracle::matmul(out, m.weights.classifier), m.weights.classifier_bias);
}

double reference_loss(const Model& m, const Batch& batch, LossKind kind) {
  double total = 0.0;
  for (const auto& ex : batch) {
    const Matrix logits = reference_forward(m, ex);
    double acc = 0.0;
    for (Index i = 0; i < logits.rows(); ++i) {
      const Index y = ex.labels[static_cast<std::size_t>(i)];
      if (kind == LossKind::CrossEntropy) {
        double z = 0.0;
        for (Index c = 0; c < logits.cols(); ++c) z += std::exp(logits(i, c));
        acc += std::log(z) - logits(i, y);
      } else {
        for (Index c = 0; c < logits.cols(); ++c) {
          const double r = logits(i, c) - (c == y ? 1.0 : 0.0);
          acc += r * r;
        }
      }
    }
    total += kind == LossKind::CrossEntropy ? acc / logits.rows() : acc / logits.size();
  }
  return total / static_cast<double>(batch.size());
}

// Central differences on up to `per_tensor` entries of every trainable tensor.
double max_fd_error(const Model& model, const Batch& batch, LossKind kind, Index per_tensor, std::uint64_t seed) {
  const LossAndGrads lg = loss_and_grads(model, batch, kind);
  Model probe = model;
  auto params = probe.weights.tensors();
  auto extra = probe.position.tensors();
  params.insert(params.end(), extra.begin(), extra.end());
  const auto grads_w = lg.grads.weights.tensors();
  const auto grads_p = lg.grads.position.tensors();
  std::vector<ConstNamedTensor> grads(grads_w.begin(), grads_w.end());
  grads.insert(grads.end(), grads_p.begin(), grads_p.end());
  Rng rng(seed);
  double worst = 0.0;
  const double eps = 1e-5;
  for (std::size_t t = 0; t < params.size(); ++t) {
    Matrix& value = *params[t].value;
    for (Index e = 0; e < std::min(per_tensor, value.size()); ++e) {
      const Index idx = static_cast<Index>(rng.below(static_cast<std::uint64_t>(value.size())));
      const double saved = value.data()[idx];
      value.data()[idx] = saved + eps;
      probe.position.touch();
      const double up = loss(probe, batch, kind);
      value.data()[idx] = saved - eps;
      probe.position.touch();
      const double down = loss(probe, batch, kind);
      value.data()[idx] = saved;
      probe.position.touch();
      const double fd = (up - down) / (2 * eps);
      const double an = grads[t].value->data()[idx];
      worst = std::max(worst, std::abs(an - fd) / std::max({std::abs(an), std::abs(fd), 1e-5}));
    }
  }
  return worst;
}

}  // namespace

TEST(Forward, MatchesStraightLineOracle) {
  for (const auto& v : variant_names()) {
    ModelConfig c = model_config(v);
    if (auto* shaw = std::get_if<scheme::ShawRel>(&c.attention.scheme)) shaw->with_value = true;
    const Model m = random_model(c, 1);
    for (const auto& ex : random_batch(c, 2, 2)) {
      EXPECT_LE(oracle::max_abs_diff(forward(m, ex.tokens), reference_forward(m, ex)), 1e-10) << v;
    }
  }
}

TEST(Forward, SegmentsMatchOracle) {
  for (auto loc : {SegmentLocation::Input, SegmentLocation::PerHead}) {
    ModelConfig c = model_config("diet-rel");
    c.attention.num_segments = 3;
    c.attention.segment_location = loc;
    const Model m = random_model(c, 3);
    const SegmentMap segs = SegmentMap::runs({2, 3, 3});
    for (const auto& ex : random_batch(c, 2, 4, &segs)) {
      EXPECT_LE(oracle::max_abs_diff(forward(m, ex.tokens, &segs), reference_forward(m, ex)), 1e-10);
    }
  }
}

TEST(Forward, CachedEqualsUncachedBitwise) {
  for (const char* v : {"diet-abs", "diet-rel", "t5", "linformer-diet-abs"}) {
    const ModelConfig c = model_config(v);
    const Model m = random_model(c, 5);
    const BiasCache cache = build_cache(m.position, c.attention.n);
    for (const auto& ex : random_batch(c, 3, 6)) {
      EXPECT_TRUE(oracle::bitwise_equal(forward(m, ex.tokens, nullptr, &cache), forward(m, ex.tokens))) << v;
    }
  }
}

TEST(Forward, PermutationEquivariantWithoutPositions) {
  const ModelConfig c = model_config("none");
  const Model m = random_model(c, 7);
  const std::vector<Index> tokens = {1, 4, 2, 0, 5, 3, 3, 1};
  const std::vector<Index> perm = {7, 2, 5, 0, 1, 6, 4, 3};
  std::vector<Index> permuted;
  for (Index p : perm) permuted.push_back(tokens[static_cast<std::size_t>(p)]);
  const Matrix out = forward(m, tokens);
  const Matrix pout = forward(m, permuted);
  for (std::size_t i = 0; i < perm.size(); ++i) {
    EXPECT_LE((pout.row(static_cast<Index>(i)) - out.row(perm[i])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(Forward, InputErrors) {
  const ModelConfig c = model_config("input-add");
  const Model m = init_model(c, 0);
  EXPECT_THROW((void)forward(m, {0, 1, 6}), InputError);
  EXPECT_THROW((void)forward(m, std::vector<Index>(9, 0)), InputError);
}

TEST(Loss, MatchesOracleForBothKinds) {
  for (const char* v : {"none", "diet-abs", "shaw"}) {
    const ModelConfig c = model_config(v);
    const Model m = random_model(c, 8);
    const Batch batch = random_batch(c, 3, 9);
    for (auto kind : {LossKind::CrossEntropy, LossKind::MeanSquared}) {
      EXPECT_NEAR(loss(m, batch, kind), reference_loss(m, batch, kind), 1e-10) << v;
      EXPECT_NEAR(loss_and_grads(m, batch, kind).loss, loss(m, batch, kind), 1e-12);
    }
  }
}

TEST(Loss, ZeroModelGivesUniformPrediction) {
  const ModelConfig c = model_config("diet-abs");
  const Model zero = zeros_like(init_model(c, 0));
  const Batch batch = random_batch(c, 2, 10);
  EXPECT_NEAR(loss(zero, batch, LossKind::CrossEntropy), std::log(5.0), 1e-12);
  EXPECT_NEAR(loss(zero, batch, LossKind::MeanSquared), 1.0 / 5.0, 1e-12);
}

TEST(Gradients, FiniteDifferencesAllVariants) {
  for (const auto& v : variant_names()) {
    ModelConfig c = model_config(v, 6);
    if (auto* shaw = std::get_if<scheme::ShawRel>(&c.attention.scheme)) shaw->with_value = true;
    const Model m = random_model(c, 11, 0.2);
    EXPECT_LE(max_fd_error(m, random_batch(c, 2, 12), LossKind::CrossEntropy, 6, 13), 1e-4) << v;
  }
}

TEST(Gradients, FiniteDifferencesSegmentsAndMse) {
  for (auto loc : {SegmentLocation::Input, SegmentLocation::PerHead}) {
    for (const char* v : {"diet-abs", "t5", "none"}) {
      ModelConfig c = model_config(v, 6);
      c.attention.num_segments = 2;
      c.attention.segment_location = loc;
      const Model m = random_model(c, 14, 0.2);
      const SegmentMap segs = SegmentMap::runs({4, 2});
      for (auto kind : {LossKind::CrossEntropy, LossKind::MeanSquared}) {
        EXPECT_LE(max_fd_error(m, random_batch(c, 2, 15, &segs), kind, 6, 16), 1e-4)
            << v << " " << segment_location_name(loc);
      }
    }
  }
}

TEST(Gradients, InputAndTableGradientsEqualBitwise) {
  const ModelConfig c = model_config("input-add");
  const Model m = random_model(c, 17);
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const Batch batch = random_batch(c, 3, 18 + seed);
    for (auto kind : {LossKind::CrossEntropy, LossKind::MeanSquared}) {
      const LossAndGrads lg = loss_and_grads(m, batch, kind);
      Matrix summed = Matrix::Zero(c.attention.n, c.attention.d);
      for (const auto& g : lg.grads.inputs) summed += g;
      EXPECT_TRUE(oracle::bitwise_equal(summed, lg.grads.position.input_table()));
    }
  }
}

TEST(Training, DeterministicGivenSeed) {
  const Task task = Task::selective_copy(8, 4, 1);
  AttentionConfig a = small_config("diet-rel");
  const ModelConfig c = model_config_for(task, a);
  TrainOptions opts;
  opts.steps = 20;
  opts.seed = 3;
  Model m1 = init_model(c, 3), m2 = init_model(c, 3);
  const History h1 = train(m1, task, opts);
  const History h2 = train(m2, task, opts);
  EXPECT_EQ(h1.to_csv(), h2.to_csv());
  EXPECT_EQ(h1.final_metric, h2.final_metric);
  opts.seed = 4;
  Model m3 = init_model(c, 3);
  EXPECT_NE(train(m3, task, opts).to_csv(), h1.to_csv());
}

TEST(Training, ZeroLearningRateKeepsLossConstant) {
  const Task task = Task::position_probe(8);
  const ModelConfig c = model_config_for(task, small_config("diet-abs"));
  Model m = init_model(c, 1);
  TrainOptions opts;
  opts.steps = 5;
  opts.optimizer = Sgd{0.0};
  const History h = train(m, task, opts);
  for (const auto& r : h.steps) EXPECT_EQ(r.loss, h.steps.front().loss);
}

TEST(Training, LossDecreasesOnSelectiveCopy) {
  const Task task = Task::selective_copy(8, 4, 2);
  const ModelConfig c = model_config_for(task, small_config("diet-rel"));
  Model m = init_model(c, 2);
  TrainOptions opts;
  opts.steps = 300;
  opts.optimizer = Adam{1e-2};
  const History h = train(m, task, opts);
  EXPECT_LT(h.steps.back().loss, 0.5 * h.steps.front().loss);
}

TEST(Training, DivergenceRaisesWithStep) {
  const Task task = Task::selective_copy(8, 4, 1);
  const ModelConfig c = model_config_for(task, small_config("none"));
  Model m = init_model(c, 0);
  TrainOptions opts;
  opts.steps = 50;
  opts.loss = LossKind::MeanSquared;
  opts.optimizer = Sgd{1e9};
  try {
    (void)train(m, task, opts);
    FAIL() << "expected DivergenceError";
  } catch (const DivergenceError& e) {
    EXPECT_GE(e.step(), 1);
  }
}

TEST(Tasks, PositionProbeLayout) {
  const Task task = Task::position_probe(8, 4);
  Rng rng(0);
  const Example ex = task.sample(rng);
  EXPECT_EQ(ex.tokens, (std::vector<Index>{0, 1, 1, 1, 1, 1, 1, 1}));
  EXPECT_EQ(ex.labels, (std::vector<Index>{0, 1, 2, 3, 0, 1, 2, 3}));
}

TEST(Tasks, SelectiveCopyLabelsAreShiftedTokens) {
  const Task task = Task::selective_copy(10, 7, 3);
  Rng rng(1);
  for (const auto& ex : task.batch(5, rng)) {
    for (std::size_t i = 0; i < 10; ++i) EXPECT_EQ(ex.labels[i], ex.tokens[(i + 3) % 10]);
  }
}

TEST(Tasks, SegmentRuns) {
  Task task = Task::selective_copy(10, 4, 1);
  task.num_segments = 3;
  Rng rng(2);
  const Example ex = task.sample(rng);
  ASSERT_TRUE(ex.segments.has_value());
  EXPECT_EQ(ex.segments->ids(), (std::vector<Index>{0, 0, 0, 1, 1, 1, 2, 2, 2, 2}));
}

TEST(Checkpoint, RoundTripBitwise) {
  const auto dir = testing_util::temp_dir("checkpoint");
  for (const char* v : {"diet-abs", "shaw", "input-add", "linformer-diet-abs"}) {
    ModelConfig c = model_config(v);
    c.attention.sharing = Sharing::HeadWise;
    const Model m = random_model(c, 20);
    save_checkpoint(m, dir / v, {{"note", "x"}});
    const Model back = load_checkpoint(dir / v);
    EXPECT_EQ(to_json(back.config), to_json(m.config));
    const auto a = m.weights.tensors();
    const auto b = back.weights.tensors();
    for (std::size_t i = 0; i < a.size(); ++i) EXPECT_TRUE(oracle::bitwise_equal(*a[i].value, *b[i].value));
    const std::vector<Index> tokens = {0, 1, 2, 3, 4, 5, 0, 1};
    EXPECT_TRUE(oracle::bitwise_equal(forward(m, tokens), forward(back, tokens))) << v;
  }
  EXPECT_THROW((void)load_checkpoint(dir / "absent"), IoError);
}

TEST(ConfigJson, RoundTripAndValidation) {
  ModelConfig c = model_config("t5");
  c.attention.scale = 2.5;
  EXPECT_EQ(to_json(model_config_from_json(to_json(c))), to_json(c));
  auto j = to_json(c);
  j["attention"]["heads"] = 0;
  EXPECT_THROW((void)model_config_from_json(j), ConfigError);
  j = to_json(c);
  j["attention"].erase("d");
  EXPECT_THROW((void)model_config_from_json(j), ConfigError);
}

TEST(RankStress, RealizableInputAdditiveTargetIsFit) {
  AttentionConfig c;
  c.n = 16;
  c.d = 16;
  c.heads = 1;
  c.d_h = 2;
  c.layers = 1;
  c.scheme = scheme::InputAdditiveLearned{};
  const Matrix x = rank_stress_input(c, 0);
  Rng rng(99);
  const Matrix p = randn_matrix(16, 16, 0.3, rng);
  const Matrix wq = randn_matrix(16, 2, 1.0, rng);
  const Matrix wk = randn_matrix(16, 2, 1.0, rng);
  Matrix target = (x + p) * wq * wk.transpose() * (x + p).transpose() / c.effective_scale();
  target /= target.norm() / 16.0;
  RankStressOptions opts;
  opts.steps = 5000;
  const RankStressResult r = rank_stress_fit(c, target, opts);
  EXPECT_EQ(r.target_rank, 2);
  EXPECT_LE(r.residual, 1e-3);
}

TEST(RankStress, InputAdditiveCannotBeatEckartYoung) {
  AttentionConfig c;
  c.n = 12;
  c.d = 12;
  c.heads = 1;
  c.d_h = 2;
  c.layers = 1;
  c.scheme = scheme::InputAdditiveLearned{};
  const Matrix target = randn_matrix(12, 12, 1.0, 5);
  RankStressOptions opts;
  opts.steps = 1000;
  const RankStressResult r = rank_stress_fit(c, target, opts);
  EXPECT_GE(r.residual, oracle::eckart_young(target, 2) - 1e-9);
  EXPECT_LE(r.achieved_rank, 2);
}

TEST(RankStress, Errors) {
  AttentionConfig c = small_config("diet-rel");
  EXPECT_THROW((void)rank_stress_fit(c, Matrix::Zero(8, 8), {}), SchemeError);
  set_variant(c, "diet-abs");
  EXPECT_THROW((void)rank_stress_fit(c, Matrix::Zero(7, 8), {}), DimensionError);
}
