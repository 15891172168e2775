// SPDX-License-Identifier: Apache-2.0
#include <gtest/gtest.h>

#include <cmath>

#include "diet/attention.hpp"
#include "helpers.hpp"
#include "oracles.hpp"

using namespace diet;
using testing_util::fill_random;
using testing_util::small_config;

namespace {

struct Fixture {
  AttentionConfig config;
  LayerWeights weights;
  PositionParams params;
  Matrix x;
};

Fixture make(const std::string& variant, std::uint64_t seed, Index n = 8) {
  Fixture f;
  f.config = small_config(variant, n);
  if (f.config.linformer()) f.config.linformer_k = n / 2;
  Rng rng(seed);
  f.weights = init_layer_weights(f.config, rng, 0.5);
  f.params = PositionParams(f.config);
  fill_random(f.params, 1.0, seed + 1);
  f.x = randn_matrix(n, f.config.d, 1.0, rng);
  return f;
}

double dot(const Matrix& a, Index i, const Matrix& b, Index j) {
  double acc = 0.0;
  for (Index c = 0; c < a.cols(); ++c) acc += a(i, c) * b(j, c);
  return acc;
}

// Scores entry by entry from the textbook definition of each scheme.
Matrix reference_scores(const Fixture& f, Index layer, Index head) {
  const auto& w = f.weights.heads[static_cast<std::size_t>(head)];
  const double s = std::sqrt(static_cast<double>(f.config.d));
  const Index n = f.x.rows();
  Matrix input = f.x;
  if (f.params.input_table().size() > 0) input = f.x + f.params.input_table();
  const Matrix q = oracle::matmul(input, w.w_q);
  Matrix keys_in = input;
  if (f.config.linformer()) keys_in = oracle::matmul(f.weights.projection, input);
  const Matrix k = oracle::matmul(keys_in, w.w_k);
  const auto& slot_index = f.params.slot_count() > 0 ? f.params.slot_index(layer, head) : 0;
  Matrix out(n, k.rows());
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < k.rows(); ++j) {
      double v = dot(q, i, k, j);
      const auto& sch = f.params.scheme();
      if (const auto* shaw = std::get_if<scheme::ShawRel>(&sch)) {
        const Index off = std::clamp<Index>(j - i, -shaw->clip, shaw->clip);
        v += dot(q, i, f.params.slot(slot_index).shaw_key, off + shaw->clip);
      }
      v /= s;
      if (std::holds_alternative<scheme::DietAbs>(sch)) {
        v += dot(f.params.slot(slot_index).p_q, i, f.params.slot(slot_index).p_k, j);
      } else if (std::holds_alternative<scheme::DietRel>(sch)) {
        v += f.params.slot(slot_index).rel(0, i - j + f.config.n - 1);
      } else if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&sch)) {
        v += f.params.slot(slot_index).buckets(0, t5_bucket(i - j, t5->num_buckets, t5->max_distance));
      }
      out(i, j) = v;
    }
  }
  return out;
}

}  // namespace

TEST(Scores, EveryVariantMatchesEntrywiseOracle) {
  for (const auto& v : variant_names()) {
    const Fixture f = make(v, 11);
    Matrix x = f.x;
    if (f.params.input_table().size() > 0) x += f.params.input_table();
    for (Index l = 0; l < 2; ++l) {
      for (Index h = 0; h < 2; ++h) {
        const Matrix got = head_scores(x, f.weights, f.params, l, h, nullptr, f.config);
        EXPECT_LE(oracle::max_abs_diff(got, reference_scores(f, l, h)), 1e-12) << v << " " << l << "," << h;
      }
    }
  }
}

TEST(Scores, NamedEntryPointsAgreeWithDispatch) {
  const Fixture abs = make("diet-abs", 1);
  const double s = abs.config.effective_scale();
  EXPECT_TRUE(oracle::bitwise_equal(scores_diet_abs(abs.x, abs.weights.heads[1], abs.params, 1, 1, nullptr, s),
                                    head_scores(abs.x, abs.weights, abs.params, 1, 1, nullptr, abs.config)));
  const Fixture rel = make("diet-rel", 2);
  EXPECT_TRUE(oracle::bitwise_equal(scores_diet_rel(rel.x, rel.weights.heads[0], rel.params, 0, 0, nullptr, s),
                                    head_scores(rel.x, rel.weights, rel.params, 0, 0, nullptr, rel.config)));
  const Fixture t5 = make("t5", 3);
  EXPECT_TRUE(oracle::bitwise_equal(scores_t5(t5.x, t5.weights.heads[0], t5.params, 1, 0, nullptr, s),
                                    head_scores(t5.x, t5.weights, t5.params, 1, 0, nullptr, t5.config)));
  const Fixture lin = make("linformer-diet-abs", 4);
  EXPECT_TRUE(oracle::bitwise_equal(
      scores_linformer_diet_abs(lin.x, lin.weights.heads[1], lin.weights.projection, lin.params, 0, 1, s),
      head_scores(lin.x, lin.weights, lin.params, 0, 1, nullptr, lin.config)));
  EXPECT_THROW((void)scores_diet_rel(abs.x, abs.weights.heads[0], abs.params, 0, 0, nullptr, s), SchemeError);
}

TEST(Scores, InputAdditiveEqualsVanillaOfSum) {
  const Fixture f = make("input-add", 5);
  const auto& w = f.weights.heads[0];
  const double s = f.config.effective_scale();
  EXPECT_TRUE(oracle::bitwise_equal(scores_input_additive(f.x, f.params.input_table(), w, s),
                                    scores_vanilla(f.x + f.params.input_table(), w, s)));
  EXPECT_THROW((void)scores_input_additive(f.x, Matrix::Zero(3, 8), w, s), DimensionError);
}

TEST(Scores, InputAdditiveRankBoundedByHeadWidth) {
  auto c = small_config("input-add", 16);
  Rng rng(6);
  for (int t = 0; t < 20; ++t) {
    const LayerWeights w = init_layer_weights(c, rng, 1.0);
    const Matrix x = randn_matrix(16, 8, 1.0, rng);
    const Matrix p = randn_matrix(16, 8, 1.0, rng);
    const Matrix a = scores_input_additive(x, p, w.heads[0], 1.0);
    EXPECT_LE(oracle::gauss_rank(a), 4);
  }
}

TEST(Scores, DimensionErrors) {
  const Fixture f = make("none", 7);
  EXPECT_THROW((void)scores_vanilla(Matrix::Zero(8, 5), f.weights.heads[0], 1.0), DimensionError);
  EXPECT_THROW((void)scores_with_bias(f.x, f.weights.heads[0], Matrix::Zero(8, 7), 1.0), DimensionError);
  EXPECT_THROW((void)attention_head(Matrix::Zero(8, 7), f.x, f.weights.heads[0].w_v), DimensionError);
}

TEST(Shaw, ClippingSharesFarOffsets) {
  const Fixture f = make("shaw", 8, 12);
  const auto& a_k = f.params.slot(0, 0).shaw_key;
  const Matrix q = randn_matrix(12, 4, 1.0, 9);
  const Matrix rel = shaw_key_term(q, a_k, 3, 12);
  for (Index j = 4; j < 12; ++j) EXPECT_EQ(rel(0, j), rel(0, 3));
  for (Index j = 0; j + 3 < 11; ++j) EXPECT_EQ(rel(11, j), rel(11, 0));
  EXPECT_EQ(shaw_index(0, 0, 3), 3);
  EXPECT_EQ(shaw_index(5, 0, 3), 0);
  EXPECT_EQ(shaw_index(0, 5, 3), 6);
  EXPECT_THROW((void)shaw_key_term(q, Matrix::Zero(5, 4), 3, 12), DimensionError);
}

TEST(Shaw, ValueTermMatchesLoopOracle) {
  Rng rng(10);
  const Matrix probs = softmax_rows(randn_matrix(9, 9, 1.0, rng));
  const Matrix a_v = randn_matrix(5, 3, 1.0, rng);
  const Matrix got = shaw_value_term(probs, a_v, 2);
  for (Index i = 0; i < 9; ++i) {
    for (Index c = 0; c < 3; ++c) {
      double acc = 0.0;
      for (Index j = 0; j < 9; ++j) acc += probs(i, j) * a_v(std::clamp<Index>(j - i, -2, 2) + 2, c);
      EXPECT_NEAR(got(i, c), acc, 1e-14);
    }
  }
}

TEST(Linformer, ShapesAndErrors) {
  const Fixture f = make("linformer-diet-abs", 12, 16);
  EXPECT_EQ(f.weights.projection.rows(), 8);
  EXPECT_EQ(f.weights.projection.cols(), 16);
  EXPECT_EQ(f.params.slot(0, 0).p_k.rows(), 8);
  const Matrix s = head_scores(f.x, f.weights, f.params, 0, 0, nullptr, f.config);
  EXPECT_EQ(s.rows(), 16);
  EXPECT_EQ(s.cols(), 8);
  EXPECT_EQ(multi_head(f.x, f.weights, f.params, 0, nullptr, f.config).rows(), 16);
  const double sc = f.config.effective_scale();
  EXPECT_THROW((void)scores_linformer_diet_abs(f.x, f.weights.heads[0], Matrix::Zero(16, 16), f.params, 0, 0, sc),
               ConfigError);
  EXPECT_THROW((void)scores_linformer_diet_abs(f.x.topRows(12), f.weights.heads[0], f.weights.projection, f.params,
                                               0, 0, sc),
               DimensionError);

  AttentionConfig bad = f.config;
  bad.linformer_k = 16;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad.linformer_k = 4;
  set_variant(bad, "diet-rel");
  bad.linformer_k = 4;
  EXPECT_THROW(bad.validate(), ConfigError);
  bad = f.config;
  bad.num_segments = 2;
  bad.segment_location = SegmentLocation::PerHead;
  EXPECT_THROW(bad.validate(), ConfigError);
}

TEST(Cache, BitwiseEqualToUncachedScoresAndOutputs) {
  for (const char* v : {"diet-abs", "diet-rel", "t5", "linformer-diet-abs"}) {
    const Fixture f = make(v, 13, 16);
    const BiasCache cache = build_cache(f.params, 16);
    for (Index l = 0; l < 2; ++l) {
      EXPECT_TRUE(oracle::bitwise_equal(multi_head(f.x, f.weights, f.params, l, nullptr, f.config, &cache),
                                        multi_head(f.x, f.weights, f.params, l, nullptr, f.config)))
          << v;
      for (Index h = 0; h < 2; ++h) {
        EXPECT_TRUE(oracle::bitwise_equal(head_scores(f.x, f.weights, f.params, l, h, nullptr, f.config, &cache),
                                          head_scores(f.x, f.weights, f.params, l, h, nullptr, f.config)))
            << v;
      }
    }
  }
}

TEST(Cache, StaleCacheRejectedByAttention) {
  Fixture f = make("diet-abs", 14);
  const BiasCache cache = build_cache(f.params, 8);
  f.params.mutable_slot(0).p_q(0, 0) += 1.0;
  EXPECT_THROW((void)multi_head(f.x, f.weights, f.params, 0, nullptr, f.config, &cache), StalenessError);
}

TEST(MultiHead, MatchesPerHeadOracle) {
  for (const char* v : {"none", "diet-rel", "shaw"}) {
    Fixture f = make(v, 15);
    if (auto* shaw = std::get_if<scheme::ShawRel>(&f.config.scheme)) {
      shaw->with_value = true;
      f.params = PositionParams(f.config);
      fill_random(f.params, 1.0, 16);
    }
    const Matrix got = multi_head(f.x, f.weights, f.params, 1, nullptr, f.config);
    Matrix concat(8, 8);
    for (Index h = 0; h < 2; ++h) {
      const Matrix probs = oracle::softmax_rows(reference_scores(f, 1, h));
      Matrix out = oracle::matmul(probs, oracle::matmul(f.x, f.weights.heads[static_cast<std::size_t>(h)].w_v));
      if (const auto* shaw = std::get_if<scheme::ShawRel>(&f.config.scheme)) {
        out += shaw_value_term(probs, f.params.slot(1, h).shaw_value, shaw->clip);
      }
      concat.middleCols(h * 4, 4) = out;
    }
    EXPECT_LE(oracle::max_abs_diff(got, oracle::matmul(concat, f.weights.w_o)), 1e-12) << v;
  }
}

TEST(MultiHead, PermutationEquivariantWithoutPositions) {
  const Fixture f = make("none", 17);
  std::vector<Index> perm = {3, 0, 7, 1, 6, 2, 5, 4};
  Matrix px(8, 8);
  for (Index i = 0; i < 8; ++i) px.row(i) = f.x.row(perm[static_cast<std::size_t>(i)]);
  const Matrix out = multi_head(f.x, f.weights, f.params, 0, nullptr, f.config);
  const Matrix pout = multi_head(px, f.weights, f.params, 0, nullptr, f.config);
  for (Index i = 0; i < 8; ++i) {
    EXPECT_LE((pout.row(i) - out.row(perm[static_cast<std::size_t>(i)])).cwiseAbs().maxCoeff(), 1e-12);
  }
}

TEST(PerHeadSegments, AddSegmentMatrixToScores) {
  auto c = small_config("shaw");
  c.num_segments = 2;
  c.segment_location = SegmentLocation::PerHead;
  Rng rng(18);
  const LayerWeights w = init_layer_weights(c, rng, 0.5);
  PositionParams p(c);
  fill_random(p, 1.0, 19);
  const Matrix x = randn_matrix(8, 8, 1.0, rng);
  const SegmentMap segs = SegmentMap::runs({5, 3});
  const Matrix with = head_scores(x, w, p, 0, 1, &segs, c);
  const Matrix without = head_scores(x, w, p, 0, 1, nullptr, c);
  EXPECT_LE(oracle::max_abs_diff(with - without, segment_bias(p.slot(0, 1).segment, segs)), 1e-12);
}
