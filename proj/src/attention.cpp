// SPDX-License-Identifier: Apache-2.0
#include "diet/attention.hpp"

#include <cmath>

namespace diet {

namespace {

void check_input(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const char* what) {
  if (x.cols() != w.w_q.rows() || x.cols() != w.w_k.rows()) {
    throw DimensionError(std::string(what) + ": input " + shape_str(x) + " does not match projections " +
                         shape_str(w.w_q) + " / " + shape_str(w.w_k));
  }
  if (w.w_q.cols() != w.w_k.cols()) {
    throw DimensionError(std::string(what) + ": query " + shape_str(w.w_q) + " and key " + shape_str(w.w_k) +
                         " projections differ in width");
  }
}

void add_bias(Matrix& scores, const Eigen::Ref<const Matrix>& bias) {
  if (bias.rows() != scores.rows() || bias.cols() != scores.cols()) {
    throw DimensionError("bias " + shape_str(bias) + " does not match scores " + shape_str(scores));
  }
  scores += bias;
}

}  // namespace

LayerWeights init_layer_weights(const AttentionConfig& config, Rng& rng, double stddev) {
  LayerWeights layer;
  for (Index h = 0; h < config.heads; ++h) {
    HeadWeights head;
    head.w_q = randn_matrix(config.d, config.d_h, stddev, rng);
    head.w_k = randn_matrix(config.d, config.d_h, stddev, rng);
    head.w_v = randn_matrix(config.d, config.d_h, stddev, rng);
    layer.heads.push_back(std::move(head));
  }
  layer.w_o = randn_matrix(config.heads * config.d_h, config.d, stddev, rng);
  if (config.linformer_k) {
    layer.projection = randn_matrix(*config.linformer_k, config.n, 1.0 / std::sqrt(static_cast<double>(config.n)), rng);
  }
  return layer;
}

Matrix token_scores(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& k, double scale) {
  if (q.cols() != k.cols()) throw DimensionError("token_scores: query " + shape_str(q) + " vs key " + shape_str(k));
  Matrix scores = q * k.transpose();
  scores /= scale;
  return scores;
}

Matrix scores_vanilla(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, double scale) {
  check_input(x, w, "scores_vanilla");
  const Matrix q = x * w.w_q;
  const Matrix k = x * w.w_k;
  return token_scores(q, k, scale);
}

Matrix scores_input_additive(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& p,
                             const HeadWeights& w, double scale) {
  if (p.rows() != x.rows() || p.cols() != x.cols()) {
    throw DimensionError("scores_input_additive: position table " + shape_str(p) + " vs input " + shape_str(x));
  }
  const Matrix summed = x + p;
  return scores_vanilla(summed, w, scale);
}

Matrix scores_with_bias(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const Eigen::Ref<const Matrix>& bias,
                        double scale) {
  Matrix scores = scores_vanilla(x, w, scale);
  add_bias(scores, bias);
  return scores;
}

namespace {

Matrix bias_scheme_scores(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params,
                          Index layer, Index head, const SegmentMap* segmap, double scale, const char* what,
                          bool matches) {
  if (!matches) throw SchemeError(std::string(what) + ": parameters carry scheme '" + scheme_name(params.scheme()) + "'");
  return scores_with_bias(x, w, positional_bias(params, layer, head, x.rows(), segmap), scale);
}

}  // namespace

Matrix scores_diet_abs(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params,
                       Index layer, Index head, const SegmentMap* segmap, double scale) {
  return bias_scheme_scores(x, w, params, layer, head, segmap, scale, "scores_diet_abs",
                            std::holds_alternative<scheme::DietAbs>(params.scheme()));
}

Matrix scores_diet_rel(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params,
                       Index layer, Index head, const SegmentMap* segmap, double scale) {
  return bias_scheme_scores(x, w, params, layer, head, segmap, scale, "scores_diet_rel",
                            std::holds_alternative<scheme::DietRel>(params.scheme()));
}

Matrix scores_t5(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params, Index layer,
                 Index head, const SegmentMap* segmap, double scale) {
  return bias_scheme_scores(x, w, params, layer, head, segmap, scale, "scores_t5",
                            std::holds_alternative<scheme::T5Bucketed>(params.scheme()));
}

Matrix shaw_key_term(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& a_k, Index clip, Index keys) {
  if (a_k.rows() != 2 * clip + 1 || a_k.cols() != q.cols()) {
    throw DimensionError("shaw: relative key table " + shape_str(a_k) + " needs " +
                         shape_str(2 * clip + 1, q.cols()));
  }
  const Matrix qa = q * a_k.transpose();
  Matrix rel(q.rows(), keys);
  for (Index i = 0; i < q.rows(); ++i) {
    for (Index j = 0; j < keys; ++j) rel(i, j) = qa(i, shaw_index(i, j, clip));
  }
  return rel;
}

Matrix scores_shaw(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const Eigen::Ref<const Matrix>& a_k,
                   Index clip, double scale) {
  check_input(x, w, "scores_shaw");
  const Matrix q = x * w.w_q;
  const Matrix k = x * w.w_k;
  Matrix scores = token_scores(q, k, scale);
  Matrix rel = shaw_key_term(q, a_k, clip, x.rows());
  rel /= scale;
  scores += rel;
  return scores;
}

Matrix shaw_value_term(const Eigen::Ref<const Matrix>& probs, const Eigen::Ref<const Matrix>& a_v, Index clip) {
  if (a_v.rows() != 2 * clip + 1) {
    throw DimensionError("shaw: relative value table " + shape_str(a_v) + " needs " + std::to_string(2 * clip + 1) +
                         " rows");
  }
  // Collapse the weights onto the (2 clip + 1) clipped offsets, then one product.
  Matrix per_offset = Matrix::Zero(probs.rows(), a_v.rows());
  for (Index i = 0; i < probs.rows(); ++i) {
    for (Index j = 0; j < probs.cols(); ++j) per_offset(i, shaw_index(i, j, clip)) += probs(i, j);
  }
  return per_offset * a_v;
}

Matrix scores_linformer_diet_abs(const Eigen::Ref<const Matrix>& x, const HeadWeights& w,
                                 const Eigen::Ref<const Matrix>& projection, const PositionParams& params,
                                 Index layer, Index head, double scale) {
  if (!std::holds_alternative<scheme::DietAbs>(params.scheme())) {
    throw SchemeError("scores_linformer_diet_abs: parameters carry scheme '" + scheme_name(params.scheme()) + "'");
  }
  if (projection.rows() >= projection.cols()) {
    throw ConfigError("scores_linformer_diet_abs: projection " + shape_str(projection) + " must have k < n");
  }
  if (projection.cols() != x.rows()) {
    throw DimensionError("scores_linformer_diet_abs: projection " + shape_str(projection) + " vs input " +
                         shape_str(x));
  }
  check_input(x, w, "scores_linformer_diet_abs");
  const Matrix q = x * w.w_q;
  const Matrix k = (projection * x) * w.w_k;
  Matrix scores = token_scores(q, k, scale);
  add_bias(scores, positional_bias(params, layer, head, x.rows()));
  return scores;
}

Matrix attention_head(const Eigen::Ref<const Matrix>& scores, const Eigen::Ref<const Matrix>& values,
                      const Eigen::Ref<const Matrix>& w_v) {
  if (scores.cols() != values.rows() || values.cols() != w_v.rows()) {
    throw DimensionError("attention_head: scores " + shape_str(scores) + ", values " + shape_str(values) +
                         ", W_V " + shape_str(w_v) + " are inconsistent");
  }
  const Matrix probs = softmax_rows(scores, 1.0);
  const Matrix projected = values * w_v;
  return probs * projected;
}

Matrix head_scores(const Eigen::Ref<const Matrix>& x, const LayerWeights& weights, const PositionParams& params,
                   Index layer, Index head, const SegmentMap* segmap, const AttentionConfig& config,
                   const BiasCache* cache) {
  const auto& w = weights.heads.at(static_cast<std::size_t>(head));
  const double scale = config.effective_scale();
  const auto add_head_bias = [&](Matrix& scores) {
    if (cache != nullptr) {
      add_bias(scores, cache->bias(params, layer, head));
    } else if (auto b = head_bias(params, layer, head, x.rows(), segmap)) {
      add_bias(scores, *b);
    }
  };

  Matrix scores;
  if (config.linformer()) {
    check_input(x, w, "head_scores");
    const Matrix q = x * w.w_q;
    const Matrix k = (weights.projection * x) * w.w_k;
    scores = token_scores(q, k, scale);
  } else if (const auto* shaw = std::get_if<scheme::ShawRel>(&params.scheme())) {
    scores = scores_shaw(x, w, params.slot(layer, head).shaw_key, shaw->clip, scale);
  } else {
    scores = scores_vanilla(x, w, scale);
  }
  add_head_bias(scores);
  return scores;
}

Matrix multi_head(const Eigen::Ref<const Matrix>& x, const LayerWeights& weights, const PositionParams& params,
                  Index layer, const SegmentMap* segmap, const AttentionConfig& config, const BiasCache* cache) {
  const Index heads = static_cast<Index>(weights.heads.size());
  const Index d_h = weights.heads.empty() ? 0 : weights.heads.front().w_v.cols();
  if (weights.w_o.rows() != heads * d_h) {
    throw DimensionError("multi_head: W_O " + shape_str(weights.w_o) + " does not match " + std::to_string(heads) +
                         " heads of width " + std::to_string(d_h));
  }
  Matrix projected_input;
  if (config.linformer()) projected_input = weights.projection * x;
  const Eigen::Ref<const Matrix> values = config.linformer() ? Eigen::Ref<const Matrix>(projected_input) : x;

  Matrix concat(x.rows(), heads * d_h);
  for (Index h = 0; h < heads; ++h) {
    const Matrix scores = head_scores(x, weights, params, layer, h, segmap, config, cache);
    const Matrix probs = softmax_rows(scores, 1.0);
    Matrix out = probs * (values * weights.heads[static_cast<std::size_t>(h)].w_v);
    if (const auto* shaw = std::get_if<scheme::ShawRel>(&params.scheme()); shaw && shaw->with_value) {
      out += shaw_value_term(probs, params.slot(layer, h).shaw_value, shaw->clip);
    }
    concat.middleCols(h * d_h, d_h) = out;
  }
  return concat * weights.w_o;
}

}  // namespace diet
