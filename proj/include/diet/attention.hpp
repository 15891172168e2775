// SPDX-License-Identifier: Apache-2.0
//
// Score construction for every position scheme. All score functions return
// matrices that are already divided by the configured scale, so the softmax
// in attention_head runs at scale 1. Position biases are added unscaled.
#pragma once

#include <vector>

#include "diet/config.hpp"
#include "diet/encodings.hpp"
#include "diet/tensor.hpp"

namespace diet {

struct HeadWeights {
  Matrix w_q;  ///< d x d_h
  Matrix w_k;  ///< d x d_h
  Matrix w_v;  ///< d x d_h
};

struct LayerWeights {
  std::vector<HeadWeights> heads;
  Matrix w_o;         ///< (heads * d_h) x d
  Matrix projection;  ///< Linformer E, k x n; empty without Linformer
};

/// Random layer weights with entries ~ normal(0, stddev^2); E ~ normal(0, 1/n).
LayerWeights init_layer_weights(const AttentionConfig& config, Rng& rng, double stddev = 0.02);

/// (q k^T) / scale. The single place token scores are formed, so every score
/// path rounds identically.
Matrix token_scores(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& k, double scale);

/// (X W_Q)(X W_K)^T / scale.
Matrix scores_vanilla(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, double scale);

/// Vanilla scores of X + P.
Matrix scores_input_additive(const Eigen::Ref<const Matrix>& x, const Eigen::Ref<const Matrix>& p,
                             const HeadWeights& w, double scale);

/// Vanilla scores plus an additive bias (cached or freshly built).
Matrix scores_with_bias(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const Eigen::Ref<const Matrix>& bias,
                        double scale);

/// Token scores plus P_Q P_K^T and the per-head segment term.
Matrix scores_diet_abs(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params,
                       Index layer, Index head, const SegmentMap* segmap, double scale);

/// Token scores plus the Toeplitz bias R_{i-j} and the per-head segment term.
Matrix scores_diet_rel(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params,
                       Index layer, Index head, const SegmentMap* segmap, double scale);

/// Token scores plus the bucketed relative bias and the per-head segment term.
Matrix scores_t5(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const PositionParams& params, Index layer,
                 Index head, const SegmentMap* segmap, double scale);

/// Index of offset j - i into a (2 clip + 1)-row relative embedding table.
inline Index shaw_index(Index i, Index j, Index clip) {
  const Index offset = j - i;
  return (offset < -clip ? -clip : (offset > clip ? clip : offset)) + clip;
}

/// rel(i, j) = q_i . a_{clamp(j - i)}, unscaled.
Matrix shaw_key_term(const Eigen::Ref<const Matrix>& q, const Eigen::Ref<const Matrix>& a_k, Index clip,
                     Index keys);

/// A_ij = (X_i W_Q)(X_j W_K + a_{clamp(j-i)})^T / scale.
Matrix scores_shaw(const Eigen::Ref<const Matrix>& x, const HeadWeights& w, const Eigen::Ref<const Matrix>& a_k,
                   Index clip, double scale);

/// out_i = sum_j probs(i, j) a_{clamp(j - i)}.
Matrix shaw_value_term(const Eigen::Ref<const Matrix>& probs, const Eigen::Ref<const Matrix>& a_v, Index clip);

/// n x k scores (X_i W_Q)((E X)_j W_K)^T / scale + (P_Q P_K^T)_ij. Throws
/// ConfigError when E does not compress the sequence (k >= n).
Matrix scores_linformer_diet_abs(const Eigen::Ref<const Matrix>& x, const HeadWeights& w,
                                 const Eigen::Ref<const Matrix>& projection, const PositionParams& params,
                                 Index layer, Index head, double scale);

/// softmax_rows(scores) * (values W_V). `values` is X, or E X under Linformer.
Matrix attention_head(const Eigen::Ref<const Matrix>& scores, const Eigen::Ref<const Matrix>& values,
                      const Eigen::Ref<const Matrix>& w_v);

/// Scores of one head under whatever scheme `params` carries. `cache`, when
/// given, supplies the additive bias instead of rebuilding it.
Matrix head_scores(const Eigen::Ref<const Matrix>& x, const LayerWeights& weights, const PositionParams& params,
                   Index layer, Index head, const SegmentMap* segmap, const AttentionConfig& config,
                   const BiasCache* cache = nullptr);

/// Concatenated head outputs times W_O; n x d. Input-additive schemes expect
/// the caller to have added the table to X already.
Matrix multi_head(const Eigen::Ref<const Matrix>& x, const LayerWeights& weights, const PositionParams& params,
                  Index layer, const SegmentMap* segmap, const AttentionConfig& config,
                  const BiasCache* cache = nullptr);

}  // namespace diet
