// SPDX-License-Identifier: Apache-2.0
//
// A small pre-layer-norm transformer encoder with a per-position classifier
// and hand-written reverse-mode gradients for every position scheme.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diet/archive.hpp"
#include "diet/attention.hpp"
#include "diet/config.hpp"
#include "diet/encodings.hpp"

namespace diet {

struct ModelConfig {
  AttentionConfig attention;
  Index vocab = 64;
  Index num_classes = 32;
  Index d_ff = 0;  ///< 0 selects 4 d

  Index ff_width() const { return d_ff > 0 ? d_ff : 4 * attention.d; }
  void validate() const;
};

struct BlockWeights {
  LayerWeights attention;
  Matrix ln1_gain, ln1_bias;  ///< 1 x d
  Matrix ln2_gain, ln2_bias;  ///< 1 x d
  Matrix ff_in, ff_in_bias;   ///< d x d_ff, 1 x d_ff
  Matrix ff_out, ff_out_bias; ///< d_ff x d, 1 x d
};

struct ModelWeights {
  Matrix token_embedding;  ///< vocab x d
  std::vector<BlockWeights> blocks;
  Matrix final_gain, final_bias;       ///< 1 x d
  Matrix classifier, classifier_bias;  ///< d x num_classes, 1 x num_classes

  std::vector<NamedTensor> tensors();
  std::vector<ConstNamedTensor> tensors() const;
};

struct Model {
  ModelConfig config;
  ModelWeights weights;
  PositionParams position;

  Index parameter_count() const;
};

/// Weights ~ normal(0, 0.02^2), unit layer-norm gains, zero biases; position
/// parameters from init_params. Deterministic in `seed`.
Model init_model(const ModelConfig& config, std::uint64_t seed);

/// Same shapes as `model`, every trainable tensor zero.
Model zeros_like(const Model& model);

/// Sets every trainable tensor (position parameters included) to
/// normal(0, stddev^2), leaving layer-norm gains at 1 + noise. Used to move
/// gradient checks away from the symmetric initial point.
void randomize(Model& model, double stddev, std::uint64_t seed);

struct Example {
  std::vector<Index> tokens;
  std::vector<Index> labels;
  std::optional<SegmentMap> segments;
};
using Batch = std::vector<Example>;

/// Token embedding rows for `tokens`; throws InputError on an out-of-range id.
Matrix embed_tokens(const Model& model, const std::vector<Index>& tokens);

/// Token embeddings plus the input-additive table and input segment embeddings.
Matrix model_input(const Model& model, const Eigen::Ref<const Matrix>& embedded, const SegmentMap* segmap);

/// Logits (n x num_classes) from the first block's input.
Matrix forward_input(const Model& model, const Eigen::Ref<const Matrix>& input, const SegmentMap* segmap,
                     const BiasCache* cache = nullptr);

/// Logits (n x num_classes) for one sequence.
Matrix forward(const Model& model, const std::vector<Index>& tokens, const SegmentMap* segmap = nullptr,
               const BiasCache* cache = nullptr);

/// Score matrix of one head split into its input-dependent part and the
/// additive bias. scores == token + bias (bias absent for input-side schemes).
struct HeadScores {
  Matrix scores;
  Matrix token;
  std::optional<Matrix> bias;
};

/// Per-(layer, head) score matrices of one sequence (pre-softmax, scale folded in).
std::vector<std::vector<HeadScores>> attention_scores(const Model& model, const std::vector<Index>& tokens,
                                                      const SegmentMap* segmap = nullptr);

enum class LossKind { CrossEntropy, MeanSquared };

struct Gradients {
  ModelWeights weights;
  PositionParams position;
  /// Gradient with respect to each example's token-embedding matrix X.
  std::vector<Matrix> inputs;
};

struct LossAndGrads {
  double loss = 0.0;
  Gradients grads;
  /// Fraction of positions whose arg-max logit equals the label.
  double accuracy = 0.0;
};

/// Batch-mean loss. Throws NumericError naming the block that produced a
/// non-finite activation.
double loss(const Model& model, const Batch& batch, LossKind kind);

/// Loss with each example's token-embedding matrix supplied directly.
double loss_from_inputs(const Model& model, const Batch& batch, const std::vector<Matrix>& embedded, LossKind kind);

LossAndGrads loss_and_grads(const Model& model, const Batch& batch, LossKind kind);

double accuracy(const Model& model, const Batch& batch);

/// Synthetic sequence tasks.
struct Task {
  enum class Kind { PositionProbe, SelectiveCopy };

  Kind kind = Kind::PositionProbe;
  Index n = 32;
  Index vocab = 2;
  Index num_classes = 32;
  Index shift = 1;  ///< SelectiveCopy: label at i is the token at (i + shift) mod n
  /// Above 1, every example carries equal contiguous segment runs.
  Index num_segments = 1;

  /// Position 0 holds a marker token, every other position the same filler
  /// token; the label at i is i mod num_classes.
  static Task position_probe(Index n, Index num_classes = 0);
  static Task selective_copy(Index n, Index vocab, Index shift);

  Example sample(Rng& rng) const;
  Batch batch(Index size, Rng& rng) const;
  std::string name() const;
};

/// Model configuration whose vocabulary and class count fit `task`.
ModelConfig model_config_for(const Task& task, const AttentionConfig& attention);

struct Sgd {
  double lr = 1e-2;
};
struct Adam {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};
using Optimizer = std::variant<Sgd, Adam>;

/// Applies gradient updates to every trainable tensor of a model.
class OptimizerState {
 public:
  explicit OptimizerState(Optimizer optimizer) : optimizer_(optimizer) {}
  void step(Model& model, Gradients& grads);

 private:
  Optimizer optimizer_;
  std::vector<Matrix> first_;
  std::vector<Matrix> second_;
  long t_ = 0;
};

struct TrainOptions {
  long steps = 2000;
  Optimizer optimizer = Adam{};
  Index batch_size = 8;
  LossKind loss = LossKind::CrossEntropy;
  std::uint64_t seed = 0;
  Index eval_batch = 16;
};

struct StepRecord {
  long step = 0;
  double loss = 0.0;
  double metric = 0.0;  ///< accuracy on the training batch
};

struct History {
  std::vector<StepRecord> steps;
  double final_metric = 0.0;  ///< accuracy on a held-out batch after training

  /// "step,loss,metric" header plus one row per step, fixed 17 significant digits.
  std::string to_csv() const;
};

/// Throws DivergenceError when the loss exceeds 1e6 or stops being finite.
History train(Model& model, const Task& task, const TrainOptions& options);

/// Score-path fitting experiment: only the parameters that shape one head's
/// score matrix are trained to minimise ||A - target||_F^2 for a fixed random
/// input. Supports input-add (A = (X+P) W_Q W_K^T (X+P)^T / s) and diet-abs
/// (A = X W_Q W_K^T X^T / s + P_Q P_K^T).
struct RankStressOptions {
  long steps = 5000;
  double lr = 1e-1;
  double final_lr = 1e-3;  ///< learning rate decays geometrically to this value
  std::uint64_t seed = 0;
};

struct RankStressResult {
  double residual = 0.0;  ///< final ||A - target||_F
  Index target_rank = 0;
  Index achieved_rank = 0;
  std::vector<double> history;  ///< residual every 100 steps
};

/// The fixed input X (n x d) used by rank_stress_fit for `seed`: a Gaussian
/// draw with orthogonalised columns scaled to norm sqrt(n).
Matrix rank_stress_input(const AttentionConfig& config, std::uint64_t seed);

RankStressResult rank_stress_fit(const AttentionConfig& config, const Eigen::Ref<const Matrix>& target,
                                 const RankStressOptions& options);

/// Checkpoint round trip through the archive format. The manifest metadata
/// carries the model configuration.
void save_checkpoint(const Model& model, const std::filesystem::path& stem, const nlohmann::json& extra = {});
Model load_checkpoint(const std::filesystem::path& stem);

nlohmann::json to_json(const AttentionConfig& config);
nlohmann::json to_json(const ModelConfig& config);
AttentionConfig attention_config_from_json(const nlohmann::json& j);
ModelConfig model_config_from_json(const nlohmann::json& j);

}  // namespace diet
