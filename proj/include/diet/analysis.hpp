// SPDX-License-Identifier: Apache-2.0
//
// Rank and gradient verifiers plus exporters for attention/bias heatmaps and
// position-embedding similarity statistics.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "diet/model.hpp"
#include "diet/tensor.hpp"

namespace diet {

struct RankEntry {
  Index layer = 0;
  Index head = 0;
  Index score_rank = 0;       ///< rank of the full score matrix
  Index token_rank = 0;       ///< rank of the input-dependent part
  Index positional_rank = 0;  ///< rank of the additive bias (0 when there is none)
};

struct RankReport {
  double tolerance = kDefaultRankTol;
  nlohmann::json config;
  std::vector<RankEntry> entries;

  // Filled by verify_theorem1.
  Index trials = 0;
  Index violations = 0;
  Index max_random_rank = 0;
  std::optional<std::uint64_t> counterexample_seed;
  Index witness_rank = -1;
  Index expected_witness_rank = -1;

  bool passed = true;

  nlohmann::json to_json() const;
  /// "layer,head,score_rank,token_rank,positional_rank,tolerance"
  std::string to_csv() const;
};

/// Rank-bound and witness check for attention with input-additive positions.
/// Throws ConfigError outside the hypotheses (n < d_h + d_p, n < d, d_h > d).
RankReport verify_theorem1(Index n, Index d, Index d_h, Index d_p, Index trials, std::uint64_t seed);

/// X W W^T X^T + P P^T for the constructive witness: X = [I_d; 0],
/// W_Q = W_K = [I_{d_h}; 0], P = [0; I_{d_p}] (last d_p rows identity).
Matrix theorem1_witness(Index n, Index d, Index d_h, Index d_p);

struct GradCheckGroup {
  std::string name;
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  Index entries_checked = 0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;
  /// max |grad_X L - grad_P L| with grad_X summed over the batch in order.
  double x_vs_p_max_abs_diff = 0.0;
  bool x_equals_p = false;
  double epsilon = 0.0;

  double max_rel_error() const;
  nlohmann::json to_json() const;
};

/// Relative error used by every finite-difference comparison:
/// |a - f| / max(|a|, |f|, 1e-5); the floor sits above
/// central-difference roundoff (about 1e-10 absolute at eps = 1e-5).
double gradient_rel_error(double analytic, double numeric);

struct GradCheckOptions {
  double epsilon = 1e-5;
  /// Entries checked per tensor; 0 checks every entry.
  Index max_entries = 0;
  std::uint64_t seed = 0;
  /// Test hook: adds 1 to every entry of one analytic gradient tensor.
  bool inject_fault = false;
  /// verify_theorem2 only: false skips the finite-difference cross-check.
  bool finite_differences = true;
};

/// Central finite differences for every trainable tensor.
GradCheckReport gradient_check(const Model& model, const Batch& batch, LossKind kind,
                               const GradCheckOptions& options = {});

/// Exact gradient equality between the token-embedding input X and the
/// additive table P, cross-checked with finite differences on both. Throws
/// SchemeError unless the model uses a learned input-additive table.
GradCheckReport verify_theorem2(const Model& model, const Batch& batch, LossKind kind,
                                const GradCheckOptions& options = {});

/// Ranks of every head's score matrix, its token part and its bias part, each
/// maximised over the batch.
RankReport rank_scan(const Model& model, const Batch& batch, double rel_tol = kDefaultRankTol);

/// Outcome of one named verification suite.
struct CheckResult {
  std::string name;
  bool passed = false;
  nlohmann::json details;
};

/// Bias schemes and Shaw with all position and per-head segment parameters
/// zero give head scores bitwise equal to vanilla attention, with and without
/// the bias cache, on `inputs` random inputs.
CheckResult check_zero_parameter_equivalence(const AttentionConfig& base, Index inputs, std::uint64_t seed);

/// DIET-REL bias satisfies B(i, j) == B(i + 1, j + 1) exactly for every head
/// under every sharing strategy, with random relative tables.
CheckResult check_toeplitz(const AttentionConfig& base, std::uint64_t seed);

/// Distinct positional slots per sharing strategy: L h, h and L.
CheckResult check_sharing_census(const AttentionConfig& base);

enum class ColorMap { Grayscale, BlueRed };

/// One <rect> per cell, colour linear in the value between the matrix min and
/// max, with the extremes annotated. Throws IoError if the file cannot be written.
void export_heatmap(const Eigen::Ref<const Matrix>& m, const std::filesystem::path& path,
                    ColorMap color_map = ColorMap::BlueRed, const std::string& title = "");

/// Recovers cell values from a heatmap written by export_heatmap. Accuracy is
/// limited to (max - min) / 255 by 8-bit colour quantisation.
Matrix read_heatmap(const std::filesystem::path& path);

/// Plain CSV of matrix values, 17 significant digits.
void write_matrix_csv(const Eigen::Ref<const Matrix>& m, const std::filesystem::path& path);

/// Structure of a square bias matrix along its diagonals (offset j - i).
struct DiagonalStats {
  double min = 0.0;
  double max = 0.0;
  /// Mean |B(i, j) - mean of its diagonal|.
  double along_mad = 0.0;
  /// Mean |B(i, j) - mean of the whole matrix|.
  double across_mad = 0.0;
  Index argmax_offset = 0;  ///< offset of the largest entry
  Index best_offset = 0;    ///< offset of the diagonal with the largest mean

  nlohmann::json to_json() const;
};

DiagonalStats diagonal_stats(const Eigen::Ref<const Matrix>& b);

struct CosineStats {
  std::vector<double> cosines;  ///< all n(n-1)/2 pairs, i < j in row-major order
  std::vector<Index> histogram; ///< 50 uniform bins over [-1, 1]
  double mean = 0.0;
  double stddev = 0.0;

  nlohmann::json to_json() const;
  std::string to_csv() const;  ///< "bin_lo,bin_hi,count"
};

inline constexpr Index kCosineBins = 50;

/// Pairwise cosine similarities of the rows of P. Throws NumericError naming
/// a zero row and ConfigError for fewer than two rows.
CosineStats position_cosine_stats(const Eigen::Ref<const Matrix>& p);

}  // namespace diet
