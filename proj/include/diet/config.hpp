// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "diet/tensor.hpp"

namespace diet {

namespace scheme {

struct None {};
/// Learned absolute table added to the token embeddings.
struct InputAdditiveLearned {};
/// Fixed sin/cos table added to the token embeddings.
struct InputAdditiveSinusoidal {};
/// Per-head low-rank absolute bias P_Q P_K^T of width d_p.
struct DietAbs {
  Index d_p = 8;
};
/// Per-head scalar per relative offset, full offset range.
struct DietRel {};
/// Relative key embeddings (and optionally value embeddings) clipped at `clip`.
struct ShawRel {
  Index clip = 16;
  bool with_value = false;
};
/// Log-bucketed relative scalars.
struct T5Bucketed {
  Index num_buckets = 32;
  Index max_distance = 128;
};

}  // namespace scheme

using PositionScheme = std::variant<scheme::None, scheme::InputAdditiveLearned,
                                    scheme::InputAdditiveSinusoidal, scheme::DietAbs,
                                    scheme::DietRel, scheme::ShawRel, scheme::T5Bucketed>;

enum class Sharing { None, LayerWise, HeadWise };
enum class SegmentLocation { None, Input, PerHead };

/// Short identifier used in CLI flags, archive keys and reports.
std::string scheme_name(const PositionScheme& s);
std::string sharing_name(Sharing s);
std::string segment_location_name(SegmentLocation s);
Sharing parse_sharing(const std::string& name);
SegmentLocation parse_segment_location(const std::string& name);

/// True for schemes whose position information is a pure additive score bias.
bool is_bias_scheme(const PositionScheme& s);
bool is_input_additive(const PositionScheme& s);

struct AttentionConfig {
  Index n = 32;        ///< sequence length
  Index d = 32;        ///< hidden size
  Index heads = 4;
  Index d_h = 8;       ///< per-head projection size
  Index layers = 2;
  PositionScheme scheme = scheme::None{};
  Sharing sharing = Sharing::None;
  Index num_segments = 1;
  SegmentLocation segment_location = SegmentLocation::None;
  std::optional<Index> linformer_k;
  std::optional<double> scale;  ///< defaults to sqrt(d)

  double effective_scale() const;
  bool linformer() const { return linformer_k.has_value(); }
  /// Width of the key axis of each score matrix (n, or k under Linformer).
  Index key_length() const { return linformer_k.value_or(n); }

  /// Throws ConfigError describing the first violated invariant.
  void validate() const;
};

/// Names accepted by set_variant, in report order.
const std::vector<std::string>& variant_names();

/// scheme_name, or "linformer-diet-abs" for DIET-ABS with a Linformer projection.
std::string variant_name(const AttentionConfig& config);

/// Selects a scheme by its CLI name with default scheme parameters.
/// "linformer-diet-abs" also sets linformer_k (n / 4 when unset); the other
/// names clear it. Throws ConfigError for an unknown name.
void set_variant(AttentionConfig& config, const std::string& name);

}  // namespace diet
