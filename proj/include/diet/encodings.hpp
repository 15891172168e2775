// SPDX-License-Identifier: Apache-2.0
//
// Positional and segment encodings. Every per-head scheme is stored as a set
// of parameter "slots"; the sharing strategy decides how (layer, head) pairs
// map onto slots.
#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "diet/archive.hpp"
#include "diet/config.hpp"
#include "diet/tensor.hpp"

namespace diet {

/// Segment id of every sequence position. Segments are contiguous runs.
class SegmentMap {
 public:
  /// Throws ConfigError if an id is out of range or a segment is split into
  /// more than one run.
  SegmentMap(std::vector<Index> assignment, Index num_segments);

  /// All positions in segment 0.
  static SegmentMap uniform(Index n, Index num_segments = 1);
  /// Consecutive runs of the given lengths, numbered 0, 1, ...
  static SegmentMap runs(const std::vector<Index>& lengths);

  Index size() const { return static_cast<Index>(ids_.size()); }
  Index num_segments() const { return num_segments_; }
  Index operator[](Index i) const { return ids_[static_cast<std::size_t>(i)]; }
  const std::vector<Index>& ids() const { return ids_; }

 private:
  std::vector<Index> ids_;
  Index num_segments_;
};

/// Parameters of one (layer, head) slot. Unused members stay empty.
struct PositionSlot {
  Matrix p_q;           ///< n x d_p (diet-abs)
  Matrix p_k;           ///< n x d_p, or k x d_p under Linformer
  Matrix rel;           ///< 1 x (2n-1) scalar per offset i-j, index (i-j)+n-1 (diet-rel)
  Matrix shaw_key;      ///< (2 clip + 1) x d_h, index clamp(j-i)+clip
  Matrix shaw_value;    ///< same shape as shaw_key when with_value
  Matrix buckets;       ///< 1 x num_buckets (t5)
  Matrix segment;       ///< num_segments x num_segments (per-head segments)
};

/// Tensor reference with its archive key (scheme/layer/head/name).
struct NamedTensor {
  std::string key;
  Matrix* value;
};

struct ConstNamedTensor {
  std::string key;
  const Matrix* value;
};

class PositionParams {
 public:
  PositionParams() = default;
  /// Zero-filled parameters with the shapes implied by `config`.
  explicit PositionParams(const AttentionConfig& config);

  const PositionScheme& scheme() const { return scheme_; }
  Sharing sharing() const { return sharing_; }
  SegmentLocation segment_location() const { return segment_location_; }
  Index layers() const { return layers_; }
  Index heads() const { return heads_; }
  Index n() const { return n_; }

  /// Number of independent per-head slots (0 when nothing is stored per head).
  Index slot_count() const { return static_cast<Index>(slots_.size()); }
  /// Slot used by (layer, head) under the sharing strategy.
  Index slot_index(Index layer, Index head) const;

  const PositionSlot& slot(Index index) const { return slots_.at(static_cast<std::size_t>(index)); }
  const PositionSlot& slot(Index layer, Index head) const { return slot(slot_index(layer, head)); }
  PositionSlot& mutable_slot(Index index);

  /// Input-additive table (learned or sinusoidal), n x d; empty otherwise.
  const Matrix& input_table() const { return input_table_; }
  Matrix& mutable_input_table();
  /// Segment embeddings added at the input, num_segments x d; empty otherwise.
  const Matrix& segment_table() const { return segment_table_; }
  Matrix& mutable_segment_table();

  bool empty() const;

  /// Trainable tensors in a fixed order. The non-const overload marks the
  /// parameters as modified.
  std::vector<NamedTensor> tensors();
  std::vector<ConstNamedTensor> tensors() const;
  /// Total number of trainable scalars.
  Index parameter_count() const;

  /// Changes whenever a mutable accessor is used; globally unique.
  std::uint64_t version() const { return version_; }
  void touch();

 private:
  std::string slot_key(Index slot, const std::string& name) const;

  PositionScheme scheme_ = scheme::None{};
  Sharing sharing_ = Sharing::None;
  SegmentLocation segment_location_ = SegmentLocation::None;
  Index layers_ = 0;
  Index heads_ = 0;
  Index n_ = 0;
  Index d_ = 0;
  Index num_segments_ = 1;
  Matrix input_table_;
  Matrix segment_table_;
  std::vector<PositionSlot> slots_;
  std::uint64_t version_ = 0;
};

/// Embedding-like tables ~ normal(0, 0.02^2); scalar tables and segment
/// matrices start at zero. Deterministic in `seed`.
PositionParams init_params(const AttentionConfig& config, std::uint64_t seed);

/// Interleaved sin/cos table with geometric wavelengths 10000^(2k/d).
Matrix sinusoidal_table(Index n, Index d);

inline Index relative_offset(Index i, Index j) { return i - j; }

/// Log-spaced bucket of a signed offset. Non-positive offsets use buckets
/// [0, num_buckets/2), positive ones [num_buckets/2, num_buckets). Within a
/// half, magnitudes below num_buckets/4 map exactly, larger ones log-spaced up
/// to max_distance and clamp to the last bucket beyond it.
Index t5_bucket(Index offset, Index num_buckets, Index max_distance);

/// out(i, j) = segments(ids[i], ids[j]).
Matrix segment_bias(const Eigen::Ref<const Matrix>& segments, const SegmentMap& segmap);

/// Additive positional bias of (layer, head) for diet-abs, diet-rel and t5,
/// plus the per-head segment term when `segmap` is given. Throws SchemeError
/// for other schemes.
Matrix positional_bias(const PositionParams& params, Index layer, Index head, Index n,
                       const SegmentMap* segmap = nullptr);

/// Input-independent additive score term of (layer, head): positional bias
/// for bias schemes plus per-head segment bias. nullopt if there is none.
std::optional<Matrix> head_bias(const PositionParams& params, Index layer, Index head, Index n,
                                const SegmentMap* segmap);

/// Precomputed bias for every slot, bound to the parameter version it was
/// built from.
class BiasCache {
 public:
  Index size() const { return static_cast<Index>(biases_.size()); }
  Index n() const { return n_; }
  /// Throws StalenessError if `params` changed since the cache was built.
  const Matrix& bias(const PositionParams& params, Index layer, Index head) const;
  bool fresh(const PositionParams& params) const { return params.version() == version_; }

 private:
  friend BiasCache build_cache(const PositionParams&, Index, const SegmentMap*);
  std::vector<Matrix> biases_;
  std::uint64_t version_ = 0;
  Index n_ = 0;
};

/// Throws SchemeError if the scheme has no input-independent per-head term.
BiasCache build_cache(const PositionParams& params, Index n, const SegmentMap* segmap = nullptr);

/// Archive round trip. `import_params` validates every shape against `config`.
void export_params(const PositionParams& params, Archive& archive);
PositionParams import_params(const AttentionConfig& config, const Archive& archive);

}  // namespace diet
