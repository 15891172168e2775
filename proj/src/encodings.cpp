// SPDX-License-Identifier: Apache-2.0
#include "diet/encodings.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>

namespace diet {

namespace {

constexpr double kEmbeddingStd = 0.02;

std::uint64_t next_version() {
  static std::atomic<std::uint64_t> counter{0};
  return ++counter;
}

bool has_slots(const AttentionConfig& config) {
  return is_bias_scheme(config.scheme) || std::holds_alternative<scheme::ShawRel>(config.scheme) ||
         config.segment_location == SegmentLocation::PerHead;
}

Index slots_for(Sharing sharing, Index layers, Index heads) {
  switch (sharing) {
    case Sharing::None: return layers * heads;
    case Sharing::LayerWise: return heads;
    case Sharing::HeadWise: return layers;
  }
  return 0;
}

}  // namespace

SegmentMap::SegmentMap(std::vector<Index> assignment, Index num_segments)
    : ids_(std::move(assignment)), num_segments_(num_segments) {
  if (num_segments_ < 1) throw ConfigError("segment map: num_segments must be at least 1");
  std::vector<bool> closed(static_cast<std::size_t>(num_segments_), false);
  for (std::size_t i = 0; i < ids_.size(); ++i) {
    const Index id = ids_[i];
    if (id < 0 || id >= num_segments_) {
      throw ConfigError("segment map: id " + std::to_string(id) + " at position " + std::to_string(i) +
                        " outside [0, " + std::to_string(num_segments_) + ")");
    }
    if (i > 0 && ids_[i - 1] != id) closed[static_cast<std::size_t>(ids_[i - 1])] = true;
    if (closed[static_cast<std::size_t>(id)]) {
      throw ConfigError("segment map: segment " + std::to_string(id) + " is not a contiguous run");
    }
  }
}

SegmentMap SegmentMap::uniform(Index n, Index num_segments) {
  return SegmentMap(std::vector<Index>(static_cast<std::size_t>(n), 0), num_segments);
}

SegmentMap SegmentMap::runs(const std::vector<Index>& lengths) {
  std::vector<Index> ids;
  for (std::size_t s = 0; s < lengths.size(); ++s) ids.insert(ids.end(), static_cast<std::size_t>(lengths[s]), static_cast<Index>(s));
  return SegmentMap(std::move(ids), std::max<Index>(1, static_cast<Index>(lengths.size())));
}

PositionParams::PositionParams(const AttentionConfig& config)
    : scheme_(config.scheme),
      sharing_(config.sharing),
      segment_location_(config.segment_location),
      layers_(config.layers),
      heads_(config.heads),
      n_(config.n),
      d_(config.d),
      num_segments_(config.num_segments),
      version_(next_version()) {
  config.validate();
  if (std::holds_alternative<scheme::InputAdditiveLearned>(scheme_)) {
    input_table_ = Matrix::Zero(n_, d_);
  } else if (std::holds_alternative<scheme::InputAdditiveSinusoidal>(scheme_)) {
    input_table_ = sinusoidal_table(n_, d_);
  }
  if (segment_location_ == SegmentLocation::Input) segment_table_ = Matrix::Zero(num_segments_, d_);
  if (!has_slots(config)) return;

  PositionSlot shape;
  if (const auto* abs = std::get_if<scheme::DietAbs>(&scheme_)) {
    shape.p_q = Matrix::Zero(n_, abs->d_p);
    shape.p_k = Matrix::Zero(config.key_length(), abs->d_p);
  } else if (std::holds_alternative<scheme::DietRel>(scheme_)) {
    shape.rel = Matrix::Zero(1, 2 * n_ - 1);
  } else if (const auto* shaw = std::get_if<scheme::ShawRel>(&scheme_)) {
    shape.shaw_key = Matrix::Zero(2 * shaw->clip + 1, config.d_h);
    if (shaw->with_value) shape.shaw_value = Matrix::Zero(2 * shaw->clip + 1, config.d_h);
  } else if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&scheme_)) {
    shape.buckets = Matrix::Zero(1, t5->num_buckets);
  }
  if (segment_location_ == SegmentLocation::PerHead) {
    shape.segment = Matrix::Zero(num_segments_, num_segments_);
  }
  slots_.assign(static_cast<std::size_t>(slots_for(sharing_, layers_, heads_)), shape);
}

Index PositionParams::slot_index(Index layer, Index head) const {
  if (layer < 0 || layer >= layers_ || head < 0 || head >= heads_) {
    throw DimensionError("position params: (layer " + std::to_string(layer) + ", head " + std::to_string(head) +
                         ") outside " + std::to_string(layers_) + " layers x " + std::to_string(heads_) + " heads");
  }
  switch (sharing_) {
    case Sharing::None: return layer * heads_ + head;
    case Sharing::LayerWise: return head;
    case Sharing::HeadWise: return layer;
  }
  return 0;
}

PositionSlot& PositionParams::mutable_slot(Index index) {
  touch();
  return slots_.at(static_cast<std::size_t>(index));
}

Matrix& PositionParams::mutable_input_table() {
  touch();
  return input_table_;
}

Matrix& PositionParams::mutable_segment_table() {
  touch();
  return segment_table_;
}

bool PositionParams::empty() const {
  return input_table_.size() == 0 && segment_table_.size() == 0 && slots_.empty();
}

void PositionParams::touch() { version_ = next_version(); }

std::string PositionParams::slot_key(Index slot, const std::string& name) const {
  std::string layer = "*";
  std::string head = "*";
  switch (sharing_) {
    case Sharing::None:
      layer = std::to_string(slot / heads_);
      head = std::to_string(slot % heads_);
      break;
    case Sharing::LayerWise: head = std::to_string(slot); break;
    case Sharing::HeadWise: layer = std::to_string(slot); break;
  }
  return scheme_name(scheme_) + "/" + layer + "/" + head + "/" + name;
}

std::vector<NamedTensor> PositionParams::tensors() {
  touch();
  std::vector<NamedTensor> out;
  for (const auto& [key, value] : std::as_const(*this).tensors()) out.push_back({key, const_cast<Matrix*>(value)});
  return out;
}

std::vector<ConstNamedTensor> PositionParams::tensors() const {
  std::vector<ConstNamedTensor> out;
  const std::string prefix = scheme_name(scheme_) + "/*/*/";
  if (std::holds_alternative<scheme::InputAdditiveLearned>(scheme_)) out.push_back({prefix + "input_table", &input_table_});
  if (segment_table_.size() > 0) out.push_back({prefix + "segment_table", &segment_table_});
  for (std::size_t s = 0; s < slots_.size(); ++s) {
    const auto& slot = slots_[s];
    const auto add = [&](const char* name, const Matrix& m) {
      if (m.size() > 0) out.push_back({slot_key(static_cast<Index>(s), name), &m});
    };
    add("p_q", slot.p_q);
    add("p_k", slot.p_k);
    add("rel", slot.rel);
    add("shaw_key", slot.shaw_key);
    add("shaw_value", slot.shaw_value);
    add("buckets", slot.buckets);
    add("segment", slot.segment);
  }
  return out;
}

Index PositionParams::parameter_count() const {
  Index total = 0;
  for (const auto& t : tensors()) total += t.value->size();
  return total;
}

PositionParams init_params(const AttentionConfig& config, std::uint64_t seed) {
  PositionParams params(config);
  Rng rng(seed);
  if (std::holds_alternative<scheme::InputAdditiveLearned>(config.scheme)) {
    params.mutable_input_table() = randn_matrix(config.n, config.d, kEmbeddingStd, rng);
  }
  if (config.segment_location == SegmentLocation::Input) {
    params.mutable_segment_table() = randn_matrix(config.num_segments, config.d, kEmbeddingStd, rng);
  }
  for (Index s = 0; s < params.slot_count(); ++s) {
    auto& slot = params.mutable_slot(s);
    for (Matrix* m : {&slot.p_q, &slot.p_k, &slot.shaw_key, &slot.shaw_value}) {
      if (m->size() > 0) *m = randn_matrix(m->rows(), m->cols(), kEmbeddingStd, rng);
    }
  }
  return params;
}

Matrix sinusoidal_table(Index n, Index d) {
  Matrix table(n, d);
  for (Index pos = 0; pos < n; ++pos) {
    for (Index c = 0; c < d; ++c) {
      const Index k = c / 2;
      const double angle =
          static_cast<double>(pos) / std::pow(10000.0, 2.0 * static_cast<double>(k) / static_cast<double>(d));
      table(pos, c) = (c % 2 == 0) ? std::sin(angle) : std::cos(angle);
    }
  }
  return table;
}

Index t5_bucket(Index offset, Index num_buckets, Index max_distance) {
  const Index half = num_buckets / 2;
  const Index exact = half / 2;
  const Index base = offset > 0 ? half : 0;
  const Index magnitude = offset < 0 ? -offset : offset;
  if (magnitude < exact) return base + magnitude;
  if (exact == 0) return base + half - 1;
  const double spread = std::log(static_cast<double>(magnitude) / static_cast<double>(exact)) /
                        std::log(static_cast<double>(max_distance) / static_cast<double>(exact));
  const Index logged = exact + static_cast<Index>(spread * static_cast<double>(half - exact));
  return base + std::min(logged, half - 1);
}

Matrix segment_bias(const Eigen::Ref<const Matrix>& segments, const SegmentMap& segmap) {
  if (segments.rows() != segmap.num_segments() || segments.cols() != segmap.num_segments()) {
    throw DimensionError("segment_bias: segment matrix " + shape_str(segments) + " does not match " +
                         std::to_string(segmap.num_segments()) + " segments");
  }
  const Index n = segmap.size();
  Matrix out(n, n);
  for (Index i = 0; i < n; ++i) {
    for (Index j = 0; j < n; ++j) out(i, j) = segments(segmap[i], segmap[j]);
  }
  return out;
}

namespace {

Matrix slot_positional_bias(const PositionParams& params, const PositionSlot& slot, Index n) {
  if (n < 1 || n > params.n()) {
    throw DimensionError("positional_bias: length " + std::to_string(n) + " outside [1, " +
                         std::to_string(params.n()) + "]");
  }
  const auto& s = params.scheme();
  if (std::holds_alternative<scheme::DietAbs>(s)) {
    const Index keys = slot.p_k.rows() == params.n() ? n : slot.p_k.rows();
    return slot.p_q.topRows(n) * slot.p_k.topRows(keys).transpose();
  }
  Matrix out(n, n);
  if (std::holds_alternative<scheme::DietRel>(s)) {
    const Index centre = params.n() - 1;
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) out(i, j) = slot.rel(0, relative_offset(i, j) + centre);
    }
    return out;
  }
  if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&s)) {
    for (Index i = 0; i < n; ++i) {
      for (Index j = 0; j < n; ++j) {
        out(i, j) = slot.buckets(0, t5_bucket(relative_offset(i, j), t5->num_buckets, t5->max_distance));
      }
    }
    return out;
  }
  throw SchemeError("positional_bias: scheme '" + scheme_name(s) + "' is not an additive score bias");
}

void add_segment_term(const PositionSlot& slot, const SegmentMap& segmap, Matrix& bias) {
  if (segmap.size() != bias.rows() || bias.rows() != bias.cols()) {
    throw DimensionError("segment bias: segment map of length " + std::to_string(segmap.size()) +
                         " does not match " + shape_str(bias) + " scores");
  }
  bias += segment_bias(slot.segment, segmap);
}

}  // namespace

Matrix positional_bias(const PositionParams& params, Index layer, Index head, Index n, const SegmentMap* segmap) {
  if (!is_bias_scheme(params.scheme())) {
    throw SchemeError("positional_bias: scheme '" + scheme_name(params.scheme()) + "' is not an additive score bias");
  }
  const auto& slot = params.slot(layer, head);
  Matrix bias = slot_positional_bias(params, slot, n);
  if (segmap != nullptr && slot.segment.size() > 0) add_segment_term(slot, *segmap, bias);
  return bias;
}

std::optional<Matrix> head_bias(const PositionParams& params, Index layer, Index head, Index n,
                                const SegmentMap* segmap) {
  const bool positional = is_bias_scheme(params.scheme());
  const bool segments = params.segment_location() == SegmentLocation::PerHead && segmap != nullptr;
  if (!positional && !segments) return std::nullopt;
  const auto& slot = params.slot(layer, head);
  if (positional) {
    Matrix bias = slot_positional_bias(params, slot, n);
    if (segments) add_segment_term(slot, *segmap, bias);
    return bias;
  }
  Matrix bias = Matrix::Zero(n, n);
  add_segment_term(slot, *segmap, bias);
  return bias;
}

const Matrix& BiasCache::bias(const PositionParams& params, Index layer, Index head) const {
  if (!fresh(params)) throw StalenessError("bias cache: position parameters changed after the cache was built");
  return biases_.at(static_cast<std::size_t>(params.slot_index(layer, head)));
}

BiasCache build_cache(const PositionParams& params, Index n, const SegmentMap* segmap) {
  const bool segments = params.segment_location() == SegmentLocation::PerHead && segmap != nullptr;
  if (!is_bias_scheme(params.scheme()) && !segments) {
    throw SchemeError("build_cache: scheme '" + scheme_name(params.scheme()) + "' has no input-independent bias");
  }
  BiasCache cache;
  cache.n_ = n;
  cache.version_ = params.version();
  for (Index s = 0; s < params.slot_count(); ++s) {
    // Any (layer, head) that maps to slot s gives the same matrix.
    Index layer = 0;
    Index head = 0;
    switch (params.sharing()) {
      case Sharing::None: layer = s / params.heads(); head = s % params.heads(); break;
      case Sharing::LayerWise: head = s; break;
      case Sharing::HeadWise: layer = s; break;
    }
    cache.biases_.push_back(*head_bias(params, layer, head, n, segmap));
  }
  return cache;
}

void export_params(const PositionParams& params, Archive& archive) {
  for (const auto& [key, value] : params.tensors()) archive.put(key, *value);
}

PositionParams import_params(const AttentionConfig& config, const Archive& archive) {
  PositionParams params(config);
  for (auto& [key, value] : params.tensors()) {
    const Matrix& stored = archive.get(key);
    if (stored.rows() != value->rows() || stored.cols() != value->cols()) {
      throw DimensionError("import_params: '" + key + "' is " + shape_str(stored) + ", expected " + shape_str(*value));
    }
    *value = stored;
  }
  return params;
}

}  // namespace diet
