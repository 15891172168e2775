// SPDX-License-Identifier: Apache-2.0
#include "diet/config.hpp"

#include <algorithm>
#include <cmath>

namespace diet {

namespace {

template <class... Ts>
struct overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

}  // namespace

std::string scheme_name(const PositionScheme& s) {
  return std::visit(overloaded{
                        [](const scheme::None&) { return std::string("none"); },
                        [](const scheme::InputAdditiveLearned&) { return std::string("input-add"); },
                        [](const scheme::InputAdditiveSinusoidal&) { return std::string("sinusoidal"); },
                        [](const scheme::DietAbs&) { return std::string("diet-abs"); },
                        [](const scheme::DietRel&) { return std::string("diet-rel"); },
                        [](const scheme::ShawRel&) { return std::string("shaw"); },
                        [](const scheme::T5Bucketed&) { return std::string("t5"); },
                    },
                    s);
}

std::string sharing_name(Sharing s) {
  switch (s) {
    case Sharing::None: return "none";
    case Sharing::LayerWise: return "layer";
    case Sharing::HeadWise: return "head";
  }
  return "?";
}

std::string segment_location_name(SegmentLocation s) {
  switch (s) {
    case SegmentLocation::None: return "none";
    case SegmentLocation::Input: return "input";
    case SegmentLocation::PerHead: return "per-head";
  }
  return "?";
}

Sharing parse_sharing(const std::string& name) {
  if (name == "none") return Sharing::None;
  if (name == "layer") return Sharing::LayerWise;
  if (name == "head") return Sharing::HeadWise;
  throw ConfigError("unknown sharing strategy '" + name + "'");
}

SegmentLocation parse_segment_location(const std::string& name) {
  if (name == "none") return SegmentLocation::None;
  if (name == "input") return SegmentLocation::Input;
  if (name == "per-head") return SegmentLocation::PerHead;
  throw ConfigError("unknown segment location '" + name + "'");
}

bool is_bias_scheme(const PositionScheme& s) {
  return std::holds_alternative<scheme::DietAbs>(s) || std::holds_alternative<scheme::DietRel>(s) ||
         std::holds_alternative<scheme::T5Bucketed>(s);
}

bool is_input_additive(const PositionScheme& s) {
  return std::holds_alternative<scheme::InputAdditiveLearned>(s) ||
         std::holds_alternative<scheme::InputAdditiveSinusoidal>(s);
}

const std::vector<std::string>& variant_names() {
  static const std::vector<std::string> names{"none", "input-add", "sinusoidal", "diet-abs",
                                              "diet-rel", "shaw", "t5", "linformer-diet-abs"};
  return names;
}

std::string variant_name(const AttentionConfig& config) {
  if (config.linformer() && std::holds_alternative<scheme::DietAbs>(config.scheme)) return "linformer-diet-abs";
  return scheme_name(config.scheme);
}

void set_variant(AttentionConfig& config, const std::string& name) {
  if (name == "linformer-diet-abs") {
    config.scheme = scheme::DietAbs{};
    if (!config.linformer_k) config.linformer_k = std::max<Index>(1, config.n / 4);
    return;
  }
  config.linformer_k.reset();
  if (name == "none") config.scheme = scheme::None{};
  else if (name == "input-add") config.scheme = scheme::InputAdditiveLearned{};
  else if (name == "sinusoidal") config.scheme = scheme::InputAdditiveSinusoidal{};
  else if (name == "diet-abs") config.scheme = scheme::DietAbs{};
  else if (name == "diet-rel") config.scheme = scheme::DietRel{};
  else if (name == "shaw") config.scheme = scheme::ShawRel{};
  else if (name == "t5") config.scheme = scheme::T5Bucketed{};
  else throw ConfigError("unknown scheme '" + name + "'");
}

double AttentionConfig::effective_scale() const {
  return scale.value_or(std::sqrt(static_cast<double>(d)));
}

void AttentionConfig::validate() const {
  if (n < 1 || d < 1 || heads < 1 || d_h < 1 || layers < 1) {
    throw ConfigError("config: n, d, heads, d_h and layers must all be positive");
  }
  if (!(effective_scale() > 0.0)) throw ConfigError("config: scale must be positive");
  if (num_segments < 1) throw ConfigError("config: num_segments must be at least 1");
  if (const auto* abs = std::get_if<scheme::DietAbs>(&scheme)) {
    if (abs->d_p < 1 || abs->d_p > n) {
      throw ConfigError("config: diet-abs requires 1 <= d_p <= n, got d_p=" + std::to_string(abs->d_p));
    }
  }
  if (const auto* shaw = std::get_if<scheme::ShawRel>(&scheme)) {
    if (shaw->clip < 1) throw ConfigError("config: shaw clip must be at least 1");
  }
  if (const auto* t5 = std::get_if<scheme::T5Bucketed>(&scheme)) {
    if (t5->num_buckets < 2 || t5->num_buckets % 2 != 0) {
      throw ConfigError("config: t5 num_buckets must be even");
    }
    if (t5->max_distance <= t5->num_buckets / 2) {
      throw ConfigError("config: t5 max_distance must exceed num_buckets/2");
    }
  }
  if (linformer_k) {
    if (*linformer_k < 1 || *linformer_k >= n) {
      throw ConfigError("config: linformer_k must satisfy 1 <= k < n");
    }
    const bool supported = std::holds_alternative<scheme::None>(scheme) || is_input_additive(scheme) ||
                           std::holds_alternative<scheme::DietAbs>(scheme);
    if (!supported) throw ConfigError("config: linformer projection supports none, input-add and diet-abs only");
    if (segment_location == SegmentLocation::PerHead) {
      throw ConfigError("config: per-head segments are not defined on the projected key axis");
    }
  }
}

}  // namespace diet
