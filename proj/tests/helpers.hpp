// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <filesystem>
#include <string>

#include "diet/encodings.hpp"

namespace testing_util {

inline diet::AttentionConfig small_config(const std::string& variant, diet::Index n = 8) {
  diet::AttentionConfig c;
  c.n = n;
  c.d = 8;
  c.heads = 2;
  c.d_h = 4;
  c.layers = 2;
  diet::set_variant(c, variant);
  if (auto* abs = std::get_if<diet::scheme::DietAbs>(&c.scheme)) abs->d_p = 3;
  if (auto* shaw = std::get_if<diet::scheme::ShawRel>(&c.scheme)) shaw->clip = 3;
  if (auto* t5 = std::get_if<diet::scheme::T5Bucketed>(&c.scheme)) {
    t5->num_buckets = 8;
    t5->max_distance = 16;
  }
  return c;
}

/// Fills every trainable position tensor with normal(0, stddev^2).
inline void fill_random(diet::PositionParams& params, double stddev, std::uint64_t seed) {
  diet::Rng rng(seed);
  for (auto& t : params.tensors()) *t.value = diet::randn_matrix(t.value->rows(), t.value->cols(), stddev, rng);
}

inline std::filesystem::path temp_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("diet_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace testing_util
