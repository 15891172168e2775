// SPDX-License-Identifier: Apache-2.0
//
// Flat key -> tensor archive. Stored as two files sharing a stem:
//   <stem>.bin   row-major little-endian float64 values, tensors back to back
//   <stem>.json  manifest {"format", "metadata", "tensors": [{key, rows, cols, offset}]}
// where offset counts float64 elements from the start of the .bin file.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "diet/tensor.hpp"

namespace diet {

inline constexpr const char* kArchiveFormat = "diet-archive-v1";

class Archive {
 public:
  void put(const std::string& key, const Matrix& value);
  bool contains(const std::string& key) const;
  /// Throws InputError for a missing key.
  const Matrix& get(const std::string& key) const;

  const std::vector<std::pair<std::string, Matrix>>& entries() const { return entries_; }

  nlohmann::json metadata = nlohmann::json::object();

 private:
  std::vector<std::pair<std::string, Matrix>> entries_;
};

/// Writes <stem>.bin and <stem>.json. Throws IoError on failure.
void save_archive(const Archive& archive, const std::filesystem::path& stem);
/// Throws IoError for missing/unreadable files and InputError for a malformed manifest.
Archive load_archive(const std::filesystem::path& stem);

}  // namespace diet
