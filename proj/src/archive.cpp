// SPDX-License-Identifier: Apache-2.0
#include "diet/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "diet/errors.hpp"

namespace diet {

namespace {

std::filesystem::path with_suffix(const std::filesystem::path& stem, const char* suffix) {
  return std::filesystem::path(stem.string() + suffix);
}

void write_le(std::ofstream& out, double value) {
  std::uint64_t bits = std::bit_cast<std::uint64_t>(value);
  unsigned char bytes[8];
  for (int b = 0; b < 8; ++b) bytes[b] = static_cast<unsigned char>(bits >> (8 * b));
  out.write(reinterpret_cast<const char*>(bytes), 8);
}

double read_le(const unsigned char* bytes) {
  std::uint64_t bits = 0;
  for (int b = 7; b >= 0; --b) bits = (bits << 8) | bytes[b];
  return std::bit_cast<double>(bits);
}

}  // namespace

void Archive::put(const std::string& key, const Matrix& value) {
  for (auto& [k, v] : entries_) {
    if (k == key) {
      v = value;
      return;
    }
  }
  entries_.emplace_back(key, value);
}

bool Archive::contains(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return true;
  }
  return false;
}

const Matrix& Archive::get(const std::string& key) const {
  for (const auto& [k, v] : entries_) {
    if (k == key) return v;
  }
  throw InputError("archive: missing tensor '" + key + "'");
}

void save_archive(const Archive& archive, const std::filesystem::path& stem) {
  if (stem.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(stem.parent_path(), ec);
  }
  std::ofstream bin(with_suffix(stem, ".bin"), std::ios::binary | std::ios::trunc);
  if (!bin) throw IoError("archive: cannot write " + with_suffix(stem, ".bin").string());

  nlohmann::json manifest;
  manifest["format"] = kArchiveFormat;
  manifest["metadata"] = archive.metadata;
  manifest["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& [key, value] : archive.entries()) {
    manifest["tensors"].push_back(
        {{"key", key}, {"rows", value.rows()}, {"cols", value.cols()}, {"offset", offset}});
    for (Index i = 0; i < value.rows(); ++i) {
      for (Index j = 0; j < value.cols(); ++j) write_le(bin, value(i, j));
    }
    offset += static_cast<std::size_t>(value.size());
  }
  if (!bin) throw IoError("archive: write failed for " + with_suffix(stem, ".bin").string());

  std::ofstream json(with_suffix(stem, ".json"), std::ios::trunc);
  if (!json) throw IoError("archive: cannot write " + with_suffix(stem, ".json").string());
  json << manifest.dump(2) << "\n";
}

Archive load_archive(const std::filesystem::path& stem) {
  std::ifstream json(with_suffix(stem, ".json"));
  if (!json) throw IoError("archive: cannot read " + with_suffix(stem, ".json").string());
  std::ifstream bin(with_suffix(stem, ".bin"), std::ios::binary);
  if (!bin) throw IoError("archive: cannot read " + with_suffix(stem, ".bin").string());

  nlohmann::json manifest;
  try {
    json >> manifest;
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("archive: malformed manifest: ") + e.what());
  }
  if (manifest.value("format", "") != kArchiveFormat) {
    throw InputError("archive: unsupported format tag");
  }

  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());
  Archive archive;
  archive.metadata = manifest.value("metadata", nlohmann::json::object());
  try {
    for (const auto& entry : manifest.at("tensors")) {
      const auto rows = entry.at("rows").get<Index>();
      const auto cols = entry.at("cols").get<Index>();
      const auto offset = entry.at("offset").get<std::size_t>();
      if ((offset + static_cast<std::size_t>(rows * cols)) * 8 > bytes.size()) {
        throw InputError("archive: tensor '" + entry.at("key").get<std::string>() + "' overruns data file");
      }
      Matrix value(rows, cols);
      const unsigned char* cursor = bytes.data() + offset * 8;
      for (Index i = 0; i < rows; ++i) {
        for (Index j = 0; j < cols; ++j, cursor += 8) value(i, j) = read_le(cursor);
      }
      archive.put(entry.at("key").get<std::string>(), value);
    }
  } catch (const nlohmann::json::exception& e) {
    throw InputError(std::string("archive: malformed manifest: ") + e.what());
  }
  return archive;
}

}  // namespace diet
