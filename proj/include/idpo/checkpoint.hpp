// SPDX-License-Identifier: Apache-2.0
//
// Versioned binary archive used by every checkpoint kind.
//
// Layout (all integers little-endian):
//   8 bytes   magic "IDPOCKPT"
//   u32       format version
//   u64       header length N
//   N bytes   UTF-8 JSON header: {"meta": {...}, "arrays": [{"name", "shape", "offset"}]}
//   ...       float64 little-endian payload, arrays back to back in header order

#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "idpo/tensor.hpp"

namespace idpo {

inline constexpr std::uint32_t kCheckpointVersion = 1;

class CheckpointError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ArchiveArray {
  std::string name;
  Shape shape;
  std::vector<double> values;
};

struct Archive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<ArchiveArray> arrays;

  void add(std::string name, Shape shape, std::span<const double> values);
  void add(std::string name, const Tensor& tensor) { add(std::move(name), tensor.shape(), tensor.data()); }
  bool contains(std::string_view name) const;
  const ArchiveArray& get(std::string_view name) const;
  // Copies a stored array into `dst`, checking the shape.
  void restore(std::string_view name, Tensor& dst) const;
};

void write_archive(const std::filesystem::path& path, const Archive& archive);
Archive read_archive(const std::filesystem::path& path);

}  // namespace idpo
