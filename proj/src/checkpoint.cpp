// SPDX-License-Identifier: Apache-2.0

#include "idpo/checkpoint.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fmt/format.h>
#include <fstream>

namespace idpo {

namespace {

constexpr char kMagic[8] = {'I', 'D', 'P', 'O', 'C', 'K', 'P', 'T'};

template <typename T>
void write_le(std::ostream& out, T value) {
  unsigned char bytes[sizeof(T)];
  std::memcpy(bytes, &value, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  out.write(reinterpret_cast<const char*>(bytes), sizeof(T));
}

template <typename T>
T read_le(std::istream& in, const std::filesystem::path& path) {
  unsigned char bytes[sizeof(T)];
  if (!in.read(reinterpret_cast<char*>(bytes), sizeof(T))) {
    throw CheckpointError(fmt::format("{}: truncated header", path.string()));
  }
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes, bytes + sizeof(T));
  T value;
  std::memcpy(&value, bytes, sizeof(T));
  return value;
}

}  // namespace

void Archive::add(std::string name, Shape shape, std::span<const double> values) {
  if (contains(name)) throw CheckpointError(fmt::format("duplicate archive entry '{}'", name));
  if (shape_numel(shape) != values.size()) {
    throw CheckpointError(fmt::format("archive entry '{}': shape {} does not match {} values", name,
                                      shape_to_string(shape), values.size()));
  }
  arrays.push_back({std::move(name), std::move(shape), std::vector<double>(values.begin(), values.end())});
}

bool Archive::contains(std::string_view name) const {
  return std::any_of(arrays.begin(), arrays.end(), [&](const ArchiveArray& a) { return a.name == name; });
}

const ArchiveArray& Archive::get(std::string_view name) const {
  for (const auto& a : arrays) {
    if (a.name == name) return a;
  }
  throw CheckpointError(fmt::format("archive has no entry '{}'", name));
}

void Archive::restore(std::string_view name, Tensor& dst) const {
  const ArchiveArray& a = get(name);
  if (a.shape != dst.shape()) {
    throw CheckpointError(fmt::format("archive entry '{}' has shape {}, expected {}", name, shape_to_string(a.shape),
                                      shape_to_string(dst.shape())));
  }
  std::copy(a.values.begin(), a.values.end(), dst.mutable_data().begin());
}

void write_archive(const std::filesystem::path& path, const Archive& archive) {
  nlohmann::json header;
  header["meta"] = archive.meta;
  header["arrays"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& a : archive.arrays) {
    header["arrays"].push_back({{"name", a.name}, {"shape", a.shape}, {"offset", offset}});
    offset += a.values.size();
  }
  const std::string text = header.dump();

  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError(fmt::format("cannot open {} for writing", tmp.string()));
    out.write(kMagic, sizeof(kMagic));
    write_le<std::uint32_t>(out, kCheckpointVersion);
    write_le<std::uint64_t>(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& a : archive.arrays) {
      for (double v : a.values) write_le<double>(out, v);
    }
    if (!out) throw CheckpointError(fmt::format("write failed for {}", tmp.string()));
  }
  std::filesystem::rename(tmp, path);
}

Archive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError(fmt::format("cannot open checkpoint {}", path.string()));
  const auto file_size = std::filesystem::file_size(path);

  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw CheckpointError(fmt::format("{}: not a checkpoint file (bad magic)", path.string()));
  }
  const auto version = read_le<std::uint32_t>(in, path);
  if (version != kCheckpointVersion) {
    throw CheckpointError(
        fmt::format("{}: checkpoint version {} unsupported (expected {})", path.string(), version, kCheckpointVersion));
  }
  const auto header_len = read_le<std::uint64_t>(in, path);
  if (header_len > file_size) throw CheckpointError(fmt::format("{}: corrupted header length", path.string()));
  std::string text(header_len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(header_len))) {
    throw CheckpointError(fmt::format("{}: truncated header", path.string()));
  }
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(fmt::format("{}: malformed header: {}", path.string(), e.what()));
  }

  Archive archive;
  archive.meta = header.value("meta", nlohmann::json::object());
  std::uint64_t expected_values = 0;
  for (const auto& entry : header.at("arrays")) {
    ArchiveArray a;
    a.name = entry.at("name").get<std::string>();
    a.shape = entry.at("shape").get<Shape>();
    if (entry.at("offset").get<std::uint64_t>() != expected_values) {
      throw CheckpointError(fmt::format("{}: non-contiguous payload offsets at '{}'", path.string(), a.name));
    }
    expected_values += shape_numel(a.shape);
    archive.arrays.push_back(std::move(a));
  }
  const std::uint64_t payload_start = sizeof(kMagic) + sizeof(std::uint32_t) + sizeof(std::uint64_t) + header_len;
  if (file_size != payload_start + expected_values * sizeof(double)) {
    throw CheckpointError(fmt::format("{}: corrupted length: payload has {} bytes, header describes {}", path.string(),
                                      file_size - payload_start, expected_values * sizeof(double)));
  }
  for (auto& a : archive.arrays) {
    a.values.resize(shape_numel(a.shape));
    for (double& v : a.values) v = read_le<double>(in, path);
  }
  return archive;
}

}  // namespace idpo
