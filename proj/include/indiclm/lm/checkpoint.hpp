#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "indiclm/lm/model.hpp"

namespace indiclm::lm {

// Binary layout, little-endian:
//   "PLMF" | u32 version | u32 meta_len | meta (JSON, holds "config")
//   | u32 tensor_count | tensors...
// Tensor: u16 name_len | name | u8 ndims | u64 dims[ndims]
//   | (version >= 2) u8 precision | payload
// Payload: f32 -> numel floats; i8 -> numel int8 then dims[0] float row
// scales. Version 1 files contain only f32 tensors.
inline constexpr std::uint32_t kCheckpointVersionF32 = 1;
inline constexpr std::uint32_t kCheckpointVersionMixed = 2;

enum class Precision : std::uint8_t { f32 = 0, i8 = 1 };

struct TensorRecord {
  std::string name;
  std::vector<std::uint64_t> dims;
  Precision precision = Precision::f32;
  std::vector<float> f32;
  std::vector<std::int8_t> i8;
  std::vector<float> scales;  // one per row (dims[0]) for i8

  std::uint64_t numel() const;
};

struct CheckpointFile {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorRecord> tensors;

  const TensorRecord* find(std::string_view name) const;
};

// Writes to a temporary sibling and renames, so readers never see a partial
// file. Chooses version 1 when every tensor is f32.
void write_checkpoint_file(const std::filesystem::path& path, const CheckpointFile& file);
// Throws FormatError on bad magic, unknown version or truncation; nothing is
// returned unless the whole file parsed.
CheckpointFile read_checkpoint_file(const std::filesystem::path& path);
std::string encode_checkpoint(const CheckpointFile& file);
CheckpointFile decode_checkpoint(std::string_view bytes);

CheckpointFile to_checkpoint(const Parameters& params);
// Checks every model tensor exists with the shape the config implies; the
// error names the offending tensor. Extra tensors are ignored.
Parameters parameters_from_checkpoint(const CheckpointFile& file);

void save_model(const std::filesystem::path& path, const Parameters& params);
Parameters load_model(const std::filesystem::path& path);

}  // namespace indiclm::lm
