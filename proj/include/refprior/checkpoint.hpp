#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "refprior/nn.hpp"

namespace refprior {

// Binary layout, all integers little-endian:
//   "RPRN"                    4 bytes
//   format_version            u32
//   config length, config     u64, UTF-8 JSON text
//   tensor count              u64
//   per tensor: name length u64, name bytes, dtype u8 (0 f32, 1 f64),
//               rank u32, dims u64 x rank, values (IEEE little-endian)
inline constexpr char kCheckpointMagic[4] = {'R', 'P', 'R', 'N'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint32_t format_version = kCheckpointVersion;
  std::string config_text;
  std::vector<ParameterSet::Entry> tensors;
};

std::vector<std::uint8_t> serialize_checkpoint(const Checkpoint& checkpoint);
// Format errors carry the byte offset of the offending field.
Checkpoint parse_checkpoint(const std::vector<std::uint8_t>& bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

// Copies checkpoint tensors into `params`. Names, shapes and dtypes must
// match exactly.
void assign_parameters(ParameterSet& params, const std::vector<ParameterSet::Entry>& tensors,
                       const std::string& source);

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path);
void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes);

}  // namespace refprior
