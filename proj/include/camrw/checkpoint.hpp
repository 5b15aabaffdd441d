#pragma once

// Checkpoint container, little-endian throughout:
//
//   magic      8 bytes  "CAMRWCKP"
//   version    u32      kCheckpointVersion
//   manifest   u64 length + UTF-8 "key = value" lines (model config,
//              config_hash, step, seed)
//   tensors    u32 count, then per tensor:
//                u32 name length, name bytes, u32 rank (= 2),
//                u32 rows, u32 cols, rows*cols f32 values (row-major)
//   trailer    u64 FNV-1a hash of every preceding byte, then "END!"
//
// save() writes to a sibling temporary file and renames it into place.

#include "camrw/model.hpp"

#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>

namespace camrw {

inline constexpr std::uint32_t kCheckpointVersion = 1;

void save_checkpoint(const Seq2SeqModel& model, const std::filesystem::path& path);

// Throws CheckpointFormatError on corrupt, truncated or mismatched files.
std::unique_ptr<Seq2SeqModel> load_checkpoint(const std::filesystem::path& path);
std::unique_ptr<Seq2SeqModel> load_checkpoint(const std::filesystem::path& path, const ModelConfig& expected);

// Manifest lines only, for inspection.
std::map<std::string, std::string> read_checkpoint_manifest(const std::filesystem::path& path);

std::map<std::string, std::string> parse_key_values(const std::string& text);

}  // namespace camrw
