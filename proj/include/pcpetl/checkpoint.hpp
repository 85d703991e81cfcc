// Named-tensor checkpoints.
//
// Layout (little-endian):
//   "PETL" | u16 version | u8 mode | u32 entry count
//   per entry: u32 name length | name bytes | u32 rank | rank x u32 extents | f64 payload
//   32-byte SHA-256 config hash
#pragma once

#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "pcpetl/model.hpp"

namespace pcpetl {

enum class CheckpointMode : std::uint8_t { Full = 0, Delta = 1 };

std::string to_string(CheckpointMode mode);
CheckpointMode parse_checkpoint_mode(const std::string& s);

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct Checkpoint {
  std::uint16_t version = kCheckpointVersion;
  CheckpointMode mode = CheckpointMode::Full;
  std::vector<std::pair<std::string, Tensor>> entries;
  ConfigHash hash{};
};

// Full mode stores every parameter, delta mode only the tunable ones.
Checkpoint make_checkpoint(const ParameterStore& store, CheckpointMode mode, const ConfigHash& hash);
std::string encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin = "<memory>");

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, CheckpointMode mode,
                     const ConfigHash& hash);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Exact encoded size without building the file.
std::size_t checkpoint_bytes(const ParameterStore& store, CheckpointMode mode);

struct LoadOptions {
  // Full mode only: load just the entries whose names start with this prefix.
  std::string prefix;
  // Full mode only: entries missing from the store are skipped instead of
  // rejected.
  bool allow_missing = false;
};

// Copies checkpoint values into `store`. Delta checkpoints must carry
// `expected` as their config hash; both modes require matching shapes.
// Returns the number of tensors loaded.
std::size_t load_checkpoint(const Checkpoint& ckpt, ParameterStore& store, const ConfigHash& expected,
                            const LoadOptions& options = {});

}  // namespace pcpetl
