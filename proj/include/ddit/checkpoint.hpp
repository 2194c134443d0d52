#pragma once

// Training snapshot on disk.
//
// Layout (little-endian):
//   "DDITCKPT"  u32 version  u64 training hash  u64 dataset fingerprint
//   u64 step  string resolved config
//   u64 tensor count, then per tensor:
//     string name  u32 rank  u64 dims[rank]  f64 values  f64 m  f64 v
//   u64 optimizer step  string rng state  u64 FNV-1a of all preceding bytes
// Strings are a u64 length followed by raw bytes.

#include <cstdint>
#include <string>
#include <vector>

#include "ddit/config.hpp"
#include "ddit/model.hpp"
#include "ddit/optimizer.hpp"

namespace ddit {

struct Checkpoint {
  RunConfig config;
  std::uint64_t dataset_fingerprint = 0;
  std::uint64_t step = 0;
  ModelParams params;
  AdamState optimizer;
  std::string rng_state;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ck);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

// Atomic: writes a temporary file and renames it over `path`, so a failed
// write leaves the previous checkpoint intact.
void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

}  // namespace ddit
