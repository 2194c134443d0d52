#pragma once

// Flat binary record stream for synthetic datasets.
//
// Header (little-endian):
//   "DDITDATA" | u32 version | u64 config hash | u64 seed | u64 count |
//   u32 height | u32 width | u32 channels | u32 text_len | u32 vocab
// Record:
//   f64[height*width*channels] grid |
//   u8 objects, then (u8 shape, u8 color, u8 quadrant) per object |
//   u16[text_len] caption ids |
//   u8 qa count, then per pair: u8 kind | u8 answer_pos | u16 answer |
//                               u16[text_len] ids | u8[text_len] frozen
// A text manifest describing the file is written next to it as
// <path>.manifest.

#include <cstdint>
#include <string>
#include <vector>

#include "ddit/world.hpp"

namespace ddit {

struct Dataset {
  std::uint64_t seed = 0;
  std::vector<world::Example> examples;

  std::uint64_t config_hash() const;
  // Identifies the stream: config hash, seed and count.
  std::uint64_t fingerprint() const;
};

// Example i is drawn from its own stream seeded by (seed, i).
Dataset generate_dataset(std::size_t count, std::uint64_t seed);

std::vector<std::uint8_t> encode_dataset(const Dataset& data);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);

void write_dataset(const std::string& path, const Dataset& data);
Dataset read_dataset(const std::string& path);
std::string dataset_manifest(const Dataset& data, const std::string& path);

}  // namespace ddit
