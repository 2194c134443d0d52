#pragma once

// Binary portable pixmap (P6, maxval 255) for 3-channel grids. Values in
// [-1, 1] map linearly to [0, 255] with clamping and rounding.

#include <cstdint>
#include <string>
#include <vector>

#include "ddit/image_flow.hpp"

namespace ddit {

std::vector<std::uint8_t> encode_ppm(const ImageGrid& img);
ImageGrid decode_ppm(std::span<const std::uint8_t> bytes);

void write_ppm(const std::string& path, const ImageGrid& img);
ImageGrid read_ppm(const std::string& path);

}  // namespace ddit
