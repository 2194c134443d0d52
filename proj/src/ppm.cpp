#include "ddit/ppm.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <string>

#include "ddit/binary_io.hpp"

namespace ddit {

std::vector<std::uint8_t> encode_ppm(const ImageGrid& img) {
  if (img.shape.channels != 3) throw std::invalid_argument("ppm: only 3-channel grids are supported");
  const std::string header =
      "P6\n" + std::to_string(img.shape.width) + " " + std::to_string(img.shape.height) + "\n255\n";
  std::vector<std::uint8_t> out(header.begin(), header.end());
  out.reserve(header.size() + img.values.size());
  for (double v : img.values) {
    const double scaled = std::round((std::clamp(v, -1.0, 1.0) + 1.0) * 127.5);
    out.push_back(static_cast<std::uint8_t>(scaled));
  }
  return out;
}

ImageGrid decode_ppm(std::span<const std::uint8_t> bytes) {
  std::size_t pos = 0;
  auto skip_space = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(bytes[pos])) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto number = [&] {
    skip_space();
    std::size_t v = 0;
    const std::size_t start = pos;
    while (pos < bytes.size() && std::isdigit(bytes[pos])) v = v * 10 + (bytes[pos++] - '0');
    if (pos == start) throw FormatError("ppm: malformed header");
    return v;
  };
  if (bytes.size() < 2 || bytes[0] != 'P' || bytes[1] != '6') throw FormatError("ppm: not a binary P6 pixmap");
  pos = 2;
  const auto width = number();
  const auto height = number();
  const auto maxval = number();
  if (maxval != 255) throw FormatError("ppm: only maxval 255 is supported");
  ++pos;  // single whitespace before the raster
  const GridShape shape{height, width, 3};
  if (bytes.size() < pos + shape.size()) throw FormatError("ppm: raster truncated");
  ImageGrid img(shape);
  for (std::size_t i = 0; i < shape.size(); ++i) img.values[i] = bytes[pos + i] / 127.5 - 1.0;
  return img;
}

void write_ppm(const std::string& path, const ImageGrid& img) { write_file_atomic(path, encode_ppm(img)); }

ImageGrid read_ppm(const std::string& path) { return decode_ppm(read_file(path)); }

}  // namespace ddit
