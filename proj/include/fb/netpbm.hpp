#pragma once

// Binary netpbm images: P5 (grayscale) and P6 (RGB), maxval 255.

#include <cstdint>
#include <string>
#include <vector>

#include "fb/tensor.hpp"

namespace fb {

struct PnmImage {
  int channels = 1;  // 1 writes P5, 3 writes P6
  index_t height = 0;
  index_t width = 0;
  std::vector<std::uint8_t> pixels;  // row-major, channel-interleaved
};

std::vector<std::uint8_t> serialize_pnm(const PnmImage& img);
PnmImage parse_pnm(const std::vector<std::uint8_t>& bytes);

void write_pnm(const std::string& path, const PnmImage& img);
PnmImage read_pnm(const std::string& path);

}  // namespace fb
