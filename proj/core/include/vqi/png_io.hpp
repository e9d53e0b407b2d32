#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

namespace vqi {

struct ImageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct GrayImage {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;  // row-major
};

/// Decodes an 8-bit grayscale PNG. Colour and 16-bit images are rejected.
GrayImage decode_png(const std::uint8_t* data, std::size_t size);
GrayImage read_png(const std::filesystem::path& path);

std::vector<std::uint8_t> encode_png(const GrayImage& img);
void write_png(const std::filesystem::path& path, const GrayImage& img);

/// [0,1] floats to 8-bit, rounding to nearest.
GrayImage to_gray8(const std::vector<float>& pixels, int width, int height);
std::vector<float> to_unit(const GrayImage& img);

}  // namespace vqi
