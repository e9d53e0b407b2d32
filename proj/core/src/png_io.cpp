#include "vqi/png_io.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iterator>

namespace vqi {

namespace {

struct ImageGuard {
  png_image img{};
  ImageGuard() {
    img.version = PNG_IMAGE_VERSION;
  }
  ~ImageGuard() { png_image_free(&img); }
};

}  // namespace

GrayImage decode_png(const std::uint8_t* data, std::size_t size) {
  if (data == nullptr || size == 0) throw ImageError("decode_png: empty buffer");
  ImageGuard g;
  if (!png_image_begin_read_from_memory(&g.img, data, size)) {
    throw ImageError(std::string("decode_png: ") + g.img.message);
  }
  if (g.img.format & PNG_FORMAT_FLAG_COLOR) throw ImageError("decode_png: image is not grayscale");
  if (g.img.format & PNG_FORMAT_FLAG_LINEAR) throw ImageError("decode_png: image is not 8-bit");
  g.img.format = PNG_FORMAT_GRAY;
  GrayImage out;
  out.width = static_cast<int>(g.img.width);
  out.height = static_cast<int>(g.img.height);
  out.pixels.resize(PNG_IMAGE_SIZE(g.img));
  if (!png_image_finish_read(&g.img, nullptr, out.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("decode_png: ") + g.img.message);
  }
  return out;
}

GrayImage read_png(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ImageError("read_png: cannot open " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return decode_png(bytes.data(), bytes.size());
  } catch (const ImageError& e) {
    throw ImageError(path.filename().string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const GrayImage& img) {
  if (img.width <= 0 || img.height <= 0 ||
      img.pixels.size() != static_cast<std::size_t>(img.width) * static_cast<std::size_t>(img.height)) {
    throw ImageError("encode_png: pixel buffer does not match " + std::to_string(img.width) + "x" +
                     std::to_string(img.height));
  }
  ImageGuard g;
  g.img.width = static_cast<png_uint_32>(img.width);
  g.img.height = static_cast<png_uint_32>(img.height);
  g.img.format = PNG_FORMAT_GRAY;
  png_alloc_size_t size = 0;
  if (!png_image_write_get_memory_size(g.img, size, 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("encode_png: ") + g.img.message);
  }
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&g.img, out.data(), &size, 0, img.pixels.data(), 0, nullptr)) {
    throw ImageError(std::string("encode_png: ") + g.img.message);
  }
  out.resize(size);
  return out;
}

void write_png(const std::filesystem::path& path, const GrayImage& img) {
  const auto bytes = encode_png(img);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ImageError("write_png: cannot open " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ImageError("write_png: write failed for " + path.string());
}

GrayImage to_gray8(const std::vector<float>& pixels, int width, int height) {
  if (pixels.size() != static_cast<std::size_t>(width) * static_cast<std::size_t>(height)) {
    throw ImageError("to_gray8: pixel count does not match dimensions");
  }
  GrayImage img{width, height, std::vector<std::uint8_t>(pixels.size())};
  for (std::size_t i = 0; i < pixels.size(); ++i) {
    const float v = std::clamp(pixels[i], 0.0f, 1.0f);
    img.pixels[i] = static_cast<std::uint8_t>(std::lround(v * 255.0f));
  }
  return img;
}

std::vector<float> to_unit(const GrayImage& img) {
  std::vector<float> out(img.pixels.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<float>(img.pixels[i]) / 255.0f;
  return out;
}

}  // namespace vqi
