#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace stackdiff {

// 8-bit RGB raster, row-major, channels interleaved.
struct Image {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> pixels;

  Image() = default;
  Image(int w, int h, std::uint8_t fill = 0)
      : width(w), height(h), pixels(static_cast<std::size_t>(w) * h * 3, fill) {}

  bool empty() const { return pixels.empty(); }
  std::uint8_t& at(int x, int y, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
  std::uint8_t at(int x, int y, int c) const {
    return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c];
  }
  void set(int x, int y, std::uint8_t r, std::uint8_t g, std::uint8_t b) {
    auto* p = &pixels[(static_cast<std::size_t>(y) * width + x) * 3];
    p[0] = r;
    p[1] = g;
    p[2] = b;
  }

  bool operator==(const Image&) const = default;
};

// Uniform mid-gray frame used to pad articles to a fixed step count.
constexpr std::uint8_t kEmptyFrameLevel = 128;
Image empty_frame(int width, int height);

// Mean absolute per-channel deviation from the canonical empty frame, in [0, 255].
double empty_frame_deviation(const Image& image);

std::uint64_t image_hash(const Image& image);

Image read_png(const std::filesystem::path& path);
Image decode_png(const std::vector<std::uint8_t>& bytes);
std::vector<std::uint8_t> encode_png(const Image& image);
void write_png(const Image& image, const std::filesystem::path& path);

// Nearest-neighbour resample; used by embedders that need a fixed input size.
Image resize_nearest(const Image& image, int width, int height);

}  // namespace stackdiff
