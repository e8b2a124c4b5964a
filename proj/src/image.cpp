#include "stackdiff/image.hpp"

#include <png.h>

#include <cmath>
#include <cstring>

#include "stackdiff/error.hpp"
#include "stackdiff/util.hpp"

namespace stackdiff {

Image empty_frame(int width, int height) { return Image(width, height, kEmptyFrameLevel); }

double empty_frame_deviation(const Image& image) {
  if (image.pixels.empty()) return 0.0;
  double total = 0.0;
  for (auto p : image.pixels) total += std::abs(static_cast<int>(p) - static_cast<int>(kEmptyFrameLevel));
  return total / static_cast<double>(image.pixels.size());
}

std::uint64_t image_hash(const Image& image) {
  std::uint64_t h = mix64(static_cast<std::uint64_t>(image.width) << 32 | static_cast<std::uint32_t>(image.height));
  return fnv1a(std::span<const std::uint8_t>(image.pixels), h);
}

Image decode_png(const std::vector<std::uint8_t>& bytes) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_memory(&img, bytes.data(), bytes.size()))
    throw IoError(std::string("png: ") + img.message);
  img.format = PNG_FORMAT_RGB;
  Image image(static_cast<int>(img.width), static_cast<int>(img.height));
  if (!png_image_finish_read(&img, nullptr, image.pixels.data(), 0, nullptr)) {
    std::string msg = img.message;
    png_image_free(&img);
    throw IoError("png: " + msg);
  }
  return image;
}

Image read_png(const std::filesystem::path& path) {
  auto contents = read_file(path);
  std::vector<std::uint8_t> bytes(contents.begin(), contents.end());
  try {
    return decode_png(bytes);
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

std::vector<std::uint8_t> encode_png(const Image& image) {
  if (image.width <= 0 || image.height <= 0) throw IoError("cannot encode an empty image");
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width);
  img.height = static_cast<png_uint_32>(image.height);
  img.format = PNG_FORMAT_RGB;
  png_alloc_size_t size = 0;
  if (!png_image_write_to_memory(&img, nullptr, &size, 0, image.pixels.data(), 0, nullptr))
    throw IoError(std::string("png: ") + img.message);
  std::vector<std::uint8_t> out(size);
  if (!png_image_write_to_memory(&img, out.data(), &size, 0, image.pixels.data(), 0, nullptr))
    throw IoError(std::string("png: ") + img.message);
  out.resize(size);
  return out;
}

void write_png(const Image& image, const std::filesystem::path& path) {
  auto bytes = encode_png(image);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

Image resize_nearest(const Image& image, int width, int height) {
  if (image.width == width && image.height == height) return image;
  Image out(width, height);
  for (int y = 0; y < height; ++y) {
    int sy = static_cast<int>(static_cast<long long>(y) * image.height / height);
    for (int x = 0; x < width; ++x) {
      int sx = static_cast<int>(static_cast<long long>(x) * image.width / width);
      for (int c = 0; c < 3; ++c) out.at(x, y, c) = image.at(sx, sy, c);
    }
  }
  return out;
}

}  // namespace stackdiff
