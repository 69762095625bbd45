#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "mvdiff/error.hpp"

namespace mvdiff {

/// Row-major H×W×C image of reals, nominally in [0, 1].
struct Image {
  int height = 0;
  int width = 0;
  int channels = 0;
  std::vector<double> data;

  Image() = default;
  Image(int h, int w, int c, double fill = 0.0)
      : height(h), width(w), channels(c),
        data(static_cast<size_t>(h) * w * c, fill) {}

  double& at(int y, int x, int c) {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  double at(int y, int x, int c) const {
    return data[(static_cast<size_t>(y) * width + x) * channels + c];
  }
  size_t size() const { return data.size(); }
  bool same_shape(const Image& o) const {
    return height == o.height && width == o.width && channels == o.channels;
  }
  bool operator==(const Image& o) const {
    return same_shape(o) && data == o.data;
  }
};

inline void require_same_shape(const Image& a, const Image& b, const char* who) {
  if (!a.same_shape(b)) {
    throw ShapeMismatch(std::string(who) + ": image shapes differ (" +
                        std::to_string(a.height) + "x" + std::to_string(a.width) + "x" +
                        std::to_string(a.channels) + " vs " + std::to_string(b.height) + "x" +
                        std::to_string(b.width) + "x" + std::to_string(b.channels) + ")");
  }
}

inline Image clamp01(Image img) {
  for (auto& v : img.data) v = std::clamp(v, 0.0, 1.0);
  return img;
}

inline std::uint8_t quantize8(double v) {
  return static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0));
}

/// Snap values onto the 8-bit grid, i.e. what a PNG round trip would return.
inline Image quantize(const Image& img) {
  Image out = img;
  for (auto& v : out.data) v = quantize8(v) / 255.0;
  return out;
}

namespace detail {
struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;
}  // namespace detail

/// Writes an 8-bit PNG (1 = gray, 3 = RGB). Values are clamped to [0,1].
inline void write_png(const std::string& path, const Image& img) {
  if (img.channels != 1 && img.channels != 3) {
    throw IoError(path, "PNG writer supports 1 or 3 channels");
  }
  detail::FilePtr fp(std::fopen(path.c_str(), "wb"));
  if (!fp) throw IoError(path, "cannot open for writing");

  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path, "libpng initialisation failed");
  }
  std::vector<std::uint8_t> row(static_cast<size_t>(img.width) * img.channels);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError(path, "libpng write error");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, img.width, img.height, 8,
               img.channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  // No timestamps or text chunks: identical images give identical files.
  png_write_info(png, info);
  for (int y = 0; y < img.height; ++y) {
    for (int x = 0; x < img.width; ++x)
      for (int c = 0; c < img.channels; ++c)
        row[static_cast<size_t>(x) * img.channels + c] = quantize8(img.at(y, x, c));
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

/// Reads a PNG and converts to RGB doubles in [0,1].
inline Image read_png(const std::string& path) {
  detail::FilePtr fp(std::fopen(path.c_str(), "rb"));
  if (!fp) throw IoError(path, "cannot open for reading");
  std::uint8_t sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8) != 0) {
    throw IoError(path, "not a PNG file");
  }
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path, "libpng initialisation failed");
  }
  Image img;
  std::vector<std::uint8_t> row;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw IoError(path, "libpng read error");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  const int depth = png_get_bit_depth(png, info);
  if (depth == 16) png_set_strip_16(png);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color == PNG_COLOR_TYPE_GRAY || color == PNG_COLOR_TYPE_GRAY_ALPHA) png_set_gray_to_rgb(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  png_read_update_info(png, info);

  const int w = static_cast<int>(png_get_image_width(png, info));
  const int h = static_cast<int>(png_get_image_height(png, info));
  img = Image(h, w, 3);
  row.resize(png_get_rowbytes(png, info));
  for (int y = 0; y < h; ++y) {
    png_read_row(png, row.data(), nullptr);
    for (int x = 0; x < w; ++x)
      for (int c = 0; c < 3; ++c) img.at(y, x, c) = row[static_cast<size_t>(x) * 3 + c] / 255.0;
  }
  png_read_end(png, nullptr);
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

/// Tiles equally sized images into a grid, `cols` per row.
inline Image montage(const std::vector<Image>& tiles, int cols, double background = 1.0) {
  if (tiles.empty()) return {};
  const Image& first = tiles.front();
  cols = std::max(1, std::min<int>(cols, static_cast<int>(tiles.size())));
  const int rows = (static_cast<int>(tiles.size()) + cols - 1) / cols;
  Image out(rows * first.height, cols * first.width, first.channels, background);
  for (size_t i = 0; i < tiles.size(); ++i) {
    require_same_shape(first, tiles[i], "montage");
    const int oy = static_cast<int>(i) / cols * first.height;
    const int ox = static_cast<int>(i) % cols * first.width;
    for (int y = 0; y < first.height; ++y)
      for (int x = 0; x < first.width; ++x)
        for (int c = 0; c < first.channels; ++c) out.at(oy + y, ox + x, c) = tiles[i].at(y, x, c);
  }
  return out;
}

}  // namespace mvdiff
