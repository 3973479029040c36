#pragma once

// PNG reading and writing through libpng. 8-bit gray/RGB for images and
// masks, 16-bit gray for depth maps.

#include "gfree/errors.hpp"
#include "gfree/image.hpp"

#include <png.h>

#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <algorithm>
#include <filesystem>
#include <memory>
#include <string>
#include <vector>

namespace gfree {

namespace detail {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

struct RawPng {
  int width = 0;
  int height = 0;
  int channels = 0;
  int bit_depth = 8;
  std::vector<std::uint16_t> samples;
};

inline RawPng read_png_raw(const std::filesystem::path& path) {
  FilePtr fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw FormatError("cannot open PNG '" + path.string() + "'");
  png_byte sig[8];
  if (std::fread(sig, 1, 8, fp.get()) != 8 || png_sig_cmp(sig, 0, 8))
    throw FormatError("not a PNG file: '" + path.string() + "'");
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  RawPng raw;
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw FormatError("corrupt PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_sig_bytes(png, 8);
  png_read_info(png, info);
  const int color = png_get_color_type(png, info);
  int depth = png_get_bit_depth(png, info);
  if (color == PNG_COLOR_TYPE_PALETTE) png_set_palette_to_rgb(png);
  if (color == PNG_COLOR_TYPE_GRAY && depth < 8) png_set_expand_gray_1_2_4_to_8(png);
  if (color & PNG_COLOR_MASK_ALPHA) png_set_strip_alpha(png);
  if (depth == 16) png_set_swap(png);
  png_read_update_info(png, info);
  raw.width = static_cast<int>(png_get_image_width(png, info));
  raw.height = static_cast<int>(png_get_image_height(png, info));
  raw.channels = png_get_channels(png, info);
  raw.bit_depth = png_get_bit_depth(png, info);
  const std::size_t rowbytes = png_get_rowbytes(png, info);
  std::vector<png_byte> buf(rowbytes * raw.height);
  std::vector<png_bytep> rows(raw.height);
  for (int y = 0; y < raw.height; ++y) rows[y] = buf.data() + y * rowbytes;
  png_read_image(png, rows.data());
  png_destroy_read_struct(&png, &info, nullptr);

  const std::size_t n = static_cast<std::size_t>(raw.width) * raw.height * raw.channels;
  raw.samples.resize(n);
  for (int y = 0; y < raw.height; ++y) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(raw.width) * raw.channels; ++i) {
      const std::size_t o = static_cast<std::size_t>(y) * raw.width * raw.channels + i;
      if (raw.bit_depth == 16) {
        std::uint16_t v;
        std::memcpy(&v, rows[y] + 2 * i, 2);
        raw.samples[o] = v;
      } else {
        raw.samples[o] = rows[y][i];
      }
    }
  }
  return raw;
}

inline void write_png_raw(const std::filesystem::path& path, int width, int height, int channels, int bit_depth,
                          const std::vector<std::uint16_t>& samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  FilePtr fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw Error("cannot write PNG '" + path.string() + "'");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png_create_info_struct(png);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error("failed writing PNG '" + path.string() + "'");
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, width, height, bit_depth, channels == 3 ? PNG_COLOR_TYPE_RGB : PNG_COLOR_TYPE_GRAY,
               PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  if (bit_depth == 16) png_set_swap(png);
  const std::size_t bps = bit_depth == 16 ? 2 : 1;
  std::vector<png_byte> row(static_cast<std::size_t>(width) * channels * bps);
  for (int y = 0; y < height; ++y) {
    for (std::size_t i = 0; i < static_cast<std::size_t>(width) * channels; ++i) {
      const std::uint16_t v = samples[static_cast<std::size_t>(y) * width * channels + i];
      if (bps == 2) {
        std::memcpy(row.data() + 2 * i, &v, 2);
      } else {
        row[i] = static_cast<png_byte>(v);
      }
    }
    png_write_row(png, row.data());
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

}  // namespace detail

inline ImageBuffer read_image_png(const std::filesystem::path& path) {
  auto raw = detail::read_png_raw(path);
  if (raw.channels != 1 && raw.channels != 3) throw FormatError("unsupported PNG channel count in '" + path.string() + "'");
  ImageBuffer img(raw.width, raw.height, raw.channels);
  const double scale = raw.bit_depth == 16 ? 65535.0 : 255.0;
  for (std::size_t i = 0; i < raw.samples.size(); ++i) img.data[i] = raw.samples[i] / scale;
  return img;
}

/// Single-channel PNG where normalized value > 0.5 is foreground.
inline Mask read_mask_png(const std::filesystem::path& path) {
  const ImageBuffer img = read_image_png(path);
  Mask m(img.width, img.height);
  for (std::size_t i = 0; i < img.pixel_count(); ++i) m.data[i] = img.data[i * img.channels] > 0.5 ? 1 : 0;
  return m;
}

inline void write_image_png(const std::filesystem::path& path, const ImageBuffer& img) {
  std::vector<std::uint16_t> s(img.data.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = static_cast<std::uint16_t>(std::lround(std::clamp(img.data[i], 0.0, 1.0) * 255.0));
  detail::write_png_raw(path, img.width, img.height, img.channels, 8, s);
}

inline void write_mask_png(const std::filesystem::path& path, const Mask& m) {
  std::vector<std::uint16_t> s(m.data.size());
  for (std::size_t i = 0; i < s.size(); ++i) s[i] = m.data[i] ? 255 : 0;
  detail::write_png_raw(path, m.width, m.height, 1, 8, s);
}

/// 16-bit depth PNG in millimeters (rounded, saturating at 65535).
inline void write_depth_png(const std::filesystem::path& path, int width, int height, const std::vector<double>& depth_mm) {
  std::vector<std::uint16_t> s(depth_mm.size());
  for (std::size_t i = 0; i < s.size(); ++i)
    s[i] = static_cast<std::uint16_t>(std::clamp(std::lround(depth_mm[i]), 0L, 65535L));
  detail::write_png_raw(path, width, height, 1, 16, s);
}

inline std::vector<double> read_depth_png(const std::filesystem::path& path) {
  auto raw = detail::read_png_raw(path);
  return {raw.samples.begin(), raw.samples.end()};
}

}  // namespace gfree
