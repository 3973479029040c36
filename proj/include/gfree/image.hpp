#pragma once

#include "gfree/errors.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace gfree {

/// Row-major image with 1 (grayscale) or 3 (RGB) interleaved channels,
/// values normalized to [0, 1].
struct ImageBuffer {
  int width = 0;
  int height = 0;
  int channels = 1;
  std::vector<double> data;

  ImageBuffer() = default;
  ImageBuffer(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), data(static_cast<std::size_t>(w) * h * c, fill) {
    if (w < 1 || h < 1) throw ValidationError("image dimensions must be >= 1");
    if (c != 1 && c != 3) throw ValidationError("image must have 1 or 3 channels");
  }

  [[nodiscard]] std::size_t index(int x, int y, int c = 0) const {
    return (static_cast<std::size_t>(y) * width + x) * channels + c;
  }
  double& at(int x, int y, int c = 0) { return data[index(x, y, c)]; }
  [[nodiscard]] double at(int x, int y, int c = 0) const { return data[index(x, y, c)]; }
  [[nodiscard]] std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
  [[nodiscard]] bool empty() const { return data.empty(); }
};

/// Binary mask; nonzero bytes are foreground.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<std::uint8_t> data;

  Mask() = default;
  Mask(int w, int h, bool fill = false)
      : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {
    if (w < 1 || h < 1) throw ValidationError("mask dimensions must be >= 1");
  }

  [[nodiscard]] bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
  void set(int x, int y, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
  [[nodiscard]] bool contains(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }

  [[nodiscard]] std::size_t count() const {
    return static_cast<std::size_t>(std::count_if(data.begin(), data.end(), [](auto v) { return v != 0; }));
  }
  bool operator==(const Mask&) const = default;
};

/// Inclusive-extent pixel box: x, y of the top-left pixel plus width/height in pixels.
struct PixelBox {
  int x = 0;
  int y = 0;
  int w = 0;
  int h = 0;
  bool operator==(const PixelBox&) const = default;
};

/// Tightest axis-aligned box around the foreground of `mask`.
inline PixelBox mask_to_bbox(const Mask& mask) {
  int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
  for (int y = 0; y < mask.height; ++y) {
    for (int x = 0; x < mask.width; ++x) {
      if (!mask.at(x, y)) continue;
      x0 = std::min(x0, x);
      x1 = std::max(x1, x);
      y0 = std::min(y0, y);
      y1 = std::max(y1, y);
    }
  }
  if (x1 < 0) throw EmptyMaskError();
  return {x0, y0, x1 - x0 + 1, y1 - y0 + 1};
}

/// Rec.601 luma.
inline ImageBuffer to_grayscale(const ImageBuffer& rgb) {
  if (rgb.channels != 3) throw ValidationError("to_grayscale expects a 3-channel image");
  ImageBuffer out(rgb.width, rgb.height, 1);
  for (std::size_t i = 0; i < rgb.pixel_count(); ++i) {
    const double y = 0.299 * rgb.data[3 * i] + 0.587 * rgb.data[3 * i + 1] + 0.114 * rgb.data[3 * i + 2];
    out.data[i] = std::clamp(y, 0.0, 1.0);
  }
  return out;
}

/// Bilinear sample at continuous pixel coordinates (pixel centers on integers).
/// Samples outside the image read as zero.
inline double sample_bilinear(const ImageBuffer& img, double x, double y, int c) {
  const int x0 = static_cast<int>(std::floor(x));
  const int y0 = static_cast<int>(std::floor(y));
  const double ax = x - x0;
  const double ay = y - y0;
  auto px = [&](int xi, int yi) {
    if (xi < 0 || yi < 0 || xi >= img.width || yi >= img.height) return 0.0;
    return img.at(xi, yi, c);
  };
  return (1 - ay) * ((1 - ax) * px(x0, y0) + ax * px(x0 + 1, y0)) +
         ay * ((1 - ax) * px(x0, y0 + 1) + ax * px(x0 + 1, y0 + 1));
}

inline bool sample_nearest(const Mask& m, double x, double y) {
  const int xi = static_cast<int>(std::lround(x));
  const int yi = static_cast<int>(std::lround(y));
  return m.contains(xi, yi) && m.at(xi, yi);
}

/// Zeroes every pixel outside the mask.
inline void apply_mask(ImageBuffer& img, const Mask& mask) {
  if (img.width != mask.width || img.height != mask.height) throw ValidationError("image/mask size mismatch");
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    if (mask.data[i]) continue;
    for (int c = 0; c < img.channels; ++c) img.data[i * img.channels + c] = 0.0;
  }
}

inline double psnr(const ImageBuffer& a, const ImageBuffer& b) {
  if (a.data.size() != b.data.size()) throw ValidationError("psnr: size mismatch");
  double mse = 0.0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const double d = a.data[i] - b.data[i];
    mse += d * d;
  }
  mse /= static_cast<double>(a.data.size());
  if (mse <= 0.0) return std::numeric_limits<double>::infinity();
  return -10.0 * std::log10(mse);
}

inline double mask_iou(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height) throw ValidationError("mask_iou: size mismatch");
  std::size_t inter = 0, uni = 0;
  for (std::size_t i = 0; i < a.data.size(); ++i) {
    const bool pa = a.data[i] != 0, pb = b.data[i] != 0;
    inter += (pa && pb);
    uni += (pa || pb);
  }
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

}  // namespace gfree
