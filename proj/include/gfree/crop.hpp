#pragma once

// Mask-driven square crops shared by onboarding (zoomed frames) and
// detection (proposal crops).

#include "gfree/errors.hpp"
#include "gfree/geometry.hpp"
#include "gfree/image.hpp"

#include <algorithm>
#include <cmath>

namespace gfree {

/// Maps source pixel coordinates into the crop: u' = (u - origin_x) * scale_x.
struct CropTransform {
  double origin_x = 0.0;
  double origin_y = 0.0;
  double scale_x = 1.0;
  double scale_y = 1.0;
  int size = 1;

  [[nodiscard]] Vec2 to_crop(const Vec2& src) const {
    return {(src.x() - origin_x) * scale_x, (src.y() - origin_y) * scale_y};
  }
  [[nodiscard]] Vec2 to_source(const Vec2& crop) const {
    return {crop.x() / scale_x + origin_x, crop.y() / scale_y + origin_y};
  }
  [[nodiscard]] CameraModel apply(const CameraModel& cam) const {
    CameraModel out = cam;
    out.fx = cam.fx * scale_x;
    out.fy = cam.fy * scale_y;
    out.cx = (cam.cx - origin_x) * scale_x;
    out.cy = (cam.cy - origin_y) * scale_y;
    out.width = size;
    out.height = size;
    return out;
  }
};

inline constexpr double kCropDilation = 1.1;

/// Square window around the tight mask box, side = 1.1 * max(w, h), centered
/// on the box, then intersected with the image extent [-0.5, W - 0.5].
inline CropTransform crop_window(const Mask& mask, int out_size) {
  if (out_size < 1) throw ValidationError("crop size must be >= 1");
  const PixelBox box = mask_to_bbox(mask);
  const double side = kCropDilation * std::max(box.w, box.h);
  const double mx = box.x + (box.w - 1) / 2.0;
  const double my = box.y + (box.h - 1) / 2.0;
  const double x_lo = std::max(mx - side / 2, -0.5), x_hi = std::min(mx + side / 2, mask.width - 0.5);
  const double y_lo = std::max(my - side / 2, -0.5), y_hi = std::min(my + side / 2, mask.height - 0.5);
  CropTransform t;
  t.size = out_size;
  t.scale_x = out_size / (x_hi - x_lo);
  t.scale_y = out_size / (y_hi - y_lo);
  t.origin_x = x_lo + 0.5 / t.scale_x;
  t.origin_y = y_lo + 0.5 / t.scale_y;
  return t;
}

namespace detail {
inline double sample_clamped(const ImageBuffer& img, double x, double y, int c) {
  x = std::clamp(x, 0.0, img.width - 1.0);
  y = std::clamp(y, 0.0, img.height - 1.0);
  return sample_bilinear(img, x, y, c);
}
}  // namespace detail

/// Resamples `img` through `t`. Bilinear, supersampled when shrinking so the
/// output averages over each destination pixel's footprint.
inline ImageBuffer resample(const ImageBuffer& img, const CropTransform& t) {
  ImageBuffer out(t.size, t.size, img.channels);
  const int ssx = std::max(1, static_cast<int>(std::ceil(1.0 / t.scale_x)));
  const int ssy = std::max(1, static_cast<int>(std::ceil(1.0 / t.scale_y)));
  for (int y = 0; y < t.size; ++y) {
    for (int x = 0; x < t.size; ++x) {
      for (int c = 0; c < img.channels; ++c) {
        double acc = 0.0;
        for (int j = 0; j < ssy; ++j) {
          for (int i = 0; i < ssx; ++i) {
            const double cx = x - 0.5 + (i + 0.5) / ssx;
            const double cy = y - 0.5 + (j + 0.5) / ssy;
            const Vec2 src = t.to_source({cx, cy});
            acc += detail::sample_clamped(img, src.x(), src.y(), c);
          }
        }
        out.at(x, y, c) = acc / (ssx * ssy);
      }
    }
  }
  return out;
}

/// Nearest-neighbour mask resampling.
inline Mask resample(const Mask& mask, const CropTransform& t) {
  Mask out(t.size, t.size);
  for (int y = 0; y < t.size; ++y)
    for (int x = 0; x < t.size; ++x) {
      const Vec2 src = t.to_source({static_cast<double>(x), static_cast<double>(y)});
      out.set(x, y, sample_nearest(mask, src.x(), src.y()));
    }
  return out;
}

}  // namespace gfree
