#pragma once

// SSIM with an 11x11 Gaussian window (sigma 1.5), zero-padded "same"
// filtering, averaged over pixels and channels, plus its gradient with
// respect to the first image.

#include "gfree/errors.hpp"
#include "gfree/image.hpp"

#include <array>
#include <cmath>
#include <vector>

namespace gfree {

namespace detail {

inline constexpr int kSsimRadius = 5;

inline const std::array<double, 2 * kSsimRadius + 1>& ssim_kernel() {
  static const auto k = [] {
    std::array<double, 2 * kSsimRadius + 1> w{};
    double sum = 0.0;
    for (int i = -kSsimRadius; i <= kSsimRadius; ++i) {
      w[i + kSsimRadius] = std::exp(-(i * i) / (2.0 * 1.5 * 1.5));
      sum += w[i + kSsimRadius];
    }
    for (auto& v : w) v /= sum;
    return w;
  }();
  return k;
}

/// Separable zero-padded Gaussian filter of one plane (w x h). Self-adjoint
/// because the kernel is symmetric.
inline std::vector<double> gaussian_filter(const std::vector<double>& in, int w, int h) {
  const auto& k = ssim_kernel();
  std::vector<double> tmp(in.size(), 0.0), out(in.size(), 0.0);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int xx = x + d;
        if (xx >= 0 && xx < w) s += k[d + kSsimRadius] * in[static_cast<std::size_t>(y) * w + xx];
      }
      tmp[static_cast<std::size_t>(y) * w + x] = s;
    }
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      double s = 0.0;
      for (int d = -kSsimRadius; d <= kSsimRadius; ++d) {
        const int yy = y + d;
        if (yy >= 0 && yy < h) s += k[d + kSsimRadius] * tmp[static_cast<std::size_t>(yy) * w + x];
      }
      out[static_cast<std::size_t>(y) * w + x] = s;
    }
  return out;
}

}  // namespace detail

inline constexpr double kSsimC1 = 0.01 * 0.01;
inline constexpr double kSsimC2 = 0.03 * 0.03;

struct SsimResult {
  double value = 1.0;
  ImageBuffer grad;  // d value / d first image; empty unless requested
};

inline SsimResult ssim_eval(const ImageBuffer& a, const ImageBuffer& b, bool want_grad) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw ValidationError("ssim: image dimensions differ");
  const int w = a.width, h = a.height;
  const std::size_t np = a.pixel_count();
  const double n_total = static_cast<double>(np) * a.channels;
  SsimResult res;
  res.value = 0.0;
  if (want_grad) res.grad = ImageBuffer(w, h, a.channels);
  std::vector<double> x(np), y(np), xx(np), yy(np), xy(np);
  for (int c = 0; c < a.channels; ++c) {
    for (std::size_t i = 0; i < np; ++i) {
      x[i] = a.data[i * a.channels + c];
      y[i] = b.data[i * a.channels + c];
      xx[i] = x[i] * x[i];
      yy[i] = y[i] * y[i];
      xy[i] = x[i] * y[i];
    }
    const auto mx = detail::gaussian_filter(x, w, h);
    const auto my = detail::gaussian_filter(y, w, h);
    const auto exx = detail::gaussian_filter(xx, w, h);
    const auto eyy = detail::gaussian_filter(yy, w, h);
    const auto exy = detail::gaussian_filter(xy, w, h);
    std::vector<double> d_mu(np), d_exx(np), d_exy(np);
    for (std::size_t i = 0; i < np; ++i) {
      const double sx = exx[i] - mx[i] * mx[i];
      const double sy = eyy[i] - my[i] * my[i];
      const double sxy = exy[i] - mx[i] * my[i];
      const double a1 = 2.0 * mx[i] * my[i] + kSsimC1;
      const double a2 = 2.0 * sxy + kSsimC2;
      const double b1 = mx[i] * mx[i] + my[i] * my[i] + kSsimC1;
      const double b2 = sx + sy + kSsimC2;
      const double s = a1 * a2 / (b1 * b2);
      res.value += s;
      if (want_grad) {
        d_mu[i] = (2.0 * my[i] * a2 - 2.0 * my[i] * a1) / (b1 * b2) - s * (2.0 * mx[i] / b1 - 2.0 * mx[i] / b2);
        d_exx[i] = -s / b2;
        d_exy[i] = 2.0 * a1 / (b1 * b2);
      }
    }
    if (want_grad) {
      const auto g_mu = detail::gaussian_filter(d_mu, w, h);
      const auto g_xx = detail::gaussian_filter(d_exx, w, h);
      const auto g_xy = detail::gaussian_filter(d_exy, w, h);
      for (std::size_t i = 0; i < np; ++i)
        res.grad.data[i * a.channels + c] = (g_mu[i] + 2.0 * x[i] * g_xx[i] + y[i] * g_xy[i]) / n_total;
    }
  }
  res.value /= n_total;
  return res;
}

inline double ssim(const ImageBuffer& a, const ImageBuffer& b) { return ssim_eval(a, b, false).value; }

}  // namespace gfree
