#pragma once

// Synthetic data: ray-cast textured primitives for onboarding, Gaussian
// objects sampled on their surfaces, and multi-object test scenes with
// connected-component proposals.

#include "gfree/errors.hpp"
#include "gfree/geometry.hpp"
#include "gfree/image.hpp"
#include "gfree/splat_render.hpp"
#include "gfree/visual_hull.hpp"

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

namespace gfree {

enum class ShapeKind { sphere, cube };

inline ShapeKind shape_from_string(const std::string& s) {
  if (s == "sphere") return ShapeKind::sphere;
  if (s == "cube") return ShapeKind::cube;
  throw ValidationError("unknown fixture shape '" + s + "'");
}

/// Unlit procedural object centered at its origin. `size` is the sphere
/// radius or the cube half side, in mm.
struct AnalyticObject {
  ShapeKind shape = ShapeKind::sphere;
  double size = 50.0;
  Vec3 phase = Vec3::Zero();  // texture variation between objects

  /// Distance along the ray to the first surface hit, if any.
  [[nodiscard]] std::optional<double> intersect(const Vec3& origin, const Vec3& dir) const {
    if (shape == ShapeKind::sphere) {
      const double b = origin.dot(dir);
      const double c = origin.squaredNorm() - size * size;
      const double disc = b * b - c;
      if (disc < 0) return std::nullopt;
      const double t = -b - std::sqrt(disc);
      if (t <= 0) return std::nullopt;
      return t;
    }
    double t0 = -std::numeric_limits<double>::infinity(), t1 = std::numeric_limits<double>::infinity();
    for (int k = 0; k < 3; ++k) {
      if (std::abs(dir[k]) < 1e-15) {
        if (std::abs(origin[k]) > size) return std::nullopt;
        continue;
      }
      double a = (-size - origin[k]) / dir[k], b = (size - origin[k]) / dir[k];
      if (a > b) std::swap(a, b);
      t0 = std::max(t0, a);
      t1 = std::min(t1, b);
    }
    if (t0 > t1 || t0 <= 0) return std::nullopt;
    return t0;
  }

  /// Smooth albedo at a surface point.
  [[nodiscard]] std::array<double, 3> albedo(const Vec3& p) const {
    const double k = 2.0 * M_PI / (2.2 * size);
    return {0.5 + 0.3 * std::sin(k * p.x() + phase.x()) * std::cos(0.7 * k * p.z()),
            0.5 + 0.3 * std::sin(k * p.y() + phase.y()),
            0.5 + 0.3 * std::cos(k * p.z() + phase.z()) * std::sin(0.5 * k * p.x() + 1.0)};
  }
};

struct AnalyticView {
  ImageBuffer image;
  Mask mask;
};

/// Ray-casts the object; 2x2 supersampled color, mask from the pixel-center ray.
inline AnalyticView render_analytic(const AnalyticObject& obj, const Pose& pose, const CameraModel& cam,
                                    int channels = 3) {
  AnalyticView v{ImageBuffer(cam.width, cam.height, channels), Mask(cam.width, cam.height)};
  const Vec3 center = pose.camera_center();
  const Mat3 Rt = pose.rotation.transpose();
  auto shade = [&](double u, double w, std::array<double, 3>& col) {
    const auto ray = unproject(Vec2(u, w), cam);
    if (!ray) return false;
    const Vec3 d = Rt * *ray;
    const auto t = obj.intersect(center, d);
    if (!t) return false;
    col = obj.albedo(center + *t * d);
    return true;
  };
  for (int y = 0; y < cam.height; ++y) {
    for (int x = 0; x < cam.width; ++x) {
      std::array<double, 3> acc{}, col{};
      for (double oy : {-0.25, 0.25})
        for (double ox : {-0.25, 0.25})
          if (shade(x + ox, y + oy, col))
            for (int c = 0; c < 3; ++c) acc[c] += 0.25 * col[c];
      v.mask.set(x, y, shade(x, y, col));
      if (channels == 3) {
        for (int c = 0; c < 3; ++c) v.image.at(x, y, c) = acc[c];
      } else {
        v.image.at(x, y) = 0.299 * acc[0] + 0.587 * acc[1] + 0.114 * acc[2];
      }
    }
  }
  return v;
}

/// Object-to-camera pose for a camera at `distance` mm, given azimuth and
/// elevation (radians) around the object z axis, looking at the origin.
inline Pose orbit_pose(double azimuth, double elevation, double distance, double roll = 0.0) {
  const Vec3 eye = distance * Vec3(std::cos(elevation) * std::cos(azimuth), std::cos(elevation) * std::sin(azimuth),
                                   std::sin(elevation));
  Pose p = look_at(eye);
  p.rotation = rotation_about(Vec3::UnitZ(), roll) * p.rotation;
  p.translation = -p.rotation * eye;
  return p;
}

/// Static-onboarding style capture: half the views from above ("up"), half
/// from below with the camera rolled 180 degrees ("down").
inline std::vector<OnboardingFrame> onboarding_views(const AnalyticObject& obj, const CameraModel& cam, int count,
                                                      double distance, int channels = 3) {
  std::vector<OnboardingFrame> frames;
  const int half = count / 2;
  for (int i = 0; i < count; ++i) {
    const bool up = i < count - half;
    const int k = up ? i : i - (count - half);
    const int n = up ? count - half : half;
    const double az = 2.0 * M_PI * (k + (up ? 0.0 : 0.5)) / n;
    const double el = up ? 0.45 : -0.45;
    OnboardingFrame f;
    f.camera = cam;
    f.pose = orbit_pose(az, el, distance, up ? 0.0 : M_PI);
    auto view = render_analytic(obj, f.pose, cam, channels);
    f.image = std::move(view.image);
    f.mask = std::move(view.mask);
    f.sequence = up ? "up" : "down";
    f.frame_id = f.sequence + "_" + std::to_string(k);
    frames.push_back(std::move(f));
  }
  return frames;
}

/// Gaussian object with isotropic splats on the analytic surface, colored by
/// the albedo. Used where a trained object is not needed for the property
/// under test.
inline GaussianObject sample_surface_object(const AnalyticObject& obj, int object_id, int channels, int count = 1500) {
  GaussianObject out;
  out.channels = channels;
  out.object_id = object_id;
  const double golden = M_PI * (3.0 - std::sqrt(5.0));
  const double area = obj.shape == ShapeKind::sphere ? 4 * M_PI * obj.size * obj.size : 24 * obj.size * obj.size;
  const double spacing = std::sqrt(area / count);
  for (int i = 0; i < count; ++i) {
    const double z = 1.0 - 2.0 * (i + 0.5) / count;
    const double r = std::sqrt(1 - z * z);
    const Vec3 dir(r * std::cos(golden * i), r * std::sin(golden * i), z);
    const auto t = obj.intersect(3 * obj.size * dir, -dir);
    if (!t) continue;
    const Vec3 p = 3 * obj.size * dir - *t * dir;
    Gaussian g;
    g.mean = p;
    g.log_scale = Vec3::Constant(std::log(0.8 * spacing));
    g.opacity_logit = logit(0.95);
    const auto a = obj.albedo(p);
    const double Y0 = 0.28209479177387814;
    if (channels == 3) {
      for (int c = 0; c < 3; ++c) g.sh_at(c, 0) = (a[c] - 0.5) / Y0;
    } else {
      g.sh_at(0, 0) = (0.299 * a[0] + 0.587 * a[1] + 0.114 * a[2] - 0.5) / Y0;
    }
    out.gaussians.push_back(g);
  }
  return out;
}

/// 4-connected components of a mask, in raster order of their first pixel.
inline std::vector<Mask> connected_components(const Mask& m, std::size_t min_pixels = 1) {
  std::vector<int> label(m.data.size(), -1);
  std::vector<Mask> out;
  std::vector<std::size_t> stack;
  for (std::size_t start = 0; start < m.data.size(); ++start) {
    if (!m.data[start] || label[start] >= 0) continue;
    Mask comp(m.width, m.height);
    std::size_t n = 0;
    const int id = static_cast<int>(out.size());
    stack.push_back(start);
    label[start] = id;
    while (!stack.empty()) {
      const std::size_t p = stack.back();
      stack.pop_back();
      comp.data[p] = 1;
      ++n;
      const int x = static_cast<int>(p % m.width), y = static_cast<int>(p / m.width);
      const int nb[4][2] = {{x - 1, y}, {x + 1, y}, {x, y - 1}, {x, y + 1}};
      for (const auto& q : nb) {
        if (!m.contains(q[0], q[1])) continue;
        const std::size_t qi = static_cast<std::size_t>(q[1]) * m.width + q[0];
        if (m.data[qi] && label[qi] < 0) {
          label[qi] = id;
          stack.push_back(qi);
        }
      }
    }
    if (n >= min_pixels) out.push_back(std::move(comp));
  }
  return out;
}

}  // namespace gfree
