#pragma once

// Rigid transforms and the two camera projections (perspective and
// equidistant fisheye). Lengths are millimeters; pixel centers sit on
// integer coordinates.

#include "gfree/detail/dual.hpp"
#include "gfree/errors.hpp"
#include "gfree/image.hpp"

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>

namespace gfree {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Mat2 = Eigen::Matrix2d;
using Mat3 = Eigen::Matrix3d;

/// Points past this angle from the optical axis are not projectable by the
/// equidistant model.
inline constexpr double kEquidistantMaxTheta = 1.8;

/// Rigid transform object/world -> camera: p_cam = rotation * p + translation.
struct Pose {
  Mat3 rotation = Mat3::Identity();
  Vec3 translation = Vec3::Zero();

  static Pose identity() { return {}; }

  [[nodiscard]] Vec3 apply(const Vec3& p) const { return rotation * p + translation; }

  [[nodiscard]] Pose inverse() const {
    Pose inv;
    inv.rotation = rotation.transpose();
    inv.translation = -(inv.rotation * translation);
    return inv;
  }

  /// Camera center expressed in the object frame.
  [[nodiscard]] Vec3 camera_center() const { return -(rotation.transpose() * translation); }

  [[nodiscard]] double orthonormality_residual() const {
    return (rotation.transpose() * rotation - Mat3::Identity()).cwiseAbs().maxCoeff();
  }

  [[nodiscard]] bool is_valid(double tol = 1e-9) const {
    return rotation.allFinite() && translation.allFinite() && orthonormality_residual() < tol &&
           std::abs(rotation.determinant() - 1.0) < tol;
  }
};

/// a * b applies b first: transform(compose(a, b), x) == a(b(x)).
inline Pose compose(const Pose& a, const Pose& b) {
  return {a.rotation * b.rotation, a.rotation * b.translation + a.translation};
}

inline Vec3 transform(const Pose& pose, const Vec3& point) { return pose.apply(point); }

inline Mat3 rotation_about(const Vec3& axis, double angle) {
  return Eigen::AngleAxisd(angle, axis.normalized()).toRotationMatrix();
}

/// SO(3) geodesic angle between two rotations.
inline double rotation_distance(const Mat3& a, const Mat3& b) {
  const double c = ((a.transpose() * b).trace() - 1.0) / 2.0;
  return std::acos(std::clamp(c, -1.0, 1.0));
}

enum class ProjectionKind { perspective, equidistant };

inline std::string to_string(ProjectionKind k) {
  return k == ProjectionKind::perspective ? "perspective" : "equidistant";
}

inline ProjectionKind projection_kind_from_string(const std::string& s) {
  if (s == "perspective") return ProjectionKind::perspective;
  if (s == "equidistant") return ProjectionKind::equidistant;
  throw ValidationError("unknown camera model '" + s + "'");
}

/// Zero-distortion intrinsics; inputs are expected to be undistorted already.
struct CameraModel {
  ProjectionKind kind = ProjectionKind::perspective;
  double fx = 1.0;
  double fy = 1.0;
  double cx = 0.0;
  double cy = 0.0;
  int width = 1;
  int height = 1;

  void validate() const {
    if (!(fx > 0.0) || !(fy > 0.0) || !std::isfinite(fx) || !std::isfinite(fy))
      throw ValidationError("camera focal lengths must be positive and finite");
    if (!std::isfinite(cx) || !std::isfinite(cy)) throw ValidationError("camera principal point must be finite");
    if (width < 1 || height < 1) throw ValidationError("camera image size must be >= 1");
  }

  [[nodiscard]] bool in_image(double u, double v) const {
    return u >= -0.5 && v >= -0.5 && u < width - 0.5 && v < height - 0.5;
  }
};

namespace detail {

using std::atan2;
using std::sqrt;

/// theta / r for the equidistant map, written in terms of r^2 so it stays
/// smooth on the optical axis.
template <class T>
T equidistant_ratio(const T& r2, const T& z) {
  if (value_of(r2) < 1e-4 * value_of(z) * value_of(z) && value_of(z) > 0) {
    const T iz = T(1.0) / z;
    const T q = r2 * iz * iz;
    return iz * (T(1.0) - q / 3.0 + q * q / 5.0 - q * q * q / 7.0);
  }
  const T r = sqrt(r2);
  return atan2(r, z) / r;
}

/// d(theta/r)/dr divided by r.
template <class T>
T equidistant_ratio_slope(const T& r2, const T& z) {
  if (value_of(r2) < 1e-4 * value_of(z) * value_of(z) && value_of(z) > 0) {
    const T iz = T(1.0) / z;
    const T iz3 = iz * iz * iz;
    const T q = r2 * iz * iz;
    return iz3 * (T(-2.0 / 3.0) + q * (4.0 / 5.0) - q * q * (6.0 / 7.0) + q * q * q * (8.0 / 9.0));
  }
  const T r = sqrt(r2);
  const T theta = atan2(r, z);
  return (z * r / (r2 + z * z) - theta) / (r2 * r);
}

}  // namespace detail

/// Projects a camera-frame point to pixel coordinates. Returns nullopt
/// ("Behind") when the point is not projectable by the camera kind.
template <class T>
std::optional<Eigen::Matrix<T, 2, 1>> project(const Eigen::Matrix<T, 3, 1>& p, const CameraModel& cam) {
  using detail::value_of;
  const double xv = value_of(p.x()), yv = value_of(p.y()), zv = value_of(p.z());
  if (std::isnan(xv) || std::isnan(yv) || std::isnan(zv)) throw std::invalid_argument("project: NaN input");
  if (cam.kind == ProjectionKind::perspective) {
    if (!(zv > 0.0)) return std::nullopt;
    return Eigen::Matrix<T, 2, 1>(p.x() / p.z() * cam.fx + cam.cx, p.y() / p.z() * cam.fy + cam.cy);
  }
  const double rv2 = xv * xv + yv * yv;
  if (rv2 == 0.0 && zv <= 0.0) return std::nullopt;
  if (std::atan2(std::sqrt(rv2), zv) > kEquidistantMaxTheta) return std::nullopt;
  const T r2 = p.x() * p.x() + p.y() * p.y();
  const T g = detail::equidistant_ratio(r2, p.z());
  return Eigen::Matrix<T, 2, 1>(cam.fx * g * p.x() + cam.cx, cam.fy * g * p.y() + cam.cy);
}

inline std::optional<Vec2> project(const Vec3& p, const CameraModel& cam) { return project<double>(p, cam); }

/// Analytic 2x3 Jacobian d(pixel)/d(p_cam). Caller must ensure the point is
/// projectable.
template <class T>
Eigen::Matrix<T, 2, 3> projection_jacobian(const Eigen::Matrix<T, 3, 1>& p, const CameraModel& cam) {
  Eigen::Matrix<T, 2, 3> J;
  const T& x = p.x();
  const T& y = p.y();
  const T& z = p.z();
  if (cam.kind == ProjectionKind::perspective) {
    const T iz = T(1.0) / z;
    J << cam.fx * iz, T(0.0), -cam.fx * x * iz * iz,
         T(0.0), cam.fy * iz, -cam.fy * y * iz * iz;
    return J;
  }
  const T r2 = x * x + y * y;
  const T g = detail::equidistant_ratio(r2, z);
  const T h = detail::equidistant_ratio_slope(r2, z);
  const T dz = T(-1.0) / (r2 + z * z);
  J << cam.fx * (g + x * x * h), cam.fx * x * y * h, cam.fx * x * dz,
       cam.fy * x * y * h, cam.fy * (g + y * y * h), cam.fy * y * dz;
  return J;
}

/// Depth used for sorting and depth maps: z for perspective, ray range for
/// equidistant.
template <class T>
T projection_depth(const Eigen::Matrix<T, 3, 1>& p, const CameraModel& cam) {
  using std::sqrt;
  if (cam.kind == ProjectionKind::perspective) return p.z();
  return sqrt(p.squaredNorm());
}

/// Unit viewing ray through a pixel, or nullopt when the pixel lies beyond
/// the equidistant validity cutoff.
inline std::optional<Vec3> unproject(const Vec2& pixel, const CameraModel& cam) {
  const double a = (pixel.x() - cam.cx) / cam.fx;
  const double b = (pixel.y() - cam.cy) / cam.fy;
  if (cam.kind == ProjectionKind::perspective) return Vec3(a, b, 1.0).normalized();
  const double theta = std::hypot(a, b);
  if (theta > kEquidistantMaxTheta) return std::nullopt;
  if (theta < 1e-12) return Vec3(0, 0, 1);
  const double s = std::sin(theta) / theta;
  return Vec3(a * s, b * s, std::cos(theta));
}

/// Object-to-camera pose for a camera at `eye` (object frame) whose optical
/// axis points at the origin. Image "up" follows world z, or world x when the
/// axis is within ~2.6 degrees of z; no in-plane roll.
inline Pose look_at(const Vec3& eye) {
  if (!(eye.norm() > 0.0)) throw ValidationError("look_at: eye must not be the origin");
  const Vec3 z = (-eye).normalized();
  const Vec3 up = std::abs(z.z()) > 0.999 ? Vec3::UnitX() : Vec3::UnitZ();
  const Vec3 y = -(up - up.dot(z) * z).normalized();
  const Vec3 x = y.cross(z);
  Pose p;
  p.rotation.row(0) = x.transpose();
  p.rotation.row(1) = y.transpose();
  p.rotation.row(2) = z.transpose();
  p.translation = -p.rotation * eye;
  return p;
}

}  // namespace gfree
