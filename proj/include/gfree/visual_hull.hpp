#pragma once

// Onboarding view selection and silhouette carving used to seed the Gaussian
// positions.

#include "gfree/detail/binary.hpp"
#include "gfree/errors.hpp"
#include "gfree/file_util.hpp"
#include "gfree/geometry.hpp"
#include "gfree/image.hpp"

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <span>
#include <string>
#include <vector>

namespace gfree {

/// One posed onboarding image with its estimated object mask.
struct OnboardingFrame {
  ImageBuffer image;
  Mask mask;
  CameraModel camera;
  Pose pose;
  std::string frame_id;
  std::string sequence;  // "up" / "down" for static onboarding, free-form otherwise
};

/// Greedy farthest point sampling over rotations under the SO(3) geodesic
/// metric. Starts at index 0; ties go to the smallest index.
inline std::vector<std::size_t> fps_select(std::span<const Mat3> rotations, std::size_t max_count) {
  if (max_count < 1) throw ValidationError("fps_select: max_count must be >= 1");
  if (rotations.empty()) throw ValidationError("fps_select: no rotations");
  for (const auto& R : rotations) {
    if (!R.allFinite() || (R.transpose() * R - Mat3::Identity()).cwiseAbs().maxCoeff() > 1e-6)
      throw ValidationError("fps_select: rotation is not orthonormal");
  }
  const std::size_t n = rotations.size();
  const std::size_t k = std::min(max_count, n);
  std::vector<std::size_t> picked{0};
  std::vector<char> taken(n, 0);
  taken[0] = 1;
  std::vector<double> min_dist(n);
  for (std::size_t i = 0; i < n; ++i) min_dist[i] = rotation_distance(rotations[0], rotations[i]);
  while (picked.size() < k) {
    std::size_t best = n;
    for (std::size_t i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (best == n || min_dist[i] > min_dist[best]) best = i;
    }
    picked.push_back(best);
    taken[best] = 1;
    for (std::size_t i = 0; i < n; ++i)
      min_dist[i] = std::min(min_dist[i], rotation_distance(rotations[best], rotations[i]));
  }
  return picked;
}

/// Axis-aligned voxel lattice. `origin` is the minimum corner; voxel (i,j,k)
/// has its center at origin + (i+0.5, j+0.5, k+0.5) * voxel_size.
struct GridSpec {
  Vec3 origin = Vec3::Zero();
  double voxel_size = 1.0;
  int nx = 1;
  int ny = 1;
  int nz = 1;

  [[nodiscard]] std::size_t voxel_count() const { return static_cast<std::size_t>(nx) * ny * nz; }
  [[nodiscard]] Vec3 center(int i, int j, int k) const {
    return origin + voxel_size * Vec3(i + 0.5, j + 0.5, k + 0.5);
  }
  [[nodiscard]] Vec3 center(std::size_t linear) const {
    const int i = static_cast<int>(linear % nx);
    const int j = static_cast<int>((linear / nx) % ny);
    const int k = static_cast<int>(linear / (static_cast<std::size_t>(nx) * ny));
    return center(i, j, k);
  }
  void validate() const {
    if (!(voxel_size > 0.0)) throw ValidationError("voxel_size must be positive");
    if (nx < 1 || ny < 1 || nz < 1) throw ValidationError("grid dims must be >= 1");
  }
};

struct VoxelGrid {
  GridSpec spec;
  std::vector<std::uint8_t> occupancy;  // x fastest, then y, then z

  [[nodiscard]] std::size_t occupied_count() const {
    return static_cast<std::size_t>(std::count(occupancy.begin(), occupancy.end(), 1));
  }
  bool operator==(const VoxelGrid& o) const {
    return spec.origin == o.spec.origin && spec.voxel_size == o.spec.voxel_size && spec.nx == o.spec.nx &&
           spec.ny == o.spec.ny && spec.nz == o.spec.nz && occupancy == o.occupancy;
  }
};

/// True when `point` (object frame) lands on a foreground pixel of the view.
template <class View>
bool inside_silhouette(const View& view, const Vec3& point) {
  const auto px = project(view.pose.apply(point), view.camera);
  if (!px) return false;
  const long u = std::lround(px->x());
  const long v = std::lround(px->y());
  if (u < 0 || v < 0 || u >= view.mask.width || v >= view.mask.height) return false;
  return view.mask.at(static_cast<int>(u), static_cast<int>(v));
}

/// Keeps a voxel iff its center projects onto mask foreground in every view.
/// `View` needs `mask`, `camera` and `pose` members (OnboardingFrame,
/// ZoomedFrame).
template <class View>
VoxelGrid carve(std::span<const View> views, const GridSpec& spec) {
  if (views.empty()) throw ValidationError("carve: no views");
  spec.validate();
  VoxelGrid grid{spec, std::vector<std::uint8_t>(spec.voxel_count(), 0)};
  const auto n = static_cast<std::int64_t>(spec.voxel_count());
#pragma omp parallel for schedule(static)
  for (std::int64_t idx = 0; idx < n; ++idx) {
    const Vec3 c = spec.center(static_cast<std::size_t>(idx));
    bool keep = true;
    for (const auto& view : views) {
      if (!inside_silhouette(view, c)) {
        keep = false;
        break;
      }
    }
    grid.occupancy[static_cast<std::size_t>(idx)] = keep ? 1 : 0;
  }
  if (grid.occupied_count() == 0) throw EmptyHullError("visual hull is empty: masks/poses are inconsistent");
  return grid;
}

template <class View>
VoxelGrid carve(const std::vector<View>& views, const GridSpec& spec) {
  return carve(std::span<const View>(views), spec);
}

/// Cube centered on the object origin. The half extent is 1.2x a radius
/// estimate taken from each view's distance and mask extent around the
/// projected origin.
template <class View>
GridSpec default_grid_spec(std::span<const View> views, int dims = 128) {
  double radius = 0.0;
  for (const auto& view : views) {
    const PixelBox box = mask_to_bbox(view.mask);
    const double dist = view.pose.translation.norm();
    const auto center = project(view.pose.translation, view.camera);
    Vec2 c = center ? *center : Vec2(view.camera.cx, view.camera.cy);
    double reach_px = 0.0;
    for (double x : {box.x - 0.5, box.x + box.w - 0.5})
      for (double y : {box.y - 0.5, box.y + box.h - 0.5})
        reach_px = std::max(reach_px, std::hypot((x - c.x()) / view.camera.fx, (y - c.y()) / view.camera.fy));
    const double angle = view.camera.kind == ProjectionKind::perspective ? std::atan(reach_px) : reach_px;
    radius = std::max(radius, dist * std::sin(std::min(angle, M_PI / 2)));
  }
  if (!(radius > 0.0)) throw ValidationError("cannot estimate object radius from views");
  const double half = 1.2 * radius;
  GridSpec spec;
  spec.origin = Vec3::Constant(-half);
  spec.voxel_size = 2.0 * half / dims;
  spec.nx = spec.ny = spec.nz = dims;
  return spec;
}

/// Occupied voxel centers; when there are more than `target_count` they are
/// thinned by farthest point sampling (seeded at the first occupied voxel).
inline std::vector<Vec3> init_points(const VoxelGrid& grid, std::size_t target_count) {
  std::vector<Vec3> centers;
  for (std::size_t i = 0; i < grid.occupancy.size(); ++i)
    if (grid.occupancy[i]) centers.push_back(grid.spec.center(i));
  if (centers.empty()) throw EmptyHullError();
  if (target_count == 0) throw ValidationError("init_points: target_count must be >= 1");
  if (centers.size() <= target_count) return centers;

  std::vector<double> min_d2(centers.size(), std::numeric_limits<double>::infinity());
  std::vector<Vec3> out;
  out.reserve(target_count);
  std::size_t current = 0;
  for (std::size_t pick = 0; pick < target_count; ++pick) {
    out.push_back(centers[current]);
    min_d2[current] = -1.0;
    std::size_t best = 0;
    double best_d = -2.0;
    for (std::size_t i = 0; i < centers.size(); ++i) {
      if (min_d2[i] < 0.0) continue;
      min_d2[i] = std::min(min_d2[i], (centers[i] - centers[current]).squaredNorm());
      if (min_d2[i] > best_d) {
        best_d = min_d2[i];
        best = i;
      }
    }
    current = best;
  }
  return out;
}

/// Debug dump: "GFHULL01", u16 nx/ny/nz, u16 reserved, f32 voxel_size,
/// f32 origin[3] (32 bytes), then one byte per voxel, x fastest.
inline std::vector<std::uint8_t> encode_hull(const VoxelGrid& grid) {
  const auto& s = grid.spec;
  if (s.nx > 65535 || s.ny > 65535 || s.nz > 65535) throw ValidationError("grid too large for GFHULL01");
  detail::ByteWriter w;
  w.magic("GFHULL01");
  w.u16(static_cast<std::uint16_t>(s.nx));
  w.u16(static_cast<std::uint16_t>(s.ny));
  w.u16(static_cast<std::uint16_t>(s.nz));
  w.u16(0);
  w.f32(static_cast<float>(s.voxel_size));
  for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(s.origin[i]));
  for (auto v : grid.occupancy) w.u8(v);
  return w.bytes();
}

inline VoxelGrid decode_hull(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("GFHULL01");
  VoxelGrid g;
  g.spec.nx = r.u16();
  g.spec.ny = r.u16();
  g.spec.nz = r.u16();
  r.u16();
  g.spec.voxel_size = r.f32();
  for (int i = 0; i < 3; ++i) g.spec.origin[i] = r.f32();
  g.occupancy.resize(g.spec.voxel_count());
  for (auto& v : g.occupancy) v = r.u8();
  return g;
}

inline void write_hull(const std::filesystem::path& path, const VoxelGrid& grid) {
  write_file_bytes(path, encode_hull(grid));
}

}  // namespace gfree
