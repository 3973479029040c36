#pragma once

// Viewpoint sampling on a subdivided icosahedron and template rendering of
// onboarded objects.

#include "gfree/errors.hpp"
#include "gfree/geometry.hpp"
#include "gfree/image_io.hpp"
#include "gfree/json_io.hpp"
#include "gfree/splat_render.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <map>
#include <utility>
#include <vector>

namespace gfree {

inline constexpr int kTemplateCount = 162;
inline constexpr int kTemplateSize = 224;
inline constexpr double kTemplateFill = 0.8;  // bounding-sphere diameter / image side
inline constexpr double kTemplateFocalPerspective = 280.0;
inline constexpr double kTemplateFocalEquidistant = 160.0;

/// Unit icosphere vertices: the 12 icosahedron vertices, then edge midpoints
/// in order of first appearance, for 0, 1 or 2 subdivision levels.
inline std::vector<Vec3> icosphere_vertices(int n) {
  int levels = 0;
  if (n == 12) levels = 0;
  else if (n == 42) levels = 1;
  else if (n == 162) levels = 2;
  else throw ValidationError("unsupported viewpoint count " + std::to_string(n) + " (expected 12, 42 or 162)");

  const double t = (1.0 + std::sqrt(5.0)) / 2.0;
  std::vector<Vec3> v{{-1, t, 0}, {1, t, 0}, {-1, -t, 0}, {1, -t, 0}, {0, -1, t}, {0, 1, t},
                      {0, -1, -t}, {0, 1, -t}, {t, 0, -1}, {t, 0, 1}, {-t, 0, -1}, {-t, 0, 1}};
  for (auto& p : v) p.normalize();
  std::vector<std::array<int, 3>> faces{{0, 11, 5}, {0, 5, 1},  {0, 1, 7},   {0, 7, 10}, {0, 10, 11},
                                        {1, 5, 9},  {5, 11, 4}, {11, 10, 2}, {10, 7, 6}, {7, 1, 8},
                                        {3, 9, 4},  {3, 4, 2},  {3, 2, 6},   {3, 6, 8},  {3, 8, 9},
                                        {4, 9, 5},  {2, 4, 11}, {6, 2, 10},  {8, 6, 7},  {9, 8, 1}};
  for (int l = 0; l < levels; ++l) {
    std::map<std::pair<int, int>, int> mids;
    auto mid = [&](int a, int b) {
      const auto key = std::minmax(a, b);
      auto it = mids.find(key);
      if (it != mids.end()) return it->second;
      v.push_back((v[a] + v[b]).normalized());
      const int id = static_cast<int>(v.size()) - 1;
      mids.emplace(key, id);
      return id;
    };
    std::vector<std::array<int, 3>> next;
    for (const auto& f : faces) {
      const int ab = mid(f[0], f[1]), bc = mid(f[1], f[2]), ca = mid(f[2], f[0]);
      next.push_back({f[0], ab, ca});
      next.push_back({f[1], bc, ab});
      next.push_back({f[2], ca, bc});
      next.push_back({ab, bc, ca});
    }
    faces = std::move(next);
  }
  return v;
}

struct ViewpointSet {
  std::vector<Pose> poses;  // object-to-camera, optical axis through the object origin
  double radius = 0.0;      // mm

  [[nodiscard]] std::size_t count() const { return poses.size(); }
};

inline ViewpointSet sample_viewpoints(int n, double radius) {
  if (!(radius > 0.0) || !std::isfinite(radius)) throw ValidationError("viewpoint radius must be positive");
  ViewpointSet vs;
  vs.radius = radius;
  for (const auto& v : icosphere_vertices(n)) vs.poses.push_back(look_at(radius * v));
  return vs;
}

inline CameraModel template_camera(ProjectionKind kind) {
  const double f = kind == ProjectionKind::equidistant ? kTemplateFocalEquidistant : kTemplateFocalPerspective;
  const double c = (kTemplateSize - 1) / 2.0;
  return {kind, f, f, c, c, kTemplateSize, kTemplateSize};
}

/// Radius around the object origin that contains the visible Gaussians:
/// max |mean| + 2 * largest axis over Gaussians with opacity >= 0.1 (all
/// Gaussians when none qualifies).
inline double bounding_radius(const GaussianObject& obj) {
  if (obj.gaussians.empty()) throw ValidationError("bounding_radius: empty object");
  double r = 0.0, r_all = 0.0;
  for (const auto& g : obj.gaussians) {
    const double e = g.mean.norm() + 2.0 * g.log_scale.array().exp().maxCoeff();
    r_all = std::max(r_all, e);
    if (g.opacity() >= 0.1) r = std::max(r, e);
  }
  return r > 0.0 ? r : r_all;
}

/// Camera distance at which a sphere of radius `r` spans kTemplateFill of the
/// template width.
inline double template_distance(double r, const CameraModel& cam) {
  const double target_px = 0.5 * kTemplateFill * cam.width;
  const double half_angle =
      cam.kind == ProjectionKind::equidistant ? target_px / cam.fx : std::atan(target_px / cam.fx);
  return r / std::sin(half_angle);
}

struct Template {
  RenderOutput render;
  Pose pose;
  CameraModel camera;
  int object_id = 0;
  int template_index = 0;
};

inline Template render_template(const GaussianObject& obj, const Pose& pose, const CameraModel& camera, int index) {
  Template t{rasterize(obj, pose, camera, 0.0), pose, camera, obj.object_id, index};
  if (std::none_of(t.render.alpha.begin(), t.render.alpha.end(), [](double a) { return a > 0.5; }))
    throw Error("template " + std::to_string(index) + " of object " + std::to_string(obj.object_id) +
                " is empty: object and viewpoint radius do not match");
  return t;
}

/// One template per viewpoint. 1-channel objects use the equidistant
/// template camera, 3-channel objects the perspective one.
inline std::vector<Template> render_templates(const GaussianObject& obj, int n = kTemplateCount) {
  const CameraModel cam =
      template_camera(obj.channels == 1 ? ProjectionKind::equidistant : ProjectionKind::perspective);
  const ViewpointSet vs = sample_viewpoints(n, template_distance(bounding_radius(obj), cam));
  std::vector<Template> out;
  out.reserve(vs.count());
  for (std::size_t i = 0; i < vs.count(); ++i) out.push_back(render_template(obj, vs.poses[i], cam, static_cast<int>(i)));
  return out;
}

// --- on-disk template set -----------------------------------------------------
//
// <dir>/templates.json plus rgb_NNNNNN.png, alpha_NNNNNN.png (8-bit) and
// depth_NNNNNN.png (16-bit mm) per template.

namespace detail {
inline std::string indexed_name(const char* prefix, int i) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%s_%06d.png", prefix, i);
  return buf;
}
}  // namespace detail

inline void write_template_set(const std::filesystem::path& dir, const std::vector<Template>& templates) {
  std::filesystem::create_directories(dir);
  Json list = Json::array();
  int object_id = templates.empty() ? 0 : templates.front().object_id;
  int channels = templates.empty() ? 3 : templates.front().render.rgb.channels;
  for (const auto& t : templates) {
    const auto& r = t.render;
    write_image_png(dir / detail::indexed_name("rgb", t.template_index), r.rgb);
    ImageBuffer alpha(r.rgb.width, r.rgb.height, 1);
    alpha.data = r.alpha;
    write_image_png(dir / detail::indexed_name("alpha", t.template_index), alpha);
    write_depth_png(dir / detail::indexed_name("depth", t.template_index), r.rgb.width, r.rgb.height, r.depth);
    Json e = pose_to_json(t.pose);
    e["index"] = t.template_index;
    e["camera"] = camera_to_json(t.camera);
    list.push_back(e);
  }
  write_json_file(dir / "templates.json",
                  Json{{"object_id", object_id}, {"channels", channels}, {"count", templates.size()}, {"templates", list}});
}

/// Loads a template set; images come back quantized to 8 bits, depth to 1 mm.
inline std::vector<Template> read_template_set(const std::filesystem::path& dir) {
  const Json j = read_json_file(dir / "templates.json");
  std::vector<Template> out;
  try {
    const int object_id = j.at("object_id").get<int>();
    for (const auto& e : j.at("templates")) {
      Template t;
      t.object_id = object_id;
      t.template_index = e.at("index").get<int>();
      t.pose = pose_from_json(e);
      t.camera = camera_from_json(e.at("camera"));
      t.render.rgb = read_image_png(dir / detail::indexed_name("rgb", t.template_index));
      const ImageBuffer a = read_image_png(dir / detail::indexed_name("alpha", t.template_index));
      t.render.alpha = a.data;
      t.render.depth = read_depth_png(dir / detail::indexed_name("depth", t.template_index));
      out.push_back(std::move(t));
    }
  } catch (const Json::exception& e) {
    throw ValidationError("malformed '" + (dir / "templates.json").string() + "': " + e.what());
  }
  return out;
}

}  // namespace gfree
