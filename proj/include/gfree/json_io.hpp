#pragma once

// BOP-style JSON records for cameras and poses.

#include "gfree/errors.hpp"
#include "gfree/geometry.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <string>

namespace gfree {

using Json = nlohmann::json;

inline Json read_json_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open '" + path.string() + "'");
  try {
    return Json::parse(in);
  } catch (const Json::exception& e) {
    throw ValidationError("invalid JSON in '" + path.string() + "': " + e.what());
  }
}

inline void write_json_file(const std::filesystem::path& path, const Json& j, int indent = 2) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw Error("cannot write '" + path.string() + "'");
  out << j.dump(indent) << '\n';
}

namespace detail {
template <std::size_t N>
std::array<double, N> read_floats(const Json& j, const char* key) {
  if (!j.contains(key) || !j[key].is_array() || j[key].size() != N)
    throw ValidationError(std::string("expected '") + key + "' with " + std::to_string(N) + " numbers");
  std::array<double, N> out{};
  for (std::size_t i = 0; i < N; ++i) {
    if (!j[key][i].is_number()) throw ValidationError(std::string("non-numeric entry in '") + key + "'");
    out[i] = j[key][i].get<double>();
  }
  return out;
}
}  // namespace detail

/// {"cam_K": [9 row-major], "model": "perspective"|"equidistant", "width", "height"}
inline CameraModel camera_from_json(const Json& j) {
  const auto K = detail::read_floats<9>(j, "cam_K");
  CameraModel cam;
  cam.fx = K[0];
  cam.cx = K[2];
  cam.fy = K[4];
  cam.cy = K[5];
  cam.kind = projection_kind_from_string(j.value("model", std::string("perspective")));
  if (!j.contains("width") || !j.contains("height")) throw ValidationError("camera needs width and height");
  cam.width = j.at("width").get<int>();
  cam.height = j.at("height").get<int>();
  cam.validate();
  return cam;
}

inline Json camera_to_json(const CameraModel& cam) {
  return Json{{"cam_K", {cam.fx, 0.0, cam.cx, 0.0, cam.fy, cam.cy, 0.0, 0.0, 1.0}},
              {"model", to_string(cam.kind)},
              {"width", cam.width},
              {"height", cam.height}};
}

/// {"cam_R_m2c": [9 row-major], "cam_t_m2c": [3, mm]}
inline Pose pose_from_json(const Json& j) {
  const auto R = detail::read_floats<9>(j, "cam_R_m2c");
  const auto t = detail::read_floats<3>(j, "cam_t_m2c");
  Pose p;
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) p.rotation(r, c) = R[3 * r + c];
  p.translation = Vec3(t[0], t[1], t[2]);
  if (!p.is_valid(1e-6)) throw ValidationError("cam_R_m2c is not a proper rotation");
  return p;
}

inline Json pose_to_json(const Pose& p) {
  Json R = Json::array();
  for (int r = 0; r < 3; ++r)
    for (int c = 0; c < 3; ++c) R.push_back(p.rotation(r, c));
  return Json{{"cam_R_m2c", R}, {"cam_t_m2c", {p.translation.x(), p.translation.y(), p.translation.z()}}};
}

}  // namespace gfree
