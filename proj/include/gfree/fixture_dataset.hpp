#pragma once

// Writes a complete synthetic dataset in the pipeline layout: onboarding
// captures of analytic objects, test scenes with BOP ground truth, and
// connected-component proposal manifests with optional distractors.

#include "gfree/detail/random.hpp"
#include "gfree/fixtures.hpp"
#include "gfree/pipeline.hpp"

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

namespace gfree {

struct FixtureSpec {
  std::string name = "fixture";
  int objects = 2;
  int channels = 3;
  int onboarding_views = 16;
  int onboarding_size = 128;
  int scenes = 2;
  int images_per_scene = 3;
  int width = 320;
  int height = 240;
  double distractor_fraction = 0.0;  // extra unlabeled proposals per image, relative to the object count
  std::uint64_t seed = 0;
};

/// Object ids 1..n: spheres (radius 50 mm) for odd ids, cubes (half side
/// 40 mm) for even ids, each with its own texture phase.
inline AnalyticObject fixture_object(int id) {
  AnalyticObject o;
  o.shape = id % 2 == 1 ? ShapeKind::sphere : ShapeKind::cube;
  o.size = o.shape == ShapeKind::sphere ? 50.0 : 40.0;
  o.phase = Vec3(0.9 * id, 1.7 * id, 2.3 * id);
  return o;
}

inline CameraModel fixture_onboarding_camera(int size) {
  const double f = 220.0 * size / 128.0;
  return {ProjectionKind::perspective, f, f, (size - 1) / 2.0, (size - 1) / 2.0, size, size};
}

inline constexpr double kFixtureOnboardingDistance = 300.0;

inline void write_fixture_onboarding(const fs::path& root, int id, const FixtureSpec& spec) {
  const fs::path dir = onboarding_dir(root, id);
  const auto frames = onboarding_views(fixture_object(id), fixture_onboarding_camera(spec.onboarding_size),
                                       spec.onboarding_views, kFixtureOnboardingDistance, spec.channels);
  Json list = Json::array();
  for (const auto& f : frames) {
    write_image_png(dir / "rgb" / (f.frame_id + ".png"), f.image);
    write_mask_png(dir / "mask" / (f.frame_id + ".png"), f.mask);
    list.push_back(Json{{"id", f.frame_id},
                        {"sequence", f.sequence},
                        {"rgb", "rgb/" + f.frame_id + ".png"},
                        {"mask", "mask/" + f.frame_id + ".png"},
                        {"camera", camera_to_json(f.camera)},
                        {"pose", pose_to_json(f.pose)}});
  }
  write_json_file(dir / "frames.json", Json{{"frames", list}});
}

inline CameraModel fixture_scene_camera(const FixtureSpec& spec) {
  return {ProjectionKind::perspective, 300, 300, (spec.width - 1) / 2.0, (spec.height - 1) / 2.0, spec.width,
          spec.height};
}

namespace detail {
inline Mat3 random_rotation(Rng& rng) {
  Eigen::Quaterniond q(rng.normal(), rng.normal(), rng.normal(), rng.normal());
  return q.normalized().toRotationMatrix();
}
}  // namespace detail

/// Test scenes: each image shows a random subset of the objects in disjoint
/// slots on a 3x2 grid, over a textured background. Ground truth boxes are
/// the tight boxes of the rendered masks, visibility 1.
inline void write_fixture_scenes(const fs::path& root, const FixtureSpec& spec) {
  detail::Rng rng(detail::mix(spec.seed, 0x5ce11e));
  const CameraModel cam = fixture_scene_camera(spec);
  const double depth = 700.0;
  for (int scene = 1; scene <= spec.scenes; ++scene) {
    const fs::path sdir = scene_dir(root, scene);
    Json scene_gt = Json::object(), scene_info = Json::object();
    for (int im = 0; im < spec.images_per_scene; ++im) {
      ImageBuffer img(cam.width, cam.height, 3);
      for (int y = 0; y < cam.height; ++y)
        for (int x = 0; x < cam.width; ++x)
          for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.25 + 0.08 * std::sin(0.11 * x + 0.07 * y + 1.3 * c);
      Mask occupied(cam.width, cam.height);
      std::vector<int> slots{0, 1, 2, 3, 4, 5};
      rng.shuffle(slots);
      const int count = 1 + static_cast<int>(rng.index(static_cast<std::size_t>(std::min(spec.objects, 6))));
      std::vector<int> ids;
      for (int i = 1; i <= spec.objects; ++i) ids.push_back(i);
      rng.shuffle(ids);
      Json gts = Json::array(), infos = Json::array();
      ProposalManifest manifest{scene, im, cam.width, cam.height, {}};
      for (int k = 0; k < count; ++k) {
        const int slot = slots[k];
        const Vec2 px(cam.width * (0.5 + slot % 3) / 3.0, cam.height * (0.5 + slot / 3) / 2.0);
        Pose pose;
        pose.rotation = detail::random_rotation(rng);
        pose.translation = depth * Vec3((px.x() - cam.cx) / cam.fx, (px.y() - cam.cy) / cam.fy, 1.0);
        const auto view = render_analytic(fixture_object(ids[k]), pose, cam, 3);
        for (std::size_t p = 0; p < view.mask.data.size(); ++p)
          if (view.mask.data[p]) {
            occupied.data[p] = 1;
            for (int c = 0; c < 3; ++c) img.data[p * 3 + c] = view.image.data[p * 3 + c];
          }
        const PixelBox b = mask_to_bbox(view.mask);
        Json g = pose_to_json(pose);
        g["obj_id"] = ids[k];
        gts.push_back(g);
        infos.push_back(Json{{"bbox_obj", {b.x, b.y, b.w, b.h}},
                             {"bbox_visib", {b.x, b.y, b.w, b.h}},
                             {"visib_fract", 1.0},
                             {"px_count_visib", view.mask.count()}});
        manifest.proposals.push_back({static_cast<int>(manifest.proposals.size()), view.mask, ids[k]});
      }
      // Connected components of the union re-derive the object masks since
      // slots never overlap; keep them as the proposals.
      const auto comps = connected_components(occupied, 1);
      std::vector<ManifestEntry> from_components;
      for (const auto& c : comps) {
        int best = -1;
        double best_iou = 0.0;
        for (const auto& e : manifest.proposals) {
          const double o = mask_iou(c, e.mask);
          if (o > best_iou) {
            best_iou = o;
            best = *e.oracle_label;
          }
        }
        from_components.push_back({static_cast<int>(from_components.size()), c, best});
      }
      manifest.proposals = std::move(from_components);
      const int distractors = static_cast<int>(std::ceil(spec.distractor_fraction * count - 1e-9));
      for (int d = 0; d < distractors; ++d) {
        Mask m(cam.width, cam.height);
        for (int attempt = 0; attempt < 100; ++attempt) {
          const int w = 15 + static_cast<int>(rng.index(26)), h = 15 + static_cast<int>(rng.index(26));
          const int x0 = static_cast<int>(rng.index(static_cast<std::size_t>(cam.width - w)));
          const int y0 = static_cast<int>(rng.index(static_cast<std::size_t>(cam.height - h)));
          bool clear = true;
          for (int y = y0; y < y0 + h && clear; ++y)
            for (int x = x0; x < x0 + w; ++x)
              if (occupied.at(x, y)) {
                clear = false;
                break;
              }
          if (!clear) continue;
          for (int y = y0; y < y0 + h; ++y)
            for (int x = x0; x < x0 + w; ++x) m.set(x, y, true);
          break;
        }
        if (m.count() > 0) manifest.proposals.push_back({static_cast<int>(manifest.proposals.size()), m, std::nullopt});
      }
      write_image_png(sdir / "rgb" / (id6(im) + ".png"), img);
      write_json_file(sdir / "proposals" / (id6(im) + ".json"), proposal_manifest_to_json(manifest), -1);
      scene_gt[std::to_string(im)] = gts;
      scene_info[std::to_string(im)] = infos;
    }
    write_json_file(sdir / "scene_gt.json", scene_gt);
    write_json_file(sdir / "scene_gt_info.json", scene_info);
  }
}

inline void write_fixture_dataset(const fs::path& root, const FixtureSpec& spec) {
  if (spec.objects < 1 || spec.objects > 6) throw ValidationError("fixture: objects must be in [1, 6]");
  if (spec.channels != 1 && spec.channels != 3) throw ValidationError("fixture: channels must be 1 or 3");
  DatasetInfo info{spec.name, spec.channels, {}};
  for (int id = 1; id <= spec.objects; ++id) {
    info.objects.push_back(id);
    if (spec.onboarding_views > 0) write_fixture_onboarding(root, id, spec);
  }
  write_dataset_info(root, info);
  write_fixture_scenes(root, spec);
}

/// Gaussian objects sampled on the fixture surfaces, written where
/// `onboard` would put trained ones.
inline void write_fixture_surface_objects(const fs::path& output_dir, const FixtureSpec& spec) {
  for (int id = 1; id <= spec.objects; ++id)
    write_gaussians(object_path(output_dir, id), sample_surface_object(fixture_object(id), id, spec.channels));
}

}  // namespace gfree
