#pragma once

// Box AP over IoU thresholds 0.5:0.05:0.95 with the <10% visibility ignore
// rule, per-object, per-dataset and H3-level aggregation.

#include "gfree/errors.hpp"
#include "gfree/json_io.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <map>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace gfree {

inline constexpr double kVisibilityIgnore = 0.10;
inline constexpr int kRecallPoints = 101;

struct BoxXYWH {
  double x = 0.0;
  double y = 0.0;
  double w = 0.0;
  double h = 0.0;
};

inline double iou(const BoxXYWH& a, const BoxXYWH& b) {
  if (!(a.w > 0.0 && a.h > 0.0 && b.w > 0.0 && b.h > 0.0)) throw ValidationError("iou: degenerate box");
  const double iw = std::min(a.x + a.w, b.x + b.w) - std::max(a.x, b.x);
  const double ih = std::min(a.y + a.h, b.y + b.h) - std::max(a.y, b.y);
  if (iw <= 0.0 || ih <= 0.0) return 0.0;
  const double inter = iw * ih;
  return inter / (a.w * a.h + b.w * b.h - inter);
}

inline std::vector<double> default_iou_thresholds() {
  std::vector<double> t;
  for (int i = 0; i < 10; ++i) t.push_back((50 + 5 * i) / 100.0);
  return t;
}

struct GroundTruthInstance {
  int scene_id = 0;
  int image_id = 0;
  int object_id = 0;
  BoxXYWH bbox;
  double visibility = 1.0;

  [[nodiscard]] bool ignored() const { return visibility < kVisibilityIgnore; }
};

struct DetectionRecord {
  int scene_id = 0;
  int image_id = 0;
  int object_id = 0;
  BoxXYWH bbox;
  double score = 0.0;
  double time = 0.0;
};

struct DatasetAp {
  std::string name;
  double ap = 0.0;
  std::map<int, double> per_object;       // objects with countable ground truth
  std::map<int, std::vector<double>> per_threshold;
  std::size_t ignored_gt = 0;
  std::size_t countable_gt = 0;
  std::size_t ignored_detections = 0;     // matched to ignore regions, at IoU 0.5
};

struct ApReport {
  std::vector<DatasetAp> datasets;
  double ap_h3 = 0.0;
};

namespace detail {

/// Per-image greedy matching at one threshold. Returns per detection:
/// 1 = TP, 0 = FP, -1 = ignored. `dets` must be in score order.
inline std::vector<int> match_image(std::span<const DetectionRecord* const> dets,
                                    std::span<const GroundTruthInstance* const> gts, double thr) {
  // Countable ground truth first so it wins over ignore regions.
  std::vector<std::size_t> order(gts.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_partition(order.begin(), order.end(), [&](std::size_t i) { return !gts[i]->ignored(); });
  std::vector<char> taken(gts.size(), 0);
  std::vector<int> out(dets.size(), 0);
  for (std::size_t d = 0; d < dets.size(); ++d) {
    double best = std::min(thr, 1.0 - 1e-10);
    long m = -1;
    for (auto g : order) {
      if (taken[g]) continue;
      // Once a countable match exists, stop before ignore regions.
      if (m >= 0 && !gts[m]->ignored() && gts[g]->ignored()) break;
      const double o = iou(dets[d]->bbox, gts[g]->bbox);
      if (o < best || (m >= 0 && o == best)) continue;
      best = o;
      m = static_cast<long>(g);
    }
    if (m < 0) continue;
    taken[m] = 1;
    out[d] = gts[m]->ignored() ? -1 : 1;
  }
  return out;
}

/// 101-point interpolated area under the precision envelope.
inline double interpolated_ap(const std::vector<int>& flags_in_score_order, std::size_t n_gt) {
  if (n_gt == 0) return 0.0;
  std::vector<double> rc, pr;
  double tp = 0, fp = 0;
  for (int f : flags_in_score_order) {
    if (f < 0) continue;
    (f == 1 ? tp : fp) += 1.0;
    rc.push_back(tp / static_cast<double>(n_gt));
    pr.push_back(tp / (tp + fp));
  }
  for (long i = static_cast<long>(pr.size()) - 2; i >= 0; --i) pr[i] = std::max(pr[i], pr[i + 1]);
  double sum = 0.0;
  for (int k = 0; k < kRecallPoints; ++k) {
    const double r = static_cast<double>(k) / (kRecallPoints - 1);
    const auto it = std::lower_bound(rc.begin(), rc.end(), r);
    if (it != rc.end()) sum += pr[static_cast<std::size_t>(it - rc.begin())];
  }
  return sum / kRecallPoints;
}

}  // namespace detail

/// AP of one dataset. `object_ids` is the dataset's object list; detections
/// of other ids are rejected. Objects without countable ground truth are
/// left out of the mean. Equal scores keep input order.
inline DatasetAp evaluate_dataset(const std::string& name, std::span<const DetectionRecord> detections,
                                  std::span<const GroundTruthInstance> ground_truth, std::span<const int> object_ids,
                                  const std::vector<double>& thresholds = default_iou_thresholds()) {
  if (thresholds.empty()) throw ValidationError("evaluate: no IoU thresholds");
  auto known = [&](int id) { return std::find(object_ids.begin(), object_ids.end(), id) != object_ids.end(); };
  for (const auto& d : detections) {
    if (!known(d.object_id))
      throw ValidationError("detection references object " + std::to_string(d.object_id) + " outside dataset '" +
                            name + "'");
    if (!(d.bbox.w > 0 && d.bbox.h > 0)) throw ValidationError("detection with degenerate box");
    if (!std::isfinite(d.score)) throw ValidationError("detection with non-finite score");
  }
  DatasetAp out;
  out.name = name;
  using ImageKey = std::pair<int, int>;
  std::vector<int> ids(object_ids.begin(), object_ids.end());
  std::sort(ids.begin(), ids.end());
  ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
  for (int obj : ids) {
    std::map<ImageKey, std::vector<const GroundTruthInstance*>> gt_by_image;
    std::size_t n_gt = 0;
    for (const auto& g : ground_truth) {
      if (g.object_id != obj) continue;
      if (!(g.visibility >= 0.0 && g.visibility <= 1.0)) throw ValidationError("visibility outside [0, 1]");
      if (!(g.bbox.w > 0 && g.bbox.h > 0)) {
        if (g.ignored()) continue;  // invisible instances carry no box
        throw ValidationError("ground truth with degenerate box");
      }
      gt_by_image[{g.scene_id, g.image_id}].push_back(&g);
      if (g.ignored()) ++out.ignored_gt;
      else ++n_gt;
    }
    out.countable_gt += n_gt;
    std::vector<std::size_t> det_idx;
    for (std::size_t i = 0; i < detections.size(); ++i)
      if (detections[i].object_id == obj) det_idx.push_back(i);
    std::stable_sort(det_idx.begin(), det_idx.end(),
                     [&](std::size_t a, std::size_t b) { return detections[a].score > detections[b].score; });
    std::map<ImageKey, std::vector<const DetectionRecord*>> det_by_image;
    for (auto i : det_idx) det_by_image[{detections[i].scene_id, detections[i].image_id}].push_back(&detections[i]);

    std::vector<double> per_thr;
    for (std::size_t ti = 0; ti < thresholds.size(); ++ti) {
      std::map<const DetectionRecord*, int> flag;
      for (const auto& [key, dets] : det_by_image) {
        auto git = gt_by_image.find(key);
        std::vector<int> f;
        if (git == gt_by_image.end()) f.assign(dets.size(), 0);
        else f = detail::match_image(dets, git->second, thresholds[ti]);
        for (std::size_t k = 0; k < dets.size(); ++k) flag[dets[k]] = f[k];
      }
      std::vector<int> flags;
      for (auto i : det_idx) flags.push_back(flag[&detections[i]]);
      if (ti == 0) out.ignored_detections += static_cast<std::size_t>(std::count(flags.begin(), flags.end(), -1));
      per_thr.push_back(detail::interpolated_ap(flags, n_gt));
    }
    if (n_gt == 0) continue;
    out.per_object[obj] = std::accumulate(per_thr.begin(), per_thr.end(), 0.0) / static_cast<double>(per_thr.size());
    out.per_threshold[obj] = per_thr;
  }
  double s = 0.0;
  for (const auto& [id, ap] : out.per_object) s += ap;
  out.ap = out.per_object.empty() ? 0.0 : s / static_cast<double>(out.per_object.size());
  return out;
}

/// AP_H3 is the mean of the dataset APs.
inline ApReport aggregate(std::vector<DatasetAp> datasets) {
  if (datasets.empty()) throw ValidationError("evaluate: no datasets");
  ApReport r;
  double s = 0.0;
  for (const auto& d : datasets) s += d.ap;
  r.ap_h3 = s / static_cast<double>(datasets.size());
  r.datasets = std::move(datasets);
  return r;
}

// --- JSON ingestion and reports -------------------------------------------------

inline BoxXYWH box_from_json(const Json& j) {
  if (!j.is_array() || j.size() != 4) throw ValidationError("bbox must be [x, y, w, h]");
  return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

/// BOP scene files: scene_gt.json gives obj_id per instance, scene_gt_info.json
/// the box (`box_key`, default the amodal "bbox_obj") and "visib_fract".
inline std::vector<GroundTruthInstance> read_bop_scene_gt(const std::filesystem::path& scene_dir, int scene_id,
                                                          const std::string& box_key = "bbox_obj") {
  const Json gt = read_json_file(scene_dir / "scene_gt.json");
  const Json info = read_json_file(scene_dir / "scene_gt_info.json");
  std::vector<GroundTruthInstance> out;
  try {
    for (const auto& [key, instances] : gt.items()) {
      const int image_id = std::stoi(key);
      const Json& inf = info.at(key);
      if (inf.size() != instances.size())
        throw ValidationError("scene_gt and scene_gt_info disagree for image " + key);
      for (std::size_t i = 0; i < instances.size(); ++i) {
        GroundTruthInstance g;
        g.scene_id = scene_id;
        g.image_id = image_id;
        g.object_id = instances[i].at("obj_id").get<int>();
        g.bbox = box_from_json(inf[i].at(box_key));
        g.visibility = inf[i].at("visib_fract").get<double>();
        out.push_back(g);
      }
    }
  } catch (const Json::exception& e) {
    throw ValidationError("malformed ground truth in '" + scene_dir.string() + "': " + e.what());
  } catch (const std::invalid_argument&) {
    throw ValidationError("non-numeric image id in '" + scene_dir.string() + "'");
  }
  return out;
}

inline Json detection_to_json(const DetectionRecord& d) {
  return Json{{"scene_id", d.scene_id},
              {"image_id", d.image_id},
              {"category_id", d.object_id},
              {"bbox", {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h}},
              {"score", d.score},
              {"time", d.time}};
}

inline std::vector<DetectionRecord> detections_from_json(const Json& j) {
  if (!j.is_array()) throw ValidationError("detections must be a JSON array");
  std::vector<DetectionRecord> out;
  try {
    for (const auto& e : j) {
      DetectionRecord d;
      d.scene_id = e.at("scene_id").get<int>();
      d.image_id = e.at("image_id").get<int>();
      d.object_id = e.at("category_id").get<int>();
      d.bbox = box_from_json(e.at("bbox"));
      d.score = e.at("score").get<double>();
      d.time = e.value("time", 0.0);
      out.push_back(d);
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed detection record: ") + e.what());
  }
  return out;
}

inline Json report_to_json(const ApReport& r) {
  Json ds = Json::array();
  for (const auto& d : r.datasets) {
    Json per = Json::object();
    for (const auto& [id, ap] : d.per_object) per[std::to_string(id)] = ap;
    ds.push_back(Json{{"name", d.name},
                      {"ap", d.ap},
                      {"per_object", per},
                      {"ignored_gt", d.ignored_gt},
                      {"countable_gt", d.countable_gt},
                      {"ignored_detections", d.ignored_detections}});
  }
  return Json{{"ap_h3", r.ap_h3}, {"datasets", ds}};
}

inline std::string report_table(const ApReport& r) {
  std::ostringstream os;
  os.setf(std::ios::fixed);
  os.precision(4);
  for (const auto& d : r.datasets) {
    os << "dataset " << d.name << "  AP " << d.ap << "  (countable GT " << d.countable_gt << ", ignored GT "
       << d.ignored_gt << ")\n";
    for (const auto& [id, ap] : d.per_object) os << "  object " << id << "  AP " << ap << "\n";
  }
  os << "AP_H3 " << r.ap_h3 << "\n";
  return os.str();
}

}  // namespace gfree
