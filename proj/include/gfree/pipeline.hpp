#pragma once

// Command orchestration: configuration, dataset layout, and the onboard /
// templates / detect / evaluate commands.
//
// Dataset layout (under dataset_root):
//   dataset.json                          {"name", "channels": 1|3, "objects": [ids]}
//   onboarding/obj_NNNNNN/frames.json     {"frames": [{"id", "sequence", "rgb", "mask", "camera", "pose"}]}
//   test/NNNNNN/rgb/NNNNNN.png            test images per scene
//   test/NNNNNN/scene_gt.json, scene_gt_info.json
//   test/NNNNNN/proposals/NNNNNN.json     proposal manifest per image
//
// Outputs (under output_dir):
//   objects/obj_NNNNNN.gfgaus, objects/obj_NNNNNN_loss.csv, checkpoints/, onboard_report.json
//   templates/obj_NNNNNN/, descriptors/obj_NNNNNN.gfdesc
//   detections.json, detect_report.json, ap_report.json, ap_report.txt
//
// External descriptors (provider "file:<dir>"):
//   <dir>/obj_NNNNNN.gfdesc               template records (0, object_id, template_index)
//   <dir>/scene_NNNNNN.gfdesc             proposal records (1, image_id, proposal_id)

#include "gfree/descriptors.hpp"
#include "gfree/errors.hpp"
#include "gfree/evaluation.hpp"
#include "gfree/image_io.hpp"
#include "gfree/json_io.hpp"
#include "gfree/matching.hpp"
#include "gfree/reconstruction.hpp"
#include "gfree/templates.hpp"

#include <spdlog/spdlog.h>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace gfree {

namespace fs = std::filesystem;

struct MatchingConfig {
  MatchOptions options;
  double score_min = kScoreMin;
  double nms_iou = kNmsIou;
  bool emit_time = true;  // false writes time 0 so outputs are byte-comparable
};

struct EvalDatasetSpec {
  std::string name;
  fs::path dataset_root;
  fs::path detections;
};

struct PipelineConfig {
  fs::path dataset_root;
  fs::path output_dir;
  std::vector<int> objects;  // empty: every object in dataset.json
  std::string provider = "synthetic";
  int descriptor_dim = kDefaultDescriptorDim;
  int patch_count = kDefaultPatchCount;
  TrainConfig train;
  int template_count = kTemplateCount;
  MatchingConfig matching;
  std::string gt_box = "bbox_obj";
  std::vector<EvalDatasetSpec> eval_datasets;  // empty: this dataset and output_dir/detections.json
  std::uint64_t seed = 0;

  void validate() const {
    train.validate();
    if (template_count != 12 && template_count != 42 && template_count != 162)
      throw ValidationError("template_count must be 12, 42 or 162");
    if (matching.options.top_k < 1) throw ValidationError("matching.top_k must be >= 1");
    if (!(matching.nms_iou >= 0.0 && matching.nms_iou <= 1.0)) throw ValidationError("matching.nms_iou must be in [0, 1]");
    if (descriptor_dim < 1 || patch_count < 1) throw ValidationError("descriptor dimensions must be >= 1");
    if (gt_box != "bbox_obj" && gt_box != "bbox_visib") throw ValidationError("gt_box must be bbox_obj or bbox_visib");
    if (provider != "synthetic" && provider != "oracle" && provider.rfind("file:", 0) != 0)
      throw ValidationError("provider must be synthetic, oracle or file:<dir>");
    if (output_dir.empty()) throw ValidationError("output_dir is required");
  }
};

namespace detail {
template <class T>
void read_opt(const Json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}
}  // namespace detail

inline TrainConfig train_config_from_json(const Json& j, TrainConfig c = {}) {
  using detail::read_opt;
  read_opt(j, "iterations", c.iterations);
  read_opt(j, "opacity_reset_interval", c.opacity_reset_interval);
  read_opt(j, "densify_until", c.densify_until);
  read_opt(j, "densify_from", c.densify_from);
  read_opt(j, "densify_interval", c.densify_interval);
  read_opt(j, "crop_size", c.crop_size);
  read_opt(j, "lambda_l1", c.weights.l1);
  read_opt(j, "lambda_ssim", c.weights.ssim);
  read_opt(j, "lambda_silhouette", c.weights.silhouette);
  read_opt(j, "lr_mean", c.lr_mean);
  read_opt(j, "lr_mean_final", c.lr_mean_final);
  read_opt(j, "lr_sh", c.lr_sh);
  read_opt(j, "lr_sh_rest_factor", c.lr_sh_rest_factor);
  read_opt(j, "lr_opacity", c.lr_opacity);
  read_opt(j, "lr_scale", c.lr_scale);
  read_opt(j, "lr_rotation", c.lr_rotation);
  read_opt(j, "densify_grad_threshold", c.densify_grad_threshold);
  read_opt(j, "prune_opacity", c.prune_opacity);
  read_opt(j, "percent_dense", c.percent_dense);
  read_opt(j, "opacity_reset_value", c.opacity_reset_value);
  read_opt(j, "max_gaussians", c.max_gaussians);
  read_opt(j, "init_opacity", c.init_opacity);
  read_opt(j, "init_point_count", c.init_point_count);
  read_opt(j, "hull_views", c.hull_views);
  read_opt(j, "hull_dims", c.hull_dims);
  return c;
}

/// Relative paths resolve against the config file's directory.
inline PipelineConfig pipeline_config_from_json(const Json& j, const fs::path& base = {}) {
  PipelineConfig c;
  auto path = [&](const Json& v) {
    fs::path p = v.get<std::string>();
    return p.is_relative() ? base / p : p;
  };
  try {
    if (j.contains("dataset_root")) c.dataset_root = path(j.at("dataset_root"));
    if (j.contains("output_dir")) c.output_dir = path(j.at("output_dir"));
    detail::read_opt(j, "objects", c.objects);
    detail::read_opt(j, "provider", c.provider);
    detail::read_opt(j, "descriptor_dim", c.descriptor_dim);
    detail::read_opt(j, "patch_count", c.patch_count);
    detail::read_opt(j, "template_count", c.template_count);
    detail::read_opt(j, "gt_box", c.gt_box);
    detail::read_opt(j, "seed", c.seed);
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("matching")) {
      const Json& m = j.at("matching");
      detail::read_opt(m, "top_k", c.matching.options.top_k);
      detail::read_opt(m, "foreground_only", c.matching.options.foreground_only);
      if (m.contains("local_mode")) c.matching.options.local_mode = local_mode_from_string(m.at("local_mode"));
      detail::read_opt(m, "score_min", c.matching.score_min);
      detail::read_opt(m, "nms_iou", c.matching.nms_iou);
      detail::read_opt(m, "emit_time", c.matching.emit_time);
    }
    if (j.contains("evaluate")) {
      for (const auto& d : j.at("evaluate").at("datasets"))
        c.eval_datasets.push_back({d.at("name").get<std::string>(), path(d.at("dataset_root")), path(d.at("detections"))});
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("invalid config: ") + e.what());
  }
  if (c.provider.rfind("file:", 0) == 0) {
    fs::path p = c.provider.substr(5);
    if (p.is_relative()) c.provider = "file:" + (base / p).string();
  }
  c.train.seed = c.seed;
  c.validate();
  return c;
}

inline PipelineConfig load_pipeline_config(const fs::path& path) {
  const Json j = read_json_file(path);
  try {
    return pipeline_config_from_json(j, path.parent_path());
  } catch (const ValidationError& e) {
    throw ValidationError("'" + path.string() + "': " + e.what());
  }
}

// --- dataset layout ---------------------------------------------------------------

inline std::string id6(int id) {
  char buf[16];
  std::snprintf(buf, sizeof buf, "%06d", id);
  return buf;
}

struct DatasetInfo {
  std::string name;
  int channels = 3;
  std::vector<int> objects;
};

inline DatasetInfo read_dataset_info(const fs::path& root) {
  const fs::path p = root / "dataset.json";
  const Json j = read_json_file(p);
  DatasetInfo d;
  try {
    d.name = j.at("name").get<std::string>();
    d.channels = j.at("channels").get<int>();
    d.objects = j.at("objects").get<std::vector<int>>();
  } catch (const Json::exception& e) {
    throw ValidationError("malformed '" + p.string() + "': " + e.what());
  }
  if (d.channels != 1 && d.channels != 3) throw ValidationError("'" + p.string() + "': channels must be 1 or 3");
  return d;
}

inline void write_dataset_info(const fs::path& root, const DatasetInfo& d) {
  write_json_file(root / "dataset.json", Json{{"name", d.name}, {"channels", d.channels}, {"objects", d.objects}});
}

inline fs::path onboarding_dir(const fs::path& root, int object_id) { return root / "onboarding" / ("obj_" + id6(object_id)); }
inline fs::path object_path(const fs::path& out, int object_id) { return out / "objects" / ("obj_" + id6(object_id) + ".gfgaus"); }
inline fs::path template_dir(const fs::path& out, int object_id) { return out / "templates" / ("obj_" + id6(object_id)); }
inline fs::path template_store_path(const fs::path& dir, int object_id) { return dir / ("obj_" + id6(object_id) + ".gfdesc"); }
inline fs::path proposal_store_path(const fs::path& dir, int scene_id) { return dir / ("scene_" + id6(scene_id) + ".gfdesc"); }

/// Onboarding frames of one object; an absent directory or frames.json
/// yields no frames. Malformed entries raise ValidationError naming the file.
inline std::vector<OnboardingFrame> read_onboarding_frames(const fs::path& root, int object_id, int channels) {
  const fs::path dir = onboarding_dir(root, object_id);
  const fs::path p = dir / "frames.json";
  if (!fs::exists(p)) return {};
  const Json j = read_json_file(p);
  std::vector<OnboardingFrame> frames;
  try {
    for (const auto& e : j.at("frames")) {
      OnboardingFrame f;
      f.frame_id = e.at("id").get<std::string>();
      f.sequence = e.value("sequence", "");
      f.image = read_image_png(dir / e.at("rgb").get<std::string>());
      if (channels == 1 && f.image.channels == 3) f.image = to_grayscale(f.image);
      if (f.image.channels != channels)
        throw ValidationError("frame '" + f.frame_id + "' has " + std::to_string(f.image.channels) + " channels");
      f.mask = read_mask_png(dir / e.at("mask").get<std::string>());
      f.camera = camera_from_json(e.at("camera"));
      f.pose = pose_from_json(e.at("pose"));
      frames.push_back(std::move(f));
    }
  } catch (const Json::exception& e) {
    throw ValidationError("malformed '" + p.string() + "': " + e.what());
  } catch (const ValidationError& e) {
    throw ValidationError("'" + p.string() + "': " + e.what());
  }
  return frames;
}

inline std::vector<int> scene_ids(const fs::path& root) {
  std::vector<int> ids;
  const fs::path t = root / "test";
  if (!fs::exists(t)) return ids;
  for (const auto& e : fs::directory_iterator(t))
    if (e.is_directory()) {
      try {
        ids.push_back(std::stoi(e.path().filename().string()));
      } catch (const std::exception&) {
      }
    }
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline fs::path scene_dir(const fs::path& root, int scene_id) { return root / "test" / id6(scene_id); }

inline std::vector<int> scene_image_ids(const fs::path& root, int scene_id) {
  std::vector<int> ids;
  const fs::path d = scene_dir(root, scene_id) / "proposals";
  if (!fs::exists(d)) return ids;
  for (const auto& e : fs::directory_iterator(d))
    if (e.path().extension() == ".json") ids.push_back(std::stoi(e.path().stem().string()));
  std::sort(ids.begin(), ids.end());
  return ids;
}

inline std::vector<int> selected_objects(const PipelineConfig& cfg, const DatasetInfo& info) {
  if (cfg.objects.empty()) return info.objects;
  for (int id : cfg.objects)
    if (std::find(info.objects.begin(), info.objects.end(), id) == info.objects.end())
      throw ValidationError("object " + std::to_string(id) + " is not part of dataset '" + info.name + "'");
  return cfg.objects;
}

// --- providers --------------------------------------------------------------------

inline std::shared_ptr<const DescriptorProvider> make_provider(const PipelineConfig& cfg) {
  if (cfg.provider == "synthetic")
    return std::make_shared<SyntheticProvider>(cfg.descriptor_dim, cfg.patch_count, cfg.seed);
  if (cfg.provider == "oracle") return std::make_shared<OracleProvider>(cfg.descriptor_dim, cfg.patch_count, cfg.seed);
  const fs::path dir = cfg.provider.substr(5);
  std::vector<DescriptorStore> stores;
  if (fs::is_directory(dir)) {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
      if (e.path().extension() == ".gfdesc") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    for (const auto& f : files) stores.push_back(read_store(f));
  } else if (fs::exists(dir)) {
    stores.push_back(read_store(dir));
  } else {
    throw ValidationError("descriptor store '" + dir.string() + "' does not exist");
  }
  if (stores.empty()) throw ValidationError("no .gfdesc stores in '" + dir.string() + "'");
  return std::make_shared<StoreProvider>(std::move(stores));
}

/// Describes many inputs, in parallel when the provider allows it.
inline std::vector<DescriptorPair> describe_all(const DescriptorProvider& provider, const std::vector<DescribeInput>& in) {
  std::vector<DescriptorPair> out(in.size());
  std::vector<std::string> errors(in.size());
  const long n = static_cast<long>(in.size());
#pragma omp parallel for schedule(dynamic) if (provider.thread_safe())
  for (long i = 0; i < n; ++i) {
    try {
      out[i] = provider(in[i]);
    } catch (const std::exception& e) {
      errors[i] = e.what();
    }
  }
  for (const auto& e : errors)
    if (!e.empty()) throw ValidationError(e);
  return out;
}

// --- commands -----------------------------------------------------------------------

/// Per-item outcome of a command; `failed` items make the command exit with
/// a runtime-failure status, `skipped` items do not.
struct CommandReport {
  Json items = Json::array();
  bool failed = false;
};

inline CommandReport cmd_onboard(const PipelineConfig& cfg) {
  const DatasetInfo info = read_dataset_info(cfg.dataset_root);
  CommandReport rep;
  for (int id : selected_objects(cfg, info)) {
    const auto t0 = std::chrono::steady_clock::now();
    Json item{{"object_id", id}};
    const auto frames = read_onboarding_frames(cfg.dataset_root, id, info.channels);
    if (frames.empty()) {
      spdlog::warn("object {}: no onboarding frames, skipped", id);
      item["status"] = "skipped";
      item["reason"] = "no onboarding frames";
      rep.items.push_back(item);
      continue;
    }
    spdlog::info("object {}: onboarding from {} frames", id, frames.size());
    const fs::path csv_path = cfg.output_dir / "objects" / ("obj_" + id6(id) + "_loss.csv");
    fs::create_directories(csv_path.parent_path());
    std::ofstream csv(csv_path);
    csv << "step,total,l1,ssim,silhouette,gaussians\n";
    double first_loss = -1.0, last_loss = -1.0;
    TrainHooks hooks;
    hooks.on_step = [&](const TrainEvent& e) {
      csv << e.step << ',' << e.loss.total << ',' << e.loss.l1 << ',' << e.loss.ssim << ',' << e.loss.silhouette << ','
          << e.gaussian_count << '\n';
      if (first_loss < 0) first_loss = e.loss.total;
      last_loss = e.loss.total;
      if (e.step % 100 == 0) spdlog::debug("object {} step {} loss {:.5f} gaussians {}", id, e.step, e.loss.total, e.gaussian_count);
    };
    hooks.on_checkpoint = [&](int step, const GaussianObject& obj) {
      GaussianObject ck = obj;
      ck.object_id = id;
      write_gaussians(cfg.output_dir / "checkpoints" / ("obj_" + id6(id) + "_" + id6(step) + ".gfgaus"), ck);
    };
    try {
      const OnboardResult res = onboard_object(frames, cfg.train, id, hooks);
      write_gaussians(object_path(cfg.output_dir, id), res.object);
      item["status"] = "ok";
      item["gaussians"] = res.object.size();
      item["hull_voxels"] = res.hull_voxels;
      item["initial_loss"] = first_loss;
      item["final_loss"] = last_loss;
    } catch (const EmptyMaskError& e) {
      item["status"] = "failed";
      item["reason"] = e.what();
      rep.failed = true;
    } catch (const EmptyHullError& e) {
      item["status"] = "failed";
      item["reason"] = e.what();
      rep.failed = true;
    } catch (const TrainingDivergedError& e) {
      write_gaussians(cfg.output_dir / "checkpoints" / ("obj_" + id6(id) + "_last_good.gfgaus"), e.last_good());
      item["status"] = "failed";
      item["reason"] = e.what();
      rep.failed = true;
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    item["seconds"] = secs;
    if (item["status"] == "failed") spdlog::error("object {}: {}", id, item["reason"].get<std::string>());
    else spdlog::info("object {}: done in {:.1f} s", id, secs);
    rep.items.push_back(item);
  }
  write_json_file(cfg.output_dir / "onboard_report.json", rep.items);
  return rep;
}

/// Describes templates with the proposal crop rule applied to the alpha mask.
inline std::vector<DescribeInput> template_inputs(const std::vector<Template>& templates,
                                                  std::vector<Proposal>& crops_storage) {
  crops_storage.clear();
  crops_storage.reserve(templates.size());
  for (const auto& t : templates)
    crops_storage.push_back(crop_proposal(t.render.rgb, t.render.alpha_mask(), t.template_index));
  std::vector<DescribeInput> in;
  for (std::size_t i = 0; i < templates.size(); ++i) {
    const RecordKey key{RecordKind::template_view, static_cast<std::uint32_t>(templates[i].object_id),
                        static_cast<std::uint32_t>(templates[i].template_index)};
    in.push_back({&crops_storage[i].crop, &crops_storage[i].crop_mask, StoreProvider::key_string(key),
                  templates[i].object_id});
  }
  return in;
}

inline DescriptorStore describe_templates(const DescriptorProvider& provider, const std::vector<Template>& templates) {
  std::vector<Proposal> crops;
  const auto in = template_inputs(templates, crops);
  auto descs = describe_all(provider, in);
  DescriptorStore store;
  store.dim = provider.dim();
  store.patch_count = provider.patch_count();
  store.provider = provider.name();
  store.model = provider.name();
  store.preprocessing = "224x224 masked crop, tight alpha box dilated 10%";
  for (std::size_t i = 0; i < templates.size(); ++i)
    store.add({RecordKind::template_view, static_cast<std::uint32_t>(templates[i].object_id),
               static_cast<std::uint32_t>(templates[i].template_index)},
              std::move(descs[i]));
  return store;
}

inline CommandReport cmd_templates(const PipelineConfig& cfg) {
  const DatasetInfo info = read_dataset_info(cfg.dataset_root);
  const bool external = cfg.provider.rfind("file:", 0) == 0;
  std::shared_ptr<const DescriptorProvider> provider;
  if (!external) provider = make_provider(cfg);
  CommandReport rep;
  for (int id : selected_objects(cfg, info)) {
    Json item{{"object_id", id}};
    const fs::path obj_path = object_path(cfg.output_dir, id);
    if (!fs::exists(obj_path)) {
      item["status"] = "skipped";
      item["reason"] = "no onboarded object";
      spdlog::warn("object {}: not onboarded, templates skipped", id);
      rep.items.push_back(item);
      continue;
    }
    const GaussianObject obj = read_gaussians(obj_path);
    const auto templates = render_templates(obj, cfg.template_count);
    write_template_set(template_dir(cfg.output_dir, id), templates);
    item["templates"] = templates.size();
    item["camera"] = to_string(templates.front().camera.kind);
    if (provider) {
      write_store(template_store_path(cfg.output_dir / "descriptors", id), describe_templates(*provider, templates));
      item["descriptors"] = provider->name();
    }
    item["status"] = "ok";
    spdlog::info("object {}: {} templates", id, templates.size());
    rep.items.push_back(item);
  }
  write_json_file(cfg.output_dir / "templates_report.json", rep.items);
  return rep;
}

/// Template descriptor stores for detection: from output_dir/descriptors, or
/// from the external directory for file providers.
inline std::vector<DescriptorStore> load_template_stores(const PipelineConfig& cfg, const std::vector<int>& objects) {
  const bool external = cfg.provider.rfind("file:", 0) == 0;
  const fs::path dir = external ? fs::path(cfg.provider.substr(5)) : cfg.output_dir / "descriptors";
  std::vector<DescriptorStore> stores;
  for (int id : objects) {
    const fs::path p = template_store_path(dir, id);
    if (!fs::exists(p)) throw ValidationError("missing template descriptor store '" + p.string() + "'");
    stores.push_back(read_store(p));
  }
  return stores;
}

struct ImageDetections {
  std::vector<DetectionRecord> records;
  std::vector<Detection> detections;
  std::vector<MatchResult> matches;
};

/// Inference for one image: grayscale conversion for 1-channel datasets,
/// proposal crops, descriptors, matching, filtering and NMS.
inline ImageDetections detect_image(const ImageBuffer& image_in, const ProposalManifest& manifest, int dataset_channels,
                                    const DescriptorProvider& provider, const Matcher& matcher, const MatchingConfig& mc) {
  const auto t0 = std::chrono::steady_clock::now();
  ImageBuffer image = image_in;
  if (dataset_channels == 1 && image.channels == 3) image = to_grayscale(image);
  if (image.width != manifest.width || image.height != manifest.height)
    throw ValidationError("image size differs from its proposal manifest");
  std::vector<Proposal> props;
  for (const auto& e : manifest.proposals) {
    if (e.mask.count() == 0) continue;
    props.push_back(crop_proposal(image, e.mask, e.id));
    props.back().oracle_label = e.oracle_label;
  }
  std::vector<DescribeInput> in;
  std::vector<int> ids;
  for (const auto& p : props) {
    const RecordKey key{RecordKind::proposal, static_cast<std::uint32_t>(manifest.image_id),
                        static_cast<std::uint32_t>(p.proposal_id)};
    in.push_back({&p.crop, &p.crop_mask, StoreProvider::key_string(key), p.oracle_label});
    ids.push_back(p.proposal_id);
  }
  const auto descs = describe_all(provider, in);
  ImageDetections out;
  out.matches = matcher.match_all(descs, ids);
  std::vector<Candidate> cands;
  for (std::size_t i = 0; i < props.size(); ++i) cands.push_back({out.matches[i], props[i].mask});
  out.detections = filter_and_nms(cands, mc.score_min, mc.nms_iou);
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  for (auto& d : out.detections) {
    d.scene_id = manifest.scene_id;
    d.image_id = manifest.image_id;
    out.records.push_back({manifest.scene_id, manifest.image_id, d.object_id,
                           BoxXYWH{static_cast<double>(d.bbox.x), static_cast<double>(d.bbox.y),
                                   static_cast<double>(d.bbox.w), static_cast<double>(d.bbox.h)},
                           d.score, mc.emit_time ? secs : 0.0});
  }
  return out;
}

struct DetectOutput {
  CommandReport report;
  std::vector<DetectionRecord> records;
};

inline DetectOutput cmd_detect(const PipelineConfig& cfg,
                               std::shared_ptr<const DescriptorProvider> provider = nullptr) {
  const DatasetInfo info = read_dataset_info(cfg.dataset_root);
  const auto objects = selected_objects(cfg, info);
  // File providers: proposals come from <dir>/scene_NNNNNN.gfdesc.
  const bool per_scene = !provider && cfg.provider.rfind("file:", 0) == 0;
  if (!provider && !per_scene) provider = make_provider(cfg);
  const auto stores = load_template_stores(cfg, objects);
  std::vector<ObjectTemplates> obj_templates;
  for (std::size_t i = 0; i < objects.size(); ++i) {
    auto t = stores[i].templates_of(static_cast<std::uint32_t>(objects[i]));
    if (t.empty()) throw ValidationError("descriptor store for object " + std::to_string(objects[i]) + " has no templates");
    obj_templates.push_back({objects[i], std::move(t)});
  }
  const Matcher matcher(obj_templates, cfg.matching.options);
  DetectOutput out;
  for (int scene : scene_ids(cfg.dataset_root)) {
    const fs::path sdir = scene_dir(cfg.dataset_root, scene);
    std::shared_ptr<const DescriptorProvider> scene_provider = provider;
    std::string scene_error;
    if (per_scene) {
      const fs::path p = proposal_store_path(fs::path(cfg.provider.substr(5)), scene);
      try {
        if (!fs::exists(p)) throw ValidationError("missing proposal descriptor store '" + p.string() + "'");
        scene_provider = std::make_shared<StoreProvider>(std::vector<DescriptorStore>{read_store(p)});
      } catch (const Error& e) {
        scene_error = e.what();
      }
    }
    for (int image_id : scene_image_ids(cfg.dataset_root, scene)) {
      Json item{{"scene_id", scene}, {"image_id", image_id}};
      try {
        if (!scene_error.empty()) throw ValidationError(scene_error);
        const ProposalManifest m = read_proposal_manifest(sdir / "proposals" / (id6(image_id) + ".json"));
        if (m.scene_id != scene || m.image_id != image_id)
          throw ValidationError("manifest ids do not match its location");
        const ImageBuffer img = read_image_png(sdir / "rgb" / (id6(image_id) + ".png"));
        auto det = detect_image(img, m, info.channels, *scene_provider, matcher, cfg.matching);
        item["status"] = "ok";
        item["proposals"] = m.proposals.size();
        item["detections"] = det.records.size();
        out.records.insert(out.records.end(), det.records.begin(), det.records.end());
      } catch (const Error& e) {
        item["status"] = "error";
        item["reason"] = e.what();
        spdlog::error("scene {} image {}: {}", scene, image_id, e.what());
      }
      out.report.items.push_back(item);
    }
  }
  Json dets = Json::array();
  for (const auto& r : out.records) dets.push_back(detection_to_json(r));
  write_json_file(cfg.output_dir / "detections.json", dets);
  write_json_file(cfg.output_dir / "detect_report.json", out.report.items);
  spdlog::info("{} detections written", out.records.size());
  return out;
}

inline std::vector<GroundTruthInstance> read_dataset_gt(const fs::path& root, const std::string& box_key) {
  std::vector<GroundTruthInstance> gt;
  for (int scene : scene_ids(root)) {
    auto s = read_bop_scene_gt(scene_dir(root, scene), scene, box_key);
    gt.insert(gt.end(), s.begin(), s.end());
  }
  return gt;
}

inline ApReport cmd_evaluate(const PipelineConfig& cfg) {
  std::vector<EvalDatasetSpec> specs = cfg.eval_datasets;
  if (specs.empty()) specs.push_back({"", cfg.dataset_root, cfg.output_dir / "detections.json"});
  std::vector<DatasetAp> results;
  for (const auto& s : specs) {
    const DatasetInfo info = read_dataset_info(s.dataset_root);
    const auto dets = detections_from_json(read_json_file(s.detections));
    const auto gt = read_dataset_gt(s.dataset_root, cfg.gt_box);
    results.push_back(evaluate_dataset(s.name.empty() ? info.name : s.name, dets, gt, info.objects));
  }
  const ApReport report = aggregate(std::move(results));
  write_json_file(cfg.output_dir / "ap_report.json", report_to_json(report));
  std::ofstream(cfg.output_dir / "ap_report.txt") << report_table(report);
  return report;
}

}  // namespace gfree
