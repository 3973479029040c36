// gfree command-line interface.

#include "gfree/fixture_dataset.hpp"
#include "gfree/pipeline.hpp"

#include <CLI11.hpp>
#include <omp.h>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdlib>
#include <iostream>

namespace {

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("gfree");
  spdlog::set_default_logger(logger);
  spdlog::set_pattern("[%H:%M:%S.%e] [%^%l%$] %v");
  spdlog::set_level(spdlog::level::info);
  if (const char* env = std::getenv("GFREE_LOG")) {
    const auto level = spdlog::level::from_str(env);
    if (level == spdlog::level::off && std::string(env) != "off")
      spdlog::warn("unknown GFREE_LOG level '{}', using info", env);
    else
      spdlog::set_level(level);
  }
}

struct Overrides {
  int jobs = 0;
  std::optional<std::uint64_t> seed;
  std::optional<double> score_min;
  std::optional<double> nms_iou;
  std::optional<int> topk;
  std::optional<std::string> provider;
  std::optional<std::string> store_dir;
};

gfree::PipelineConfig load(const std::string& path, const Overrides& o) {
  using namespace gfree;
  Json j = read_json_file(path);
  if (o.seed) j["seed"] = *o.seed;
  if (o.score_min) j["matching"]["score_min"] = *o.score_min;
  if (o.nms_iou) j["matching"]["nms_iou"] = *o.nms_iou;
  if (o.topk) j["matching"]["top_k"] = *o.topk;
  if (o.provider) j["provider"] = *o.provider;
  if (o.store_dir) {
    const fs::path p = fs::absolute(*o.store_dir);
    j["provider"] = "file:" + p.string();
  }
  try {
    return pipeline_config_from_json(j, fs::path(path).parent_path());
  } catch (const ValidationError& e) {
    throw ValidationError("'" + path + "': " + e.what());
  }
}

int report_status(const gfree::CommandReport& r) { return r.failed ? kExitRuntime : kExitOk; }

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  CLI::App app{"gfree: model-free unseen object detection with Gaussian object templates"};
  app.require_subcommand(1);

  std::string config;
  Overrides o;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config, "pipeline configuration (JSON)")->required()->check(CLI::ExistingFile);
    sub->add_option("--jobs", o.jobs, "worker threads (0: all cores)")->check(CLI::NonNegativeNumber);
    sub->add_option("--seed", o.seed, "random seed (overrides the config)");
  };
  auto* onboard = app.add_subcommand("onboard", "reconstruct Gaussian objects from onboarding frames");
  auto* templates = app.add_subcommand("templates", "render templates and describe them");
  auto* describe = app.add_subcommand("describe", "re-describe rendered templates with the configured provider");
  auto* detect = app.add_subcommand("detect", "detect objects in test images");
  auto* evaluate = app.add_subcommand("evaluate", "compute AP of detections against ground truth");
  for (auto* s : {onboard, templates, describe, detect, evaluate}) add_common(s);
  detect->add_option("--score-min", o.score_min, "drop matches scoring below this");
  detect->add_option("--nms-iou", o.nms_iou, "mask IoU above which NMS suppresses");
  detect->add_option("--topk", o.topk, "templates averaged in the global score");
  for (auto* s : {templates, describe, detect}) {
    s->add_option("--provider", o.provider, "synthetic | oracle | file:<dir>");
    s->add_option("--store-dir", o.store_dir, "directory of GFDESC01 stores (implies the file provider)");
  }

  auto* fixture = app.add_subcommand("fixture", "write a synthetic dataset");
  std::string fixture_out;
  gfree::FixtureSpec spec;
  std::string surface_out;
  fixture->add_option("--out", fixture_out, "dataset root to create")->required();
  fixture->add_option("--objects", spec.objects, "number of objects (1-6)");
  fixture->add_option("--channels", spec.channels, "1 (grayscale onboarding) or 3");
  fixture->add_option("--views", spec.onboarding_views, "onboarding views per object");
  fixture->add_option("--scenes", spec.scenes, "test scenes");
  fixture->add_option("--images", spec.images_per_scene, "images per scene");
  fixture->add_option("--distractors", spec.distractor_fraction, "unlabeled proposals per object instance");
  fixture->add_option("--seed", spec.seed, "random seed");
  fixture->add_option("--surface-objects", surface_out,
                      "also write surface-sampled Gaussian objects into this output directory");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitValidation;
  }

  try {
    using namespace gfree;
    if (fixture->parsed()) {
      write_fixture_dataset(fixture_out, spec);
      if (!surface_out.empty()) write_fixture_surface_objects(surface_out, spec);
      spdlog::info("fixture dataset written to {}", fixture_out);
      return kExitOk;
    }
    if (o.jobs > 0) omp_set_num_threads(o.jobs);
    const PipelineConfig cfg = load(config, o);
    if (!fs::exists(cfg.dataset_root / "dataset.json") && !evaluate->parsed())
      throw ValidationError("dataset_root '" + cfg.dataset_root.string() + "' has no dataset.json");
    fs::create_directories(cfg.output_dir);
    if (onboard->parsed()) return report_status(cmd_onboard(cfg));
    if (templates->parsed()) return report_status(cmd_templates(cfg));
    if (describe->parsed()) {
      const DatasetInfo info = read_dataset_info(cfg.dataset_root);
      const auto provider = make_provider(cfg);
      for (int id : selected_objects(cfg, info)) {
        const fs::path dir = template_dir(cfg.output_dir, id);
        if (!fs::exists(dir / "templates.json")) {
          spdlog::warn("object {}: no templates, skipped", id);
          continue;
        }
        write_store(template_store_path(cfg.output_dir / "descriptors", id),
                    describe_templates(*provider, read_template_set(dir)));
        spdlog::info("object {}: templates described with {}", id, provider->name());
      }
      return kExitOk;
    }
    if (detect->parsed()) {
      const auto out = cmd_detect(cfg);
      bool any_error = false;
      for (const auto& item : out.report.items) any_error = any_error || item["status"] != "ok";
      return any_error ? kExitRuntime : kExitOk;
    }
    if (evaluate->parsed()) {
      const ApReport r = cmd_evaluate(cfg);
      std::cout << report_table(r);
      return kExitOk;
    }
  } catch (const gfree::ValidationError& e) {
    spdlog::error("{}", e.what());
    return kExitValidation;
  } catch (const gfree::FormatError& e) {
    spdlog::error("{}", e.what());
    return kExitValidation;
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return kExitRuntime;
  }
  return kExitOk;
}
