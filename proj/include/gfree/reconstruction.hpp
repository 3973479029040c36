#pragma once

// Onboarding: mask-driven zoom, photometric + silhouette loss, analytic
// gradients, adaptive-moment optimization with opacity resets and density
// control.

#include "gfree/crop.hpp"
#include "gfree/detail/random.hpp"
#include "gfree/errors.hpp"
#include "gfree/geometry.hpp"
#include "gfree/image.hpp"
#include "gfree/splat_render.hpp"
#include "gfree/ssim.hpp"
#include "gfree/visual_hull.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <vector>

namespace gfree {

inline constexpr int kOnboardingCropSize = 256;
inline constexpr int kHullViewCap = 8;
inline constexpr int kTrainIterations = 10000;
inline constexpr int kOpacityResetInterval = 1000;
inline constexpr int kDensifyUntil = 6000;

struct LossWeights {
  double l1 = 0.8;
  double ssim = 0.2;
  double silhouette = 1.0;
};

struct TrainConfig {
  int iterations = kTrainIterations;
  int opacity_reset_interval = kOpacityResetInterval;
  int densify_until = kDensifyUntil;
  int densify_from = 500;
  int densify_interval = 100;
  int crop_size = kOnboardingCropSize;
  LossWeights weights;

  double lr_mean = 1.6e-4;        // times scene extent
  double lr_mean_final = 1.6e-6;  // times scene extent, reached at the last iteration
  double lr_sh = 2.5e-3;
  double lr_sh_rest_factor = 1.0 / 20.0;  // higher-order SH bands
  double lr_opacity = 5e-2;
  double lr_scale = 5e-3;
  double lr_rotation = 1e-3;

  double densify_grad_threshold = 2e-4;
  double prune_opacity = 0.005;
  double percent_dense = 0.01;
  double opacity_reset_value = 0.01;
  std::size_t max_gaussians = 100000;

  double init_opacity = 0.1;
  std::size_t init_point_count = 5000;
  int hull_views = kHullViewCap;
  int hull_dims = 128;
  std::uint64_t seed = 0;

  void validate() const {
    if (iterations < 0) throw ValidationError("iterations must be >= 0");
    if (iterations > 0 && iterations <= densify_until)
      throw ValidationError("iterations must exceed densify_until");
    if (opacity_reset_interval < 1 || densify_interval < 1) throw ValidationError("intervals must be >= 1");
    if (crop_size < 32) throw ValidationError("crop_size must be >= 32");
    if (weights.l1 < 0 || weights.ssim < 0 || weights.silhouette < 0) throw ValidationError("loss weights must be >= 0");
    if (!(weights.l1 + weights.ssim > 0)) throw ValidationError("l1 + ssim weight must be positive");
    if (hull_views < 1 || hull_views > kHullViewCap) throw ValidationError("hull_views must be in [1, 8]");
    if (init_point_count < 1) throw ValidationError("init_point_count must be >= 1");
  }
};

/// Cropped, resized and background-masked onboarding view.
struct ZoomedFrame {
  ImageBuffer image;
  Mask mask;
  CameraModel camera;
  Pose pose;
  std::string frame_id;
};

/// Crops the frame to the dilated mask box and resizes it to crop_size.
/// Equidistant frames keep their projection kind; only focal length and
/// principal point change.
inline ZoomedFrame preprocess(const OnboardingFrame& frame, int crop_size = kOnboardingCropSize) {
  if (frame.mask.width != frame.image.width || frame.mask.height != frame.image.height)
    throw ValidationError("mask and image sizes differ for frame '" + frame.frame_id + "'");
  if (frame.mask.count() == 0) throw EmptyMaskError("empty mask for frame '" + frame.frame_id + "'");
  const CropTransform t = crop_window(frame.mask, crop_size);
  ImageBuffer masked = frame.image;
  apply_mask(masked, frame.mask);
  ZoomedFrame z;
  z.image = resample(masked, t);
  z.mask = resample(frame.mask, t);
  apply_mask(z.image, z.mask);
  z.camera = t.apply(frame.camera);
  z.pose = frame.pose;
  z.frame_id = frame.frame_id;
  return z;
}

struct LossBreakdown {
  double total = 0.0;
  double l1 = 0.0;
  double ssim = 1.0;  // the SSIM value, the loss term is 1 - ssim
  double silhouette = 0.0;
};

namespace detail {
inline double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

struct LossWithGrad {
  LossBreakdown loss;
  ImageBuffer grad_rgb;
  std::vector<double> grad_alpha;
};

inline LossWithGrad loss_eval(const RenderOutput& render, const ZoomedFrame& target, const LossWeights& w,
                              bool want_grad) {
  const auto& img = target.image;
  if (render.rgb.width != img.width || render.rgb.height != img.height || render.rgb.channels != img.channels ||
      target.mask.width != img.width || target.mask.height != img.height || render.alpha.size() != img.pixel_count())
    throw ValidationError("loss: render and target dimensions differ");
  LossWithGrad out;
  const double n_rgb = static_cast<double>(img.data.size());
  const double n_px = static_cast<double>(img.pixel_count());
  if (want_grad) {
    out.grad_rgb = ImageBuffer(img.width, img.height, img.channels);
    out.grad_alpha.assign(img.pixel_count(), 0.0);
  }
  double l1 = 0.0;
  for (std::size_t i = 0; i < img.data.size(); ++i) {
    const double r = render.rgb.data[i] - img.data[i];
    l1 += std::abs(r);
    if (want_grad) out.grad_rgb.data[i] = w.l1 * sign(r) / n_rgb;
  }
  out.loss.l1 = l1 / n_rgb;
  double sil = 0.0;
  for (std::size_t i = 0; i < img.pixel_count(); ++i) {
    const double r = render.alpha[i] - (target.mask.data[i] ? 1.0 : 0.0);
    sil += std::abs(r);
    if (want_grad) out.grad_alpha[i] = w.silhouette * sign(r) / n_px;
  }
  out.loss.silhouette = sil / n_px;
  if (w.ssim > 0.0 || !want_grad) {
    auto s = ssim_eval(render.rgb, img, want_grad && w.ssim > 0.0);
    out.loss.ssim = s.value;
    if (want_grad && w.ssim > 0.0)
      for (std::size_t i = 0; i < img.data.size(); ++i) out.grad_rgb.data[i] -= w.ssim * s.grad.data[i];
  }
  out.loss.total = w.l1 * out.loss.l1 + w.ssim * (1.0 - out.loss.ssim) + w.silhouette * out.loss.silhouette;
  return out;
}
}  // namespace detail

/// L = w_l1 * L1(rgb, image) + w_ssim * (1 - SSIM(rgb, image)) + w_sil * L1(alpha, mask)
inline LossBreakdown loss(const RenderOutput& render, const ZoomedFrame& target, const LossWeights& weights = {}) {
  return detail::loss_eval(render, target, weights, false).loss;
}

struct GradientResult {
  LossBreakdown loss;
  RenderGradients grads;
  RenderOutput render;
};

/// Renders `obj` at the target's viewpoint (black background) and returns
/// the loss together with analytic gradients for every Gaussian parameter.
inline GradientResult gradients(const GaussianObject& obj, const Pose& pose, const CameraModel& camera,
                                const ZoomedFrame& target, const LossWeights& weights = {}) {
  const std::array<double, kMaxChannels> bg{};
  thread_local RasterWorkspace workspace;
  Rasterizer raster(obj, pose, camera, std::span<const double>(bg.data(), static_cast<std::size_t>(obj.channels)), true,
                    &workspace);
  GradientResult res;
  res.render = raster.render();
  auto lg = detail::loss_eval(res.render, target, weights, true);
  res.loss = lg.loss;
  res.grads = raster.backward(lg.grad_rgb, lg.grad_alpha);
  return res;
}

inline GradientResult gradients(const GaussianObject& obj, const ZoomedFrame& target, const LossWeights& weights = {}) {
  return gradients(obj, target.pose, target.camera, target, weights);
}

/// Thrown when the loss or a gradient turns non-finite. Carries the last
/// object state that produced finite values.
class TrainingDivergedError : public Error {
 public:
  TrainingDivergedError(const std::string& what, GaussianObject last_good)
      : Error(what), last_good_(std::move(last_good)) {}
  [[nodiscard]] const GaussianObject& last_good() const { return last_good_; }

 private:
  GaussianObject last_good_;
};

struct DensifyThresholds {
  double grad_threshold = 2e-4;
  double prune_opacity = 0.005;
  double percent_dense = 0.01;
  double scene_extent = 1.0;
  std::size_t max_gaussians = std::numeric_limits<std::size_t>::max();
};

struct DensifyReport {
  std::size_t cloned = 0;
  std::size_t split = 0;
  std::size_t pruned = 0;
  std::vector<long> origin;  // per output Gaussian: surviving input index, or -1 when newly created
};

/// Clones small and splits large Gaussians whose mean screen-space gradient
/// reaches the threshold, then prunes nearly transparent ones.
inline DensifyReport densify_and_prune(GaussianObject& obj, std::span<const double> avg_grad,
                                       const DensifyThresholds& th, detail::Rng& rng) {
  if (avg_grad.size() != obj.size()) throw ValidationError("densify: gradient stats size mismatch");
  DensifyReport rep;
  std::vector<Gaussian> out;
  std::vector<long> origin;
  std::vector<Gaussian> added;
  const double size_limit = th.percent_dense * th.scene_extent;
  std::size_t budget = th.max_gaussians > obj.size() ? th.max_gaussians - obj.size() : 0;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    const Gaussian& g = obj.gaussians[i];
    const bool hot = avg_grad[i] >= th.grad_threshold;
    const double max_scale = g.log_scale.array().exp().maxCoeff();
    if (hot && budget > 0 && max_scale <= size_limit) {
      out.push_back(g);
      origin.push_back(static_cast<long>(i));
      added.push_back(g);
      ++rep.cloned;
      --budget;
    } else if (hot && budget > 0) {
      const Mat3 R = g.rotation_matrix();
      const Vec3 s = g.log_scale.array().exp();
      for (int child = 0; child < 2; ++child) {
        Gaussian c = g;
        const Vec3 offset(rng.normal() * s.x(), rng.normal() * s.y(), rng.normal() * s.z());
        c.mean = g.mean + R * offset;
        c.log_scale = g.log_scale.array() - std::log(1.6);
        added.push_back(c);
      }
      ++rep.split;
      --budget;
    } else {
      out.push_back(g);
      origin.push_back(static_cast<long>(i));
    }
  }
  for (auto& g : added) {
    out.push_back(g);
    origin.push_back(-1);
  }
  std::vector<Gaussian> kept;
  std::vector<long> kept_origin;
  for (std::size_t i = 0; i < out.size(); ++i) {
    if (out[i].opacity() < th.prune_opacity) {
      ++rep.pruned;
      continue;
    }
    kept.push_back(out[i]);
    kept_origin.push_back(origin[i]);
  }
  obj.gaussians = std::move(kept);
  rep.origin = std::move(kept_origin);
  return rep;
}

/// First/second-moment adaptive optimizer over every Gaussian scalar.
class GaussianAdam {
 public:
  GaussianAdam(std::size_t count, int channels) : channels_(channels), m_(count, Gaussian::zero()), v_(count, Gaussian::zero()) {}

  struct Rates {
    double mean, sh_dc, sh_rest, opacity, scale, rotation;
  };

  void step(GaussianObject& obj, const std::vector<Gaussian>& grads, const Rates& lr) {
    ++t_;
    const double bc1 = 1.0 - std::pow(kBeta1, t_);
    const double bc2 = 1.0 - std::pow(kBeta2, t_);
    for (std::size_t i = 0; i < obj.size(); ++i) {
      std::array<double, kParams> g{}, m{}, v{};
      flatten(grads[i], g);
      flatten(m_[i], m);
      flatten(v_[i], v);
      std::size_t k = 0;
      obj.gaussians[i].for_each_param(channels_, [&](double& x, int grp) {
        double rate = 0.0;
        switch (grp) {
          case 0: rate = lr.mean; break;
          case 1: rate = lr.scale; break;
          case 2: rate = lr.rotation; break;
          case 3: rate = lr.opacity; break;
          default: rate = ((k - 11) % kShCoeffs == 0) ? lr.sh_dc : lr.sh_rest; break;
        }
        m[k] = kBeta1 * m[k] + (1.0 - kBeta1) * g[k];
        v[k] = kBeta2 * v[k] + (1.0 - kBeta2) * g[k] * g[k];
        x -= rate * (m[k] / bc1) / (std::sqrt(v[k] / bc2) + kEps);
        ++k;
      });
      unflatten(m, m_[i]);
      unflatten(v, v_[i]);
      Gaussian& p = obj.gaussians[i];
      const double qn = p.rotation.norm();
      if (qn > 0.0) p.rotation /= qn;
    }
  }

  void reset_opacity_moments() {
    for (auto& m : m_) m.opacity_logit = 0.0;
    for (auto& v : v_) v.opacity_logit = 0.0;
  }

  /// Re-indexes moment state after density control; new entries start at zero.
  void remap(const std::vector<long>& origin) {
    std::vector<Gaussian> m, v;
    m.reserve(origin.size());
    v.reserve(origin.size());
    for (long o : origin) {
      m.push_back(o >= 0 ? m_[static_cast<std::size_t>(o)] : Gaussian::zero());
      v.push_back(o >= 0 ? v_[static_cast<std::size_t>(o)] : Gaussian::zero());
    }
    m_ = std::move(m);
    v_ = std::move(v);
  }

 private:
  static constexpr std::size_t kParams = 11 + kShCoeffs * kMaxChannels;

  void flatten(Gaussian g, std::array<double, kParams>& out) const {
    std::size_t k = 0;
    g.for_each_param(channels_, [&](double& x, int) { out[k++] = x; });
  }
  void unflatten(const std::array<double, kParams>& in, Gaussian& g) const {
    std::size_t k = 0;
    g.for_each_param(channels_, [&](double& x, int) { x = in[k++]; });
  }

  static constexpr double kBeta1 = 0.9;
  static constexpr double kBeta2 = 0.999;
  static constexpr double kEps = 1e-15;
  int channels_;
  int t_ = 0;
  std::vector<Gaussian> m_, v_;
};

/// Mean distance from each point to its nearest neighbour (brute force).
inline double mean_nearest_neighbor_distance(std::span<const Vec3> pts) {
  if (pts.size() < 2) return 1.0;
  double sum = 0.0;
  for (std::size_t i = 0; i < pts.size(); ++i) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < pts.size(); ++j)
      if (i != j) best = std::min(best, (pts[i] - pts[j]).squaredNorm());
    sum += std::sqrt(best);
  }
  return sum / static_cast<double>(pts.size());
}

/// 1.1x the largest camera-center distance from the object origin.
template <class View>
double scene_extent(std::span<const View> frames) {
  double r = 0.0;
  for (const auto& f : frames) r = std::max(r, f.pose.camera_center().norm());
  return 1.1 * r;
}

struct TrainEvent {
  int step = 0;
  LossBreakdown loss;
  std::size_t gaussian_count = 0;
  const GaussianObject* object = nullptr;  // state after this step
};

struct TrainHooks {
  std::function<void(const TrainEvent&)> on_step;
  std::function<void(int step, const GaussianObject&)> on_checkpoint;  // every 1000 steps
};

/// Isotropic Gaussians at `points` with the mean nearest-neighbour spacing as
/// scale, opacity init_opacity and neutral gray color.
inline GaussianObject initial_object(std::span<const Vec3> points, int channels, const TrainConfig& cfg) {
  if (points.empty()) throw ValidationError("train: no initial points");
  GaussianObject obj;
  obj.channels = channels;
  const double scale = mean_nearest_neighbor_distance(points);
  for (const auto& p : points) {
    Gaussian g;
    g.mean = p;
    g.log_scale = Vec3::Constant(std::log(scale));
    g.opacity_logit = logit(cfg.init_opacity);
    obj.gaussians.push_back(g);
  }
  return obj;
}

inline GaussianObject train(std::span<const ZoomedFrame> frames, std::span<const Vec3> init, const TrainConfig& cfg,
                            const TrainHooks& hooks = {}) {
  cfg.validate();
  if (frames.size() < 3) throw ValidationError("train: need at least 3 frames");
  const int channels = frames.front().image.channels;
  for (const auto& f : frames)
    if (f.image.channels != channels) throw ValidationError("train: frames mix channel counts");
  GaussianObject obj = initial_object(init, channels, cfg);
  if (cfg.iterations == 0) return obj;

  const double extent = scene_extent(frames);
  detail::Rng rng(cfg.seed);
  GaussianAdam adam(obj.size(), channels);
  std::vector<double> grad_accum(obj.size(), 0.0);
  std::vector<double> grad_count(obj.size(), 0.0);
  std::vector<std::size_t> order;
  std::size_t cursor = 0;
  GaussianObject last_good = obj;

  for (int step = 1; step <= cfg.iterations; ++step) {
    if (cursor == order.size()) {
      order.resize(frames.size());
      std::iota(order.begin(), order.end(), std::size_t{0});
      rng.shuffle(order);
      cursor = 0;
    }
    const ZoomedFrame& frame = frames[order[cursor++]];
    auto res = gradients(obj, frame, cfg.weights);

    bool finite = std::isfinite(res.loss.total);
    for (std::size_t i = 0; finite && i < obj.size(); ++i) {
      Gaussian& g = res.grads.params[i];
      g.for_each_param(channels, [&](double& x, int) { finite = finite && std::isfinite(x); });
    }
    if (!finite) {
      std::ostringstream msg;
      msg << "training diverged at step " << step << " (frame '" << frame.frame_id << "')";
      throw TrainingDivergedError(msg.str(), last_good);
    }
    last_good = obj;

    const double progress = static_cast<double>(step - 1) / std::max(1, cfg.iterations - 1);
    const double lr_mean = extent * std::exp(std::log(cfg.lr_mean) * (1.0 - progress) + std::log(cfg.lr_mean_final) * progress);
    adam.step(obj, res.grads.params,
              {lr_mean, cfg.lr_sh, cfg.lr_sh * cfg.lr_sh_rest_factor, cfg.lr_opacity, cfg.lr_scale, cfg.lr_rotation});

    if (step <= cfg.densify_until) {
      const double ndc = 0.5 * std::max(frame.camera.width, frame.camera.height);
      for (std::size_t i = 0; i < obj.size(); ++i) {
        if (!res.grads.visible[i]) continue;
        grad_accum[i] += res.grads.mean2d[i].norm() * ndc;
        grad_count[i] += 1.0;
      }
      if (step >= cfg.densify_from && step % cfg.densify_interval == 0) {
        std::vector<double> avg(obj.size(), 0.0);
        for (std::size_t i = 0; i < obj.size(); ++i) avg[i] = grad_count[i] > 0 ? grad_accum[i] / grad_count[i] : 0.0;
        DensifyThresholds th{cfg.densify_grad_threshold, cfg.prune_opacity, cfg.percent_dense, extent, cfg.max_gaussians};
        auto rep = densify_and_prune(obj, avg, th, rng);
        adam.remap(rep.origin);
        grad_accum.assign(obj.size(), 0.0);
        grad_count.assign(obj.size(), 0.0);
        if (obj.gaussians.empty()) throw TrainingDivergedError("all Gaussians were pruned", last_good);
      }
      if (step % cfg.opacity_reset_interval == 0 && step < cfg.iterations) {
        const double cap = logit(cfg.opacity_reset_value);
        for (auto& g : obj.gaussians) g.opacity_logit = std::min(g.opacity_logit, cap);
        adam.reset_opacity_moments();
      }
    }
    if (hooks.on_step) hooks.on_step({step, res.loss, obj.size(), &obj});
    if (hooks.on_checkpoint && step % 1000 == 0) hooks.on_checkpoint(step, obj);
  }
  return obj;
}

inline GaussianObject train(const std::vector<ZoomedFrame>& frames, const std::vector<Vec3>& init,
                            const TrainConfig& cfg, const TrainHooks& hooks = {}) {
  return train(std::span<const ZoomedFrame>(frames), std::span<const Vec3>(init), cfg, hooks);
}

/// Full onboarding of one object: zoom every frame, carve the hull from up
/// to hull_views FPS-selected views, seed and train.
struct OnboardResult {
  GaussianObject object;
  std::vector<ZoomedFrame> frames;
  std::vector<std::size_t> hull_view_indices;
  std::size_t hull_voxels = 0;
};

inline OnboardResult onboard_object(std::span<const OnboardingFrame> frames, const TrainConfig& cfg, int object_id,
                                    const TrainHooks& hooks = {}) {
  cfg.validate();
  OnboardResult res;
  for (const auto& f : frames) res.frames.push_back(preprocess(f, cfg.crop_size));

  // Select carving views per sequence, then carve with the union.
  std::vector<std::string> sequences;
  for (const auto& f : frames)
    if (std::find(sequences.begin(), sequences.end(), f.sequence) == sequences.end()) sequences.push_back(f.sequence);
  for (const auto& seq : sequences) {
    std::vector<std::size_t> idx;
    std::vector<Mat3> rots;
    for (std::size_t i = 0; i < frames.size(); ++i)
      if (frames[i].sequence == seq) {
        idx.push_back(i);
        rots.push_back(frames[i].pose.rotation);
      }
    for (auto k : fps_select(rots, static_cast<std::size_t>(cfg.hull_views))) res.hull_view_indices.push_back(idx[k]);
  }
  std::vector<ZoomedFrame> carving;
  for (auto i : res.hull_view_indices) carving.push_back(res.frames[i]);
  const GridSpec spec = default_grid_spec(std::span<const ZoomedFrame>(carving), cfg.hull_dims);
  const VoxelGrid grid = carve(std::span<const ZoomedFrame>(carving), spec);
  res.hull_voxels = grid.occupied_count();
  const auto pts = init_points(grid, cfg.init_point_count);
  res.object = train(std::span<const ZoomedFrame>(res.frames), std::span<const Vec3>(pts), cfg, hooks);
  res.object.object_id = object_id;
  return res;
}

}  // namespace gfree
