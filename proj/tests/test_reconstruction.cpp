#include "gfree/fixtures.hpp"
#include "gfree/reconstruction.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

using namespace gfree;

namespace {

OnboardingFrame frame_with_mask(int w, int h, int x0, int y0, int mw, int mh, double f) {
  OnboardingFrame fr;
  fr.image = ImageBuffer(w, h, 3, 0.7);
  fr.mask = Mask(w, h);
  for (int y = y0; y < y0 + mh; ++y)
    for (int x = x0; x < x0 + mw; ++x) fr.mask.set(x, y, true);
  fr.camera = {ProjectionKind::perspective, f, f, (w - 1) / 2.0, (h - 1) / 2.0, w, h};
  fr.pose.translation = Vec3(0, 0, 500);
  fr.frame_id = "f";
  return fr;
}

ZoomedFrame solid_frame(int size, double value, bool mask) {
  ZoomedFrame z;
  z.image = ImageBuffer(size, size, 3, value);
  z.mask = Mask(size, size, mask);
  z.camera = {ProjectionKind::perspective, 50, 50, (size - 1) / 2.0, (size - 1) / 2.0, size, size};
  z.pose.translation = Vec3(0, 0, 100);
  return z;
}

RenderOutput solid_render(int size, double value, double alpha) {
  RenderOutput r{ImageBuffer(size, size, 3, value), std::vector<double>(size * size, 0.0),
                 std::vector<double>(size * size, alpha)};
  return r;
}

Gaussian make(const Vec3& mean, double scale, double opacity) {
  Gaussian g;
  g.mean = mean;
  g.log_scale = Vec3::Constant(std::log(scale));
  g.opacity_logit = logit(opacity);
  return g;
}

}  // namespace

TEST(TrainConfig, DefaultsAndValidation) {
  const TrainConfig cfg;
  EXPECT_EQ(cfg.iterations, 10000);
  EXPECT_EQ(cfg.opacity_reset_interval, 1000);
  EXPECT_EQ(cfg.densify_until, 6000);
  EXPECT_EQ(cfg.crop_size, 256);
  EXPECT_EQ(cfg.hull_views, 8);
  EXPECT_DOUBLE_EQ(cfg.weights.l1, 0.8);
  EXPECT_DOUBLE_EQ(cfg.weights.ssim, 0.2);
  EXPECT_DOUBLE_EQ(cfg.weights.silhouette, 1.0);
  EXPECT_NO_THROW(cfg.validate());
  TrainConfig bad = cfg;
  bad.iterations = 6000;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.crop_size = 16;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.weights.l1 = bad.weights.ssim = 0;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.hull_views = 9;
  EXPECT_THROW(bad.validate(), ValidationError);
  bad = cfg;
  bad.iterations = 0;
  EXPECT_NO_THROW(bad.validate());
}

TEST(Preprocess, CenteredMask) {
  const auto fr = frame_with_mask(512, 512, 224, 224, 64, 64, 500);
  const auto z = preprocess(fr, 256);
  EXPECT_NEAR(z.camera.fx, 500.0 * 256 / 70.4, 1e-9);
  EXPECT_NEAR(z.camera.fx, 1818.18, 0.01);
  EXPECT_EQ(z.image.width, 256);
  EXPECT_EQ(z.mask.height, 256);
  // The object center stays in the middle of the crop.
  const auto px = project(Vec3(0, 0, 500), z.camera);
  EXPECT_NEAR(px->x(), 127.5, 1e-9);
  EXPECT_NEAR(px->y(), 127.5, 1e-9);
  const double frac = static_cast<double>(z.mask.count()) / (256 * 256);
  EXPECT_GT(frac, 0.0);
  EXPECT_LE(frac, 1.0);
  EXPECT_NEAR(frac, std::pow(64 / 70.4, 2), 0.02);
  for (std::size_t i = 0; i < z.mask.data.size(); ++i) {
    if (!z.mask.data[i]) {
      EXPECT_EQ(z.image.data[i * 3], 0.0);
    }
  }
}

TEST(Preprocess, FullMaskIsPureResize) {
  auto fr = frame_with_mask(128, 128, 0, 0, 128, 128, 100);
  const auto z = preprocess(fr, 256);
  EXPECT_NEAR(z.camera.fx, 100.0 * 256 / 128, 1e-9);
  EXPECT_NEAR(z.camera.cx, 127.5, 1e-9);
  EXPECT_EQ(z.mask.count(), 256u * 256u);
  for (double v : z.image.data) EXPECT_NEAR(v, 0.7, 1e-12);
}

TEST(Preprocess, KeepsEquidistantKind) {
  auto fr = frame_with_mask(200, 100, 20, 10, 30, 50, 80);
  fr.camera.kind = ProjectionKind::equidistant;
  const auto z = preprocess(fr, 64);
  EXPECT_EQ(z.camera.kind, ProjectionKind::equidistant);
  EXPECT_EQ(z.camera.width, 64);
  fr.mask = Mask(200, 100);
  EXPECT_THROW(preprocess(fr, 64), EmptyMaskError);
}

TEST(Loss, Examples) {
  const auto z = solid_frame(16, 0.3, true);
  auto l = loss(solid_render(16, 0.3, 1.0), z);
  EXPECT_EQ(l.total, 0.0);
  EXPECT_NEAR(l.ssim, 1.0, 1e-12);
  const auto black = solid_frame(16, 0.0, false);
  l = loss(solid_render(16, 1.0, 0.0), black, {1.0, 0.0, 0.0});
  EXPECT_DOUBLE_EQ(l.l1, 1.0);
  EXPECT_DOUBLE_EQ(l.total, 1.0);
  EXPECT_THROW(loss(solid_render(8, 1.0, 0.0), black), ValidationError);
}

TEST(Loss, NonNegativeAndSsimSelfSimilarity) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  ImageBuffer img(20, 17, 3);
  for (auto& v : img.data) v = u(rng);
  EXPECT_NEAR(ssim(img, img), 1.0, 1e-12);
  ZoomedFrame z;
  z.image = img;
  z.mask = Mask(20, 17, true);
  RenderOutput r{img, std::vector<double>(340, 0), std::vector<double>(340, 1.0)};
  EXPECT_NEAR(loss(r, z).total, 0.0, 1e-12);
  for (auto& v : r.rgb.data) v = u(rng);
  EXPECT_GT(loss(r, z).total, 0.0);
}

TEST(Ssim, GradientMatchesFiniteDifferences) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  ImageBuffer a(13, 11, 3), b(13, 11, 3);
  for (auto& v : a.data) v = u(rng);
  for (auto& v : b.data) v = u(rng);
  const auto res = ssim_eval(a, b, true);
  for (std::size_t i = 0; i < a.data.size(); i += 7) {
    ImageBuffer p = a, m = a;
    p.data[i] += 1e-6;
    m.data[i] -= 1e-6;
    EXPECT_NEAR((ssim(p, b) - ssim(m, b)) / 2e-6, res.grad.data[i], 1e-7);
  }
}

TEST(Gradients, FiniteDifferenceCheck) {
  for (std::uint64_t seed : {1u, 2u}) {
    const auto r = gradcheck::check(gradcheck::random_scene(seed));
    EXPECT_LT(r.max_rel_error, 1e-3);
  }
}

TEST(Gradients, ZeroResidualGivesZeroL1Gradient) {
  GaussianObject obj;
  obj.gaussians.push_back(make(Vec3::Zero(), 10, 0.8));
  auto target = solid_frame(24, 0.0, false);
  const auto r = rasterize(obj, target.pose, target.camera, 0.0);
  target.image = r.rgb;
  const auto g = gradients(obj, target, {1.0, 0.0, 0.0});
  EXPECT_EQ(g.loss.total, 0.0);
  EXPECT_EQ(g.grads.params[0].opacity_logit, 0.0);
  EXPECT_EQ(g.grads.params[0].mean, Vec3::Zero());
}

TEST(Gradients, OpacityGradientSign) {
  GaussianObject obj;
  obj.gaussians.push_back(make(Vec3::Zero(), 10, 0.5));
  const auto target = solid_frame(24, 1.0, true);
  const auto g = gradients(obj, target, {1.0, 0.0, 0.0});
  EXPECT_LT(g.grads.params[0].opacity_logit, 0.0);
  GaussianObject more = obj;
  more.gaussians[0].opacity_logit += 1e-3;
  EXPECT_LT(loss(rasterize(more, target.pose, target.camera), target, {1.0, 0.0, 0.0}).total, g.loss.total);
}

TEST(Densify, Rules) {
  detail::Rng rng(1);
  DensifyThresholds th;
  th.scene_extent = 100;  // split above 1 mm
  GaussianObject obj;
  obj.gaussians = {make(Vec3::Zero(), 0.5, 0.5), make(Vec3(5, 0, 0), 3.0, 0.5)};
  auto copy = obj;
  auto rep = densify_and_prune(copy, std::vector<double>{0.0, 1e-5}, th, rng);
  EXPECT_EQ(copy.size(), 2u);
  EXPECT_EQ(rep.cloned + rep.split + rep.pruned, 0u);

  copy = obj;
  rep = densify_and_prune(copy, std::vector<double>{1e-3, 0.0}, th, rng);
  EXPECT_EQ(copy.size(), 3u);
  EXPECT_EQ(rep.cloned, 1u);
  EXPECT_EQ(rep.origin, (std::vector<long>{0, 1, -1}));

  copy = obj;
  rep = densify_and_prune(copy, std::vector<double>{0.0, 1e-3}, th, rng);
  EXPECT_EQ(copy.size(), 3u);
  EXPECT_EQ(rep.split, 1u);
  for (std::size_t i = 1; i < 3; ++i) EXPECT_NEAR(std::exp(copy.gaussians[i].log_scale.x()), 3.0 / 1.6, 1e-12);

  copy = obj;
  copy.gaussians[0].opacity_logit = logit(0.001);
  rep = densify_and_prune(copy, std::vector<double>{0.0, 0.0}, th, rng);
  EXPECT_EQ(copy.size(), 1u);
  EXPECT_EQ(rep.pruned, 1u);
  EXPECT_EQ(rep.origin, (std::vector<long>{1}));
}

TEST(Train, ZeroIterationsReturnsInitialization) {
  std::vector<ZoomedFrame> frames(3, solid_frame(16, 0.5, true));
  const std::vector<Vec3> init{Vec3(0, 0, 0), Vec3(3, 0, 0), Vec3(0, 4, 0)};
  TrainConfig cfg;
  cfg.iterations = 0;
  const auto obj = train(frames, init, cfg);
  ASSERT_EQ(obj.size(), 3u);
  EXPECT_EQ(obj.gaussians[1].mean, init[1]);
  EXPECT_NEAR(obj.gaussians[0].opacity(), 0.1, 1e-12);
  // mean nearest-neighbour distance: (3 + 3 + 4) / 3
  EXPECT_NEAR(std::exp(obj.gaussians[0].log_scale.x()), 10.0 / 3.0, 1e-12);
  EXPECT_THROW(train(std::vector<ZoomedFrame>(2, frames[0]), init, cfg), ValidationError);
  EXPECT_THROW(train(frames, std::vector<Vec3>{}, cfg), ValidationError);
}

namespace {

struct FlatSquare {
  std::vector<ZoomedFrame> frames;
  std::vector<Vec3> init;
};

FlatSquare flat_square() {
  FlatSquare s;
  ZoomedFrame z;
  z.camera = {ProjectionKind::perspective, 60, 60, 31.5, 31.5, 64, 64};
  z.pose.translation = Vec3(0, 0, 100);
  z.image = ImageBuffer(64, 64, 3);
  z.mask = Mask(64, 64);
  for (int y = 16; y < 48; ++y)
    for (int x = 16; x < 48; ++x) {
      z.mask.set(x, y, true);
      z.image.at(x, y, 0) = 0.8;
      z.image.at(x, y, 1) = 0.4;
      z.image.at(x, y, 2) = 0.2;
    }
  s.frames.assign(3, z);
  for (int j = 0; j < 6; ++j)
    for (int i = 0; i < 6; ++i) s.init.push_back(Vec3(-25 + 10 * i, -25 + 10 * j, 0));
  return s;
}

}  // namespace

TEST(Train, FlatSquareLossDecreasesPerWindow) {
  const auto sq = flat_square();
  TrainConfig cfg;
  cfg.iterations = 500;
  cfg.densify_until = 300;
  cfg.densify_from = 100;
  cfg.opacity_reset_interval = 1000;
  std::vector<double> window(5, 0.0);
  TrainHooks hooks;
  hooks.on_step = [&](const TrainEvent& e) { window[(e.step - 1) / 100] += e.loss.total / 100; };
  const auto obj = train(sq.frames, sq.init, cfg, hooks);
  for (int w = 1; w < 5; ++w) EXPECT_LT(window[w], window[w - 1]) << "window " << w;
  for (const auto& g : obj.gaussians) EXPECT_NEAR(g.rotation.norm(), 1.0, 1e-6);
}

TEST(Train, OpacityResetAndDeterminism) {
  const auto sq = flat_square();
  TrainConfig cfg;
  cfg.iterations = 160;
  cfg.densify_until = 120;
  cfg.densify_from = 20;
  cfg.densify_interval = 20;
  cfg.opacity_reset_interval = 50;
  cfg.seed = 9;
  double max_after_reset = 0;
  TrainHooks hooks;
  hooks.on_step = [&](const TrainEvent& e) {
    if (e.step % 50 == 0 && e.step <= 120)
      for (const auto& g : e.object->gaussians) max_after_reset = std::max(max_after_reset, g.opacity());
  };
  const auto a = train(sq.frames, sq.init, cfg, hooks);
  EXPECT_LE(max_after_reset, 0.01 + 1e-6);
  const auto b = train(sq.frames, sq.init, cfg);
  EXPECT_EQ(encode_gaussians(a), encode_gaussians(b));
}
