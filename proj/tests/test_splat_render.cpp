#include "gfree/splat_render.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>
#include <omp.h>

#include <algorithm>
#include <random>

using namespace gfree;

namespace {

CameraModel axis_camera(ProjectionKind kind = ProjectionKind::perspective, int size = 33, double f = 60) {
  CameraModel c;
  c.kind = kind;
  c.fx = c.fy = f;
  c.cx = c.cy = (size - 1) / 2.0;
  c.width = c.height = size;
  return c;
}

Pose at_distance(double z) {
  Pose p;
  p.translation = Vec3(0, 0, z);
  return p;
}

Gaussian isotropic(const Vec3& mean, double scale, double opacity) {
  Gaussian g;
  g.mean = mean;
  g.log_scale = Vec3::Constant(std::log(scale));
  g.opacity_logit = logit(opacity);
  return g;
}

GaussianObject random_object(std::mt19937_64& rng, int count, int channels) {
  std::uniform_real_distribution<double> u(0, 1);
  std::normal_distribution<double> n;
  GaussianObject obj;
  obj.channels = channels;
  for (int i = 0; i < count; ++i) {
    Gaussian g;
    g.mean = Vec3(40 * (u(rng) - 0.5), 40 * (u(rng) - 0.5), 40 * (u(rng) - 0.5));
    for (int k = 0; k < 3; ++k) g.log_scale[k] = std::log(2 + 6 * u(rng));
    g.rotation = Eigen::Vector4d(n(rng), n(rng), n(rng), n(rng)).normalized();
    g.opacity_logit = logit(0.05 + 0.9 * u(rng));
    for (int c = 0; c < channels; ++c)
      for (int k = 0; k < kShCoeffs; ++k) g.sh_at(c, k) = 0.4 * (u(rng) - 0.5);
    obj.gaussians.push_back(g);
  }
  return obj;
}

/// Per-pixel compositing written directly from the definition.
RenderOutput reference_render(const GaussianObject& obj, const Pose& pose, const CameraModel& cam, double bg) {
  struct Entry {
    double depth;
    std::size_t index;
    Vec2 mean;
    Mat2 conic;
    double opacity;
    std::array<double, 3> color;
  };
  std::vector<Entry> entries;
  for (std::size_t i = 0; i < obj.size(); ++i) {
    const auto& g = obj.gaussians[i];
    const auto pg = project_gaussian(g, pose, cam);
    if (!pg) continue;
    Entry e{pg->depth, i, pg->mean2d, pg->cov2d.inverse(), g.opacity(), {}};
    const Vec3 dir = (g.mean - pose.camera_center()).normalized();
    for (int c = 0; c < obj.channels; ++c)
      e.color[c] = eval_sh(std::span<const double>(&g.sh[c * kShCoeffs], kShCoeffs), dir, obj.sh_degree);
    entries.push_back(e);
  }
  std::sort(entries.begin(), entries.end(),
            [](const Entry& a, const Entry& b) { return a.depth != b.depth ? a.depth < b.depth : a.index < b.index; });
  RenderOutput out{ImageBuffer(cam.width, cam.height, obj.channels),
                   std::vector<double>(cam.width * cam.height, 0.0), std::vector<double>(cam.width * cam.height, 0.0)};
  for (int y = 0; y < cam.height; ++y)
    for (int x = 0; x < cam.width; ++x) {
      double T = 1, dn = 0;
      std::array<double, 3> col{};
      for (const auto& e : entries) {
        const Vec2 d = Vec2(x, y) - e.mean;
        const double a = e.opacity * std::exp(-0.5 * d.dot(e.conic * d));
        if (a < 1.0 / 255.0) continue;
        for (int c = 0; c < obj.channels; ++c) col[c] += a * T * e.color[c];
        dn += a * T * e.depth;
        T *= 1 - a;
      }
      const std::size_t p = static_cast<std::size_t>(y) * cam.width + x;
      for (int c = 0; c < obj.channels; ++c) out.rgb.data[p * obj.channels + c] = std::clamp(col[c] + T * bg, 0.0, 1.0);
      out.alpha[p] = 1 - T;
      out.depth[p] = 1 - T > 0 ? dn / std::max(1 - T, 1e-10) : 0.0;
    }
  return out;
}

double max_abs_diff(const std::vector<double>& a, const std::vector<double>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace

TEST(EvalSh, Examples) {
  std::array<double, 9> c{};
  const Vec3 d = Vec3(0.3, -0.4, 0.5).normalized();
  EXPECT_DOUBLE_EQ(eval_sh(c, d, 2), 0.5);
  c[0] = 0.5 / 0.28209479177387814;
  EXPECT_NEAR(eval_sh(c, d, 0), 1.0, 1e-12);
  std::array<double, 9> odd{};
  odd[3] = 0.7;  // -C1 * x
  const Vec3 flipped(-d.x(), d.y(), d.z());
  EXPECT_NEAR(eval_sh(odd, d, 1) - 0.5, -(eval_sh(odd, flipped, 1) - 0.5), 1e-15);
  EXPECT_THROW(eval_sh(c, d, 3), ValidationError);
  EXPECT_THROW(eval_sh(c, Vec3(1, 1, 0), 1), ValidationError);
}

TEST(ProjectGaussian, IsotropicOnAxis) {
  for (auto kind : {ProjectionKind::perspective, ProjectionKind::equidistant}) {
    const auto cam = axis_camera(kind);
    const auto pg = project_gaussian(isotropic(Vec3::Zero(), 3.0, 0.5), at_distance(200), cam);
    ASSERT_TRUE(pg);
    EXPECT_NEAR(pg->mean2d.x(), cam.cx, 1e-12);
    EXPECT_NEAR(pg->mean2d.y(), cam.cy, 1e-12);
    EXPECT_NEAR(pg->cov2d(0, 0), pg->cov2d(1, 1), 1e-9);
    EXPECT_NEAR(pg->cov2d(0, 1), 0.0, 1e-12);
    EXPECT_NEAR(pg->cov2d(0, 0), std::pow(3.0 * 60 / 200, 2) + 0.3, 1e-9);
    EXPECT_DOUBLE_EQ(pg->depth, 200.0);
  }
  EXPECT_FALSE(project_gaussian(isotropic(Vec3(0, 0, -300), 1, 0.5), at_distance(200), axis_camera()));
}

TEST(ProjectGaussian, FloorAndDepthConventions) {
  std::mt19937_64 rng(4);
  const auto obj = random_object(rng, 50, 3);
  for (auto kind : {ProjectionKind::perspective, ProjectionKind::equidistant}) {
    const auto cam = axis_camera(kind);
    for (const auto& g : obj.gaussians) {
      const auto pg = project_gaussian(g, at_distance(150), cam);
      ASSERT_TRUE(pg);
      Eigen::SelfAdjointEigenSolver<Mat2> es(pg->cov2d);
      EXPECT_GE(es.eigenvalues().minCoeff(), 0.3 - 1e-12);
      const Vec3 p = g.mean + Vec3(0, 0, 150);
      EXPECT_NEAR(pg->depth, kind == ProjectionKind::perspective ? p.z() : p.norm(), 1e-9);
    }
  }
}

TEST(ProjectGaussian, CovarianceMatchesFiniteDifferenceJacobian) {
  // cov2d - floor == J W Sigma W^T J^T with J from central differences.
  std::mt19937_64 rng(12);
  const auto obj = random_object(rng, 10, 3);
  for (auto kind : {ProjectionKind::perspective, ProjectionKind::equidistant}) {
    const auto cam = axis_camera(kind);
    Pose pose = at_distance(120);
    pose.rotation = rotation_about(Vec3(1, 2, 3).normalized(), 0.4);
    double worst = 0;
    for (const auto& g : obj.gaussians) {
      const Vec3 p = pose.apply(g.mean);
      Eigen::Matrix<double, 2, 3> J;
      for (int k = 0; k < 3; ++k) {
        Vec3 a = p, b = p;
        a[k] += 1e-4;
        b[k] -= 1e-4;
        J.col(k) = (*project(a, cam) - *project(b, cam)) / 2e-4;
      }
      const Mat2 expect = J * pose.rotation * g.covariance() * pose.rotation.transpose() * J.transpose();
      const Mat2 got = project_gaussian(g, pose, cam)->cov2d - 0.3 * Mat2::Identity();
      worst = std::max(worst, (got - expect).cwiseAbs().maxCoeff() / expect.cwiseAbs().maxCoeff());
    }
    EXPECT_LT(worst, 1e-4);
  }
}

TEST(Rasterize, EmptyObject) {
  GaussianObject obj;
  const auto out = rasterize(obj, at_distance(100), axis_camera(), 0.25);
  for (double v : out.rgb.data) EXPECT_EQ(v, 0.25);
  for (double v : out.alpha) EXPECT_EQ(v, 0.0);
  for (double v : out.depth) EXPECT_EQ(v, 0.0);
}

TEST(Rasterize, SingleAndDoubleSplatClosedForm) {
  GaussianObject obj;
  obj.gaussians.push_back(isotropic(Vec3::Zero(), 5.0, 0.9));
  const auto cam = axis_camera();
  auto out = rasterize(obj, at_distance(200), cam);
  const std::size_t center = 16 * 33 + 16;
  EXPECT_NEAR(out.alpha[center], 0.9, 1e-3);
  EXPECT_NEAR(out.depth[center], 200.0, 1e-9);
  EXPECT_NEAR(out.rgb.data[center * 3], 0.9 * 0.5, 1e-3);

  obj.gaussians = {isotropic(Vec3::Zero(), 5.0, 0.5), isotropic(Vec3(0, 0, 30), 5.0, 0.5)};
  out = rasterize(obj, at_distance(200), cam);
  EXPECT_NEAR(out.alpha[center], 0.75, 1e-3);
}

TEST(Rasterize, MatchesPerPixelReference) {
  std::mt19937_64 rng(17);
  for (int trial = 0; trial < 12; ++trial) {
    const int channels = trial % 2 ? 1 : 3;
    const auto obj = random_object(rng, 1 + static_cast<int>(rng() % 32), channels);
    for (auto kind : {ProjectionKind::perspective, ProjectionKind::equidistant}) {
      auto cam = axis_camera(kind, 16, 30);
      Pose pose = at_distance(120);
      pose.rotation = rotation_about(Vec3(0.3, 1, -0.2).normalized(), 0.3 * trial);
      const auto got = rasterize(obj, pose, cam, 0.1);
      const auto ref = reference_render(obj, pose, cam, 0.1);
      EXPECT_LT(max_abs_diff(got.alpha, ref.alpha), 1e-6);
      EXPECT_LT(max_abs_diff(got.rgb.data, ref.rgb.data), 1e-6);
      EXPECT_LT(max_abs_diff(got.depth, ref.depth), 1e-6);
    }
  }
}

TEST(Rasterize, OrderAndScheduleIndependent) {
  std::mt19937_64 rng(23);
  auto obj = random_object(rng, 200, 3);
  const auto cam = axis_camera(ProjectionKind::perspective, 64, 90);
  const auto base = rasterize(obj, at_distance(150), cam);
  std::shuffle(obj.gaussians.begin(), obj.gaussians.end(), rng);
  const auto perm = rasterize(obj, at_distance(150), cam);
  EXPECT_LT(max_abs_diff(base.rgb.data, perm.rgb.data), 1e-6);
  EXPECT_LT(max_abs_diff(base.alpha, perm.alpha), 1e-6);
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto serial = rasterize(obj, at_distance(150), cam);
  omp_set_num_threads(threads);
  const auto parallel = rasterize(obj, at_distance(150), cam);
  EXPECT_EQ(serial.rgb.data, parallel.rgb.data);
  EXPECT_EQ(serial.alpha, parallel.alpha);
}

TEST(Rasterize, NarrowFovCameraKindsAgree) {
  std::mt19937_64 rng(31);
  const auto obj = random_object(rng, 60, 3);
  // 48 px at f = 1200 keeps theta below 0.02 rad.
  const auto p = rasterize(obj, at_distance(3000), axis_camera(ProjectionKind::perspective, 48, 1200));
  const auto e = rasterize(obj, at_distance(3000), axis_camera(ProjectionKind::equidistant, 48, 1200));
  EXPECT_GT(psnr(p.rgb, e.rgb), 40.0);
}

TEST(Backward, MatchesFiniteDifferences) {
  for (std::uint64_t seed = 100; seed < 104; ++seed) {
    const auto scene = gradcheck::random_scene(seed);
    const auto r = gradcheck::check(scene);
    EXPECT_GT(r.checked, 100u);
    EXPECT_LT(r.max_rel_error, 1e-3) << "seed " << seed;
  }
}

TEST(Backward, ScheduleIndependent) {
  const auto scene = gradcheck::random_scene(7, 40, 64);
  const int threads = omp_get_max_threads();
  omp_set_num_threads(1);
  const auto a = gradients(scene.obj, scene.target);
  omp_set_num_threads(threads);
  const auto b = gradients(scene.obj, scene.target);
  for (std::size_t i = 0; i < scene.obj.size(); ++i) {
    EXPECT_EQ(a.grads.params[i].mean, b.grads.params[i].mean);
    EXPECT_EQ(a.grads.params[i].sh, b.grads.params[i].sh);
    EXPECT_EQ(a.grads.params[i].opacity_logit, b.grads.params[i].opacity_logit);
  }
}

TEST(GaussianFile, RoundTrip) {
  std::mt19937_64 rng(2);
  for (int channels : {1, 3}) {
    auto obj = random_object(rng, 17, channels);
    obj.object_id = 42;
    for (auto& g : obj.gaussians) {
      g.mean = g.mean.cast<float>().cast<double>();
      g.log_scale = g.log_scale.cast<float>().cast<double>();
      g.rotation = g.rotation.cast<float>().cast<double>();
      g.opacity_logit = static_cast<float>(g.opacity_logit);
      for (auto& v : g.sh) v = static_cast<float>(v);
      if (channels == 1) std::fill(g.sh.begin() + kShCoeffs, g.sh.end(), 0.0);
    }
    const auto bytes = encode_gaussians(obj);
    EXPECT_EQ(bytes.size(), 8u + 16u + obj.size() * 4u * (11 + 9 * channels));
    const auto back = decode_gaussians(bytes);
    EXPECT_EQ(back.object_id, 42);
    EXPECT_EQ(back.channels, channels);
    ASSERT_EQ(back.size(), obj.size());
    for (std::size_t i = 0; i < obj.size(); ++i) {
      EXPECT_EQ(back.gaussians[i].mean, obj.gaussians[i].mean);
      EXPECT_EQ(back.gaussians[i].sh, obj.gaussians[i].sh);
      EXPECT_EQ(back.gaussians[i].opacity_logit, obj.gaussians[i].opacity_logit);
    }
    EXPECT_EQ(encode_gaussians(back), bytes);
    auto bad = bytes;
    bad[0] = 'X';
    EXPECT_THROW(decode_gaussians(bad), FormatError);
    bad = bytes;
    bad.resize(bad.size() - 3);
    EXPECT_THROW(decode_gaussians(bad), FormatError);
  }
}
