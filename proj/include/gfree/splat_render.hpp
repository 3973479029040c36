#pragma once

// Gaussian splatting: EWA projection of 3D Gaussians under perspective or
// equidistant cameras, depth-sorted front-to-back compositing, and the
// matching backward pass used by reconstruction.

#include "gfree/detail/binary.hpp"
#include "gfree/detail/dual.hpp"
#include "gfree/errors.hpp"
#include "gfree/file_util.hpp"
#include "gfree/geometry.hpp"
#include "gfree/image.hpp"
#include "gfree/sh.hpp"

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <vector>

namespace gfree {

inline constexpr double kCovarianceFloor = 0.3;     // px^2 added to every 2D covariance
inline constexpr double kAlphaCutoff = 1.0 / 255.0;  // splat contributions below this are skipped
inline constexpr int kMaxChannels = 3;
inline constexpr int kTileSize = 16;
inline constexpr double kTransmittanceStop = 1e-7;  // a pixel stops compositing once T drops below this

inline double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }
inline double logit(double p) { return std::log(p / (1.0 - p)); }

/// One anisotropic 3D Gaussian. The same layout doubles as its gradient.
struct Gaussian {
  Vec3 mean = Vec3::Zero();
  Vec3 log_scale = Vec3::Zero();
  Eigen::Vector4d rotation{1.0, 0.0, 0.0, 0.0};  // quaternion (w, x, y, z)
  double opacity_logit = 0.0;
  std::array<double, kShCoeffs * kMaxChannels> sh{};  // sh[c * 9 + k]

  [[nodiscard]] double opacity() const { return sigmoid(opacity_logit); }
  double& sh_at(int channel, int k) { return sh[channel * kShCoeffs + k]; }
  [[nodiscard]] double sh_at(int channel, int k) const { return sh[channel * kShCoeffs + k]; }

  [[nodiscard]] Mat3 rotation_matrix() const {
    const Eigen::Vector4d q = rotation.normalized();
    return Eigen::Quaterniond(q[0], q[1], q[2], q[3]).toRotationMatrix();
  }
  [[nodiscard]] Mat3 covariance() const {
    const Mat3 M = rotation_matrix() * log_scale.array().exp().matrix().asDiagonal();
    return M * M.transpose();
  }

  static Gaussian zero() {
    Gaussian g;
    g.rotation.setZero();
    return g;
  }

  /// Visits (scalar, parameter group) pairs in a fixed order.
  template <class Fn>
  void for_each_param(int channels, Fn&& fn) {
    for (int i = 0; i < 3; ++i) fn(mean[i], 0);
    for (int i = 0; i < 3; ++i) fn(log_scale[i], 1);
    for (int i = 0; i < 4; ++i) fn(rotation[i], 2);
    fn(opacity_logit, 3);
    for (int c = 0; c < channels; ++c)
      for (int k = 0; k < kShCoeffs; ++k) fn(sh_at(c, k), 4);
  }
};

enum class ParamGroup { mean = 0, scale = 1, rotation = 2, opacity = 3, sh = 4 };

struct GaussianObject {
  std::vector<Gaussian> gaussians;
  int channels = 3;
  int object_id = 0;
  int sh_degree = kMaxShDegree;

  [[nodiscard]] std::size_t size() const { return gaussians.size(); }
};

struct RenderOutput {
  ImageBuffer rgb;
  std::vector<double> depth;  // mm, 0 where alpha == 0
  std::vector<double> alpha;  // [0, 1]

  [[nodiscard]] Mask alpha_mask(double threshold = 0.5) const {
    Mask m(rgb.width, rgb.height);
    for (std::size_t i = 0; i < alpha.size(); ++i) m.data[i] = alpha[i] > threshold ? 1 : 0;
    return m;
  }
};

/// Screen-space footprint of one Gaussian.
struct ProjectedGaussian {
  Vec2 mean2d;
  Mat2 cov2d;
  double depth = 0.0;
};

namespace detail {

template <class T>
Eigen::Matrix<T, 3, 3> quaternion_matrix(const Eigen::Matrix<T, 4, 1>& q_raw) {
  using std::sqrt;
  const T n = sqrt(q_raw.squaredNorm());
  const T w = q_raw[0] / n, x = q_raw[1] / n, y = q_raw[2] / n, z = q_raw[3] / n;
  Eigen::Matrix<T, 3, 3> R;
  R << 1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y),
       2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x),
       2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y);
  return R;
}

template <class T>
struct SplatProjection {
  Eigen::Matrix<T, 2, 1> mean2d;
  Eigen::Matrix<T, 2, 2> cov2d;
  T depth;
  Eigen::Matrix<T, 3, 1> view_dir;  // object frame, camera center -> mean
};

/// EWA projection: cov2d = J W Sigma W^T J^T + floor * I.
template <class T>
std::optional<SplatProjection<T>> project_splat(const Eigen::Matrix<T, 3, 1>& mean,
                                                const Eigen::Matrix<T, 3, 1>& log_scale,
                                                const Eigen::Matrix<T, 4, 1>& quat, const Pose& pose,
                                                const CameraModel& cam) {
  using std::exp;
  using std::sqrt;
  const Eigen::Matrix<T, 3, 3> W = pose.rotation.cast<T>();
  const Eigen::Matrix<T, 3, 1> p = W * mean + pose.translation.cast<T>();
  auto px = project<T>(p, cam);
  if (!px) return std::nullopt;
  const Eigen::Matrix<T, 2, 3> J = projection_jacobian<T>(p, cam);
  Eigen::Matrix<T, 3, 3> M = quaternion_matrix<T>(quat);
  for (int c = 0; c < 3; ++c) {
    const T s = exp(log_scale[c]);
    for (int r = 0; r < 3; ++r) M(r, c) = M(r, c) * s;
  }
  const Eigen::Matrix<T, 2, 3> JW = J * W;
  const Eigen::Matrix<T, 2, 3> A = JW * M;
  Eigen::Matrix<T, 2, 2> cov = A * A.transpose();
  cov(0, 0) = cov(0, 0) + kCovarianceFloor;
  cov(1, 1) = cov(1, 1) + kCovarianceFloor;
  const Eigen::Matrix<T, 3, 1> offset = mean - pose.camera_center().cast<T>();
  const T len = sqrt(offset.squaredNorm());
  return SplatProjection<T>{*px, cov, projection_depth<T>(p, cam), offset / len};
}

/// Per-Gaussian data the compositor needs.
struct Splat {
  std::size_t index = 0;
  double mx = 0, my = 0;
  double ca = 0, cb = 0, cc = 0;  // conic = inverse 2D covariance [[ca, cb], [cb, cc]]
  double opacity = 0;
  double min_power = 0;  // exponent below which alpha < kAlphaCutoff
  double depth = 0;
  std::array<double, kMaxChannels> color{};
  std::array<double, kShCoeffs> basis{};
  int x0 = 0, x1 = -1, y0 = 0, y1 = -1;  // inclusive pixel rect where alpha may reach the cutoff
  // d[mean2d(2), conic(3), color(channels)] / d[mean(3), log_scale(3), quat(4)]
  Eigen::Matrix<double, 5 + kMaxChannels, 10> jac = Eigen::Matrix<double, 5 + kMaxChannels, 10>::Zero();
};

/// The fields compositing reads, packed per tile entry.
struct TileSplat {
  double mx, my, ca, cb, cc, opacity, min_power, depth;
  std::array<double, kMaxChannels> color;
  int x0, x1, y0, y1;
};

inline bool rect_for(Splat& s, const CameraModel& cam, double cov_xx, double cov_yy) {
  const double level = 255.0 * s.opacity;
  if (level <= 1.0) return false;
  const double m = std::sqrt(2.0 * std::log(level));
  // Small outward margin: the rect only accelerates, the cutoff test decides.
  const double rx = m * std::sqrt(cov_xx) * (1.0 + 1e-9) + 1e-9, ry = m * std::sqrt(cov_yy) * (1.0 + 1e-9) + 1e-9;
  const double fx0 = std::ceil(s.mx - rx), fx1 = std::floor(s.mx + rx);
  const double fy0 = std::ceil(s.my - ry), fy1 = std::floor(s.my + ry);
  if (fx1 < 0 || fy1 < 0 || fx0 > cam.width - 1 || fy0 > cam.height - 1) return false;
  s.x0 = static_cast<int>(std::max(fx0, 0.0));
  s.y0 = static_cast<int>(std::max(fy0, 0.0));
  s.x1 = static_cast<int>(std::min(fx1, cam.width - 1.0));
  s.y1 = static_cast<int>(std::min(fy1, cam.height - 1.0));
  return true;
}

}  // namespace detail

/// Projects one Gaussian; nullopt means culled (mean not projectable).
inline std::optional<ProjectedGaussian> project_gaussian(const Gaussian& g, const Pose& pose, const CameraModel& cam) {
  auto sp = detail::project_splat<double>(g.mean, g.log_scale, g.rotation, pose, cam);
  if (!sp) return std::nullopt;
  return ProjectedGaussian{sp->mean2d, sp->cov2d, sp->depth};
}

/// Per-Gaussian gradients plus the accumulated screen-space mean gradient
/// (used by density control).
struct RenderGradients {
  std::vector<Gaussian> params;
  std::vector<Vec2> mean2d;
  std::vector<std::uint8_t> visible;
};

/// Per-pixel compositing record kept for the backward pass.
struct RasterHit {
  std::uint32_t slot;  // index into the tile list
  float alpha;
  float T;  // transmittance in front of this splat
};

/// Scratch buffers reused across backward passes.
struct RasterWorkspace {
  std::vector<std::vector<RasterHit>> hits;
  std::vector<std::vector<std::uint32_t>> offsets;  // per tile pixel, into hits
  std::vector<double> raw_color;                    // before clamping
};

/// One forward rasterization; keeps what the backward pass needs.
class Rasterizer {
 public:
  Rasterizer(const GaussianObject& obj, const Pose& pose, const CameraModel& cam, std::span<const double> background,
             bool with_gradients = false, RasterWorkspace* workspace = nullptr)
      : obj_(obj), pose_(pose), cam_(cam), with_gradients_(with_gradients), ws_(workspace ? workspace : &own_ws_) {
    cam.validate();
    if (obj.channels != 1 && obj.channels != 3) throw ValidationError("object must have 1 or 3 channels");
    if (static_cast<int>(background.size()) != obj.channels) throw ValidationError("background channel mismatch");
    std::copy(background.begin(), background.end(), background_.begin());
    prepare();
  }
  Rasterizer(const Rasterizer&) = delete;
  Rasterizer& operator=(const Rasterizer&) = delete;

  /// Composites every pixel. With gradient support the per-pixel hit lists
  /// are kept for backward().
  [[nodiscard]] RenderOutput render() const {
    RenderOutput out{ImageBuffer(cam_.width, cam_.height, obj_.channels),
                     std::vector<double>(static_cast<std::size_t>(cam_.width) * cam_.height, 0.0),
                     std::vector<double>(static_cast<std::size_t>(cam_.width) * cam_.height, 0.0)};
    const int C = obj_.channels;
    const auto tiles = static_cast<std::int64_t>(tile_lists_.size());
    if (with_gradients_) {
      ws_->hits.resize(tile_lists_.size());
      ws_->offsets.resize(tile_lists_.size());
      for (auto& h : ws_->hits) h.clear();
      for (auto& o : ws_->offsets) o.clear();
      ws_->raw_color.assign(out.rgb.data.size(), 0.0);
    }
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t t = 0; t < tiles; ++t) {
      const auto& list = tile_data_[static_cast<std::size_t>(t)];
      const int tx = static_cast<int>(t % tiles_x_) * kTileSize, ty = static_cast<int>(t / tiles_x_) * kTileSize;
      std::vector<RasterHit>* hits = with_gradients_ ? &ws_->hits[static_cast<std::size_t>(t)] : nullptr;
      std::vector<std::uint32_t>* offsets = with_gradients_ ? &ws_->offsets[static_cast<std::size_t>(t)] : nullptr;
      if (offsets) offsets->push_back(0);
      // Slots binned by kBlock x kBlock pixel blocks, still in depth order.
      constexpr int kBlock = 4, kBlocks = kTileSize / kBlock;
      thread_local std::array<std::vector<std::uint32_t>, kBlocks * kBlocks> blocks;
      for (auto& b : blocks) b.clear();
      for (std::uint32_t slot = 0; slot < list.size(); ++slot) {
        const auto& s = list[slot];
        const int bx0 = std::max(s.x0 - tx, 0) / kBlock, bx1 = std::min(s.x1 - tx, kTileSize - 1) / kBlock;
        const int by0 = std::max(s.y0 - ty, 0) / kBlock, by1 = std::min(s.y1 - ty, kTileSize - 1) / kBlock;
        for (int by = by0; by <= by1; ++by)
          for (int bx = bx0; bx <= bx1; ++bx) blocks[by * kBlocks + bx].push_back(slot);
      }
      for (int y = ty; y < std::min(ty + kTileSize, cam_.height); ++y) {
        for (int x = tx; x < std::min(tx + kTileSize, cam_.width); ++x) {
          double T = 1.0, dnum = 0.0;
          std::array<double, kMaxChannels> col{};
          for (const std::uint32_t slot : blocks[((y - ty) / kBlock) * kBlocks + (x - tx) / kBlock]) {
            const auto& s = list[slot];
            if (x < s.x0 || x > s.x1 || y < s.y0 || y > s.y1) continue;
            const double dx = x - s.mx, dy = y - s.my;
            const double power = -0.5 * (s.ca * dx * dx + 2.0 * s.cb * dx * dy + s.cc * dy * dy);
            if (power < s.min_power) continue;
            const double gauss = std::exp(power);
            const double a = s.opacity * gauss;
            if (a < kAlphaCutoff) continue;
            if (hits) hits->push_back({slot, static_cast<float>(a), static_cast<float>(T)});
            const double w = a * T;
            for (int c = 0; c < C; ++c) col[c] += w * s.color[c];
            dnum += w * s.depth;
            T *= 1.0 - a;
            if (T < kTransmittanceStop) break;
          }
          if (offsets) offsets->push_back(static_cast<std::uint32_t>(hits->size()));
          const std::size_t p = static_cast<std::size_t>(y) * cam_.width + x;
          for (int c = 0; c < C; ++c) {
            const double v = col[c] + T * background_[c];
            if (with_gradients_) ws_->raw_color[p * C + c] = v;
            out.rgb.data[p * C + c] = std::clamp(v, 0.0, 1.0);
          }
          const double alpha = 1.0 - T;
          out.alpha[p] = alpha;
          out.depth[p] = alpha > 0.0 ? dnum / std::max(alpha, 1e-10) : 0.0;
        }
      }
    }
    rendered_ = true;
    return out;
  }

  /// Backpropagates dL/d(rgb) and dL/d(alpha) to every Gaussian parameter.
  /// Requires construction with with_gradients = true.
  [[nodiscard]] RenderGradients backward(const ImageBuffer& grad_rgb, std::span<const double> grad_alpha) const {
    if (!with_gradients_) throw ValidationError("Rasterizer was built without gradient support");
    const int C = obj_.channels;
    const std::size_t npx = static_cast<std::size_t>(cam_.width) * cam_.height;
    if (grad_rgb.data.size() != npx * C || grad_alpha.size() != npx) throw ValidationError("gradient size mismatch");
    if (!rendered_) (void)render();

    // Splat-space gradient per tile entry: mean2d(2), conic(3), opacity(1), color(C).
    constexpr int kStride = 6 + kMaxChannels;
    std::vector<std::vector<double>> tile_grads(tile_lists_.size());
    const auto tiles = static_cast<std::int64_t>(tile_lists_.size());
#pragma omp parallel for schedule(dynamic)
    for (std::int64_t t = 0; t < tiles; ++t) {
      const auto& list = tile_lists_[static_cast<std::size_t>(t)];
      auto& g = tile_grads[static_cast<std::size_t>(t)];
      g.assign(list.size() * kStride, 0.0);
      if (list.empty()) continue;
      const auto& data = tile_data_[static_cast<std::size_t>(t)];
      const auto& hits = ws_->hits[static_cast<std::size_t>(t)];
      const auto& offsets = ws_->offsets[static_cast<std::size_t>(t)];
      const int tx = static_cast<int>(t % tiles_x_) * kTileSize, ty = static_cast<int>(t / tiles_x_) * kTileSize;
      std::size_t local = 0;
      for (int y = ty; y < std::min(ty + kTileSize, cam_.height); ++y) {
        for (int x = tx; x < std::min(tx + kTileSize, cam_.width); ++x, ++local) {
          const std::uint32_t h0 = offsets[local], h1 = offsets[local + 1];
          if (h0 == h1) continue;
          const std::size_t p = static_cast<std::size_t>(y) * cam_.width + x;
          std::array<double, kMaxChannels> gC{};
          for (int c = 0; c < C; ++c) {
            const double v = ws_->raw_color[p * C + c];
            gC[c] = (v < 0.0 || v > 1.0) ? 0.0 : grad_rgb.data[p * C + c];
          }
          const double gA = grad_alpha[p];
          std::array<double, kMaxChannels> behind{};
          for (int c = 0; c < C; ++c) behind[c] = background_[c];
          double behind_alpha = 0.0;
          for (std::uint32_t h = h1; h-- > h0;) {
            const RasterHit& hit = hits[h];
            const auto& s = data[hit.slot];
            const double dx = x - s.mx, dy = y - s.my;
            const double alpha = hit.alpha, T = hit.T;
            double d_alpha = gA * (1.0 - behind_alpha);
            for (int c = 0; c < C; ++c) d_alpha += gC[c] * (s.color[c] - behind[c]);
            d_alpha *= T;
            double* gs = &g[hit.slot * kStride];
            for (int c = 0; c < C; ++c) gs[6 + c] += alpha * T * gC[c];
            const double d_power = alpha * d_alpha;
            gs[0] += d_power * (s.ca * dx + s.cb * dy);
            gs[1] += d_power * (s.cb * dx + s.cc * dy);
            gs[2] += d_power * (-0.5 * dx * dx);
            gs[3] += d_power * (-dx * dy);
            gs[4] += d_power * (-0.5 * dy * dy);
            gs[5] += d_alpha * alpha / s.opacity;
            for (int c = 0; c < C; ++c) behind[c] = alpha * s.color[c] + (1.0 - alpha) * behind[c];
            behind_alpha = alpha + (1.0 - alpha) * behind_alpha;
          }
        }
      }
    }

    // Reduce in tile order so the result does not depend on the schedule.
    std::vector<std::array<double, kStride>> splat_grad(splats_.size());
    for (auto& a : splat_grad) a.fill(0.0);
    for (std::size_t t = 0; t < tile_lists_.size(); ++t) {
      const auto& list = tile_lists_[t];
      for (std::size_t slot = 0; slot < list.size(); ++slot)
        for (int k = 0; k < kStride; ++k) splat_grad[list[slot]][k] += tile_grads[t][slot * kStride + k];
    }

    RenderGradients out;
    out.params.assign(obj_.size(), Gaussian::zero());
    out.mean2d.assign(obj_.size(), Vec2::Zero());
    out.visible.assign(obj_.size(), 0);
    for (std::size_t si = 0; si < splats_.size(); ++si) {
      const auto& s = splats_[si];
      const auto& sg = splat_grad[si];
      auto& gp = out.params[s.index];
      out.visible[s.index] = 1;
      out.mean2d[s.index] = Vec2(sg[0], sg[1]);
      Eigen::Matrix<double, 5 + kMaxChannels, 1> upstream = Eigen::Matrix<double, 5 + kMaxChannels, 1>::Zero();
      for (int k = 0; k < 5; ++k) upstream[k] = sg[k];
      for (int c = 0; c < C; ++c) upstream[5 + c] = sg[6 + c];
      const Eigen::Matrix<double, 10, 1> geo = s.jac.transpose() * upstream;
      gp.mean = geo.segment<3>(0);
      gp.log_scale = geo.segment<3>(3);
      gp.rotation = geo.segment<4>(6);
      gp.opacity_logit = sg[5] * s.opacity * (1.0 - s.opacity);
      const int ncoef = sh_coeff_count(obj_.sh_degree);
      for (int c = 0; c < C; ++c)
        for (int k = 0; k < ncoef; ++k) gp.sh_at(c, k) = sg[6 + c] * s.basis[k];
    }
    return out;
  }

  [[nodiscard]] std::size_t visible_count() const { return splats_.size(); }

 private:
  void prepare() {
    const std::size_t n = obj_.size();
    std::vector<std::optional<detail::Splat>> staged(n);
    const auto count = static_cast<std::int64_t>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < count; ++i) staged[static_cast<std::size_t>(i)] = make_splat(static_cast<std::size_t>(i));
    for (auto& s : staged)
      if (s) splats_.push_back(std::move(*s));

    tiles_x_ = (cam_.width + kTileSize - 1) / kTileSize;
    const int tiles_y = (cam_.height + kTileSize - 1) / kTileSize;
    tile_lists_.assign(static_cast<std::size_t>(tiles_x_) * tiles_y, {});
    std::vector<std::uint32_t> order(splats_.size());
    std::iota(order.begin(), order.end(), 0u);
    std::sort(order.begin(), order.end(), [&](std::uint32_t a, std::uint32_t b) {
      if (splats_[a].depth != splats_[b].depth) return splats_[a].depth < splats_[b].depth;
      return splats_[a].index < splats_[b].index;
    });
    for (const std::uint32_t si : order) {
      const auto& s = splats_[si];
      for (int ty = s.y0 / kTileSize; ty <= s.y1 / kTileSize; ++ty)
        for (int tx = s.x0 / kTileSize; tx <= s.x1 / kTileSize; ++tx)
          tile_lists_[static_cast<std::size_t>(ty) * tiles_x_ + tx].push_back(si);
    }
    tile_data_.assign(tile_lists_.size(), {});
    for (std::size_t t = 0; t < tile_lists_.size(); ++t) {
      tile_data_[t].reserve(tile_lists_[t].size());
      for (const std::uint32_t si : tile_lists_[t]) {
        const auto& s = splats_[si];
        tile_data_[t].push_back({s.mx, s.my, s.ca, s.cb, s.cc, s.opacity, s.min_power, s.depth, s.color, s.x0, s.x1,
                                 s.y0, s.y1});
      }
    }
  }

  std::optional<detail::Splat> make_splat(std::size_t i) const {
    const Gaussian& g = obj_.gaussians[i];
    const double opacity = g.opacity();
    if (255.0 * opacity <= 1.0) return std::nullopt;
    detail::Splat s;
    s.index = i;
    s.opacity = opacity;
    s.min_power = std::log(kAlphaCutoff / opacity) - 1e-9;
    const int C = obj_.channels;
    const int ncoef = sh_coeff_count(obj_.sh_degree);
    Mat2 cov;
    if (with_gradients_) {
      using D = detail::Dual<10>;
      Eigen::Matrix<D, 3, 1> mean, log_scale;
      Eigen::Matrix<D, 4, 1> quat;
      for (int k = 0; k < 3; ++k) mean[k] = D::variable(g.mean[k], k);
      for (int k = 0; k < 3; ++k) log_scale[k] = D::variable(g.log_scale[k], 3 + k);
      for (int k = 0; k < 4; ++k) quat[k] = D::variable(g.rotation[k], 6 + k);
      auto sp = detail::project_splat<D>(mean, log_scale, quat, pose_, cam_);
      if (!sp) return std::nullopt;
      const D det = sp->cov2d(0, 0) * sp->cov2d(1, 1) - sp->cov2d(0, 1) * sp->cov2d(1, 0);
      const std::array<D, 5> out5 = {sp->mean2d.x(), sp->mean2d.y(), sp->cov2d(1, 1) / det,
                                     -sp->cov2d(0, 1) / det, sp->cov2d(0, 0) / det};
      for (int r = 0; r < 5; ++r)
        for (int k = 0; k < 10; ++k) s.jac(r, k) = out5[r].d[k];
      const auto basis = sh_basis<D>(sp->view_dir, obj_.sh_degree);
      for (int c = 0; c < C; ++c) {
        D col(0.5);
        for (int k = 0; k < ncoef; ++k) col += basis[k] * g.sh_at(c, k);
        s.color[c] = col.v;
        for (int k = 0; k < 10; ++k) s.jac(5 + c, k) = col.d[k];
      }
      for (int k = 0; k < kShCoeffs; ++k) s.basis[k] = basis[k].v;
      s.mx = out5[0].v;
      s.my = out5[1].v;
      s.ca = out5[2].v;
      s.cb = out5[3].v;
      s.cc = out5[4].v;
      s.depth = sp->depth.v;
      cov << sp->cov2d(0, 0).v, sp->cov2d(0, 1).v, sp->cov2d(1, 0).v, sp->cov2d(1, 1).v;
    } else {
      auto sp = detail::project_splat<double>(g.mean, g.log_scale, g.rotation, pose_, cam_);
      if (!sp) return std::nullopt;
      cov = sp->cov2d;
      const double det = cov.determinant();
      s.mx = sp->mean2d.x();
      s.my = sp->mean2d.y();
      s.ca = cov(1, 1) / det;
      s.cb = -cov(0, 1) / det;
      s.cc = cov(0, 0) / det;
      s.depth = sp->depth;
      const auto basis = sh_basis<double>(sp->view_dir, obj_.sh_degree);
      for (int c = 0; c < C; ++c) {
        double col = 0.5;
        for (int k = 0; k < ncoef; ++k) col += basis[k] * g.sh_at(c, k);
        s.color[c] = col;
      }
      std::copy(basis.begin(), basis.end(), s.basis.begin());
    }
    if (!std::isfinite(s.mx) || !std::isfinite(s.my) || !cov.allFinite()) return std::nullopt;
    if (!detail::rect_for(s, cam_, cov(0, 0), cov(1, 1))) return std::nullopt;
    return s;
  }

  const GaussianObject& obj_;
  Pose pose_;
  CameraModel cam_;
  bool with_gradients_;
  std::array<double, kMaxChannels> background_{};
  std::vector<detail::Splat> splats_;
  std::vector<std::vector<std::uint32_t>> tile_lists_;
  std::vector<std::vector<detail::TileSplat>> tile_data_;
  int tiles_x_ = 1;
  mutable bool rendered_ = false;
  RasterWorkspace own_ws_;
  RasterWorkspace* ws_;
};

/// Front-to-back alpha compositing of every Gaussian of `obj` seen through
/// `camera` at `pose`.
inline RenderOutput rasterize(const GaussianObject& obj, const Pose& pose, const CameraModel& camera,
                              std::span<const double> background) {
  return Rasterizer(obj, pose, camera, background).render();
}

inline RenderOutput rasterize(const GaussianObject& obj, const Pose& pose, const CameraModel& camera,
                              double background = 0.0) {
  const std::array<double, kMaxChannels> bg{background, background, background};
  return rasterize(obj, pose, camera, std::span<const double>(bg.data(), static_cast<std::size_t>(obj.channels)));
}

// --- GFGAUS01 persistence ---------------------------------------------------
//
// "GFGAUS01", u32 count, u32 channels, u32 object_id, u32 sh_degree, then per
// Gaussian: f32 mean[3], f32 log_scale[3], f32 quat[4] (w, x, y, z),
// f32 opacity_logit, f32 sh[channels][9]. Little-endian.

inline std::vector<std::uint8_t> encode_gaussians(const GaussianObject& obj) {
  detail::ByteWriter w;
  w.magic("GFGAUS01");
  w.u32(static_cast<std::uint32_t>(obj.size()));
  w.u32(static_cast<std::uint32_t>(obj.channels));
  w.u32(static_cast<std::uint32_t>(obj.object_id));
  w.u32(static_cast<std::uint32_t>(obj.sh_degree));
  for (const auto& g : obj.gaussians) {
    for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(g.mean[i]));
    for (int i = 0; i < 3; ++i) w.f32(static_cast<float>(g.log_scale[i]));
    for (int i = 0; i < 4; ++i) w.f32(static_cast<float>(g.rotation[i]));
    w.f32(static_cast<float>(g.opacity_logit));
    for (int c = 0; c < obj.channels; ++c)
      for (int k = 0; k < kShCoeffs; ++k) w.f32(static_cast<float>(g.sh_at(c, k)));
  }
  return w.bytes();
}

inline GaussianObject decode_gaussians(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("GFGAUS01");
  GaussianObject obj;
  const std::uint32_t n = r.u32();
  obj.channels = static_cast<int>(r.u32());
  obj.object_id = static_cast<int>(r.u32());
  obj.sh_degree = static_cast<int>(r.u32());
  if (obj.channels != 1 && obj.channels != 3) throw FormatError("GFGAUS01: bad channel count");
  if (obj.sh_degree < 0 || obj.sh_degree > kMaxShDegree) throw FormatError("GFGAUS01: bad SH degree");
  const std::size_t record = 4u * (11 + kShCoeffs * obj.channels);
  if (r.remaining() != record * n) throw FormatError("GFGAUS01: truncated or oversized payload");
  obj.gaussians.resize(n);
  for (auto& g : obj.gaussians) {
    for (int i = 0; i < 3; ++i) g.mean[i] = r.f32();
    for (int i = 0; i < 3; ++i) g.log_scale[i] = r.f32();
    for (int i = 0; i < 4; ++i) g.rotation[i] = r.f32();
    g.opacity_logit = r.f32();
    for (int c = 0; c < obj.channels; ++c)
      for (int k = 0; k < kShCoeffs; ++k) g.sh_at(c, k) = r.f32();
  }
  return obj;
}

inline void write_gaussians(const std::filesystem::path& path, const GaussianObject& obj) {
  write_file_bytes(path, encode_gaussians(obj));
}

inline GaussianObject read_gaussians(const std::filesystem::path& path) {
  return decode_gaussians(read_file_bytes(path));
}

}  // namespace gfree
