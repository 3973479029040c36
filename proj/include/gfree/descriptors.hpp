#pragma once

// Global + patch descriptors, the provider contract, deterministic
// synthetic/oracle providers and the GFDESC01 store format.

#include "gfree/crop.hpp"
#include "gfree/detail/binary.hpp"
#include "gfree/detail/random.hpp"
#include "gfree/errors.hpp"
#include "gfree/file_util.hpp"
#include "gfree/image.hpp"
#include "gfree/json_io.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <vector>

namespace gfree {

inline constexpr int kCropSize = 224;
inline constexpr int kPatchGrid = 16;
inline constexpr int kPatchSize = 14;
inline constexpr int kDefaultPatchCount = kPatchGrid * kPatchGrid;
inline constexpr int kDefaultDescriptorDim = 1024;

struct DescriptorPair {
  int dim = 0;
  int patch_count = 0;
  std::vector<float> global;               // dim
  std::vector<float> patches;              // patch_count x dim, row-major
  std::vector<std::uint8_t> foreground;    // patch_count flags
  std::string source_id;

  DescriptorPair() = default;
  DescriptorPair(int d, int n)
      : dim(d), patch_count(n), global(static_cast<std::size_t>(d), 0.0f),
        patches(static_cast<std::size_t>(d) * n, 0.0f), foreground(static_cast<std::size_t>(n), 0) {}

  [[nodiscard]] const float* patch(int k) const { return patches.data() + static_cast<std::size_t>(k) * dim; }
  float* patch(int k) { return patches.data() + static_cast<std::size_t>(k) * dim; }

  void validate() const {
    if (dim < 1 || patch_count < 1) throw ValidationError("descriptor dimensions must be >= 1");
    if (global.size() != static_cast<std::size_t>(dim) ||
        patches.size() != static_cast<std::size_t>(dim) * patch_count ||
        foreground.size() != static_cast<std::size_t>(patch_count))
      throw ValidationError("descriptor '" + source_id + "' has inconsistent sizes");
    auto finite = [](float v) { return std::isfinite(v); };
    if (!std::all_of(global.begin(), global.end(), finite) || !std::all_of(patches.begin(), patches.end(), finite))
      throw ValidationError("descriptor '" + source_id + "' has non-finite entries");
  }

  /// Payload equality; source_id is not stored in GFDESC01.
  [[nodiscard]] bool same_payload(const DescriptorPair& o) const {
    return dim == o.dim && patch_count == o.patch_count && foreground == o.foreground &&
           std::memcmp(global.data(), o.global.data(), global.size() * sizeof(float)) == 0 &&
           std::memcmp(patches.data(), o.patches.data(), patches.size() * sizeof(float)) == 0;
  }
};

/// Patch k covers the kPatchSize cell at grid position (k % grid, k / grid)
/// of a 224-pixel crop; a patch is foreground when any of its pixels is.
inline std::vector<std::uint8_t> foreground_patches(const Mask& crop_mask, int patch_count = kDefaultPatchCount) {
  const int grid = static_cast<int>(std::lround(std::sqrt(patch_count)));
  if (grid * grid != patch_count) throw ValidationError("patch count must be a square number");
  std::vector<std::uint8_t> fg(static_cast<std::size_t>(patch_count), 0);
  for (int y = 0; y < crop_mask.height; ++y)
    for (int x = 0; x < crop_mask.width; ++x)
      if (crop_mask.at(x, y)) {
        const int gx = std::min(grid - 1, x * grid / crop_mask.width);
        const int gy = std::min(grid - 1, y * grid / crop_mask.height);
        fg[static_cast<std::size_t>(gy) * grid + gx] = 1;
      }
  return fg;
}

// --- provider contract -------------------------------------------------------

struct DescribeInput {
  const ImageBuffer* crop = nullptr;  // kCropSize^2, background zero
  const Mask* mask = nullptr;         // kCropSize^2 foreground
  std::string source_id;
  std::optional<int> oracle_label;    // object id known by construction (fixtures only)
};

class DescriptorProvider {
 public:
  virtual ~DescriptorProvider() = default;
  [[nodiscard]] virtual std::string name() const = 0;
  [[nodiscard]] virtual int dim() const = 0;
  [[nodiscard]] virtual int patch_count() const = 0;
  [[nodiscard]] virtual bool thread_safe() const { return true; }
  [[nodiscard]] virtual DescriptorPair describe(const DescribeInput& in) const = 0;

  /// Same as describe() with the input checks every provider relies on.
  [[nodiscard]] DescriptorPair operator()(const DescribeInput& in) const {
    if (!in.crop || !in.mask) throw ValidationError("describe: missing crop or mask");
    if (in.crop->width != kCropSize || in.crop->height != kCropSize || in.mask->width != kCropSize ||
        in.mask->height != kCropSize)
      throw ValidationError("describe: crops must be " + std::to_string(kCropSize) + "x" + std::to_string(kCropSize));
    DescriptorPair d = describe(in);
    d.source_id = in.source_id;
    if (d.dim != dim() || d.patch_count != patch_count())
      throw ValidationError("provider '" + name() + "' returned mismatched descriptor dimensions");
    return d;
  }
};

namespace detail {

inline std::uint64_t crop_hash(const ImageBuffer& crop) {
  std::uint64_t h = fnv1a(std::string_view("gfree-crop"));
  for (double v : crop.data) {
    const auto q = static_cast<std::uint16_t>(std::lround(std::clamp(v, 0.0, 1.0) * 65535.0));
    const std::uint8_t b[2] = {static_cast<std::uint8_t>(q & 0xff), static_cast<std::uint8_t>(q >> 8)};
    h = fnv1a(std::span<const std::uint8_t>(b, 2), h);
  }
  return h;
}

inline void fill_gaussian_unit(Rng& rng, float* out, int dim) {
  double n2 = 0.0;
  std::vector<double> tmp(static_cast<std::size_t>(dim));
  for (auto& v : tmp) {
    v = rng.normal();
    n2 += v * v;
  }
  const double inv = 1.0 / std::sqrt(n2);
  for (int i = 0; i < dim; ++i) out[i] = static_cast<float>(tmp[i] * inv);
}

}  // namespace detail

/// Random-projection features: an 8x8 pooled thumbnail (global) and 2x2
/// pooled cells (patches) of the crop, each mapped through a fixed seeded
/// Gaussian matrix. A pure function of the crop values, so similar crops get
/// similar descriptors and identical crops identical ones.
class SyntheticProvider final : public DescriptorProvider {
 public:
  explicit SyntheticProvider(int dim = kDefaultDescriptorDim, int patch_count = kDefaultPatchCount,
                             std::uint64_t seed = 0)
      : dim_(dim), n_(patch_count), grid_(static_cast<int>(std::lround(std::sqrt(patch_count)))) {
    if (dim < 1 || grid_ * grid_ != patch_count || kCropSize % grid_ != 0)
      throw ValidationError("synthetic provider: unsupported (D, N_l)");
    detail::Rng rng(detail::mix(detail::fnv1a(std::string_view("gfree-synthetic")), seed));
    global_proj_.resize(static_cast<std::size_t>(kGlobalIn) * dim);
    for (auto& v : global_proj_) v = rng.normal() / std::sqrt(static_cast<double>(kGlobalIn));
    patch_proj_.resize(static_cast<std::size_t>(kPatchIn) * dim);
    for (auto& v : patch_proj_) v = rng.normal() / std::sqrt(static_cast<double>(kPatchIn));
  }

  [[nodiscard]] std::string name() const override { return "synthetic"; }
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] int patch_count() const override { return n_; }

  [[nodiscard]] DescriptorPair describe(const DescribeInput& in) const override {
    const ImageBuffer& img = *in.crop;
    DescriptorPair d(dim_, n_);
    d.foreground = foreground_patches(*in.mask, n_);
    // Channel-averaged intensities keep RGB and grayscale crops comparable.
    std::vector<double> gray(img.pixel_count());
    for (std::size_t i = 0; i < gray.size(); ++i) {
      double s = 0.0;
      for (int c = 0; c < img.channels; ++c) s += img.data[i * img.channels + c];
      gray[i] = s / img.channels;
    }
    auto pooled = [&](int x0, int y0, int w, int h) {
      double s = 0.0;
      for (int y = y0; y < y0 + h; ++y)
        for (int x = x0; x < x0 + w; ++x) s += gray[static_cast<std::size_t>(y) * img.width + x];
      return s / (w * h);
    };
    std::array<double, kGlobalIn> g{};
    const int gc = kCropSize / 8;
    for (int j = 0; j < 8; ++j)
      for (int i = 0; i < 8; ++i) g[j * 8 + i] = pooled(i * gc, j * gc, gc, gc);
    project(g.data(), kGlobalIn, global_proj_, d.global.data());
    const int cell = kCropSize / grid_;
    for (int k = 0; k < n_; ++k) {
      const int cx = (k % grid_) * cell, cy = (k / grid_) * cell;
      const int h1 = cell / 2, h2 = cell - cell / 2;
      const std::array<double, kPatchIn> p{pooled(cx, cy, h1, h1), pooled(cx + h1, cy, h2, h1),
                                           pooled(cx, cy + h1, h1, h2), pooled(cx + h1, cy + h1, h2, h2)};
      project(p.data(), kPatchIn, patch_proj_, d.patch(k));
    }
    return d;
  }

 private:
  static constexpr int kGlobalIn = 64;
  static constexpr int kPatchIn = 4;

  void project(const double* in, int n_in, const std::vector<double>& m, float* out) const {
    for (int o = 0; o < dim_; ++o) {
      double s = 0.0;
      for (int i = 0; i < n_in; ++i) s += in[i] * m[static_cast<std::size_t>(i) * dim_ + o];
      out[o] = static_cast<float>(s);
    }
  }

  int dim_;
  int n_;
  int grid_;
  std::vector<double> global_proj_;
  std::vector<double> patch_proj_;
};

/// Descriptors known by construction. A labeled crop of object o gets
/// e_(o mod D) plus noise of norm below kOracleNoise for the global vector
/// and for every patch; unlabeled crops get random unit vectors. Noise is
/// seeded by the crop values, the label and the seed.
class OracleProvider final : public DescriptorProvider {
 public:
  static constexpr double kOracleNoise = 0.05;

  explicit OracleProvider(int dim = kDefaultDescriptorDim, int patch_count = kDefaultPatchCount,
                          std::uint64_t seed = 0)
      : dim_(dim), n_(patch_count), seed_(seed) {
    if (dim < 1 || patch_count < 1) throw ValidationError("oracle provider: unsupported (D, N_l)");
  }

  [[nodiscard]] std::string name() const override { return "oracle"; }
  [[nodiscard]] int dim() const override { return dim_; }
  [[nodiscard]] int patch_count() const override { return n_; }

  [[nodiscard]] DescriptorPair describe(const DescribeInput& in) const override {
    DescriptorPair d(dim_, n_);
    d.foreground = grid_matches() ? foreground_patches(*in.mask, n_) : std::vector<std::uint8_t>(n_, 1);
    const std::int64_t label = in.oracle_label ? *in.oracle_label : -1;
    detail::Rng rng(detail::mix(detail::mix(detail::crop_hash(*in.crop), static_cast<std::uint64_t>(label)), seed_));
    auto fill = [&](float* out) {
      if (label < 0) {
        detail::fill_gaussian_unit(rng, out, dim_);
        return;
      }
      noise(rng, out);
      out[label % dim_] += 1.0f;
    };
    fill(d.global.data());
    for (int k = 0; k < n_; ++k) fill(d.patch(k));
    return d;
  }

 private:
  [[nodiscard]] bool grid_matches() const {
    const int g = static_cast<int>(std::lround(std::sqrt(n_)));
    return g * g == n_;
  }

  /// Per-component sigma kOracleNoise / sqrt(D), rescaled if the draw exceeds
  /// 0.99 * kOracleNoise in norm.
  void noise(detail::Rng& rng, float* out) const {
    const double sigma = kOracleNoise / std::sqrt(static_cast<double>(dim_));
    std::vector<double> v(static_cast<std::size_t>(dim_));
    double n2 = 0.0;
    for (auto& x : v) {
      x = sigma * rng.normal();
      n2 += x * x;
    }
    const double cap = 0.99 * kOracleNoise;
    const double scale = std::sqrt(n2) > cap ? cap / std::sqrt(n2) : 1.0;
    for (int i = 0; i < dim_; ++i) out[i] = static_cast<float>(v[i] * scale);
  }

  int dim_;
  int n_;
  std::uint64_t seed_;
};

/// Passes through to another provider and logs each call's source id and
/// input channel count.
class RecordingProvider final : public DescriptorProvider {
 public:
  struct Call {
    std::string source_id;
    int channels = 0;
  };

  explicit RecordingProvider(std::shared_ptr<const DescriptorProvider> inner) : inner_(std::move(inner)) {}

  [[nodiscard]] std::string name() const override { return inner_->name(); }
  [[nodiscard]] int dim() const override { return inner_->dim(); }
  [[nodiscard]] int patch_count() const override { return inner_->patch_count(); }
  [[nodiscard]] bool thread_safe() const override { return inner_->thread_safe(); }

  [[nodiscard]] DescriptorPair describe(const DescribeInput& in) const override {
    {
      std::lock_guard lock(mu_);
      calls_.push_back({in.source_id, in.crop->channels});
    }
    return inner_->describe(in);
  }

  [[nodiscard]] std::vector<Call> calls() const {
    std::lock_guard lock(mu_);
    return calls_;
  }

 private:
  std::shared_ptr<const DescriptorProvider> inner_;
  mutable std::mutex mu_;
  mutable std::vector<Call> calls_;
};

// --- GFDESC01 store -----------------------------------------------------------

enum class RecordKind : std::uint32_t { template_view = 0, proposal = 1 };

/// Templates: (template_view, object_id, template_index).
/// Proposals: (proposal, image_id, proposal index within the image).
struct RecordKey {
  RecordKind kind = RecordKind::template_view;
  std::uint32_t object_id = 0;
  std::uint32_t index = 0;

  auto operator<=>(const RecordKey&) const = default;
};

struct DescriptorStore {
  int dim = kDefaultDescriptorDim;
  int patch_count = kDefaultPatchCount;
  std::string provider;
  std::string model;
  std::string preprocessing;
  std::map<RecordKey, DescriptorPair> records;

  void add(const RecordKey& key, DescriptorPair d) {
    if (d.dim != dim || d.patch_count != patch_count)
      throw ValidationError("descriptor dimensions (" + std::to_string(d.dim) + ", " + std::to_string(d.patch_count) +
                            ") do not match store (" + std::to_string(dim) + ", " + std::to_string(patch_count) + ")");
    records[key] = std::move(d);
  }

  [[nodiscard]] const DescriptorPair& at(const RecordKey& key) const {
    auto it = records.find(key);
    if (it == records.end())
      throw ValidationError("descriptor store has no record (" + std::to_string(static_cast<std::uint32_t>(key.kind)) +
                            ", " + std::to_string(key.object_id) + ", " + std::to_string(key.index) + ")");
    return it->second;
  }

  /// Template descriptors of one object ordered by template index.
  [[nodiscard]] std::vector<const DescriptorPair*> templates_of(std::uint32_t object_id) const {
    std::vector<const DescriptorPair*> out;
    for (auto it = records.lower_bound({RecordKind::template_view, object_id, 0});
         it != records.end() && it->first.kind == RecordKind::template_view && it->first.object_id == object_id; ++it)
      out.push_back(&it->second);
    return out;
  }
};

inline std::vector<std::uint8_t> encode_store(const DescriptorStore& s) {
  if (s.dim < 1 || s.patch_count < 1) throw ValidationError("store dimensions must be >= 1");
  for (const auto& [key, d] : s.records) {
    if (d.dim != s.dim || d.patch_count != s.patch_count)
      throw ValidationError("refusing to write store: record dimensions differ from (D, N_l)");
    d.validate();
  }
  detail::ByteWriter w;
  w.magic("GFDESC01");
  w.u32(static_cast<std::uint32_t>(s.dim));
  w.u32(static_cast<std::uint32_t>(s.patch_count));
  w.u32(static_cast<std::uint32_t>(s.records.size()));
  const std::size_t bitmap = (static_cast<std::size_t>(s.patch_count) + 7) / 8;
  for (const auto& [key, d] : s.records) {
    w.u32(static_cast<std::uint32_t>(key.kind));
    w.u32(key.object_id);
    w.u32(key.index);
    for (float v : d.global) w.f32(v);
    for (float v : d.patches) w.f32(v);
    for (std::size_t b = 0; b < bitmap; ++b) {
      std::uint8_t byte = 0;
      for (int bit = 0; bit < 8; ++bit) {
        const std::size_t k = b * 8 + bit;
        if (k < d.foreground.size() && d.foreground[k]) byte |= static_cast<std::uint8_t>(1u << bit);
      }
      w.u8(byte);
    }
  }
  return w.bytes();
}

inline DescriptorStore decode_store(const std::vector<std::uint8_t>& bytes) {
  detail::ByteReader r(bytes);
  r.expect_magic("GFDESC01");
  DescriptorStore s;
  s.dim = static_cast<int>(r.u32());
  s.patch_count = static_cast<int>(r.u32());
  const std::uint32_t count = r.u32();
  if (s.dim < 1 || s.patch_count < 1) throw FormatError("GFDESC01: zero descriptor dimensions");
  const std::size_t bitmap = (static_cast<std::size_t>(s.patch_count) + 7) / 8;
  const std::size_t record_bytes =
      12 + 4 * (static_cast<std::size_t>(s.dim) * (1 + static_cast<std::size_t>(s.patch_count))) + bitmap;
  if (r.remaining() != record_bytes * count) throw FormatError("GFDESC01: size does not match record count");
  for (std::uint32_t i = 0; i < count; ++i) {
    RecordKey key;
    const std::uint32_t kind = r.u32();
    if (kind > 1) throw FormatError("GFDESC01: unknown record kind " + std::to_string(kind));
    key.kind = static_cast<RecordKind>(kind);
    key.object_id = r.u32();
    key.index = r.u32();
    DescriptorPair d(s.dim, s.patch_count);
    for (auto& v : d.global) v = r.f32();
    for (auto& v : d.patches) v = r.f32();
    for (std::size_t b = 0; b < bitmap; ++b) {
      const std::uint8_t byte = r.u8();
      for (int bit = 0; bit < 8; ++bit) {
        const std::size_t k = b * 8 + bit;
        if (k < d.foreground.size()) d.foreground[k] = (byte >> bit) & 1u;
      }
    }
    if (!s.records.emplace(key, std::move(d)).second) throw FormatError("GFDESC01: duplicate record key");
  }
  return s;
}

inline std::filesystem::path store_sidecar_path(const std::filesystem::path& path) {
  auto p = path;
  p += ".json";
  return p;
}

/// Writes `path` and the JSON sidecar `path`.json.
inline void write_store(const std::filesystem::path& path, const DescriptorStore& s) {
  write_file_bytes(path, encode_store(s));
  write_json_file(store_sidecar_path(path), Json{{"format", "GFDESC01"},
                                                 {"provider", s.provider},
                                                 {"model", s.model},
                                                 {"preprocessing", s.preprocessing},
                                                 {"dim", s.dim},
                                                 {"patch_count", s.patch_count},
                                                 {"records", s.records.size()}});
}

inline DescriptorStore read_store(const std::filesystem::path& path) {
  DescriptorStore s = decode_store(read_file_bytes(path));
  const auto side = store_sidecar_path(path);
  if (std::filesystem::exists(side)) {
    const Json j = read_json_file(side);
    s.provider = j.value("provider", "");
    s.model = j.value("model", "");
    s.preprocessing = j.value("preprocessing", "");
  }
  return s;
}

/// Serves precomputed descriptors (e.g. from the external extractor) by
/// record key; the key is carried in DescribeInput::source_id as
/// "kind:object_id:index".
class StoreProvider final : public DescriptorProvider {
 public:
  explicit StoreProvider(std::vector<DescriptorStore> stores) : stores_(std::move(stores)) {
    if (stores_.empty()) throw ValidationError("store provider needs at least one store");
    for (const auto& s : stores_)
      if (s.dim != stores_.front().dim || s.patch_count != stores_.front().patch_count)
        throw ValidationError("store provider: stores disagree on (D, N_l)");
  }

  static std::string key_string(const RecordKey& k) {
    return std::to_string(static_cast<std::uint32_t>(k.kind)) + ":" + std::to_string(k.object_id) + ":" +
           std::to_string(k.index);
  }

  [[nodiscard]] std::string name() const override { return "file"; }
  [[nodiscard]] int dim() const override { return stores_.front().dim; }
  [[nodiscard]] int patch_count() const override { return stores_.front().patch_count; }

  [[nodiscard]] DescriptorPair describe(const DescribeInput& in) const override {
    RecordKey key;
    unsigned kind = 0, obj = 0, idx = 0;
    if (std::sscanf(in.source_id.c_str(), "%u:%u:%u", &kind, &obj, &idx) != 3 || kind > 1)
      throw ValidationError("store provider: source id '" + in.source_id + "' is not a record key");
    key = {static_cast<RecordKind>(kind), obj, idx};
    for (const auto& s : stores_) {
      auto it = s.records.find(key);
      if (it != s.records.end()) return it->second;
    }
    throw ValidationError("store provider: no descriptor for '" + in.source_id + "'");
  }

 private:
  std::vector<DescriptorStore> stores_;
};

}  // namespace gfree
