#pragma once

// Proposal crops, template matching scores (top-K global cosine, local patch
// score, combined score), class-wise mask NMS and proposal manifests.

#include "gfree/crop.hpp"
#include "gfree/descriptors.hpp"
#include "gfree/errors.hpp"
#include "gfree/image.hpp"
#include "gfree/image_io.hpp"
#include "gfree/json_io.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

namespace gfree {

inline constexpr int kTopK = 5;
inline constexpr double kScoreMin = 0.45;
inline constexpr double kNmsIou = 0.5;

struct Proposal {
  int proposal_id = 0;
  Mask mask;             // full image
  ImageBuffer crop;      // kCropSize^2, zero outside crop_mask
  Mask crop_mask;
  CropTransform transform;
  std::optional<int> oracle_label;
};

/// Square crop around the mask box dilated by 10% (clamped to the image),
/// bilinear-resized to `size`, background zeroed.
inline Proposal crop_proposal(const ImageBuffer& image, const Mask& mask, int proposal_id = 0, int size = kCropSize) {
  if (mask.width != image.width || mask.height != image.height)
    throw ValidationError("proposal mask and image sizes differ");
  if (mask.count() == 0) throw EmptyMaskError("empty proposal mask " + std::to_string(proposal_id));
  Proposal p;
  p.proposal_id = proposal_id;
  p.mask = mask;
  p.transform = crop_window(mask, size);
  ImageBuffer masked = image;
  apply_mask(masked, mask);
  p.crop = resample(masked, p.transform);
  p.crop_mask = resample(mask, p.transform);
  apply_mask(p.crop, p.crop_mask);
  return p;
}

// --- scores -------------------------------------------------------------------

/// Cosine similarity; 0 when either vector has zero norm.
inline double cosine(const float* a, const float* b, int dim) {
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (int i = 0; i < dim; ++i) {
    ab += static_cast<double>(a[i]) * b[i];
    aa += static_cast<double>(a[i]) * a[i];
    bb += static_cast<double>(b[i]) * b[i];
  }
  if (aa == 0.0 || bb == 0.0) return 0.0;
  return ab / std::sqrt(aa * bb);
}

struct GlobalScore {
  double score = 0.0;
  int best_template = -1;
};

namespace detail {
/// Mean of the k largest values (all when fewer than k).
inline double top_k_mean(std::vector<double> v, int k) {
  const auto n = std::min<std::size_t>(v.size(), static_cast<std::size_t>(k));
  std::partial_sort(v.begin(), v.begin() + static_cast<long>(n), v.end(), std::greater<>());
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += v[i];
  return s / static_cast<double>(n);
}

inline int argmax_first(const std::vector<double>& v) {
  int best = 0;
  for (int i = 1; i < static_cast<int>(v.size()); ++i)
    if (v[i] > v[best]) best = i;
  return best;
}
}  // namespace detail

inline GlobalScore global_score(const DescriptorPair& prop, std::span<const DescriptorPair* const> templates,
                                int k = kTopK) {
  if (templates.empty()) throw ValidationError("global_score: no templates");
  if (k < 1) throw ValidationError("global_score: K must be >= 1");
  std::vector<double> cos(templates.size());
  for (std::size_t t = 0; t < templates.size(); ++t) {
    if (templates[t]->dim != prop.dim) throw ValidationError("global_score: descriptor dimension mismatch");
    cos[t] = cosine(prop.global.data(), templates[t]->global.data(), prop.dim);
  }
  return {detail::top_k_mean(cos, k), detail::argmax_first(cos)};
}

/// Mean over the proposal's patches of the best cosine against the template's
/// patches. With foreground_only, both sides use only foreground patches.
inline double local_score(const DescriptorPair& prop, const DescriptorPair& tmpl, bool foreground_only = true) {
  if (prop.dim != tmpl.dim) throw ValidationError("local_score: descriptor dimension mismatch");
  double sum = 0.0;
  int used = 0;
  for (int k = 0; k < prop.patch_count; ++k) {
    if (foreground_only && !prop.foreground[k]) continue;
    double best = -std::numeric_limits<double>::infinity();
    for (int i = 0; i < tmpl.patch_count; ++i) {
      if (foreground_only && !tmpl.foreground[i]) continue;
      best = std::max(best, cosine(prop.patch(k), tmpl.patch(i), prop.dim));
    }
    if (!std::isfinite(best)) return 0.0;
    sum += best;
    ++used;
  }
  return used == 0 ? 0.0 : sum / used;
}

enum class LocalMode { best_template, top_k_mean };

inline LocalMode local_mode_from_string(const std::string& s) {
  if (s == "best_template") return LocalMode::best_template;
  if (s == "top_k_mean") return LocalMode::top_k_mean;
  throw ValidationError("unknown local score mode '" + s + "'");
}

struct MatchOptions {
  int top_k = kTopK;
  bool foreground_only = true;
  LocalMode local_mode = LocalMode::best_template;
};

struct ObjectTemplates {
  int object_id = 0;
  std::vector<const DescriptorPair*> templates;  // by template index
};

struct MatchResult {
  int proposal_id = 0;
  int object_id = -1;
  int best_template_index = -1;
  double s_global = 0.0;
  double s_local = 0.0;
  double s = 0.0;
};

/// Category = object with the largest top-K global score (smallest id on
/// ties); the local score uses that object's best template.
inline MatchResult match_proposal(const DescriptorPair& prop, std::span<const ObjectTemplates> objects,
                                  const MatchOptions& opt = {}, int proposal_id = 0) {
  if (objects.empty()) throw ValidationError("match_proposal: no onboarded objects");
  MatchResult r;
  r.proposal_id = proposal_id;
  const ObjectTemplates* chosen = nullptr;
  for (const auto& o : objects) {
    const GlobalScore g = global_score(prop, o.templates, opt.top_k);
    if (!chosen || g.score > r.s_global || (g.score == r.s_global && o.object_id < r.object_id)) {
      chosen = &o;
      r.object_id = o.object_id;
      r.s_global = g.score;
      r.best_template_index = g.best_template;
    }
  }
  if (opt.local_mode == LocalMode::best_template) {
    r.s_local = local_score(prop, *chosen->templates[r.best_template_index], opt.foreground_only);
  } else {
    std::vector<double> cos;
    for (const auto* t : chosen->templates) cos.push_back(cosine(prop.global.data(), t->global.data(), prop.dim));
    std::vector<int> order(cos.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return cos[a] > cos[b]; });
    const int n = std::min<int>(opt.top_k, static_cast<int>(order.size()));
    for (int i = 0; i < n; ++i) r.s_local += local_score(prop, *chosen->templates[order[i]], opt.foreground_only);
    r.s_local /= n;
  }
  r.s = 0.5 * (r.s_global + r.s_local);
  return r;
}

/// Batched matcher: template globals are normalized once and all proposal
/// globals are scored with one matrix product; patch scores are computed for
/// the selected templates only. Same results as match_proposal.
class Matcher {
 public:
  using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

  Matcher(std::span<const ObjectTemplates> objects, MatchOptions opt) : opt_(opt) {
    if (objects.empty()) throw ValidationError("matcher: no onboarded objects");
    if (opt.top_k < 1) throw ValidationError("matcher: K must be >= 1");
    std::vector<std::size_t> order(objects.size());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return objects[a].object_id < objects[b].object_id; });
    dim_ = -1;
    std::size_t total = 0;
    for (const auto& o : objects) {
      if (o.templates.empty()) throw ValidationError("matcher: object " + std::to_string(o.object_id) + " has no templates");
      total += o.templates.size();
      for (const auto* t : o.templates) {
        if (dim_ < 0) dim_ = t->dim;
        if (t->dim != dim_) throw ValidationError("matcher: template descriptor dimensions differ");
      }
    }
    globals_.resize(static_cast<Eigen::Index>(total), dim_);
    Eigen::Index row = 0;
    for (auto oi : order) {
      const auto& o = objects[oi];
      objects_.push_back({o.object_id, row, static_cast<Eigen::Index>(o.templates.size()), o.templates});
      for (const auto* t : o.templates) globals_.row(row++) = normalized(t->global.data(), dim_);
    }
  }

  [[nodiscard]] MatchResult match(const DescriptorPair& prop, int proposal_id = 0) const {
    const int id[] = {proposal_id};
    return match_all(std::span<const DescriptorPair>(&prop, 1), id).front();
  }

  /// Parallel over proposals; results in input order.
  [[nodiscard]] std::vector<MatchResult> match_all(std::span<const DescriptorPair> props,
                                                   std::span<const int> proposal_ids) const {
    if (props.size() != proposal_ids.size()) throw ValidationError("matcher: id count mismatch");
    for (const auto& p : props)
      if (p.dim != dim_) throw ValidationError("matcher: proposal descriptor dimension mismatch");
    const long n = static_cast<long>(props.size());
    Matrix G(n, dim_);
    for (long i = 0; i < n; ++i) G.row(i) = normalized(props[i].global.data(), dim_);
    const Matrix cos = G * globals_.transpose();
    std::vector<MatchResult> out(props.size());
#pragma omp parallel for schedule(dynamic)
    for (long i = 0; i < n; ++i) out[i] = finish(props[i], proposal_ids[i], cos.row(i).data());
    return out;
  }

 private:
  struct Object {
    int object_id;
    Eigen::Index first;
    Eigen::Index count;
    std::vector<const DescriptorPair*> templates;
  };

  [[nodiscard]] MatchResult finish(const DescriptorPair& prop, int proposal_id, const double* cos) const {
    MatchResult r;
    r.proposal_id = proposal_id;
    const Object* chosen = nullptr;
    std::vector<double> c;
    for (const auto& o : objects_) {
      c.assign(cos + o.first, cos + o.first + o.count);
      const double s = detail::top_k_mean(c, opt_.top_k);
      if (!chosen || s > r.s_global) {
        chosen = &o;
        r.object_id = o.object_id;
        r.s_global = s;
        r.best_template_index = detail::argmax_first(c);
      }
    }
    const Matrix P = patch_matrix(prop, opt_.foreground_only);
    if (opt_.local_mode == LocalMode::best_template) {
      r.s_local = local(P, patch_matrix(*chosen->templates[r.best_template_index], opt_.foreground_only));
    } else {
      c.assign(cos + chosen->first, cos + chosen->first + chosen->count);
      std::vector<int> order(c.size());
      std::iota(order.begin(), order.end(), 0);
      std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return c[a] > c[b]; });
      const int k = std::min<int>(opt_.top_k, static_cast<int>(order.size()));
      for (int i = 0; i < k; ++i) r.s_local += local(P, patch_matrix(*chosen->templates[order[i]], opt_.foreground_only));
      r.s_local /= k;
    }
    r.s = 0.5 * (r.s_global + r.s_local);
    return r;
  }

  static Eigen::RowVectorXd normalized(const float* v, int dim) {
    Eigen::RowVectorXd r(dim);
    for (int i = 0; i < dim; ++i) r[i] = v[i];
    const double n = r.norm();
    if (n > 0.0) r /= n;
    return r;
  }

  static Matrix patch_matrix(const DescriptorPair& d, bool foreground_only) {
    int rows = 0;
    for (int k = 0; k < d.patch_count; ++k) rows += (!foreground_only || d.foreground[k]) ? 1 : 0;
    Matrix m(rows, d.dim);
    int r = 0;
    for (int k = 0; k < d.patch_count; ++k)
      if (!foreground_only || d.foreground[k]) m.row(r++) = normalized(d.patch(k), d.dim);
    return m;
  }

  static double local(const Matrix& P, const Matrix& T) {
    if (P.rows() == 0 || T.rows() == 0) return 0.0;
    const Matrix S = P * T.transpose();
    return S.rowwise().maxCoeff().mean();
  }

  MatchOptions opt_;
  int dim_ = 0;
  Matrix globals_;
  std::vector<Object> objects_;
};

// --- detections -----------------------------------------------------------------

struct Detection {
  int scene_id = 0;
  int image_id = 0;
  int object_id = 0;
  int proposal_id = 0;
  double score = 0.0;
  Mask mask;
  PixelBox bbox;
};

struct Candidate {
  MatchResult match;
  Mask mask;
};

/// Greedy NMS core: visits items in descending score (ties: smaller id
/// first) and keeps an item unless an already kept item of the same category
/// has iou(i, kept) > iou_thr. Returns kept indices in visiting order.
template <class IouFn>
std::vector<std::size_t> greedy_nms(std::span<const double> scores, std::span<const int> ids,
                                    std::span<const int> categories, double iou_thr, IouFn&& iou_fn) {
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    if (scores[a] != scores[b]) return scores[a] > scores[b];
    return ids[a] < ids[b];
  });
  std::vector<std::size_t> kept;
  for (auto i : order) {
    bool keep = true;
    for (auto j : kept)
      if (categories[j] == categories[i] && iou_fn(i, j) > iou_thr) {
        keep = false;
        break;
      }
    if (keep) kept.push_back(i);
  }
  return kept;
}

/// Drops scores below score_min, then class-wise greedy mask NMS.
inline std::vector<Detection> filter_and_nms(const std::vector<Candidate>& cands, double score_min = kScoreMin,
                                             double iou_nms = kNmsIou) {
  std::vector<const Candidate*> pass;
  for (const auto& c : cands)
    if (c.match.s >= score_min) pass.push_back(&c);
  std::vector<double> scores;
  std::vector<int> ids, cats;
  std::vector<PixelBox> boxes;
  for (const auto* c : pass) {
    scores.push_back(c->match.s);
    ids.push_back(c->match.proposal_id);
    cats.push_back(c->match.object_id);
    boxes.push_back(mask_to_bbox(c->mask));
  }
  auto disjoint = [](const PixelBox& a, const PixelBox& b) {
    return a.x + a.w <= b.x || b.x + b.w <= a.x || a.y + a.h <= b.y || b.y + b.h <= a.y;
  };
  const auto kept = greedy_nms(scores, ids, cats, iou_nms, [&](std::size_t i, std::size_t j) {
    return disjoint(boxes[i], boxes[j]) ? 0.0 : mask_iou(pass[i]->mask, pass[j]->mask);
  });
  std::vector<Detection> out;
  for (auto i : kept) {
    Detection d;
    d.object_id = pass[i]->match.object_id;
    d.proposal_id = pass[i]->match.proposal_id;
    d.score = pass[i]->match.s;
    d.mask = pass[i]->mask;
    d.bbox = boxes[i];
    out.push_back(std::move(d));
  }
  return out;
}

// --- RLE and proposal manifests -------------------------------------------------

/// Uncompressed COCO-style RLE: column-major run lengths starting with a
/// background run.
inline Json rle_encode(const Mask& m) {
  Json counts = Json::array();
  std::uint8_t cur = 0;
  long run = 0;
  for (int x = 0; x < m.width; ++x)
    for (int y = 0; y < m.height; ++y) {
      const std::uint8_t v = m.at(x, y) ? 1 : 0;
      if (v != cur) {
        counts.push_back(run);
        run = 0;
        cur = v;
      }
      ++run;
    }
  counts.push_back(run);
  return Json{{"size", {m.height, m.width}}, {"counts", counts}};
}

inline Mask rle_decode(const Json& j) {
  try {
    const int h = j.at("size").at(0).get<int>(), w = j.at("size").at(1).get<int>();
    Mask m(w, h);
    std::size_t pos = 0;
    const std::size_t total = static_cast<std::size_t>(w) * h;
    std::uint8_t cur = 0;
    for (const auto& c : j.at("counts")) {
      const long n = c.get<long>();
      if (n < 0 || pos + static_cast<std::size_t>(n) > total) throw ValidationError("RLE counts exceed mask size");
      for (long k = 0; k < n; ++k, ++pos)
        if (cur) m.set(static_cast<int>(pos / h), static_cast<int>(pos % h), true);
      cur ^= 1;
    }
    if (pos != total) throw ValidationError("RLE counts do not cover the mask");
    return m;
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed RLE: ") + e.what());
  }
}

struct ManifestEntry {
  int id = 0;
  Mask mask;
  std::optional<int> oracle_label;
};

struct ProposalManifest {
  int scene_id = 0;
  int image_id = 0;
  int width = 0;
  int height = 0;
  std::vector<ManifestEntry> proposals;
};

/// {"scene_id", "image_id", "width", "height", "proposals": [{"id", "mask":
/// "<png relative to the manifest>" | "rle": {...}, "oracle_label"?}]}
inline ProposalManifest parse_proposal_manifest(const Json& j, const std::filesystem::path& base_dir) {
  ProposalManifest m;
  try {
    m.scene_id = j.at("scene_id").get<int>();
    m.image_id = j.at("image_id").get<int>();
    m.width = j.at("width").get<int>();
    m.height = j.at("height").get<int>();
    if (m.width < 1 || m.height < 1) throw ValidationError("manifest image size must be positive");
    std::vector<int> seen;
    for (const auto& p : j.at("proposals")) {
      ManifestEntry e;
      e.id = p.at("id").get<int>();
      if (std::find(seen.begin(), seen.end(), e.id) != seen.end())
        throw ValidationError("duplicate proposal id " + std::to_string(e.id));
      seen.push_back(e.id);
      const bool has_png = p.contains("mask"), has_rle = p.contains("rle");
      if (has_png == has_rle) throw ValidationError("proposal " + std::to_string(e.id) + " needs exactly one of mask/rle");
      e.mask = has_png ? read_mask_png(base_dir / p.at("mask").get<std::string>()) : rle_decode(p.at("rle"));
      if (e.mask.width != m.width || e.mask.height != m.height)
        throw ValidationError("proposal " + std::to_string(e.id) + " mask size differs from the image");
      if (p.contains("oracle_label")) e.oracle_label = p.at("oracle_label").get<int>();
      m.proposals.push_back(std::move(e));
    }
  } catch (const Json::exception& e) {
    throw ValidationError(std::string("malformed proposal manifest: ") + e.what());
  }
  return m;
}

inline ProposalManifest read_proposal_manifest(const std::filesystem::path& path) {
  try {
    return parse_proposal_manifest(read_json_file(path), path.parent_path());
  } catch (const ValidationError& e) {
    throw ValidationError("'" + path.string() + "': " + e.what());
  }
}

inline Json proposal_manifest_to_json(const ProposalManifest& m) {
  Json list = Json::array();
  for (const auto& p : m.proposals) {
    Json e{{"id", p.id}, {"rle", rle_encode(p.mask)}};
    if (p.oracle_label) e["oracle_label"] = *p.oracle_label;
    list.push_back(e);
  }
  return Json{{"scene_id", m.scene_id},
              {"image_id", m.image_id},
              {"width", m.width},
              {"height", m.height},
              {"proposals", list}};
}

}  // namespace gfree
