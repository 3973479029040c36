#include "gfree/matching.hpp"

#include "ref_scoring.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <random>

using namespace gfree;
using namespace oracle;

namespace {

DescriptorPair with_global(std::vector<float> g, int patches = 1) {
  DescriptorPair d(static_cast<int>(g.size()), patches);
  d.global = std::move(g);
  return d;
}

std::vector<float> unit(int dim, int i) {
  std::vector<float> v(static_cast<std::size_t>(dim), 0.0f);
  v[static_cast<std::size_t>(i)] = 1.0f;
  return v;
}

DescriptorPair random_pair(std::mt19937_64& rng, int dim, int n) {
  std::normal_distribution<float> nd;
  DescriptorPair d(dim, n);
  for (auto& v : d.global) v = nd(rng);
  for (auto& v : d.patches) v = nd(rng);
  for (auto& f : d.foreground) f = (rng() % 4) != 0;
  return d;
}

Mask rect(int w, int h, int x0, int y0, int x1, int y1) {
  Mask m(w, h);
  for (int y = y0; y < y1; ++y)
    for (int x = x0; x < x1; ++x) m.set(x, y, true);
  return m;
}

}  // namespace

TEST(GlobalScore, OneMatchingTemplateAmongOrthogonal) {
  const auto p = with_global(unit(8, 0));
  std::vector<DescriptorPair> ts;
  for (int i = 0; i < 6; ++i) ts.push_back(with_global(unit(8, i == 3 ? 0 : i + 1)));
  std::vector<const DescriptorPair*> ptrs;
  for (const auto& t : ts) ptrs.push_back(&t);
  const auto g = global_score(p, ptrs, 5);
  EXPECT_NEAR(g.score, 0.2, 1e-15);
  EXPECT_EQ(g.best_template, 3);
}

TEST(GlobalScore, TopFiveMean) {
  const double c[] = {1.0, 0.9, 0.8, 0.7, 0.6, 0.5};
  const auto p = with_global({1.0f, 0.0f});
  std::vector<DescriptorPair> ts;
  for (double v : c) ts.push_back(with_global({static_cast<float>(v), static_cast<float>(std::sqrt(1 - v * v))}));
  std::vector<const DescriptorPair*> ptrs;
  for (const auto& t : ts) ptrs.push_back(&t);
  EXPECT_NEAR(global_score(p, ptrs, 5).score, 0.8, 1e-7);
  const auto single = with_global({0.3f, -0.4f});
  const DescriptorPair* one[] = {&single};
  EXPECT_NEAR(global_score(single, one, 5).score, 1.0, 1e-12);
  EXPECT_EQ(global_score(single, one, 5).best_template, 0);
}

TEST(GlobalScore, ZeroNormIsZeroCosine) {
  const auto z = with_global({0.0f, 0.0f});
  const auto t = with_global({1.0f, 0.0f});
  EXPECT_EQ(cosine(z.global.data(), t.global.data(), 2), 0.0);
}

TEST(LocalScore, HandExample) {
  // Template patches e0, e1; proposal patches chosen to give cosines
  // [0.9, 0.1] and [0.2, 0.4].
  DescriptorPair t(3, 2), p(3, 2);
  t.patch(0)[0] = 1;
  t.patch(1)[1] = 1;
  auto set = [](float* v, double a, double b) {
    v[0] = static_cast<float>(a);
    v[1] = static_cast<float>(b);
    v[2] = static_cast<float>(std::sqrt(1 - a * a - b * b));
  };
  set(p.patch(0), 0.9, 0.1);
  set(p.patch(1), 0.2, 0.4);
  std::fill(t.foreground.begin(), t.foreground.end(), 1);
  std::fill(p.foreground.begin(), p.foreground.end(), 1);
  EXPECT_NEAR(local_score(p, t), 0.65, 1e-7);
  EXPECT_NEAR(local_score(t, t), 1.0, 1e-12);

  DescriptorPair o(3, 2);
  o.patch(0)[2] = 1;
  o.patch(1)[2] = -1;
  std::fill(o.foreground.begin(), o.foreground.end(), 1);
  EXPECT_EQ(local_score(o, t), 0.0);
  DescriptorPair bg = p;
  std::fill(bg.foreground.begin(), bg.foreground.end(), 0);
  EXPECT_EQ(local_score(bg, t), 0.0);
  EXPECT_NEAR(local_score(bg, t, false), 0.65, 1e-7);
}

TEST(MatchProposal, CombinedScoreAndTies) {
  std::mt19937_64 rng(5);
  const auto d = random_pair(rng, 16, 8);
  const ObjectTemplates a{4, {&d}}, b{2, {&d}};
  const ObjectTemplates objs[] = {a, b};
  const auto r = match_proposal(d, objs);
  EXPECT_EQ(r.object_id, 2);
  EXPECT_NEAR(r.s_global, 1.0, 1e-12);
  EXPECT_NEAR(r.s_local, 1.0, 1e-12);
  EXPECT_EQ(r.s, 0.5 * (r.s_global + r.s_local));
  EXPECT_EQ(Matcher(objs, {}).match(d).object_id, 2);
}

TEST(MatchProposal, OracleFixturePicksLabeledObject) {
  const OracleProvider oracle(64, 16, 3);
  ImageBuffer img(224, 224, 3);
  Mask m(224, 224);
  for (int y = 50; y < 150; ++y)
    for (int x = 50; x < 150; ++x) {
      m.set(x, y, true);
      img.at(x, y, 0) = 0.01 * x;
    }
  std::vector<std::vector<DescriptorPair>> store(5);
  for (int o = 0; o < 5; ++o)
    for (int t = 0; t < 12; ++t) {
      img.at(0, 0, 1) = 0.01f * t;
      store[o].push_back(oracle({&img, &m, "t", o + 1}));
    }
  std::vector<ObjectTemplates> objs;
  for (int o = 0; o < 5; ++o) {
    objs.push_back({o + 1, {}});
    for (const auto& t : store[o]) objs.back().templates.push_back(&t);
  }
  img.at(1, 1, 2) = 0.5f;
  const auto prop = oracle({&img, &m, "p", 3});
  const auto r = match_proposal(prop, objs);
  EXPECT_EQ(r.object_id, 3);
  EXPECT_GT(r.s, 0.9);
  EXPECT_EQ(Matcher(objs, {}).match(prop).object_id, 3);
}

TEST(Matcher, AgreesWithBruteForceOnRandomStores) {
  std::mt19937_64 rng(2024);
  for (int trial = 0; trial < 20; ++trial) {
    const int n_obj = 1 + static_cast<int>(rng() % 5), n_t = 1 + static_cast<int>(rng() % 30);
    std::vector<std::vector<DescriptorPair>> store(n_obj);
    std::vector<int> ids;
    std::vector<ObjectTemplates> objs;
    for (int o = 0; o < n_obj; ++o) {
      ids.push_back(10 - o);
      for (int t = 0; t < n_t; ++t) store[o].push_back(random_pair(rng, 64, 16));
    }
    for (int o = 0; o < n_obj; ++o) {
      objs.push_back({ids[o], {}});
      for (const auto& t : store[o]) objs.back().templates.push_back(&t);
    }
    const Matcher m(objs, {});
    std::vector<DescriptorPair> props;
    std::vector<int> pids;
    for (int p = 0; p < 8; ++p) {
      props.push_back(random_pair(rng, 64, 16));
      pids.push_back(p);
    }
    const auto batch = m.match_all(props, pids);
    for (int p = 0; p < 8; ++p) {
      const auto ref = ref_match(props[p], store, ids, 5);
      const auto direct = match_proposal(props[p], objs, {}, p);
      for (const auto& r : {batch[p], direct}) {
        ASSERT_EQ(r.object_id, ref.object_id);
        ASSERT_EQ(r.best_template_index, ref.best);
        ASSERT_NEAR(r.s_global, ref.sg, 1e-6);
        ASSERT_NEAR(r.s_local, ref.sl, 1e-6);
        ASSERT_NEAR(r.s, 0.5 * (r.s_global + r.s_local), 1e-9);
        ASSERT_EQ(r.proposal_id, p);
      }
    }
  }
}

TEST(Matcher, TopKMeanLocalMode) {
  std::mt19937_64 rng(8);
  std::vector<DescriptorPair> ts;
  for (int t = 0; t < 9; ++t) ts.push_back(random_pair(rng, 32, 6));
  ObjectTemplates o{1, {}};
  for (const auto& t : ts) o.templates.push_back(&t);
  const ObjectTemplates objs[] = {o};
  const auto p = random_pair(rng, 32, 6);
  MatchOptions opt;
  opt.local_mode = LocalMode::top_k_mean;
  const auto a = match_proposal(p, objs, opt), b = Matcher(objs, opt).match(p);
  EXPECT_NEAR(a.s_local, b.s_local, 1e-9);
  std::vector<std::pair<double, int>> c;
  for (int t = 0; t < 9; ++t) c.push_back({-ref_cos(p.global, ts[t].global), t});
  std::sort(c.begin(), c.end());
  double ref = 0;
  for (int i = 0; i < 5; ++i) ref += ref_local(p, ts[c[i].second]);
  EXPECT_NEAR(a.s_local, ref / 5, 1e-6);
  EXPECT_THROW(local_mode_from_string("mean"), ValidationError);
}

TEST(Matcher, InvariantToDescriptorScale) {
  std::mt19937_64 rng(17);
  auto t = random_pair(rng, 32, 8);
  auto p = random_pair(rng, 32, 8);
  const ObjectTemplates objs[] = {{1, {&t}}};
  const auto r1 = Matcher(objs, {}).match(p);
  for (auto& v : p.global) v *= 7.0f;
  for (auto& v : p.patches) v *= 0.25f;
  const auto r2 = Matcher(objs, {}).match(p);
  EXPECT_NEAR(r1.s, r2.s, 1e-6);
}

TEST(Matcher, Errors) {
  const auto d = with_global({1.0f, 0.0f});
  const auto e = with_global({1.0f, 0.0f, 0.0f});
  EXPECT_THROW(Matcher({}, {}), ValidationError);
  const ObjectTemplates mixed[] = {{1, {&d}}, {2, {&e}}};
  EXPECT_THROW(Matcher(mixed, {}), ValidationError);
  const ObjectTemplates ok[] = {{1, {&d}}};
  EXPECT_THROW((void)Matcher(ok, {}).match(e), ValidationError);
}

TEST(Nms, Examples) {
  auto cand = [](int id, int obj, double s, Mask m) {
    Candidate c;
    c.match.proposal_id = id;
    c.match.object_id = obj;
    c.match.s = s;
    c.mask = std::move(m);
    return c;
  };
  // IoU 0.9: 100 vs 90 pixels.
  auto a = cand(0, 1, 0.8, rect(20, 20, 0, 0, 10, 10));
  auto b = cand(1, 1, 0.7, rect(20, 20, 0, 0, 10, 9));
  auto kept = filter_and_nms({a, b});
  ASSERT_EQ(kept.size(), 1u);
  EXPECT_EQ(kept[0].proposal_id, 0);
  // Different categories are never suppressed.
  b.match.object_id = 2;
  EXPECT_EQ(filter_and_nms({a, b}).size(), 2u);
  // Disjoint masks.
  auto c = cand(2, 1, 0.7, rect(20, 20, 12, 12, 20, 20));
  EXPECT_EQ(filter_and_nms({a, c}).size(), 2u);
  // Score filter.
  c.match.s = 0.3;
  EXPECT_EQ(filter_and_nms({a, c}).size(), 1u);
  EXPECT_EQ(filter_and_nms({}).size(), 0u);
  const auto d = filter_and_nms({a})[0];
  EXPECT_EQ(d.bbox.x, 0);
  EXPECT_EQ(d.bbox.w, 10);
  EXPECT_EQ(d.bbox.h, 10);
}

TEST(Nms, ChainWithPrescribedIous) {
  const std::vector<double> s{0.9, 0.8, 0.7};
  const std::vector<int> ids{0, 1, 2}, cat{1, 1, 1};
  const double table[3][3] = {{1, 0.6, 0.0}, {0.6, 1, 0.6}, {0.0, 0.6, 1}};
  const auto kept = greedy_nms(std::span<const double>(s), std::span<const int>(ids), std::span<const int>(cat), 0.5,
                               [&](std::size_t i, std::size_t j) { return table[i][j]; });
  EXPECT_EQ(kept, (std::vector<std::size_t>{0, 2}));
}

TEST(Nms, MatchesQuadraticReference) {
  std::mt19937_64 rng(77);
  for (int trial = 0; trial < 50; ++trial) {
    const int n = 1 + static_cast<int>(rng() % 200);
    std::vector<Candidate> cands;
    for (int i = 0; i < n; ++i) {
      const int x = rng() % 50, y = rng() % 50;
      Candidate c;
      c.match.proposal_id = 1000 - i;
      c.match.object_id = 1 + rng() % 3;
      c.match.s = 0.4 + 0.1 * (rng() % 7);  // many ties
      c.mask = rect(64, 64, x, y, x + 4 + rng() % 10, y + 4 + rng() % 10);
      cands.push_back(c);
    }
    std::vector<double> s;
    std::vector<int> ids, cat;
    std::vector<std::size_t> idx;
    for (int i = 0; i < n; ++i)
      if (cands[i].match.s >= kScoreMin) {
        idx.push_back(i);
        s.push_back(cands[i].match.s);
        ids.push_back(cands[i].match.proposal_id);
        cat.push_back(cands[i].match.object_id);
      }
    std::vector<std::vector<double>> table(idx.size(), std::vector<double>(idx.size()));
    for (std::size_t i = 0; i < idx.size(); ++i)
      for (std::size_t j = 0; j < idx.size(); ++j) table[i][j] = mask_iou(cands[idx[i]].mask, cands[idx[j]].mask);
    const auto ref = ref_nms(s, ids, cat, table, kNmsIou);
    const auto got = filter_and_nms(cands);
    ASSERT_EQ(got.size(), ref.size());
    for (std::size_t k = 0; k < ref.size(); ++k) ASSERT_EQ(got[k].proposal_id, ids[ref[k]]);
  }
}

TEST(CropProposal, FullMaskIsResize) {
  ImageBuffer img(100, 100, 3);
  for (int y = 0; y < 100; ++y)
    for (int x = 0; x < 100; ++x)
      for (int c = 0; c < 3; ++c) img.at(x, y, c) = 0.3 + 0.002 * x + 0.001 * y;
  const auto p = crop_proposal(img, rect(100, 100, 0, 0, 100, 100), 4);
  EXPECT_EQ(p.proposal_id, 4);
  ASSERT_EQ(p.crop.width, 224);
  EXPECT_EQ(p.crop_mask.count(), 224u * 224u);
  // A linear ramp survives bilinear resampling up to the border clamp.
  EXPECT_NEAR(p.crop.at(112, 112, 0), 0.3 + 0.002 * 49.75 + 0.001 * 49.75, 2e-3);
  EXPECT_LT(p.crop.at(0, 0, 0), p.crop.at(223, 223, 0));
}

TEST(CropProposal, SinglePixel) {
  ImageBuffer img(50, 50, 3);
  for (auto& v : img.data) v = 0.7f;
  const auto p = crop_proposal(img, rect(50, 50, 20, 30, 21, 31));
  EXPECT_GT(p.crop_mask.count(), 0u);
  for (int y = 0; y < 224; ++y)
    for (int x = 0; x < 224; ++x)
      if (!p.crop_mask.at(x, y)) {
        ASSERT_EQ(p.crop.at(x, y, 0), 0.0f);
      }
  EXPECT_THROW(crop_proposal(img, Mask(50, 50)), EmptyMaskError);
  EXPECT_THROW(crop_proposal(img, Mask(40, 50)), ValidationError);
}

TEST(Rle, RoundTripAndLayout) {
  Mask m(3, 2);
  m.set(0, 1, true);
  m.set(1, 0, true);
  const Json j = rle_encode(m);
  EXPECT_EQ(j["size"], Json::array({2, 3}));
  EXPECT_EQ(j["counts"], Json::array({1, 2, 3}));
  EXPECT_EQ(rle_decode(j).data, m.data);
  std::mt19937_64 rng(1);
  for (int i = 0; i < 100; ++i) {
    Mask r(1 + rng() % 30, 1 + rng() % 30);
    for (auto& v : r.data) v = rng() % 3 == 0;
    ASSERT_EQ(rle_decode(rle_encode(r)).data, r.data);
  }
  EXPECT_THROW(rle_decode(Json{{"size", {2, 2}}, {"counts", {1, 5}}}), ValidationError);
  EXPECT_THROW(rle_decode(Json{{"size", {2, 2}}, {"counts", {1}}}), ValidationError);
  EXPECT_THROW(rle_decode(Json{{"counts", {1}}}), ValidationError);
}

TEST(Manifest, ParseAndErrors) {
  const auto dir = std::filesystem::temp_directory_path() / "gfree_test_manifest";
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  const Mask a = rect(8, 6, 1, 1, 4, 4), b = rect(8, 6, 5, 2, 7, 6);
  write_mask_png(dir / "b.png", b);
  Json j{{"scene_id", 1},
         {"image_id", 2},
         {"width", 8},
         {"height", 6},
         {"proposals", {{{"id", 0}, {"rle", rle_encode(a)}, {"oracle_label", 3}}, {{"id", 1}, {"mask", "b.png"}}}}};
  const auto m = parse_proposal_manifest(j, dir);
  ASSERT_EQ(m.proposals.size(), 2u);
  EXPECT_EQ(m.proposals[0].mask.data, a.data);
  EXPECT_EQ(m.proposals[1].mask.data, b.data);
  EXPECT_EQ(m.proposals[0].oracle_label, 3);
  EXPECT_FALSE(m.proposals[1].oracle_label);
  const Json back = proposal_manifest_to_json(m);
  EXPECT_EQ(parse_proposal_manifest(back, dir).proposals[1].mask.data, b.data);

  auto bad = j;
  bad["proposals"][1]["id"] = 0;
  EXPECT_THROW(parse_proposal_manifest(bad, dir), ValidationError);
  bad = j;
  bad["proposals"][0]["mask"] = "b.png";
  EXPECT_THROW(parse_proposal_manifest(bad, dir), ValidationError);
  bad = j;
  bad["width"] = 9;
  EXPECT_THROW(parse_proposal_manifest(bad, dir), ValidationError);
  bad = j;
  bad.erase("image_id");
  EXPECT_THROW(parse_proposal_manifest(bad, dir), ValidationError);
  j["proposals"] = Json::array();
  EXPECT_TRUE(parse_proposal_manifest(j, dir).proposals.empty());
  std::filesystem::remove_all(dir);
}
