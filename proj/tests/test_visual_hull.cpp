#include "gfree/visual_hull.hpp"
#include "oracles.hpp"

#include <gtest/gtest.h>

#include <random>

using namespace gfree;

TEST(FpsSelect, Examples) {
  const std::vector<Mat3> one{Mat3::Identity()};
  EXPECT_EQ(fps_select(one, 8), (std::vector<std::size_t>{0}));
  const std::vector<Mat3> three{Mat3::Identity(), rotation_about(Vec3::UnitZ(), M_PI / 2),
                                rotation_about(Vec3::UnitZ(), M_PI)};
  EXPECT_EQ(fps_select(three, 2), (std::vector<std::size_t>{0, 2}));
  auto all = fps_select(three, 10);
  std::sort(all.begin(), all.end());
  EXPECT_EQ(all, (std::vector<std::size_t>{0, 1, 2}));
}

TEST(FpsSelect, Validation) {
  const std::vector<Mat3> one{Mat3::Identity()};
  EXPECT_THROW(fps_select(one, 0), ValidationError);
  EXPECT_THROW(fps_select(std::vector<Mat3>{}, 3), ValidationError);
  Mat3 bad = Mat3::Identity();
  bad(0, 0) = 1.00001;
  EXPECT_THROW(fps_select(std::vector<Mat3>{bad}, 1), ValidationError);
}

TEST(FpsSelect, TiesGoToSmallestIndex) {
  // Four rotations equidistant from the seed.
  std::vector<Mat3> r{Mat3::Identity()};
  for (int k = 0; k < 4; ++k) r.push_back(rotation_about(Vec3::UnitZ(), M_PI / 3) * Mat3::Identity());
  EXPECT_EQ(fps_select(r, 2)[1], 1u);
}

TEST(FpsSelect, MatchesQuadraticReference) {
  std::mt19937_64 rng(21);
  for (int trial = 0; trial < 20; ++trial) {
    const std::size_t n = 1 + rng() % 200;
    std::vector<Mat3> rots;
    for (std::size_t i = 0; i < n; ++i) rots.push_back(oracle::random_rotation(rng));
    const std::size_t k = 1 + rng() % 12;
    EXPECT_EQ(fps_select(rots, k), oracle::fps(rots, k));
  }
}

TEST(Carve, MatchesOracleBothKinds) {
  std::mt19937_64 rng(7);
  int checked = 0;
  for (auto kind : {ProjectionKind::perspective, ProjectionKind::equidistant}) {
    for (int trial = 0; trial < 3; ++trial) {
      const auto views = oracle::random_hull_views(rng, kind, 1 + trial * 2);
      GridSpec spec;
      spec.nx = spec.ny = spec.nz = 32;
      spec.voxel_size = 250.0 / 32;
      spec.origin = Vec3::Constant(-125.0);
      const auto expected = oracle::carve(views, spec.origin, spec.voxel_size, 32);
      bool empty = std::count(expected.begin(), expected.end(), 1) == 0;
      if (empty) {
        EXPECT_THROW(carve(views, spec), EmptyHullError);
        continue;
      }
      const VoxelGrid g = carve(views, spec);
      EXPECT_EQ(g.occupancy, expected);
      ++checked;
    }
  }
  EXPECT_GE(checked, 4);
}

TEST(Carve, OccupiedCentersProjectInsideEveryMask) {
  std::mt19937_64 rng(8);
  const auto views = oracle::random_hull_views(rng, ProjectionKind::perspective, 3);
  GridSpec spec;
  spec.nx = spec.ny = spec.nz = 24;
  spec.voxel_size = 10;
  spec.origin = Vec3::Constant(-120);
  const VoxelGrid g = carve(views, spec);
  for (std::size_t i = 0; i < g.occupancy.size(); ++i) {
    if (!g.occupancy[i]) continue;
    for (const auto& v : views) ASSERT_TRUE(inside_silhouette(v, spec.center(i)));
  }
}

TEST(Carve, MonotoneInViews) {
  std::mt19937_64 rng(9);
  const auto views = oracle::random_hull_views(rng, ProjectionKind::equidistant, 4);
  GridSpec spec;
  spec.nx = spec.ny = spec.nz = 24;
  spec.voxel_size = 10;
  spec.origin = Vec3::Constant(-120);
  std::vector<oracle::HullView> subset;
  std::size_t prev = spec.voxel_count();
  for (const auto& v : views) {
    subset.push_back(v);
    std::size_t now = 0;
    try {
      now = carve(subset, spec).occupied_count();
    } catch (const EmptyHullError&) {
      now = 0;
    }
    EXPECT_LE(now, prev);
    prev = now;
  }
}

TEST(Carve, DegenerateCases) {
  oracle::HullView v;
  v.camera = {ProjectionKind::perspective, 50, 50, 15.5, 15.5, 32, 32};
  v.pose.translation = Vec3(0, 0, 100);
  v.mask = Mask(32, 32, true);
  GridSpec spec;
  spec.nx = spec.ny = spec.nz = 16;
  spec.voxel_size = 10;
  spec.origin = Vec3(-80, -80, -80);
  const auto g = carve(std::vector<oracle::HullView>{v}, spec);
  for (std::size_t i = 0; i < g.occupancy.size(); ++i) {
    const Vec3 p = v.pose.apply(spec.center(i));
    const auto px = project(p, v.camera);
    const bool expect = px && std::lround(px->x()) >= 0 && std::lround(px->y()) >= 0 && std::lround(px->x()) < 32 &&
                        std::lround(px->y()) < 32;
    EXPECT_EQ(g.occupancy[i] != 0, expect);
  }
  v.mask = Mask(32, 32, false);
  EXPECT_THROW(carve(std::vector<oracle::HullView>{v}, spec), EmptyHullError);
}

TEST(InitPoints, Examples) {
  VoxelGrid one{GridSpec{Vec3::Zero(), 1.0, 4, 4, 4}, std::vector<std::uint8_t>(64, 0)};
  one.occupancy[21] = 1;
  const auto p = init_points(one, 100);
  ASSERT_EQ(p.size(), 1u);
  EXPECT_EQ(p[0], one.spec.center(21));

  VoxelGrid corners{GridSpec{Vec3::Zero(), 2.0, 2, 2, 2}, std::vector<std::uint8_t>(8, 1)};
  const auto two = init_points(corners, 2);
  ASSERT_EQ(two.size(), 2u);
  EXPECT_EQ(two[0], Vec3(1, 1, 1));
  EXPECT_EQ(two[1], Vec3(3, 3, 3));

  VoxelGrid empty{GridSpec{Vec3::Zero(), 1.0, 2, 2, 2}, std::vector<std::uint8_t>(8, 0)};
  EXPECT_THROW(init_points(empty, 3), EmptyHullError);
}

TEST(InitPoints, AllCentersWhenUnderTarget) {
  VoxelGrid g{GridSpec{Vec3(-5, -5, -5), 1.0, 10, 10, 10}, std::vector<std::uint8_t>(1000, 1)};
  const auto pts = init_points(g, 1000);
  ASSERT_EQ(pts.size(), 1000u);
  const auto sub = init_points(g, 50);
  ASSERT_EQ(sub.size(), 50u);
  for (const auto& p : sub) {
    const Vec3 cell = (p - g.spec.origin) / g.spec.voxel_size;
    EXPECT_NEAR(cell.x() - std::floor(cell.x()), 0.5, 1e-12);
  }
}

TEST(HullFile, RoundTripAndHeader) {
  VoxelGrid g{GridSpec{Vec3(-1.5, 2, 3), 0.25, 3, 4, 5}, {}};
  g.occupancy.resize(60);
  for (std::size_t i = 0; i < 60; ++i) g.occupancy[i] = (i * 7) % 3 == 0;
  const auto bytes = encode_hull(g);
  EXPECT_EQ(bytes.size(), 32u + 60u);
  EXPECT_EQ(std::string(bytes.begin(), bytes.begin() + 8), "GFHULL01");
  EXPECT_EQ(decode_hull(bytes), g);
  auto bad = bytes;
  bad[7] = '2';
  EXPECT_THROW(decode_hull(bad), FormatError);
  bad = bytes;
  bad.pop_back();
  EXPECT_THROW(decode_hull(bad), FormatError);
}
