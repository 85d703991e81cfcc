#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pcpetl/errors.hpp"
#include "pcpetl/dataset.hpp"
#include "pcpetl/pointcloud.hpp"

using namespace pcpetl;

namespace {

std::vector<Point3> random_points(std::size_t n, std::uint64_t seed) {
  Rng r(seed);
  std::vector<Point3> pts(n);
  for (auto& p : pts) p = {r.uniform(-1, 1), r.uniform(-1, 1), r.uniform(-1, 1)};
  return pts;
}

// Greedy max-min selection written directly from its definition.
std::vector<std::size_t> fps_oracle(const std::vector<Point3>& pts, std::size_t n, std::size_t seed) {
  std::vector<std::size_t> chosen{seed};
  while (chosen.size() < n) {
    double best = -1.0;
    std::size_t arg = 0;
    for (std::size_t i = 0; i < pts.size(); ++i) {
      double d = INFINITY;
      for (auto c : chosen) d = std::min(d, squared_distance(pts[i], pts[c]));
      if (d > best) {
        best = d;
        arg = i;
      }
    }
    chosen.push_back(arg);
  }
  return chosen;
}

std::vector<std::size_t> knn_oracle(const std::vector<Point3>& pts, const Point3& c, std::size_t k) {
  std::vector<std::size_t> idx(pts.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) {
    return squared_distance(pts[a], c) < squared_distance(pts[b], c);
  });
  idx.resize(k);
  return idx;
}

double max_pairwise_deviation(const std::vector<Point3>& a, const std::vector<Point3>& b) {
  double dev = 0.0;
  for (std::size_t i = 0; i < a.size(); i += 7)
    for (std::size_t j = 0; j < a.size(); j += 5)
      dev = std::max(dev, std::abs(std::sqrt(squared_distance(a[i], a[j])) - std::sqrt(squared_distance(b[i], b[j]))));
  return dev;
}

}  // namespace

TEST(Fps, FullCountIsPermutation) {
  auto pts = random_points(40, 1);
  auto idx = fps(pts, 40, 3);
  std::sort(idx.begin(), idx.end());
  for (std::size_t i = 0; i < 40; ++i) EXPECT_EQ(idx[i], i);
}

TEST(Fps, CollinearExample) {
  std::vector<Point3> pts{{0, 0, 0}, {1, 0, 0}, {2, 0, 0}, {3, 0, 0}};
  EXPECT_EQ(fps(pts, 2, 0), (std::vector<std::size_t>{0, 3}));
}

TEST(Fps, SingleSampleIsSeed) {
  auto pts = random_points(10, 2);
  EXPECT_EQ(fps(pts, 1, 7), (std::vector<std::size_t>{7}));
}

TEST(Fps, TooManyIsRangeError) {
  auto pts = random_points(5, 3);
  EXPECT_THROW(fps(pts, 6, 0), RangeError);
}

TEST(Fps, MatchesBruteForce) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto pts = random_points(120, 10 + s);
    EXPECT_EQ(fps(pts, 24, s), fps_oracle(pts, 24, s));
  }
}

TEST(Fps, ShuffleInvariantThroughReindexing) {
  auto pts = random_points(100, 4);
  std::vector<std::size_t> perm(100);
  std::iota(perm.begin(), perm.end(), 0);
  Rng r(5);
  r.shuffle(perm);
  std::vector<Point3> shuffled(100);
  for (std::size_t i = 0; i < 100; ++i) shuffled[i] = pts[perm[i]];
  auto base = fps(pts, 16, perm[0]);
  auto other = fps(shuffled, 16, 0);
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(perm[other[i]], base[i]);
}

TEST(Knn, SelfNearestWithUnitK) {
  auto pts = random_points(30, 6);
  std::vector<Point3> centers{pts[4], pts[17]};
  PatchSet ps = knn_group(pts, centers, 1);
  for (std::size_t c = 0; c < 2; ++c)
    for (double v : ps.member(c, 0)) EXPECT_EQ(v, 0.0);
  EXPECT_EQ(ps.member_indices[0], 4u);
  EXPECT_EQ(ps.member_indices[1], 17u);
}

TEST(Knn, SquareCornerTie) {
  std::vector<Point3> square{{0, 0, 0}, {1, 0, 0}, {0, 1, 0}, {1, 1, 0}};
  std::vector<Point3> center{square[0]};
  PatchSet ps = knn_group(square, center, 2);
  EXPECT_EQ(ps.member_indices, (std::vector<std::size_t>{0, 1}));
}

TEST(Knn, MatchesBruteForceSort) {
  for (std::uint64_t s = 0; s < 4; ++s) {
    auto pts = random_points(200, 20 + s);
    auto centers_idx = fps(pts, 12, 0);
    std::vector<Point3> centers;
    for (auto i : centers_idx) centers.push_back(pts[i]);
    PatchSet ps = knn_group(pts, centers, 16);
    for (std::size_t c = 0; c < 12; ++c) {
      auto expect = knn_oracle(pts, centers[c], 16);
      for (std::size_t j = 0; j < 16; ++j) {
        EXPECT_EQ(ps.member_indices[c * 16 + j], expect[j]);
        for (int a = 0; a < 3; ++a) EXPECT_EQ(ps.member(c, j)[a], pts[expect[j]][a] - centers[c][a]);
      }
    }
  }
}

TEST(Knn, GroupMeanPlusCenterIsAbsoluteMean) {
  auto pts = random_points(64, 7);
  std::vector<Point3> centers{pts[0], pts[9]};
  PatchSet ps = knn_group(pts, centers, 8);
  for (std::size_t c = 0; c < 2; ++c)
    for (int a = 0; a < 3; ++a) {
      double rel = 0.0, abs = 0.0;
      for (std::size_t j = 0; j < 8; ++j) {
        rel += ps.member(c, j)[a];
        abs += pts[ps.member_indices[c * 8 + j]][a];
      }
      EXPECT_NEAR(rel / 8 + centers[c][a], abs / 8, 1e-12);
    }
}

TEST(Knn, TooManyIsRangeError) {
  auto pts = random_points(5, 8);
  std::vector<Point3> c{pts[0]};
  EXPECT_THROW(knn_group(pts, c, 6), RangeError);
}

TEST(Patchify, CentersAreFpsSubset) {
  DatasetSpec spec;
  PointCloud cloud = generate(spec, Split::Train, 3);
  PatchSet ps = patchify(cloud, 32, 32);
  auto idx = fps(cloud.points, 32, 0);
  EXPECT_EQ(ps.center_indices, idx);
  for (std::size_t i = 0; i < 32; ++i) EXPECT_EQ(ps.centers[i], cloud.points[idx[i]]);
  EXPECT_EQ(ps.groups.size(), 32u * 32u);
  EXPECT_EQ(ps.sample_id, cloud.sample_id);
}

TEST(Normalize, CentroidZeroRadiusOne) {
  auto pts = random_points(300, 9);
  for (auto& p : pts) p[0] = 3.0 * p[0] + 5.0;
  normalize(pts);
  double c[3] = {0, 0, 0}, rmax = 0.0;
  for (const auto& p : pts) {
    for (int a = 0; a < 3; ++a) c[a] += p[a] / 300.0;
    rmax = std::max(rmax, std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]));
  }
  for (double v : c) EXPECT_NEAR(v, 0.0, 1e-9);
  EXPECT_NEAR(rmax, 1.0, 1e-9);
}

TEST(Normalize, IdempotentBitExact) {
  for (std::uint64_t s = 0; s < 5; ++s) {
    auto pts = random_points(257, 30 + s);
    normalize(pts);
    auto again = pts;
    normalize(again);
    EXPECT_EQ(pts, again);
  }
}

TEST(Augment, NoneIsIdentity) {
  DatasetSpec spec;
  PointCloud cloud = generate(spec, Split::Train, 0);
  Rng r(1);
  PointCloud out = augment(cloud, AugmentPolicy::None, r);
  EXPECT_EQ(out.points, cloud.points);
}

TEST(Augment, ScaleTranslateBoundsAndRenormalization) {
  DatasetSpec spec;
  spec.rotation = RotationPolicy::None;
  PointCloud cloud = generate(spec, Split::Train, 1);
  for (std::uint64_t s = 0; s < 10; ++s) {
    Rng r(s);
    PointCloud out = augment(cloud, AugmentPolicy::ScaleTranslate, r);
    // Recover the scale and translation from two points.
    double ratio = std::sqrt(squared_distance(out.points[0], out.points[1]) /
                             squared_distance(cloud.points[0], cloud.points[1]));
    EXPECT_GE(ratio, 2.0 / 3.0 - 1e-12);
    EXPECT_LE(ratio, 1.5 + 1e-12);
    for (int a = 0; a < 3; ++a) {
      const double t = out.points[0][a] - ratio * cloud.points[0][a];
      EXPECT_LE(std::abs(t), 0.2 + 1e-12);
    }
    PointCloud renorm = normalized(out);
    for (std::size_t i = 0; i < cloud.size(); ++i)
      for (int a = 0; a < 3; ++a) EXPECT_NEAR(renorm.points[i][a], cloud.points[i][a], 1e-12);
  }
}

TEST(Augment, RotationIsIsometry) {
  DatasetSpec spec;
  PointCloud cloud = generate(spec, Split::Train, 2);
  Rng r(3);
  PointCloud out = augment(cloud, AugmentPolicy::Rotate, r);
  EXPECT_LT(max_pairwise_deviation(cloud.points, out.points), 1e-9);
  EXPECT_NE(out.points, cloud.points);
}

TEST(Augment, RandomRotationIsOrthonormal) {
  Rng r(11);
  for (int t = 0; t < 20; ++t) {
    auto m = random_rotation(r);
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double dot = 0.0;
        for (int k = 0; k < 3; ++k) dot += m[i * 3 + k] * m[j * 3 + k];
        EXPECT_NEAR(dot, i == j ? 1.0 : 0.0, 1e-12);
      }
    const double det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6]) +
                       m[2] * (m[3] * m[7] - m[4] * m[6]);
    EXPECT_NEAR(det, 1.0, 1e-12);
  }
}

TEST(Augment, PolicyNames) {
  for (auto p : {AugmentPolicy::None, AugmentPolicy::ScaleTranslate, AugmentPolicy::Rotate})
    EXPECT_EQ(parse_augment_policy(to_string(p)), p);
  EXPECT_EQ(to_string(AugmentPolicy::ScaleTranslate), "scale-translate");
  EXPECT_THROW(parse_augment_policy("shear"), ConfigError);
}
