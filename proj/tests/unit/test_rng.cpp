#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "pcpetl/errors.hpp"
#include "pcpetl/rng.hpp"

using namespace pcpetl;

TEST(Rng, SameSeedSameStream) {
  Rng a(42), b(42);
  for (int i = 0; i < 100; ++i) EXPECT_EQ(a.next_u64(), b.next_u64());
}

TEST(Rng, ChildStreamsIgnoreParentConsumption) {
  Rng a(9), b(9);
  for (int i = 0; i < 17; ++i) b.next_u64();
  Rng ca = a.split(5), cb = b.split(5);
  for (int i = 0; i < 20; ++i) EXPECT_EQ(ca.next_u64(), cb.next_u64());
  EXPECT_NE(a.split(5).next_u64(), a.split(6).next_u64());
}

TEST(Rng, SplitmixReferenceValue) {
  // First output of the reference splitmix64 generator seeded with 0.
  EXPECT_EQ(splitmix64(0), 0xE220A8397B1DCDAFULL);
}

TEST(Rng, UniformMomentsAndRange) {
  Rng r(3);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double u = r.uniform();
    ASSERT_GE(u, 0.0);
    ASSERT_LT(u, 1.0);
    s += u;
    s2 += u * u;
  }
  EXPECT_NEAR(s / n, 0.5, 5e-3);
  EXPECT_NEAR(s2 / n - (s / n) * (s / n), 1.0 / 12.0, 5e-3);
}

TEST(Rng, NormalMoments) {
  Rng r(4);
  double s = 0.0, s2 = 0.0;
  const int n = 200000;
  for (int i = 0; i < n; ++i) {
    const double z = r.normal();
    s += z;
    s2 += z * z;
  }
  EXPECT_NEAR(s / n, 0.0, 1e-2);
  EXPECT_NEAR(s2 / n, 1.0, 2e-2);
}

TEST(Rng, IndexCoversRangeAndShuffleIsPermutation) {
  Rng r(5);
  std::vector<int> hits(7, 0);
  for (int i = 0; i < 7000; ++i) ++hits[r.index(7)];
  for (int h : hits) EXPECT_GT(h, 800);
  std::vector<int> v(50);
  std::iota(v.begin(), v.end(), 0);
  auto w = v;
  r.shuffle(w);
  EXPECT_NE(v, w);
  std::sort(w.begin(), w.end());
  EXPECT_EQ(v, w);
}
