#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>

#include "pcpetl/errors.hpp"
#include "pcpetl/dataset.hpp"
#include "pcpetl/pcb_io.hpp"

using namespace pcpetl;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& name) {
  fs::path p = fs::temp_directory_path() / ("pcpetl_test_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

double dot(const Point3& a, const Point3& b) { return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]; }

}  // namespace

TEST(Generate, CleanSphereLiesOnUnitSphere) {
  DatasetSpec spec;
  spec.families = {ShapeFamily::Sphere};
  for (std::size_t i = 0; i < 4; ++i) {
    PointCloud c = generate(spec, Split::Train, i);
    ASSERT_EQ(c.size(), 512u);
    for (const auto& p : c.points) EXPECT_NEAR(std::sqrt(dot(p, p)), 1.0, 1e-9);
  }
}

TEST(Generate, PureFunctionOfSpecAndIndex) {
  DatasetSpec spec;
  spec.noise = 0.02;
  spec.occlusion = 0.25;
  spec.clutter = 0.1;
  for (std::size_t i : {0u, 5u, 77u}) {
    PointCloud a = generate(spec, Split::Test, i), b = generate(spec, Split::Test, i);
    EXPECT_EQ(a.points, b.points);
    EXPECT_EQ(a.label, b.label);
    EXPECT_EQ(a.sample_id, b.sample_id);
  }
  spec.seed = 1;
  EXPECT_NE(generate(spec, Split::Test, 0).points, generate(DatasetSpec{}, Split::Test, 0).points);
}

TEST(Generate, LabelsCycleThroughFamilies) {
  DatasetSpec spec;
  for (std::size_t i = 0; i < 16; ++i) EXPECT_EQ(generate(spec, Split::Train, i).label, static_cast<int>(i % 8));
}

TEST(Generate, NormalizedEvenWithShift) {
  DatasetSpec spec;
  spec.noise = 0.02;
  spec.occlusion = 0.25;
  spec.clutter = 0.1;
  for (std::size_t i = 0; i < 8; ++i) {
    PointCloud c = generate(spec, Split::Train, i);
    ASSERT_EQ(c.size(), spec.points);
    Point3 m{0, 0, 0};
    double rmax = 0.0;
    for (const auto& p : c.points) {
      for (int a = 0; a < 3; ++a) m[a] += p[a] / static_cast<double>(c.size());
      rmax = std::max(rmax, std::sqrt(dot(p, p)));
    }
    for (double v : m) EXPECT_NEAR(v, 0.0, 1e-9);
    EXPECT_NEAR(rmax, 1.0, 1e-9);
  }
}

// Counts the object points inside the cap by brute force.
TEST(Generate, OcclusionRemovesCap) {
  DatasetSpec spec;
  spec.occlusion = 0.3;
  for (std::size_t i = 0; i < 8; ++i) {
    GeneratedSample g = generate_detailed(spec, Split::Train, i);
    ASSERT_TRUE(g.cap.has_value());
    std::size_t inside = 0;
    for (const auto& p : g.pre_occlusion)
      if (dot(p, g.cap->direction) > g.cap->threshold) ++inside;
    EXPECT_EQ(inside, g.removed);
    EXPECT_GE(static_cast<double>(inside), 0.3 * static_cast<double>(g.pre_occlusion.size()));
    EXPECT_EQ(g.cloud.size(), spec.points);
  }
}

TEST(Generate, ClutterLiesOffObject) {
  DatasetSpec spec;
  spec.families = {ShapeFamily::Sphere};
  spec.clutter = 0.1;
  PointCloud c = generate(spec, Split::Train, 0);
  ASSERT_EQ(c.size(), 512u);
  // Object points come first, then round(0.1 * 512) = 51 clutter points. The
  // final normalization is a similarity, so radius ratios about the sphere
  // center survive it. The center is the circumcenter of four object points.
  const std::size_t n_object = 512 - 51;
  const auto& p0 = c.points[0];
  double m[3][4];
  for (int r = 0; r < 3; ++r) {
    const auto& pi = c.points[static_cast<std::size_t>(100 * (r + 1))];
    for (int a = 0; a < 3; ++a) m[r][a] = 2.0 * (pi[a] - p0[a]);
    m[r][3] = dot(pi, pi) - dot(p0, p0);
  }
  for (int col = 0; col < 3; ++col) {
    int piv = col;
    for (int r = col + 1; r < 3; ++r)
      if (std::abs(m[r][col]) > std::abs(m[piv][col])) piv = r;
    std::swap(m[col], m[piv]);
    for (int r = 0; r < 3; ++r) {
      if (r == col) continue;
      const double f = m[r][col] / m[col][col];
      for (int k = col; k < 4; ++k) m[r][k] -= f * m[col][k];
    }
  }
  const Point3 center{m[0][3] / m[0][0], m[1][3] / m[1][1], m[2][3] / m[2][2]};
  auto dist = [&](const Point3& p) {
    Point3 q{p[0] - center[0], p[1] - center[1], p[2] - center[2]};
    return std::sqrt(dot(q, q));
  };
  const double radius = dist(c.points[0]);
  for (std::size_t i = 0; i < n_object; ++i) EXPECT_NEAR(dist(c.points[i]) / radius, 1.0, 1e-7);
  for (std::size_t i = n_object; i < 512; ++i) {
    EXPECT_GE(dist(c.points[i]) / radius, 1.1 - 1e-9);
    EXPECT_LE(dist(c.points[i]) / radius, 1.5 + 1e-9);
  }
}

TEST(Generate, UnknownFamilyIsConfigError) {
  EXPECT_THROW(parse_shape_family("pyramid"), ConfigError);
  EXPECT_EQ(parse_shape_family("plane-cluster"), ShapeFamily::PlaneCluster);
  for (auto f : all_shape_families()) EXPECT_EQ(parse_shape_family(to_string(f)), f);
  EXPECT_EQ(all_shape_families().size(), 8u);
}

TEST(Generate, IndexOutOfSplitIsRangeError) {
  DatasetSpec spec;
  EXPECT_THROW(generate(spec, Split::Train, spec.split_size(Split::Train)), RangeError);
}

TEST(Dataset, SplitsDisjointById) {
  DatasetSpec spec;
  spec.train_per_class = 4;
  spec.test_per_class = 4;
  Dataset ds = build_dataset(spec, 2);
  std::set<std::uint64_t> ids;
  for (const auto& c : ds.train) ids.insert(c.sample_id);
  for (const auto& c : ds.test) EXPECT_EQ(ids.count(c.sample_id), 0u);
  EXPECT_EQ(ids.size(), ds.train.size());
}

TEST(Dataset, ThreadCountDoesNotChangeData) {
  DatasetSpec spec;
  spec.train_per_class = 3;
  spec.test_per_class = 1;
  Dataset a = build_dataset(spec, 1), b = build_dataset(spec, 3);
  ASSERT_EQ(a.train.size(), b.train.size());
  for (std::size_t i = 0; i < a.train.size(); ++i) EXPECT_EQ(a.train[i].points, b.train[i].points);
}

TEST(Episode, CountsAndDisjointness) {
  DatasetSpec spec;
  spec.train_per_class = 24;
  std::vector<PointCloud> pool;
  for (std::size_t i = 0; i < spec.split_size(Split::Train); ++i) {
    PointCloud c;
    c.label = static_cast<int>(i % 8);
    c.sample_id = i;
    pool.push_back(c);
  }
  Rng r(3);
  FewShotEpisode ep = sample_episode(pool, 2, 1, r);
  EXPECT_EQ(ep.support.size(), 2u);
  EXPECT_EQ(ep.query.size(), 40u);
  std::set<int> sl, ql;
  std::set<std::uint64_t> sid;
  for (const auto& c : ep.support) {
    sl.insert(c.label);
    sid.insert(c.sample_id);
  }
  for (const auto& c : ep.query) {
    ql.insert(c.label);
    EXPECT_EQ(sid.count(c.sample_id), 0u);
  }
  EXPECT_EQ(sl, ql);
  EXPECT_EQ(sl, (std::set<int>{0, 1}));
  std::set<int> orig(ep.classes.begin(), ep.classes.end());
  EXPECT_EQ(orig.size(), 2u);

  Rng r1(9), r2(9);
  FewShotEpisode e1 = sample_episode(pool, 5, 3, r1), e2 = sample_episode(pool, 5, 3, r2);
  EXPECT_EQ(e1.classes, e2.classes);
  for (std::size_t i = 0; i < e1.query.size(); ++i) EXPECT_EQ(e1.query[i].sample_id, e2.query[i].sample_id);

  Rng r3(1);
  EXPECT_THROW(sample_episode(pool, 9, 1, r3), DataError);
  EXPECT_THROW(sample_episode(pool, 2, 5, r3), DataError);
}

TEST(PcbIo, BinaryRoundTripBitExact) {
  fs::path dir = temp_dir("pcb");
  PointCloud c = generate(DatasetSpec{}, Split::Train, 5);
  quantize_f32(c);
  write_pcb(dir / "a.pcb", c);
  PointCloud back = read_pcb(dir / "a.pcb");
  EXPECT_EQ(back.points, c.points);
  EXPECT_EQ(back.label, c.label);
  EXPECT_EQ(fs::file_size(dir / "a.pcb"), 4u + 4u + 12u * c.size() + 2u);
}

TEST(PcbIo, EncodingLayout) {
  PointCloud c;
  c.points = {{1.0, -2.0, 0.5}};
  c.label = 3;
  std::string b = encode_pcb(c);
  ASSERT_EQ(b.size(), 4u + 4u + 12u + 2u);
  EXPECT_EQ(b.substr(0, 4), "PCB1");
  EXPECT_EQ(static_cast<unsigned char>(b[4]), 1u);
  float x;
  std::memcpy(&x, b.data() + 12, 4);
  EXPECT_EQ(x, -2.0f);
  EXPECT_EQ(static_cast<unsigned char>(b[20]), 3u);
}

TEST(PcbIo, BadMagicAndTruncation) {
  PointCloud c;
  c.points = {{1, 2, 3}, {4, 5, 6}};
  std::string b = encode_pcb(c);
  std::string bad = b;
  bad[0] = 'X';
  EXPECT_THROW(decode_pcb(bad), FormatError);
  EXPECT_THROW(decode_pcb(b.substr(0, b.size() - 3)), FormatError);
}

TEST(AsciiIo, ParsesPointsAndComments) {
  fs::path dir = temp_dir("xyz");
  {
    std::ofstream f(dir / "tri.xyz");
    f << "# triangle\n0 0 0\n1 0 0\n\n0 1 0\n";
  }
  PointCloud c = read_xyz_ascii(dir / "tri.xyz");
  ASSERT_EQ(c.size(), 3u);
  EXPECT_EQ(c.points[1], (Point3{1, 0, 0}));
  EXPECT_EQ(c.points[2], (Point3{0, 1, 0}));
}

TEST(AsciiIo, EmptyFileIsParseError) {
  fs::path dir = temp_dir("xyz_empty");
  { std::ofstream f(dir / "e.xyz"); }
  EXPECT_THROW(read_xyz_ascii(dir / "e.xyz"), ParseError);
}

TEST(AsciiIo, MalformedLineNamesLineNumber) {
  fs::path dir = temp_dir("xyz_bad");
  {
    std::ofstream f(dir / "b.xyz");
    f << "0 0 0\n1 oops 0\n";
  }
  try {
    read_xyz_ascii(dir / "b.xyz");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find(":2:"), std::string::npos) << e.what();
  }
}

TEST(Manifest, RoundTrip) {
  fs::path dir = temp_dir("manifest");
  std::vector<ManifestEntry> m{{"train/00000.pcb", 0}, {"test/00003.pcb", 7}};
  write_manifest(dir / "manifest.txt", m);
  auto back = read_manifest(dir / "manifest.txt");
  ASSERT_EQ(back.size(), 2u);
  EXPECT_EQ(back[1].path, "test/00003.pcb");
  EXPECT_EQ(back[1].label, 7);
}
