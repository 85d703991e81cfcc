#include "pcpetl/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <map>
#include <numbers>
#include <thread>

#include "pcpetl/errors.hpp"

namespace pcpetl {

namespace {

constexpr double kTau = 2.0 * std::numbers::pi;

Point3 random_direction(Rng& rng) {
  for (;;) {
    Point3 p{rng.normal(), rng.normal(), rng.normal()};
    const double n = std::sqrt(p[0] * p[0] + p[1] * p[1] + p[2] * p[2]);
    if (n > 1e-12) return {p[0] / n, p[1] / n, p[2] / n};
  }
}

// Chooses a surface part index proportionally to its area.
std::size_t pick_part(Rng& rng, std::initializer_list<double> areas) {
  double total = 0.0;
  for (double a : areas) total += a;
  double u = rng.uniform() * total;
  std::size_t i = 0;
  for (double a : areas) {
    if (u < a) return i;
    u -= a;
    ++i;
  }
  return areas.size() - 1;
}

std::vector<Point3> sample_sphere(std::size_t n, Rng& rng) {
  // Antithetic pairs keep the centroid at the origin.
  std::vector<Point3> pts;
  pts.reserve(n);
  while (pts.size() + 1 < n) {
    const auto d = random_direction(rng);
    pts.push_back(d);
    pts.push_back({-d[0], -d[1], -d[2]});
  }
  if (pts.size() < n) pts.push_back(random_direction(rng));
  return pts;
}

std::vector<Point3> sample_box(std::size_t n, Rng& rng) {
  const double a = rng.uniform(0.3, 0.6), b = rng.uniform(0.3, 0.6), c = rng.uniform(0.3, 0.6);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const auto face = pick_part(rng, {b * c, a * c, a * b});
    const double sgn = rng.uniform() < 0.5 ? -1.0 : 1.0;
    const double u = rng.uniform(-1.0, 1.0), v = rng.uniform(-1.0, 1.0);
    if (face == 0) p = {sgn * a, u * b, v * c};
    else if (face == 1) p = {u * a, sgn * b, v * c};
    else p = {u * a, v * b, sgn * c};
  }
  return pts;
}

std::vector<Point3> sample_cylinder(std::size_t n, Rng& rng) {
  const double r = rng.uniform(0.3, 0.55), h = rng.uniform(0.4, 0.8);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double t = kTau * rng.uniform();
    if (pick_part(rng, {kTau * r * 2.0 * h, kTau * r * r / 2.0}) == 0) {
      p = {r * std::cos(t), r * std::sin(t), rng.uniform(-h, h)};
    } else {
      const double rr = r * std::sqrt(rng.uniform());
      p = {rr * std::cos(t), rr * std::sin(t), rng.uniform() < 0.5 ? -h : h};
    }
  }
  return pts;
}

std::vector<Point3> sample_cone(std::size_t n, Rng& rng) {
  const double r = rng.uniform(0.4, 0.7), h = rng.uniform(0.7, 1.4);
  const double slant = std::sqrt(r * r + h * h);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double t = kTau * rng.uniform();
    if (pick_part(rng, {std::numbers::pi * r * slant, std::numbers::pi * r * r}) == 0) {
      const double f = std::sqrt(rng.uniform());  // distance fraction from the apex
      p = {f * r * std::cos(t), f * r * std::sin(t), h / 2.0 - f * h};
    } else {
      const double rr = r * std::sqrt(rng.uniform());
      p = {rr * std::cos(t), rr * std::sin(t), -h / 2.0};
    }
  }
  return pts;
}

std::vector<Point3> sample_torus(std::size_t n, Rng& rng) {
  const double R = rng.uniform(0.6, 0.8), r = rng.uniform(0.15, 0.3);
  std::vector<Point3> pts;
  pts.reserve(n);
  while (pts.size() < n) {
    const double theta = kTau * rng.uniform(), phi = kTau * rng.uniform();
    if (rng.uniform() * (R + r) > R + r * std::cos(phi)) continue;
    const double ring = R + r * std::cos(phi);
    pts.push_back({ring * std::cos(theta), ring * std::sin(theta), r * std::sin(phi)});
  }
  return pts;
}

std::vector<Point3> sample_plane_cluster(std::size_t n, Rng& rng) {
  const double side = rng.uniform(0.8, 1.2), gap = rng.uniform(0.25, 0.45);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const double level = static_cast<double>(rng.index(3)) - 1.0;
    p = {rng.uniform(-side, side) / 2.0, rng.uniform(-side, side) / 2.0, level * gap};
  }
  return pts;
}

std::vector<Point3> sample_capsule(std::size_t n, Rng& rng) {
  const double r = rng.uniform(0.25, 0.4), h = rng.uniform(0.3, 0.6);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    if (pick_part(rng, {kTau * r * 2.0 * h, 4.0 * std::numbers::pi * r * r}) == 0) {
      const double t = kTau * rng.uniform();
      p = {r * std::cos(t), r * std::sin(t), rng.uniform(-h, h)};
    } else {
      const auto d = random_direction(rng);
      p = {r * d[0], r * d[1], r * d[2] + (d[2] >= 0.0 ? h : -h)};
    }
  }
  return pts;
}

std::vector<Point3> sample_ellipsoid(std::size_t n, Rng& rng) {
  const double b = rng.uniform(0.5, 0.75), c = rng.uniform(0.25, 0.45);
  std::vector<Point3> pts(n);
  for (auto& p : pts) {
    const auto d = random_direction(rng);
    p = {d[0], b * d[1], c * d[2]};
  }
  return pts;
}

std::vector<Point3> sample_surface(ShapeFamily family, std::size_t n, Rng& rng) {
  switch (family) {
    case ShapeFamily::Sphere: return sample_sphere(n, rng);
    case ShapeFamily::Box: return sample_box(n, rng);
    case ShapeFamily::Cylinder: return sample_cylinder(n, rng);
    case ShapeFamily::Cone: return sample_cone(n, rng);
    case ShapeFamily::Torus: return sample_torus(n, rng);
    case ShapeFamily::PlaneCluster: return sample_plane_cluster(n, rng);
    case ShapeFamily::Capsule: return sample_capsule(n, rng);
    case ShapeFamily::Ellipsoid: return sample_ellipsoid(n, rng);
  }
  throw ConfigError("unknown shape family");
}

const std::vector<std::pair<ShapeFamily, std::string>>& family_names() {
  static const std::vector<std::pair<ShapeFamily, std::string>> names{
      {ShapeFamily::Sphere, "sphere"},   {ShapeFamily::Box, "box"},
      {ShapeFamily::Cylinder, "cylinder"}, {ShapeFamily::Cone, "cone"},
      {ShapeFamily::Torus, "torus"},     {ShapeFamily::PlaneCluster, "plane-cluster"},
      {ShapeFamily::Capsule, "capsule"}, {ShapeFamily::Ellipsoid, "ellipsoid"}};
  return names;
}

}  // namespace

ShapeFamily parse_shape_family(const std::string& name) {
  for (const auto& [f, n] : family_names())
    if (n == name) return f;
  throw ConfigError("unknown shape family '" + name + "'");
}

std::string to_string(ShapeFamily family) {
  for (const auto& [f, n] : family_names())
    if (f == family) return n;
  return "?";
}

std::vector<ShapeFamily> all_shape_families() {
  std::vector<ShapeFamily> out;
  for (const auto& [f, n] : family_names()) out.push_back(f);
  return out;
}

RotationPolicy parse_rotation_policy(const std::string& name) {
  if (name == "none") return RotationPolicy::None;
  if (name == "z") return RotationPolicy::Z;
  if (name == "so3") return RotationPolicy::SO3;
  throw ConfigError("unknown rotation policy '" + name + "' (expected none, z, so3)");
}

std::string to_string(RotationPolicy policy) {
  switch (policy) {
    case RotationPolicy::None: return "none";
    case RotationPolicy::Z: return "z";
    case RotationPolicy::SO3: return "so3";
  }
  return "none";
}

std::size_t DatasetSpec::split_size(Split split) const {
  return num_classes() * (split == Split::Train ? train_per_class : test_per_class);
}

std::uint64_t sample_id_for(const DatasetSpec& spec, Split split, std::size_t index) {
  return (splitmix64(spec.seed) & 0xFFFFFF0000000000ULL) | (static_cast<std::uint64_t>(split) << 39) |
         static_cast<std::uint64_t>(index);
}

GeneratedSample generate_detailed(const DatasetSpec& spec, Split split, std::size_t index) {
  if (spec.families.empty()) throw ConfigError("dataset spec has no shape families");
  if (index >= spec.split_size(split)) {
    throw RangeError("generate: index " + std::to_string(index) + " outside split of size " +
                     std::to_string(spec.split_size(split)));
  }
  if (spec.occlusion < 0.0 || spec.occlusion >= 1.0 || spec.clutter < 0.0 || spec.clutter >= 1.0) {
    throw ConfigError("occlusion and clutter fractions must lie in [0, 1)");
  }
  const std::size_t label = index % spec.num_classes();
  Rng rng = Rng(spec.seed).split((static_cast<std::uint64_t>(split) << 40) | index);

  const auto n_clutter = static_cast<std::size_t>(std::llround(spec.clutter * static_cast<double>(spec.points)));
  const std::size_t n_object = spec.points - n_clutter;

  GeneratedSample out;
  std::vector<Point3> object = sample_surface(spec.families[label], n_object, rng);
  normalize(object);
  if (spec.noise > 0.0)
    for (auto& p : object)
      for (auto& v : p) v += spec.noise * rng.normal();

  if (spec.occlusion > 0.0) {
    out.pre_occlusion = object;
    OcclusionCap cap;
    cap.direction = random_direction(rng);
    std::vector<double> proj(object.size());
    for (std::size_t i = 0; i < object.size(); ++i)
      proj[i] = object[i][0] * cap.direction[0] + object[i][1] * cap.direction[1] + object[i][2] * cap.direction[2];
    auto remove = static_cast<std::size_t>(std::ceil(spec.occlusion * static_cast<double>(object.size())));
    remove = std::min(remove, object.size() - 1);
    std::vector<double> sorted = proj;
    std::sort(sorted.begin(), sorted.end());
    cap.threshold = sorted[object.size() - remove - 1];
    std::vector<Point3> kept;
    for (std::size_t i = 0; i < object.size(); ++i)
      if (proj[i] <= cap.threshold) kept.push_back(object[i]);
    out.removed = object.size() - kept.size();
    const std::size_t survivors = kept.size();
    while (kept.size() < n_object) {
      Point3 p = kept[rng.index(survivors)];
      for (auto& v : p) v += 0.01 * rng.normal();
      kept.push_back(p);
    }
    object = std::move(kept);
    out.cap = cap;
  }

  for (std::size_t i = 0; i < n_clutter; ++i) {
    const auto d = random_direction(rng);
    const double r = rng.uniform(1.1, 1.5);
    object.push_back({r * d[0], r * d[1], r * d[2]});
  }

  if (spec.rotation == RotationPolicy::SO3) {
    rotate(object, random_rotation(rng));
  } else if (spec.rotation == RotationPolicy::Z) {
    const double t = kTau * rng.uniform();
    const double c = std::cos(t), s = std::sin(t);
    rotate(object, {c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0});
  }
  normalize(object);

  out.cloud.points = std::move(object);
  out.cloud.label = static_cast<int>(label);
  out.cloud.sample_id = sample_id_for(spec, split, index);
  return out;
}

PointCloud generate(const DatasetSpec& spec, Split split, std::size_t index) {
  return generate_detailed(spec, split, index).cloud;
}

void quantize_f32(PointCloud& cloud) {
  for (auto& p : cloud.points)
    for (auto& v : p) v = static_cast<double>(static_cast<float>(v));
}

unsigned generation_threads() {
  if (const char* env = std::getenv("PETL_THREADS")) {
    const long n = std::strtol(env, nullptr, 10);
    if (n >= 1) return static_cast<unsigned>(n);
  }
  return 1;
}

Dataset build_dataset(const DatasetSpec& spec, unsigned threads) {
  if (threads == 0) threads = generation_threads();
  Dataset ds;
  ds.spec = spec;
  auto fill = [&](Split split, std::vector<PointCloud>& out) {
    out.resize(spec.split_size(split));
    auto work = [&](std::size_t begin, std::size_t stride) {
      for (std::size_t i = begin; i < out.size(); i += stride) {
        out[i] = generate(spec, split, i);
        quantize_f32(out[i]);
      }
    };
    if (threads <= 1) {
      work(0, 1);
      return;
    }
    std::vector<std::thread> pool;
    for (unsigned t = 0; t < threads; ++t) pool.emplace_back(work, t, threads);
    for (auto& th : pool) th.join();
  };
  fill(Split::Train, ds.train);
  fill(Split::Test, ds.test);
  return ds;
}

FewShotEpisode sample_episode(const std::vector<PointCloud>& pool, std::size_t way, std::size_t shot, Rng& rng,
                              std::size_t queries_per_class) {
  std::map<int, std::vector<std::size_t>> by_class;
  for (std::size_t i = 0; i < pool.size(); ++i) by_class[pool[i].label].push_back(i);
  std::vector<int> eligible;
  for (const auto& [label, members] : by_class)
    if (members.size() >= shot + queries_per_class) eligible.push_back(label);
  if (way == 0 || eligible.size() < way) {
    throw DataError("sample_episode: need " + std::to_string(way) + " classes with at least " +
                    std::to_string(shot + queries_per_class) + " samples, found " + std::to_string(eligible.size()));
  }
  rng.shuffle(eligible);
  FewShotEpisode ep;
  ep.way = way;
  ep.shot = shot;
  for (std::size_t c = 0; c < way; ++c) {
    const int label = eligible[c];
    ep.classes.push_back(label);
    auto members = by_class[label];
    rng.shuffle(members);
    for (std::size_t j = 0; j < shot + queries_per_class; ++j) {
      PointCloud s = pool[members[j]];
      s.label = static_cast<int>(c);
      (j < shot ? ep.support : ep.query).push_back(std::move(s));
    }
  }
  return ep;
}

}  // namespace pcpetl
