#include "pcpetl/pointcloud.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "pcpetl/errors.hpp"

namespace pcpetl {

double squared_distance(const Point3& a, const Point3& b) {
  const double dx = a[0] - b[0], dy = a[1] - b[1], dz = a[2] - b[2];
  return dx * dx + dy * dy + dz * dz;
}

void normalize(std::vector<Point3>& points) {
  if (points.empty()) return;
  Point3 c{0.0, 0.0, 0.0};
  for (const auto& p : points)
    for (int a = 0; a < 3; ++a) c[a] += p[a];
  for (int a = 0; a < 3; ++a) c[a] /= static_cast<double>(points.size());
  double r2 = 0.0;
  for (const auto& p : points) r2 = std::max(r2, squared_distance(p, c));
  const double radius = std::sqrt(r2);
  const double offset = std::sqrt(c[0] * c[0] + c[1] * c[1] + c[2] * c[2]);
  if (offset <= 1e-12 && std::abs(radius - 1.0) <= 1e-12) return;
  const double inv = radius > 0.0 ? 1.0 / radius : 1.0;
  for (auto& p : points)
    for (int a = 0; a < 3; ++a) p[a] = (p[a] - c[a]) * inv;
}

PointCloud normalized(PointCloud cloud) {
  normalize(cloud.points);
  return cloud;
}

std::vector<std::size_t> fps(std::span<const Point3> points, std::size_t n, std::size_t seed_index) {
  if (n > points.size()) {
    throw RangeError("fps: requested " + std::to_string(n) + " samples from " + std::to_string(points.size()) +
                     " points");
  }
  if (n > 0 && seed_index >= points.size()) throw RangeError("fps: seed index out of range");
  std::vector<std::size_t> order;
  order.reserve(n);
  if (n == 0) return order;
  std::vector<double> min_d(points.size(), std::numeric_limits<double>::infinity());
  std::size_t current = seed_index;
  for (std::size_t s = 0; s < n; ++s) {
    order.push_back(current);
    std::size_t best = 0;
    double best_d = -1.0;
    for (std::size_t i = 0; i < points.size(); ++i) {
      min_d[i] = std::min(min_d[i], squared_distance(points[i], points[current]));
      if (min_d[i] > best_d) {
        best_d = min_d[i];
        best = i;
      }
    }
    current = best;
  }
  return order;
}

PatchSet knn_group(std::span<const Point3> points, std::span<const Point3> centers, std::size_t k) {
  if (k > points.size()) {
    throw RangeError("knn_group: k = " + std::to_string(k) + " exceeds " + std::to_string(points.size()) + " points");
  }
  PatchSet set;
  set.patch_size = k;
  set.centers.assign(centers.begin(), centers.end());
  set.groups.reserve(centers.size() * k);
  set.member_indices.reserve(centers.size() * k);
  std::vector<std::pair<double, std::size_t>> dist(points.size());
  for (const auto& c : centers) {
    for (std::size_t i = 0; i < points.size(); ++i) dist[i] = {squared_distance(points[i], c), i};
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k), dist.end());
    for (std::size_t j = 0; j < k; ++j) {
      const auto& p = points[dist[j].second];
      set.member_indices.push_back(dist[j].second);
      set.groups.push_back({p[0] - c[0], p[1] - c[1], p[2] - c[2]});
    }
  }
  return set;
}

PatchSet patchify(const PointCloud& cloud, std::size_t num_patches, std::size_t patch_size) {
  const auto idx = fps(cloud.points, num_patches, 0);
  std::vector<Point3> centers;
  centers.reserve(idx.size());
  for (auto i : idx) centers.push_back(cloud.points[i]);
  PatchSet set = knn_group(cloud.points, centers, patch_size);
  set.center_indices = idx;
  set.sample_id = cloud.sample_id;
  return set;
}

AugmentPolicy parse_augment_policy(const std::string& name) {
  if (name == "none") return AugmentPolicy::None;
  if (name == "scale-translate") return AugmentPolicy::ScaleTranslate;
  if (name == "rotate") return AugmentPolicy::Rotate;
  throw ConfigError("unknown augmentation policy '" + name + "' (expected none, scale-translate, rotate)");
}

std::string to_string(AugmentPolicy policy) {
  switch (policy) {
    case AugmentPolicy::None: return "none";
    case AugmentPolicy::ScaleTranslate: return "scale-translate";
    case AugmentPolicy::Rotate: return "rotate";
  }
  return "none";
}

std::array<double, 9> random_rotation(Rng& rng) {
  // Shoemake's uniform unit quaternion.
  const double u1 = rng.uniform(), u2 = rng.uniform(), u3 = rng.uniform();
  const double a = std::sqrt(1.0 - u1), b = std::sqrt(u1);
  const double tau = 2.0 * std::numbers::pi;
  const double w = a * std::sin(tau * u2), x = a * std::cos(tau * u2);
  const double y = b * std::sin(tau * u3), z = b * std::cos(tau * u3);
  return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
          2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
          2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

void rotate(std::vector<Point3>& points, const std::array<double, 9>& m) {
  for (auto& p : points) {
    const Point3 q = p;
    for (int r = 0; r < 3; ++r) p[r] = m[3 * r] * q[0] + m[3 * r + 1] * q[1] + m[3 * r + 2] * q[2];
  }
}

PointCloud augment(const PointCloud& cloud, AugmentPolicy policy, Rng& rng) {
  PointCloud out = cloud;
  switch (policy) {
    case AugmentPolicy::None:
      break;
    case AugmentPolicy::ScaleTranslate: {
      const double s = rng.uniform(2.0 / 3.0, 1.5);
      Point3 t;
      for (auto& v : t) v = rng.uniform(-0.2, 0.2);
      for (auto& p : out.points)
        for (int a = 0; a < 3; ++a) p[a] = p[a] * s + t[a];
      break;
    }
    case AugmentPolicy::Rotate:
      rotate(out.points, random_rotation(rng));
      break;
  }
  return out;
}

}  // namespace pcpetl
