// Point clouds, normalization, farthest-point sampling, kNN grouping and
// augmentation.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "pcpetl/rng.hpp"

namespace pcpetl {

using Point3 = std::array<double, 3>;

struct PointCloud {
  std::vector<Point3> points;
  int label = 0;
  std::uint64_t sample_id = 0;

  std::size_t size() const { return points.size(); }
};

// Patch decomposition of one cloud: N centers and N groups of k
// center-relative points, stored group-major.
struct PatchSet {
  std::vector<Point3> centers;
  std::vector<std::size_t> center_indices;
  std::vector<Point3> groups;
  std::vector<std::size_t> member_indices;
  std::size_t patch_size = 0;
  std::uint64_t sample_id = 0;

  std::size_t num_patches() const { return centers.size(); }
  const Point3& member(std::size_t patch, std::size_t j) const { return groups[patch * patch_size + j]; }
};

double squared_distance(const Point3& a, const Point3& b);

// Centers on the centroid and scales the farthest point to radius 1. A cloud
// that is already normalized within 1e-12 is returned unchanged, which makes
// the operation idempotent bit-for-bit.
void normalize(std::vector<Point3>& points);
PointCloud normalized(PointCloud cloud);

// Greedy farthest-point order beginning at `seed_index`; ties go to the
// lowest index.
std::vector<std::size_t> fps(std::span<const Point3> points, std::size_t n, std::size_t seed_index = 0);

// For each center the k nearest points (ties by lowest index), expressed
// relative to the center.
PatchSet knn_group(std::span<const Point3> points, std::span<const Point3> centers, std::size_t k);

// FPS from index 0 followed by kNN grouping around the sampled points.
PatchSet patchify(const PointCloud& cloud, std::size_t num_patches, std::size_t patch_size);

enum class AugmentPolicy { None, ScaleTranslate, Rotate };

AugmentPolicy parse_augment_policy(const std::string& name);
std::string to_string(AugmentPolicy policy);

PointCloud augment(const PointCloud& cloud, AugmentPolicy policy, Rng& rng);

// Uniformly distributed rotation matrix (row-major 3x3).
std::array<double, 9> random_rotation(Rng& rng);
void rotate(std::vector<Point3>& points, const std::array<double, 9>& rotation);

}  // namespace pcpetl
