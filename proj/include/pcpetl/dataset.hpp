// Procedural synthetic-shape benchmark and few-shot episode sampling.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pcpetl/pointcloud.hpp"

namespace pcpetl {

enum class ShapeFamily { Sphere, Box, Cylinder, Cone, Torus, PlaneCluster, Capsule, Ellipsoid };

ShapeFamily parse_shape_family(const std::string& name);
std::string to_string(ShapeFamily family);
std::vector<ShapeFamily> all_shape_families();

enum class RotationPolicy { None, Z, SO3 };

RotationPolicy parse_rotation_policy(const std::string& name);
std::string to_string(RotationPolicy policy);

enum class Split { Train = 0, Test = 1 };

struct DatasetSpec {
  std::vector<ShapeFamily> families = all_shape_families();
  std::size_t points = 512;
  double noise = 0.0;      // per-coordinate Gaussian sigma on the unit-sphere object
  double occlusion = 0.0;  // fraction of object points removed by one spherical cap
  double clutter = 0.0;    // fraction of the cloud replaced by off-object points
  RotationPolicy rotation = RotationPolicy::SO3;
  std::uint64_t seed = 0;
  std::size_t train_per_class = 32;
  std::size_t test_per_class = 16;

  std::size_t num_classes() const { return families.size(); }
  std::size_t split_size(Split split) const;
};

// Half-space cap {p : dot(p, direction) > threshold} in the coordinates of the
// object before occlusion.
struct OcclusionCap {
  Point3 direction{};
  double threshold = 0.0;
};

struct GeneratedSample {
  PointCloud cloud;
  // Object points (unit-sphere normalized, noisy) before the cap was removed.
  std::vector<Point3> pre_occlusion;
  std::optional<OcclusionCap> cap;
  std::size_t removed = 0;
};

// Pure function of (spec, split, index). Sample i has class i mod C.
PointCloud generate(const DatasetSpec& spec, Split split, std::size_t index);
GeneratedSample generate_detailed(const DatasetSpec& spec, Split split, std::size_t index);

std::uint64_t sample_id_for(const DatasetSpec& spec, Split split, std::size_t index);

// Rounds coordinates through 32-bit floats, matching the on-disk format.
void quantize_f32(PointCloud& cloud);

struct Dataset {
  DatasetSpec spec;
  std::vector<PointCloud> train;
  std::vector<PointCloud> test;
};

// Generates both splits, quantized to f32. `threads` = 0 reads PETL_THREADS
// (default 1).
Dataset build_dataset(const DatasetSpec& spec, unsigned threads = 0);
unsigned generation_threads();

struct FewShotEpisode {
  std::size_t way = 0;
  std::size_t shot = 0;
  std::vector<int> classes;  // original labels; episode label j means classes[j]
  std::vector<PointCloud> support;
  std::vector<PointCloud> query;
};

inline constexpr std::size_t kEpisodeQueriesPerClass = 20;

// Labels in the episode are remapped to 0..way-1.
FewShotEpisode sample_episode(const std::vector<PointCloud>& pool, std::size_t way, std::size_t shot, Rng& rng,
                              std::size_t queries_per_class = kEpisodeQueriesPerClass);

}  // namespace pcpetl
