// Point-cloud file formats.
//
// .pcb binary layout (little-endian):
//   "PCB1" | u32 point count | count x 3 f32 | u16 label
//
// Dataset directories hold one .pcb per sample plus `manifest.txt` with one
// `<relative-path> <label>` line per sample and `spec.cfg` echoing the
// generating spec.
#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "pcpetl/dataset.hpp"

namespace pcpetl {

void write_pcb(const std::filesystem::path& path, const PointCloud& cloud);
PointCloud read_pcb(const std::filesystem::path& path);

std::string encode_pcb(const PointCloud& cloud);
PointCloud decode_pcb(const std::string& bytes, const std::string& origin = "<memory>");

// "x y z" per line; blank lines and lines starting with '#' are skipped.
PointCloud read_xyz_ascii(const std::filesystem::path& path, int label = 0);

struct ManifestEntry {
  std::string path;
  int label = 0;
};

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);
void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries);

}  // namespace pcpetl
