#include "pcpetl/pcb_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pcpetl/errors.hpp"

namespace pcpetl {

namespace {

static_assert(std::endian::native == std::endian::little, "pcb encoding assumes a little-endian host");

template <typename T>
void put(std::string& out, T value) {
  char buf[sizeof(T)];
  std::memcpy(buf, &value, sizeof(T));
  out.append(buf, sizeof(T));
}

template <typename T>
T take(const std::string& in, std::size_t& pos, const std::string& origin) {
  if (pos + sizeof(T) > in.size()) throw FormatError(origin + ": truncated pcb file");
  T value;
  std::memcpy(&value, in.data() + pos, sizeof(T));
  pos += sizeof(T);
  return value;
}

std::string slurp(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string encode_pcb(const PointCloud& cloud) {
  std::string out = "PCB1";
  put<std::uint32_t>(out, static_cast<std::uint32_t>(cloud.points.size()));
  for (const auto& p : cloud.points)
    for (double v : p) put<float>(out, static_cast<float>(v));
  put<std::uint16_t>(out, static_cast<std::uint16_t>(cloud.label));
  return out;
}

PointCloud decode_pcb(const std::string& bytes, const std::string& origin) {
  if (bytes.size() < 4 || bytes.compare(0, 4, "PCB1") != 0) throw FormatError(origin + ": bad magic, expected PCB1");
  std::size_t pos = 4;
  const auto count = take<std::uint32_t>(bytes, pos, origin);
  if (bytes.size() != 4 + 4 + static_cast<std::size_t>(count) * 12 + 2) {
    throw FormatError(origin + ": size does not match point count " + std::to_string(count));
  }
  PointCloud cloud;
  cloud.points.resize(count);
  for (auto& p : cloud.points)
    for (auto& v : p) v = take<float>(bytes, pos, origin);
  cloud.label = take<std::uint16_t>(bytes, pos, origin);
  return cloud;
}

void write_pcb(const std::filesystem::path& path, const PointCloud& cloud) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write " + path.string());
  const auto bytes = encode_pcb(cloud);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw DataError("write failed: " + path.string());
}

PointCloud read_pcb(const std::filesystem::path& path) { return decode_pcb(slurp(path), path.string()); }

PointCloud read_xyz_ascii(const std::filesystem::path& path, int label) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open " + path.string());
  PointCloud cloud;
  cloud.label = label;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream ls(line);
    Point3 p;
    std::string extra;
    if (!(ls >> p[0] >> p[1] >> p[2]) || (ls >> extra)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected 'x y z', got '" + line + "'");
    }
    cloud.points.push_back(p);
  }
  if (cloud.points.empty()) throw ParseError(path.string() + ": no points");
  return cloud;
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  std::vector<ManifestEntry> entries;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    std::istringstream ls(line);
    ManifestEntry e;
    if (!(ls >> e.path >> e.label)) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": expected '<path> <label>'");
    }
    entries.push_back(e);
  }
  return entries;
}

void write_manifest(const std::filesystem::path& path, const std::vector<ManifestEntry>& entries) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  for (const auto& e : entries) out << e.path << ' ' << e.label << '\n';
}

}  // namespace pcpetl
