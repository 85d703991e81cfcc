#include "pcpetl/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

#include "pcpetl/errors.hpp"

namespace pcpetl {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'P', 'E', 'T', 'L'};

template <typename T>
void put(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  Reader(const std::string& bytes, const std::string& origin) : bytes_(bytes), origin_(origin) {}

  template <typename T>
  T get(const char* what) {
    T v;
    std::memcpy(&v, take(sizeof(T), what), sizeof(T));
    return v;
  }

  const char* take(std::size_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw FormatError(origin_ + ": truncated checkpoint while reading " + what + " at byte " +
                        std::to_string(pos_));
    }
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  const std::string& bytes_;
  const std::string& origin_;
  std::size_t pos_ = 0;
};

std::size_t entry_bytes(const std::string& name, const Tensor& t) {
  return 4 + name.size() + 4 + 4 * t.rank() + 8 * t.numel();
}

}  // namespace

std::string to_string(CheckpointMode mode) { return mode == CheckpointMode::Full ? "full" : "delta"; }

CheckpointMode parse_checkpoint_mode(const std::string& s) {
  if (s == "full") return CheckpointMode::Full;
  if (s == "delta") return CheckpointMode::Delta;
  throw ConfigError("unknown checkpoint mode '" + s + "'");
}

Checkpoint make_checkpoint(const ParameterStore& store, CheckpointMode mode, const ConfigHash& hash) {
  Checkpoint c;
  c.mode = mode;
  c.hash = hash;
  for (const auto& p : store.all())
    if (mode == CheckpointMode::Full || p.tunable) c.entries.emplace_back(p.name, p.tensor);
  return c;
}

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, 4);
  put<std::uint16_t>(out, ckpt.version);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(ckpt.mode));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const auto& [name, t] : ckpt.entries) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto e : t.shape()) put<std::uint32_t>(out, static_cast<std::uint32_t>(e));
    const auto data = t.data();
    out.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  out.append(reinterpret_cast<const char*>(ckpt.hash.data()), ckpt.hash.size());
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes, const std::string& origin) {
  Reader r(bytes, origin);
  if (std::memcmp(r.take(4, "magic"), kMagic, 4) != 0) throw FormatError(origin + ": not a checkpoint (bad magic)");
  Checkpoint c;
  c.version = r.get<std::uint16_t>("version");
  if (c.version != kCheckpointVersion) {
    throw FormatError(origin + ": unsupported checkpoint version " + std::to_string(c.version));
  }
  const auto mode = r.get<std::uint8_t>("mode");
  if (mode > 1) throw FormatError(origin + ": unknown checkpoint mode " + std::to_string(mode));
  c.mode = static_cast<CheckpointMode>(mode);
  const auto count = r.get<std::uint32_t>("entry count");
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint32_t>("name length");
    std::string name(r.take(len, "name"), len);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw FormatError(origin + ": implausible rank " + std::to_string(rank) + " for " + name);
    Shape shape(rank);
    std::size_t n = 1;
    for (auto& e : shape) {
      e = r.get<std::uint32_t>("extent");
      n *= e;
    }
    if (n > r.remaining() / sizeof(double)) {
      throw FormatError(origin + ": truncated checkpoint in payload of " + name);
    }
    std::vector<double> values(n);
    std::memcpy(values.data(), r.take(n * sizeof(double), "payload"), n * sizeof(double));
    c.entries.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  std::memcpy(c.hash.data(), r.take(c.hash.size(), "config hash"), c.hash.size());
  if (r.remaining() != 0) throw FormatError(origin + ": trailing bytes after checkpoint");
  return c;
}

void save_checkpoint(const std::filesystem::path& path, const ParameterStore& store, CheckpointMode mode,
                     const ConfigHash& hash) {
  const std::string bytes = encode_checkpoint(make_checkpoint(store, mode, hash));
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write checkpoint " + path.string());
  f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!f) throw DataError("failed writing checkpoint " + path.string());
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return decode_checkpoint(ss.str(), path.string());
}

std::size_t checkpoint_bytes(const ParameterStore& store, CheckpointMode mode) {
  std::size_t n = 4 + 2 + 1 + 4 + 32;
  for (const auto& p : store.all())
    if (mode == CheckpointMode::Full || p.tunable) n += entry_bytes(p.name, p.tensor);
  return n;
}

std::size_t load_checkpoint(const Checkpoint& ckpt, ParameterStore& store, const ConfigHash& expected,
                            const LoadOptions& options) {
  if (ckpt.mode == CheckpointMode::Delta && ckpt.hash != expected) {
    throw ConfigError("delta checkpoint config hash " + to_hex(ckpt.hash) + " does not match model config hash " +
                      to_hex(expected));
  }
  std::size_t loaded = 0;
  for (const auto& [name, t] : ckpt.entries) {
    if (ckpt.mode == CheckpointMode::Full && !name.starts_with(options.prefix)) continue;
    if (!store.contains(name)) {
      if (ckpt.mode == CheckpointMode::Full && options.allow_missing) continue;
      throw ConfigError("checkpoint tensor " + name + " has no counterpart in the model");
    }
    Tensor dst = store.get(name);
    if (dst.shape() != t.shape()) {
      throw ConfigError("checkpoint tensor " + name + " has shape " + shape_str(t.shape()) + ", model expects " +
                        shape_str(dst.shape()));
    }
    std::copy(t.data().begin(), t.data().end(), dst.mutable_data().begin());
    ++loaded;
  }
  return loaded;
}

}  // namespace pcpetl
