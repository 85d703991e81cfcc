#include "pcpetl/params.hpp"

#include <cmath>
#include <cstring>

#include "pcpetl/errors.hpp"

namespace pcpetl {

Tensor ParameterStore::add(const std::string& name, const std::string& group, Tensor tensor) {
  if (locked_) throw ContractError("parameter store is locked; cannot add " + name);
  if (contains(name)) throw ConfigError("duplicate parameter name " + name);
  tensor.set_requires_grad(false);
  index_[name] = params_.size();
  params_.push_back({name, group, tensor, false});
  return tensor;
}

const Parameter& ParameterStore::at(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  return params_[it->second];
}

void ParameterStore::set_tunable(const std::string& name, bool tunable) {
  if (locked_) throw ContractError("tunable flags are locked for this run (" + name + ")");
  auto it = index_.find(name);
  if (it == index_.end()) throw ConfigError("unknown parameter " + name);
  auto& p = params_[it->second];
  p.tunable = tunable;
  p.tensor.set_requires_grad(tunable);
}

void ParameterStore::freeze_all() {
  for (const auto& p : params_) set_tunable(p.name, false);
}

std::size_t ParameterStore::total_count() const {
  std::size_t n = 0;
  for (const auto& p : params_) n += p.tensor.numel();
  return n;
}

std::size_t ParameterStore::tunable_count() const {
  std::size_t n = 0;
  for (const auto& p : params_)
    if (p.tunable) n += p.tensor.numel();
  return n;
}

std::vector<std::string> ParameterStore::tunable_names() const {
  std::vector<std::string> names;
  for (const auto& p : params_)
    if (p.tunable) names.push_back(p.name);
  return names;
}

void ParameterStore::clear_grads() {
  for (auto& p : params_) p.tensor.clear_grad();
}

std::uint64_t ParameterStore::checksum(bool frozen_only) const {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  auto mix = [&h](const void* data, std::size_t n) {
    const auto* bytes = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 0x100000001b3ULL;
    }
  };
  for (const auto& p : params_) {
    if (frozen_only && p.tunable) continue;
    mix(p.name.data(), p.name.size());
    mix(p.tensor.data().data(), p.tensor.numel() * sizeof(double));
  }
  return h;
}

std::uint64_t name_stream(const std::string& name) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : name) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

void init_uniform(Tensor& t, double bound, const Rng& rng, const std::string& name) {
  Rng r = rng.split(name_stream(name));
  for (auto& v : t.mutable_data()) v = r.uniform(-bound, bound);
}

void init_xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, const Rng& rng, const std::string& name) {
  init_uniform(t, std::sqrt(6.0 / static_cast<double>(fan_in + fan_out)), rng, name);
}

void init_normal(Tensor& t, double stddev, const Rng& rng, const std::string& name) {
  Rng r = rng.split(name_stream(name));
  for (auto& v : t.mutable_data()) v = stddev * r.normal();
}

}  // namespace pcpetl
