#pragma once

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "pcpetl/rng.hpp"
#include "pcpetl/tensor.hpp"

namespace pcpetl {

struct Parameter {
  std::string name;
  // Accounting group, e.g. "backbone", "head", "tfts", "adapter".
  std::string group;
  Tensor tensor;
  bool tunable = false;
};

// Named model parameters in registration order. Tunable flags are settled
// once by the active strategy and then locked for the run.
class ParameterStore {
 public:
  Tensor add(const std::string& name, const std::string& group, Tensor tensor);

  bool contains(const std::string& name) const { return index_.count(name) != 0; }
  const Parameter& at(const std::string& name) const;
  Tensor get(const std::string& name) const { return at(name).tensor; }

  const std::vector<Parameter>& all() const { return params_; }

  void set_tunable(const std::string& name, bool tunable);
  void freeze_all();
  void lock() { locked_ = true; }
  bool locked() const { return locked_; }

  std::size_t total_count() const;
  std::size_t tunable_count() const;
  std::vector<std::string> tunable_names() const;

  void clear_grads();

  // FNV-1a over the bytes of every parameter (optionally frozen ones only),
  // in registration order.
  std::uint64_t checksum(bool frozen_only = false) const;

 private:
  std::vector<Parameter> params_;
  std::unordered_map<std::string, std::size_t> index_;
  bool locked_ = false;
};

// Initializers draw from rng.split(hash(name)), so values do not depend on
// registration order.
std::uint64_t name_stream(const std::string& name);
void init_xavier_uniform(Tensor& t, std::size_t fan_in, std::size_t fan_out, const Rng& rng, const std::string& name);
void init_uniform(Tensor& t, double bound, const Rng& rng, const std::string& name);
void init_normal(Tensor& t, double stddev, const Rng& rng, const std::string& name);

}  // namespace pcpetl
