// AdamW with decoupled weight decay and the warmup + cosine schedule.
#pragma once

#include <map>
#include <string>
#include <vector>

#include "pcpetl/params.hpp"

namespace pcpetl {

struct AdamWConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class AdamW {
 public:
  // Allocates moments for the tunable tensors of `store` only.
  explicit AdamW(ParameterStore& store, AdamWConfig config = {});

  // theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta).
  // Tensors without a gradient buffer are treated as having zero gradient.
  void step(double lr, double weight_decay);

  std::size_t steps() const { return t_; }
  std::vector<std::string> state_keys() const;
  std::size_t state_bytes() const;

 private:
  struct Slot {
    Tensor param;
    std::vector<double> m, v;
  };

  AdamWConfig config_;
  std::map<std::string, Slot> slots_;
  std::size_t t_ = 0;
};

// Linear warmup from 0 to base_lr over `warmup_steps`, then a half cosine
// down to min_lr at `total_steps`.
double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr,
                 double min_lr = 1e-6);

}  // namespace pcpetl
