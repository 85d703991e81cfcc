#include "pcpetl/optim.hpp"

#include <cmath>
#include <numbers>

#include "pcpetl/errors.hpp"

namespace pcpetl {

AdamW::AdamW(ParameterStore& store, AdamWConfig config) : config_(config) {
  for (const auto& p : store.all()) {
    if (!p.tunable) continue;
    slots_[p.name] = {p.tensor, std::vector<double>(p.tensor.numel(), 0.0), std::vector<double>(p.tensor.numel(), 0.0)};
  }
}

void AdamW::step(double lr, double weight_decay) {
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (auto& [name, s] : slots_) {
    auto theta = s.param.mutable_data();
    const bool has_grad = s.param.has_grad();
    const auto g = s.param.grad();
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = has_grad ? g[i] : 0.0;
      s.m[i] = b1 * s.m[i] + (1.0 - b1) * gi;
      s.v[i] = b2 * s.v[i] + (1.0 - b2) * gi * gi;
      const double mhat = s.m[i] / c1, vhat = s.v[i] / c2;
      theta[i] -= lr * (mhat / (std::sqrt(vhat) + config_.eps) + weight_decay * theta[i]);
    }
  }
}

std::vector<std::string> AdamW::state_keys() const {
  std::vector<std::string> keys;
  for (const auto& [name, s] : slots_) keys.push_back(name);
  return keys;
}

std::size_t AdamW::state_bytes() const {
  std::size_t n = 0;
  for (const auto& [name, s] : slots_) n += (s.m.size() + s.v.size()) * sizeof(double);
  return n;
}

double cosine_lr(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double base_lr, double min_lr) {
  if (step > total_steps) throw RangeError("cosine_lr: step beyond the schedule");
  if (step < warmup_steps) return base_lr * static_cast<double>(step) / static_cast<double>(warmup_steps);
  if (total_steps <= warmup_steps) return base_lr;
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + std::cos(std::numbers::pi * progress));
}

}  // namespace pcpetl
