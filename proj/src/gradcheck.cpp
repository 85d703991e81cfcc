#include "pcpetl/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace pcpetl {

double relative_error(std::span<const double> analytic, std::span<const double> numeric, double floor) {
  double diff = 0.0, scale = 0.0;
  for (std::size_t i = 0; i < analytic.size(); ++i) {
    diff = std::max(diff, std::abs(analytic[i] - numeric[i]));
    scale = std::max({scale, std::abs(analytic[i]), std::abs(numeric[i])});
  }
  if (scale < floor) return diff < floor ? 0.0 : diff / floor;
  return diff / scale;
}

std::vector<GradcheckResult> gradcheck(const std::function<Tensor()>& loss_fn,
                                       const std::vector<NamedTensor>& tensors, double eps,
                                       double tolerance) {
  std::vector<bool> restore_flags;
  for (const auto& [name, t] : tensors) {
    restore_flags.push_back(t.requires_grad());
    Tensor handle = t;
    handle.set_requires_grad(true);
    handle.clear_grad();
  }
  {
    Tape tape;
    TapeGuard guard(tape);
    Tensor loss = loss_fn();
    tape.backward(loss);
  }
  std::vector<GradcheckResult> results;
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    Tensor t = tensors[ti].second;
    std::vector<double> analytic(t.numel(), 0.0);
    if (t.has_grad()) std::copy(t.grad().begin(), t.grad().end(), analytic.begin());
    std::vector<double> numeric(t.numel());
    auto values = t.mutable_data();
    for (std::size_t i = 0; i < values.size(); ++i) {
      const double original = values[i];
      values[i] = original + eps;
      const double up = loss_fn().item();
      values[i] = original - eps;
      const double down = loss_fn().item();
      values[i] = original;
      numeric[i] = (up - down) / (2.0 * eps);
    }
    GradcheckResult r;
    r.name = tensors[ti].first;
    r.elements = values.size();
    r.max_rel_error = relative_error(analytic, numeric);
    for (std::size_t i = 0; i < analytic.size(); ++i)
      r.max_abs_error = std::max(r.max_abs_error, std::abs(analytic[i] - numeric[i]));
    r.passed = r.max_rel_error < tolerance;
    results.push_back(r);
  }
  for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
    Tensor handle = tensors[ti].second;
    handle.set_requires_grad(restore_flags[ti]);
    handle.clear_grad();
  }
  return results;
}

}  // namespace pcpetl
