// Central-difference gradient verification.
#pragma once

#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "pcpetl/tensor.hpp"

namespace pcpetl {

struct GradcheckResult {
  std::string name;
  std::size_t elements = 0;
  // max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf)
  double max_rel_error = 0.0;
  double max_abs_error = 0.0;
  bool passed = false;
};

using NamedTensor = std::pair<std::string, Tensor>;

// `loss_fn` must build the loss from the given tensors using only recorded
// ops. Analytic gradients come from one taped evaluation; numeric ones from
// two untaped evaluations per element, perturbing the tensor data in place.
std::vector<GradcheckResult> gradcheck(const std::function<Tensor()>& loss_fn,
                                       const std::vector<NamedTensor>& tensors, double eps = 1e-5,
                                       double tolerance = 1e-4);

// Relative error as reported above; below `floor` both sides count as zero.
double relative_error(std::span<const double> analytic, std::span<const double> numeric,
                      double floor = 1e-10);

}  // namespace pcpetl
