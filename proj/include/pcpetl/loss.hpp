#pragma once

#include <vector>

#include "pcpetl/tensor.hpp"

namespace pcpetl {

// Mean over the batch of log-softmax NLL against targets (1 - s) one-hot +
// s / C uniform. logits [B, C].
Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, double smoothing = 0.0);

// Row-wise argmax; ties go to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);

}  // namespace pcpetl
