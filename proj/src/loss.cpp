#include "pcpetl/loss.hpp"

#include <algorithm>
#include <cmath>

#include "pcpetl/errors.hpp"
#include "pcpetl/ops.hpp"

namespace pcpetl {

Tensor cross_entropy(const Tensor& logits, const std::vector<int>& labels, double smoothing) {
  if (logits.rank() != 2 || logits.shape()[0] != labels.size()) {
    throw DimensionError("cross_entropy: logits " + shape_str(logits.shape()) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  for (int y : labels) {
    if (y < 0 || static_cast<std::size_t>(y) >= C) {
      throw RangeError("cross_entropy: label " + std::to_string(y) + " outside [0, " + std::to_string(C) + ")");
    }
  }
  const auto x = logits.data();
  std::vector<double> probs(B * C);
  double total = 0.0;
  for (std::size_t b = 0; b < B; ++b) {
    const double* row = x.data() + b * C;
    const double mx = *std::max_element(row, row + C);
    double z = 0.0;
    for (std::size_t c = 0; c < C; ++c) z += std::exp(row[c] - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < C; ++c) {
      const double logp = row[c] - lse;
      probs[b * C + c] = std::exp(logp);
      const double target = (1.0 - smoothing) * (static_cast<std::size_t>(labels[b]) == c ? 1.0 : 0.0) +
                            smoothing / static_cast<double>(C);
      total -= target * logp;
    }
  }
  Tensor out = Tensor::scalar(total / static_cast<double>(B));
  if (should_record({&logits})) {
    out.set_requires_grad(true);
    Tensor lg = logits;
    auto impl = out.impl();
    active_tape()->record(std::vector<Tensor>{logits}, out,
                          [lg, impl, probs = std::move(probs), labels, smoothing, B, C]() mutable {
                            const double g = impl->grad[0] / static_cast<double>(B);
                            auto dx = lg.mutable_grad();
                            for (std::size_t b = 0; b < B; ++b) {
                              for (std::size_t c = 0; c < C; ++c) {
                                const double target =
                                    (1.0 - smoothing) * (static_cast<std::size_t>(labels[b]) == c ? 1.0 : 0.0) +
                                    smoothing / static_cast<double>(C);
                                dx[b * C + c] += g * (probs[b * C + c] - target);
                              }
                            }
                          });
  }
  return out;
}

std::vector<int> argmax_rows(const Tensor& logits) {
  const std::size_t B = logits.shape()[0], C = logits.shape()[1];
  std::vector<int> out(B);
  const auto x = logits.data();
  for (std::size_t b = 0; b < B; ++b) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < C; ++c)
      if (x[b * C + c] > x[b * C + best]) best = c;
    out[b] = static_cast<int>(best);
  }
  return out;
}

}  // namespace pcpetl
