// Differentiable tensor operations. Every op records itself on the active
// tape when at least one input requires grad; otherwise it is a plain
// evaluation with no bookkeeping.
#pragma once

#include <vector>

#include "pcpetl/rng.hpp"
#include "pcpetl/tensor.hpp"

namespace pcpetl {

// 2-D product a[m x k] * b[k x n].
Tensor matmul(const Tensor& a, const Tensor& b);

// x[..., in] * w[out, in]^T + bias[out]. `bias` may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = {});

// Numpy-style broadcasting elementwise arithmetic.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

Tensor relu(const Tensor& x);
// Exact form 0.5 x (1 + erf(x / sqrt 2)).
Tensor gelu(const Tensor& x);

// Normalizes over the last axis; requires that axis to have extent >= 2.
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);

Tensor softmax(const Tensor& x, int axis);

// Reductions remove `axis` from the shape.
Tensor mean_pool(const Tensor& x, int axis);
Tensor max_pool(const Tensor& x, int axis);
// Mean of the k largest entries along `axis`.
Tensor topk_pool(const Tensor& x, int axis, std::size_t k);
Tensor sum(const Tensor& x);

Tensor concat(const std::vector<Tensor>& parts, int axis);
Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length);
Tensor reshape(const Tensor& x, Shape shape);

// Multi-head scaled dot-product attention over [B, T, d] (or [T, d])
// projections; scaling is 1/sqrt(d / heads).
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads);
// Softmax weights [B, heads, T, T] for inspection; never recorded.
Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads);

// Inverted dropout; identity when p == 0.
Tensor dropout(const Tensor& x, double p, Rng& rng);

// Output of a new op: requires grad iff recording and any input requires grad.
bool should_record(std::initializer_list<const Tensor*> inputs);

}  // namespace pcpetl
