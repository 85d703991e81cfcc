#include "pcpetl/ops.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace pcpetl {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapM = Eigen::Map<RowMat>;
using CMapM = Eigen::Map<const RowMat>;
using StridedM = Eigen::Map<RowMat, 0, Eigen::OuterStride<>>;
using CStridedM = Eigen::Map<const RowMat, 0, Eigen::OuterStride<>>;
using ImplPtr = std::shared_ptr<TensorImpl>;

std::size_t resolve_axis(int axis, std::size_t rank, const char* op) {
  const int r = static_cast<int>(rank);
  const int a = axis < 0 ? axis + r : axis;
  if (a < 0 || a >= r) {
    throw RangeError(std::string(op) + ": axis " + std::to_string(axis) + " invalid for rank " +
                     std::to_string(rank));
  }
  return static_cast<std::size_t>(a);
}

std::span<double> grad_of(const ImplPtr& impl) {
  if (impl->grad.empty()) impl->grad.assign(impl->data.size(), 0.0);
  return impl->grad;
}

void push(std::initializer_list<Tensor> inputs, const Tensor& out, Tape::BackwardFn fn) {
  std::vector<Tensor> ins(inputs);
  active_tape()->record(ins, out, std::move(fn));
}

// Decomposes `shape` around `axis` into outer x extent x inner.
struct AxisSplit {
  std::size_t outer = 1, extent = 1, inner = 1;
};

AxisSplit split_at(const Shape& shape, std::size_t axis) {
  AxisSplit s;
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  s.extent = shape[axis];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

Shape drop_axis(const Shape& shape, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out.push_back(shape[i]);
  return out;
}

// Per-output-element source offsets for a broadcast binary op. Empty maps
// mean the operand is read with the identity index.
struct BroadcastPlan {
  Shape out;
  std::vector<std::size_t> a_index, b_index;
};

BroadcastPlan plan_broadcast(const Shape& a, const Shape& b, const char* op) {
  BroadcastPlan plan;
  if (a == b) {
    plan.out = a;
    return plan;
  }
  const std::size_t rank = std::max(a.size(), b.size());
  Shape pa(rank, 1), pb(rank, 1);
  std::copy(a.begin(), a.end(), pa.begin() + static_cast<std::ptrdiff_t>(rank - a.size()));
  std::copy(b.begin(), b.end(), pb.begin() + static_cast<std::ptrdiff_t>(rank - b.size()));
  plan.out.resize(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    if (pa[i] != pb[i] && pa[i] != 1 && pb[i] != 1) {
      throw DimensionError(std::string(op) + ": cannot broadcast " + shape_str(a) + " with " +
                           shape_str(b));
    }
    plan.out[i] = std::max(pa[i], pb[i]);
  }
  auto strides = [&](const Shape& p) {
    std::vector<std::size_t> st(rank, 0);
    std::size_t acc = 1;
    for (std::size_t i = rank; i-- > 0;) {
      st[i] = p[i] == 1 ? 0 : acc;
      acc *= p[i];
    }
    return st;
  };
  const auto sa = strides(pa), sb = strides(pb);
  const std::size_t n = numel(plan.out);
  plan.a_index.resize(n);
  plan.b_index.resize(n);
  std::vector<std::size_t> idx(rank, 0);
  std::size_t oa = 0, ob = 0;
  for (std::size_t flat = 0; flat < n; ++flat) {
    plan.a_index[flat] = oa;
    plan.b_index[flat] = ob;
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < plan.out[d]) break;
      oa -= sa[d] * idx[d];
      ob -= sb[d] * idx[d];
      idx[d] = 0;
    }
  }
  return plan;
}

enum class BinaryKind { Add, Sub, Mul };

Tensor binary(const Tensor& a, const Tensor& b, BinaryKind kind, const char* name) {
  auto plan = std::make_shared<BroadcastPlan>(plan_broadcast(a.shape(), b.shape(), name));
  const bool identity = plan->a_index.empty();
  const std::size_t n = numel(plan->out);
  Buffer out(n);
  const auto& av = a.impl()->data;
  const auto& bv = b.impl()->data;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = av[identity ? i : plan->a_index[i]];
    const double y = bv[identity ? i : plan->b_index[i]];
    switch (kind) {
      case BinaryKind::Add: out[i] = x + y; break;
      case BinaryKind::Sub: out[i] = x - y; break;
      case BinaryKind::Mul: out[i] = x * y; break;
    }
  }
  const bool rec = should_record({&a, &b});
  Tensor result = Tensor::from(plan->out, std::move(out), rec);
  if (rec) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
    push({a, b}, result, [ai, bi, oi, plan, kind, identity]() {
      const auto& g = oi->grad;
      const std::size_t n = g.size();
      if (ai->requires_grad) {
        auto ga = grad_of(ai);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = identity ? i : plan->a_index[i];
          const std::size_t ib = identity ? i : plan->b_index[i];
          ga[ia] += kind == BinaryKind::Mul ? g[i] * bi->data[ib] : g[i];
        }
      }
      if (bi->requires_grad) {
        auto gb = grad_of(bi);
        for (std::size_t i = 0; i < n; ++i) {
          const std::size_t ia = identity ? i : plan->a_index[i];
          const std::size_t ib = identity ? i : plan->b_index[i];
          switch (kind) {
            case BinaryKind::Add: gb[ib] += g[i]; break;
            case BinaryKind::Sub: gb[ib] -= g[i]; break;
            case BinaryKind::Mul: gb[ib] += g[i] * ai->data[ia]; break;
          }
        }
      }
    });
  }
  return result;
}

template <typename Fwd, typename Deriv>
Tensor unary(const Tensor& x, Fwd fwd, Deriv deriv) {
  const auto& xv = x.impl()->data;
  Buffer out(xv.size());
  for (std::size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(x.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi, deriv]() {
      auto gx = grad_of(xi);
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * deriv(xi->data[i]);
    });
  }
  return result;
}

// Stable selection order for pooling: value descending, index ascending.
std::vector<std::size_t> topk_indices(const double* base, std::size_t extent, std::size_t stride,
                                      std::size_t k) {
  std::vector<std::size_t> order(extent);
  std::iota(order.begin(), order.end(), 0);
  std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                    [&](std::size_t l, std::size_t r) {
                      const double vl = base[l * stride], vr = base[r * stride];
                      if (vl != vr) return vl > vr;
                      return l < r;
                    });
  order.resize(k);
  return order;
}

}  // namespace

bool should_record(std::initializer_list<const Tensor*> inputs) {
  if (active_tape() == nullptr) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " and " +
                         shape_str(b.shape()));
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  Buffer out(m * n);
  MapM(out.data(), m, n).noalias() = CMapM(a.data().data(), m, k) * CMapM(b.data().data(), k, n);
  const bool rec = should_record({&a, &b});
  Tensor result = Tensor::from({m, n}, std::move(out), rec);
  if (rec) {
    ImplPtr ai = a.impl(), bi = b.impl(), oi = result.impl();
    push({a, b}, result, [ai, bi, oi, m, k, n]() {
      CMapM g(oi->grad.data(), m, n);
      if (ai->requires_grad)
        MapM(grad_of(ai).data(), m, k).noalias() += g * CMapM(bi->data.data(), k, n).transpose();
      if (bi->requires_grad)
        MapM(grad_of(bi).data(), k, n).noalias() += CMapM(ai->data.data(), m, k).transpose() * g;
    });
  }
  return result;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 1 || w.rank() != 2 || x.shape().back() != w.shape()[1]) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
  }
  const std::size_t in = w.shape()[1], outw = w.shape()[0];
  if (bias.defined() && (bias.rank() != 1 || bias.shape()[0] != outw)) {
    throw DimensionError("linear: bias " + shape_str(bias.shape()) + " does not match weight " +
                         shape_str(w.shape()));
  }
  const std::size_t rows = x.numel() / in;
  Shape out_shape = x.shape();
  out_shape.back() = outw;
  Buffer out(rows * outw);
  MapM y(out.data(), rows, outw);
  y.noalias() = CMapM(x.data().data(), rows, in) * CMapM(w.data().data(), outw, in).transpose();
  if (bias.defined()) y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(bias.data().data(), outw);
  const bool rec = should_record({&x, &w, &bias});
  Tensor result = Tensor::from(std::move(out_shape), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), wi = w.impl(), oi = result.impl();
    ImplPtr bi = bias.defined() ? bias.impl() : nullptr;
    std::vector<Tensor> ins{x, w};
    if (bias.defined()) ins.push_back(bias);
    active_tape()->record(ins, result, [xi, wi, bi, oi, rows, in, outw]() {
      CMapM g(oi->grad.data(), rows, outw);
      if (xi->requires_grad)
        MapM(grad_of(xi).data(), rows, in).noalias() += g * CMapM(wi->data.data(), outw, in);
      if (wi->requires_grad)
        MapM(grad_of(wi).data(), outw, in).noalias() += g.transpose() * CMapM(xi->data.data(), rows, in);
      if (bi && bi->requires_grad)
        Eigen::Map<Eigen::RowVectorXd>(grad_of(bi).data(), outw) += g.colwise().sum();
    });
  }
  return result;
}

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Add, "add"); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Sub, "sub"); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinaryKind::Mul, "mul"); }

Tensor scale(const Tensor& x, double factor) {
  return unary(x, [factor](double v) { return v * factor; }, [factor](double) { return factor; });
}

Tensor relu(const Tensor& x) {
  return unary(x, [](double v) { return v > 0.0 ? v : 0.0; }, [](double v) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor gelu(const Tensor& x) {
  return unary(
      x, [](double v) { return 0.5 * v * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0)); },
      [](double v) {
        const double cdf = 0.5 * (1.0 + std::erf(v * std::numbers::sqrt2 / 2.0));
        const double pdf = std::exp(-0.5 * v * v) * std::numbers::inv_sqrtpi / std::numbers::sqrt2;
        return cdf + v * pdf;
      });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  if (x.rank() < 1) throw DimensionError("layer_norm: scalar input");
  const std::size_t d = x.shape().back();
  if (d < 2) throw DimensionError("layer_norm: normalized axis has degenerate extent " + std::to_string(d));
  if (gamma.shape() != Shape{d} || beta.shape() != Shape{d}) {
    throw DimensionError("layer_norm: affine parameters " + shape_str(gamma.shape()) + "/" +
                         shape_str(beta.shape()) + " do not match input " + shape_str(x.shape()));
  }
  const std::size_t rows = x.numel() / d;
  auto xhat = std::make_shared<Buffer>(x.numel());
  auto rstd = std::make_shared<Buffer>(rows);
  Buffer out(x.numel());
  const double* xv = x.data().data();
  const double* gv = gamma.data().data();
  const double* bv = beta.data().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double mean = 0.0;
    for (std::size_t j = 0; j < d; ++j) mean += row[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mean) * (row[j] - mean);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mean) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * gv[j] + bv[j];
    }
  }
  const bool rec = should_record({&x, &gamma, &beta});
  Tensor result = Tensor::from(x.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), gi = gamma.impl(), bi = beta.impl(), oi = result.impl();
    push({x, gamma, beta}, result, [xi, gi, bi, oi, xhat, rstd, rows, d]() {
      const auto& g = oi->grad;
      if (gi->requires_grad) {
        auto gg = grad_of(gi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * (*xhat)[r * d + j];
      }
      if (bi->requires_grad) {
        auto gb = grad_of(bi);
        for (std::size_t r = 0; r < rows; ++r)
          for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
      }
      if (xi->requires_grad) {
        auto gx = grad_of(xi);
        const double inv_d = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < rows; ++r) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gi->data[j];
            mean_dh += dh;
            mean_dh_h += dh * (*xhat)[r * d + j];
          }
          mean_dh *= inv_d;
          mean_dh_h *= inv_d;
          for (std::size_t j = 0; j < d; ++j) {
            const double dh = g[r * d + j] * gi->data[j];
            gx[r * d + j] += (*rstd)[r] * (dh - mean_dh - (*xhat)[r * d + j] * mean_dh_h);
          }
        }
      }
    });
  }
  return result;
}

Tensor softmax(const Tensor& x, int axis) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "softmax");
  const auto s = split_at(x.shape(), ax);
  Buffer out(x.numel());
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double mx = xv[base];
      for (std::size_t j = 1; j < s.extent; ++j) mx = std::max(mx, xv[base + j * s.inner]);
      double total = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(xv[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        total += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) out[base + j * s.inner] /= total;
    }
  }
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(x.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi, s]() {
      auto gx = grad_of(xi);
      const auto& g = oi->grad;
      const auto& y = oi->data;
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t i = 0; i < s.inner; ++i) {
          const std::size_t base = o * s.extent * s.inner + i;
          double dot = 0.0;
          for (std::size_t j = 0; j < s.extent; ++j) dot += g[base + j * s.inner] * y[base + j * s.inner];
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t p = base + j * s.inner;
            gx[p] += y[p] * (g[p] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor mean_pool(const Tensor& x, int axis) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "mean_pool");
  const auto s = split_at(x.shape(), ax);
  if (s.extent == 0) throw RangeError("mean_pool: empty axis");
  Buffer out(s.outer * s.inner, 0.0);
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    for (std::size_t j = 0; j < s.extent; ++j)
      for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.extent + j) * s.inner + i];
  const double inv = 1.0 / static_cast<double>(s.extent);
  for (auto& v : out) v *= inv;
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(drop_axis(x.shape(), ax), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi, s, inv]() {
      auto gx = grad_of(xi);
      const auto& g = oi->grad;
      for (std::size_t o = 0; o < s.outer; ++o)
        for (std::size_t j = 0; j < s.extent; ++j)
          for (std::size_t i = 0; i < s.inner; ++i)
            gx[(o * s.extent + j) * s.inner + i] += g[o * s.inner + i] * inv;
    });
  }
  return result;
}

Tensor max_pool(const Tensor& x, int axis) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "max_pool");
  const auto s = split_at(x.shape(), ax);
  if (s.extent == 0) throw RangeError("max_pool: empty axis");
  auto arg = std::make_shared<std::vector<std::size_t>>(s.outer * s.inner);
  Buffer out(s.outer * s.inner);
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      std::size_t best = (o * s.extent) * s.inner + i;
      for (std::size_t j = 1; j < s.extent; ++j) {
        const std::size_t p = (o * s.extent + j) * s.inner + i;
        if (xv[p] > xv[best]) best = p;
      }
      (*arg)[o * s.inner + i] = best;
      out[o * s.inner + i] = xv[best];
    }
  }
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(drop_axis(x.shape(), ax), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi, arg]() {
      auto gx = grad_of(xi);
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i) gx[(*arg)[i]] += g[i];
    });
  }
  return result;
}

Tensor topk_pool(const Tensor& x, int axis, std::size_t k) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "topk_pool");
  const auto s = split_at(x.shape(), ax);
  if (k == 0 || k > s.extent) {
    throw RangeError("topk_pool: k = " + std::to_string(k) + " invalid for axis extent " +
                     std::to_string(s.extent));
  }
  auto picks = std::make_shared<std::vector<std::size_t>>();
  picks->reserve(s.outer * s.inner * k);
  Buffer out(s.outer * s.inner);
  const double* xv = x.data().data();
  const double inv = 1.0 / static_cast<double>(k);
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t i = 0; i < s.inner; ++i) {
      const std::size_t base = o * s.extent * s.inner + i;
      double acc = 0.0;
      for (std::size_t j : topk_indices(xv + base, s.extent, s.inner, k)) {
        picks->push_back(base + j * s.inner);
        acc += xv[base + j * s.inner];
      }
      out[o * s.inner + i] = acc * inv;
    }
  }
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(drop_axis(x.shape(), ax), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi, picks, k, inv]() {
      auto gx = grad_of(xi);
      const auto& g = oi->grad;
      for (std::size_t i = 0; i < g.size(); ++i)
        for (std::size_t j = 0; j < k; ++j) gx[(*picks)[i * k + j]] += g[i] * inv;
    });
  }
  return result;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.data()) acc += v;
  const bool rec = should_record({&x});
  Tensor result = Tensor::from({}, {acc}, rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi]() {
      auto gx = grad_of(xi);
      const double g = oi->grad[0];
      for (auto& v : gx) v += g;
    });
  }
  return result;
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  const std::size_t ax = resolve_axis(axis, parts[0].rank(), "concat");
  Shape out_shape = parts[0].shape();
  out_shape[ax] = 0;
  for (const auto& p : parts) {
    Shape probe = p.shape();
    if (probe.size() != out_shape.size()) {
      throw DimensionError("concat: rank mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    const std::size_t e = probe[ax];
    probe[ax] = 0;
    Shape ref = parts[0].shape();
    ref[ax] = 0;
    if (probe != ref) {
      throw DimensionError("concat: shape mismatch " + shape_str(p.shape()) + " vs " + shape_str(parts[0].shape()));
    }
    out_shape[ax] += e;
  }
  const auto so = split_at(out_shape, ax);
  Buffer out(numel(out_shape));
  std::vector<std::size_t> offsets;
  std::size_t off = 0;
  for (const auto& p : parts) {
    offsets.push_back(off);
    const std::size_t block = p.shape()[ax] * so.inner;
    const double* src = p.data().data();
    for (std::size_t o = 0; o < so.outer; ++o)
      std::copy_n(src + o * block, block, out.data() + o * so.extent * so.inner + off * so.inner);
    off += p.shape()[ax];
  }
  bool rec = false;
  if (active_tape() != nullptr)
    for (const auto& p : parts) rec |= p.requires_grad();
  Tensor result = Tensor::from(out_shape, std::move(out), rec);
  if (rec) {
    std::vector<ImplPtr> impls;
    for (const auto& p : parts) impls.push_back(p.impl());
    ImplPtr oi = result.impl();
    active_tape()->record(parts, result, [impls, oi, offsets, so, ax]() {
      for (std::size_t pi = 0; pi < impls.size(); ++pi) {
        if (!impls[pi]->requires_grad) continue;
        auto gp = grad_of(impls[pi]);
        const std::size_t block = impls[pi]->shape[ax] * so.inner;
        for (std::size_t o = 0; o < so.outer; ++o) {
          const double* src = oi->grad.data() + o * so.extent * so.inner + offsets[pi] * so.inner;
          for (std::size_t j = 0; j < block; ++j) gp[o * block + j] += src[j];
        }
      }
    });
  }
  return result;
}

Tensor slice(const Tensor& x, int axis, std::size_t start, std::size_t length) {
  const std::size_t ax = resolve_axis(axis, x.rank(), "slice");
  const auto s = split_at(x.shape(), ax);
  if (start + length > s.extent) {
    throw RangeError("slice: [" + std::to_string(start) + ", " + std::to_string(start + length) +
                     ") exceeds extent " + std::to_string(s.extent));
  }
  Shape out_shape = x.shape();
  out_shape[ax] = length;
  const std::size_t block = length * s.inner;
  Buffer out(s.outer * block);
  const double* xv = x.data().data();
  for (std::size_t o = 0; o < s.outer; ++o)
    std::copy_n(xv + (o * s.extent + start) * s.inner, block, out.data() + o * block);
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(std::move(out_shape), std::move(out), rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi, s, start, block]() {
      auto gx = grad_of(xi);
      for (std::size_t o = 0; o < s.outer; ++o) {
        double* dst = gx.data() + (o * s.extent + start) * s.inner;
        const double* src = oi->grad.data() + o * block;
        for (std::size_t j = 0; j < block; ++j) dst[j] += src[j];
      }
    });
  }
  return result;
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  const bool rec = should_record({&x});
  Tensor result = Tensor::from(std::move(shape), x.impl()->data, rec);
  if (rec) {
    ImplPtr xi = x.impl(), oi = result.impl();
    push({x}, result, [xi, oi]() {
      auto gx = grad_of(xi);
      for (std::size_t i = 0; i < gx.size(); ++i) gx[i] += oi->grad[i];
    });
  }
  return result;
}

namespace {

struct AttentionDims {
  std::size_t batch, tokens, width, heads, head_dim;
};

AttentionDims attention_dims(const Tensor& q, const Tensor& k, std::size_t heads) {
  if (q.shape() != k.shape()) {
    throw DimensionError("attention: query " + shape_str(q.shape()) + " vs key " + shape_str(k.shape()));
  }
  if (q.rank() != 2 && q.rank() != 3) throw DimensionError("attention: expected [B,T,d] or [T,d], got " + shape_str(q.shape()));
  AttentionDims d{};
  d.batch = q.rank() == 3 ? q.shape()[0] : 1;
  d.tokens = q.shape()[q.rank() - 2];
  d.width = q.shape().back();
  d.heads = heads;
  if (heads == 0 || d.width % heads != 0) {
    throw DimensionError("attention: width " + std::to_string(d.width) + " not divisible by " +
                         std::to_string(heads) + " heads");
  }
  d.head_dim = d.width / heads;
  return d;
}

// probs has layout [B, heads, T, T].
void attention_probs(const AttentionDims& a, const double* q, const double* k, double* probs) {
  const double sc = 1.0 / std::sqrt(static_cast<double>(a.head_dim));
  const std::size_t T = a.tokens;
  for (std::size_t b = 0; b < a.batch; ++b) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      const std::size_t off = b * T * a.width + h * a.head_dim;
      CStridedM Q(q + off, T, a.head_dim, Eigen::OuterStride<>(a.width));
      CStridedM K(k + off, T, a.head_dim, Eigen::OuterStride<>(a.width));
      MapM P(probs + (b * a.heads + h) * T * T, T, T);
      P.noalias() = Q * K.transpose();
      P *= sc;
      for (std::size_t r = 0; r < T; ++r) {
        const double mx = P.row(r).maxCoeff();
        double total = 0.0;
        for (std::size_t c = 0; c < T; ++c) {
          const double e = std::exp(P(r, c) - mx);
          P(r, c) = e;
          total += e;
        }
        P.row(r) /= total;
      }
    }
  }
}

}  // namespace

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t heads) {
  const auto a = attention_dims(q, k, heads);
  if (v.shape() != q.shape()) {
    throw DimensionError("attention: value " + shape_str(v.shape()) + " vs query " + shape_str(q.shape()));
  }
  const std::size_t T = a.tokens;
  auto probs = std::make_shared<Buffer>(a.batch * a.heads * T * T);
  attention_probs(a, q.data().data(), k.data().data(), probs->data());
  Buffer out(q.numel());
  for (std::size_t b = 0; b < a.batch; ++b) {
    for (std::size_t h = 0; h < a.heads; ++h) {
      const std::size_t off = b * T * a.width + h * a.head_dim;
      CMapM P(probs->data() + (b * a.heads + h) * T * T, T, T);
      CStridedM V(v.data().data() + off, T, a.head_dim, Eigen::OuterStride<>(a.width));
      StridedM O(out.data() + off, T, a.head_dim, Eigen::OuterStride<>(a.width));
      O.noalias() = P * V;
    }
  }
  const bool rec = should_record({&q, &k, &v});
  Tensor result = Tensor::from(q.shape(), std::move(out), rec);
  if (rec) {
    ImplPtr qi = q.impl(), ki = k.impl(), vi = v.impl(), oi = result.impl();
    push({q, k, v}, result, [qi, ki, vi, oi, probs, a]() {
      const std::size_t T = a.tokens;
      const double sc = 1.0 / std::sqrt(static_cast<double>(a.head_dim));
      RowMat dP(T, T), dS(T, T);
      for (std::size_t b = 0; b < a.batch; ++b) {
        for (std::size_t h = 0; h < a.heads; ++h) {
          const std::size_t off = b * T * a.width + h * a.head_dim;
          const Eigen::OuterStride<> st(a.width);
          CMapM P(probs->data() + (b * a.heads + h) * T * T, T, T);
          CStridedM G(oi->grad.data() + off, T, a.head_dim, st);
          CStridedM Q(qi->data.data() + off, T, a.head_dim, st);
          CStridedM K(ki->data.data() + off, T, a.head_dim, st);
          CStridedM V(vi->data.data() + off, T, a.head_dim, st);
          if (vi->requires_grad) {
            StridedM dV(grad_of(vi).data() + off, T, a.head_dim, st);
            dV.noalias() += P.transpose() * G;
          }
          if (!qi->requires_grad && !ki->requires_grad) continue;
          dP.noalias() = G * V.transpose();
          for (std::size_t r = 0; r < T; ++r) {
            const double dot = dP.row(r).dot(P.row(r));
            for (std::size_t c = 0; c < T; ++c) dS(r, c) = P(r, c) * (dP(r, c) - dot) * sc;
          }
          if (qi->requires_grad) {
            StridedM dQ(grad_of(qi).data() + off, T, a.head_dim, st);
            dQ.noalias() += dS * K;
          }
          if (ki->requires_grad) {
            StridedM dK(grad_of(ki).data() + off, T, a.head_dim, st);
            dK.noalias() += dS.transpose() * Q;
          }
        }
      }
    });
  }
  return result;
}

Tensor attention_weights(const Tensor& q, const Tensor& k, std::size_t heads) {
  const auto a = attention_dims(q, k, heads);
  Buffer probs(a.batch * a.heads * a.tokens * a.tokens);
  attention_probs(a, q.data().data(), k.data().data(), probs.data());
  return Tensor::from({a.batch, a.heads, a.tokens, a.tokens}, std::move(probs));
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p <= 0.0) return x;
  if (p >= 1.0) throw RangeError("dropout: probability must be < 1");
  Buffer mask(x.numel());
  const double keep = 1.0 / (1.0 - p);
  for (auto& m : mask) m = rng.uniform() < p ? 0.0 : keep;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

}  // namespace pcpetl
