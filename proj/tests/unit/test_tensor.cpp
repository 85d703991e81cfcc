#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>

#include "pcpetl/errors.hpp"
#include "pcpetl/gradcheck.hpp"
#include "pcpetl/ops.hpp"

using namespace pcpetl;

namespace {

Tensor random(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

double worst(const std::vector<GradcheckResult>& rs) {
  double e = 0.0;
  for (const auto& r : rs) e = std::max(e, r.max_rel_error);
  return e;
}

// Gradient of sum(f(a, b) * probe) with respect to a and b.
std::pair<std::vector<double>, std::vector<double>> grads(const std::function<Tensor(Tensor, Tensor)>& f, Tensor a,
                                                          Tensor b, const Tensor& probe) {
  a.set_requires_grad(true);
  b.set_requires_grad(true);
  Tape tape;
  TapeGuard guard(tape);
  Tensor loss = sum(mul(f(a, b), probe));
  backward(loss);
  return {{a.grad().begin(), a.grad().end()}, {b.grad().begin(), b.grad().end()}};
}

}  // namespace

TEST(Matmul, IdentityLeavesOperandUnchanged) {
  Rng rng(1);
  Tensor x = random({2, 3}, rng);
  Tensor eye = Tensor::from({2, 2}, {1, 0, 0, 1});
  Tensor y = matmul(eye, x);
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], x[i]);
}

TEST(Matmul, HandExample) {
  Tensor y = matmul(Tensor::from({2, 2}, {1, 2, 3, 4}), Tensor::from({2, 1}, {1, 1}));
  ASSERT_EQ(y.shape(), (Shape{2, 1}));
  EXPECT_EQ(y[0], 3.0);
  EXPECT_EQ(y[1], 7.0);
}

TEST(Matmul, ShapeMismatchNamesBothShapes) {
  try {
    matmul(Tensor::zeros({2, 3}), Tensor::zeros({4, 2}));
    FAIL();
  } catch (const DimensionError& e) {
    std::string msg = e.what();
    EXPECT_NE(msg.find("[2x3]"), std::string::npos) << msg;
    EXPECT_NE(msg.find("[4x2]"), std::string::npos) << msg;
  }
}

TEST(Matmul, GradcheckTight) {
  Rng rng(2);
  Tensor a = random({3, 4}, rng), b = random({4, 2}, rng), r = random({3, 2}, rng);
  auto rs = gradcheck([&] { return sum(mul(matmul(a, b), r)); }, {{"a", a}, {"b", b}}, 1e-5, 1e-6);
  EXPECT_LT(worst(rs), 1e-6);
}

TEST(Matmul, BackwardMatchesTransposeFormulas) {
  Rng rng(3);
  Tensor a = random({3, 4}, rng), b = random({4, 2}, rng), g = random({3, 2}, rng);
  auto [ga, gb] = grads([](Tensor x, Tensor y) { return matmul(x, y); }, a, b, g);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t k = 0; k < 4; ++k) {
      double s = 0.0;
      for (std::size_t j = 0; j < 2; ++j) s += g[i * 2 + j] * b[k * 2 + j];
      EXPECT_NEAR(ga[i * 4 + k], s, 1e-14);
    }
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t j = 0; j < 2; ++j) {
      double s = 0.0;
      for (std::size_t i = 0; i < 3; ++i) s += a[i * 4 + k] * g[i * 2 + j];
      EXPECT_NEAR(gb[k * 2 + j], s, 1e-14);
    }
}

TEST(LayerNorm, ConstantRowGivesBeta) {
  Tensor x = Tensor::full({2, 5}, 3.25);
  Tensor g = Tensor::from({5}, {1, 2, 3, 4, 5}), b = Tensor::from({5}, {0.1, -0.2, 0.3, -0.4, 0.5});
  Tensor y = layer_norm(x, g, b, 1e-5);
  for (std::size_t i = 0; i < 10; ++i) EXPECT_NEAR(y[i], b[i % 5], 1e-12);
}

TEST(LayerNorm, HandExampleWithoutEps) {
  Tensor y = layer_norm(Tensor::from({1, 2}, {1, 3}), Tensor::from({2}, {1, 1}), Tensor::from({2}, {0, 0}), 0.0);
  EXPECT_DOUBLE_EQ(y[0], -1.0);
  EXPECT_DOUBLE_EQ(y[1], 1.0);
}

TEST(LayerNorm, RejectsDegenerateAxis) {
  EXPECT_THROW(layer_norm(Tensor::zeros({3, 1}), Tensor::zeros({1}), Tensor::zeros({1})), DimensionError);
}

TEST(LayerNorm, Gradcheck) {
  Rng rng(4);
  Tensor x = random({4, 8}, rng, -2, 2), g = random({8}, rng, 0.5, 1.5), b = random({8}, rng);
  Tensor r = random({4, 8}, rng);
  auto rs = gradcheck([&] { return sum(mul(layer_norm(x, g, b, 1e-5), r)); }, {{"x", x}, {"g", g}, {"b", b}});
  EXPECT_LT(worst(rs), 1e-5);
}

TEST(Elementwise, ReluClamp) {
  Tensor y = relu(Tensor::from({2}, {-2.5, 2.5}));
  EXPECT_EQ(y[0], 0.0);
  EXPECT_EQ(y[1], 2.5);
}

TEST(Elementwise, GeluUsesGaussianCdf) {
  Tensor y = gelu(Tensor::from({4}, {0.0, 1.0, -1.0, 2.0}));
  EXPECT_EQ(y[0], 0.0);
  // Phi(1) = 0.8413447460685429, Phi(2) = 0.9772498680518208.
  EXPECT_NEAR(y[1], 0.8413447460685429, 1e-15);
  EXPECT_NEAR(y[2], -(1.0 - 0.8413447460685429), 1e-15);
  EXPECT_NEAR(y[3], 2.0 * 0.9772498680518208, 1e-15);
}

TEST(Reductions, SoftmaxSingletonAxisIsOne) {
  Tensor y = softmax(Tensor::from({3, 1}, {-4, 0, 7}), 1);
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(y[i], 1.0);
}

TEST(Reductions, SoftmaxRowsSumToOne) {
  Rng rng(5);
  Tensor y = softmax(random({4, 6}, rng, -5, 5), 1);
  for (std::size_t i = 0; i < 4; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < 6; ++j) s += y[i * 6 + j];
    EXPECT_NEAR(s, 1.0, 1e-14);
  }
}

TEST(Reductions, MeanPoolOfZerosIsZero) {
  Tensor y = mean_pool(Tensor::zeros({2, 5, 3}), 1);
  ASSERT_EQ(y.shape(), (Shape{2, 3}));
  for (double v : y.data()) EXPECT_EQ(v, 0.0);
}

TEST(Reductions, PoolsAgainstSortOracle) {
  Rng rng(6);
  Tensor x = random({2, 7, 3}, rng);
  Tensor mx = max_pool(x, 1), tk = topk_pool(x, 1, 3), mn = mean_pool(x, 1);
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 3; ++c) {
      std::vector<double> col;
      for (std::size_t t = 0; t < 7; ++t) col.push_back(x[(b * 7 + t) * 3 + c]);
      std::sort(col.rbegin(), col.rend());
      EXPECT_EQ(mx[b * 3 + c], col[0]);
      EXPECT_NEAR(tk[b * 3 + c], (col[0] + col[1] + col[2]) / 3.0, 1e-15);
      double m = 0.0;
      for (double v : col) m += v;
      EXPECT_NEAR(mn[b * 3 + c], m / 7.0, 1e-15);
    }
}

TEST(Reductions, InvalidAxisOrK) {
  Tensor x = Tensor::zeros({2, 3});
  EXPECT_THROW(mean_pool(x, 2), RangeError);
  EXPECT_THROW(softmax(x, -3), RangeError);
  EXPECT_THROW(topk_pool(x, 1, 4), RangeError);
  EXPECT_THROW(topk_pool(x, 1, 0), RangeError);
}

TEST(Concat, JoinsAlongAxis) {
  Tensor y = concat({Tensor::from({1, 2}, {1, 2}), Tensor::from({2, 2}, {3, 4, 5, 6})}, 0);
  ASSERT_EQ(y.shape(), (Shape{3, 2}));
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(y[i], static_cast<double>(i + 1));
}

TEST(Backward, SumGivesOnes) {
  Tensor x = Tensor::from({2, 2}, {1, -2, 3, 0.5}, true);
  Tape tape;
  TapeGuard guard(tape);
  backward(sum(x));
  for (double g : x.grad()) EXPECT_EQ(g, 1.0);
}

TEST(Backward, SquareGivesTwiceInput) {
  Tensor x = Tensor::from({3}, {1.5, -2, 0.25}, true);
  Tape tape;
  TapeGuard guard(tape);
  backward(sum(mul(x, x)));
  for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(x.grad()[i], 2.0 * x[i]);
}

TEST(Backward, NonScalarLossIsContractViolation) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tape tape;
  TapeGuard guard(tape);
  Tensor y = scale(x, 2.0);
  EXPECT_THROW(backward(y), ContractError);
}

TEST(Backward, FrozenLeafGetsNoBuffer) {
  Tensor w = Tensor::from({2}, {1, 2}, true);
  Tensor frozen = Tensor::from({2}, {3, 4}, false);
  Tape tape;
  TapeGuard guard(tape);
  backward(sum(mul(w, frozen)));
  EXPECT_TRUE(w.has_grad());
  EXPECT_FALSE(frozen.has_grad());
  EXPECT_EQ(w.grad()[0], 3.0);
}

TEST(Backward, UntapedOpsRecordNothing) {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = relu(x);
  EXPECT_FALSE(y.requires_grad());
  Tape tape;
  TapeGuard guard(tape);
  Tensor z = relu(Tensor::from({2}, {1, 2}));
  EXPECT_EQ(tape.size(), 0u);
  EXPECT_FALSE(z.requires_grad());
}

// Reduced broadcast axes must receive the summed upstream gradient.
TEST(Backward, BroadcastAgainstLoopOracle) {
  Rng rng(7);
  struct Case {
    Shape a, b;
  };
  for (const Case& c : {Case{{2, 3, 4}, {3, 1}}, Case{{2, 1, 4}, {3, 1}}, Case{{4}, {2, 3, 4}}, Case{{2, 3}, {3}},
                        Case{{1}, {2, 2}}}) {
    Tensor a = random(c.a, rng), b = random(c.b, rng);
    Tensor out = add(a, b);
    const Shape& os = out.shape();
    Tensor g = random(os, rng);
    auto index_of = [&](const Shape& s, const std::vector<std::size_t>& idx) {
      std::size_t off = 0, lead = os.size() - s.size();
      for (std::size_t i = 0; i < s.size(); ++i) off = off * s[i] + (s[i] == 1 ? 0 : idx[lead + i]);
      return off;
    };
    std::vector<double> ga(a.numel(), 0.0), gb(b.numel(), 0.0), gma(a.numel(), 0.0), gmb(b.numel(), 0.0);
    std::vector<std::size_t> idx(os.size(), 0);
    for (std::size_t flat = 0; flat < out.numel(); ++flat) {
      std::size_t rem = flat;
      for (std::size_t i = os.size(); i-- > 0;) {
        idx[i] = rem % os[i];
        rem /= os[i];
      }
      const std::size_t ia = index_of(c.a, idx), ib = index_of(c.b, idx);
      EXPECT_EQ(out[flat], a[ia] + b[ib]);
      ga[ia] += g[flat];
      gb[ib] += g[flat];
      gma[ia] += g[flat] * b[ib];
      gmb[ib] += g[flat] * a[ia];
    }
    auto [add_a, add_b] = grads([](Tensor x, Tensor y) { return add(x, y); }, a.clone(), b.clone(), g);
    auto [mul_a, mul_b] = grads([](Tensor x, Tensor y) { return mul(x, y); }, a.clone(), b.clone(), g);
    auto [sub_a, sub_b] = grads([](Tensor x, Tensor y) { return sub(x, y); }, a.clone(), b.clone(), g);
    for (std::size_t i = 0; i < ga.size(); ++i) {
      EXPECT_NEAR(add_a[i], ga[i], 1e-13);
      EXPECT_NEAR(sub_a[i], ga[i], 1e-13);
      EXPECT_NEAR(mul_a[i], gma[i], 1e-13);
    }
    for (std::size_t i = 0; i < gb.size(); ++i) {
      EXPECT_NEAR(add_b[i], gb[i], 1e-13);
      EXPECT_NEAR(sub_b[i], -gb[i], 1e-13);
      EXPECT_NEAR(mul_b[i], gmb[i], 1e-13);
    }
  }
}

TEST(Backward, DeterministicAcrossRuns) {
  auto run = [] {
    Rng rng(8);
    Tensor x = random({3, 8}, rng), w = random({4, 8}, rng), b = random({4}, rng);
    w.set_requires_grad(true);
    Tape tape;
    TapeGuard guard(tape);
    Tensor loss = sum(gelu(attention(linear(x, w, b), linear(x, w, b), linear(x, w, b), 2)));
    backward(loss);
    std::vector<double> out(w.grad().begin(), w.grad().end());
    out.push_back(loss.item());
    return out;
  };
  EXPECT_EQ(run(), run());
}

TEST(Gradcheck, RandomInputsAcrossSeeds) {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    Rng rng(seed);
    Tensor x = random({2, 4, 6}, rng, -2, 2), r = random({2, 4, 6}, rng), r2 = random({2, 6}, rng);
    Tensor g = random({6}, rng, 0.5, 1.5), b = random({6}, rng);
    std::vector<std::pair<std::string, std::function<Tensor()>>> fs = {
        {"gelu", [&] { return sum(mul(gelu(x), r)); }},
        {"softmax", [&] { return sum(mul(softmax(x, 1), r)); }},
        {"layer_norm", [&] { return sum(mul(layer_norm(x, g, b), r)); }},
        {"topk", [&] { return sum(mul(topk_pool(x, 1, 2), r2)); }},
        {"attention", [&] { return sum(mul(attention(x, x, x, 3), r)); }},
    };
    for (const auto& [name, f] : fs) {
      auto rs = gradcheck(f, {{"x", x}});
      EXPECT_LT(worst(rs), 1e-4) << name << " seed " << seed;
    }
  }
}

TEST(Gradcheck, RelativeErrorFloor) {
  std::vector<double> a{0.0, 0.0}, n{1e-12, 0.0};
  EXPECT_EQ(relative_error(a, n), 0.0);
  std::vector<double> c{1.0, 2.0}, d{1.0, 2.1};
  EXPECT_NEAR(relative_error(c, d), 0.1 / 2.1, 1e-15);
}
