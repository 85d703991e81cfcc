#include <cmath>

#include "pcpetl/commands.hpp"
#include "pcpetl/loss.hpp"
#include "pcpetl/ops.hpp"

namespace pcpetl {

namespace {

Tensor random(const Shape& shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.mutable_data()) v = rng.uniform(lo, hi);
  return t;
}

// Values bounded away from zero so kinks stay out of the difference stencil.
Tensor away_from_zero(const Shape& shape, Rng& rng) {
  Tensor t = Tensor::zeros(shape);
  for (auto& v : t.mutable_data()) v = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
  return t;
}

class Suite {
 public:
  Suite(std::uint64_t seed, double tol) : rng_(seed), tol_(tol) {}

  // Checks sum(f(...) * R) for a fixed random R.
  void check(const std::string& name, const std::function<Tensor()>& f, const std::vector<NamedTensor>& inputs) {
    Tensor probe;
    auto loss = [&]() {
      Tensor y = f();
      if (!probe.defined()) probe = random(y.shape(), rng_);
      return sum(mul(y, probe));
    };
    add(name, gradcheck(loss, inputs, 1e-5, tol_));
  }

  void add(const std::string& prefix, const std::vector<GradcheckResult>& rs) {
    for (auto r : rs) {
      r.name = prefix + "/" + r.name;
      results_.push_back(r);
    }
  }

  Rng& rng() { return rng_; }
  double tol() const { return tol_; }
  std::vector<GradcheckResult> take() { return std::move(results_); }

 private:
  Rng rng_;
  double tol_;
  std::vector<GradcheckResult> results_;
};

void op_checks(Suite& s) {
  Rng& r = s.rng();
  {
    Tensor a = random({3, 4}, r), b = random({4, 2}, r);
    s.check("matmul", [&] { return matmul(a, b); }, {{"a", a}, {"b", b}});
  }
  {
    Tensor x = random({2, 3, 5}, r), w = random({4, 5}, r), b = random({4}, r);
    s.check("linear", [&] { return linear(x, w, b); }, {{"x", x}, {"w", w}, {"b", b}});
  }
  {
    Tensor a = random({2, 3, 4}, r), b = random({3, 1}, r);
    s.check("add", [&] { return add(a, b); }, {{"a", a}, {"b", b}});
    Tensor c = random({2, 3}, r), d = random({3}, r);
    s.check("sub", [&] { return sub(c, d); }, {{"a", c}, {"b", d}});
    Tensor e = random({2, 1, 4}, r), f = random({3, 1}, r);
    s.check("mul", [&] { return mul(e, f); }, {{"a", e}, {"b", f}});
    s.check("scale", [&] { return scale(c, -1.7); }, {{"x", c}});
  }
  {
    Tensor x = away_from_zero({4, 6}, r);
    s.check("relu", [&] { return relu(x); }, {{"x", x}});
    Tensor y = random({4, 6}, r, -3.0, 3.0);
    s.check("gelu", [&] { return gelu(y); }, {{"x", y}});
  }
  {
    Tensor x = random({3, 16}, r, -2.0, 2.0), g = random({16}, r, 0.5, 1.5), b = random({16}, r);
    s.check("layer_norm", [&] { return layer_norm(x, g, b, 1e-5); }, {{"x", x}, {"gamma", g}, {"beta", b}});
  }
  {
    Tensor x = random({2, 5, 3}, r, -2.0, 2.0);
    s.check("softmax", [&] { return softmax(x, 1); }, {{"x", x}});
    s.check("mean_pool", [&] { return mean_pool(x, 1); }, {{"x", x}});
    s.check("max_pool", [&] { return max_pool(x, 1); }, {{"x", x}});
    s.check("topk_pool", [&] { return topk_pool(x, 1, 3); }, {{"x", x}});
    s.check("sum", [&] { return sum(x); }, {{"x", x}});
    s.check("slice", [&] { return slice(x, 1, 1, 3); }, {{"x", x}});
    s.check("reshape", [&] { return reshape(x, {10, 3}); }, {{"x", x}});
    Tensor y = random({2, 2, 3}, r);
    s.check("concat", [&] { return concat({x, y}, 1); }, {{"a", x}, {"b", y}});
  }
  {
    Tensor q = random({2, 5, 16}, r), k = random({2, 5, 16}, r), v = random({2, 5, 16}, r);
    s.check("attention", [&] { return attention(q, k, v, 2); }, {{"q", q}, {"k", k}, {"v", v}});
  }
  {
    Tensor x = random({4, 8}, r);
    s.check("dropout",
            [&] {
              Rng d(7);
              return dropout(x, 0.3, d);
            },
            {{"x", x}});
  }
  {
    Tensor logits = random({4, 5}, r, -2.0, 2.0);
    const std::vector<int> labels{0, 3, 4, 1};
    s.add("cross_entropy",
          gradcheck([&] { return cross_entropy(logits, labels, 0.1); }, {{"logits", logits}}, 1e-5, s.tol()));
  }
}

DynamicAdapterParams random_adapter(Rng& r, std::size_t d, std::size_t rank) {
  DynamicAdapterParams p;
  p.rank = rank;
  p.norm_weight = random({d}, r, 0.5, 1.5);
  p.norm_bias = random({d}, r, -0.2, 0.2);
  p.scale_weight = random({1, d}, r);
  p.scale_bias = random({1}, r, 0.3, 0.6);
  p.down_weight = random({rank, d}, r);
  p.down_bias = random({rank}, r, -0.2, 0.2);
  p.up_weight = random({d, rank}, r);
  p.up_bias = random({d}, r, -0.2, 0.2);
  p.scalar = random({1}, r, 0.5, 1.5);
  return p;
}

std::vector<NamedTensor> adapter_tensors(const DynamicAdapterParams& p, bool scalar) {
  std::vector<NamedTensor> v{{"norm.weight", p.norm_weight}, {"norm.bias", p.norm_bias},
                             {"down.weight", p.down_weight}, {"down.bias", p.down_bias},
                             {"up.weight", p.up_weight},     {"up.bias", p.up_bias}};
  if (scalar) {
    v.emplace_back("scale.scalar", p.scalar);
  } else {
    v.emplace_back("scale.weight", p.scale_weight);
    v.emplace_back("scale.bias", p.scale_bias);
  }
  return v;
}

void petl_checks(Suite& s) {
  Rng& r = s.rng();
  const std::size_t d = 16, rank = 4, T = 6;
  {
    Tensor x = random({2, T, d}, r);
    TFTSParams p{random({d}, r, 0.5, 1.5), random({d}, r), "site"};
    s.check("tfts", [&] { return tfts(x, p); }, {{"x", x}, {"gamma", p.gamma}, {"beta", p.beta}});
  }
  {
    Tensor z = random({T, d}, r), w = random({1, d}, r), b = Tensor::from({1}, {0.05});
    s.check("dynamic_scale", [&] { return dynamic_scale(z, w, b, true); }, {{"x_norm", z}, {"w_s", w}, {"bias", b}});
  }
  for (auto mode : {ScaleMode::Dynamic, ScaleMode::DynamicNoRelu, ScaleMode::Fixed, ScaleMode::LearnableScalar}) {
    Tensor x = random({2, T, d}, r, -2.0, 2.0);
    DynamicAdapterParams p = random_adapter(r, d, rank);
    auto inputs = adapter_tensors(p, mode == ScaleMode::LearnableScalar);
    if (mode == ScaleMode::Fixed) inputs.resize(6);
    inputs.emplace_back("x", x);
    s.check("dynamic_adapter." + to_string(mode) + ".residual",
            [&] { return dynamic_adapter(x, p, mode, 0.7).residual; }, inputs);
    s.check("dynamic_adapter." + to_string(mode) + ".prompt_raw",
            [&] { return dynamic_adapter(x, p, mode, 0.7).prompt_raw; }, inputs);
  }
  for (auto pool : {PromptPool::Mean, PromptPool::Max, PromptPool::TopK}) {
    Tensor a = random({2, T, d}, r);
    TFTSParams p{random({d}, r, 0.5, 1.5), random({d}, r), "prompt"};
    s.check("pool_prompt." + to_string(pool), [&] { return pool_prompt(a, pool, 3, p); },
            {{"activated", a}, {"gamma", p.gamma}, {"beta", p.beta}});
  }
  {
    Tensor tokens = random({2, 1 + 2 + 4, d}, r), prompt = random({2, 1, d}, r);
    s.check("route_prompts",
            [&] {
              TokenSequence seq{tokens, 2, 4};
              route_prompts(seq, 2, 3, prompt, true);
              return seq.tokens;
            },
            {{"tokens", tokens}, {"prompt", prompt}});
    Tensor block = random({3, d}, r);
    s.check("set_prompt_block",
            [&] {
              TokenSequence seq{tokens, 2, 4};
              set_prompt_block(seq, block);
              return seq.tokens;
            },
            {{"tokens", tokens}, {"prompts", block}});
  }
}

void model_check(Suite& s, Strategy strategy, std::uint64_t seed) {
  ModelConfig cfg;
  cfg.backbone.depth = 2;
  cfg.backbone.embed_dim = 16;
  cfg.backbone.heads = 2;
  cfg.backbone.num_patches = 8;
  cfg.backbone.patch_size = 8;
  cfg.backbone.embed_hidden = {16};
  cfg.backbone.pos_hidden = 16;
  cfg.petl.strategy = strategy;
  cfg.petl.rank = 4;
  cfg.num_classes = 4;
  cfg.head_hidden = 16;
  Model model(cfg, seed);

  // Move every tunable tensor off its initial value so that zero-initialized
  // up-projections do not hide the gradients behind them.
  Rng perturb = Rng(seed).split(99);
  std::vector<NamedTensor> tunables;
  for (const auto& p : model.store().all()) {
    if (!p.tunable) continue;
    Tensor t = p.tensor;
    for (auto& v : t.mutable_data()) v += 0.3 * perturb.uniform(-1.0, 1.0);
    tunables.emplace_back(p.name, t);
  }

  DatasetSpec spec;
  spec.points = 64;
  spec.seed = seed;
  std::vector<PatchSet> patches;
  std::vector<int> labels;
  for (std::size_t i = 0; i < 2; ++i) {
    PointCloud c = generate(spec, Split::Train, i);
    patches.push_back(patchify(c, 8, 8));
    labels.push_back(static_cast<int>(i % cfg.num_classes));
  }
  auto [groups, centers] = pack_patches(patches);
  auto loss = [&] { return cross_entropy(model.forward(groups, centers).logits, labels); };
  s.add("model." + to_string(strategy), gradcheck(loss, tunables, 1e-5, s.tol()));
}

}  // namespace

std::vector<GradcheckResult> run_gradcheck_suite(std::uint64_t seed, double tolerance) {
  Suite s(seed, tolerance);
  op_checks(s);
  petl_checks(s);
  model_check(s, Strategy::Dapt, seed);
  model_check(s, Strategy::Full, seed);
  return s.take();
}

}  // namespace pcpetl
