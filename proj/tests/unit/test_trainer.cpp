#include <gtest/gtest.h>

#include <cmath>
#include <algorithm>
#include <cstdio>
#include <limits>
#include <numbers>

#include "pcpetl/errors.hpp"
#include "pcpetl/gradcheck.hpp"
#include "pcpetl/loss.hpp"
#include "pcpetl/optim.hpp"
#include "pcpetl/trainer.hpp"

using namespace pcpetl;

namespace {

ModelConfig tiny_config(Strategy s, std::size_t classes = 4) {
  ModelConfig c;
  c.backbone.depth = 2;
  c.backbone.embed_dim = 16;
  c.backbone.heads = 2;
  c.backbone.num_patches = 8;
  c.backbone.patch_size = 8;
  c.backbone.embed_hidden = {16};
  c.backbone.pos_hidden = 16;
  c.petl.strategy = s;
  c.petl.rank = 4;
  c.num_classes = classes;
  c.head_hidden = 16;
  return c;
}

std::vector<PointCloud> tiny_set(std::size_t per_class, std::size_t classes = 4, Split split = Split::Train) {
  DatasetSpec spec;
  spec.points = 64;
  const auto families = all_shape_families();
  spec.families.assign(families.begin(), families.begin() + static_cast<long>(classes));
  spec.train_per_class = per_class;
  spec.test_per_class = per_class;
  std::vector<PointCloud> out;
  for (std::size_t i = 0; i < per_class * classes; ++i) out.push_back(generate(spec, split, i));
  return out;
}

TrainConfig quick_train(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.warmup_epochs = 1;
  t.batch_size = 8;
  t.lr = 1e-3;
  t.eval_every = 0;
  return t;
}

}  // namespace

TEST(AdamW, ZeroGradientIsPureDecay) {
  ParameterStore s;
  Tensor w = s.add("w", "head", Tensor::from({3}, {1.0, -2.0, 0.5}));
  s.set_tunable("w", true);
  AdamW opt(s);
  opt.step(0.1, 0.01);
  EXPECT_DOUBLE_EQ(w[0], 1.0 * (1 - 0.1 * 0.01));
  EXPECT_DOUBLE_EQ(w[1], -2.0 * (1 - 0.1 * 0.01));
}

TEST(AdamW, FirstStepMovesByLr) {
  ParameterStore s;
  Tensor w = s.add("w", "head", Tensor::from({1}, {1.0}));
  s.set_tunable("w", true);
  AdamW opt(s);
  w.mutable_grad()[0] = 3.0;
  opt.step(0.1, 0.0);
  // m_hat = g, v_hat = g^2: the update is lr * g / (|g| + eps).
  EXPECT_NEAR(w[0], 1.0 - 0.1 * 3.0 / (3.0 + 1e-8), 1e-15);
}

TEST(AdamW, TwoStepsMatchHandRecurrence) {
  ParameterStore s;
  Tensor w = s.add("w", "head", Tensor::from({1}, {0.5}));
  s.set_tunable("w", true);
  AdamW opt(s);
  double theta = 0.5, m = 0, v = 0;
  const double grads[] = {0.3, -1.2};
  for (int t = 1; t <= 2; ++t) {
    w.clear_grad();
    w.mutable_grad()[0] = grads[t - 1];
    opt.step(0.05, 0.1);
    m = 0.9 * m + 0.1 * grads[t - 1];
    v = 0.999 * v + 0.001 * grads[t - 1] * grads[t - 1];
    const double mh = m / (1 - std::pow(0.9, t)), vh = v / (1 - std::pow(0.999, t));
    theta -= 0.05 * (mh / (std::sqrt(vh) + 1e-8) + 0.1 * theta);
    EXPECT_NEAR(w[0], theta, 1e-15);
  }
}

TEST(AdamW, FrozenTensorsUntouchedAndNoState) {
  Model m(tiny_config(Strategy::Dapt), 1);
  const auto frozen = m.store().checksum(true);
  AdamW opt(m.store());
  for (const auto& p : m.store().all()) {
    auto g = p.tensor;
    for (auto& x : g.mutable_grad()) x = 1.0;
  }
  opt.step(0.1, 0.1);
  EXPECT_EQ(m.store().checksum(true), frozen);
  auto keys = opt.state_keys();
  auto names = m.store().tunable_names();
  std::sort(names.begin(), names.end());
  EXPECT_EQ(keys, names);
  EXPECT_EQ(opt.state_bytes(), optimizer_state_bytes(m.store()));
}

TEST(CosineLr, WarmupEndpointsAndMidpoint) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 100, 10, 1.0), 0.0);
  EXPECT_DOUBLE_EQ(cosine_lr(5, 100, 10, 1.0), 0.5);
  EXPECT_DOUBLE_EQ(cosine_lr(10, 100, 10, 1.0), 1.0);
  EXPECT_NEAR(cosine_lr(55, 100, 10, 1.0), 1e-6 + 0.5 * (1.0 - 1e-6), 1e-12);
  EXPECT_NEAR(cosine_lr(100, 100, 10, 1.0), 1e-6, 1e-12);
  for (std::size_t s = 10; s < 100; ++s) EXPECT_GE(cosine_lr(s, 100, 10, 1.0), cosine_lr(s + 1, 100, 10, 1.0));
  EXPECT_THROW(cosine_lr(101, 100, 10, 1.0), RangeError);
}

TEST(CrossEntropy, UniformLogitsGiveLogC) {
  Tensor logits = Tensor::zeros({3, 7});
  EXPECT_NEAR(cross_entropy(logits, {0, 3, 6}).item(), std::log(7.0), 1e-15);
}

TEST(CrossEntropy, SaturatedLogitsAreFinite) {
  Tensor logits = Tensor::from({2, 3}, {1000, 0, -1000, -1000, 0, 1000});
  const double l = cross_entropy(logits, {0, 2}).item();
  EXPECT_TRUE(std::isfinite(l));
  EXPECT_NEAR(l, 0.0, 1e-12);
  EXPECT_NEAR(cross_entropy(logits, {2, 0}).item(), 2000.0, 1e-9);
}

TEST(CrossEntropy, SmoothingMatchesLoopOracle) {
  Tensor logits = Tensor::from({2, 3}, {0.2, -0.4, 1.1, 0.0, 0.7, -0.3});
  const std::vector<int> y{2, 1};
  const double s = 0.1;
  double expect = 0.0;
  for (std::size_t b = 0; b < 2; ++b) {
    double z = 0.0;
    for (std::size_t c = 0; c < 3; ++c) z += std::exp(logits[b * 3 + c]);
    for (std::size_t c = 0; c < 3; ++c) {
      const double t = (1 - s) * (static_cast<int>(c) == y[b]) + s / 3.0;
      expect -= t * (logits[b * 3 + c] - std::log(z));
    }
  }
  EXPECT_NEAR(cross_entropy(logits, y, s).item(), expect / 2.0, 1e-14);
}

TEST(CrossEntropy, Gradcheck) {
  Rng r(4);
  Tensor logits = Tensor::zeros({4, 5}, true);
  for (auto& x : logits.mutable_data()) x = 2.0 * r.normal();
  for (double s : {0.0, 0.2}) {
    auto res = gradcheck([&] { return cross_entropy(logits, {0, 4, 2, 2}, s); }, {{"logits", logits}});
    ASSERT_EQ(res.size(), 1u);
    EXPECT_LT(res[0].max_rel_error, 1e-6);
  }
}

TEST(CrossEntropy, BadLabels) {
  Tensor logits = Tensor::zeros({2, 3});
  EXPECT_THROW(cross_entropy(logits, {0, 3}), RangeError);
  EXPECT_THROW(cross_entropy(logits, {0, -1}), RangeError);
  EXPECT_THROW(cross_entropy(logits, {0}), DimensionError);
}

TEST(Argmax, TiesGoToLowestIndex) {
  Tensor logits = Tensor::from({3, 3}, {1, 1, 0, 0, 2, 2, 5, 5, 5});
  EXPECT_EQ(argmax_rows(logits), (std::vector<int>{0, 1, 0}));
}

TEST(HeadFeatures, WidthsAndMissingPrompts) {
  TokenSequence seq;
  seq.tokens = Tensor::zeros({2, 1 + 3 + 4, 5});
  auto x = seq.tokens.mutable_data();
  for (std::size_t i = 0; i < x.size(); ++i) x[i] = static_cast<double>(i % 13);
  seq.num_prompts = 3;
  seq.num_patches = 4;
  EXPECT_EQ(head_features(seq, {HeadInput::Cls}).shape(), (Shape{2, 5}));
  Tensor all = head_features(seq, {HeadInput::Cls, HeadInput::PromptPool, HeadInput::PatchPool});
  ASSERT_EQ(all.shape(), (Shape{2, 15}));
  for (std::size_t b = 0; b < 2; ++b)
    for (std::size_t c = 0; c < 5; ++c) {
      auto at = [&](std::size_t t) { return seq.tokens[(b * 8 + t) * 5 + c]; };
      EXPECT_EQ(all[b * 15 + c], at(0));
      EXPECT_NEAR(all[b * 15 + 5 + c], (at(1) + at(2) + at(3)) / 3.0, 1e-15);
      EXPECT_NEAR(all[b * 15 + 10 + c], (at(4) + at(5) + at(6) + at(7)) / 4.0, 1e-15);
    }
  seq.tokens = Tensor::zeros({2, 5, 5});
  seq.num_prompts = 0;
  EXPECT_THROW(head_features(seq, {HeadInput::PromptPool}), ConfigError);
}

TEST(Train, ZeroEpochsIsInitialEvaluation) {
  Model m(tiny_config(Strategy::Dapt), 2);
  auto data = tiny_set(2);
  const auto before = m.store().checksum();
  RunReport r = train(m, data, &data, quick_train(0));
  ASSERT_EQ(r.epochs.size(), 1u);
  EXPECT_EQ(r.epochs[0].epoch, 0u);
  EvalResult e = evaluate(m, data, 8);
  EXPECT_EQ(r.final_train_accuracy, e.accuracy());
  EXPECT_EQ(*r.final_test_accuracy, e.accuracy());
  EXPECT_NEAR(r.epochs[0].loss, e.loss, 1e-12);
  EXPECT_EQ(m.store().checksum(), before);
}

TEST(Train, SameSeedSameLosses) {
  auto data = tiny_set(3);
  TrainConfig t = quick_train(2);
  t.augment = AugmentPolicy::ScaleTranslate;
  Model a(tiny_config(Strategy::Dapt), 3), b(tiny_config(Strategy::Dapt), 3);
  RunReport ra = train(a, data, nullptr, t), rb = train(b, data, nullptr, t);
  ASSERT_EQ(ra.epochs.size(), 3u);
  for (std::size_t e = 1; e < 3; ++e) {
    EXPECT_EQ(ra.epochs[e].step_losses, rb.epochs[e].step_losses);
    EXPECT_EQ(ra.epochs[e].step_losses.size(), 2u);
  }
  EXPECT_EQ(a.store().checksum(), b.store().checksum());
  EXPECT_EQ(ra.to_jsonl(), rb.to_jsonl());
}

TEST(Train, FrozenParametersNeverChange) {
  for (auto s : {Strategy::Dapt, Strategy::LinearProbe, Strategy::Lora}) {
    Model m(tiny_config(s), 5);
    const auto frozen = m.store().checksum(true);
    const auto all = m.store().checksum();
    train(m, tiny_set(2), nullptr, quick_train(2));
    EXPECT_EQ(m.store().checksum(true), frozen) << to_string(s);
    EXPECT_NE(m.store().checksum(), all) << to_string(s);
  }
}

TEST(Train, OverfitsSmallSubset) {
  Model m(tiny_config(Strategy::Full), 6);
  auto data = tiny_set(8);
  TrainConfig t = quick_train(100);
  t.warmup_epochs = 5;
  t.weight_decay = 0.0;
  RunReport r = train(m, data, nullptr, t);
  EXPECT_EQ(r.final_train_accuracy, 1.0);
  EXPECT_LT(r.epochs.back().loss, r.epochs[1].loss);
}

TEST(Evaluate, AccuracyMatchesArgmaxOfForward) {
  Model m(tiny_config(Strategy::Dapt), 7);
  auto data = tiny_set(3, 4, Split::Test);
  EvalResult e = evaluate(m, data, 5);
  std::vector<PatchSet> patches;
  for (const auto& c : data) patches.push_back(patchify(c, 8, 8));
  auto pred = argmax_rows(m.forward(patches).logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < data.size(); ++i) correct += pred[i] == data[i].label;
  EXPECT_EQ(e.predictions, pred);
  EXPECT_EQ(e.correct, correct);
  EXPECT_EQ(e.total, data.size());
  EXPECT_EQ(e.batch_stats.size(), 3u);
}

TEST(Train, NonFiniteParameterAbortsWithName) {
  Model m(tiny_config(Strategy::Full), 8);
  m.store().get("head.fc1.weight").mutable_data()[3] = std::numeric_limits<double>::quiet_NaN();
  TrainConfig t = quick_train(1);
  t.warmup_epochs = 0;
  try {
    train(m, tiny_set(1), nullptr, t);
    FAIL();
  } catch (const NumericError& e) {
    EXPECT_NE(std::string(e.what()).find("parameter head.fc1.weight"), std::string::npos) << e.what();
  }
}

TEST(Train, HugeLearningRateIsNumericError) {
  Model m(tiny_config(Strategy::Full), 9);
  TrainConfig t = quick_train(30);
  t.warmup_epochs = 0;
  t.lr = 1e200;
  EXPECT_THROW(train(m, tiny_set(2), nullptr, t), NumericError);
}

TEST(MergeStats, TokenWeighted) {
  std::vector<std::vector<ScaleRecord>> b{{{1.0, 0.5, 10}}, {{4.0, 0.0, 30}}};
  auto m = merge_stats(b);
  ASSERT_EQ(m.size(), 1u);
  EXPECT_DOUBLE_EQ(m[0].mean_scale, (10.0 + 120.0) / 40.0);
  EXPECT_DOUBLE_EQ(m[0].adjusted_ratio, 5.0 / 40.0);
  EXPECT_EQ(m[0].tokens, 40u);
}

TEST(FewShot, DeterministicAndFormatted) {
  auto pool = tiny_set(22);
  TrainConfig t = quick_train(3);
  auto make = [](std::size_t way) { return std::make_unique<Model>(tiny_config(Strategy::LinearProbe, way), 11); };
  FewShotResult a = run_fewshot(make, pool, 2, 2, 3, t), b = run_fewshot(make, pool, 2, 2, 3, t);
  EXPECT_EQ(a.accuracies, b.accuracies);
  ASSERT_EQ(a.accuracies.size(), 3u);
  double mean = 0.0, ss = 0.0;
  for (double x : a.accuracies) mean += x / 3.0;
  for (double x : a.accuracies) ss += (x - mean) * (x - mean);
  EXPECT_NEAR(a.mean, mean, 1e-15);
  EXPECT_NEAR(a.stddev, std::sqrt(ss / 2.0), 1e-15);
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f\xC2\xB1%.2f", 100 * mean, 100 * a.stddev);
  EXPECT_EQ(a.formatted(), buf);
  EXPECT_THROW(run_fewshot(make, pool, 2, 2, 0, t), ConfigError);
}

TEST(FewShot, SeparableTwoWayIsLearned) {
  // Spheres against boxes, clean and unrotated.
  DatasetSpec spec;
  spec.points = 128;
  spec.rotation = RotationPolicy::None;
  spec.families = {ShapeFamily::Sphere, ShapeFamily::Box};
  spec.train_per_class = 8 + 20;
  std::vector<PointCloud> pool;
  for (std::size_t i = 0; i < 2 * spec.train_per_class; ++i) pool.push_back(generate(spec, Split::Train, i));
  TrainConfig t = quick_train(60);
  t.batch_size = 4;
  t.lr = 3e-3;
  t.weight_decay = 0.0;
  auto make = [](std::size_t way) {
    ModelConfig c = tiny_config(Strategy::Full, way);
    c.backbone.num_patches = 16;
    c.backbone.patch_size = 8;
    return std::make_unique<Model>(c, 12);
  };
  FewShotResult r = run_fewshot(make, pool, 2, 8, 2, t);
  EXPECT_GE(r.mean, 0.9);
}
