#include "pcpetl/trainer.hpp"

#include <chrono>
#include <cmath>
#include <cstdio>
#include <numeric>

#include <json.hpp>

#include "pcpetl/errors.hpp"
#include "pcpetl/loss.hpp"
#include "pcpetl/ops.hpp"
#include "pcpetl/optim.hpp"

namespace pcpetl {

void TrainConfig::validate() const {
  if (batch_size < 1) throw ConfigError("train.batch_size must be >= 1");
  if (epochs > 0 && warmup_epochs >= epochs) throw ConfigError("train.warmup_epochs must be < train.epochs");
  if (!(lr >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("train.lr and train.weight_decay must be >= 0");
  if (label_smoothing < 0.0 || label_smoothing >= 1.0) throw ConfigError("train.label_smoothing must lie in [0, 1)");
}

namespace {

// Per-sample inputs at the deepest level that stays constant during training:
// raw patches, embedded tokens (frozen embedding) or head features (frozen
// everything but the head).
class BatchSource {
 public:
  enum class Level { Patches, Tokens, Features };

  BatchSource(Model& model, const std::vector<PointCloud>& samples, AugmentPolicy augment, std::uint64_t seed)
      : model_(model), samples_(samples), augment_(augment), seed_(seed) {
    const auto& b = model.config().backbone;
    if (augment_ == AugmentPolicy::None) {
      patches_.reserve(samples.size());
      for (const auto& s : samples) patches_.push_back(patchify(s, b.num_patches, b.patch_size));
      if (model.only_head_tunable() && b.dropout == 0.0) {
        level_ = Level::Features;
      } else if (model.embedding_frozen()) {
        level_ = Level::Tokens;
      }
    }
    if (level_ == Level::Patches) return;
    std::vector<std::size_t> idx(samples.size());
    std::iota(idx.begin(), idx.end(), 0);
    for (std::size_t start = 0; start < idx.size(); start += 32) {
      std::vector<std::size_t> chunk(idx.begin() + static_cast<long>(start),
                                     idx.begin() + static_cast<long>(std::min(idx.size(), start + 32)));
      auto [groups, centers] = pack(chunk, 0);
      TokenSequence seq = model.embed(groups, centers);
      Tensor rows = seq.tokens;
      if (level_ == Level::Features) {
        rows = head_features(model.forward_tokens(seq).sequence, model.config().petl.effective_head_inputs());
      }
      const std::size_t width = rows.numel() / chunk.size();
      row_width_ = width;
      row_shape_ = Shape(rows.shape().begin() + 1, rows.shape().end());
      for (std::size_t i = 0; i < chunk.size(); ++i) {
        cache_.emplace_back(rows.data().begin() + static_cast<long>(i * width),
                            rows.data().begin() + static_cast<long>((i + 1) * width));
      }
    }
  }

  Level level() const { return level_; }

  std::vector<int> labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out;
    for (auto i : idx) out.push_back(samples_[i].label);
    return out;
  }

  ModelOutput forward(const std::vector<std::size_t>& idx, std::size_t epoch, Rng* dropout_rng,
                      PetlCapture* capture = nullptr) {
    if (level_ == Level::Features) {
      ModelOutput out;
      out.logits = model_.head(gather(idx));
      return out;
    }
    if (level_ == Level::Tokens) {
      TokenSequence seq;
      seq.tokens = gather(idx);
      seq.num_patches = model_.config().backbone.num_patches;
      return model_.forward_tokens(seq, capture, dropout_rng);
    }
    auto [groups, centers] = pack(idx, epoch);
    return model_.forward(groups, centers, capture, dropout_rng);
  }

 private:
  std::pair<Tensor, Tensor> pack(const std::vector<std::size_t>& idx, std::size_t epoch) const {
    const auto& b = model_.config().backbone;
    std::vector<PatchSet> batch;
    batch.reserve(idx.size());
    for (auto i : idx) {
      if (augment_ == AugmentPolicy::None) {
        batch.push_back(patches_[i]);
      } else {
        Rng rng = Rng(seed_).split((static_cast<std::uint64_t>(epoch) << 32) | i);
        batch.push_back(patchify(pcpetl::augment(samples_[i], augment_, rng), b.num_patches, b.patch_size));
      }
    }
    return pack_patches(batch);
  }

  Tensor gather(const std::vector<std::size_t>& idx) const {
    std::vector<double> data;
    data.reserve(idx.size() * row_width_);
    for (auto i : idx) data.insert(data.end(), cache_[i].begin(), cache_[i].end());
    Shape shape{idx.size()};
    shape.insert(shape.end(), row_shape_.begin(), row_shape_.end());
    return Tensor::from(std::move(shape), std::move(data));
  }

  Model& model_;
  const std::vector<PointCloud>& samples_;
  AugmentPolicy augment_;
  std::uint64_t seed_;
  Level level_ = Level::Patches;
  std::vector<PatchSet> patches_;
  std::vector<std::vector<double>> cache_;
  std::size_t row_width_ = 0;
  Shape row_shape_;
};

EvalResult evaluate_source(BatchSource& source, std::size_t n, std::size_t batch_size) {
  EvalResult r;
  for (std::size_t start = 0; start < n; start += batch_size) {
    std::vector<std::size_t> idx(std::min(batch_size, n - start));
    std::iota(idx.begin(), idx.end(), start);
    ModelOutput out = source.forward(idx, 0, nullptr);
    const auto labels = source.labels(idx);
    const auto pred = argmax_rows(out.logits);
    for (std::size_t i = 0; i < idx.size(); ++i) r.correct += pred[i] == labels[i] ? 1 : 0;
    r.total += idx.size();
    r.loss += cross_entropy(out.logits, labels).item() * static_cast<double>(idx.size());
    r.predictions.insert(r.predictions.end(), pred.begin(), pred.end());
    if (!out.stats.empty()) r.batch_stats.push_back(out.stats);
  }
  if (r.total) r.loss /= static_cast<double>(r.total);
  return r;
}

bool all_finite(std::span<const double> v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

[[noreturn]] void non_finite_abort(const ParameterStore& store, const Tape& tape, const std::string& where) {
  std::string culprit;
  for (const auto& p : store.all()) {
    if (!all_finite(p.tensor.data())) {
      culprit = "parameter " + p.name;
      break;
    }
  }
  if (culprit.empty()) {
    const auto& entries = tape.entries();
    for (std::size_t i = 0; i < entries.size(); ++i) {
      if (!all_finite(entries[i].output->data)) {
        culprit = "activation #" + std::to_string(i) + " " + shape_str(entries[i].output->shape) + " of the forward pass";
        break;
      }
    }
  }
  if (culprit.empty()) {
    for (const auto& p : store.all()) {
      if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
        culprit = "gradient of " + p.name;
        break;
      }
    }
  }
  if (culprit.empty()) culprit = "loss";
  throw NumericError("training diverged at " + where + ": first non-finite tensor is " + culprit);
}

}  // namespace

EvalResult evaluate(Model& model, const std::vector<PointCloud>& samples, std::size_t batch_size) {
  if (batch_size < 1) throw ConfigError("evaluation batch size must be >= 1");
  BatchSource source(model, samples, AugmentPolicy::None, 0);
  return evaluate_source(source, samples.size(), batch_size);
}

std::vector<ScaleRecord> merge_stats(const std::vector<std::vector<ScaleRecord>>& batches) {
  std::vector<ScaleRecord> out;
  if (batches.empty()) return out;
  out.resize(batches[0].size());
  for (const auto& b : batches) {
    for (std::size_t l = 0; l < out.size(); ++l) {
      const double w = static_cast<double>(b[l].tokens);
      out[l].mean_scale += w * b[l].mean_scale;
      out[l].adjusted_ratio += w * b[l].adjusted_ratio;
      out[l].tokens += b[l].tokens;
    }
  }
  for (auto& r : out) {
    if (r.tokens == 0) continue;
    r.mean_scale /= static_cast<double>(r.tokens);
    r.adjusted_ratio /= static_cast<double>(r.tokens);
  }
  return out;
}

RunReport train(Model& model, const std::vector<PointCloud>& train_set, const std::vector<PointCloud>* test_set,
                const TrainConfig& cfg, std::ostream* log) {
  cfg.validate();
  if (train_set.empty()) throw DataError("training set is empty");
  const auto t0 = std::chrono::steady_clock::now();
  RunReport report;
  report.counts = count_tunable(model.store());

  BatchSource train_src(model, train_set, cfg.augment, cfg.seed);
  std::optional<BatchSource> plain_train;
  if (cfg.augment != AugmentPolicy::None) plain_train.emplace(model, train_set, AugmentPolicy::None, cfg.seed);
  BatchSource& train_eval = plain_train ? *plain_train : train_src;
  std::optional<BatchSource> test_src;
  if (test_set) test_src.emplace(model, *test_set, AugmentPolicy::None, cfg.seed);

  const std::size_t n = train_set.size();
  const std::size_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = steps_per_epoch * cfg.epochs;
  const std::size_t warmup_steps = steps_per_epoch * cfg.warmup_epochs;

  auto record_eval = [&](EpochRecord& rec, bool final_pass) {
    if (test_src && (final_pass || (cfg.eval_every > 0 && rec.epoch % cfg.eval_every == 0))) {
      EvalResult r = evaluate_source(*test_src, test_set->size(), cfg.batch_size);
      rec.test_accuracy = r.accuracy();
      if (final_pass) {
        report.final_test_accuracy = r.accuracy();
        report.scale_stats = merge_stats(r.batch_stats);
      }
    }
  };

  {
    EvalResult init = evaluate_source(train_eval, n, cfg.batch_size);
    EpochRecord rec;
    rec.epoch = 0;
    rec.loss = init.loss;
    rec.train_accuracy = init.accuracy();
    record_eval(rec, cfg.epochs == 0);
    report.epochs.push_back(rec);
    if (cfg.epochs == 0) {
      report.final_train_accuracy = init.accuracy();
      if (!test_set) report.scale_stats = merge_stats(init.batch_stats);
    }
  }

  AdamW optim(model.store());
  const Rng root(cfg.seed);
  std::size_t step = 0;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng = root.split(0x5348554646ULL + epoch);
    shuffle_rng.shuffle(order);
    double loss_sum = 0.0;
    std::size_t correct = 0;
    std::vector<double> step_losses;
    double lr = 0.0;
    for (std::size_t start = 0; start < n; start += cfg.batch_size) {
      std::vector<std::size_t> idx(order.begin() + static_cast<long>(start),
                                   order.begin() + static_cast<long>(std::min(n, start + cfg.batch_size)));
      const auto labels = train_src.labels(idx);
      Rng dropout_rng = root.split(0x44524f50ULL + step);
      Tape tape;
      double loss_value = 0.0;
      {
        TapeGuard guard(tape);
        ModelOutput out = train_src.forward(idx, epoch, &dropout_rng);
        Tensor loss = cross_entropy(out.logits, labels, cfg.label_smoothing);
        loss_value = loss.item();
        if (!std::isfinite(loss_value)) {
          non_finite_abort(model.store(), tape, "epoch " + std::to_string(epoch) + " step " + std::to_string(step));
        }
        const auto pred = argmax_rows(out.logits);
        for (std::size_t i = 0; i < idx.size(); ++i) correct += pred[i] == labels[i] ? 1 : 0;
        tape.backward(loss);
      }
      for (const auto& p : model.store().all()) {
        if (p.tensor.has_grad() && !all_finite(p.tensor.grad())) {
          non_finite_abort(model.store(), tape, "epoch " + std::to_string(epoch) + " step " + std::to_string(step));
        }
      }
      ++step;
      lr = cosine_lr(step, total_steps, warmup_steps, cfg.lr);
      optim.step(lr, cfg.weight_decay);
      model.store().clear_grads();
      loss_sum += loss_value * static_cast<double>(idx.size());
      step_losses.push_back(loss_value);
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.loss = loss_sum / static_cast<double>(n);
    rec.train_accuracy = static_cast<double>(correct) / static_cast<double>(n);
    rec.lr = lr;
    rec.step_losses = std::move(step_losses);
    const bool last = epoch == cfg.epochs;
    record_eval(rec, last);
    report.epochs.push_back(rec);
    if (log) {
      char line[160];
      std::snprintf(line, sizeof line, "epoch %3zu  loss %.5f  train_acc %.4f", epoch, rec.loss, rec.train_accuracy);
      *log << line;
      if (rec.test_accuracy) {
        std::snprintf(line, sizeof line, "  test_acc %.4f", *rec.test_accuracy);
        *log << line;
      }
      *log << "\n" << std::flush;
    }
    if (last) {
      EvalResult final_train = evaluate_source(train_eval, n, cfg.batch_size);
      report.final_train_accuracy = final_train.accuracy();
      if (!test_set) report.scale_stats = merge_stats(final_train.batch_stats);
    }
  }
  report.wall_seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

std::string RunReport::to_jsonl(const std::map<std::string, std::string>& config) const {
  using nlohmann::json;
  std::string out;
  for (const auto& e : epochs) {
    json j{{"type", "epoch"},
           {"epoch", e.epoch},
           {"loss", e.loss},
           {"train_accuracy", e.train_accuracy},
           {"lr", e.lr},
           {"step_losses", e.step_losses}};
    j["test_accuracy"] = e.test_accuracy ? json(*e.test_accuracy) : json(nullptr);
    out += j.dump() + "\n";
  }
  json groups = json::object();
  for (const auto& [name, g] : counts.groups) groups[name] = {{"total", g.total}, {"tunable", g.tunable}};
  json stats = json::array();
  for (std::size_t l = 0; l < scale_stats.size(); ++l) {
    stats.push_back({{"layer", l + 1},
                     {"mean_scale", scale_stats[l].mean_scale},
                     {"adjusted_ratio", scale_stats[l].adjusted_ratio}});
  }
  json summary{{"type", "summary"},
               {"final_train_accuracy", final_train_accuracy},
               {"final_test_accuracy", final_test_accuracy ? json(*final_test_accuracy) : json(nullptr)},
               {"tunable", counts.tunable},
               {"total", counts.total},
               {"ratio", counts.ratio},
               {"groups", groups},
               {"scale_stats", stats},
               {"config", config}};
  out += summary.dump() + "\n";
  return out;
}

std::string FewShotResult::formatted() const {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.2f\xC2\xB1%.2f", 100.0 * mean, 100.0 * stddev);
  return buf;
}

FewShotResult run_fewshot(const std::function<std::unique_ptr<Model>(std::size_t way)>& make_model,
                          const std::vector<PointCloud>& pool, std::size_t way, std::size_t shot,
                          std::size_t episodes, const TrainConfig& cfg) {
  if (episodes < 1) throw ConfigError("few-shot needs at least one episode");
  FewShotResult r;
  const Rng root(cfg.seed);
  for (std::size_t e = 0; e < episodes; ++e) {
    Rng rng = root.split(0x45504953ULL + e);
    FewShotEpisode ep = sample_episode(pool, way, shot, rng);
    auto model = make_model(way);
    train(*model, ep.support, nullptr, cfg);
    r.accuracies.push_back(evaluate(*model, ep.query, cfg.batch_size).accuracy());
  }
  const double n = static_cast<double>(episodes);
  r.mean = std::accumulate(r.accuracies.begin(), r.accuracies.end(), 0.0) / n;
  if (episodes > 1) {
    double ss = 0.0;
    for (double a : r.accuracies) ss += (a - r.mean) * (a - r.mean);
    r.stddev = std::sqrt(ss / (n - 1.0));
  }
  return r;
}

}  // namespace pcpetl
