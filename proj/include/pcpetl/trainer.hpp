// Training loop, evaluation and the few-shot driver.
#pragma once

#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "pcpetl/accounting.hpp"
#include "pcpetl/dataset.hpp"
#include "pcpetl/model.hpp"

namespace pcpetl {

struct TrainConfig {
  double lr = 5e-4;
  double weight_decay = 5e-2;
  std::size_t epochs = 60;
  std::size_t warmup_epochs = 5;
  std::size_t batch_size = 32;
  double label_smoothing = 0.0;
  std::uint64_t seed = 0;
  // Test-set evaluation period in epochs; 0 evaluates only at the end.
  std::size_t eval_every = 1;
  AugmentPolicy augment = AugmentPolicy::None;

  void validate() const;
};

struct EpochRecord {
  std::size_t epoch = 0;  // 0 is the evaluation before any update
  double loss = 0.0;      // mean training loss over the epoch
  double train_accuracy = 0.0;
  std::optional<double> test_accuracy;
  double lr = 0.0;  // learning rate of the epoch's last step
  std::vector<double> step_losses;
};

struct RunReport {
  std::vector<EpochRecord> epochs;
  double final_train_accuracy = 0.0;
  std::optional<double> final_test_accuracy;
  TunableCount counts;
  std::vector<ScaleRecord> scale_stats;  // per layer, over the final evaluation pass
  double wall_seconds = 0.0;

  // One JSON record per epoch plus a summary embedding `config`. Wall time is
  // left out so that reports of identical runs are byte-identical.
  std::string to_jsonl(const std::map<std::string, std::string>& config = {}) const;
};

struct EvalResult {
  std::size_t correct = 0;
  std::size_t total = 0;
  double loss = 0.0;
  std::vector<int> predictions;
  // Per batch, per layer.
  std::vector<std::vector<ScaleRecord>> batch_stats;
  double accuracy() const { return total ? static_cast<double>(correct) / static_cast<double>(total) : 0.0; }
};

EvalResult evaluate(Model& model, const std::vector<PointCloud>& samples, std::size_t batch_size = 32);

// Token-weighted per-layer average of batch statistics.
std::vector<ScaleRecord> merge_stats(const std::vector<std::vector<ScaleRecord>>& batches);

// `log` receives one line per epoch when given. Throws NumericError naming
// the first non-finite tensor if the loss or a gradient stops being finite.
RunReport train(Model& model, const std::vector<PointCloud>& train_set, const std::vector<PointCloud>* test_set,
                const TrainConfig& cfg, std::ostream* log = nullptr);

struct FewShotResult {
  std::vector<double> accuracies;
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation; 0 for one episode
  // Percentages as "mean±std".
  std::string formatted() const;
};

// Each episode gets a fresh model from `make_model(way)` (the same pretrained
// start), is trained on its support set and scored on its query set.
FewShotResult run_fewshot(const std::function<std::unique_ptr<Model>(std::size_t way)>& make_model,
                          const std::vector<PointCloud>& pool, std::size_t way, std::size_t shot,
                          std::size_t episodes, const TrainConfig& cfg);

}  // namespace pcpetl
