// Flat `section.key = value` run configuration shared by all commands.
#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "pcpetl/dataset.hpp"
#include "pcpetl/model.hpp"
#include "pcpetl/trainer.hpp"

namespace pcpetl {

struct FewShotConfig {
  std::size_t way = 5;
  std::size_t shot = 10;
  std::size_t episodes = 10;
  std::size_t epochs = 40;
};

struct RunConfig {
  std::uint64_t seed = 0;
  DatasetSpec data;
  BackboneConfig backbone;
  PETLConfig petl;
  std::size_t head_hidden = 256;
  TrainConfig train;
  FewShotConfig fewshot;
  std::size_t eval_batch_size = 32;

  // Throws ConfigError for unknown keys or malformed values.
  void set(const std::string& key, const std::string& value);
  std::string get(const std::string& key) const;

  // Applies `key = value` lines; '#' starts a comment line.
  void merge_text(const std::string& text, const std::string& origin = "<text>");
  // "key=value" command-line override.
  void merge_override(const std::string& assignment);

  // Every key in registry order as `key = value` lines; parses back into an
  // identical configuration.
  std::string echo() const;
  std::map<std::string, std::string> values() const;

  // Derived configurations; `seed` feeds data, init and training.
  DatasetSpec dataset_spec() const;
  ModelConfig model_config(std::size_t num_classes = 0) const;  // 0: one class per shape family
  TrainConfig train_config() const;

  void validate() const;
  bool operator==(const RunConfig& other) const { return echo() == other.echo(); }
};

struct KeyInfo {
  std::string name;
  std::string type;
  std::string default_value;
  std::string help;
};

const std::vector<KeyInfo>& config_keys();
// Table of every key with its type and default, for --help.
std::string config_keys_help();

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

}  // namespace pcpetl
