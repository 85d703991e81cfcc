// Backbone + PETL modules + classification head.
#pragma once

#include <array>
#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "pcpetl/backbone.hpp"
#include "pcpetl/petl.hpp"

namespace pcpetl {

struct ModelConfig {
  BackboneConfig backbone;
  PETLConfig petl;
  std::size_t num_classes = 8;
  std::size_t head_hidden = 256;

  void validate() const;
  // Canonical `key=value` lines; the config hash is taken over this text.
  std::string canonical() const;
};

// L=12, d=384, h=6, 128 patches of 32 points, r=64, 15 classes.
ModelConfig large_scale_config(Strategy strategy = Strategy::Dapt);

using ConfigHash = std::array<std::uint8_t, 32>;
ConfigHash config_hash(const ModelConfig& cfg);
std::string to_hex(const ConfigHash& hash);

// Concatenates the selected pooled features: [B, |inputs| * d].
// Throws ConfigError if prompt_pool is requested and the sequence has no
// prompt slots.
Tensor head_features(const TokenSequence& seq, const std::vector<HeadInput>& inputs);

struct ModelOutput {
  Tensor logits;  // [B, C]
  TokenSequence sequence;
  std::vector<ScaleRecord> stats;
};

class Model {
 public:
  // Builds every parameter from `seed`, then applies the strategy mask.
  Model(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  ParameterStore& store() { return store_; }
  const ParameterStore& store() const { return store_; }
  const Backbone& backbone() const { return *backbone_; }
  PetlModules& petl() { return *petl_; }

  TokenSequence embed(const Tensor& groups, const Tensor& centers) const;
  ModelOutput forward_tokens(const TokenSequence& tokens, PetlCapture* capture = nullptr,
                             Rng* dropout_rng = nullptr);
  ModelOutput forward(const Tensor& groups, const Tensor& centers, PetlCapture* capture = nullptr,
                      Rng* dropout_rng = nullptr);
  ModelOutput forward(const std::vector<PatchSet>& patches, PetlCapture* capture = nullptr);

  Tensor head(const Tensor& features) const;
  std::size_t head_input_width() const;

  // True when no tunable parameter feeds the patch embedding.
  bool embedding_frozen() const;
  // True when only head parameters are tunable.
  bool only_head_tunable() const;

 private:
  struct Linear {
    Tensor weight, bias;
  };

  ModelConfig config_;
  ParameterStore store_;
  std::unique_ptr<Backbone> backbone_;
  std::unique_ptr<PetlModules> petl_;
  std::vector<Linear> head_;
};

}  // namespace pcpetl
