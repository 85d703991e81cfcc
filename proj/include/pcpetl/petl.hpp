// Parameter-efficient fine-tuning: feature transforms (TFTS), Dynamic
// Adapters with internal prompts, and the comparison baselines (serial
// adapters, external prompts, LoRA, BitFit, linear probing, full tuning).
#pragma once

#include <array>
#include <optional>
#include <string>
#include <vector>

#include "pcpetl/backbone.hpp"
#include "pcpetl/params.hpp"

namespace pcpetl {

enum class Strategy { Full, LinearProbe, AdapterSerial, ExternalPrompt, Lora, Bitfit, TftsOnly, Dapt };
enum class ScaleMode { Dynamic, DynamicNoRelu, Fixed, LearnableScalar };
enum class PromptMode { Off, Internal, External };
enum class PromptPool { Mean, Max, TopK };
enum class TftsGranularity { Off, LnOnly, LnLinear };
enum class HeadInput { Cls, PromptPool, PatchPool };

Strategy parse_strategy(const std::string& s);
ScaleMode parse_scale_mode(const std::string& s);
PromptMode parse_prompt_mode(const std::string& s);
PromptPool parse_prompt_pool(const std::string& s);
TftsGranularity parse_tfts_granularity(const std::string& s);
HeadInput parse_head_input(const std::string& s);
std::string to_string(Strategy v);
std::string to_string(ScaleMode v);
std::string to_string(PromptMode v);
std::string to_string(PromptPool v);
std::string to_string(TftsGranularity v);
std::string to_string(HeadInput v);
std::vector<Strategy> all_strategies();

struct PETLConfig {
  Strategy strategy = Strategy::Dapt;
  std::size_t rank = 16;
  ScaleMode scale_mode = ScaleMode::Dynamic;
  // S_m for fixed mode and the initial value in learnable-scalar mode; also
  // the serial adapter's fixed scale.
  double scale_value = 1.0;
  // 1-based layer indices; empty means every layer.
  std::vector<std::size_t> inserted_layers;
  PromptMode prompt_mode = PromptMode::Internal;
  std::size_t prompt_count = 10;  // external prompts per layer
  PromptPool prompt_pool = PromptPool::Mean;
  std::size_t prompt_topk = 4;
  bool prompt_accumulate = true;
  TftsGranularity tfts = TftsGranularity::LnLinear;
  // Empty selects {cls, prompt_pool, patch_pool} when prompts are active and
  // {cls, patch_pool} otherwise.
  std::vector<HeadInput> head_inputs;

  // Throws ConfigError on contradictory settings for the given backbone.
  void validate(const BackboneConfig& backbone) const;

  // Settings that actually take effect under the chosen strategy.
  PromptMode effective_prompt_mode() const;
  TftsGranularity effective_tfts() const;
  bool uses_dynamic_adapter() const { return strategy == Strategy::Dapt && rank > 0; }
  bool prompts_active() const { return effective_prompt_mode() != PromptMode::Off; }
  std::vector<HeadInput> effective_head_inputs() const;
  std::vector<std::size_t> layers(std::size_t depth) const;
  bool inserted(std::size_t layer, std::size_t depth) const;
};

// Number of prompt slots in the input of 1-based layer `layer`.
std::size_t prompt_slots_entering(const PETLConfig& cfg, std::size_t layer, std::size_t depth);

struct TFTSParams {
  Tensor gamma;
  Tensor beta;
  std::string site;
};

// y = gamma * x + beta over the last axis.
Tensor tfts(const Tensor& x, const TFTSParams& p);

struct DynamicAdapterParams {
  Tensor norm_weight, norm_bias;
  Tensor scale_weight, scale_bias;  // [1, d], [1]
  Tensor down_weight, down_bias;    // [r, d], [r]
  Tensor up_weight, up_bias;        // [d, r], [d]
  Tensor scalar;                    // [1], learnable-scalar mode only
  std::size_t rank = 0;
};

// relu(x_norm W_s^T + b) per token; [..., T, d] -> [..., T, 1].
Tensor dynamic_scale(const Tensor& x_norm, const Tensor& w_s, const Tensor& bias, bool apply_relu = true);

struct AdapterOutput {
  Tensor residual;    // S * (GELU(z W_d^T) W_u^T)
  Tensor prompt_raw;  // GELU(residual)
  Tensor scale;       // per-token S, [..., T, 1]
  Tensor normed;      // z = LN(x)
};

AdapterOutput dynamic_adapter(const Tensor& x, const DynamicAdapterParams& p, ScaleMode mode,
                              double fixed_scale = 1.0, double ln_eps = 1e-5);

// Pools already-activated adapter outputs over the token axis (second to
// last) and applies the prompt TFTS; result keeps a unit token axis.
Tensor pool_prompt(const Tensor& activated, PromptPool pool, std::size_t topk, const TFTSParams& p);
// GELU, pool, then TFTS.
Tensor make_internal_prompt(const Tensor& residuals, PromptPool pool, std::size_t topk, const TFTSParams& p);

// Inserts `prompt` [B, 1, d] after the existing prompt slots (accumulate) or
// replaces them (latest-only). `layer` is the 1-based producing layer.
void route_prompts(TokenSequence& seq, std::size_t layer, std::size_t depth, const Tensor& prompt, bool accumulate);

// Replaces the prompt block with `prompts` [n, d] broadcast over the batch.
void set_prompt_block(TokenSequence& seq, const Tensor& prompts);

struct PetlCapture {
  // Per layer; undefined where no adapter is attached.
  std::vector<Tensor> adapter_inputs;
  std::vector<Tensor> scales;
  std::vector<Tensor> residuals;
  std::vector<Tensor> prompts;  // internal prompt produced by the layer
};

// Owns the inserted modules and implements the backbone hooks for them.
class PetlModules final : public BlockHooks {
 public:
  PetlModules(const BackboneConfig& backbone, const PETLConfig& config, ParameterStore& store, const Rng& rng);

  const PETLConfig& config() const { return config_; }
  void begin_forward(PetlCapture* capture = nullptr);

  void before_layer(std::size_t layer, TokenSequence& seq) override;
  Tensor transform(std::size_t layer, Site site, const Tensor& x) override;
  Tensor qkv_delta(std::size_t layer, const Tensor& normed) override;
  Tensor block_residual(std::size_t layer, const Tensor& hidden, const Tensor& ffn_out) override;
  void after_layer(std::size_t layer, TokenSequence& seq) override;
  ScaleRecord layer_stats(std::size_t layer) const override { return stats_.at(layer); }

  const std::optional<DynamicAdapterParams>& adapter(std::size_t layer) const { return adapters_.at(layer); }

 private:
  struct SerialAdapter {
    Tensor down_weight, down_bias, up_weight, up_bias;
  };
  struct Lora {
    Tensor q_a, q_b, v_a, v_b;
  };

  BackboneConfig backbone_;
  PETLConfig config_;
  std::vector<std::array<std::optional<TFTSParams>, 6>> site_tfts_;
  std::vector<std::optional<TFTSParams>> prompt_tfts_;
  std::vector<std::optional<DynamicAdapterParams>> adapters_;
  std::vector<std::optional<SerialAdapter>> serial_;
  std::vector<std::optional<Lora>> lora_;
  std::vector<Tensor> external_prompts_;

  std::vector<ScaleRecord> stats_;
  Tensor pending_prompt_;
  PetlCapture* capture_ = nullptr;
};

// Sets the tunable mask for the strategy and locks the store.
void apply_strategy(ParameterStore& store, const PETLConfig& cfg);

}  // namespace pcpetl
