// Frozen point-cloud transformer: mini-PointNet patch embedding, learned
// positional embedding, CLS token, pre-norm blocks and a final LayerNorm.
#pragma once

#include <optional>
#include <string>
#include <vector>

#include "pcpetl/params.hpp"
#include "pcpetl/pointcloud.hpp"
#include "pcpetl/tensor.hpp"

namespace pcpetl {

struct BackboneConfig {
  std::size_t depth = 6;
  std::size_t embed_dim = 96;
  std::size_t heads = 4;
  std::size_t ffn_ratio = 4;
  std::size_t num_patches = 32;
  std::size_t patch_size = 32;
  // Hidden widths of the pointwise patch MLP (3 -> hidden... -> embed_dim).
  std::vector<std::size_t> embed_hidden{64};
  std::size_t pos_hidden = 128;
  double dropout = 0.0;
  double ln_eps = 1e-5;

  void validate() const;
};

// Tokens [B, 1 + prompts + patches, d] with slot layout markers.
struct TokenSequence {
  Tensor tokens;
  std::size_t num_prompts = 0;
  std::size_t num_patches = 0;

  std::size_t batch() const { return tokens.shape()[0]; }
  std::size_t length() const { return 1 + num_prompts + num_patches; }
  std::size_t prompt_begin() const { return 1; }
  std::size_t patch_begin() const { return 1 + num_prompts; }
  // Throws if the markers disagree with the tensor extent.
  void check() const;
};

// Feature sites inside one block where transforms may attach.
enum class Site { Ln1, Qkv, AttnProj, Ln2, Fc1, Fc2 };
inline constexpr Site kAllSites[] = {Site::Ln1, Site::Qkv, Site::AttnProj, Site::Ln2, Site::Fc1, Site::Fc2};
std::string to_string(Site site);

struct ScaleRecord {
  double mean_scale = 0.0;
  double adjusted_ratio = 0.0;
  std::size_t tokens = 0;
};

// Attachment points for fine-tuning modules. Layers are 0-based here.
// The default implementation leaves the backbone untouched.
class BlockHooks {
 public:
  virtual ~BlockHooks() = default;
  virtual void before_layer(std::size_t /*layer*/, TokenSequence& /*seq*/) {}
  virtual Tensor transform(std::size_t /*layer*/, Site /*site*/, const Tensor& x) { return x; }
  // Added to the fused QKV projection output when defined.
  virtual Tensor qkv_delta(std::size_t /*layer*/, const Tensor& /*normed*/) { return {}; }
  // Extra residual added to the block output when defined. `hidden` is the
  // post-attention state x', `ffn_out` the FFN branch output.
  virtual Tensor block_residual(std::size_t /*layer*/, const Tensor& /*hidden*/, const Tensor& /*ffn_out*/) {
    return {};
  }
  virtual void after_layer(std::size_t /*layer*/, TokenSequence& /*seq*/) {}
  virtual ScaleRecord layer_stats(std::size_t /*layer*/) const { return {}; }
};

struct BackboneOutput {
  TokenSequence sequence;  // after the final LayerNorm
  std::vector<ScaleRecord> stats;  // one per layer
};

class Backbone {
 public:
  // Registers all parameters under "backbone." in `store`.
  Backbone(const BackboneConfig& config, ParameterStore& store, const Rng& rng);

  const BackboneConfig& config() const { return config_; }

  // Patch groups [B, N, k, 3] and centers [B, N, 3] to tokens with CLS.
  TokenSequence embed(const std::vector<PatchSet>& patches) const;
  TokenSequence embed_patches(const Tensor& groups, const Tensor& centers) const;

  // Multi-head self-attention branch (without residual) for one layer.
  Tensor attention(std::size_t layer, const Tensor& normed, BlockHooks* hooks = nullptr) const;
  // FFN branch (without residual) for one layer.
  Tensor ffn(std::size_t layer, const Tensor& normed, BlockHooks* hooks = nullptr) const;

  BackboneOutput forward(TokenSequence seq, BlockHooks* hooks = nullptr, Rng* dropout_rng = nullptr) const;

  // Softmax weights [B, heads, T, T] of one layer for a given input.
  Tensor attention_weights(std::size_t layer, const Tensor& x) const;

 private:
  struct Linear {
    Tensor weight, bias;
  };
  struct Norm {
    Tensor weight, bias;
  };
  struct Block {
    Norm ln1, ln2;
    Linear qkv, proj, fc1, fc2;
  };

  Linear make_linear(ParameterStore& store, const std::string& name, std::size_t in, std::size_t out,
                     const Rng& rng) const;
  Norm make_norm(ParameterStore& store, const std::string& name, std::size_t d) const;

  BackboneConfig config_;
  std::vector<Linear> point_mlp_;
  std::vector<Linear> pos_mlp_;
  Tensor cls_token_, cls_pos_;
  std::vector<Block> blocks_;
  Norm final_norm_;
};

// Packs a batch of patch sets into [B, N, k, 3] groups and [B, N, 3] centers.
std::pair<Tensor, Tensor> pack_patches(const std::vector<PatchSet>& patches);

}  // namespace pcpetl
