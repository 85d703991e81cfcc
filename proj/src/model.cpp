#include "pcpetl/model.hpp"

#include <openssl/sha.h>

#include <sstream>

#include "pcpetl/errors.hpp"
#include "pcpetl/ops.hpp"

namespace pcpetl {

namespace {

template <typename T, typename F>
std::string join(const std::vector<T>& v, F&& fmt) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + fmt(v[i]);
  return out;
}

std::string num(std::size_t v) { return std::to_string(v); }

std::string real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

}  // namespace

void ModelConfig::validate() const {
  backbone.validate();
  petl.validate(backbone);
  if (num_classes < 2) throw ConfigError("model needs at least 2 classes");
  if (head_hidden < 1) throw ConfigError("model.head_hidden must be >= 1");
}

std::string ModelConfig::canonical() const {
  const auto& b = backbone;
  const auto& p = petl;
  std::ostringstream os;
  os << "backbone.depth=" << b.depth << "\n"
     << "backbone.embed_dim=" << b.embed_dim << "\n"
     << "backbone.heads=" << b.heads << "\n"
     << "backbone.ffn_ratio=" << b.ffn_ratio << "\n"
     << "backbone.num_patches=" << b.num_patches << "\n"
     << "backbone.patch_size=" << b.patch_size << "\n"
     << "backbone.embed_hidden=" << join(b.embed_hidden, num) << "\n"
     << "backbone.pos_hidden=" << b.pos_hidden << "\n"
     << "backbone.dropout=" << real(b.dropout) << "\n"
     << "backbone.ln_eps=" << real(b.ln_eps) << "\n"
     << "petl.strategy=" << to_string(p.strategy) << "\n"
     << "petl.rank=" << p.rank << "\n"
     << "petl.scale_mode=" << to_string(p.scale_mode) << "\n"
     << "petl.scale_value=" << real(p.scale_value) << "\n"
     << "petl.inserted_layers=" << join(p.layers(b.depth), num) << "\n"
     << "petl.prompt_mode=" << to_string(p.effective_prompt_mode()) << "\n"
     << "petl.prompt_count=" << p.prompt_count << "\n"
     << "petl.prompt_pool=" << to_string(p.prompt_pool) << "\n"
     << "petl.prompt_topk=" << p.prompt_topk << "\n"
     << "petl.prompt_accumulate=" << (p.prompt_accumulate ? "true" : "false") << "\n"
     << "petl.tfts=" << to_string(p.effective_tfts()) << "\n"
     << "petl.head_inputs="
     << join(p.effective_head_inputs(), [](HeadInput h) { return to_string(h); }) << "\n"
     << "model.num_classes=" << num_classes << "\n"
     << "model.head_hidden=" << head_hidden << "\n";
  return os.str();
}

ModelConfig large_scale_config(Strategy strategy) {
  ModelConfig cfg;
  cfg.backbone.depth = 12;
  cfg.backbone.embed_dim = 384;
  cfg.backbone.heads = 6;
  cfg.backbone.num_patches = 128;
  cfg.backbone.patch_size = 32;
  cfg.backbone.embed_hidden = {128, 256, 512};
  cfg.backbone.pos_hidden = 128;
  cfg.petl.strategy = strategy;
  cfg.petl.rank = 64;
  cfg.num_classes = 15;
  return cfg;
}

ConfigHash config_hash(const ModelConfig& cfg) {
  const std::string text = cfg.canonical();
  ConfigHash h{};
  SHA256(reinterpret_cast<const unsigned char*>(text.data()), text.size(), h.data());
  return h;
}

std::string to_hex(const ConfigHash& hash) {
  static const char* digits = "0123456789abcdef";
  std::string s;
  for (auto b : hash) {
    s += digits[b >> 4];
    s += digits[b & 15];
  }
  return s;
}

Tensor head_features(const TokenSequence& seq, const std::vector<HeadInput>& inputs) {
  seq.check();
  const std::size_t B = seq.batch(), d = seq.tokens.shape()[2];
  std::vector<Tensor> parts;
  for (auto in : inputs) {
    switch (in) {
      case HeadInput::Cls:
        parts.push_back(reshape(slice(seq.tokens, 1, 0, 1), {B, d}));
        break;
      case HeadInput::PromptPool:
        if (seq.num_prompts == 0) throw ConfigError("head input prompt_pool requested but the sequence has no prompts");
        parts.push_back(mean_pool(slice(seq.tokens, 1, seq.prompt_begin(), seq.num_prompts), 1));
        break;
      case HeadInput::PatchPool:
        parts.push_back(mean_pool(slice(seq.tokens, 1, seq.patch_begin(), seq.num_patches), 1));
        break;
    }
  }
  if (parts.empty()) throw ConfigError("head needs at least one input");
  return parts.size() == 1 ? parts[0] : concat(parts, 1);
}

Model::Model(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const Rng rng(seed);
  backbone_ = std::make_unique<Backbone>(config_.backbone, store_, rng);
  petl_ = std::make_unique<PetlModules>(config_.backbone, config_.petl, store_, rng);
  const std::size_t widths[] = {head_input_width(), config_.head_hidden, config_.head_hidden, config_.num_classes};
  for (std::size_t i = 0; i + 1 < std::size(widths); ++i) {
    const std::string name = "head.fc" + std::to_string(i);
    Linear l;
    l.weight = store_.add(name + ".weight", "head", Tensor::zeros({widths[i + 1], widths[i]}));
    init_xavier_uniform(l.weight, widths[i], widths[i + 1], rng, name + ".weight");
    l.bias = store_.add(name + ".bias", "head", Tensor::zeros({widths[i + 1]}));
    head_.push_back(l);
  }
  apply_strategy(store_, config_.petl);
}

std::size_t Model::head_input_width() const {
  return config_.petl.effective_head_inputs().size() * config_.backbone.embed_dim;
}

TokenSequence Model::embed(const Tensor& groups, const Tensor& centers) const {
  return backbone_->embed_patches(groups, centers);
}

Tensor Model::head(const Tensor& features) const {
  Tensor h = features;
  for (std::size_t i = 0; i < head_.size(); ++i) {
    h = linear(h, head_[i].weight, head_[i].bias);
    if (i + 1 < head_.size()) h = relu(h);
  }
  return h;
}

ModelOutput Model::forward_tokens(const TokenSequence& tokens, PetlCapture* capture, Rng* dropout_rng) {
  petl_->begin_forward(capture);
  BackboneOutput b = backbone_->forward(tokens, petl_.get(), dropout_rng);
  ModelOutput out;
  out.logits = head(head_features(b.sequence, config_.petl.effective_head_inputs()));
  out.sequence = std::move(b.sequence);
  out.stats = std::move(b.stats);
  return out;
}

ModelOutput Model::forward(const Tensor& groups, const Tensor& centers, PetlCapture* capture, Rng* dropout_rng) {
  return forward_tokens(embed(groups, centers), capture, dropout_rng);
}

ModelOutput Model::forward(const std::vector<PatchSet>& patches, PetlCapture* capture) {
  auto [groups, centers] = pack_patches(patches);
  return forward(groups, centers, capture);
}

bool Model::embedding_frozen() const {
  for (const auto& p : store_.all()) {
    if (p.tunable && (p.name.starts_with("backbone.embed.") || p.name.starts_with("backbone.pos.") ||
                      p.name.starts_with("backbone.cls_"))) {
      return false;
    }
  }
  return true;
}

bool Model::only_head_tunable() const {
  for (const auto& p : store_.all())
    if (p.tunable && p.group != "head") return false;
  return true;
}

}  // namespace pcpetl
