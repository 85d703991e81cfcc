#include "pcpetl/backbone.hpp"

#include "pcpetl/errors.hpp"
#include "pcpetl/ops.hpp"

namespace pcpetl {

void BackboneConfig::validate() const {
  if (depth < 1) throw ConfigError("backbone.depth must be >= 1");
  if (embed_dim < 2) throw ConfigError("backbone.embed_dim must be >= 2");
  if (heads == 0 || embed_dim % heads != 0) {
    throw ConfigError("backbone.embed_dim " + std::to_string(embed_dim) + " is not divisible by heads " +
                      std::to_string(heads));
  }
  if (ffn_ratio == 0) throw ConfigError("backbone.ffn_ratio must be >= 1");
  if (num_patches == 0 || patch_size == 0) throw ConfigError("backbone.patches and patch_size must be >= 1");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("backbone.dropout must lie in [0, 1)");
}

void TokenSequence::check() const {
  if (!tokens.defined() || tokens.rank() != 3 || tokens.shape()[1] != length()) {
    throw ContractError("token sequence markers (1 + " + std::to_string(num_prompts) + " + " +
                        std::to_string(num_patches) + ") disagree with tensor " +
                        (tokens.defined() ? shape_str(tokens.shape()) : std::string("<undefined>")));
  }
}

std::string to_string(Site site) {
  switch (site) {
    case Site::Ln1: return "ln1";
    case Site::Qkv: return "qkv";
    case Site::AttnProj: return "proj";
    case Site::Ln2: return "ln2";
    case Site::Fc1: return "fc1";
    case Site::Fc2: return "fc2";
  }
  return "?";
}

Backbone::Linear Backbone::make_linear(ParameterStore& store, const std::string& name, std::size_t in,
                                       std::size_t out, const Rng& rng) const {
  Linear l;
  l.weight = store.add(name + ".weight", "backbone", Tensor::zeros({out, in}));
  init_xavier_uniform(l.weight, in, out, rng, name + ".weight");
  l.bias = store.add(name + ".bias", "backbone", Tensor::zeros({out}));
  return l;
}

Backbone::Norm Backbone::make_norm(ParameterStore& store, const std::string& name, std::size_t d) const {
  return {store.add(name + ".weight", "backbone", Tensor::full({d}, 1.0)),
          store.add(name + ".bias", "backbone", Tensor::zeros({d}))};
}

Backbone::Backbone(const BackboneConfig& config, ParameterStore& store, const Rng& rng) : config_(config) {
  config_.validate();
  const std::size_t d = config_.embed_dim;
  std::size_t width = 3;
  std::vector<std::size_t> widths = config_.embed_hidden;
  widths.push_back(d);
  for (std::size_t i = 0; i < widths.size(); ++i) {
    point_mlp_.push_back(make_linear(store, "backbone.embed.mlp." + std::to_string(i), width, widths[i], rng));
    width = widths[i];
  }
  pos_mlp_.push_back(make_linear(store, "backbone.pos.0", 3, config_.pos_hidden, rng));
  pos_mlp_.push_back(make_linear(store, "backbone.pos.1", config_.pos_hidden, d, rng));
  cls_token_ = store.add("backbone.cls_token", "backbone", Tensor::zeros({d}));
  init_normal(cls_token_, 0.02, rng, "backbone.cls_token");
  cls_pos_ = store.add("backbone.cls_pos", "backbone", Tensor::zeros({d}));
  init_normal(cls_pos_, 0.02, rng, "backbone.cls_pos");
  for (std::size_t i = 0; i < config_.depth; ++i) {
    const std::string p = "backbone.blocks." + std::to_string(i);
    Block b;
    b.ln1 = make_norm(store, p + ".ln1", d);
    b.qkv = make_linear(store, p + ".attn.qkv", d, 3 * d, rng);
    b.proj = make_linear(store, p + ".attn.proj", d, d, rng);
    b.ln2 = make_norm(store, p + ".ln2", d);
    b.fc1 = make_linear(store, p + ".mlp.fc1", d, config_.ffn_ratio * d, rng);
    b.fc2 = make_linear(store, p + ".mlp.fc2", config_.ffn_ratio * d, d, rng);
    blocks_.push_back(b);
  }
  final_norm_ = make_norm(store, "backbone.norm", d);
}

std::pair<Tensor, Tensor> pack_patches(const std::vector<PatchSet>& patches) {
  if (patches.empty()) throw DimensionError("pack_patches: empty batch");
  const std::size_t B = patches.size(), N = patches[0].num_patches(), k = patches[0].patch_size;
  std::vector<double> groups, centers;
  groups.reserve(B * N * k * 3);
  centers.reserve(B * N * 3);
  for (const auto& ps : patches) {
    if (ps.num_patches() != N || ps.patch_size != k || ps.groups.size() != N * k) {
      throw DimensionError("pack_patches: inconsistent patch sets in batch");
    }
    for (const auto& p : ps.groups) groups.insert(groups.end(), p.begin(), p.end());
    for (const auto& c : ps.centers) centers.insert(centers.end(), c.begin(), c.end());
  }
  return {Tensor::from({B, N, k, 3}, std::move(groups)), Tensor::from({B, N, 3}, std::move(centers))};
}

TokenSequence Backbone::embed(const std::vector<PatchSet>& patches) const {
  auto [groups, centers] = pack_patches(patches);
  return embed_patches(groups, centers);
}

TokenSequence Backbone::embed_patches(const Tensor& groups, const Tensor& centers) const {
  if (groups.rank() != 4 || groups.shape()[3] != 3 || groups.shape()[2] != config_.patch_size ||
      centers.rank() != 3 || centers.shape()[0] != groups.shape()[0] || centers.shape()[1] != groups.shape()[1]) {
    throw DimensionError("embed_patches: groups " + shape_str(groups.shape()) + " / centers " +
                         shape_str(centers.shape()) + " incompatible with patch size " +
                         std::to_string(config_.patch_size));
  }
  const std::size_t B = groups.shape()[0], N = groups.shape()[1], d = config_.embed_dim;
  Tensor h = groups;
  for (std::size_t i = 0; i < point_mlp_.size(); ++i) {
    h = linear(h, point_mlp_[i].weight, point_mlp_[i].bias);
    if (i + 1 < point_mlp_.size()) h = relu(h);
  }
  Tensor feats = max_pool(h, 2);  // [B, N, d]
  Tensor pos = linear(gelu(linear(centers, pos_mlp_[0].weight, pos_mlp_[0].bias)), pos_mlp_[1].weight,
                      pos_mlp_[1].bias);
  Tensor patch_tokens = add(feats, pos);
  Tensor cls = add(Tensor::zeros({B, 1, d}), add(cls_token_, cls_pos_));
  TokenSequence seq;
  seq.tokens = concat({cls, patch_tokens}, 1);
  seq.num_patches = N;
  return seq;
}

Tensor Backbone::attention(std::size_t layer, const Tensor& normed, BlockHooks* hooks) const {
  const auto& b = blocks_.at(layer);
  const std::size_t d = config_.embed_dim;
  Tensor qkv = linear(normed, b.qkv.weight, b.qkv.bias);
  if (hooks) {
    Tensor delta = hooks->qkv_delta(layer, normed);
    if (delta.defined()) qkv = add(qkv, delta);
    qkv = hooks->transform(layer, Site::Qkv, qkv);
  }
  Tensor q = slice(qkv, -1, 0, d), k = slice(qkv, -1, d, d), v = slice(qkv, -1, 2 * d, d);
  Tensor out = linear(pcpetl::attention(q, k, v, config_.heads), b.proj.weight, b.proj.bias);
  if (hooks) out = hooks->transform(layer, Site::AttnProj, out);
  return out;
}

Tensor Backbone::ffn(std::size_t layer, const Tensor& normed, BlockHooks* hooks) const {
  const auto& b = blocks_.at(layer);
  Tensor h = linear(normed, b.fc1.weight, b.fc1.bias);
  if (hooks) h = hooks->transform(layer, Site::Fc1, h);
  h = linear(gelu(h), b.fc2.weight, b.fc2.bias);
  if (hooks) h = hooks->transform(layer, Site::Fc2, h);
  return h;
}

Tensor Backbone::attention_weights(std::size_t layer, const Tensor& x) const {
  const auto& b = blocks_.at(layer);
  const std::size_t d = config_.embed_dim;
  Tensor qkv = linear(layer_norm(x, b.ln1.weight, b.ln1.bias, config_.ln_eps), b.qkv.weight, b.qkv.bias);
  return pcpetl::attention_weights(slice(qkv, -1, 0, d), slice(qkv, -1, d, d), config_.heads);
}

BackboneOutput Backbone::forward(TokenSequence seq, BlockHooks* hooks, Rng* dropout_rng) const {
  const double p = dropout_rng ? config_.dropout : 0.0;
  BackboneOutput out;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    const auto& b = blocks_[i];
    if (hooks) hooks->before_layer(i, seq);
    seq.check();
    Tensor x = seq.tokens;
    Tensor h = layer_norm(x, b.ln1.weight, b.ln1.bias, config_.ln_eps);
    if (hooks) h = hooks->transform(i, Site::Ln1, h);
    Tensor attn = attention(i, h, hooks);
    if (p > 0.0) attn = dropout(attn, p, *dropout_rng);
    Tensor hidden = add(x, attn);
    Tensor h2 = layer_norm(hidden, b.ln2.weight, b.ln2.bias, config_.ln_eps);
    if (hooks) h2 = hooks->transform(i, Site::Ln2, h2);
    Tensor f = ffn(i, h2, hooks);
    if (p > 0.0) f = dropout(f, p, *dropout_rng);
    Tensor next = add(hidden, f);
    if (hooks) {
      Tensor extra = hooks->block_residual(i, hidden, f);
      if (extra.defined()) next = add(next, extra);
    }
    seq.tokens = next;
    if (hooks) hooks->after_layer(i, seq);
    seq.check();
    out.stats.push_back(hooks ? hooks->layer_stats(i) : ScaleRecord{});
  }
  seq.tokens = layer_norm(seq.tokens, final_norm_.weight, final_norm_.bias, config_.ln_eps);
  out.sequence = std::move(seq);
  return out;
}

}  // namespace pcpetl
