#include "pcpetl/petl.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "pcpetl/errors.hpp"
#include "pcpetl/ops.hpp"

namespace pcpetl {

namespace {

template <typename E>
struct NamedEnum {
  E value;
  const char* name;
};

constexpr NamedEnum<Strategy> kStrategies[] = {
    {Strategy::Full, "full"},         {Strategy::LinearProbe, "linear_probe"},
    {Strategy::AdapterSerial, "adapter_serial"}, {Strategy::ExternalPrompt, "external_prompt"},
    {Strategy::Lora, "lora"},         {Strategy::Bitfit, "bitfit"},
    {Strategy::TftsOnly, "tfts_only"}, {Strategy::Dapt, "dapt"}};
constexpr NamedEnum<ScaleMode> kScaleModes[] = {{ScaleMode::Dynamic, "dynamic"},
                                                 {ScaleMode::DynamicNoRelu, "dynamic_no_relu"},
                                                 {ScaleMode::Fixed, "fixed"},
                                                 {ScaleMode::LearnableScalar, "learnable_scalar"}};
constexpr NamedEnum<PromptMode> kPromptModes[] = {
    {PromptMode::Off, "off"}, {PromptMode::Internal, "internal"}, {PromptMode::External, "external"}};
constexpr NamedEnum<PromptPool> kPromptPools[] = {
    {PromptPool::Mean, "mean"}, {PromptPool::Max, "max"}, {PromptPool::TopK, "topk"}};
constexpr NamedEnum<TftsGranularity> kTfts[] = {{TftsGranularity::Off, "off"},
                                                 {TftsGranularity::LnOnly, "ln_only"},
                                                 {TftsGranularity::LnLinear, "ln_linear"}};
constexpr NamedEnum<HeadInput> kHeadInputs[] = {
    {HeadInput::Cls, "cls"}, {HeadInput::PromptPool, "prompt_pool"}, {HeadInput::PatchPool, "patch_pool"}};

template <typename E, std::size_t N>
E parse_enum(const NamedEnum<E> (&table)[N], const std::string& s, const char* what) {
  for (const auto& e : table)
    if (s == e.name) return e.value;
  std::string options;
  for (const auto& e : table) options += std::string(options.empty() ? "" : ", ") + e.name;
  throw ConfigError(std::string("unknown ") + what + " '" + s + "' (expected " + options + ")");
}

template <typename E, std::size_t N>
std::string enum_name(const NamedEnum<E> (&table)[N], E v) {
  for (const auto& e : table)
    if (e.value == v) return e.name;
  return "?";
}

std::size_t site_width(Site site, const BackboneConfig& b) {
  switch (site) {
    case Site::Qkv: return 3 * b.embed_dim;
    case Site::Fc1: return b.ffn_ratio * b.embed_dim;
    default: return b.embed_dim;
  }
}

bool site_enabled(Site site, TftsGranularity g) {
  if (g == TftsGranularity::Off) return false;
  if (g == TftsGranularity::LnLinear) return true;
  return site == Site::Ln1 || site == Site::Ln2;
}

TFTSParams make_tfts(ParameterStore& store, const std::string& name, std::size_t width, const std::string& group) {
  return {store.add(name + ".gamma", group, Tensor::full({width}, 1.0)),
          store.add(name + ".beta", group, Tensor::zeros({width})), name};
}

Tensor make_linear_weight(ParameterStore& store, const std::string& name, const std::string& group, std::size_t out,
                          std::size_t in, const Rng& rng) {
  Tensor w = store.add(name, group, Tensor::zeros({out, in}));
  init_uniform(w, 1.0 / std::sqrt(static_cast<double>(in)), rng, name);
  return w;
}

}  // namespace

Strategy parse_strategy(const std::string& s) { return parse_enum(kStrategies, s, "strategy"); }
ScaleMode parse_scale_mode(const std::string& s) { return parse_enum(kScaleModes, s, "scale mode"); }
PromptMode parse_prompt_mode(const std::string& s) { return parse_enum(kPromptModes, s, "prompt mode"); }
PromptPool parse_prompt_pool(const std::string& s) { return parse_enum(kPromptPools, s, "prompt pool"); }
TftsGranularity parse_tfts_granularity(const std::string& s) { return parse_enum(kTfts, s, "tfts granularity"); }
HeadInput parse_head_input(const std::string& s) { return parse_enum(kHeadInputs, s, "head input"); }
std::string to_string(Strategy v) { return enum_name(kStrategies, v); }
std::string to_string(ScaleMode v) { return enum_name(kScaleModes, v); }
std::string to_string(PromptMode v) { return enum_name(kPromptModes, v); }
std::string to_string(PromptPool v) { return enum_name(kPromptPools, v); }
std::string to_string(TftsGranularity v) { return enum_name(kTfts, v); }
std::string to_string(HeadInput v) { return enum_name(kHeadInputs, v); }

std::vector<Strategy> all_strategies() {
  std::vector<Strategy> out;
  for (const auto& e : kStrategies) out.push_back(e.value);
  return out;
}

PromptMode PETLConfig::effective_prompt_mode() const {
  if (strategy == Strategy::ExternalPrompt) return PromptMode::External;
  if (strategy != Strategy::Dapt || (prompt_mode == PromptMode::Internal && rank == 0)) return PromptMode::Off;
  return prompt_mode;
}

TftsGranularity PETLConfig::effective_tfts() const {
  return strategy == Strategy::Dapt || strategy == Strategy::TftsOnly ? tfts : TftsGranularity::Off;
}

std::vector<HeadInput> PETLConfig::effective_head_inputs() const {
  if (!head_inputs.empty()) return head_inputs;
  if (prompts_active()) return {HeadInput::Cls, HeadInput::PromptPool, HeadInput::PatchPool};
  return {HeadInput::Cls, HeadInput::PatchPool};
}

std::vector<std::size_t> PETLConfig::layers(std::size_t depth) const {
  if (!inserted_layers.empty()) return inserted_layers;
  std::vector<std::size_t> all(depth);
  for (std::size_t i = 0; i < depth; ++i) all[i] = i + 1;
  return all;
}

bool PETLConfig::inserted(std::size_t layer, std::size_t depth) const {
  const auto ls = layers(depth);
  return std::find(ls.begin(), ls.end(), layer) != ls.end();
}

void PETLConfig::validate(const BackboneConfig& backbone) const {
  const std::size_t depth = backbone.depth, d = backbone.embed_dim;
  for (std::size_t i = 0; i < inserted_layers.size(); ++i) {
    const auto l = inserted_layers[i];
    if (l < 1 || l > depth) {
      throw ConfigError("petl.inserted_layers: layer " + std::to_string(l) + " outside 1.." + std::to_string(depth));
    }
    if (i > 0 && l <= inserted_layers[i - 1]) {
      throw ConfigError("petl.inserted_layers must be strictly increasing");
    }
  }
  const bool needs_rank =
      strategy == Strategy::Dapt || strategy == Strategy::AdapterSerial || strategy == Strategy::Lora;
  if (needs_rank && (rank < 1 || rank >= d)) {
    throw ConfigError("petl.rank = " + std::to_string(rank) + " must satisfy 1 <= r < d = " + std::to_string(d) +
                      " for strategy " + to_string(strategy));
  }
  if (strategy == Strategy::TftsOnly && tfts == TftsGranularity::Off) {
    throw ConfigError("strategy tfts_only requires petl.tfts != off");
  }
  if (effective_prompt_mode() == PromptMode::External && prompt_count < 1) {
    throw ConfigError("external prompts require petl.prompt_count >= 1");
  }
  if (prompt_pool == PromptPool::TopK && prompt_topk < 1) throw ConfigError("petl.prompt_topk must be >= 1");
  if ((strategy == Strategy::AdapterSerial || scale_mode == ScaleMode::Fixed) && !std::isfinite(scale_value)) {
    throw ConfigError("petl.scale_value must be finite");
  }
  std::set<HeadInput> seen;
  for (auto h : head_inputs) {
    if (!seen.insert(h).second) throw ConfigError("petl.head_inputs lists " + to_string(h) + " twice");
    if (h == HeadInput::PromptPool && !prompts_active()) {
      throw ConfigError("head input prompt_pool requested but prompting is off for strategy " + to_string(strategy));
    }
  }
}

std::size_t prompt_slots_entering(const PETLConfig& cfg, std::size_t layer, std::size_t depth) {
  const auto mode = cfg.effective_prompt_mode();
  if (mode == PromptMode::Off) return 0;
  const auto ls = cfg.layers(depth);
  if (mode == PromptMode::External) {
    // The most recent inserted layer at or before `layer` sets the block.
    for (auto l : ls)
      if (l <= layer) return cfg.prompt_count;
    return 0;
  }
  const auto earlier = static_cast<std::size_t>(std::count_if(ls.begin(), ls.end(), [&](auto j) { return j < layer; }));
  return cfg.prompt_accumulate ? earlier : std::min<std::size_t>(earlier, 1);
}

Tensor tfts(const Tensor& x, const TFTSParams& p) { return add(mul(x, p.gamma), p.beta); }

Tensor dynamic_scale(const Tensor& x_norm, const Tensor& w_s, const Tensor& bias, bool apply_relu) {
  Tensor s = linear(x_norm, w_s, bias);
  return apply_relu ? relu(s) : s;
}

AdapterOutput dynamic_adapter(const Tensor& x, const DynamicAdapterParams& p, ScaleMode mode, double fixed_scale,
                              double ln_eps) {
  if (x.rank() < 2 || x.shape()[x.rank() - 2] < 1) throw DimensionError("dynamic_adapter: need at least one token");
  AdapterOutput out;
  out.normed = layer_norm(x, p.norm_weight, p.norm_bias, ln_eps);
  Shape scale_shape = x.shape();
  scale_shape.back() = 1;
  switch (mode) {
    case ScaleMode::Dynamic:
      out.scale = dynamic_scale(out.normed, p.scale_weight, p.scale_bias, true);
      break;
    case ScaleMode::DynamicNoRelu:
      out.scale = dynamic_scale(out.normed, p.scale_weight, p.scale_bias, false);
      break;
    case ScaleMode::Fixed:
      out.scale = Tensor::full(scale_shape, fixed_scale);
      break;
    case ScaleMode::LearnableScalar:
      out.scale = p.scalar;
      break;
  }
  Tensor u = linear(gelu(linear(out.normed, p.down_weight, p.down_bias)), p.up_weight, p.up_bias);
  out.residual = mul(u, out.scale);
  out.prompt_raw = gelu(out.residual);
  return out;
}

Tensor pool_prompt(const Tensor& activated, PromptPool pool, std::size_t topk, const TFTSParams& p) {
  if (activated.rank() < 2) throw DimensionError("pool_prompt: expected [..., T, d]");
  const int axis = static_cast<int>(activated.rank()) - 2;
  Tensor pooled;
  switch (pool) {
    case PromptPool::Mean: pooled = mean_pool(activated, axis); break;
    case PromptPool::Max: pooled = max_pool(activated, axis); break;
    case PromptPool::TopK: pooled = topk_pool(activated, axis, topk); break;
  }
  Shape s = activated.shape();
  s[static_cast<std::size_t>(axis)] = 1;
  return tfts(reshape(pooled, s), p);
}

Tensor make_internal_prompt(const Tensor& residuals, PromptPool pool, std::size_t topk, const TFTSParams& p) {
  return pool_prompt(gelu(residuals), pool, topk, p);
}

void route_prompts(TokenSequence& seq, std::size_t layer, std::size_t depth, const Tensor& prompt, bool accumulate) {
  if (layer < 1 || layer > depth) {
    throw ConfigError("route_prompts: layer " + std::to_string(layer) + " does not exist (depth " +
                      std::to_string(depth) + ")");
  }
  seq.check();
  const std::size_t d = seq.tokens.shape()[2];
  if (prompt.shape() != Shape{seq.batch(), 1, d}) {
    throw DimensionError("route_prompts: prompt " + shape_str(prompt.shape()) + " does not fit sequence " +
                         shape_str(seq.tokens.shape()));
  }
  std::vector<Tensor> parts{slice(seq.tokens, 1, 0, 1)};
  if (accumulate && seq.num_prompts > 0) parts.push_back(slice(seq.tokens, 1, seq.prompt_begin(), seq.num_prompts));
  parts.push_back(prompt);
  parts.push_back(slice(seq.tokens, 1, seq.patch_begin(), seq.num_patches));
  seq.tokens = concat(parts, 1);
  seq.num_prompts = accumulate ? seq.num_prompts + 1 : 1;
  seq.check();
}

void set_prompt_block(TokenSequence& seq, const Tensor& prompts) {
  seq.check();
  const std::size_t B = seq.batch(), n = prompts.shape()[0], d = prompts.shape()[1];
  Tensor block = add(Tensor::zeros({B, n, d}), prompts);
  seq.tokens = concat({slice(seq.tokens, 1, 0, 1), block, slice(seq.tokens, 1, seq.patch_begin(), seq.num_patches)}, 1);
  seq.num_prompts = n;
  seq.check();
}

PetlModules::PetlModules(const BackboneConfig& backbone, const PETLConfig& config, ParameterStore& store,
                         const Rng& rng)
    : backbone_(backbone), config_(config) {
  config_.validate(backbone_);
  const std::size_t L = backbone_.depth, d = backbone_.embed_dim, r = config_.rank;
  site_tfts_.resize(L);
  prompt_tfts_.resize(L);
  adapters_.resize(L);
  serial_.resize(L);
  lora_.resize(L);
  external_prompts_.resize(L);
  stats_.assign(L, {});

  const auto granularity = config_.effective_tfts();
  const auto prompt_mode = config_.effective_prompt_mode();
  for (std::size_t i = 0; i < L; ++i) {
    const std::string li = std::to_string(i);
    const bool in = config_.inserted(i + 1, L);
    for (std::size_t s = 0; s < 6; ++s) {
      const Site site = kAllSites[s];
      if (site_enabled(site, granularity)) {
        site_tfts_[i][s] = make_tfts(store, "petl.tfts." + li + "." + to_string(site), site_width(site, backbone_), "tfts");
      }
    }
    if (!in) continue;
    if (config_.uses_dynamic_adapter()) {
      const std::string p = "petl.adapter." + li;
      DynamicAdapterParams a;
      a.rank = r;
      a.norm_weight = store.add(p + ".norm.weight", "adapter", Tensor::full({d}, 1.0));
      a.norm_bias = store.add(p + ".norm.bias", "adapter", Tensor::zeros({d}));
      a.scale_weight = make_linear_weight(store, p + ".scale.weight", "adapter", 1, d, rng);
      a.scale_bias = store.add(p + ".scale.bias", "adapter", Tensor::zeros({1}));
      init_uniform(a.scale_bias, 1.0 / std::sqrt(static_cast<double>(d)), rng, p + ".scale.bias");
      a.down_weight = make_linear_weight(store, p + ".down.weight", "adapter", r, d, rng);
      a.down_bias = store.add(p + ".down.bias", "adapter", Tensor::zeros({r}));
      init_uniform(a.down_bias, 1.0 / std::sqrt(static_cast<double>(d)), rng, p + ".down.bias");
      a.up_weight = store.add(p + ".up.weight", "adapter", Tensor::zeros({d, r}));
      a.up_bias = store.add(p + ".up.bias", "adapter", Tensor::zeros({d}));
      if (config_.scale_mode == ScaleMode::LearnableScalar) {
        a.scalar = store.add(p + ".scale.scalar", "adapter", Tensor::full({1}, config_.scale_value));
      }
      adapters_[i] = a;
      if (prompt_mode == PromptMode::Internal) {
        prompt_tfts_[i] = make_tfts(store, "petl.prompt_tfts." + li, d, "prompt_tfts");
      }
    }
    if (config_.strategy == Strategy::AdapterSerial) {
      const std::string p = "petl.serial." + li;
      SerialAdapter s;
      s.down_weight = make_linear_weight(store, p + ".down.weight", "serial_adapter", r, d, rng);
      s.down_bias = store.add(p + ".down.bias", "serial_adapter", Tensor::zeros({r}));
      s.up_weight = store.add(p + ".up.weight", "serial_adapter", Tensor::zeros({d, r}));
      s.up_bias = store.add(p + ".up.bias", "serial_adapter", Tensor::zeros({d}));
      serial_[i] = s;
    }
    if (config_.strategy == Strategy::Lora) {
      const std::string p = "petl.lora." + li;
      Lora l;
      l.q_a = make_linear_weight(store, p + ".q.a", "lora", r, d, rng);
      l.q_b = store.add(p + ".q.b", "lora", Tensor::zeros({d, r}));
      l.v_a = make_linear_weight(store, p + ".v.a", "lora", r, d, rng);
      l.v_b = store.add(p + ".v.b", "lora", Tensor::zeros({d, r}));
      lora_[i] = l;
    }
    if (prompt_mode == PromptMode::External) {
      const std::string name = "petl.prompt." + li;
      Tensor t = store.add(name, "prompt", Tensor::zeros({config_.prompt_count, d}));
      init_uniform(t, std::sqrt(6.0 / static_cast<double>(d + d)), rng, name);
      external_prompts_[i] = t;
    }
  }
}

void PetlModules::begin_forward(PetlCapture* capture) {
  stats_.assign(backbone_.depth, {});
  pending_prompt_ = Tensor();
  capture_ = capture;
  if (capture_) {
    capture_->adapter_inputs.assign(backbone_.depth, Tensor());
    capture_->scales.assign(backbone_.depth, Tensor());
    capture_->residuals.assign(backbone_.depth, Tensor());
    capture_->prompts.assign(backbone_.depth, Tensor());
  }
}

void PetlModules::before_layer(std::size_t layer, TokenSequence& seq) {
  if (external_prompts_[layer].defined()) set_prompt_block(seq, external_prompts_[layer]);
}

Tensor PetlModules::transform(std::size_t layer, Site site, const Tensor& x) {
  const auto& t = site_tfts_[layer][static_cast<std::size_t>(site)];
  return t ? tfts(x, *t) : x;
}

Tensor PetlModules::qkv_delta(std::size_t layer, const Tensor& normed) {
  const auto& l = lora_[layer];
  if (!l) return {};
  // alpha = r, so the alpha / r scaling is 1.
  Tensor dq = linear(linear(normed, l->q_a), l->q_b);
  Tensor dv = linear(linear(normed, l->v_a), l->v_b);
  return concat({dq, Tensor::zeros(dq.shape()), dv}, -1);
}

Tensor PetlModules::block_residual(std::size_t layer, const Tensor& hidden, const Tensor& ffn_out) {
  if (const auto& s = serial_[layer]) {
    Tensor a = linear(gelu(linear(ffn_out, s->down_weight, s->down_bias)), s->up_weight, s->up_bias);
    return config_.scale_value == 1.0 ? a : scale(a, config_.scale_value);
  }
  const auto& a = adapters_[layer];
  if (!a) return {};
  AdapterOutput out = dynamic_adapter(hidden, *a, config_.scale_mode, config_.scale_value, backbone_.ln_eps);
  ScaleRecord rec;
  const auto sv = out.scale.data();
  const std::size_t tokens = hidden.numel() / hidden.shape().back();
  std::size_t positive = 0;
  double total = 0.0;
  for (std::size_t t = 0; t < tokens; ++t) {
    const double s = sv.size() == 1 ? sv[0] : sv[t];
    total += s;
    positive += s > 0.0 ? 1 : 0;
  }
  rec.tokens = tokens;
  rec.mean_scale = total / static_cast<double>(tokens);
  rec.adjusted_ratio = static_cast<double>(positive) / static_cast<double>(tokens);
  stats_[layer] = rec;
  if (capture_) {
    capture_->adapter_inputs[layer] = hidden;
    capture_->scales[layer] = out.scale;
    capture_->residuals[layer] = out.residual;
  }
  if (prompt_tfts_[layer]) {
    pending_prompt_ = pool_prompt(out.prompt_raw, config_.prompt_pool, config_.prompt_topk, *prompt_tfts_[layer]);
    if (capture_) capture_->prompts[layer] = pending_prompt_;
  }
  return out.residual;
}

void PetlModules::after_layer(std::size_t layer, TokenSequence& seq) {
  if (!pending_prompt_.defined()) return;
  // The last layer's prompt has no successor block; it joins the final
  // sequence so the head can pool it.
  route_prompts(seq, layer + 1, backbone_.depth, pending_prompt_, config_.prompt_accumulate);
  pending_prompt_ = Tensor();
}

void apply_strategy(ParameterStore& store, const PETLConfig& cfg) {
  store.freeze_all();
  for (const auto& p : store.all()) {
    bool tunable = false;
    switch (cfg.strategy) {
      case Strategy::Full:
        tunable = true;
        break;
      case Strategy::Bitfit:
        tunable = p.group == "head" || (p.group == "backbone" && p.name.ends_with(".bias"));
        break;
      default:
        // Every module the strategy inserted, plus the task head.
        tunable = p.group != "backbone";
        break;
    }
    if (tunable) store.set_tunable(p.name, true);
  }
  store.lock();
}

}  // namespace pcpetl
