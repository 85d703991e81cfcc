#include "pcpetl/accounting.hpp"

namespace pcpetl {

TunableCount count_tunable(const ParameterStore& store) {
  TunableCount c;
  for (const auto& p : store.all()) {
    auto& g = c.groups[p.group];
    g.total += p.tensor.numel();
    c.total += p.tensor.numel();
    if (p.tunable) {
      g.tunable += p.tensor.numel();
      c.tunable += p.tensor.numel();
    }
  }
  c.ratio = c.total ? static_cast<double>(c.tunable) / static_cast<double>(c.total) : 0.0;
  return c;
}

std::size_t adapter_weight_count(std::size_t d, std::size_t r) { return 2 * d + d + 2 * r * d; }

std::size_t adapter_param_count(std::size_t d, std::size_t r) { return adapter_weight_count(d, r) + 1 + r + d; }

namespace {

double head_flops(const ModelConfig& cfg, std::size_t inputs) {
  const double in = static_cast<double>(inputs * cfg.backbone.embed_dim), h = static_cast<double>(cfg.head_hidden);
  return in * h + h * h + h * static_cast<double>(cfg.num_classes);
}

FlopCount count(const ModelConfig& cfg, bool with_modules) {
  const auto& b = cfg.backbone;
  const auto& p = cfg.petl;
  const double d = static_cast<double>(b.embed_dim), N = static_cast<double>(b.num_patches);
  const double r = static_cast<double>(p.rank), ratio = static_cast<double>(b.ffn_ratio);
  FlopCount f;

  double width = 3.0, per_point = 0.0;
  for (auto w : b.embed_hidden) {
    per_point += width * static_cast<double>(w);
    width = static_cast<double>(w);
  }
  per_point += width * d;
  f.embed = N * static_cast<double>(b.patch_size) * per_point + N * (3.0 * b.pos_hidden + b.pos_hidden * d);

  for (std::size_t layer = 1; layer <= b.depth; ++layer) {
    const double T = 1.0 + N + (with_modules ? static_cast<double>(prompt_slots_entering(p, layer, b.depth)) : 0.0);
    // QKV, two attention products, output projection, two FFN linears.
    f.blocks += T * d * 3 * d + 2 * T * T * d + T * d * d + 2 * T * d * ratio * d;
    if (!with_modules || !p.inserted(layer, b.depth)) continue;
    if (p.uses_dynamic_adapter()) f.modules += T * (d + 2 * r * d);
    if (p.strategy == Strategy::AdapterSerial) f.modules += T * 2 * r * d;
    if (p.strategy == Strategy::Lora) f.modules += T * 4 * r * d;
  }
  PETLConfig plain;
  plain.strategy = Strategy::LinearProbe;
  f.head = head_flops(cfg, (with_modules ? p : plain).effective_head_inputs().size());
  return f;
}

}  // namespace

FlopCount count_flops(const ModelConfig& cfg) { return count(cfg, true); }

FlopCount count_backbone_flops(const ModelConfig& cfg) { return count(cfg, false); }

double flop_ratio(const ModelConfig& cfg) { return count_flops(cfg).total() / count_backbone_flops(cfg).total(); }

std::size_t optimizer_state_bytes(const ParameterStore& store, std::size_t element_bytes) {
  return 2 * store.tunable_count() * element_bytes;
}

}  // namespace pcpetl
