// Tunable-parameter, FLOP, optimizer-state and storage accounting.
#pragma once

#include <map>
#include <string>

#include "pcpetl/model.hpp"

namespace pcpetl {

struct GroupCount {
  std::size_t total = 0;
  std::size_t tunable = 0;
};

struct TunableCount {
  std::map<std::string, GroupCount> groups;
  std::size_t total = 0;
  std::size_t tunable = 0;
  double ratio = 0.0;  // tunable / total
};

TunableCount count_tunable(const ParameterStore& store);

// Per-layer Dynamic Adapter weights without biases: LN (2d), W_s (d),
// W_d and W_u (2rd).
std::size_t adapter_weight_count(std::size_t d, std::size_t r);
// Same module including the W_s, W_d and W_u biases.
std::size_t adapter_param_count(std::size_t d, std::size_t r);
// Parameters of one TFTS site of width w.
inline std::size_t tfts_param_count(std::size_t w) { return 2 * w; }

// Multiply-adds of every matrix product in one forward pass of one sample.
struct FlopCount {
  double embed = 0.0;
  double blocks = 0.0;  // frozen block matmuls, including attention products
  double modules = 0.0;  // adapters, LoRA deltas
  double head = 0.0;
  double total() const { return embed + blocks + modules + head; }
};

FlopCount count_flops(const ModelConfig& cfg);
// The same backbone and head with every PETL module removed.
FlopCount count_backbone_flops(const ModelConfig& cfg);
// count_flops(cfg).total() / count_backbone_flops(cfg).total().
double flop_ratio(const ModelConfig& cfg);

// AdamW keeps two moment buffers per tunable scalar.
std::size_t optimizer_state_bytes(const ParameterStore& store, std::size_t element_bytes = sizeof(double));

}  // namespace pcpetl
