#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usm/model.hpp"

// Analytic multiply-accumulate counts for one batch-1 forward, plus a
// measured timing/memory run. Elementwise activations are not counted.
namespace usm {

enum class CostKind {
  kBlock,      // per-token main-block work (Mamba, cross-attention on tokens)
  kBlockFixed, // per-forward block work independent of L (AdaLN map, context keys/values)
  kDown,
  kUp,
  kSkip,
  kEmbed,      // in/out projections and the timestep MLP
};

struct CostItem {
  std::string name;  // e.g. "blocks.04.mamba.in_proj"
  CostKind kind;
  int block = -1;    // execution index for block items
  std::int64_t tokens = 0;
  std::int64_t macs = 0;
  bool quadratic_in_d = false;  // macs scale exactly with D^2
};

struct CostReport {
  std::vector<CostItem> items;
  std::vector<std::int64_t> stage_tokens;  // per block, execution order
  std::int64_t total = 0;
  std::int64_t block_total = 0;  // kBlock items only
  std::int64_t skip_total = 0;
  // The same main blocks with all 25 at L = h * w and no down/up/skip layers.
  std::int64_t flat_total = 0;
  std::int64_t flat_block_total = 0;
  // Rough count of activations a recorded batch-1 forward keeps alive.
  std::int64_t peak_activation_estimate = 0;

  double ratio() const { return static_cast<double>(total) / static_cast<double>(flat_total); }
  double block_ratio() const { return static_cast<double>(block_total) / static_cast<double>(flat_block_total); }
  std::int64_t sum(CostKind kind) const;
};

// Pure function of the config. ctx_tokens is M for cross-attention.
CostReport flops_count(const ModelConfig& cfg, std::int64_t ctx_tokens = 1);

struct ProfileReport {
  std::string layout;
  std::vector<double> wall_ms;  // one per rep
  double mean_ms = 0.0, stddev_ms = 0.0;
  std::int64_t peak_live_elements = 0;  // during one recorded forward
  std::vector<std::int64_t> stage_tokens;

  // Header: layout,rep,wall_ms,peak_live_elements
  void write_csv(const std::string& path) const;
};

// Times reps batch-1 forwards without recording, then one recorded forward
// for the live-element peak. Parameters are randomly initialised from seed.
ProfileReport profile_run(const ModelConfig& cfg, int reps, std::uint64_t seed = 0);

}  // namespace usm
