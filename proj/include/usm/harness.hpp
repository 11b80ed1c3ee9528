#pragma once

#include <cstdint>
#include <functional>
#include <ostream>
#include <string>
#include <vector>

#include "usm/config.hpp"
#include "usm/dataset.hpp"
#include "usm/flow.hpp"
#include "usm/model.hpp"

// Training and sampling drivers shared by the CLI and the acceptance suite.
namespace usm {

struct TrainOptions {
  std::int64_t steps = 1000;
  std::int64_t batch = 8;
  double lr = 1e-4;
  std::string optimizer = "adam";
  bool timing = true;  // false writes wall_ms = 0 so reruns are byte-identical

  void write(KeyValue& kv) const;  // "train." keys
  static TrainOptions read(const KeyValue& kv);
};

inline constexpr const char* kMetricsHeader = "step,loss,weighted_loss,grad_norm,lr,wall_ms";

void write_metrics_row(std::ostream& out, const flow::StepStats& st, double wall_ms);

// Random streams derived from one seed: parameter init, data, flow noise and
// sampling never share a generator.
struct SeedStreams {
  explicit SeedStreams(std::uint64_t seed);
  Rng init, data, noise, sample;
};

struct TrainRun {
  ModelConfig model;
  data::DatasetSpec data;
  TrainOptions train;
  std::uint64_t seed = 0;
};

// Builds fresh parameters from the seed and trains them. Each step's
// metrics row goes to csv when given; on_step may stop early by returning false.
UsmParams train_model(const TrainRun& run, std::ostream* csv = nullptr,
                      const std::function<bool(const flow::StepStats&)>& on_step = {});

// Draws n samples with T Euler steps. For text-conditioned models, labels
// (one per sample) select the class context.
Tensor sample_model(const UsmParams& params, const ModelConfig& cfg, std::int64_t n, int steps, Rng& rng,
                    std::span<const std::int64_t> labels = {});

}  // namespace usm
