#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usm/config.hpp"
#include "usm/rng.hpp"

// Synthetic latent-grid datasets standing in for encoded images.
namespace usm::data {

enum class Kind { kGaussMix, kCheckerboard, kClassConditional };

std::string kind_name(Kind k);
Kind parse_kind(const std::string& s);  // throws FormatError

struct DatasetSpec {
  Kind kind = Kind::kGaussMix;
  std::int64_t channels = 4, height = 8, width = 8;
  // gauss-mix / class-conditional: component k has mean separation * s_k and
  // stddev sigma per dimension, where s_k is a fixed random +-1 field drawn
  // from pattern_seed. Components are equally likely.
  std::int64_t components = 2;
  double separation = 1.0;
  double sigma = 1.0;
  std::uint64_t pattern_seed = 1;
  // checkerboard: +-1 blocks of side period, global sign random per sample.
  std::int64_t period = 2;
  double noise = 0.1;

  std::int64_t dims() const { return channels * height * width; }
  void validate() const;  // throws std::invalid_argument
  void write(KeyValue& kv) const;  // "data." keys
  static DatasetSpec read(const KeyValue& kv);
};

struct Batch {
  Tensor x;                          // [n, c, h, w]
  std::vector<std::int64_t> labels;  // component or sign index per item
};

// Component means, [components, c, h, w].
Tensor component_means(const DatasetSpec& spec);

Batch dataset_sample(const DatasetSpec& spec, std::int64_t n, Rng& rng);

}  // namespace usm::data
