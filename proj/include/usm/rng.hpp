#pragma once

#include <cstdint>
#include <random>

#include "usm/tensor.hpp"

namespace usm {

// Seeded generator shared by initialisation, data and sampling code.
class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}

  double normal() { return normal_(engine_); }
  double uniform() { return uniform_(engine_); }  // [0, 1)
  std::uint64_t next() { return engine_(); }
  std::int64_t below(std::int64_t n) {
    return std::uniform_int_distribution<std::int64_t>(0, n - 1)(engine_);
  }

  Tensor normal_tensor(Shape shape, double stddev = 1.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.mutable_data()) v = stddev * normal();
    return t;
  }

  // Independent child stream, so consumers do not perturb each other.
  Rng fork() { return Rng(next()); }

 private:
  std::mt19937_64 engine_;
  std::normal_distribution<double> normal_{0.0, 1.0};
  std::uniform_real_distribution<double> uniform_{0.0, 1.0};
};

}  // namespace usm
