#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "usm/model.hpp"

// Whole-model gradient check against central differences.
namespace usm {

struct GradGroup {
  std::string name;  // tensor name with block/stage indices replaced by '*'
  std::int64_t elements = 0;
  std::int64_t checked = 0;
  std::int64_t failures = 0;
  double worst_rel = 0.0;  // over coordinates above the absolute floor
  double worst_abs = 0.0;
};

struct GradcheckOptions {
  std::int64_t coords_per_group = 200;  // groups with fewer elements are checked exhaustively
  double eps = 1e-5;
  double rel_tol = 1e-4;
  double abs_floor = 1e-8;
  double jitter = 0.15;  // parameter noise so gates and projections are non-zero
  double min_pass_fraction = 0.99;
};

struct GradcheckReport {
  std::vector<GradGroup> groups;
  std::int64_t checked = 0, failures = 0;
  bool passed = false;  // every group within min_pass_fraction
};

std::string grad_group_name(const std::string& tensor_name);

GradcheckReport model_gradcheck(const ModelConfig& cfg, std::uint64_t seed, const GradcheckOptions& opts = {});

}  // namespace usm
