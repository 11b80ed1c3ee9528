#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "usm/tensor.hpp"

namespace usm {

inline constexpr int kNumScanConfigs = 8;

// One of the eight boustrophedon orders over an h x w token grid.
//
// Numbering: configs 0-3 sweep rows, 4-7 sweep columns; within each group
// the start corner is top-left, top-right, bottom-left, bottom-right. The
// sweep reverses direction at every line end, so consecutive visits are
// always 4-neighbours.
struct ScanPath {
  int config_id = 0;
  std::int64_t h = 0, w = 0;
  std::vector<std::int64_t> perm;      // visit order, flat row-major cell ids
  std::vector<std::int64_t> inv_perm;  // inv_perm[perm[i]] == i

  std::int64_t length() const { return h * w; }
};

ScanPath generate_scan(int config_id, std::int64_t h, std::int64_t w);

// Cached, immutable instance shared between blocks.
std::shared_ptr<const ScanPath> cached_scan(int config_id, std::int64_t h, std::int64_t w);

// Row i of the result is row perm[i] of seq[..., L, D].
Tensor apply_scan(const Tensor& seq, const ScanPath& path);
Tensor inverse_scan(const Tensor& seq, const ScanPath& path);

// Scan configuration of execution-ordered block k (0..24): k mod 8.
int scan_for_block(int block_index);

}  // namespace usm
