#include "usm/scan_paths.hpp"

#include <map>
#include <mutex>
#include <stdexcept>
#include <string>
#include <tuple>

#include "usm/ops.hpp"

namespace usm {

ScanPath generate_scan(int config_id, std::int64_t h, std::int64_t w) {
  if (config_id < 0 || config_id >= kNumScanConfigs) {
    throw std::out_of_range("scan config " + std::to_string(config_id) + " not in [0, 8)");
  }
  if (h < 1 || w < 1) throw std::invalid_argument("scan grid must be at least 1x1");

  const bool by_column = config_id >= 4;
  const int corner = config_id % 4;
  const bool from_right = corner == 1 || corner == 3;
  const bool from_bottom = corner == 2 || corner == 3;

  ScanPath p;
  p.config_id = config_id;
  p.h = h;
  p.w = w;
  p.perm.reserve(static_cast<std::size_t>(h * w));
  // Outer lines are rows (or columns); the inner direction alternates.
  const std::int64_t lines = by_column ? w : h;
  const std::int64_t span = by_column ? h : w;
  for (std::int64_t a = 0; a < lines; ++a) {
    const std::int64_t line = (by_column ? from_right : from_bottom) ? lines - 1 - a : a;
    const bool start_far = by_column ? from_bottom : from_right;
    const bool reversed = (a % 2 == 1) != start_far;
    for (std::int64_t b = 0; b < span; ++b) {
      const std::int64_t pos = reversed ? span - 1 - b : b;
      const std::int64_t row = by_column ? pos : line;
      const std::int64_t col = by_column ? line : pos;
      p.perm.push_back(row * w + col);
    }
  }
  p.inv_perm.assign(p.perm.size(), 0);
  for (std::size_t i = 0; i < p.perm.size(); ++i) p.inv_perm[static_cast<std::size_t>(p.perm[i])] = static_cast<std::int64_t>(i);
  return p;
}

std::shared_ptr<const ScanPath> cached_scan(int config_id, std::int64_t h, std::int64_t w) {
  static std::mutex mu;
  static std::map<std::tuple<int, std::int64_t, std::int64_t>, std::shared_ptr<const ScanPath>> cache;
  std::lock_guard<std::mutex> lock(mu);
  auto key = std::make_tuple(config_id, h, w);
  auto it = cache.find(key);
  if (it != cache.end()) return it->second;
  auto path = std::make_shared<const ScanPath>(generate_scan(config_id, h, w));
  cache.emplace(key, path);
  return path;
}

namespace {
void check_length(const Tensor& seq, const ScanPath& path) {
  if (seq.rank() < 2 || seq.dim(-2) != path.length()) {
    throw ShapeError("scan: sequence " + shape_str(seq.shape()) + " does not match " +
                     std::to_string(path.h) + "x" + std::to_string(path.w) + " path");
  }
}
}  // namespace

Tensor apply_scan(const Tensor& seq, const ScanPath& path) {
  check_length(seq, path);
  return permute_rows(seq, path.perm);
}

Tensor inverse_scan(const Tensor& seq, const ScanPath& path) {
  check_length(seq, path);
  return permute_rows(seq, path.inv_perm);
}

int scan_for_block(int block_index) {
  if (block_index < 0) throw std::out_of_range("negative block index");
  return block_index % kNumScanConfigs;
}

}  // namespace usm
