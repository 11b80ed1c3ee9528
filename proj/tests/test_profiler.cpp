#include <filesystem>
#include <fstream>
#include <array>
#include <map>

#include "doctest.h"
#include "usm/profiler.hpp"

using namespace usm;

TEST_CASE("block-cost ratio is 511/1600 for the 12/1/12 layout") {
  for (auto [h, w, D, N] : std::vector<std::array<std::int64_t, 4>>{{16, 16, 64, 16}, {8, 8, 8, 4}, {8, 16, 32, 2}, {32, 24, 16, 8}}) {
    ModelConfig c;
    c.height = h;
    c.width = w;
    c.hidden = D;
    c.state = N;
    CostReport r = flops_count(c);
    CHECK(r.block_ratio() == 511.0 / 1600.0);
    CHECK(r.block_ratio() == 0.319375);
    CHECK(std::abs(r.block_ratio() - 20.66 / 64.12) < 0.01);
    CHECK(r.ratio() < 1.0);
  }
}

TEST_CASE("cost report totals and stage ledger") {
  ModelConfig c;
  CostReport r = flops_count(c);
  std::int64_t s = 0;
  for (const auto& it : r.items) s += it.macs;
  CHECK(r.total == s);
  CHECK(r.total == r.sum(CostKind::kBlock) + r.sum(CostKind::kBlockFixed) + r.sum(CostKind::kDown) +
                       r.sum(CostKind::kUp) + r.sum(CostKind::kSkip) + r.sum(CostKind::kEmbed));
  CHECK(r.block_total == r.sum(CostKind::kBlock));
  const std::vector<std::int64_t> ledger = {256, 256, 256, 64, 64, 64, 16, 16, 16, 4, 4, 4, 4,
                                            4,   4,   4,   16, 16, 16, 64, 64, 64, 256, 256, 256};
  CHECK(r.stage_tokens == ledger);
  std::int64_t tok = 0;
  for (auto t : ledger) tok += t;
  CHECK(tok * 64 == 511 * 256);
  CHECK(r.peak_activation_estimate > 0);
  // Per-block token cost is identical at every stage.
  std::map<int, std::int64_t> per_block;
  for (const auto& it : r.items)
    if (it.kind == CostKind::kBlock) per_block[it.block] += it.macs;
  for (const auto& [k, m] : per_block) CHECK(m / r.stage_tokens[k] == per_block[0] / 256);
}

TEST_CASE("halving D quarters every quadratic line item") {
  ModelConfig big;
  big.hidden = 32;
  big.use_text = true;
  ModelConfig small = big;
  small.hidden = 16;
  CostReport a = flops_count(big, 3);
  CostReport b = flops_count(small, 3);
  REQUIRE(a.items.size() == b.items.size());
  int quad = 0;
  for (std::size_t i = 0; i < a.items.size(); ++i) {
    CHECK(a.items[i].name == b.items[i].name);
    if (!a.items[i].quadratic_in_d) continue;
    ++quad;
    CHECK(b.items[i].macs * 4 == a.items[i].macs);
  }
  CHECK(quad > 100);
}

TEST_CASE("disabling skips removes exactly the twelve projections") {
  ModelConfig c;
  ModelConfig n = c;
  n.use_skips = false;
  CostReport with = flops_count(c);
  CostReport without = flops_count(n);
  int skips = 0;
  std::int64_t skip_macs = 0;
  for (const auto& it : with.items) {
    if (it.kind != CostKind::kSkip) continue;
    ++skips;
    CHECK(it.macs == 2 * c.hidden * c.hidden * it.tokens);
    skip_macs += it.macs;
  }
  CHECK(skips == 12);
  CHECK(without.sum(CostKind::kSkip) == 0);
  CHECK(with.total - without.total == skip_macs);
  CHECK(without.total < with.total);
  CHECK(without.items.size() + 12 == with.items.size());
}

TEST_CASE("profile run: timing rows, ledger and the flat comparison") {
  ModelConfig c;
  c.hidden = 8;
  c.state = 4;
  c.t_freq_dim = 8;
  ProfileReport one = profile_run(c, 1);
  CHECK(one.wall_ms.size() == 1);
  CHECK(one.stage_tokens == flops_count(c).stage_tokens);
  CHECK(one.peak_live_elements > 0);

  ProfileReport u = profile_run(c, 3);
  ModelConfig flat = c;
  flat.layout = Layout::kFlat;
  ProfileReport f = profile_run(flat, 3);
  MESSAGE("ushape ", u.mean_ms, " ms, flat ", f.mean_ms, " ms");
  CHECK(u.mean_ms < f.mean_ms);
  CHECK(u.peak_live_elements < f.peak_live_elements);

  const auto path = (std::filesystem::temp_directory_path() / "usm_profile_test.csv").string();
  u.write_csv(path);
  std::ifstream in(path);
  std::string line;
  std::getline(in, line);
  CHECK(line == "layout,rep,wall_ms,peak_live_elements");
  int rows = 0;
  while (std::getline(in, line)) ++rows;
  CHECK(rows == 3);
  std::filesystem::remove(path);
}
