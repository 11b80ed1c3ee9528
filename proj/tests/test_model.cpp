#include <algorithm>
#include <chrono>
#include <cmath>
#include <numeric>

#include "doctest.h"
#include "test_util.hpp"
#include "usm/log.hpp"
#include "usm/model.hpp"

using namespace usm;
using testing::bit_equal;
using testing::max_abs_diff;

namespace {

ModelConfig tiny_config(std::int64_t h = 8, std::int64_t w = 8) {
  ModelConfig c;
  c.channels = 2;
  c.height = h;
  c.width = w;
  c.hidden = 8;
  c.state = 4;
  c.t_freq_dim = 8;
  c.heads = 2;
  c.ctx_dim = 4;
  return c;
}

// Perturbs every parameter so no gate or projection is zero.
void jitter_all(UsmParams& p, Rng& rng, double s) {
  for (auto& nt : p.named()) {
    for (double& v : nt.tensor.mutable_data()) v += s * rng.normal();
  }
}

std::vector<double> ts(std::int64_t n, double v) { return std::vector<double>(static_cast<std::size_t>(n), v); }

}  // namespace

TEST_CASE("schedule follows the 12/1/12 token ledger at 16x16") {
  ModelConfig c;
  const auto s = c.schedule();
  REQUIRE(s.size() == 25);
  const std::vector<std::int64_t> ledger = {256, 256, 256, 64, 64, 64, 16, 16, 16, 4, 4, 4, 4,
                                            4,   4,   4,   16, 16, 16, 64, 64, 64, 256, 256, 256};
  for (int k = 0; k < 25; ++k) {
    CHECK(s[k].index == k);
    CHECK(s[k].tokens() == ledger[k]);
    CHECK(s[k].scan_config == scan_for_block(k));
    CHECK(s[k].scan_config == k % 8);
  }
  CHECK(s[12].role == BlockRole::kMiddle);
  CHECK(s[12].tokens() == 256 / 64);
  for (int j = 1; j <= 12; ++j) {
    const auto& enc = s[j - 1];
    const auto& dec = s[12 + j];
    CHECK(enc.role == BlockRole::kEncoder);
    CHECK(dec.role == BlockRole::kDecoder);
    CHECK(enc.downsample_after == (j == 3 || j == 6 || j == 9));
    CHECK(dec.upsample_before == (j == 4 || j == 7 || j == 10));
    CHECK(dec.skip_from == 13 - j);
    CHECK(s[dec.skip_from - 1].tokens() == dec.tokens());
  }
}

TEST_CASE("schedule without skips and flat layout") {
  ModelConfig c;
  c.use_skips = false;
  for (const auto& st : c.schedule()) CHECK(st.skip_from == 0);
  c.layout = Layout::kFlat;
  const auto s = c.schedule();
  REQUIRE(s.size() == 25);
  for (const auto& st : s) {
    CHECK(st.tokens() == 256);
    CHECK_FALSE(st.downsample_after);
    CHECK_FALSE(st.upsample_before);
  }
}

TEST_CASE("config validation") {
  ModelConfig c;
  c.height = 12;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.n_enc = 11;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.t_freq_dim = 7;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.use_text = true;
  c.heads = 3;
  CHECK_THROWS_AS(c.validate(), std::invalid_argument);
  c = ModelConfig{};
  c.layout = Layout::kFlat;
  c.height = 5;
  CHECK_NOTHROW(c.validate());
}

TEST_CASE("config key-value round trip") {
  ModelConfig c = tiny_config(8, 16);
  c.use_text = true;
  c.use_skips = false;
  c.num_classes = 3;
  c.downsample_after = {2, 5, 9};
  KeyValue kv;
  c.write(kv);
  ModelConfig r = ModelConfig::read(KeyValue::parse(kv.to_string()));
  CHECK(r.channels == 2);
  CHECK(r.height == 8);
  CHECK(r.width == 16);
  CHECK(r.hidden == 8);
  CHECK(r.state == 4);
  CHECK(r.use_text);
  CHECK_FALSE(r.use_skips);
  CHECK(r.num_classes == 3);
  CHECK(r.downsample_after == std::vector<int>{2, 5, 9});
  KeyValue bad;
  bad.set("model.layout", "spiral");
  CHECK_THROWS_AS(ModelConfig::read(bad), FormatError);
}

TEST_CASE("parameter inventory") {
  Rng rng(1);
  ModelConfig c = tiny_config();
  UsmParams p = init_params(c, rng);
  CHECK(p.blocks.size() == 25);
  CHECK(p.down.size() == 3);
  CHECK(p.up.size() == 3);
  CHECK(p.skips.size() == 12);
  c.use_skips = false;
  UsmParams q = init_params(c, rng);
  CHECK(q.skips.empty());
  CHECK(q.count() == p.count() - 12 * (2 * 8 * 8 + 8));
  auto names = p.named();
  std::vector<std::string> sorted;
  for (auto& nt : names) sorted.push_back(nt.name);
  std::sort(sorted.begin(), sorted.end());
  CHECK(std::adjacent_find(sorted.begin(), sorted.end()) == sorted.end());
  CHECK(names.front().name == "in_proj.w");
  for (auto& nt : names) CHECK(nt.tensor.requires_grad());
}

TEST_CASE("identity at init: output is exactly zero and every block is identity") {
  Rng rng(2);
  ModelConfig c = tiny_config();
  UsmParams p = init_params(c, rng);
  Tensor z = rng.normal_tensor({3, 2, 8, 8});
  Tensor v = usm_forward(z, std::vector<double>{0.1, 0.5, 0.9}, Tensor{}, p, c);
  CHECK(v.shape() == Shape{3, 2, 8, 8});
  for (double x : v.data()) CHECK(x == 0.0);

  Tensor temb = timestep_embed(p.temb, std::vector<double>{0.3});
  for (const auto& st : c.schedule()) {
    Tensor x = rng.normal_tensor({1, st.tokens(), 8});
    Tensor y = main_block(x, temb, Tensor{}, p.blocks[st.index], *cached_scan(st.scan_config, st.grid_h, st.grid_w),
                          BlockOptions{});
    CHECK(bit_equal(x, y));
  }
}

TEST_CASE("shape round trip including non-square grids") {
  Rng rng(3);
  for (auto [h, w] : std::vector<std::pair<int, int>>{{8, 8}, {8, 16}, {16, 8}}) {
    ModelConfig c = tiny_config(h, w);
    UsmParams p = init_params(c, rng);
    jitter_all(p, rng, 0.05);
    ForwardTrace trace;
    Tensor z = rng.normal_tensor({2, 2, h, w});
    Tensor v = usm_forward(z, std::vector<double>{0.2, 0.7}, Tensor{}, p, c, &trace);
    CHECK(v.shape() == z.shape());
    CHECK(trace.block_tokens.size() == 25);
    CHECK(trace.middle_tokens == h * w / 64);
    CHECK(trace.skip_pairs.size() == 12);
    for (int k = 0; k < 25; ++k) CHECK(trace.block_scan[k] == k % 8);
    for (auto [e, d] : trace.skip_pairs) {
      CHECK(e == 13 - d);
      CHECK(trace.block_tokens[e - 1] == trace.block_tokens[12 + d]);
    }
    Tensor single = usm_forward(rng.normal_tensor({2, h, w}), std::vector<double>{0.4}, Tensor{}, p, c);
    CHECK(single.shape() == Shape{2, h, w});
  }
}

TEST_CASE("usm_forward rejects mismatched inputs") {
  Rng rng(4);
  ModelConfig c = tiny_config();
  UsmParams p = init_params(c, rng);
  CHECK_THROWS_AS(usm_forward(rng.normal_tensor({1, 3, 8, 8}), ts(1, 0.5), Tensor{}, p, c), ShapeError);
  CHECK_THROWS_AS(usm_forward(rng.normal_tensor({2, 2, 8, 8}), ts(1, 0.5), Tensor{}, p, c), ShapeError);
  ModelConfig other = tiny_config(16, 16);
  CHECK_THROWS_AS(usm_forward(rng.normal_tensor({1, 2, 8, 8}), ts(1, 0.5), Tensor{}, p, other), ShapeError);
  c.use_text = true;
  UsmParams pt = init_params(c, rng);
  CHECK_THROWS_AS(usm_forward(rng.normal_tensor({1, 2, 8, 8}), ts(1, 0.5), Tensor{}, pt, c), std::invalid_argument);
}

TEST_CASE("text flag off makes the output independent of ctx") {
  Rng rng(5);
  ModelConfig c = tiny_config();
  c.use_text = true;
  UsmParams p = init_params(c, rng);
  jitter_all(p, rng, 0.1);
  Tensor z = rng.normal_tensor({2, 2, 8, 8});
  Tensor ctx_a = rng.normal_tensor({3, 4});
  Tensor ctx_b = rng.normal_tensor({3, 4});
  Tensor with_a = usm_forward(z, ts(2, 0.5), ctx_a, p, c);
  Tensor with_b = usm_forward(z, ts(2, 0.5), ctx_b, p, c);
  CHECK(max_abs_diff(with_a, with_b) > 1e-6);

  c.use_text = false;
  usm::log::set_level(usm::log::Level::kError);
  Tensor none = usm_forward(z, ts(2, 0.5), Tensor{}, p, c);
  Tensor off_a = usm_forward(z, ts(2, 0.5), ctx_a, p, c);
  Tensor off_b = usm_forward(z, ts(2, 0.5), ctx_b, p, c);
  usm::log::set_level(usm::log::Level::kInfo);
  CHECK(bit_equal(none, off_a));
  CHECK(bit_equal(none, off_b));
}

TEST_CASE("adaln_modulate neutral cases") {
  Rng rng(6);
  const std::int64_t L = 4, D = 8;
  Tensor x = rng.normal_tensor({L, D});
  Tensor temb = rng.normal_tensor({D});
  AdaLnParams zero{Tensor::zeros({D, 3 * D}), Tensor::zeros({3 * D})};
  auto [xm, gate] = adaln_modulate(x, temb, zero);
  CHECK(bit_equal(xm, layer_norm(x)));
  for (double g : gate.data()) CHECK(g == 0.0);

  // scale = shift = 0, gate = 1 gives x + mamba(LN(x)).
  AdaLnParams unit{Tensor::zeros({D, 3 * D}), Tensor::zeros({3 * D})};
  for (std::int64_t i = 2 * D; i < 3 * D; ++i) unit.b.mutable_data()[i] = 1.0;
  MainBlockParams bp;
  bp.ada = unit;
  bp.mamba = init_mamba_block(MambaDims{D, 4, 2, 4}, rng);
  auto path = cached_scan(3, 2, 2);
  Tensor got = main_block(x, temb, Tensor{}, bp, *path, BlockOptions{});
  Tensor want = add(x, mamba_block(layer_norm(x), bp.mamba, *path));
  CHECK(max_abs_diff(got, want) < 1e-14);

  // General modulation against a hand composition.
  AdaLnParams mod{rng.normal_tensor({D, 3 * D}, 0.3), rng.normal_tensor({3 * D}, 0.3)};
  auto [xm2, gate2] = adaln_modulate(x, temb, mod);
  Tensor m = linear(silu(temb), mod.w, mod.b);
  Tensor ln = layer_norm(x);
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t d = 0; d < D; ++d) {
      const double want_v = ln.at(l * D + d) * (1.0 + m.at(D + d)) + m.at(d);
      CHECK(std::abs(xm2.at(l * D + d) - want_v) < 1e-14);
    }
  for (std::int64_t d = 0; d < D; ++d) CHECK(gate2.at(d) == m.at(2 * D + d));
}

TEST_CASE("adaln_modulate gradient check") {
  Rng rng(7);
  const std::int64_t D = 8;
  auto f = [&](const std::vector<Tensor>& in) {
    auto [xm, gate] = adaln_modulate(in[0], in[1], AdaLnParams{in[2], in[3]});
    return add(xm, gate);
  };
  double err = testing::grad_check(
      f, {rng.normal_tensor({4, D}), rng.normal_tensor({D}), rng.normal_tensor({D, 3 * D}, 0.3),
          rng.normal_tensor({3 * D}, 0.3)});
  CHECK(err < 1e-6);
}

TEST_CASE("main_block compositional oracle with text") {
  Rng rng(8);
  const std::int64_t L = 4, D = 8, C = 4;
  MainBlockParams bp;
  bp.ada = {rng.normal_tensor({D, 3 * D}, 0.3), rng.normal_tensor({3 * D}, 0.3)};
  bp.mamba = init_mamba_block(MambaDims{D, 4, 2, 4}, rng);
  bp.xattn = {rng.normal_tensor({D, D}, 0.3), rng.normal_tensor({C, D}, 0.3), rng.normal_tensor({C, D}, 0.3),
              rng.normal_tensor({D, D}, 0.3)};
  Tensor x = rng.normal_tensor({L, D});
  Tensor temb = rng.normal_tensor({D});
  Tensor ctx = rng.normal_tensor({3, C});
  auto path = cached_scan(5, 2, 2);
  Tensor got = main_block(x, temb, ctx, bp, *path, BlockOptions{true, 2});
  auto [xm, gate] = adaln_modulate(x, temb, bp.ada);
  Tensor h = add(x, mul(gate, mamba_block(xm, bp.mamba, *path)));
  Tensor want = add(h, cross_attention(h, ctx, bp.xattn, 2));
  CHECK(max_abs_diff(got, want) < 1e-14);
  Tensor no_text = main_block(x, temb, ctx, bp, *path, BlockOptions{false, 2});
  CHECK(bit_equal(no_text, h));
}

TEST_CASE("cross_attention examples") {
  Rng rng(9);
  const std::int64_t L = 5, D = 4, C = 3;
  CrossAttnParams p{rng.normal_tensor({D, D}), rng.normal_tensor({C, D}), rng.normal_tensor({C, D}),
                    rng.normal_tensor({D, D})};
  Tensor x = rng.normal_tensor({L, D});

  Tensor one = rng.normal_tensor({1, C});
  Tensor out = cross_attention(x, one, p, 2);
  Tensor row = matmul(matmul(one, p.w_v), p.w_o);
  for (std::int64_t l = 0; l < L; ++l)
    for (std::int64_t d = 0; d < D; ++d) CHECK(std::abs(out.at(l * D + d) - row.at(d)) < 1e-12);

  Tensor ctx = rng.normal_tensor({3, C});
  Tensor base = cross_attention(x, ctx, p, 2);
  std::vector<std::int64_t> perm = {0, 1, 2};
  while (std::next_permutation(perm.begin(), perm.end())) {
    Tensor shuffled = cross_attention(x, permute_rows(ctx, perm), p, 2);
    CHECK(max_abs_diff(base, shuffled) < 1e-12);
  }

  CrossAttnParams zero_o = p;
  zero_o.w_o = Tensor::zeros({D, D});
  Tensor zeroed = cross_attention(x, ctx, zero_o, 2);
  for (double v : zeroed.data()) CHECK(v == 0.0);
  CHECK_THROWS_AS(cross_attention(x, Tensor{}, p, 2), std::invalid_argument);
}

TEST_CASE("skip_fuse examples") {
  Rng rng(10);
  const std::int64_t L = 3, D = 4;
  Tensor dec = rng.normal_tensor({L, D});
  Tensor enc = rng.normal_tensor({L, D});
  Tensor left = Tensor::zeros({2 * D, D});
  Tensor right = Tensor::zeros({2 * D, D});
  for (std::int64_t i = 0; i < D; ++i) {
    left.mutable_data()[i * D + i] = 1.0;
    right.mutable_data()[(D + i) * D + i] = 1.0;
  }
  CHECK(bit_equal(skip_fuse(dec, enc, {left, Tensor::zeros({D})}), dec));
  CHECK(bit_equal(skip_fuse(dec, enc, {right, Tensor::zeros({D})}), enc));

  // L=2, D=2: rows [dec | enc] = [1 2 | 3 4] and [5 6 | 7 8].
  Tensor d2 = Tensor::from({2, 2}, {1, 2, 5, 6});
  Tensor e2 = Tensor::from({2, 2}, {3, 4, 7, 8});
  Tensor w = Tensor::from({4, 2}, {1, 0, 0, 1, 1, 1, 2, -1});
  Tensor b = Tensor::from({2}, {0.5, -0.5});
  Tensor out = skip_fuse(d2, e2, {w, b});
  // row 0: [1 + 3 + 8 + 0.5, 2 + 3 - 4 - 0.5]; row 1: [5 + 7 + 16 + 0.5, 6 + 7 - 8 - 0.5]
  CHECK(out.at(0) == 12.5);
  CHECK(out.at(1) == 0.5);
  CHECK(out.at(2) == 28.5);
  CHECK(out.at(3) == 4.5);
  CHECK_THROWS_AS(skip_fuse(dec, rng.normal_tensor({L + 1, D}), {left, Tensor::zeros({D})}), ShapeError);
}

TEST_CASE("timestep embedding") {
  Tensor f = sinusoidal_features(std::vector<double>{0.0}, 8);
  for (int j = 0; j < 4; ++j) {
    CHECK(f.at(j) == 0.0);
    CHECK(f.at(4 + j) == 1.0);
  }
  Tensor g = sinusoidal_features(std::vector<double>{0.25}, 4);
  CHECK(g.at(0) == doctest::Approx(std::sin(250.0)).epsilon(1e-14));
  CHECK(g.at(1) == doctest::Approx(std::sin(2.5)).epsilon(1e-14));
  CHECK(g.at(3) == doctest::Approx(std::cos(2.5)).epsilon(1e-14));
  CHECK_THROWS_AS(sinusoidal_features(std::vector<double>{0.5}, 7), std::invalid_argument);

  Rng rng(11);
  ModelConfig c = tiny_config();
  UsmParams p = init_params(c, rng);
  Tensor a = timestep_embed(p.temb, std::vector<double>{0.5});
  Tensor b = timestep_embed(p.temb, std::vector<double>{0.5});
  CHECK(bit_equal(a, b));
  Tensor n = timestep_embed(p.temb, std::vector<double>{0.5 + 1e-9});
  CHECK(max_abs_diff(a, n) < 1e-6);
}

TEST_CASE("class context lookup") {
  Rng rng(12);
  ModelConfig c = tiny_config();
  c.use_text = true;
  c.num_classes = 3;
  UsmParams p = init_params(c, rng);
  std::vector<std::int64_t> labels = {2, 0, 2};
  Tensor ctx = class_context(p, labels);
  CHECK(ctx.shape() == Shape{3, 1, 4});
  for (int d = 0; d < 4; ++d) {
    CHECK(ctx.at(d) == p.ctx_table.at(2 * 4 + d));
    CHECK(ctx.at(4 + d) == p.ctx_table.at(d));
  }
  Tensor v = usm_forward(rng.normal_tensor({3, 2, 8, 8}), ts(3, 0.5), ctx, p, c);
  CHECK(v.shape() == Shape{3, 2, 8, 8});
}

TEST_CASE("end-to-end gradient matches finite differences") {
  Rng rng(13);
  ModelConfig c = tiny_config();
  c.use_text = true;
  c.num_classes = 2;
  UsmParams p = init_params(c, rng);
  jitter_all(p, rng, 0.15);
  Tensor z = rng.normal_tensor({1, 2, 8, 8});
  std::vector<std::int64_t> labels = {1};
  const std::vector<double> t = {0.37};
  Tensor probe = rng.normal_tensor({1, 2, 8, 8});
  auto run = [&]() { return sum(mul(usm_forward(z, t, class_context(p, labels), p, c), probe)); };
  for (auto& nt : p.named()) nt.tensor.zero_grad();
  {
    GradTape tape;
    tape.backward(run());
  }
  double worst = 0.0;
  int checked = 0;
  std::string worst_name;
  for (auto& nt : p.named()) {
    const Tensor& tsr = nt.tensor;
    std::vector<std::int64_t> coords = {0, tsr.numel() - 1};
    if (tsr.numel() > 2) coords.push_back(rng.below(tsr.numel()));
    auto num = finite_diff_grad_at([&]() { return run().item(); }, tsr, coords, 1e-5);
    for (std::size_t i = 0; i < coords.size(); ++i) {
      const double an = tsr.has_grad() ? tsr.grad()[coords[i]] : 0.0;
      ++checked;
      // Central differences on this loss resolve about 1e-9 absolute.
      if (std::abs(an - num[i]) < 1e-9) continue;
      const double e = testing::rel_err(an, num[i]);
      if (e > worst) worst_name = nt.name;
      worst = std::max(worst, e);
    }
  }
  MESSAGE("checked ", checked, " coordinates, worst rel err ", worst, " in ", worst_name);
  CHECK(worst < 1e-4);
}
