#include "usm/profiler.hpp"

#include <chrono>
#include <cmath>
#include <fstream>
#include <stdexcept>

#include "usm/autograd.hpp"
#include "usm/config.hpp"

namespace usm {

namespace {

std::string block_name(int k) {
  std::string s = std::to_string(k);
  return "blocks." + std::string(s.size() < 2 ? "0" : "") + s + ".";
}

// Per-token and per-forward costs of one main block.
void add_block(std::vector<CostItem>& out, const ModelConfig& c, int k, std::int64_t L, std::int64_t M) {
  const std::int64_t D = c.hidden, N = c.state, E = c.expand * c.hidden, K = c.conv_width;
  const std::string p = block_name(k);
  auto tok = [&](const std::string& name, std::int64_t per_token, bool quad) {
    out.push_back({p + name, CostKind::kBlock, k, L, per_token * L, quad});
  };
  tok("mamba.in_proj", D * 2 * E, true);
  if (K > 0) tok("mamba.conv", E * K, false);
  tok("mamba.dt_proj", E * E, true);
  tok("mamba.bc_proj", 2 * E * N, false);
  tok("mamba.discretize", 2 * E * N, false);
  tok("mamba.scan", 2 * E * N, false);
  tok("mamba.out_proj", E * D, true);
  out.push_back({p + "adaln", CostKind::kBlockFixed, k, 0, D * 3 * D, true});
  if (c.use_text) {
    tok("xattn.q_proj", D * D, true);
    tok("xattn.scores", 2 * M * D, false);
    tok("xattn.o_proj", D * D, true);
    out.push_back({p + "xattn.kv_proj", CostKind::kBlockFixed, k, 0, 2 * M * c.ctx_dim * D, false});
  }
}

void add_embed(std::vector<CostItem>& out, const ModelConfig& c) {
  const std::int64_t L = c.height * c.width, D = c.hidden;
  out.push_back({"in_proj", CostKind::kEmbed, -1, L, L * c.channels * D, false});
  out.push_back({"temb", CostKind::kEmbed, -1, 0, c.t_freq_dim * D + D * D, false});
  out.push_back({"out_proj", CostKind::kEmbed, -1, L, L * D * c.channels, false});
}

std::int64_t total_of(const std::vector<CostItem>& items, bool blocks_only) {
  std::int64_t s = 0;
  for (const auto& it : items)
    if (!blocks_only || it.kind == CostKind::kBlock) s += it.macs;
  return s;
}

}  // namespace

std::int64_t CostReport::sum(CostKind kind) const {
  std::int64_t s = 0;
  for (const auto& it : items)
    if (it.kind == kind) s += it.macs;
  return s;
}

CostReport flops_count(const ModelConfig& cfg, std::int64_t ctx_tokens) {
  if (ctx_tokens < 1) throw std::invalid_argument("flops_count: ctx_tokens must be >= 1");
  CostReport r;
  const std::int64_t D = cfg.hidden, N = cfg.state, E = cfg.expand * cfg.hidden;
  add_embed(r.items, cfg);
  std::int64_t live = 2 * cfg.height * cfg.width * D;
  for (const auto& s : cfg.schedule()) {
    const std::int64_t L = s.tokens();
    if (s.upsample_before) {
      const std::int64_t in = L / 4;
      r.items.push_back({"up.before." + std::to_string(s.index), CostKind::kUp, s.index, in, in * 4 * D * D, true});
      live += L * D;
    }
    if (s.skip_from > 0) {
      r.items.push_back({block_name(s.index) + "skip", CostKind::kSkip, s.index, L, L * 2 * D * D, true});
      live += 3 * L * D;
    }
    add_block(r.items, cfg, s.index, L, ctx_tokens);
    r.stage_tokens.push_back(L);
    // Saved per token: LN/modulation (3D), in_proj and split (4E), conv and
    // silu (2E), dt/B/C (2E + 2N), Abar/Bbar (2EN), gated output (3E), residual (2D).
    live += L * (5 * D + 11 * E + 2 * N + 2 * E * N);
    if (s.downsample_after) {
      const std::int64_t out = L / 4;
      r.items.push_back({"down.after." + std::to_string(s.index), CostKind::kDown, s.index, out, out * 4 * D * D, true});
      live += out * D;
    }
  }
  r.total = total_of(r.items, false);
  r.block_total = total_of(r.items, true);
  r.skip_total = r.sum(CostKind::kSkip);
  r.peak_activation_estimate = live;

  ModelConfig flat = cfg;
  flat.layout = Layout::kFlat;
  std::vector<CostItem> ref;
  add_embed(ref, flat);
  for (int k = 0; k < flat.num_blocks(); ++k) add_block(ref, flat, k, flat.height * flat.width, ctx_tokens);
  r.flat_total = total_of(ref, false);
  r.flat_block_total = total_of(ref, true);
  return r;
}

void ProfileReport::write_csv(const std::string& path) const {
  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::trunc);
    if (!f) throw std::runtime_error("cannot open " + tmp);
    f << "layout,rep,wall_ms,peak_live_elements\n";
    for (std::size_t i = 0; i < wall_ms.size(); ++i) {
      f << layout << ',' << i + 1 << ',' << format_double(wall_ms[i]) << ',' << peak_live_elements << '\n';
    }
  }
  if (std::rename(tmp.c_str(), path.c_str()) != 0) throw std::runtime_error("cannot rename " + tmp + " to " + path);
}

ProfileReport profile_run(const ModelConfig& cfg, int reps, std::uint64_t seed) {
  if (reps < 1) throw std::invalid_argument("profile_run: reps must be >= 1");
  Rng rng(seed);
  UsmParams p = init_params(cfg, rng);
  // Non-zero gates so every block does its full work.
  for (auto& blk : p.blocks)
    for (double& v : blk.ada.b.mutable_data()) v = 0.1 * rng.normal();
  Tensor z = rng.normal_tensor({1, cfg.channels, cfg.height, cfg.width});
  Tensor ctx;
  if (cfg.use_text) ctx = rng.normal_tensor({1, cfg.ctx_dim});
  const std::vector<double> t = {0.5};

  ProfileReport rep;
  rep.layout = cfg.layout == Layout::kFlat ? "flat" : "ushape";
  {
    NoGradGuard ng;
    for (int i = 0; i < reps; ++i) {
      const auto t0 = std::chrono::steady_clock::now();
      Tensor v = usm_forward(z, t, ctx, p, cfg);
      const auto t1 = std::chrono::steady_clock::now();
      rep.wall_ms.push_back(std::chrono::duration<double, std::milli>(t1 - t0).count());
    }
  }
  double m = 0.0;
  for (double w : rep.wall_ms) m += w;
  m /= static_cast<double>(reps);
  double var = 0.0;
  for (double w : rep.wall_ms) var += (w - m) * (w - m);
  rep.mean_ms = m;
  rep.stddev_ms = reps > 1 ? std::sqrt(var / static_cast<double>(reps - 1)) : 0.0;

  const std::int64_t base = memory_stats().live_elements;
  reset_peak_memory();
  {
    GradTape tape;
    ForwardTrace trace;
    Tensor v = usm_forward(z, t, ctx, p, cfg, &trace);
    rep.peak_live_elements = memory_stats().peak_elements - base;
    rep.stage_tokens = trace.block_tokens;
  }
  return rep;
}

}  // namespace usm
