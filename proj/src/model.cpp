#include "usm/model.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "usm/log.hpp"
#include "usm/ops.hpp"

namespace usm {

namespace {

using Index = std::int64_t;

[[noreturn]] void bad_config(const std::string& why) { throw std::invalid_argument("model config: " + why); }

std::string two(int i) {
  std::string s = std::to_string(i);
  return s.size() < 2 ? "0" + s : s;
}

LinearParams make_linear(Rng& rng, Index in, Index out, double stddev) {
  return {rng.normal_tensor({in, out}, stddev), Tensor::zeros({out})};
}

Tensor repeat_batch(const Tensor& t, Index batch) {
  const Index M = t.dim(0);
  std::vector<Index> idx(static_cast<std::size_t>(batch * M));
  for (Index b = 0; b < batch; ++b)
    for (Index m = 0; m < M; ++m) idx[b * M + m] = m;
  return reshape(gather_rows(t, idx), {batch, M, t.dim(1)});
}

Tensor to_grid(const Tensor& x, Index gh, Index gw) { return reshape(x, {x.dim(0), gh, gw, x.dim(-1)}); }
Tensor to_seq(const Tensor& x) { return reshape(x, {x.dim(0), x.dim(1) * x.dim(2), x.dim(3)}); }

}  // namespace

void ModelConfig::validate() const {
  if (channels < 1 || height < 1 || width < 1) bad_config("grid dims and channels must be positive");
  if (hidden < 1 || state < 1 || expand < 1 || conv_width < 0) bad_config("hidden/state/expand must be positive");
  if (t_freq_dim < 2 || t_freq_dim % 2 != 0) bad_config("t_freq_dim must be even and >= 2");
  if (n_enc + n_mid + n_dec != 25) bad_config("block layout must total 25 blocks");
  if (n_mid != 1 || n_enc != n_dec) bad_config("layout must be encoder/1 middle/mirrored decoder");
  if (num_classes < 0) bad_config("num_classes must be >= 0");
  if (use_text) {
    if (ctx_dim < 1) bad_config("ctx_dim must be positive when text conditioning is on");
    if (heads < 1 || hidden % heads != 0) bad_config("hidden size must be divisible by heads");
  }
  if (layout == Layout::kUShape) {
    int prev = 0;
    for (int d : downsample_after) {
      if (d <= prev || d > n_enc) bad_config("downsample_after must be increasing encoder indices");
      prev = d;
    }
    const Index f = Index{1} << downsample_after.size();
    if (height % f != 0 || width % f != 0) {
      bad_config("h and w must be divisible by " + std::to_string(f) + ", got " + std::to_string(height) + "x" +
                 std::to_string(width));
    }
  }
}

std::vector<BlockStage> ModelConfig::schedule() const {
  validate();
  std::vector<BlockStage> out;
  if (layout == Layout::kFlat) {
    for (int i = 0; i < num_blocks(); ++i) {
      BlockStage s;
      s.index = i;
      s.role = BlockRole::kFlat;
      s.role_index = i + 1;
      s.grid_h = height;
      s.grid_w = width;
      s.scan_config = scan_for_block(i);
      out.push_back(s);
    }
    return out;
  }
  Index gh = height, gw = width;
  int idx = 0;
  std::vector<std::pair<Index, Index>> enc_grid(static_cast<std::size_t>(n_enc + 1));
  for (int j = 1; j <= n_enc; ++j) {
    BlockStage s;
    s.index = idx;
    s.role = BlockRole::kEncoder;
    s.role_index = j;
    s.grid_h = gh;
    s.grid_w = gw;
    s.scan_config = scan_for_block(idx++);
    s.downsample_after = std::find(downsample_after.begin(), downsample_after.end(), j) != downsample_after.end();
    enc_grid[j] = {gh, gw};
    out.push_back(s);
    if (s.downsample_after) {
      gh /= 2;
      gw /= 2;
    }
  }
  for (int j = 1; j <= n_mid; ++j) {
    BlockStage s;
    s.index = idx;
    s.role = BlockRole::kMiddle;
    s.role_index = j;
    s.grid_h = gh;
    s.grid_w = gw;
    s.scan_config = scan_for_block(idx++);
    out.push_back(s);
  }
  for (int j = 1; j <= n_dec; ++j) {
    const int pair = n_enc + 1 - j;
    const auto [th, tw] = enc_grid[pair];
    BlockStage s;
    s.index = idx;
    s.role = BlockRole::kDecoder;
    s.role_index = j;
    s.upsample_before = th * tw > gh * gw;
    if (s.upsample_before) {
      gh *= 2;
      gw *= 2;
    }
    s.grid_h = gh;
    s.grid_w = gw;
    s.scan_config = scan_for_block(idx++);
    s.skip_from = use_skips ? pair : 0;
    out.push_back(s);
  }
  return out;
}

void ModelConfig::write(KeyValue& kv) const {
  kv.set("model.channels", channels);
  kv.set("model.height", height);
  kv.set("model.width", width);
  kv.set("model.hidden", hidden);
  kv.set("model.state", state);
  kv.set("model.expand", expand);
  kv.set("model.conv_width", conv_width);
  kv.set("model.heads", heads);
  kv.set("model.ctx_dim", ctx_dim);
  kv.set("model.t_freq_dim", t_freq_dim);
  kv.set("model.num_classes", num_classes);
  kv.set("model.use_text", use_text);
  kv.set("model.use_skips", use_skips);
  kv.set("model.layout", layout == Layout::kFlat ? "flat" : "ushape");
  kv.set("model.n_enc", n_enc);
  kv.set("model.n_mid", n_mid);
  kv.set("model.n_dec", n_dec);
  std::string ds;
  for (std::size_t i = 0; i < downsample_after.size(); ++i) ds += (i ? "," : "") + std::to_string(downsample_after[i]);
  kv.set("model.downsample_after", ds);
}

ModelConfig ModelConfig::read(const KeyValue& kv) {
  ModelConfig c;
  c.channels = kv.get_int("model.channels", c.channels);
  c.height = kv.get_int("model.height", c.height);
  c.width = kv.get_int("model.width", c.width);
  c.hidden = kv.get_int("model.hidden", c.hidden);
  c.state = kv.get_int("model.state", c.state);
  c.expand = kv.get_int("model.expand", c.expand);
  c.conv_width = kv.get_int("model.conv_width", c.conv_width);
  c.heads = kv.get_int("model.heads", c.heads);
  c.ctx_dim = kv.get_int("model.ctx_dim", c.ctx_dim);
  c.t_freq_dim = kv.get_int("model.t_freq_dim", c.t_freq_dim);
  c.num_classes = kv.get_int("model.num_classes", c.num_classes);
  c.use_text = kv.get_bool("model.use_text", c.use_text);
  c.use_skips = kv.get_bool("model.use_skips", c.use_skips);
  const std::string layout = kv.get_or("model.layout", "ushape");
  if (layout == "flat") {
    c.layout = Layout::kFlat;
  } else if (layout == "ushape") {
    c.layout = Layout::kUShape;
  } else {
    throw FormatError("model.layout must be 'ushape' or 'flat', got '" + layout + "'");
  }
  c.n_enc = static_cast<int>(kv.get_int("model.n_enc", c.n_enc));
  c.n_mid = static_cast<int>(kv.get_int("model.n_mid", c.n_mid));
  c.n_dec = static_cast<int>(kv.get_int("model.n_dec", c.n_dec));
  if (kv.has("model.downsample_after")) {
    c.downsample_after.clear();
    std::stringstream ss(kv.get("model.downsample_after"));
    std::string item;
    while (std::getline(ss, item, ',')) {
      try {
        c.downsample_after.push_back(std::stoi(item));
      } catch (const std::exception&) {
        throw FormatError("model.downsample_after: bad entry '" + item + "'");
      }
    }
  }
  return c;
}

std::vector<NamedTensor> UsmParams::named() const {
  std::vector<NamedTensor> out;
  auto add = [&](std::string name, const Tensor& t) {
    if (t.defined()) out.push_back({std::move(name), t});
  };
  add("in_proj.w", in_proj.w);
  add("in_proj.b", in_proj.b);
  add("temb.fc1.w", temb.fc1.w);
  add("temb.fc1.b", temb.fc1.b);
  add("temb.fc2.w", temb.fc2.w);
  add("temb.fc2.b", temb.fc2.b);
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    const auto& b = blocks[i];
    const std::string p = "blocks." + two(static_cast<int>(i)) + ".";
    add(p + "ada.w", b.ada.w);
    add(p + "ada.b", b.ada.b);
    add(p + "mamba.w_in", b.mamba.w_in);
    add(p + "mamba.conv_w", b.mamba.conv_w);
    add(p + "mamba.conv_b", b.mamba.conv_b);
    add(p + "mamba.a_log", b.mamba.ssm.a_log);
    add(p + "mamba.d_skip", b.mamba.ssm.d_skip);
    add(p + "mamba.w_b", b.mamba.ssm.w_b);
    add(p + "mamba.w_c", b.mamba.ssm.w_c);
    add(p + "mamba.w_delta", b.mamba.ssm.w_delta);
    add(p + "mamba.delta_bias", b.mamba.ssm.delta_bias);
    add(p + "mamba.w_out", b.mamba.w_out);
    add(p + "xattn.w_q", b.xattn.w_q);
    add(p + "xattn.w_k", b.xattn.w_k);
    add(p + "xattn.w_v", b.xattn.w_v);
    add(p + "xattn.w_o", b.xattn.w_o);
  }
  for (std::size_t i = 0; i < down.size(); ++i) {
    add("down." + std::to_string(i) + ".kernel", down[i].kernel);
    add("down." + std::to_string(i) + ".bias", down[i].bias);
  }
  for (std::size_t i = 0; i < up.size(); ++i) {
    add("up." + std::to_string(i) + ".kernel", up[i].kernel);
    add("up." + std::to_string(i) + ".bias", up[i].bias);
  }
  for (std::size_t i = 0; i < skips.size(); ++i) {
    add("skips." + two(static_cast<int>(i)) + ".w", skips[i].w);
    add("skips." + two(static_cast<int>(i)) + ".b", skips[i].b);
  }
  add("ctx_table", ctx_table);
  add("out_proj.w", out_proj.w);
  add("out_proj.b", out_proj.b);
  return out;
}

std::vector<Tensor> UsmParams::tensors() const {
  std::vector<Tensor> out;
  for (auto& nt : named()) out.push_back(nt.tensor);
  return out;
}

std::int64_t UsmParams::count() const {
  std::int64_t n = 0;
  for (auto& nt : named()) n += nt.tensor.numel();
  return n;
}

UsmParams init_params(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  const Index D = cfg.hidden, c = cfg.channels;
  UsmParams p;
  p.in_proj = make_linear(rng, c, D, 1.0 / std::sqrt(static_cast<double>(c)));
  p.out_proj = {Tensor::zeros({D, c}), Tensor::zeros({c})};
  p.temb.freq_dim = cfg.t_freq_dim;
  p.temb.fc1 = make_linear(rng, cfg.t_freq_dim, D, 0.02);
  p.temb.fc2 = make_linear(rng, D, D, 0.02);
  const MambaDims dims = cfg.mamba_dims();
  for (int i = 0; i < cfg.num_blocks(); ++i) {
    MainBlockParams b;
    b.ada = {Tensor::zeros({D, 3 * D}), Tensor::zeros({3 * D})};
    b.mamba = init_mamba_block(dims, rng);
    if (cfg.use_text) {
      b.xattn.w_q = rng.normal_tensor({D, D}, 0.02);
      b.xattn.w_k = rng.normal_tensor({cfg.ctx_dim, D}, 0.02);
      b.xattn.w_v = rng.normal_tensor({cfg.ctx_dim, D}, 0.02);
      b.xattn.w_o = Tensor::zeros({D, D});
    }
    p.blocks.push_back(std::move(b));
  }
  if (cfg.layout == Layout::kUShape) {
    for (std::size_t i = 0; i < cfg.downsample_after.size(); ++i) {
      p.down.push_back({rng.normal_tensor({2, 2, D, D}, 1.0 / std::sqrt(4.0 * static_cast<double>(D))), Tensor::zeros({D})});
    }
    for (std::size_t i = 0; i < cfg.downsample_after.size(); ++i) {
      p.up.push_back({rng.normal_tensor({2, 2, D, D}, 1.0 / std::sqrt(static_cast<double>(D))), Tensor::zeros({D})});
    }
    if (cfg.use_skips) {
      for (int j = 0; j < cfg.n_dec; ++j) p.skips.push_back(make_linear(rng, 2 * D, D, 1.0 / std::sqrt(2.0 * static_cast<double>(D))));
    }
  }
  if (cfg.use_text && cfg.num_classes > 0) p.ctx_table = rng.normal_tensor({cfg.num_classes, cfg.ctx_dim});
  for (auto& nt : p.named()) nt.tensor.set_requires_grad(true);
  return p;
}

Tensor sinusoidal_features(std::span<const double> t, std::int64_t dim) {
  if (dim < 2 || dim % 2 != 0) throw std::invalid_argument("timestep embedding dim must be even, got " + std::to_string(dim));
  const Index half = dim / 2;
  const Index B = static_cast<Index>(t.size());
  Tensor out = Tensor::zeros({B, dim});
  auto od = out.mutable_data();
  for (Index b = 0; b < B; ++b)
    for (Index j = 0; j < half; ++j) {
      const double freq = std::pow(10000.0, -2.0 * static_cast<double>(j) / static_cast<double>(dim));
      const double arg = 1000.0 * t[b] * freq;
      od[b * dim + j] = std::sin(arg);
      od[b * dim + half + j] = std::cos(arg);
    }
  return out;
}

Tensor timestep_embed(const TimestepEmbedding& te, std::span<const double> t) {
  Tensor f = sinusoidal_features(t, te.freq_dim);
  return linear(silu(linear(f, te.fc1.w, te.fc1.b)), te.fc2.w, te.fc2.b);
}

std::pair<Tensor, Tensor> adaln_modulate(const Tensor& x, const Tensor& t_emb, const AdaLnParams& mod) {
  const Index D = x.dim(-1);
  if (t_emb.dim(-1) != mod.w.dim(0) || mod.w.dim(1) != 3 * D) {
    throw ShapeError("adaln_modulate: x " + shape_str(x.shape()) + ", t_emb " + shape_str(t_emb.shape()) +
                     ", map " + shape_str(mod.w.shape()));
  }
  Shape bshape(t_emb.shape().begin(), t_emb.shape().end() - 1);
  bshape.push_back(1);
  bshape.push_back(D);
  auto parts = split(linear(silu(t_emb), mod.w, mod.b), {D, D, D});
  Tensor shift = reshape(parts[0], bshape);
  Tensor scl = reshape(parts[1], bshape);
  Tensor gate = reshape(parts[2], bshape);
  Tensor x_mod = add(mul(layer_norm(x), add_scalar(scl, 1.0)), shift);
  return {x_mod, gate};
}

Tensor cross_attention(const Tensor& x, const Tensor& ctx, const CrossAttnParams& p, std::int64_t heads) {
  if (!ctx.defined()) throw std::invalid_argument("cross_attention: empty context (M = 0)");
  Tensor c = ctx;
  if (x.rank() == 3 && ctx.rank() == 2) c = repeat_batch(ctx, x.dim(0));
  Tensor q = linear(layer_norm(x), p.w_q);
  Tensor k = linear(c, p.w_k);
  Tensor v = linear(c, p.w_v);
  return linear(attention(q, k, v, static_cast<int>(heads)), p.w_o);
}

Tensor main_block(const Tensor& x, const Tensor& t_emb, const Tensor& ctx, const MainBlockParams& p,
                  const ScanPath& path, const BlockOptions& opts) {
  auto [x_mod, gate] = adaln_modulate(x, t_emb, p.ada);
  Tensor out = add(x, mul(gate, mamba_block(x_mod, p.mamba, path)));
  if (opts.use_text) out = add(out, cross_attention(out, ctx, p.xattn, opts.heads));
  return out;
}

Tensor skip_fuse(const Tensor& dec, const Tensor& enc, const LinearParams& proj) {
  if (dec.shape() != enc.shape()) {
    throw ShapeError("skip_fuse: decoder " + shape_str(dec.shape()) + " vs encoder " + shape_str(enc.shape()));
  }
  return linear(concat({dec, enc}), proj.w, proj.b);
}

Tensor usm_forward(const Tensor& z, std::span<const double> t, const Tensor& ctx, const UsmParams& params,
                   const ModelConfig& cfg, ForwardTrace* trace) {
  const auto stages = cfg.schedule();
  const bool single = z.rank() == 3;
  const Index c = cfg.channels, H = cfg.height, W = cfg.width, L = H * W;
  const Shape expect = single ? Shape{c, H, W} : Shape{z.rank() == 4 ? z.dim(0) : 0, c, H, W};
  if (z.shape() != expect) {
    throw ShapeError("usm_forward: input " + shape_str(z.shape()) + " does not match config [B," + std::to_string(c) +
                     "," + std::to_string(H) + "," + std::to_string(W) + "]");
  }
  const Index B = single ? 1 : z.dim(0);
  if (static_cast<Index>(t.size()) != B) {
    throw ShapeError("usm_forward: " + std::to_string(t.size()) + " timesteps for batch of " + std::to_string(B));
  }
  if (params.blocks.size() != stages.size()) throw std::invalid_argument("usm_forward: parameters do not match config");

  Tensor ctx_b;
  if (cfg.use_text) {
    if (!ctx.defined()) throw std::invalid_argument("usm_forward: text conditioning enabled but no context given");
    if (ctx.rank() == 2) {
      ctx_b = repeat_batch(ctx, B);
    } else if (ctx.rank() == 3 && ctx.dim(0) == B && ctx.dim(2) == cfg.ctx_dim) {
      ctx_b = ctx;
    } else {
      throw ShapeError("usm_forward: context " + shape_str(ctx.shape()) + " for batch of " + std::to_string(B));
    }
  } else if (ctx.defined()) {
    log::warn("usm_forward: context supplied but text conditioning is off; ignoring it");
  }

  Tensor x = linear(transpose(reshape(z, {B, c, L})), params.in_proj.w, params.in_proj.b);
  Tensor temb = timestep_embed(params.temb, t);
  const BlockOptions opts{cfg.use_text, cfg.heads};

  if (trace != nullptr) *trace = ForwardTrace{};
  std::vector<Tensor> enc_out(static_cast<std::size_t>(cfg.n_enc + 1));
  std::size_t n_down = 0, n_up = 0;
  for (const auto& s : stages) {
    if (s.upsample_before) {
      const auto& up = params.up.at(n_up++);
      x = to_seq(conv_up(to_grid(x, s.grid_h / 2, s.grid_w / 2), up.kernel, up.bias));
    }
    if (s.role == BlockRole::kDecoder && s.skip_from > 0) {
      x = skip_fuse(x, enc_out[s.skip_from], params.skips.at(s.role_index - 1));
      if (trace != nullptr) trace->skip_pairs.emplace_back(s.skip_from, s.role_index);
    }
    auto path = cached_scan(s.scan_config, s.grid_h, s.grid_w);
    x = main_block(x, temb, ctx_b, params.blocks[s.index], *path, opts);
    if (trace != nullptr) {
      trace->block_tokens.push_back(x.dim(1));
      trace->block_scan.push_back(path->config_id);
      if (s.role == BlockRole::kMiddle) trace->middle_tokens = x.dim(1);
    }
    if (s.role == BlockRole::kEncoder) enc_out[s.role_index] = x;
    if (s.downsample_after) {
      const auto& dn = params.down.at(n_down++);
      x = to_seq(conv_down(to_grid(x, s.grid_h, s.grid_w), dn.kernel, dn.bias));
    }
  }
  Tensor v = reshape(transpose(linear(x, params.out_proj.w, params.out_proj.b)), {B, c, H, W});
  return single ? reshape(v, {c, H, W}) : v;
}

Tensor class_context(const UsmParams& params, std::span<const std::int64_t> labels) {
  if (!params.ctx_table.defined()) throw std::invalid_argument("class_context: model has no class embedding table");
  Tensor rows = gather_rows(params.ctx_table, labels);
  return reshape(rows, {static_cast<Index>(labels.size()), 1, params.ctx_table.dim(1)});
}

}  // namespace usm
