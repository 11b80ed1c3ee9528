#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "usm/config.hpp"
#include "usm/mamba.hpp"
#include "usm/rng.hpp"
#include "usm/scan_paths.hpp"
#include "usm/tensor.hpp"

namespace usm {

enum class Layout { kUShape, kFlat };

enum class BlockRole { kEncoder, kMiddle, kDecoder, kFlat };

// Static position of one main block in execution order.
struct BlockStage {
  int index = 0;       // 0..24
  BlockRole role = BlockRole::kEncoder;
  int role_index = 0;  // 1-based within its role
  std::int64_t grid_h = 0, grid_w = 0;
  int scan_config = 0;
  bool downsample_after = false;  // encoder blocks only
  bool upsample_before = false;   // decoder blocks only
  int skip_from = 0;              // decoder: paired encoder role_index, 0 when unused

  std::int64_t tokens() const { return grid_h * grid_w; }
};

struct ModelConfig {
  std::int64_t channels = 4;  // c
  std::int64_t height = 16;   // h
  std::int64_t width = 16;    // w
  std::int64_t hidden = 64;   // D
  std::int64_t state = 16;    // N
  std::int64_t expand = 2;
  std::int64_t conv_width = 4;  // 0 disables the causal conv
  std::int64_t heads = 4;
  std::int64_t ctx_dim = 32;
  std::int64_t t_freq_dim = 64;
  std::int64_t num_classes = 0;  // class-embedding table for the toy text task
  bool use_text = false;
  bool use_skips = true;
  Layout layout = Layout::kUShape;
  int n_enc = 12, n_mid = 1, n_dec = 12;
  std::vector<int> downsample_after{3, 6, 9};  // 1-based encoder block indices

  int num_blocks() const { return n_enc + n_mid + n_dec; }
  MambaDims mamba_dims() const { return {hidden, state, expand, conv_width}; }

  // Throws std::invalid_argument describing the first violated constraint.
  void validate() const;
  std::vector<BlockStage> schedule() const;

  void write(KeyValue& kv) const;  // keys under "model."
  static ModelConfig read(const KeyValue& kv);
};

struct LinearParams {
  Tensor w;  // [in, out]
  Tensor b;  // [out]
};

struct Conv2x2Params {
  Tensor kernel;  // [2, 2, D, D]
  Tensor bias;    // [D]
};

// Produces shift, scale and gate (each D) from the timestep embedding.
struct AdaLnParams {
  Tensor w;  // [D, 3D]
  Tensor b;  // [3D]
};

struct CrossAttnParams {
  Tensor w_q;  // [D, D]
  Tensor w_k;  // [ctx_dim, D]
  Tensor w_v;  // [ctx_dim, D]
  Tensor w_o;  // [D, D]
};

struct MainBlockParams {
  AdaLnParams ada;
  MambaBlockParams mamba;
  CrossAttnParams xattn;  // undefined tensors when text conditioning is off
};

struct TimestepEmbedding {
  std::int64_t freq_dim = 0;
  LinearParams fc1;  // freq_dim -> D
  LinearParams fc2;  // D -> D
};

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

struct UsmParams {
  LinearParams in_proj;   // c -> D
  LinearParams out_proj;  // D -> c
  TimestepEmbedding temb;
  std::vector<MainBlockParams> blocks;
  std::vector<Conv2x2Params> down;
  std::vector<Conv2x2Params> up;
  std::vector<LinearParams> skips;  // one per decoder block, 2D -> D
  Tensor ctx_table;                 // [num_classes, ctx_dim] or undefined

  // Stable order and names; handles share storage with the parameters.
  std::vector<NamedTensor> named() const;
  std::vector<Tensor> tensors() const;
  std::int64_t count() const;
};

// Zero: AdaLN maps, out_proj, cross-attention output. Block-internal linears
// ~ N(0, 0.02). Main-path maps (in_proj, down/up convs, skip projections)
// ~ N(0, 1/fan_in).
UsmParams init_params(const ModelConfig& cfg, Rng& rng);

// [sin(1000 t w_j) ..., cos(1000 t w_j) ...] with w_j = 10000^(-2j/dim); one row per t.
Tensor sinusoidal_features(std::span<const double> t, std::int64_t dim);
Tensor timestep_embed(const TimestepEmbedding& te, std::span<const double> t);

// x_mod = LN(x) * (1 + scale) + shift; the gate is returned for the residual.
// x[B, L, D] with t_emb[B, D], or x[L, D] with t_emb[D].
std::pair<Tensor, Tensor> adaln_modulate(const Tensor& x, const Tensor& t_emb, const AdaLnParams& mod);

// Residual update W_o * MHA(LN(x) W_q, ctx W_k, ctx W_v); the caller adds it
// to x. ctx is [B, M, ctx_dim] matching x's batch, or [M, ctx_dim].
Tensor cross_attention(const Tensor& x, const Tensor& ctx, const CrossAttnParams& p, std::int64_t heads);

struct BlockOptions {
  bool use_text = false;
  std::int64_t heads = 1;
};

// x + gate * mamba(adaln(x)), then the cross-attention residual when enabled.
Tensor main_block(const Tensor& x, const Tensor& t_emb, const Tensor& ctx, const MainBlockParams& p,
                  const ScanPath& path, const BlockOptions& opts);

// W concat(dec, enc) + b along the hidden axis.
Tensor skip_fuse(const Tensor& dec, const Tensor& enc, const LinearParams& proj);

// Per-forward record of the stage ledger.
struct ForwardTrace {
  std::vector<std::int64_t> block_tokens;
  std::vector<int> block_scan;
  std::vector<std::pair<int, int>> skip_pairs;  // (encoder j, decoder j), 1-based
  std::int64_t middle_tokens = 0;
};

// z[B, c, h, w] (or [c, h, w]) with one t per batch item -> velocity of the
// same shape. ctx may be undefined; it is ignored (with a warning) when
// text conditioning is off.
Tensor usm_forward(const Tensor& z, std::span<const double> t, const Tensor& ctx, const UsmParams& params,
                   const ModelConfig& cfg, ForwardTrace* trace = nullptr);

// Per-item class embeddings as a single-token context, [B, 1, ctx_dim].
Tensor class_context(const UsmParams& params, std::span<const std::int64_t> labels);

}  // namespace usm
