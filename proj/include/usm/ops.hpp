#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "usm/tensor.hpp"

// Differentiable tensor operations. Every op records itself on the active
// GradTape when any input requires grad.
//
// Broadcasting (add/sub/mul only): shapes are aligned from the right; each
// aligned pair of dims must be equal or one of them 1. Anything else throws
// ShapeError naming the op and both shapes.
namespace usm {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, double s);
Tensor scale(const Tensor& a, double s);

// a[..., M, K] x b[K, N] -> [..., M, N]. b is shared across the leading dims.
Tensor matmul(const Tensor& a, const Tensor& b);
// x[..., K] W[K, N] + bias[N]; bias may be undefined.
Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias = Tensor());

Tensor exp(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor silu(const Tensor& x);
Tensor sigmoid(const Tensor& x);

inline constexpr double kLayerNormEps = 1e-6;
// Normalizes each row over the last axis; gain and bias ([D]) are optional.
Tensor layer_norm(const Tensor& x, const Tensor& gain = Tensor(), const Tensor& bias = Tensor(),
                  double eps = kLayerNormEps);
Tensor softmax(const Tensor& x);  // last axis

Tensor concat(const std::vector<Tensor>& parts);  // last axis
std::vector<Tensor> split(const Tensor& x, const std::vector<std::int64_t>& sizes);  // last axis

// Row i of the output is row index[i] of x, for x[..., L, D].
Tensor permute_rows(const Tensor& x, std::span<const std::int64_t> index);
// Rows of a [K, C] table (or [..., K, C]) picked by index; repeats allowed.
Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> index);
Tensor reshape(const Tensor& x, Shape shape);
Tensor transpose(const Tensor& x);  // swaps the last two axes

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);
Tensor mean_last(const Tensor& x);  // [..., K] -> [...]

// Kernel 2 / stride 2 convolution: x[..., h, w, D], kernel[2, 2, D, Dout],
// bias[Dout] -> [..., h/2, w/2, Dout]. Odd h or w throws.
Tensor conv_down(const Tensor& x, const Tensor& kernel, const Tensor& bias);
// Kernel 2 / stride 2 transposed convolution: x[..., h, w, D] -> [..., 2h, 2w, Dout].
Tensor conv_up(const Tensor& x, const Tensor& kernel, const Tensor& bias);

// Causal depthwise convolution along the sequence axis, left zero padded:
// y[l, e] = bias[e] + sum_j w[e, j] * x[l - (k - 1) + j, e]. x is [..., L, E], w is [E, k].
Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias);

// Multi-head scaled dot-product attention. q[..., L, D], k/v[..., M, D];
// heads split D evenly; scores scaled by 1/sqrt(D / heads); softmax over M.
Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads);

}  // namespace usm
