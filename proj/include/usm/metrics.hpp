#pragma once

#include "usm/tensor.hpp"

namespace usm {

// 2-Wasserstein distance between diagonal Gaussian fits of two sample sets
// [n, ...] and [m, ...]: sqrt(|mu_g - mu_r|^2 + |sigma_g - sigma_r|^2), with
// unbiased per-dimension standard deviations. n or m < 2 throws.
double eval_moments(const Tensor& generated, const Tensor& reference);

}  // namespace usm
