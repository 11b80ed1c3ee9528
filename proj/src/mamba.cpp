#include "usm/mamba.hpp"

#include <cmath>
#include <string>

#include "usm/autograd.hpp"
#include "usm/ops.hpp"

namespace usm {

namespace {

using Index = std::int64_t;

Index leading(const Shape& s, std::size_t tail) {
  Index r = 1;
  for (std::size_t i = 0; i + tail < s.size(); ++i) r *= s[i];
  return r;
}

struct ScanGeom {
  Index B, L, E, N;
};

ScanGeom scan_geom(const Tensor& u, const Tensor& abar, const Tensor& bbar, const Tensor& c,
                   const Tensor& d_skip) {
  if (u.rank() < 2 || abar.rank() != u.rank() + 1 || abar.shape() != bbar.shape() ||
      c.rank() != u.rank()) {
    throw ShapeError("selective_scan: u " + shape_str(u.shape()) + ", abar " + shape_str(abar.shape()) +
                     ", bbar " + shape_str(bbar.shape()) + ", c " + shape_str(c.shape()));
  }
  const Index L = u.dim(-2), E = u.dim(-1), N = abar.dim(-1);
  const Index B = leading(u.shape(), 2);
  Shape expect_a = u.shape();
  expect_a.push_back(N);
  Shape expect_c = u.shape();
  expect_c.back() = N;
  if (abar.shape() != expect_a || c.shape() != expect_c || d_skip.numel() != E) {
    throw ShapeError("selective_scan: u " + shape_str(u.shape()) + " incompatible with abar " +
                     shape_str(abar.shape()) + ", c " + shape_str(c.shape()) + ", d_skip " +
                     shape_str(d_skip.shape()));
  }
  return {B, L, E, N};
}

}  // namespace

MambaBlockParams init_mamba_block(const MambaDims& dims, Rng& rng) {
  const Index D = dims.hidden, E = dims.inner(), N = dims.state;
  MambaBlockParams p;
  p.w_in = rng.normal_tensor({D, 2 * E}, 0.02);
  if (dims.conv_width > 0) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(dims.conv_width));
    p.conv_w = Tensor::zeros({E, dims.conv_width});
    for (double& v : p.conv_w.mutable_data()) v = bound * (2.0 * rng.uniform() - 1.0);
    p.conv_b = Tensor::zeros({E});
  }
  p.ssm.a_log = Tensor::zeros({E, N});
  auto al = p.ssm.a_log.mutable_data();
  for (Index e = 0; e < E; ++e)
    for (Index n = 0; n < N; ++n) al[e * N + n] = std::log(static_cast<double>(n + 1));
  p.ssm.d_skip = Tensor::full({E}, 1.0);
  p.ssm.w_b = rng.normal_tensor({E, N}, 0.02);
  p.ssm.w_c = rng.normal_tensor({E, N}, 0.02);
  p.ssm.w_delta = rng.normal_tensor({E, E}, 0.02);
  p.ssm.delta_bias = Tensor::zeros({E});
  const double lo = std::log(1e-3), hi = std::log(1e-1);
  for (double& v : p.ssm.delta_bias.mutable_data()) {
    const double dt = std::exp(lo + (hi - lo) * rng.uniform());
    v = dt + std::log(-std::expm1(-dt));  // softplus^-1
  }
  p.w_out = rng.normal_tensor({E, D}, 0.02);
  return p;
}

std::pair<Tensor, Tensor> discretize(const Tensor& delta, const Tensor& b, const Tensor& a) {
  if (delta.rank() < 1 || a.rank() != 2 || delta.dim(-1) != a.dim(0) || b.dim(-1) != a.dim(1) ||
      delta.numel() / delta.dim(-1) != b.numel() / b.dim(-1)) {
    throw ShapeError("discretize: delta " + shape_str(delta.shape()) + ", b " + shape_str(b.shape()) +
                     ", a " + shape_str(a.shape()));
  }
  const Index E = a.dim(0), N = a.dim(1);
  const Index R = delta.numel() / E;
  auto dd = delta.data();
  auto bd = b.data();
  auto ad = a.data();
  for (double v : dd) {
    if (!(v > 0.0)) throw std::domain_error("discretize: step size must be positive, got " + std::to_string(v));
  }
  Shape os = delta.shape();
  os.push_back(N);
  std::vector<double> abar(static_cast<std::size_t>(R * E * N)), bbar(abar.size());
  for (Index r = 0; r < R; ++r)
    for (Index e = 0; e < E; ++e) {
      const double dl = dd[r * E + e];
      const Index off = (r * E + e) * N;
      for (Index n = 0; n < N; ++n) {
        abar[off + n] = std::exp(dl * ad[e * N + n]);
        bbar[off + n] = dl * bd[r * N + n];
      }
    }
  Tensor ta = make_result(os, std::move(abar), {&delta, &a});
  finish_op("discretize_a", ta, [ta, delta, a, R, E, N]() mutable {
    auto go = ta.grad();
    auto y = ta.data();
    auto dd = delta.data();
    auto ad = a.data();
    std::span<double> gd, ga;
    if (delta.requires_grad()) gd = delta.grad_mut();
    if (a.requires_grad()) ga = a.grad_mut();
    for (Index r = 0; r < R; ++r)
      for (Index e = 0; e < E; ++e) {
        const Index off = (r * E + e) * N;
        double acc = 0.0;
        for (Index n = 0; n < N; ++n) {
          const double g = go[off + n] * y[off + n];
          acc += g * ad[e * N + n];
          if (!ga.empty()) ga[e * N + n] += g * dd[r * E + e];
        }
        if (!gd.empty()) gd[r * E + e] += acc;
      }
  });
  Tensor tb = make_result(os, std::move(bbar), {&delta, &b});
  finish_op("discretize_b", tb, [tb, delta, b, R, E, N]() mutable {
    auto go = tb.grad();
    auto dd = delta.data();
    auto bd = b.data();
    std::span<double> gd, gb;
    if (delta.requires_grad()) gd = delta.grad_mut();
    if (b.requires_grad()) gb = b.grad_mut();
    for (Index r = 0; r < R; ++r)
      for (Index e = 0; e < E; ++e) {
        const Index off = (r * E + e) * N;
        double acc = 0.0;
        for (Index n = 0; n < N; ++n) {
          acc += go[off + n] * bd[r * N + n];
          if (!gb.empty()) gb[r * N + n] += go[off + n] * dd[r * E + e];
        }
        if (!gd.empty()) gd[r * E + e] += acc;
      }
  });
  return {ta, tb};
}

Tensor selective_scan(const Tensor& u, const Tensor& abar, const Tensor& bbar, const Tensor& c,
                      const Tensor& d_skip) {
  const ScanGeom g = scan_geom(u, abar, bbar, c, d_skip);
  const Index B = g.B, L = g.L, E = g.E, N = g.N;
  auto ud = u.data();
  auto ad = abar.data();
  auto bd = bbar.data();
  auto cd = c.data();
  auto dsk = d_skip.data();
  std::vector<double> y(ud.size());
  // States for every step are kept for the backward pass.
  std::vector<double> hs(static_cast<std::size_t>(B * L * E * N));
  for (Index b = 0; b < B; ++b) {
    for (Index l = 0; l < L; ++l) {
      const Index row = b * L + l;
      const double* cr = cd.data() + row * N;
      for (Index e = 0; e < E; ++e) {
        const Index off = (row * E + e) * N;
        const double* hp = l > 0 ? hs.data() + off - E * N : nullptr;
        double* h = hs.data() + off;
        const double uk = ud[row * E + e];
        double acc = 0.0;
        for (Index n = 0; n < N; ++n) {
          const double prev = hp ? hp[n] : 0.0;
          h[n] = ad[off + n] * prev + bd[off + n] * uk;
          acc += cr[n] * h[n];
        }
        y[row * E + e] = acc + dsk[e] * uk;
      }
    }
  }
  Tensor res = make_result(u.shape(), std::move(y), {&u, &abar, &bbar, &c, &d_skip});
  finish_op("selective_scan", res, [res, u, abar, bbar, c, d_skip, hs = std::move(hs), B, L, E, N]() mutable {
    auto go = res.grad();
    auto ud = u.data();
    auto ad = abar.data();
    auto bd = bbar.data();
    auto cd = c.data();
    auto dsk = d_skip.data();
    std::span<double> gu, ga, gbb, gc, gdk;
    if (u.requires_grad()) gu = u.grad_mut();
    if (abar.requires_grad()) ga = abar.grad_mut();
    if (bbar.requires_grad()) gbb = bbar.grad_mut();
    if (c.requires_grad()) gc = c.grad_mut();
    if (d_skip.requires_grad()) gdk = d_skip.grad_mut();
    std::vector<double> carry(static_cast<std::size_t>(E * N));
    for (Index b = 0; b < B; ++b) {
      std::fill(carry.begin(), carry.end(), 0.0);
      for (Index l = L; l-- > 0;) {
        const Index row = b * L + l;
        const double* cr = cd.data() + row * N;
        for (Index e = 0; e < E; ++e) {
          const Index off = (row * E + e) * N;
          const double gy = go[row * E + e];
          const double uk = ud[row * E + e];
          const double* h = hs.data() + off;
          const double* hp = l > 0 ? h - E * N : nullptr;
          double* cy = carry.data() + e * N;
          double du = gy * dsk[e];
          for (Index n = 0; n < N; ++n) {
            const double dh = gy * cr[n] + cy[n];
            if (!gc.empty()) gc[row * N + n] += gy * h[n];
            if (!ga.empty() && hp) ga[off + n] += dh * hp[n];
            if (!gbb.empty()) gbb[off + n] += dh * uk;
            du += dh * bd[off + n];
            cy[n] = dh * ad[off + n];
          }
          if (!gu.empty()) gu[row * E + e] += du;
          if (!gdk.empty()) gdk[e] += gy * uk;
        }
      }
    }
  });
  return res;
}

Tensor naive_scan_oracle(const Tensor& u, const Tensor& abar, const Tensor& bbar, const Tensor& c,
                         const Tensor& d_skip) {
  const ScanGeom g = scan_geom(u, abar, bbar, c, d_skip);
  Tensor y = Tensor::zeros(u.shape());
  auto yd = y.mutable_data();
  for (Index b = 0; b < g.B; ++b) {
    for (Index e = 0; e < g.E; ++e) {
      std::vector<double> h(static_cast<std::size_t>(g.N), 0.0);
      for (Index k = 0; k < g.L; ++k) {
        const Index row = b * g.L + k;
        const double x = u.at(row * g.E + e);
        double out = d_skip.at(e) * x;
        for (Index n = 0; n < g.N; ++n) {
          const Index at = (row * g.E + e) * g.N + n;
          h[n] = abar.at(at) * h[n] + bbar.at(at) * x;
        }
        for (Index n = 0; n < g.N; ++n) out += c.at(row * g.N + n) * h[n];
        yd[row * g.E + e] = out;
      }
    }
  }
  return y;
}

Tensor mamba_block(const Tensor& x, const MambaBlockParams& p, const ScanPath& path) {
  if (x.rank() < 2 || x.dim(-2) != path.length()) {
    throw ShapeError("mamba_block: sequence " + shape_str(x.shape()) + " does not match scan path of length " +
                     std::to_string(path.length()));
  }
  const Index E = p.w_in.dim(1) / 2;
  Tensor seq = apply_scan(x, path);
  auto parts = split(linear(seq, p.w_in), {E, E});
  Tensor u = parts[0];
  const Tensor& gate = parts[1];
  if (p.conv_w.defined()) u = causal_depthwise_conv(u, p.conv_w, p.conv_b);
  u = silu(u);
  Tensor delta = softplus(linear(u, p.ssm.w_delta, p.ssm.delta_bias));
  Tensor bmat = linear(u, p.ssm.w_b);
  Tensor cmat = linear(u, p.ssm.w_c);
  Tensor a = scale(exp(p.ssm.a_log), -1.0);
  auto [abar, bbar] = discretize(delta, bmat, a);
  Tensor y = selective_scan(u, abar, bbar, cmat, p.ssm.d_skip);
  y = mul(y, silu(gate));
  return inverse_scan(linear(y, p.w_out), path);
}

}  // namespace usm
