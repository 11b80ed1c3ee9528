#include "usm/ops.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

#include "usm/autograd.hpp"

namespace usm {

namespace {

using Index = std::int64_t;

[[noreturn]] void shape_fail(const std::string& op, const Shape& a, const Shape& b,
                             const std::string& why = "") {
  throw ShapeError(op + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b) +
                   (why.empty() ? "" : " (" + why + ")"));
}


// Leading row count for an op acting on the trailing `tail` dims.
Index rows_before(const Shape& s, std::size_t tail) {
  Index r = 1;
  for (std::size_t i = 0; i + tail < s.size(); ++i) r *= s[i];
  return r;
}

double sigmoid_scalar(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

double softplus_scalar(double x) {
  if (x > 30.0) return x;
  return std::log1p(std::exp(x));
}

// ---- broadcasting ---------------------------------------------------------

struct Broadcast {
  Shape out;
  std::vector<Index> sa, sb;  // per-out-dim strides into a and b (0 on broadcast dims)
  bool same = false;
};

Broadcast plan_broadcast(const std::string& op, const Shape& a, const Shape& b) {
  Broadcast p;
  if (a == b) {
    p.out = a;
    p.same = true;
    return p;
  }
  const std::size_t r = std::max(a.size(), b.size());
  p.out.assign(r, 1);
  p.sa.assign(r, 0);
  p.sb.assign(r, 0);
  Index stride_a = 1, stride_b = 1;
  for (std::size_t k = 0; k < r; ++k) {
    const std::size_t i = r - 1 - k;
    const Index da = k < a.size() ? a[a.size() - 1 - k] : 1;
    const Index db = k < b.size() ? b[b.size() - 1 - k] : 1;
    if (da != db && da != 1 && db != 1) shape_fail(op, a, b, "not broadcastable");
    p.out[i] = std::max(da, db);
    p.sa[i] = da == 1 ? 0 : stride_a;
    p.sb[i] = db == 1 ? 0 : stride_b;
    stride_a *= da;
    stride_b *= db;
  }
  return p;
}

template <class F>
void for_each_broadcast(const Broadcast& p, F&& fn) {
  const Index n = shape_numel(p.out);
  if (p.same) {
    for (Index i = 0; i < n; ++i) fn(i, i, i);
    return;
  }
  const std::size_t r = p.out.size();
  std::vector<Index> idx(r, 0);
  Index ia = 0, ib = 0;
  for (Index i = 0; i < n; ++i) {
    fn(i, ia, ib);
    for (std::size_t k = r; k-- > 0;) {
      ++idx[k];
      ia += p.sa[k];
      ib += p.sb[k];
      if (idx[k] < p.out[k]) break;
      ia -= p.sa[k] * p.out[k];
      ib -= p.sb[k] * p.out[k];
      idx[k] = 0;
    }
  }
}

enum class BinOp { kAdd, kSub, kMul };

Tensor binary(const char* name, BinOp kind, const Tensor& a, const Tensor& b) {
  Broadcast p = plan_broadcast(name, a.shape(), b.shape());
  std::vector<double> out(static_cast<std::size_t>(shape_numel(p.out)));
  auto ad = a.data();
  auto bd = b.data();
  for_each_broadcast(p, [&](Index i, Index ia, Index ib) {
    const double x = ad[ia], y = bd[ib];
    out[i] = kind == BinOp::kAdd ? x + y : kind == BinOp::kSub ? x - y : x * y;
  });
  Tensor res = make_result(p.out, std::move(out), {&a, &b});
  finish_op(name, res, [res, a, b, p, kind]() mutable {
    auto go = res.grad();
    const bool need_a = a.requires_grad(), need_b = b.requires_grad();
    std::span<double> ga, gb;
    if (need_a) ga = a.grad_mut();
    if (need_b) gb = b.grad_mut();
    auto ad = a.data();
    auto bd = b.data();
    for_each_broadcast(p, [&](Index i, Index ia, Index ib) {
      const double g = go[i];
      switch (kind) {
        case BinOp::kAdd:
          if (need_a) ga[ia] += g;
          if (need_b) gb[ib] += g;
          break;
        case BinOp::kSub:
          if (need_a) ga[ia] += g;
          if (need_b) gb[ib] -= g;
          break;
        case BinOp::kMul:
          if (need_a) ga[ia] += g * bd[ib];
          if (need_b) gb[ib] += g * ad[ia];
          break;
      }
    });
  });
  return res;
}

// ---- elementwise unary ----------------------------------------------------

template <class Fwd, class Deriv>
Tensor unary(const char* name, const Tensor& x, Fwd fwd, Deriv deriv) {
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) out[i] = fwd(xd[i]);
  Tensor res = make_result(x.shape(), std::move(out), {&x});
  finish_op(name, res, [res, x, deriv]() mutable {
    auto go = res.grad();
    auto gx = x.grad_mut();
    auto xd = x.data();
    auto yd = res.data();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * deriv(xd[i], yd[i]);
  });
  return res;
}

Tensor index_rows(const char* name, const Tensor& x, std::span<const Index> index) {
  if (x.rank() < 2) throw ShapeError(std::string(name) + ": needs rank >= 2, got " + shape_str(x.shape()));
  const Index L = x.dim(-2), D = x.dim(-1);
  const Index B = rows_before(x.shape(), 2);
  const Index Lo = static_cast<Index>(index.size());
  if (Lo == 0) throw ShapeError(std::string(name) + ": empty index list");
  for (Index v : index) {
    if (v < 0 || v >= L) throw ShapeError(std::string(name) + ": row index " + std::to_string(v) + " out of range for " + shape_str(x.shape()));
  }
  Shape os = x.shape();
  os[os.size() - 2] = Lo;
  std::vector<double> out(static_cast<std::size_t>(B * Lo * D));
  auto xd = x.data();
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < Lo; ++i)
      std::copy_n(xd.begin() + (b * L + index[i]) * D, D, out.begin() + (b * Lo + i) * D);
  std::vector<Index> idx(index.begin(), index.end());
  Tensor res = make_result(os, std::move(out), {&x});
  finish_op(name, res, [res, x, idx, B, L, Lo, D]() mutable {
    auto go = res.grad();
    auto gx = x.grad_mut();
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < Lo; ++i) {
        const double* src = go.data() + (b * Lo + i) * D;
        double* dst = gx.data() + (b * L + idx[i]) * D;
        for (Index d = 0; d < D; ++d) dst[d] += src[d];
      }
  });
  return res;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary("add", BinOp::kAdd, a, b); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary("sub", BinOp::kSub, a, b); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary("mul", BinOp::kMul, a, b); }

Tensor add_scalar(const Tensor& a, double s) {
  return unary("add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Tensor scale(const Tensor& a, double s) {
  return unary("scale", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}

Tensor exp(const Tensor& x) {
  return unary("exp", x, [](double v) { return std::exp(v); }, [](double, double y) { return y; });
}

Tensor softplus(const Tensor& x) {
  return unary("softplus", x, softplus_scalar, [](double v, double) { return sigmoid_scalar(v); });
}

Tensor silu(const Tensor& x) {
  return unary(
      "silu", x, [](double v) { return v * sigmoid_scalar(v); },
      [](double v, double) {
        const double s = sigmoid_scalar(v);
        return s * (1.0 + v * (1.0 - s));
      });
}

Tensor sigmoid(const Tensor& x) {
  return unary("sigmoid", x, sigmoid_scalar, [](double, double y) { return y * (1.0 - y); });
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (w.rank() != 2 || x.rank() < 1 || x.dim(-1) != w.dim(0)) shape_fail("linear", x.shape(), w.shape());
  const Index K = w.dim(0), N = w.dim(1);
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != N)) shape_fail("linear(bias)", w.shape(), bias.shape());
  const Index R = x.numel() / K;
  Shape os = x.shape();
  os.back() = N;
  std::vector<double> out(static_cast<std::size_t>(R * N), 0.0);
  auto xd = x.data();
  auto wd = w.data();
  for (Index r = 0; r < R; ++r) {
    double* o = out.data() + r * N;
    if (bias.defined()) std::copy_n(bias.data().begin(), N, o);
    const double* xr = xd.data() + r * K;
    for (Index k = 0; k < K; ++k) {
      const double a = xr[k];
      const double* wr = wd.data() + k * N;
      for (Index n = 0; n < N; ++n) o[n] += a * wr[n];
    }
  }
  Tensor res = make_result(os, std::move(out), {&x, &w, &bias});
  finish_op(bias.defined() ? "linear" : "matmul", res, [res, x, w, bias, R, K, N]() mutable {
    auto go = res.grad();
    auto xd = x.data();
    auto wd = w.data();
    if (x.requires_grad()) {
      auto gx = x.grad_mut();
      for (Index r = 0; r < R; ++r) {
        const double* g = go.data() + r * N;
        double* dst = gx.data() + r * K;
        for (Index k = 0; k < K; ++k) {
          const double* wr = wd.data() + k * N;
          double acc = 0.0;
          for (Index n = 0; n < N; ++n) acc += g[n] * wr[n];
          dst[k] += acc;
        }
      }
    }
    if (w.requires_grad()) {
      auto gw = w.grad_mut();
      for (Index r = 0; r < R; ++r) {
        const double* g = go.data() + r * N;
        const double* xr = xd.data() + r * K;
        for (Index k = 0; k < K; ++k) {
          const double a = xr[k];
          double* dst = gw.data() + k * N;
          for (Index n = 0; n < N; ++n) dst[n] += a * g[n];
        }
      }
    }
    if (bias.defined() && bias.requires_grad()) {
      auto gb = bias.grad_mut();
      for (Index r = 0; r < R; ++r)
        for (Index n = 0; n < N; ++n) gb[n] += go[r * N + n];
    }
  });
  return res;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() != 2) shape_fail("matmul", a.shape(), b.shape());
  return linear(a, b);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  const Index D = x.dim(-1);
  const Index R = x.numel() / D;
  if (gain.defined() && gain.numel() != D) shape_fail("layer_norm(gain)", x.shape(), gain.shape());
  if (bias.defined() && bias.numel() != D) shape_fail("layer_norm(bias)", x.shape(), bias.shape());
  auto xd = x.data();
  std::vector<double> out(xd.size()), xhat(xd.size()), rstd(static_cast<std::size_t>(R));
  for (Index r = 0; r < R; ++r) {
    const double* xr = xd.data() + r * D;
    double mu = 0.0;
    for (Index d = 0; d < D; ++d) mu += xr[d];
    mu /= static_cast<double>(D);
    double var = 0.0;
    for (Index d = 0; d < D; ++d) var += (xr[d] - mu) * (xr[d] - mu);
    var /= static_cast<double>(D);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (Index d = 0; d < D; ++d) {
      const double h = (xr[d] - mu) * rs;
      xhat[r * D + d] = h;
      double y = h;
      if (gain.defined()) y *= gain.data()[d];
      if (bias.defined()) y += bias.data()[d];
      out[r * D + d] = y;
    }
  }
  Tensor res = make_result(x.shape(), std::move(out), {&x, &gain, &bias});
  finish_op("layer_norm", res, [res, x, gain, bias, xhat = std::move(xhat), rstd = std::move(rstd), R, D]() mutable {
    auto go = res.grad();
    if (gain.defined() && gain.requires_grad()) {
      auto gg = gain.grad_mut();
      for (Index r = 0; r < R; ++r)
        for (Index d = 0; d < D; ++d) gg[d] += go[r * D + d] * xhat[r * D + d];
    }
    if (bias.defined() && bias.requires_grad()) {
      auto gb = bias.grad_mut();
      for (Index r = 0; r < R; ++r)
        for (Index d = 0; d < D; ++d) gb[d] += go[r * D + d];
    }
    if (!x.requires_grad()) return;
    auto gx = x.grad_mut();
    std::vector<double> dh(static_cast<std::size_t>(D));
    for (Index r = 0; r < R; ++r) {
      double m1 = 0.0, m2 = 0.0;
      for (Index d = 0; d < D; ++d) {
        dh[d] = go[r * D + d] * (gain.defined() ? gain.data()[d] : 1.0);
        m1 += dh[d];
        m2 += dh[d] * xhat[r * D + d];
      }
      m1 /= static_cast<double>(D);
      m2 /= static_cast<double>(D);
      for (Index d = 0; d < D; ++d) gx[r * D + d] += rstd[r] * (dh[d] - m1 - xhat[r * D + d] * m2);
    }
  });
  return res;
}

Tensor softmax(const Tensor& x) {
  const Index D = x.dim(-1);
  const Index R = x.numel() / D;
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (Index r = 0; r < R; ++r) {
    const double* xr = xd.data() + r * D;
    double* o = out.data() + r * D;
    const double mx = *std::max_element(xr, xr + D);
    double s = 0.0;
    for (Index d = 0; d < D; ++d) s += (o[d] = std::exp(xr[d] - mx));
    for (Index d = 0; d < D; ++d) o[d] /= s;
  }
  Tensor res = make_result(x.shape(), std::move(out), {&x});
  finish_op("softmax", res, [res, x, R, D]() mutable {
    auto go = res.grad();
    auto y = res.data();
    auto gx = x.grad_mut();
    for (Index r = 0; r < R; ++r) {
      double dot = 0.0;
      for (Index d = 0; d < D; ++d) dot += go[r * D + d] * y[r * D + d];
      for (Index d = 0; d < D; ++d) gx[r * D + d] += y[r * D + d] * (go[r * D + d] - dot);
    }
  });
  return res;
}

Tensor concat(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  const Index R = parts[0].numel() / s0.back();
  std::vector<Index> widths;
  Index total = 0;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size() || !std::equal(s.begin(), s.end() - 1, s0.begin())) shape_fail("concat", s0, s);
    widths.push_back(s.back());
    total += s.back();
  }
  Shape os = s0;
  os.back() = total;
  std::vector<double> out(static_cast<std::size_t>(R * total));
  Index off = 0;
  for (std::size_t p = 0; p < parts.size(); ++p) {
    auto pd = parts[p].data();
    for (Index r = 0; r < R; ++r) std::copy_n(pd.begin() + r * widths[p], widths[p], out.begin() + r * total + off);
    off += widths[p];
  }
  std::vector<const Tensor*> ptrs;
  for (const auto& p : parts) ptrs.push_back(&p);
  Tensor res = make_result(os, std::move(out), ptrs);
  finish_op("concat", res, [res, parts, widths, R, total]() mutable {
    auto go = res.grad();
    Index off = 0;
    for (std::size_t p = 0; p < parts.size(); ++p) {
      if (parts[p].requires_grad()) {
        auto gp = parts[p].grad_mut();
        for (Index r = 0; r < R; ++r)
          for (Index d = 0; d < widths[p]; ++d) gp[r * widths[p] + d] += go[r * total + off + d];
      }
      off += widths[p];
    }
  });
  return res;
}

std::vector<Tensor> split(const Tensor& x, const std::vector<std::int64_t>& sizes) {
  const Index D = x.dim(-1);
  const Index sum_sizes = std::accumulate(sizes.begin(), sizes.end(), Index{0});
  if (sum_sizes != D) throw ShapeError("split: sizes sum to " + std::to_string(sum_sizes) + " but last dim of " + shape_str(x.shape()) + " is " + std::to_string(D));
  const Index R = x.numel() / D;
  std::vector<Tensor> outs;
  Index off = 0;
  auto xd = x.data();
  for (Index w : sizes) {
    Shape os = x.shape();
    os.back() = w;
    std::vector<double> out(static_cast<std::size_t>(R * w));
    for (Index r = 0; r < R; ++r) std::copy_n(xd.begin() + r * D + off, w, out.begin() + r * w);
    Tensor res = make_result(os, std::move(out), {&x});
    finish_op("split", res, [res, x, R, D, off, w]() mutable {
      auto go = res.grad();
      auto gx = x.grad_mut();
      for (Index r = 0; r < R; ++r)
        for (Index d = 0; d < w; ++d) gx[r * D + off + d] += go[r * w + d];
    });
    outs.push_back(res);
    off += w;
  }
  return outs;
}

Tensor permute_rows(const Tensor& x, std::span<const std::int64_t> index) {
  if (x.rank() >= 2 && static_cast<Index>(index.size()) != x.dim(-2)) {
    throw ShapeError("permute_rows: index of length " + std::to_string(index.size()) +
                     " for sequence of shape " + shape_str(x.shape()));
  }
  return index_rows("permute_rows", x, index);
}

Tensor gather_rows(const Tensor& table, std::span<const std::int64_t> index) {
  return index_rows("gather_rows", table, index);
}

Tensor reshape(const Tensor& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) shape_fail("reshape", x.shape(), shape);
  Tensor res = make_result(shape, std::vector<double>(x.data().begin(), x.data().end()), {&x});
  finish_op("reshape", res, [res, x]() mutable {
    auto go = res.grad();
    auto gx = x.grad_mut();
    for (std::size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
  });
  return res;
}

Tensor transpose(const Tensor& x) {
  if (x.rank() < 2) throw ShapeError("transpose: needs rank >= 2, got " + shape_str(x.shape()));
  const Index M = x.dim(-2), N = x.dim(-1);
  const Index B = rows_before(x.shape(), 2);
  Shape os = x.shape();
  std::swap(os[os.size() - 1], os[os.size() - 2]);
  auto xd = x.data();
  std::vector<double> out(xd.size());
  for (Index b = 0; b < B; ++b)
    for (Index i = 0; i < M; ++i)
      for (Index j = 0; j < N; ++j) out[b * M * N + j * M + i] = xd[b * M * N + i * N + j];
  Tensor res = make_result(os, std::move(out), {&x});
  finish_op("transpose", res, [res, x, B, M, N]() mutable {
    auto go = res.grad();
    auto gx = x.grad_mut();
    for (Index b = 0; b < B; ++b)
      for (Index i = 0; i < M; ++i)
        for (Index j = 0; j < N; ++j) gx[b * M * N + i * N + j] += go[b * M * N + j * M + i];
  });
  return res;
}

Tensor sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor res = make_result({1}, {s}, {&x});
  finish_op("sum", res, [res, x]() mutable {
    const double g = res.grad()[0];
    for (double& v : x.grad_mut()) v += g;
  });
  return res;
}

Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

Tensor mean_last(const Tensor& x) {
  const Index K = x.dim(-1);
  const Index R = x.numel() / K;
  Shape os(x.shape().begin(), x.shape().end() - 1);
  if (os.empty()) os = {1};
  auto xd = x.data();
  std::vector<double> out(static_cast<std::size_t>(R));
  for (Index r = 0; r < R; ++r) {
    double s = 0.0;
    for (Index k = 0; k < K; ++k) s += xd[r * K + k];
    out[r] = s / static_cast<double>(K);
  }
  Tensor res = make_result(os, std::move(out), {&x});
  finish_op("mean_last", res, [res, x, R, K]() mutable {
    auto go = res.grad();
    auto gx = x.grad_mut();
    const double inv = 1.0 / static_cast<double>(K);
    for (Index r = 0; r < R; ++r)
      for (Index k = 0; k < K; ++k) gx[r * K + k] += go[r] * inv;
  });
  return res;
}

namespace {

struct ConvGeom {
  Index B, h, w, Din, Dout;
};

ConvGeom conv_geom(const char* op, const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  if (x.rank() < 3) throw ShapeError(std::string(op) + ": input must be [..., h, w, D], got " + shape_str(x.shape()));
  if (kernel.rank() != 4 || kernel.dim(0) != 2 || kernel.dim(1) != 2 || kernel.dim(2) != x.dim(-1)) shape_fail(op, x.shape(), kernel.shape());
  if (bias.rank() != 1 || bias.dim(0) != kernel.dim(3)) shape_fail(op, kernel.shape(), bias.shape());
  return {rows_before(x.shape(), 3), x.dim(-3), x.dim(-2), x.dim(-1), kernel.dim(3)};
}

}  // namespace

Tensor conv_down(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const ConvGeom g = conv_geom("conv_down", x, kernel, bias);
  if (g.h % 2 != 0 || g.w % 2 != 0) {
    throw ShapeError("conv_down: spatial dims must be even, got " + shape_str(x.shape()));
  }
  const Index ho = g.h / 2, wo = g.w / 2;
  Shape os = x.shape();
  os[os.size() - 3] = ho;
  os[os.size() - 2] = wo;
  os.back() = g.Dout;
  std::vector<double> out(static_cast<std::size_t>(g.B * ho * wo * g.Dout));
  auto xd = x.data();
  auto kd = kernel.data();
  auto bd = bias.data();
  for (Index b = 0; b < g.B; ++b)
    for (Index i = 0; i < ho; ++i)
      for (Index j = 0; j < wo; ++j) {
        double* o = out.data() + ((b * ho + i) * wo + j) * g.Dout;
        std::copy_n(bd.begin(), g.Dout, o);
        for (Index di = 0; di < 2; ++di)
          for (Index dj = 0; dj < 2; ++dj) {
            const double* xr = xd.data() + ((b * g.h + 2 * i + di) * g.w + 2 * j + dj) * g.Din;
            const double* kr = kd.data() + (di * 2 + dj) * g.Din * g.Dout;
            for (Index c = 0; c < g.Din; ++c) {
              const double a = xr[c];
              const double* kc = kr + c * g.Dout;
              for (Index o2 = 0; o2 < g.Dout; ++o2) o[o2] += a * kc[o2];
            }
          }
      }
  Tensor res = make_result(os, std::move(out), {&x, &kernel, &bias});
  finish_op("conv_down", res, [res, x, kernel, bias, g, ho, wo]() mutable {
    auto go = res.grad();
    auto xd = x.data();
    auto kd = kernel.data();
    std::span<double> gx, gk, gb;
    if (x.requires_grad()) gx = x.grad_mut();
    if (kernel.requires_grad()) gk = kernel.grad_mut();
    if (bias.requires_grad()) gb = bias.grad_mut();
    for (Index b = 0; b < g.B; ++b)
      for (Index i = 0; i < ho; ++i)
        for (Index j = 0; j < wo; ++j) {
          const double* gr = go.data() + ((b * ho + i) * wo + j) * g.Dout;
          if (!gb.empty())
            for (Index o2 = 0; o2 < g.Dout; ++o2) gb[o2] += gr[o2];
          for (Index di = 0; di < 2; ++di)
            for (Index dj = 0; dj < 2; ++dj) {
              const Index xoff = ((b * g.h + 2 * i + di) * g.w + 2 * j + dj) * g.Din;
              const Index koff = (di * 2 + dj) * g.Din * g.Dout;
              for (Index c = 0; c < g.Din; ++c) {
                const double* kc = kd.data() + koff + c * g.Dout;
                if (!gx.empty()) {
                  double acc = 0.0;
                  for (Index o2 = 0; o2 < g.Dout; ++o2) acc += gr[o2] * kc[o2];
                  gx[xoff + c] += acc;
                }
                if (!gk.empty()) {
                  const double a = xd[xoff + c];
                  double* gkc = gk.data() + koff + c * g.Dout;
                  for (Index o2 = 0; o2 < g.Dout; ++o2) gkc[o2] += a * gr[o2];
                }
              }
            }
        }
  });
  return res;
}

Tensor conv_up(const Tensor& x, const Tensor& kernel, const Tensor& bias) {
  const ConvGeom g = conv_geom("conv_up", x, kernel, bias);
  const Index ho = g.h * 2, wo = g.w * 2;
  Shape os = x.shape();
  os[os.size() - 3] = ho;
  os[os.size() - 2] = wo;
  os.back() = g.Dout;
  std::vector<double> out(static_cast<std::size_t>(g.B * ho * wo * g.Dout));
  auto xd = x.data();
  auto kd = kernel.data();
  auto bd = bias.data();
  for (Index b = 0; b < g.B; ++b)
    for (Index i = 0; i < g.h; ++i)
      for (Index j = 0; j < g.w; ++j) {
        const double* xr = xd.data() + ((b * g.h + i) * g.w + j) * g.Din;
        for (Index di = 0; di < 2; ++di)
          for (Index dj = 0; dj < 2; ++dj) {
            double* o = out.data() + ((b * ho + 2 * i + di) * wo + 2 * j + dj) * g.Dout;
            std::copy_n(bd.begin(), g.Dout, o);
            const double* kr = kd.data() + (di * 2 + dj) * g.Din * g.Dout;
            for (Index c = 0; c < g.Din; ++c) {
              const double a = xr[c];
              const double* kc = kr + c * g.Dout;
              for (Index o2 = 0; o2 < g.Dout; ++o2) o[o2] += a * kc[o2];
            }
          }
      }
  Tensor res = make_result(os, std::move(out), {&x, &kernel, &bias});
  finish_op("conv_up", res, [res, x, kernel, bias, g, ho, wo]() mutable {
    auto go = res.grad();
    auto xd = x.data();
    auto kd = kernel.data();
    std::span<double> gx, gk, gb;
    if (x.requires_grad()) gx = x.grad_mut();
    if (kernel.requires_grad()) gk = kernel.grad_mut();
    if (bias.requires_grad()) gb = bias.grad_mut();
    for (Index b = 0; b < g.B; ++b)
      for (Index i = 0; i < g.h; ++i)
        for (Index j = 0; j < g.w; ++j) {
          const Index xoff = ((b * g.h + i) * g.w + j) * g.Din;
          for (Index di = 0; di < 2; ++di)
            for (Index dj = 0; dj < 2; ++dj) {
              const double* gr = go.data() + ((b * ho + 2 * i + di) * wo + 2 * j + dj) * g.Dout;
              if (!gb.empty())
                for (Index o2 = 0; o2 < g.Dout; ++o2) gb[o2] += gr[o2];
              const Index koff = (di * 2 + dj) * g.Din * g.Dout;
              for (Index c = 0; c < g.Din; ++c) {
                const double* kc = kd.data() + koff + c * g.Dout;
                if (!gx.empty()) {
                  double acc = 0.0;
                  for (Index o2 = 0; o2 < g.Dout; ++o2) acc += gr[o2] * kc[o2];
                  gx[xoff + c] += acc;
                }
                if (!gk.empty()) {
                  const double a = xd[xoff + c];
                  double* gkc = gk.data() + koff + c * g.Dout;
                  for (Index o2 = 0; o2 < g.Dout; ++o2) gkc[o2] += a * gr[o2];
                }
              }
            }
        }
  });
  return res;
}

Tensor causal_depthwise_conv(const Tensor& x, const Tensor& w, const Tensor& bias) {
  if (x.rank() < 2 || w.rank() != 2 || w.dim(0) != x.dim(-1)) shape_fail("causal_depthwise_conv", x.shape(), w.shape());
  if (bias.rank() != 1 || bias.dim(0) != w.dim(0)) shape_fail("causal_depthwise_conv(bias)", w.shape(), bias.shape());
  const Index L = x.dim(-2), E = x.dim(-1), K = w.dim(1);
  const Index B = rows_before(x.shape(), 2);
  auto xd = x.data();
  auto wd = w.data();
  auto bd = bias.data();
  std::vector<double> out(xd.size());
  for (Index b = 0; b < B; ++b)
    for (Index l = 0; l < L; ++l) {
      double* o = out.data() + (b * L + l) * E;
      std::copy_n(bd.begin(), E, o);
      for (Index j = 0; j < K; ++j) {
        const Index src = l - (K - 1) + j;
        if (src < 0) continue;
        const double* xr = xd.data() + (b * L + src) * E;
        for (Index e = 0; e < E; ++e) o[e] += wd[e * K + j] * xr[e];
      }
    }
  Tensor res = make_result(x.shape(), std::move(out), {&x, &w, &bias});
  finish_op("causal_depthwise_conv", res, [res, x, w, bias, B, L, E, K]() mutable {
    auto go = res.grad();
    auto xd = x.data();
    auto wd = w.data();
    std::span<double> gx, gw, gb;
    if (x.requires_grad()) gx = x.grad_mut();
    if (w.requires_grad()) gw = w.grad_mut();
    if (bias.requires_grad()) gb = bias.grad_mut();
    for (Index b = 0; b < B; ++b)
      for (Index l = 0; l < L; ++l) {
        const double* gr = go.data() + (b * L + l) * E;
        if (!gb.empty())
          for (Index e = 0; e < E; ++e) gb[e] += gr[e];
        for (Index j = 0; j < K; ++j) {
          const Index src = l - (K - 1) + j;
          if (src < 0) continue;
          const Index xoff = (b * L + src) * E;
          for (Index e = 0; e < E; ++e) {
            if (!gx.empty()) gx[xoff + e] += gr[e] * wd[e * K + j];
            if (!gw.empty()) gw[e * K + j] += gr[e] * xd[xoff + e];
          }
        }
      }
  });
  return res;
}

Tensor attention(const Tensor& q, const Tensor& k, const Tensor& v, int heads) {
  if (q.rank() < 2 || k.rank() < 2 || k.shape() != v.shape() || q.dim(-1) != k.dim(-1)) shape_fail("attention", q.shape(), k.shape());
  const Index L = q.dim(-2), D = q.dim(-1), M = k.dim(-2);
  const Index B = rows_before(q.shape(), 2);
  if (rows_before(k.shape(), 2) != B) shape_fail("attention(batch)", q.shape(), k.shape());
  if (heads <= 0 || D % heads != 0) throw ShapeError("attention: hidden size " + std::to_string(D) + " not divisible by " + std::to_string(heads) + " heads");
  const Index dh = D / heads;
  const double s = 1.0 / std::sqrt(static_cast<double>(dh));
  auto qd = q.data();
  auto kd = k.data();
  auto vd = v.data();
  std::vector<double> out(qd.size(), 0.0);
  std::vector<double> probs(static_cast<std::size_t>(B * heads * L * M));
  for (Index b = 0; b < B; ++b)
    for (Index hh = 0; hh < heads; ++hh)
      for (Index l = 0; l < L; ++l) {
        double* p = probs.data() + ((b * heads + hh) * L + l) * M;
        const double* qr = qd.data() + (b * L + l) * D + hh * dh;
        double mx = -INFINITY;
        for (Index m = 0; m < M; ++m) {
          const double* kr = kd.data() + (b * M + m) * D + hh * dh;
          double acc = 0.0;
          for (Index d = 0; d < dh; ++d) acc += qr[d] * kr[d];
          p[m] = acc * s;
          mx = std::max(mx, p[m]);
        }
        double z = 0.0;
        for (Index m = 0; m < M; ++m) z += (p[m] = std::exp(p[m] - mx));
        double* o = out.data() + (b * L + l) * D + hh * dh;
        for (Index m = 0; m < M; ++m) {
          p[m] /= z;
          const double* vr = vd.data() + (b * M + m) * D + hh * dh;
          for (Index d = 0; d < dh; ++d) o[d] += p[m] * vr[d];
        }
      }
  Tensor res = make_result(q.shape(), std::move(out), {&q, &k, &v});
  finish_op("attention", res, [res, q, k, v, probs = std::move(probs), B, L, M, D, heads, dh, s]() mutable {
    auto go = res.grad();
    auto qd = q.data();
    auto kd = k.data();
    auto vd = v.data();
    std::span<double> gq, gk, gv;
    if (q.requires_grad()) gq = q.grad_mut();
    if (k.requires_grad()) gk = k.grad_mut();
    if (v.requires_grad()) gv = v.grad_mut();
    std::vector<double> dp(static_cast<std::size_t>(M));
    for (Index b = 0; b < B; ++b)
      for (Index hh = 0; hh < heads; ++hh)
        for (Index l = 0; l < L; ++l) {
          const double* p = probs.data() + ((b * heads + hh) * L + l) * M;
          const double* gr = go.data() + (b * L + l) * D + hh * dh;
          double dot = 0.0;
          for (Index m = 0; m < M; ++m) {
            const Index voff = (b * M + m) * D + hh * dh;
            double acc = 0.0;
            for (Index d = 0; d < dh; ++d) {
              acc += gr[d] * vd[voff + d];
              if (!gv.empty()) gv[voff + d] += p[m] * gr[d];
            }
            dp[m] = acc;
            dot += acc * p[m];
          }
          const Index qoff = (b * L + l) * D + hh * dh;
          for (Index m = 0; m < M; ++m) {
            const double ds = p[m] * (dp[m] - dot) * s;
            const Index koff = (b * M + m) * D + hh * dh;
            for (Index d = 0; d < dh; ++d) {
              if (!gq.empty()) gq[qoff + d] += ds * kd[koff + d];
              if (!gk.empty()) gk[koff + d] += ds * qd[qoff + d];
            }
          }
        }
  });
  return res;
}

}  // namespace usm
