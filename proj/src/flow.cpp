#include "usm/flow.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "usm/autograd.hpp"
#include "usm/ops.hpp"

namespace usm::flow {

namespace {

void check_time(double t) {
  if (!(t >= 0.0 && t <= 1.0)) throw std::domain_error("interpolate: t must lie in [0, 1], got " + std::to_string(t));
}

void check_same(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) throw ShapeError(std::string(op) + ": " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

}  // namespace

Tensor interpolate(const Tensor& x, const Tensor& eps, double t) {
  check_time(t);
  check_same("interpolate", x, eps);
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto xs = x.data();
  auto es = eps.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = t * xs[i] + (1.0 - t) * es[i];
  return out;
}

Tensor interpolate(const Tensor& x, const Tensor& eps, std::span<const double> t) {
  check_same("interpolate", x, eps);
  const std::int64_t B = x.dim(0);
  if (static_cast<std::int64_t>(t.size()) != B) {
    throw ShapeError("interpolate: " + std::to_string(t.size()) + " times for batch " + shape_str(x.shape()));
  }
  const std::int64_t per = x.numel() / B;
  Tensor out = Tensor::zeros(x.shape());
  auto o = out.mutable_data();
  auto xs = x.data();
  auto es = eps.data();
  for (std::int64_t b = 0; b < B; ++b) {
    check_time(t[b]);
    for (std::int64_t i = b * per; i < (b + 1) * per; ++i) o[i] = t[b] * xs[i] + (1.0 - t[b]) * es[i];
  }
  return out;
}

double logit_normal_weight(double t) {
  if (!(t > 0.0 && t < 1.0)) throw std::domain_error("logit_normal_weight: t must lie in (0, 1), got " + std::to_string(t));
  const double l = std::log(t / (1.0 - t));
  return std::exp(-0.5 * l * l) / (t * (1.0 - t) * std::sqrt(2.0 * std::numbers::pi));
}

Tensor fm_loss(const Tensor& v_hat, const Tensor& v, std::span<const double> w) {
  check_same("fm_loss", v_hat, v);
  const std::int64_t B = v_hat.dim(0);
  if (static_cast<std::int64_t>(w.size()) != B) {
    throw ShapeError("fm_loss: " + std::to_string(w.size()) + " weights for batch " + shape_str(v_hat.shape()));
  }
  Tensor d = sub(v_hat, v);
  Tensor per_item = mean_last(reshape(mul(d, d), {B, v_hat.numel() / B}));
  Tensor wt = Tensor::from({B}, std::vector<double>(w.begin(), w.end()));
  return scale(sum(mul(per_item, wt)), 1.0 / static_cast<double>(B));
}

FlowBatch make_batch(const Tensor& x, Rng& rng) {
  FlowBatch b;
  b.x = x;
  b.eps = rng.normal_tensor(x.shape());
  const std::int64_t B = x.dim(0);
  for (std::int64_t i = 0; i < B; ++i) {
    const double t = std::clamp(rng.uniform(), kTimeClamp, 1.0 - kTimeClamp);
    b.t.push_back(t);
    b.w.push_back(logit_normal_weight(t));
  }
  b.z = interpolate(x, b.eps, b.t);
  b.v = sub(x, b.eps);
  return b;
}

Trainer::Trainer(const UsmParams& params, const ModelConfig& cfg, std::unique_ptr<Optimizer> opt)
    : params_(params), cfg_(cfg), opt_(std::move(opt)) {}

StepStats Trainer::step(const Tensor& x, Rng& rng, const Tensor& ctx, std::span<const std::int64_t> labels) {
  FlowBatch batch = make_batch(x, rng);
  StepStats st;
  st.step = ++steps_;
  st.lr = opt_->lr();
  opt_->zero_grad();
  auto describe = [&](const char* what) {
    std::ostringstream os;
    os << what << " at step " << st.step << ", t = [";
    for (std::size_t i = 0; i < batch.t.size(); ++i) os << (i ? ", " : "") << batch.t[i];
    os << "]";
    return os.str();
  };
  {
    GradTape tape;
    Tensor c = ctx;
    if (!c.defined() && !labels.empty() && cfg_.use_text) c = class_context(params_, labels);
    Tensor v_hat = usm_forward(batch.z, batch.t, c, params_, cfg_);
    Tensor loss = fm_loss(v_hat, batch.v, batch.w);
    st.weighted_loss = loss.item();
    {
      NoGradGuard ng;
      const std::vector<double> ones(batch.t.size(), 1.0);
      st.loss = fm_loss(v_hat, batch.v, ones).item();
    }
    if (!std::isfinite(st.weighted_loss)) throw NumericError(describe("non-finite loss"));
    tape.backward(loss);
  }
  double sq = 0.0;
  for (const Tensor& p : opt_->params()) {
    if (!p.has_grad()) continue;
    for (double g : p.grad()) sq += g * g;
  }
  st.grad_norm = std::sqrt(sq);
  if (!std::isfinite(st.grad_norm)) throw NumericError(describe("non-finite gradient"));
  opt_->step();
  return st;
}

Tensor euler_sample(const VelocityField& field, const Tensor& eps, int steps, const EvalHook& hook) {
  if (steps < 1) throw std::invalid_argument("euler_sample: steps must be >= 1, got " + std::to_string(steps));
  const double dt = 1.0 / static_cast<double>(steps);
  Tensor z = eps.clone();
  for (int i = 1; i <= steps; ++i) {
    const double t = static_cast<double>(i - 1) * dt;
    if (hook) hook(i, t);
    Tensor v = field(z, t);
    check_same("euler_sample", z, v);
    auto zs = z.mutable_data();
    auto vs = v.data();
    for (std::size_t k = 0; k < zs.size(); ++k) zs[k] += dt * vs[k];
  }
  return z;
}

VelocityField model_field(const UsmParams& params, const ModelConfig& cfg, const Tensor& ctx) {
  return [&params, cfg, ctx](const Tensor& z, double t) {
    NoGradGuard ng;
    const std::vector<double> ts(static_cast<std::size_t>(z.rank() == 4 ? z.dim(0) : 1), t);
    return usm_forward(z, ts, ctx, params, cfg);
  };
}

Tensor sample(const UsmParams& params, const ModelConfig& cfg, std::int64_t n, int steps, Rng& rng,
              const Tensor& ctx) {
  Tensor eps = rng.normal_tensor({n, cfg.channels, cfg.height, cfg.width});
  return euler_sample(model_field(params, cfg, ctx), eps, steps);
}

}  // namespace usm::flow
