#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "usm/model.hpp"
#include "usm/optim.hpp"
#include "usm/rng.hpp"

// Rectified-flow objective and Euler sampler. Time runs from noise (t = 0)
// to data (t = 1); the velocity target is x - eps.
namespace usm::flow {

inline constexpr double kTimeClamp = 1e-4;

// t * x + (1 - t) * eps; t outside [0, 1] throws std::domain_error.
Tensor interpolate(const Tensor& x, const Tensor& eps, double t);
// Per-item times for x[B, ...].
Tensor interpolate(const Tensor& x, const Tensor& eps, std::span<const double> t);

// Logit-normal(0, 1) density. Throws std::domain_error unless 0 < t < 1.
double logit_normal_weight(double t);

// (1/B) sum_i w_i * mean((v_hat_i - v_i)^2), differentiable in v_hat.
Tensor fm_loss(const Tensor& v_hat, const Tensor& v, std::span<const double> w);

struct FlowBatch {
  Tensor x, eps, z, v;
  std::vector<double> t, w;
};

// Draws eps ~ N(0, I) and t ~ U(0, 1) clamped to [kTimeClamp, 1 - kTimeClamp].
FlowBatch make_batch(const Tensor& x, Rng& rng);

struct StepStats {
  std::int64_t step = 0;
  double loss = 0.0;           // unweighted mean squared error
  double weighted_loss = 0.0;  // the optimized objective
  double grad_norm = 0.0;
  double lr = 0.0;
};

// Owns the optimizer over a parameter set. A non-finite loss or gradient
// throws NumericError naming the step and the sampled times.
class Trainer {
 public:
  Trainer(const UsmParams& params, const ModelConfig& cfg, std::unique_ptr<Optimizer> opt);

  // One update on data x[B, c, h, w]. ctx follows usm_forward; when it is
  // undefined and labels are given, the class context is built on the tape
  // so the embedding table trains too.
  StepStats step(const Tensor& x, Rng& rng, const Tensor& ctx = Tensor(), std::span<const std::int64_t> labels = {});

  std::int64_t steps_done() const { return steps_; }
  Optimizer& optimizer() { return *opt_; }

 private:
  const UsmParams& params_;
  ModelConfig cfg_;
  std::unique_ptr<Optimizer> opt_;
  std::int64_t steps_ = 0;
};

// v(z, t) for a batch z[B, ...] sharing one time t.
using VelocityField = std::function<Tensor(const Tensor& z, double t)>;
// Called once per field evaluation with the step index (1-based) and t.
using EvalHook = std::function<void(int step, double t)>;

// z <- eps; for i = 1..T: z <- z + dt * v(z, (i - 1) dt). T < 1 throws.
Tensor euler_sample(const VelocityField& field, const Tensor& eps, int steps, const EvalHook& hook = {});

VelocityField model_field(const UsmParams& params, const ModelConfig& cfg, const Tensor& ctx = Tensor());

// Draws n noise grids and integrates the model field without recording.
Tensor sample(const UsmParams& params, const ModelConfig& cfg, std::int64_t n, int steps, Rng& rng,
              const Tensor& ctx = Tensor());

}  // namespace usm::flow
