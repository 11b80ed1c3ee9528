#include "usm/harness.hpp"

#include <chrono>
#include <stdexcept>

#include "usm/autograd.hpp"

namespace usm {

void TrainOptions::write(KeyValue& kv) const {
  kv.set("train.steps", steps);
  kv.set("train.batch", batch);
  kv.set("train.lr", lr);
  kv.set("train.optimizer", optimizer);
}

TrainOptions TrainOptions::read(const KeyValue& kv) {
  TrainOptions o;
  o.steps = kv.get_int("train.steps", o.steps);
  o.batch = kv.get_int("train.batch", o.batch);
  o.lr = kv.get_double("train.lr", o.lr);
  o.optimizer = kv.get_or("train.optimizer", o.optimizer);
  if (o.steps < 0 || o.batch < 1) throw FormatError("train.steps must be >= 0 and train.batch >= 1");
  return o;
}

void write_metrics_row(std::ostream& out, const flow::StepStats& st, double wall_ms) {
  out << st.step << ',' << format_double(st.loss) << ',' << format_double(st.weighted_loss) << ','
      << format_double(st.grad_norm) << ',' << format_double(st.lr) << ',' << format_double(wall_ms) << '\n';
}

SeedStreams::SeedStreams(std::uint64_t seed)
    : init(seed), data(init.fork()), noise(init.fork()), sample(init.fork()) {}

UsmParams train_model(const TrainRun& run, std::ostream* csv,
                      const std::function<bool(const flow::StepStats&)>& on_step) {
  run.data.validate();
  if (run.data.channels != run.model.channels || run.data.height != run.model.height ||
      run.data.width != run.model.width) {
    throw std::invalid_argument("dataset grid does not match the model grid");
  }
  SeedStreams rng(run.seed);
  UsmParams params = init_params(run.model, rng.init);
  flow::Trainer trainer(params, run.model, make_optimizer(run.train.optimizer, params.tensors(), run.train.lr));
  if (csv != nullptr) *csv << kMetricsHeader << '\n';
  for (std::int64_t i = 0; i < run.train.steps; ++i) {
    const auto t0 = std::chrono::steady_clock::now();
    data::Batch batch = data::dataset_sample(run.data, run.train.batch, rng.data);
    const bool conditional = run.model.use_text && run.data.kind == data::Kind::kClassConditional;
    flow::StepStats st =
        trainer.step(batch.x, rng.noise, Tensor(), conditional ? std::span<const std::int64_t>(batch.labels)
                                                               : std::span<const std::int64_t>());
    const double ms =
        run.train.timing ? std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count() : 0.0;
    if (csv != nullptr) write_metrics_row(*csv, st, ms);
    if (on_step && !on_step(st)) break;
  }
  return params;
}

Tensor sample_model(const UsmParams& params, const ModelConfig& cfg, std::int64_t n, int steps, Rng& rng,
                    std::span<const std::int64_t> labels) {
  Tensor ctx;
  if (cfg.use_text) {
    if (static_cast<std::int64_t>(labels.size()) != n) {
      throw std::invalid_argument("sample_model: text-conditioned sampling needs one label per sample");
    }
    NoGradGuard ng;
    ctx = class_context(params, labels);
  }
  return flow::sample(params, cfg, n, steps, rng, ctx);
}

}  // namespace usm
