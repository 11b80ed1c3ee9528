#include "usm/dataset.hpp"

#include <stdexcept>

namespace usm::data {

std::string kind_name(Kind k) {
  switch (k) {
    case Kind::kGaussMix:
      return "gauss-mix";
    case Kind::kCheckerboard:
      return "checkerboard";
    case Kind::kClassConditional:
      return "class-conditional";
  }
  return "?";
}

Kind parse_kind(const std::string& s) {
  if (s == "gauss-mix") return Kind::kGaussMix;
  if (s == "checkerboard") return Kind::kCheckerboard;
  if (s == "class-conditional") return Kind::kClassConditional;
  throw FormatError("unknown dataset kind '" + s + "'");
}

void DatasetSpec::validate() const {
  auto fail = [](const std::string& why) { throw std::invalid_argument("dataset: " + why); };
  if (channels < 1 || height < 1 || width < 1) fail("grid dims must be positive");
  if (kind == Kind::kCheckerboard) {
    if (period < 1) fail("period must be >= 1");
    if (noise < 0.0) fail("noise must be >= 0");
  } else {
    if (components < 1) fail("components must be >= 1");
    if (sigma < 0.0) fail("sigma must be >= 0");
  }
}

void DatasetSpec::write(KeyValue& kv) const {
  kv.set("data.kind", kind_name(kind));
  kv.set("data.channels", channels);
  kv.set("data.height", height);
  kv.set("data.width", width);
  kv.set("data.components", components);
  kv.set("data.separation", separation);
  kv.set("data.sigma", sigma);
  kv.set("data.pattern_seed", static_cast<std::int64_t>(pattern_seed));
  kv.set("data.period", period);
  kv.set("data.noise", noise);
}

DatasetSpec DatasetSpec::read(const KeyValue& kv) {
  DatasetSpec s;
  s.kind = parse_kind(kv.get_or("data.kind", kind_name(s.kind)));
  s.channels = kv.get_int("data.channels", s.channels);
  s.height = kv.get_int("data.height", s.height);
  s.width = kv.get_int("data.width", s.width);
  s.components = kv.get_int("data.components", s.components);
  s.separation = kv.get_double("data.separation", s.separation);
  s.sigma = kv.get_double("data.sigma", s.sigma);
  s.pattern_seed = static_cast<std::uint64_t>(kv.get_int("data.pattern_seed", static_cast<std::int64_t>(s.pattern_seed)));
  s.period = kv.get_int("data.period", s.period);
  s.noise = kv.get_double("data.noise", s.noise);
  return s;
}

Tensor component_means(const DatasetSpec& spec) {
  spec.validate();
  Rng pattern(spec.pattern_seed);
  Tensor m = Tensor::zeros({spec.components, spec.channels, spec.height, spec.width});
  for (double& v : m.mutable_data()) v = spec.separation * (pattern.uniform() < 0.5 ? -1.0 : 1.0);
  return m;
}

Batch dataset_sample(const DatasetSpec& spec, std::int64_t n, Rng& rng) {
  spec.validate();
  if (n < 1) throw std::invalid_argument("dataset_sample: n must be >= 1");
  const std::int64_t dims = spec.dims();
  Batch b;
  b.x = Tensor::zeros({n, spec.channels, spec.height, spec.width});
  auto xs = b.x.mutable_data();
  if (spec.kind == Kind::kCheckerboard) {
    for (std::int64_t i = 0; i < n; ++i) {
      const std::int64_t flip = rng.below(2);
      const double sign = flip ? -1.0 : 1.0;
      b.labels.push_back(flip);
      for (std::int64_t c = 0; c < spec.channels; ++c)
        for (std::int64_t y = 0; y < spec.height; ++y)
          for (std::int64_t x = 0; x < spec.width; ++x) {
            const double cell = ((y / spec.period + x / spec.period) % 2 == 0) ? 1.0 : -1.0;
            const double eps = spec.noise > 0.0 ? spec.noise * rng.normal() : 0.0;
            xs[((i * spec.channels + c) * spec.height + y) * spec.width + x] = sign * cell + eps;
          }
    }
    return b;
  }
  Tensor means = component_means(spec);
  auto ms = means.data();
  for (std::int64_t i = 0; i < n; ++i) {
    const std::int64_t k = rng.below(spec.components);
    b.labels.push_back(k);
    for (std::int64_t d = 0; d < dims; ++d) xs[i * dims + d] = ms[k * dims + d] + spec.sigma * rng.normal();
  }
  return b;
}

}  // namespace usm::data
