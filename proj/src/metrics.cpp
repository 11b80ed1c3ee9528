#include "usm/metrics.hpp"

#include <cmath>
#include <stdexcept>
#include <vector>

namespace usm {

namespace {

struct Moments {
  std::vector<double> mean, sd;
};

Moments fit(const Tensor& x) {
  const std::int64_t n = x.dim(0);
  const std::int64_t d = x.numel() / n;
  Moments m{std::vector<double>(d, 0.0), std::vector<double>(d, 0.0)};
  auto xs = x.data();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) m.mean[j] += xs[i * d + j];
  for (auto& v : m.mean) v /= static_cast<double>(n);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j < d; ++j) {
      const double c = xs[i * d + j] - m.mean[j];
      m.sd[j] += c * c;
    }
  for (auto& v : m.sd) v = std::sqrt(v / static_cast<double>(n - 1));
  return m;
}

}  // namespace

double eval_moments(const Tensor& generated, const Tensor& reference) {
  if (generated.rank() < 1 || reference.rank() < 1 || generated.dim(0) < 2 || reference.dim(0) < 2) {
    throw std::invalid_argument("eval_moments: both sets need at least 2 samples, got " + shape_str(generated.shape()) +
                                " and " + shape_str(reference.shape()));
  }
  if (generated.numel() / generated.dim(0) != reference.numel() / reference.dim(0)) {
    throw ShapeError("eval_moments: sample shapes differ, " + shape_str(generated.shape()) + " vs " +
                     shape_str(reference.shape()));
  }
  const Moments g = fit(generated);
  const Moments r = fit(reference);
  double acc = 0.0;
  for (std::size_t j = 0; j < g.mean.size(); ++j) {
    const double dm = g.mean[j] - r.mean[j];
    const double ds = g.sd[j] - r.sd[j];
    acc += dm * dm + ds * ds;
  }
  return std::sqrt(acc);
}

}  // namespace usm
