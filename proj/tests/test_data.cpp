#include <cmath>

#include "doctest.h"
#include "test_util.hpp"
#include "usm/dataset.hpp"
#include "usm/metrics.hpp"

using namespace usm;
using testing::bit_equal;

TEST_CASE("single standard Gaussian has unit moments") {
  data::DatasetSpec s;
  s.components = 1;
  s.separation = 0.0;
  s.sigma = 1.0;
  Rng rng(1);
  const std::int64_t n = 10000;
  Tensor x = data::dataset_sample(s, n, rng).x;
  const std::int64_t d = s.dims();
  double worst_mean = 0.0, worst_var = 0.0;
  for (std::int64_t j = 0; j < d; ++j) {
    double m = 0.0, q = 0.0;
    for (std::int64_t i = 0; i < n; ++i) m += x.at(i * d + j);
    m /= n;
    for (std::int64_t i = 0; i < n; ++i) q += (x.at(i * d + j) - m) * (x.at(i * d + j) - m);
    q /= n - 1;
    worst_mean = std::max(worst_mean, std::abs(m));
    worst_var = std::max(worst_var, std::abs(q - 1.0));
  }
  CHECK(worst_mean < 0.05);
  CHECK(worst_var < 0.1);
}

TEST_CASE("checkerboard without noise is exactly +-1") {
  data::DatasetSpec s;
  s.kind = data::Kind::kCheckerboard;
  s.noise = 0.0;
  Rng rng(2);
  auto b = data::dataset_sample(s, 16, rng);
  for (double v : b.x.data()) CHECK((v == 1.0 || v == -1.0));
  // Adjacent blocks of side 2 alternate.
  for (std::int64_t i = 0; i < 16; ++i) {
    const double* p = b.x.data().data() + i * s.dims();
    CHECK(p[0] == p[1]);
    CHECK(p[0] == -p[2]);
    CHECK(p[0] == -p[2 * 8]);
    CHECK(p[0] == (b.labels[i] ? -1.0 : 1.0));
  }
}

TEST_CASE("same seed gives identical samples") {
  for (auto kind : {data::Kind::kGaussMix, data::Kind::kCheckerboard, data::Kind::kClassConditional}) {
    data::DatasetSpec s;
    s.kind = kind;
    Rng a(3), b(3);
    auto x = data::dataset_sample(s, 7, a);
    auto y = data::dataset_sample(s, 7, b);
    CHECK(bit_equal(x.x, y.x));
    CHECK(x.labels == y.labels);
  }
}

TEST_CASE("class-conditional samples sit on their class mean") {
  data::DatasetSpec s;
  s.kind = data::Kind::kClassConditional;
  s.components = 3;
  s.sigma = 0.0;
  s.separation = 0.5;
  Tensor means = data::component_means(s);
  Rng rng(4);
  auto b = data::dataset_sample(s, 20, rng);
  const std::int64_t d = s.dims();
  for (std::int64_t i = 0; i < 20; ++i) {
    REQUIRE(b.labels[i] >= 0);
    REQUIRE(b.labels[i] < 3);
    for (std::int64_t j = 0; j < d; ++j) CHECK(b.x.at(i * d + j) == means.at(b.labels[i] * d + j));
  }
  for (double v : means.data()) CHECK(std::abs(v) == 0.5);
}

TEST_CASE("dataset spec validation and key-value round trip") {
  data::DatasetSpec s;
  s.components = 0;
  Rng rng(5);
  CHECK_THROWS_AS(data::dataset_sample(s, 1, rng), std::invalid_argument);
  s = data::DatasetSpec{};
  s.kind = data::Kind::kCheckerboard;
  s.period = 0;
  CHECK_THROWS_AS(s.validate(), std::invalid_argument);
  CHECK_THROWS_AS(data::parse_kind("spirals"), FormatError);

  data::DatasetSpec t;
  t.kind = data::Kind::kClassConditional;
  t.components = 5;
  t.separation = 0.125;
  t.sigma = 0.03;
  t.pattern_seed = 77;
  KeyValue kv;
  t.write(kv);
  data::DatasetSpec r = data::DatasetSpec::read(KeyValue::parse(kv.to_string()));
  CHECK(r.kind == t.kind);
  CHECK(r.components == 5);
  CHECK(r.separation == 0.125);
  CHECK(r.sigma == 0.03);
  CHECK(r.pattern_seed == 77);
}

TEST_CASE("eval_moments closed forms") {
  Rng rng(6);
  Tensor ref = rng.normal_tensor({50, 2, 2});
  CHECK(eval_moments(ref, ref) == 0.0);

  // Two-point sets with chosen mean and unbiased standard deviation.
  auto pair = [](double mu, double sd) {
    const double a = sd / std::sqrt(2.0);
    return Tensor::from({2, 1}, {mu - a, mu + a});
  };
  CHECK(eval_moments(pair(1.0, 1.0), pair(0.0, 1.0)) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(eval_moments(pair(0.0, 2.0), pair(0.0, 1.0)) == doctest::Approx(1.0).epsilon(1e-14));
  CHECK(eval_moments(pair(3.0, 5.0), pair(0.0, 1.0)) == doctest::Approx(5.0).epsilon(1e-14));

  // Sampled N(1,1) against N(0,1) in one dimension.
  Tensor g = rng.normal_tensor({20000, 1});
  for (double& v : g.mutable_data()) v += 1.0;
  CHECK(eval_moments(g, rng.normal_tensor({20000, 1})) == doctest::Approx(1.0).epsilon(0.03));

  CHECK_THROWS_AS(eval_moments(rng.normal_tensor({1, 3}), ref), std::invalid_argument);
  CHECK_THROWS_AS(eval_moments(rng.normal_tensor({5, 3}), ref), ShapeError);
}
