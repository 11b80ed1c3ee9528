#include <cmath>
#include <cstring>

#include "doctest.h"
#include "test_util.hpp"
#include "usm/optim.hpp"

using namespace usm;
using usm::testing::grad_check;

TEST_CASE("elementary op values") {
  CHECK(silu(Tensor::scalar(0.0)).item() == 0.0);

  Tensor ln = layer_norm(Tensor::from({1, 4}, {1, 1, 1, 1}));
  for (double v : ln.data()) CHECK(v == 0.0);

  Tensor a = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
  CHECK(testing::bit_equal(matmul(a, eye), a));

  Tensor p = Tensor::from({3, 2}, {1, 0, 0, 1, 0, 0});
  Tensor r = matmul(a, p);
  CHECK(r.shape() == Shape{2, 2});
  CHECK(r.at(0) == 1.0);
  CHECK(r.at(3) == 5.0);

  Tensor sm = softmax(Tensor::from({1, 3}, {1000.0, 1000.0, 1000.0}));
  CHECK(sm.at(0) == doctest::Approx(1.0 / 3.0));
  CHECK(softplus(Tensor::scalar(100.0)).item() == 100.0);
}

TEST_CASE("broadcast rules") {
  Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
  Tensor row = Tensor::from({3}, {10, 20, 30});
  Tensor y = add(x, row);
  CHECK(y.at(4) == 25.0);
  Tensor col = Tensor::from({2, 1}, {2, 3});
  CHECK(mul(x, col).at(5) == 18.0);
  Tensor batch = Tensor::from({2, 1, 3}, {1, 1, 1, 2, 2, 2});
  CHECK(mul(Tensor::full({2, 4, 3}, 1.0), batch).at(23) == 2.0);

  Tensor bad = Tensor::from({2}, {1, 2});
  CHECK_THROWS_AS(add(x, bad), ShapeError);
  try {
    mul(x, bad);
  } catch (const ShapeError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("mul") != std::string::npos);
    CHECK(msg.find("[2,3]") != std::string::npos);
    CHECK(msg.find("[2]") != std::string::npos);
  }
  CHECK_THROWS_AS(matmul(x, x), ShapeError);
  CHECK_THROWS_AS(reshape(x, {4}), ShapeError);
  CHECK_THROWS_AS(split(x, {1, 1}), ShapeError);
}

TEST_CASE("conv_down") {
  SUBCASE("zero kernel gives bias") {
    Tensor x = Tensor::full({2, 2, 3}, 5.0);
    Tensor k = Tensor::zeros({2, 2, 3, 3});
    Tensor b = Tensor::from({3}, {1, 2, 3});
    Tensor y = conv_down(x, k, b);
    CHECK(y.shape() == Shape{1, 1, 3});
    CHECK(testing::bit_equal(reshape(y, {3}), b));
  }
  SUBCASE("16x16 halves to 8x8") {
    Tensor y = conv_down(Tensor::zeros({16, 16, 2}), Tensor::zeros({2, 2, 2, 2}), Tensor::zeros({2}));
    CHECK(y.shape() == Shape{8, 8, 2});
    CHECK(y.numel() / 2 == 64);
  }
  SUBCASE("patch sum") {
    Tensor x = Tensor::from({2, 2, 1}, {1, 2, 3, 4});
    Tensor y = conv_down(x, Tensor::full({2, 2, 1, 1}, 1.0), Tensor::zeros({1}));
    CHECK(y.item() == 10.0);
  }
  SUBCASE("odd sizes rejected") {
    CHECK_THROWS_AS(conv_down(Tensor::zeros({3, 2, 1}), Tensor::zeros({2, 2, 1, 1}), Tensor::zeros({1})), ShapeError);
  }
}

TEST_CASE("conv_up") {
  Tensor k = Tensor::from({2, 2, 1, 1}, {1, 0, 0, 0});
  Tensor x = Tensor::from({2, 2, 1}, {1, 2, 3, 4});
  Tensor y = conv_up(x, k, Tensor::zeros({1}));
  CHECK(y.shape() == Shape{4, 4, 1});
  const std::vector<double> expect = {1, 0, 2, 0, 0, 0, 0, 0, 3, 0, 4, 0, 0, 0, 0, 0};
  for (int i = 0; i < 16; ++i) CHECK(y.at(i) == expect[i]);

  CHECK(conv_up(Tensor::zeros({4, 4, 2}), Tensor::zeros({2, 2, 2, 2}), Tensor::zeros({2})).shape() == Shape{8, 8, 2});

  Tensor b = Tensor::from({2}, {0.5, -1.5});
  Tensor z = conv_up(Tensor::zeros({1, 3, 2}), Tensor::full({2, 2, 2, 2}, 0.3), b);
  for (std::int64_t i = 0; i < z.numel(); ++i) CHECK(z.at(i) == b.at(i % 2));

  Rng rng(3);
  Tensor big = rng.normal_tensor({4, 6, 2});
  Tensor kk = rng.normal_tensor({2, 2, 2, 2});
  CHECK(conv_down(conv_up(big, kk, Tensor::zeros({2})), kk, Tensor::zeros({2})).shape() == big.shape());
}

TEST_CASE("backward basics") {
  Tensor x = Tensor::from({2, 3}, {1, -2, 3, 0.5, 0, 2}, true);
  {
    GradTape tape;
    tape.backward(sum(x));
  }
  for (double g : x.grad()) CHECK(g == 1.0);

  Tensor y = Tensor::from({2}, {1, 2}, true);
  {
    GradTape tape;
    tape.backward(sum(mul(y, y)));
  }
  CHECK(y.grad()[0] == 2.0);
  CHECK(y.grad()[1] == 4.0);

  SUBCASE("leaf gradients accumulate across tapes") {
    GradTape tape;
    tape.backward(sum(mul(y, y)));
    CHECK(y.grad()[1] == 8.0);
  }
  SUBCASE("second backward is an error") {
    GradTape tape;
    Tensor loss = sum(y);
    tape.backward(loss);
    CHECK_THROWS_AS(tape.backward(loss), GraphError);
  }
  SUBCASE("non-scalar loss is an error") {
    GradTape tape;
    Tensor v = scale(y, 2.0);
    CHECK_THROWS_AS(tape.backward(v), GraphError);
  }
  SUBCASE("disconnected loss is an error") {
    GradTape tape;
    Tensor c = Tensor::scalar(1.0);
    CHECK_THROWS_AS(tape.backward(sum(c)), GraphError);
  }
}

TEST_CASE("backward visits nodes in reverse insertion order") {
  Tensor x = Tensor::from({3}, {0.1, 0.2, 0.3}, true);
  GradTape tape;
  Tensor a = exp(x);
  Tensor b = silu(a);
  Tensor c = scale(b, 3.0);
  Tensor loss = sum(c);
  CHECK(tape.size() == 4);
  tape.backward(loss);
  const auto& order = tape.last_visit_order();
  REQUIRE(order.size() == 4);
  CHECK(order[0] == "sum");
  CHECK(order[1] == "scale");
  CHECK(order[2] == "silu");
  CHECK(order[3] == "exp");
  CHECK(tape.consumed());
}

TEST_CASE("no recording without a tape") {
  Tensor x = Tensor::from({2}, {1, 2}, true);
  Tensor y = exp(x);
  CHECK_FALSE(y.requires_grad());
}

TEST_CASE("finite-difference oracle") {
  Rng rng(11);
  Tensor x = rng.normal_tensor({3, 2});
  Tensor g = finite_diff_grad([](const Tensor& t) { return sum(t).item(); }, x, 1e-6);
  for (double v : g.data()) CHECK(v == doctest::Approx(1.0).epsilon(1e-8));

  Tensor s = Tensor::scalar(3.0);
  Tensor gs = finite_diff_grad([](const Tensor& t) { return t.item() * t.item(); }, s, 1e-5);
  CHECK(std::abs(gs.item() - 6.0) < 1e-8);
}

TEST_CASE("gradient correctness of every op at 10 random points") {
  constexpr double kTol = 1e-6;
  for (std::uint64_t trial = 0; trial < 10; ++trial) {
    Rng rng(100 + trial);
    auto r = [&](Shape s) { return rng.normal_tensor(std::move(s)); };
    CAPTURE(trial);
    CHECK(grad_check([](auto& in) { return add(in[0], in[1]); }, {r({2, 3, 4}), r({3, 1})}) < kTol);
    CHECK(grad_check([](auto& in) { return sub(in[0], in[1]); }, {r({2, 3}), r({3})}) < kTol);
    CHECK(grad_check([](auto& in) { return mul(in[0], in[1]); }, {r({2, 3, 4}), r({2, 1, 4})}) < kTol);
    CHECK(grad_check([](auto& in) { return scale(add_scalar(in[0], 0.3), -1.7); }, {r({5})}) < kTol);
    CHECK(grad_check([](auto& in) { return matmul(in[0], in[1]); }, {r({2, 3, 4}), r({4, 5})}) < kTol);
    CHECK(grad_check([](auto& in) { return linear(in[0], in[1], in[2]); }, {r({3, 4}), r({4, 2}), r({2})}) < kTol);
    CHECK(grad_check([](auto& in) { return exp(in[0]); }, {r({6})}) < kTol);
    CHECK(grad_check([](auto& in) { return softplus(in[0]); }, {r({6})}) < kTol);
    CHECK(grad_check([](auto& in) { return silu(in[0]); }, {r({6})}) < kTol);
    CHECK(grad_check([](auto& in) { return sigmoid(in[0]); }, {r({6})}) < kTol);
    CHECK(grad_check([](auto& in) { return layer_norm(in[0]); }, {r({3, 5})}) < kTol);
    CHECK(grad_check([](auto& in) { return layer_norm(in[0], in[1], in[2]); }, {r({3, 5}), r({5}), r({5})}) < kTol);
    CHECK(grad_check([](auto& in) { return softmax(in[0]); }, {r({3, 4})}) < kTol);
    CHECK(grad_check([](auto& in) { return concat({in[0], in[1]}); }, {r({2, 3}), r({2, 2})}) < kTol);
    CHECK(grad_check([](auto& in) { return split(in[0], {1, 3})[1]; }, {r({2, 4})}) < kTol);
    CHECK(grad_check(
              [](auto& in) {
                const std::vector<std::int64_t> idx{2, 0, 1};
                return permute_rows(in[0], idx);
              },
              {r({2, 3, 2})}) < kTol);
    CHECK(grad_check(
              [](auto& in) {
                const std::vector<std::int64_t> idx{1, 1, 0};
                return gather_rows(in[0], idx);
              },
              {r({2, 3})}) < kTol);
    CHECK(grad_check([](auto& in) { return transpose(reshape(in[0], {2, 3, 2})); }, {r({12})}) < kTol);
    CHECK(grad_check([](auto& in) { return mean(in[0]); }, {r({3, 2})}) < kTol);
    CHECK(grad_check([](auto& in) { return mean_last(in[0]); }, {r({3, 2})}) < kTol);
    CHECK(grad_check([](auto& in) { return conv_down(in[0], in[1], in[2]); }, {r({2, 4, 2, 3}), r({2, 2, 3, 2}), r({2})}) < kTol);
    CHECK(grad_check([](auto& in) { return conv_up(in[0], in[1], in[2]); }, {r({2, 1, 3, 2}), r({2, 2, 2, 3}), r({3})}) < kTol);
    CHECK(grad_check([](auto& in) { return causal_depthwise_conv(in[0], in[1], in[2]); }, {r({2, 5, 3}), r({3, 4}), r({3})}) < kTol);
    CHECK(grad_check([](auto& in) { return attention(in[0], in[1], in[2], 2); }, {r({2, 3, 4}), r({2, 2, 4}), r({2, 2, 4})}) < kTol);
  }
}

TEST_CASE("causal conv only looks back") {
  Tensor x = Tensor::from({4, 1}, {1, 0, 0, 0});
  Tensor w = Tensor::from({1, 3}, {0.25, 0.5, 1.0});
  Tensor y = causal_depthwise_conv(x, w, Tensor::zeros({1}));
  CHECK(y.at(0) == 1.0);
  CHECK(y.at(1) == 0.5);
  CHECK(y.at(2) == 0.25);
  CHECK(y.at(3) == 0.0);
}

TEST_CASE("attention with a single key is a broadcast of the value") {
  Rng rng(5);
  Tensor q = rng.normal_tensor({3, 4});
  Tensor k = rng.normal_tensor({1, 4});
  Tensor v = rng.normal_tensor({1, 4});
  Tensor o = attention(q, k, v, 2);
  for (int l = 0; l < 3; ++l)
    for (int d = 0; d < 4; ++d) CHECK(o.at(l * 4 + d) == doctest::Approx(v.at(d)).epsilon(1e-14));
  CHECK_THROWS_AS(attention(q, k, v, 3), ShapeError);
}

TEST_CASE("debug mode rejects non-finite outputs") {
  const bool prev = debug_checks();
  set_debug_checks(true);
  CHECK_THROWS_AS(exp(Tensor::scalar(1000.0)), NumericError);
  set_debug_checks(false);
  CHECK(std::isinf(exp(Tensor::scalar(1000.0)).item()));
  set_debug_checks(prev);
}

TEST_CASE("identical inputs give bit-identical outputs") {
  auto run = [] {
    Rng rng(42);
    Tensor x = rng.normal_tensor({4, 6});
    Tensor w = rng.normal_tensor({6, 6});
    return softmax(layer_norm(silu(linear(x, w))));
  };
  CHECK(testing::bit_equal(run(), run()));
}

TEST_CASE("optimizers") {
  Tensor p = Tensor::from({2}, {1.0, -1.0}, true);
  {
    GradTape tape;
    tape.backward(sum(mul(p, p)));
  }
  SUBCASE("sgd is theta - lr grad") {
    Sgd opt({p}, 0.1);
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.8));
    CHECK(p.at(1) == doctest::Approx(-0.8));
  }
  SUBCASE("adam first step moves by lr") {
    Adam opt({p}, 0.01);
    opt.step();
    CHECK(p.at(0) == doctest::Approx(0.99).epsilon(1e-6));
    CHECK(p.at(1) == doctest::Approx(-0.99).epsilon(1e-6));
  }
  SUBCASE("zero learning rate leaves parameters untouched") {
    Adam opt({p}, 0.0);
    opt.step();
    CHECK(p.at(0) == 1.0);
    CHECK(p.at(1) == -1.0);
  }
  CHECK_THROWS(make_optimizer("rmsprop", {p}, 0.1));
}

TEST_CASE("live element accounting") {
  const auto before = memory_stats().live_elements;
  {
    Tensor t = Tensor::zeros({10, 10});
    CHECK(memory_stats().live_elements == before + 100);
    CHECK(memory_stats().peak_elements >= before + 100);
  }
  CHECK(memory_stats().live_elements == before);
}
