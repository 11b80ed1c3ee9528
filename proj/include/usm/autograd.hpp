#pragma once

#include <functional>
#include <initializer_list>
#include <string_view>
#include <vector>

#include "usm/tensor.hpp"

namespace usm {

// Append-only record of differentiable operations. Constructing a tape makes
// it the active recorder on the calling thread until it is destroyed; ops
// executed while no tape is active are not recorded.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  static GradTape* current();

  // Runs the recorded nodes in exact reverse insertion order. Leaf gradients
  // accumulate into the leaves; the tape is consumed afterwards.
  void backward(const Tensor& loss);

  void record(std::string_view op, const Tensor& out, std::function<void()> backward_fn);

  std::size_t size() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

  // Reverse-order op tags of the last backward pass (for tests).
  const std::vector<std::string_view>& last_visit_order() const { return visited_; }

 private:
  struct Node {
    std::string_view op;
    Tensor output;
    std::function<void()> backward_fn;
  };
  std::vector<Node> nodes_;
  std::vector<std::string_view> visited_;
  GradTape* prev_;
  bool consumed_ = false;
};

// Suspends recording for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  GradTape* saved_;
};

// Builds an op output. It requires grad iff a tape is active and any input
// requires grad.
Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs);
Tensor make_result(Shape shape, std::vector<double> data, std::span<const Tensor* const> inputs);

// Records `fn` on the active tape when `out` requires grad; also runs the
// debug finiteness check on `out`.
void finish_op(std::string_view op, const Tensor& out, std::function<void()> fn);

// Central differences (f(x + eps e_i) - f(x - eps e_i)) / (2 eps), evaluated
// by perturbing x in place. f must be deterministic and must not keep x.
Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double eps);

// Same, restricted to the listed flat coordinates.
std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor x,
                                        std::span<const std::int64_t> coords, double eps);

}  // namespace usm
