#pragma once

#include <memory>
#include <string>
#include <vector>

#include "usm/tensor.hpp"

namespace usm {

class Optimizer {
 public:
  explicit Optimizer(std::vector<Tensor> params, double lr) : params_(std::move(params)), lr_(lr) {}
  virtual ~Optimizer() = default;

  // Applies one update from the gradients currently held by the parameters.
  // Parameters without a gradient buffer are treated as having zero gradient.
  virtual void step() = 0;
  void zero_grad();

  double lr() const { return lr_; }
  void set_lr(double lr) { lr_ = lr; }
  const std::vector<Tensor>& params() const { return params_; }

 protected:
  std::vector<Tensor> params_;
  double lr_;
};

// theta <- theta - lr * grad
class Sgd final : public Optimizer {
 public:
  using Optimizer::Optimizer;
  void step() override;
};

struct AdamOptions {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam final : public Optimizer {
 public:
  Adam(std::vector<Tensor> params, double lr, AdamOptions opts = {});
  void step() override;
  long steps() const { return t_; }

 private:
  AdamOptions opts_;
  std::vector<std::vector<double>> m_, v_;
  long t_ = 0;
};

// "adam" or "sgd"; anything else throws std::invalid_argument.
std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, std::vector<Tensor> params, double lr);

}  // namespace usm
