#include "usm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace usm {

void Optimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void Sgd::step() {
  for (auto& p : params_) {
    if (!p.has_grad()) continue;
    auto g = p.grad();
    auto x = p.mutable_data();
    for (std::size_t i = 0; i < x.size(); ++i) x[i] -= lr_ * g[i];
  }
}

Adam::Adam(std::vector<Tensor> params, double lr, AdamOptions opts)
    : Optimizer(std::move(params), lr), opts_(opts) {
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
    v_.emplace_back(static_cast<std::size_t>(p.numel()), 0.0);
  }
}

void Adam::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(opts_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(opts_.beta2, static_cast<double>(t_));
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& p = params_[k];
    auto x = p.mutable_data();
    auto& m = m_[k];
    auto& v = v_[k];
    const bool has = p.has_grad();
    std::span<const double> g = has ? p.grad() : std::span<const double>();
    for (std::size_t i = 0; i < x.size(); ++i) {
      const double gi = has ? g[i] : 0.0;
      m[i] = opts_.beta1 * m[i] + (1.0 - opts_.beta1) * gi;
      v[i] = opts_.beta2 * v[i] + (1.0 - opts_.beta2) * gi * gi;
      const double mhat = m[i] / bc1;
      const double vhat = v[i] / bc2;
      x[i] -= lr_ * mhat / (std::sqrt(vhat) + opts_.eps);
    }
  }
}

std::unique_ptr<Optimizer> make_optimizer(const std::string& kind, std::vector<Tensor> params, double lr) {
  if (kind == "adam") return std::make_unique<Adam>(std::move(params), lr);
  if (kind == "sgd") return std::make_unique<Sgd>(std::move(params), lr);
  throw std::invalid_argument("unknown optimizer '" + kind + "' (expected adam or sgd)");
}

}  // namespace usm
