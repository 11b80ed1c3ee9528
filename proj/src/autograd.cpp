#include "usm/autograd.hpp"

#include <cmath>

namespace usm {

namespace {
thread_local GradTape* t_current = nullptr;
}

GradTape::GradTape() : prev_(t_current) { t_current = this; }

GradTape::~GradTape() {
  if (t_current == this) t_current = prev_;
}

GradTape* GradTape::current() { return t_current; }

void GradTape::record(std::string_view op, const Tensor& out, std::function<void()> backward_fn) {
  if (consumed_) throw GraphError("recording '" + std::string(op) + "' on a consumed tape");
  nodes_.push_back({op, out, std::move(backward_fn)});
}

void GradTape::backward(const Tensor& loss) {
  if (consumed_) throw GraphError("backward called twice on the same tape");
  if (loss.numel() != 1) {
    throw GraphError("backward needs a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad() || loss.is_leaf()) {
    throw GraphError("loss is not connected to the recorded graph");
  }
  consumed_ = true;
  Tensor root = loss;
  root.grad_mut()[0] += 1.0;
  visited_.clear();
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    visited_.push_back(it->op);
    it->backward_fn();
  }
  nodes_.clear();
}

NoGradGuard::NoGradGuard() : saved_(t_current) { t_current = nullptr; }
NoGradGuard::~NoGradGuard() { t_current = saved_; }

Tensor make_result(Shape shape, std::vector<double> data,
                   std::initializer_list<const Tensor*> inputs) {
  return make_result(std::move(shape), std::move(data),
                     std::span<const Tensor* const>(inputs.begin(), inputs.size()));
}

Tensor make_result(Shape shape, std::vector<double> data, std::span<const Tensor* const> inputs) {
  bool rg = false;
  if (t_current != nullptr) {
    for (const Tensor* t : inputs) {
      if (t != nullptr && t->defined() && t->requires_grad()) {
        rg = true;
        break;
      }
    }
  }
  Tensor out = Tensor::from(std::move(shape), std::move(data), rg);
  out.impl().is_leaf = false;
  return out;
}

void finish_op(std::string_view op, const Tensor& out, std::function<void()> fn) {
  if (debug_checks()) {
    for (double v : out.data()) {
      if (!std::isfinite(v)) {
        throw NumericError("non-finite value produced by '" + std::string(op) + "' (shape " +
                           shape_str(out.shape()) + ")");
      }
    }
  }
  if (out.requires_grad()) t_current->record(op, out, std::move(fn));
}

Tensor finite_diff_grad(const std::function<double(const Tensor&)>& f, Tensor x, double eps) {
  NoGradGuard guard;
  Tensor g = Tensor::zeros(x.shape());
  auto xs = x.mutable_data();
  auto gs = g.mutable_data();
  for (std::size_t i = 0; i < xs.size(); ++i) {
    const double orig = xs[i];
    xs[i] = orig + eps;
    const double fp = f(x);
    xs[i] = orig - eps;
    const double fm = f(x);
    xs[i] = orig;
    gs[i] = (fp - fm) / (2.0 * eps);
  }
  return g;
}

std::vector<double> finite_diff_grad_at(const std::function<double()>& f, Tensor x,
                                        std::span<const std::int64_t> coords, double eps) {
  NoGradGuard guard;
  auto xs = x.mutable_data();
  std::vector<double> out;
  out.reserve(coords.size());
  for (auto c : coords) {
    auto i = static_cast<std::size_t>(c);
    const double orig = xs[i];
    xs[i] = orig + eps;
    const double fp = f();
    xs[i] = orig - eps;
    const double fm = f();
    xs[i] = orig;
    out.push_back((fp - fm) / (2.0 * eps));
  }
  return out;
}

}  // namespace usm
