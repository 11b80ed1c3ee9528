#pragma once

#include <cstdint>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace usm {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class GraphError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// Live tensor element accounting, used by the profiler.
struct MemoryStats {
  std::int64_t live_elements = 0;
  std::int64_t peak_elements = 0;
};
MemoryStats memory_stats();
void reset_peak_memory();

// When enabled every op checks its output for NaN/Inf and throws NumericError.
// Defaults to on in builds without NDEBUG.
void set_debug_checks(bool on);
bool debug_checks();

namespace detail {

struct TensorImpl {
  TensorImpl(Shape s, std::vector<double> d, bool rg);
  ~TensorImpl();
  TensorImpl(const TensorImpl&) = delete;
  TensorImpl& operator=(const TensorImpl&) = delete;

  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first needed
  bool requires_grad;
  bool is_leaf = true;
};

}  // namespace detail

// Reference-semantics handle over a dense row-major float64 array. Copies
// share storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  // Negative indices count from the back.
  std::int64_t dim(int i) const;
  std::int64_t numel() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::int64_t flat) const { return data()[static_cast<std::size_t>(flat)]; }

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  // Allocates a zero gradient buffer on first use.
  std::span<double> grad_mut() const;
  void zero_grad() const;

  Tensor clone() const;  // deep copy of data, detached
  Tensor detach() const;  // shares nothing, same values

  const detail::TensorImpl* id() const { return impl_.get(); }
  bool same(const Tensor& o) const { return impl_ == o.impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;

  friend class GradTape;
  friend Tensor make_result(Shape shape, std::vector<double> data,
                            std::span<const Tensor* const> inputs);
};

}  // namespace usm
