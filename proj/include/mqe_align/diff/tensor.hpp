#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mqe {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {

template <typename Real>
struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;  // empty until a gradient is first accumulated
  bool requires_grad = false;

  // Graph edge. `backward_fn` reads `grad` of the node it is attached to and
  // accumulates into the inputs it captured.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  bool is_leaf() const { return !backward_fn; }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), Real(0));
  }
};

}  // namespace detail

/// Reference-counted dense tensor with optional reverse-mode gradient.
///
/// Copies share storage (like a handle); use clone() for a deep copy. Any op
/// taking a tensor that requires grad records a backward edge unless a
/// NoGradGuard is active on the calling thread.
template <typename Real>
class Tensor {
 public:
  using Impl = detail::TensorImpl<Real>;

  Tensor() = default;
  explicit Tensor(Shape shape, Real fill = Real(0));
  Tensor(Shape shape, std::vector<Real> data);
  explicit Tensor(std::shared_ptr<Impl> impl) : impl_(std::move(impl)) {}

  static Tensor scalar(Real value) { return Tensor(Shape{1}, std::vector<Real>{value}); }

  bool defined() const { return static_cast<bool>(impl_); }
  const Shape& shape() const { return impl_->shape; }
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t dim(std::size_t axis) const { return impl_->shape.at(axis); }
  std::size_t numel() const { return impl_->data.size(); }
  // Matrix views: rank-1 tensors count as a single row.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<Real> data() { return impl_->data; }
  std::span<const Real> data() const { return impl_->data; }
  Real& operator[](std::size_t i) { return impl_->data[i]; }
  Real operator[](std::size_t i) const { return impl_->data[i]; }
  Real& at(std::size_t r, std::size_t c) { return impl_->data[r * cols() + c]; }
  Real at(std::size_t r, std::size_t c) const { return impl_->data[r * cols() + c]; }
  Real item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool flag);
  bool has_grad() const { return impl_->grad.size() == impl_->data.size(); }
  std::span<Real> grad() { return impl_->grad; }
  std::span<const Real> grad() const { return impl_->grad; }
  /// Allocates (if needed) and clears the gradient buffer.
  void zero_grad();

  /// Reverse sweep from this scalar. Leaf gradients accumulate across calls.
  void backward() const;

  Tensor clone() const;   // deep copy of values, no graph
  Tensor detach() const { return clone(); }

  Impl* impl() const { return impl_.get(); }
  const std::shared_ptr<Impl>& impl_ptr() const { return impl_; }
  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

 private:
  std::shared_ptr<Impl> impl_;
};

/// Disables graph recording on the current thread for the guard's lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_mode_enabled();

extern template class Tensor<float>;
extern template class Tensor<double>;

}  // namespace mqe
