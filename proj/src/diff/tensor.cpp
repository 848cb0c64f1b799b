#include "mqe_align/diff/tensor.hpp"

#include <algorithm>
#include <unordered_set>

#include "mqe_align/error.hpp"

namespace mqe {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "(";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + ")";
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_mode_enabled() { return g_grad_enabled; }

template <typename Real>
Tensor<Real>::Tensor(Shape shape, Real fill) : impl_(std::make_shared<Impl>()) {
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

template <typename Real>
Tensor<Real>::Tensor(Shape shape, std::vector<Real> data) : impl_(std::make_shared<Impl>()) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor: shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

template <typename Real>
std::size_t Tensor<Real>::rows() const {
  const auto& s = impl_->shape;
  if (s.size() == 1) return 1;
  if (s.size() == 2) return s[0];
  throw DimensionError("tensor: matrix view of rank-" + std::to_string(s.size()) + " tensor");
}

template <typename Real>
std::size_t Tensor<Real>::cols() const {
  const auto& s = impl_->shape;
  if (s.size() == 1) return s[0];
  if (s.size() == 2) return s[1];
  throw DimensionError("tensor: matrix view of rank-" + std::to_string(s.size()) + " tensor");
}

template <typename Real>
Real Tensor<Real>::item() const {
  if (numel() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

template <typename Real>
Tensor<Real>& Tensor<Real>::set_requires_grad(bool flag) {
  impl_->requires_grad = flag;
  if (!flag) impl_->grad.clear();
  return *this;
}

template <typename Real>
void Tensor<Real>::zero_grad() {
  impl_->grad.assign(impl_->data.size(), Real(0));
}

template <typename Real>
Tensor<Real> Tensor<Real>::clone() const {
  return Tensor(impl_->shape, impl_->data);
}

template <typename Real>
void Tensor<Real>::backward() const {
  if (numel() != 1) {
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) {
    throw ContractError("backward: loss is not attached to a recorded graph");
  }
  // Iterative post-order DFS gives a topological order (inputs before users).
  std::vector<Impl*> order;
  std::unordered_set<Impl*> visited;
  std::vector<std::pair<Impl*, std::size_t>> stack{{impl_.get(), 0}};
  visited.insert(impl_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Impl* p = node->parents[next++].get();
      if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Impl* node : order) {
    if (!node->is_leaf()) node->grad.assign(node->data.size(), Real(0));
  }
  impl_->ensure_grad();
  impl_->grad[0] += Real(1);
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if (!(*it)->is_leaf()) (*it)->backward_fn(**it);
  }
}

template class Tensor<float>;
template class Tensor<double>;

}  // namespace mqe
