#include "dmr/tensor.hpp"

#include <cmath>
#include <unordered_set>
#include <utility>

namespace dmr {

std::size_t numel_of(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) {
    if (e <= 0) throw shape_error("tensor shape has non-positive extent " + shape_str(shape));
    n *= static_cast<std::size_t>(e);
  }
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const std::size_t n = numel_of(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data.assign(n, value);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
  if (numel_of(shape) != data.size()) {
    throw shape_error("tensor data length " + std::to_string(data.size()) +
                      " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = requires_grad;
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

const Shape& Tensor::shape() const { return impl_->shape; }

int Tensor::ndim() const { return static_cast<int>(impl_->shape.size()); }

int Tensor::dim(int axis) const {
  const int nd = ndim();
  if (axis < 0) axis += nd;
  if (axis < 0 || axis >= nd)
    throw shape_error("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::vector<double>& Tensor::data() { return impl_->data; }
const std::vector<double>& Tensor::data() const { return impl_->data; }

std::vector<double>& Tensor::grad() {
  if (!has_grad()) throw state_error("tensor has no gradient buffer");
  return impl_->grad;
}

const std::vector<double>& Tensor::grad() const {
  if (!has_grad()) throw state_error("tensor has no gradient buffer");
  return impl_->grad;
}

bool Tensor::has_grad() const { return impl_ && impl_->grad.size() == impl_->data.size(); }

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

double Tensor::value() const {
  if (numel() != 1) throw shape_error("value() requires a scalar tensor, got " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  if (static_cast<int>(idx.size()) != ndim())
    throw shape_error("at(): index rank mismatch for " + shape_str(shape()));
  std::size_t flat = 0;
  int axis = 0;
  for (int i : idx) {
    const int e = impl_->shape[axis];
    if (i < 0 || i >= e) throw shape_error("at(): index out of range for " + shape_str(shape()));
    flat = flat * static_cast<std::size_t>(e) + static_cast<std::size_t>(i);
    ++axis;
  }
  return impl_->data[flat];
}

void Tensor::zero_grad() {
  impl_->grad.assign(impl_->data.size(), 0.0);
}

void Tensor::backward() {
  if (!defined()) throw state_error("backward() on an undefined tensor");
  if (numel() != 1) throw shape_error("backward() requires a scalar root, got " + shape_str(shape()));
  if (!impl_->requires_grad)
    throw state_error("backward(): root does not depend on any tensor requiring gradients");

  // Iterative post-order DFS over requires_grad nodes; graphs can be deep
  // (kinematic chains, long op pipelines), so no recursion.
  std::vector<detail::TensorImpl*> order;
  std::unordered_set<detail::TensorImpl*> visited;
  struct Frame {
    detail::TensorImpl* node;
    std::size_t next_parent;
  };
  std::vector<Frame> stack;
  stack.push_back({impl_.get(), 0});
  visited.insert(impl_.get());
  while (!stack.empty()) {
    Frame& f = stack.back();
    if (f.next_parent < f.node->parents.size()) {
      detail::TensorImpl* p = f.node->parents[f.next_parent++].impl();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      order.push_back(f.node);
      stack.pop_back();
    }
  }

  for (detail::TensorImpl* n : order) n->ensure_grad();
  impl_->grad[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

Tensor make_op_node(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                    std::function<void(detail::TensorImpl&)> backward_fn) {
  bool rg = false;
  for (const Tensor& p : parents) rg = rg || p.requires_grad();
  Tensor out = Tensor::from_data(std::move(shape), std::move(data), rg);
  if (rg) {
    out.impl()->parents = std::move(parents);
    out.impl()->backward_fn = std::move(backward_fn);
  }
  return out;
}

}  // namespace dmr
