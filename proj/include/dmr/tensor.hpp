#pragma once

// Dense double-precision tensors with taped reverse-mode gradients.
// Row-major storage. Ops build a graph of shared nodes; backward() runs the
// recorded closures in reverse topological order. Everything is 64-bit and
// single-threaded, so a fixed seed gives bit-identical results.

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <string>
#include <vector>

#include "dmr/errors.hpp"

namespace dmr {

using Shape = std::vector<int>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct TensorImpl;
}

class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from_data(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int ndim() const;
  int dim(int axis) const;  // negative axes count from the back
  std::size_t numel() const;

  std::vector<double>& data();
  const std::vector<double>& data() const;
  std::vector<double>& grad();  // throws state_error when absent
  const std::vector<double>& grad() const;
  bool has_grad() const;
  bool requires_grad() const;

  double value() const;  // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  // Reverse-mode sweep from a scalar root; accumulates into leaf grads.
  void backward();
  void zero_grad();

  detail::TensorImpl* impl() const { return impl_.get(); }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;

  friend Tensor make_op_node(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                             std::function<void(detail::TensorImpl&)> backward_fn);
};

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first backward / zero_grad
  bool requires_grad = false;
  std::vector<Tensor> parents;
  std::function<void(TensorImpl&)> backward_fn;

  std::size_t numel() const { return data.size(); }
  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

// Builds a graph node; requires_grad is inherited from the parents and the
// backward closure is dropped when no parent wants gradients.
Tensor make_op_node(Shape shape, std::vector<double> data, std::vector<Tensor> parents,
                    std::function<void(detail::TensorImpl&)> backward_fn);

}  // namespace dmr
