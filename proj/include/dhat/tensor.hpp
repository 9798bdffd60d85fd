#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dhat {

#ifdef DHAT_SINGLE_PRECISION
using Real = float;
#else
using Real = double;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

namespace detail {

struct TensorImpl;

// Gradient callback of a recorded operation. `grad_in[i]` is null when input i
// does not need a gradient; otherwise the callback accumulates (+=) into it.
using BackwardFn = std::function<void(std::span<const std::shared_ptr<TensorImpl>> inputs,
                                      std::span<const Real> out, std::span<const Real> grad_out,
                                      std::span<Real* const> grad_in)>;

struct Node {
  std::uint64_t seq = 0;
  const char* op = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  BackwardFn backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<Real> data;
  std::vector<Real> grad;
  bool requires_grad = false;
  std::shared_ptr<Node> node;
};

}  // namespace detail

// Dense row-major tensor handle. Copies share storage; use clone() for an
// independent value. Operations on tensors that require gradients record a
// node so backward() can propagate through them.
class Tensor {
 public:
  Tensor();

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, Real value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<Real> data, bool requires_grad = false);
  static Tensor scalar(Real value, bool requires_grad = false);

  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  std::span<const Real> data() const;
  // Only valid for leaves; mutating an interior node would desynchronize the
  // saved activations of its consumers.
  std::span<Real> mutable_data();
  Real item() const;
  Real at(std::size_t flat_index) const { return data()[flat_index]; }

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;
  bool has_grad() const;
  std::span<const Real> grad() const;
  void zero_grad();
  void drop_grad();

  // New leaf holding a copy of the values, detached from any graph.
  Tensor detach() const;
  Tensor clone() const { return detach(); }

  bool defined() const { return impl_ != nullptr; }
  bool same(const Tensor& other) const { return impl_ == other.impl_; }

  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  std::shared_ptr<detail::TensorImpl> impl_;
};

// Accumulate d(loss)/d(leaf) into the .grad of every reachable leaf that
// requires grad. The loss must hold exactly one element.
void backward(const Tensor& loss);

// Gradients of a scalar with respect to the given tensors, without touching
// any .grad buffer. Only the subgraph leading to `wrt` is differentiated.
std::vector<std::vector<Real>> gradients(const Tensor& loss, std::span<const Tensor> wrt);

// While alive on the current thread, new operations record no graph nodes.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Detached copies of whole rows along axis 0.
Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end);
Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows);

namespace detail {

// Builds an operation result: validates finiteness, and records a graph node
// when grad mode is on and any input requires grad.
Tensor make_result(const char* op, Shape shape, std::vector<Real> data,
                   std::vector<Tensor> inputs, BackwardFn backward);

}  // namespace detail

}  // namespace dhat
