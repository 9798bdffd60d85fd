#include "dhat/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include "dhat/error.hpp"

namespace dhat {

namespace {

// Monotonic creation stamp; ordering nodes by it gives a valid topological
// order for any graph built by a single thread.
std::atomic<std::uint64_t> next_seq{1};

thread_local bool tls_grad_enabled = true;

std::shared_ptr<detail::TensorImpl> make_impl(Shape shape, std::vector<Real> data, bool rg) {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  impl->requires_grad = rg;
  return impl;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor::Tensor() = default;

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), Real(0), requires_grad);
}

Tensor Tensor::full(Shape shape, Real value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<Real>(n, value), requires_grad));
}

Tensor Tensor::from(Shape shape, std::vector<Real> data, bool requires_grad) {
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " does not match " +
                         std::to_string(data.size()) + " values");
  }
  return Tensor(make_impl(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(Real value, bool requires_grad) {
  return Tensor(make_impl({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return impl_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw DimensionError("axis " + std::to_string(axis) + " out of range for shape " +
                         shape_str(impl_->shape));
  }
  return impl_->shape[axis];
}

std::size_t Tensor::numel() const { return impl_->data.size(); }

std::span<const Real> Tensor::data() const { return impl_->data; }

std::span<Real> Tensor::mutable_data() {
  if (impl_->node) throw StateError("mutable_data() on a non-leaf tensor");
  return impl_->data;
}

Real Tensor::item() const {
  if (numel() != 1) throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

bool Tensor::requires_grad() const { return impl_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (impl_->node) throw StateError("requires_grad can only be set on leaves");
  impl_->requires_grad = value;
  if (!value) impl_->grad.clear();
}

bool Tensor::is_leaf() const { return impl_->node == nullptr; }

bool Tensor::has_grad() const { return !impl_->grad.empty(); }

std::span<const Real> Tensor::grad() const { return impl_->grad; }

void Tensor::zero_grad() {
  if (!impl_->grad.empty()) std::fill(impl_->grad.begin(), impl_->grad.end(), Real(0));
}

void Tensor::drop_grad() {
  impl_->grad.clear();
  impl_->grad.shrink_to_fit();
}

Tensor Tensor::detach() const { return Tensor(make_impl(impl_->shape, impl_->data, false)); }

NoGradGuard::NoGradGuard() : previous_(tls_grad_enabled) { tls_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tls_grad_enabled = previous_; }

bool grad_enabled() { return tls_grad_enabled; }

Tensor slice_rows(const Tensor& t, std::size_t begin, std::size_t end) {
  if (t.rank() == 0 || begin > end || end > t.dim(0)) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of range for " + shape_str(t.shape()));
  }
  const std::size_t row = t.numel() / t.dim(0);
  Shape shape = t.shape();
  shape[0] = end - begin;
  auto d = t.data();
  return Tensor::from(std::move(shape),
                      std::vector<Real>(d.begin() + begin * row, d.begin() + end * row));
}

Tensor take_rows(const Tensor& t, std::span<const std::size_t> rows) {
  if (t.rank() == 0) throw DimensionError("take_rows: scalar input");
  const std::size_t n = t.dim(0), row = t.numel() / n;
  std::vector<Real> out;
  out.reserve(rows.size() * row);
  auto d = t.data();
  for (std::size_t r : rows) {
    if (r >= n) throw DimensionError("take_rows: row " + std::to_string(r) + " out of range");
    out.insert(out.end(), d.begin() + r * row, d.begin() + (r + 1) * row);
  }
  Shape shape = t.shape();
  shape[0] = rows.size();
  return Tensor::from(std::move(shape), std::move(out));
}

namespace detail {

Tensor make_result(const char* op, Shape shape, std::vector<Real> data, std::vector<Tensor> inputs,
                   BackwardFn backward) {
  for (Real v : data) {
    if (!std::isfinite(v)) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
  }
  auto impl = make_impl(std::move(shape), std::move(data), false);
  if (!tls_grad_enabled) return Tensor(impl);
  bool any = false;
  for (const auto& t : inputs) any = any || t.requires_grad();
  if (!any) return Tensor(impl);
  auto node = std::make_shared<Node>();
  node->seq = next_seq.fetch_add(1, std::memory_order_relaxed);
  node->op = op;
  node->inputs.reserve(inputs.size());
  for (auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  impl->node = std::move(node);
  impl->requires_grad = true;
  return Tensor(impl);
}

}  // namespace detail

namespace {

using detail::TensorImpl;

// Shared driver for backward() and gradients(). When `targets` is null every
// requires_grad leaf receives its gradient in .grad; otherwise only the
// targets are differentiated and their gradients are returned in `out`.
void run_backward(const Tensor& loss, const std::vector<TensorImpl*>* targets,
                  std::unordered_map<TensorImpl*, std::vector<Real>>& buffers) {
  if (loss.numel() != 1) {
    throw ArgumentError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  TensorImpl* root = loss.impl().get();

  // Collect every interior tensor reachable from the loss.
  std::vector<TensorImpl*> interior;
  std::unordered_set<TensorImpl*> seen;
  std::vector<TensorImpl*> stack{root};
  seen.insert(root);
  while (!stack.empty()) {
    TensorImpl* t = stack.back();
    stack.pop_back();
    if (!t->node) continue;
    interior.push_back(t);
    for (const auto& in : t->node->inputs) {
      if (seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(interior.begin(), interior.end(),
            [](const TensorImpl* a, const TensorImpl* b) { return a->node->seq > b->node->seq; });

  std::unordered_set<TensorImpl*> needed;
  if (targets) {
    for (auto* t : *targets) needed.insert(t);
    // Ascending creation order: a node is needed if any of its inputs is.
    for (auto it = interior.rbegin(); it != interior.rend(); ++it) {
      for (const auto& in : (*it)->node->inputs) {
        if (needed.count(in.get())) {
          needed.insert(*it);
          break;
        }
      }
    }
  }
  auto is_needed = [&](TensorImpl* t) {
    if (targets) return needed.count(t) > 0;
    return t->requires_grad;
  };
  if (!is_needed(root)) return;

  auto buffer_for = [&](TensorImpl* t) -> std::vector<Real>& {
    if (!targets && !t->node) {
      if (t->grad.size() != t->data.size()) t->grad.assign(t->data.size(), Real(0));
      return t->grad;
    }
    auto& b = buffers[t];
    if (b.size() != t->data.size()) b.assign(t->data.size(), Real(0));
    return b;
  };

  if (!root->node) {
    buffer_for(root)[0] += Real(1);
    return;
  }
  buffer_for(root)[0] = Real(1);

  std::vector<Real*> grad_in;
  for (TensorImpl* t : interior) {
    if (!is_needed(t)) continue;
    auto found = buffers.find(t);
    if (found == buffers.end()) continue;  // not on any path from the loss
    const auto& node = *t->node;
    grad_in.assign(node.inputs.size(), nullptr);
    for (std::size_t i = 0; i < node.inputs.size(); ++i) {
      TensorImpl* in = node.inputs[i].get();
      if (is_needed(in)) grad_in[i] = buffer_for(in).data();
    }
    const auto& gout = found->second;
    node.backward(node.inputs, t->data, gout, grad_in);
    if (!targets || std::find(targets->begin(), targets->end(), t) == targets->end()) {
      buffers.erase(found);
    }
  }
  // Interior buffers are no longer needed; keep only those requested.
  if (targets) {
    for (auto it = buffers.begin(); it != buffers.end();) {
      if (std::find(targets->begin(), targets->end(), it->first) == targets->end()) {
        it = buffers.erase(it);
      } else {
        ++it;
      }
    }
  }
}

}  // namespace

void backward(const Tensor& loss) {
  std::unordered_map<TensorImpl*, std::vector<Real>> buffers;
  run_backward(loss, nullptr, buffers);
}

std::vector<std::vector<Real>> gradients(const Tensor& loss, std::span<const Tensor> wrt) {
  std::vector<TensorImpl*> targets;
  targets.reserve(wrt.size());
  for (const auto& t : wrt) targets.push_back(t.impl().get());
  std::unordered_map<TensorImpl*, std::vector<Real>> buffers;
  run_backward(loss, &targets, buffers);
  std::vector<std::vector<Real>> out;
  out.reserve(wrt.size());
  for (const auto& t : wrt) {
    auto it = buffers.find(t.impl().get());
    if (it == buffers.end()) {
      out.emplace_back(t.numel(), Real(0));
    } else {
      out.push_back(it->second);
    }
  }
  return out;
}

}  // namespace dhat
