#include "dhat/nn.hpp"

#include <cmath>

#include "dhat/ops.hpp"

namespace dhat::nn {

namespace {

Tensor copy_of(const Tensor& t) {
  if (!t.defined()) return Tensor();
  auto c = t.detach();
  c.set_requires_grad(t.requires_grad());
  return c;
}

template <typename T>
std::unique_ptr<T> clone_as(const std::unique_ptr<T>& p) {
  if (!p) return nullptr;
  return std::unique_ptr<T>(static_cast<T*>(p->clone().release()));
}

std::string join(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

}  // namespace

Tensor kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng) {
  std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(fan_in)));
  std::vector<Real> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return Tensor::from(std::move(shape), std::move(data), true);
}

Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> dist(-bound, bound);
  std::vector<Real> data(shape_numel(shape));
  for (auto& v : data) v = static_cast<Real>(dist(rng));
  return Tensor::from(std::move(shape), std::move(data), true);
}

Conv2d::Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride_,
               std::size_t padding_, bool with_bias, Rng& rng)
    : stride(stride_), padding(padding_) {
  const auto fan_in = in * kernel * kernel;
  weight = kaiming_normal({out, in, kernel, kernel}, fan_in, rng);
  if (with_bias) bias = fan_in_uniform({out}, fan_in, rng);
}

Tensor Conv2d::forward(const Tensor& x, bool) { return ops::conv2d(x, weight, bias, stride, padding); }

void Conv2d::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({join(prefix, "weight"), weight, true});
  if (bias.defined()) out.push_back({join(prefix, "bias"), bias, true});
}

std::unique_ptr<Layer> Conv2d::clone() const {
  std::unique_ptr<Conv2d> c(new Conv2d());
  c->weight = copy_of(weight);
  c->bias = copy_of(bias);
  c->stride = stride;
  c->padding = padding;
  return c;
}

BatchNorm::BatchNorm(std::size_t channels, Real momentum_, Real eps_)
    : gamma(Tensor::full({channels}, 1, true)),
      beta(Tensor::zeros({channels}, true)),
      running_mean(Tensor::zeros({channels})),
      running_var(Tensor::full({channels}, 1)),
      momentum(momentum_),
      eps(eps_) {}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  return ops::batch_norm(x, gamma, beta, running_mean, running_var, training, momentum, eps);
}

void BatchNorm::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({join(prefix, "gamma"), gamma, true});
  out.push_back({join(prefix, "beta"), beta, true});
  out.push_back({join(prefix, "running_mean"), running_mean, false});
  out.push_back({join(prefix, "running_var"), running_var, false});
}

std::unique_ptr<Layer> BatchNorm::clone() const {
  auto c = std::make_unique<BatchNorm>(gamma.numel(), momentum, eps);
  c->gamma = copy_of(gamma);
  c->beta = copy_of(beta);
  c->running_mean = copy_of(running_mean);
  c->running_var = copy_of(running_var);
  return c;
}

Linear::Linear(std::size_t in, std::size_t out, Rng& rng)
    : weight(fan_in_uniform({out, in}, in, rng)), bias(fan_in_uniform({out}, in, rng)) {}

Tensor Linear::forward(const Tensor& x, bool) { return ops::linear(x, weight, bias); }

void Linear::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  out.push_back({join(prefix, "weight"), weight, true});
  out.push_back({join(prefix, "bias"), bias, true});
}

std::unique_ptr<Layer> Linear::clone() const {
  std::unique_ptr<Linear> c(new Linear());
  c->weight = copy_of(weight);
  c->bias = copy_of(bias);
  return c;
}

Tensor ReLU::forward(const Tensor& x, bool) { return ops::relu(x); }
Tensor Flatten::forward(const Tensor& x, bool) { return ops::flatten(x); }
Tensor GlobalAvgPool::forward(const Tensor& x, bool) { return ops::global_avg_pool(x); }

Sequential& Sequential::add(std::string name, std::unique_ptr<Layer> layer) {
  children_.emplace_back(std::move(name), std::move(layer));
  return *this;
}

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& [name, layer] : children_) h = layer->forward(h, training);
  return h;
}

void Sequential::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  for (const auto& [name, layer] : children_) layer->collect(join(prefix, name), out);
}

std::unique_ptr<Layer> Sequential::clone() const {
  auto c = std::make_unique<Sequential>();
  for (const auto& [name, layer] : children_) c->add(name, layer->clone());
  return c;
}

WideBasicBlock::WideBasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
    : bn1_(std::make_unique<BatchNorm>(in)),
      bn2_(std::make_unique<BatchNorm>(out)),
      conv1_(std::make_unique<Conv2d>(in, out, 3, stride, 1, false, rng)),
      conv2_(std::make_unique<Conv2d>(out, out, 3, 1, 1, false, rng)) {
  if (in != out) shortcut_ = std::make_unique<Conv2d>(in, out, 1, stride, 0, false, rng);
}

WideBasicBlock::WideBasicBlock(const WideBasicBlock& o)
    : Layer(),
      bn1_(clone_as(o.bn1_)),
      bn2_(clone_as(o.bn2_)),
      conv1_(clone_as(o.conv1_)),
      conv2_(clone_as(o.conv2_)),
      shortcut_(clone_as(o.shortcut_)) {}

Tensor WideBasicBlock::forward(const Tensor& x, bool training) {
  Tensor act = ops::relu(bn1_->forward(x, training));
  Tensor out = conv1_->forward(act, training);
  out = conv2_->forward(ops::relu(bn2_->forward(out, training)), training);
  Tensor residual = shortcut_ ? shortcut_->forward(act, training) : x;
  return ops::add(residual, out);
}

void WideBasicBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  bn1_->collect(join(prefix, "bn1"), out);
  conv1_->collect(join(prefix, "conv1"), out);
  bn2_->collect(join(prefix, "bn2"), out);
  conv2_->collect(join(prefix, "conv2"), out);
  if (shortcut_) shortcut_->collect(join(prefix, "shortcut"), out);
}

std::unique_ptr<Layer> WideBasicBlock::clone() const {
  return std::unique_ptr<Layer>(new WideBasicBlock(*this));
}

BasicBlock::BasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng)
    : conv1_(std::make_unique<Conv2d>(in, out, 3, stride, 1, false, rng)),
      conv2_(std::make_unique<Conv2d>(out, out, 3, 1, 1, false, rng)),
      bn1_(std::make_unique<BatchNorm>(out)),
      bn2_(std::make_unique<BatchNorm>(out)) {
  if (stride != 1 || in != out) {
    shortcut_ = std::make_unique<Conv2d>(in, out, 1, stride, 0, false, rng);
    shortcut_bn_ = std::make_unique<BatchNorm>(out);
  }
}

BasicBlock::BasicBlock(const BasicBlock& o)
    : Layer(),
      conv1_(clone_as(o.conv1_)),
      conv2_(clone_as(o.conv2_)),
      shortcut_(clone_as(o.shortcut_)),
      bn1_(clone_as(o.bn1_)),
      bn2_(clone_as(o.bn2_)),
      shortcut_bn_(clone_as(o.shortcut_bn_)) {}

Tensor BasicBlock::forward(const Tensor& x, bool training) {
  Tensor out = ops::relu(bn1_->forward(conv1_->forward(x, training), training));
  out = bn2_->forward(conv2_->forward(out, training), training);
  Tensor residual =
      shortcut_ ? shortcut_bn_->forward(shortcut_->forward(x, training), training) : x;
  return ops::relu(ops::add(out, residual));
}

void BasicBlock::collect(const std::string& prefix, std::vector<NamedTensor>& out) const {
  conv1_->collect(join(prefix, "conv1"), out);
  bn1_->collect(join(prefix, "bn1"), out);
  conv2_->collect(join(prefix, "conv2"), out);
  bn2_->collect(join(prefix, "bn2"), out);
  if (shortcut_) {
    shortcut_->collect(join(prefix, "shortcut"), out);
    shortcut_bn_->collect(join(prefix, "shortcut_bn"), out);
  }
}

std::unique_ptr<Layer> BasicBlock::clone() const {
  return std::unique_ptr<Layer>(new BasicBlock(*this));
}

std::size_t parameter_count(const std::vector<NamedTensor>& tensors) {
  std::size_t n = 0;
  for (const auto& t : tensors) {
    if (t.trainable) n += t.tensor.numel();
  }
  return n;
}

}  // namespace dhat::nn
