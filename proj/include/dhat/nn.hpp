#pragma once

#include <memory>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "dhat/tensor.hpp"

namespace dhat::nn {

// A tensor owned by a layer, addressed by its hierarchical name. Buffers
// (batch-norm running statistics) are saved with the model but never trained.
struct NamedTensor {
  std::string name;
  Tensor tensor;
  bool trainable = true;
};

using Rng = std::mt19937_64;

class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual void collect(const std::string& prefix, std::vector<NamedTensor>& out) const = 0;
  virtual std::unique_ptr<Layer> clone() const = 0;
};

// Kaiming fan-in normal initialization, std = sqrt(2 / fan_in).
Tensor kaiming_normal(Shape shape, std::size_t fan_in, Rng& rng);
// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Tensor fan_in_uniform(Shape shape, std::size_t fan_in, Rng& rng);

class Conv2d final : public Layer {
 public:
  Conv2d(std::size_t in, std::size_t out, std::size_t kernel, std::size_t stride,
         std::size_t padding, bool bias, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  std::unique_ptr<Layer> clone() const override;

  Tensor weight;
  Tensor bias;  // undefined when the layer has no bias
  std::size_t stride;
  std::size_t padding;

 private:
  Conv2d() = default;
};

class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(std::size_t channels, Real momentum = Real(0.1), Real eps = Real(1e-5));
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  std::unique_ptr<Layer> clone() const override;

  Tensor gamma, beta, running_mean, running_var;
  Real momentum;
  Real eps;
};

class Linear final : public Layer {
 public:
  Linear(std::size_t in, std::size_t out, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  std::unique_ptr<Layer> clone() const override;

  Tensor weight, bias;

 private:
  Linear() = default;
};

class ReLU final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string&, std::vector<NamedTensor>&) const override {}
  std::unique_ptr<Layer> clone() const override { return std::make_unique<ReLU>(); }
};

class Flatten final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string&, std::vector<NamedTensor>&) const override {}
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(); }
};

class GlobalAvgPool final : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string&, std::vector<NamedTensor>&) const override {}
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(); }
};

class Sequential final : public Layer {
 public:
  Sequential() = default;
  Sequential& add(std::string name, std::unique_ptr<Layer> layer);
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  std::unique_ptr<Layer> clone() const override;
  std::size_t size() const { return children_.size(); }

 private:
  std::vector<std::pair<std::string, std::unique_ptr<Layer>>> children_;
};

// Pre-activation wide basic block: BN-ReLU-conv3x3-BN-ReLU-conv3x3 with a 1x1
// projection shortcut on the activated input when the width changes.
class WideBasicBlock final : public Layer {
 public:
  WideBasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  std::unique_ptr<Layer> clone() const override;

 private:
  WideBasicBlock(const WideBasicBlock& other);
  std::unique_ptr<BatchNorm> bn1_, bn2_;
  std::unique_ptr<Conv2d> conv1_, conv2_, shortcut_;
};

// Post-activation ResNet basic block with a conv1x1+BN projection shortcut
// when the stride or width changes.
class BasicBlock final : public Layer {
 public:
  BasicBlock(std::size_t in, std::size_t out, std::size_t stride, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  void collect(const std::string& prefix, std::vector<NamedTensor>& out) const override;
  std::unique_ptr<Layer> clone() const override;

 private:
  BasicBlock(const BasicBlock& other);
  std::unique_ptr<Conv2d> conv1_, conv2_, shortcut_;
  std::unique_ptr<BatchNorm> bn1_, bn2_, shortcut_bn_;
};

std::size_t parameter_count(const std::vector<NamedTensor>& tensors);

}  // namespace dhat::nn
