#pragma once

#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "dhat/nn.hpp"
#include "dhat/tensor.hpp"

namespace dhat {

/// All unordered class pairs (i, j) with i < j in lexicographic order.
std::vector<std::pair<int, int>> enumerate_class_pairs(int num_classes);

/// [N, C] x [N, C] -> [N, 1, C, 2] with [:, 0, :, 0] = main, [:, 0, :, 1] = second.
Tensor stack_logits(const Tensor& logits_main, const Tensor& logits_second);

// Fuses the logits of two heads into class probabilities:
//   stack -> head-wise conv (8 kernels over the head axis) -> BN -> ReLU
//   -> pair-wise conv (16 kernels over class pairs) -> avg pool over kernels
//   -> flatten (64 * P) -> FC -> softmax
class MergeCNN {
 public:
  static constexpr std::size_t kHeadwiseKernels = 8;
  static constexpr std::size_t kPairKernels = 16;

  MergeCNN(int num_classes, nn::Rng& rng);

  struct Trace {
    Tensor stacked;   // N x 1 x C x 2
    Tensor headwise;  // N x 8 x C (after BN and ReLU)
    Tensor pairwise;  // N x 16 x 8 x P
    Tensor pooled;    // N x 8 x 8 x P
    Tensor flat;      // N x 64P
    Tensor logits;    // N x C
  };

  /// Head-wise convolution without BN/ReLU: [N,1,C,2] -> [N,8,C,1].
  Tensor headwise_conv(const Tensor& stacked) const;
  /// headwise_conv followed by BN and ReLU, reshaped to [N,8,C].
  Tensor headwise(const Tensor& stacked, bool training);
  /// [N,8,C] (or [N,8,C,1]) -> [N,16,8,P].
  Tensor pairwise_conv(const Tensor& features) const;

  /// Pre-softmax fused outputs [N, C].
  Tensor logits(const Tensor& logits_main, const Tensor& logits_second, bool training,
                Trace* trace = nullptr);
  /// Softmax of logits(); rows sum to one.
  Tensor forward(const Tensor& logits_main, const Tensor& logits_second, bool training,
                 Trace* trace = nullptr);

  int num_classes() const { return num_classes_; }
  std::size_t num_pairs() const { return pairs_.size(); }
  const std::vector<std::pair<int, int>>& pairs() const { return pairs_; }
  std::size_t flatten_width() const { return 64 * pairs_.size(); }
  std::size_t parameter_count() const;

  void collect(const std::string& prefix, std::vector<nn::NamedTensor>& out) const;
  std::unique_ptr<MergeCNN> clone() const;

  Tensor headwise_weight;  // 8 x 1 x 1 x 2
  Tensor headwise_bias;    // 8
  Tensor pair_weight;      // 16 x 1 x 2 x 1, applied over (first, second) class of a pair
  Tensor pair_bias;        // 16
  std::unique_ptr<nn::BatchNorm> bn;
  std::unique_ptr<nn::Linear> fc;

 private:
  MergeCNN() = default;
  int num_classes_ = 0;
  std::vector<std::pair<int, int>> pairs_;
};

}  // namespace dhat
