#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "dhat/tensor.hpp"

// Differentiable primitives. Shapes never broadcast except where an op says
// so (scalar multiply, per-row/per-channel bias of linear/conv/batch_norm).
namespace dhat::ops {

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, Real factor);
Tensor add_scalar(const Tensor& a, Real value);
Tensor matmul(const Tensor& a, const Tensor& b);

/// sign(0) == 0; the gradient is identically zero.
Tensor sign(const Tensor& a);
/// Gradient passes through for lo <= x <= hi and is zero outside.
Tensor clamp(const Tensor& a, Real lo, Real hi);

Tensor relu(const Tensor& a);
Tensor log(const Tensor& a);

Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// Sums the last axis: [..., C] -> [...].
Tensor row_sum(const Tensor& a);

Tensor reshape(const Tensor& a, Shape shape);
/// [N, ...] -> [N, prod(...)]
Tensor flatten(const Tensor& a);
Tensor concat(std::span<const Tensor> parts, std::size_t axis);

/// out.flat[i] = a.flat[indices[i]]; backward scatter-adds.
Tensor gather(const Tensor& a, std::vector<std::size_t> indices, Shape out_shape);
/// [N, C] with one index per row -> [N]
Tensor pick(const Tensor& a, std::span<const int> columns);

/// Cross-correlation on NCHW input with K x C x kh x kw kernels. `bias` may be
/// undefined. Output extent is floor((H + 2p - kh) / stride) + 1.
Tensor conv2d(const Tensor& input, const Tensor& kernels, const Tensor& bias, std::size_t stride,
              std::size_t padding);

/// x [N, in] times weight [out, in] transposed, plus bias [out] (may be undefined).
Tensor linear(const Tensor& x, const Tensor& weight, const Tensor& bias);

/// Per-channel normalization over every axis except axis 1. In training mode
/// the batch statistics are used and the running buffers are updated in place
/// (running_var with the unbiased estimate).
Tensor batch_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor& running_mean,
                  Tensor& running_var, bool training, Real momentum = Real(0.1),
                  Real eps = Real(1e-5));

/// Average pooling along exactly one axis.
Tensor avg_pool(const Tensor& x, std::size_t axis, std::size_t window, std::size_t stride);
/// [N, C, H, W] -> [N, C]
Tensor global_avg_pool(const Tensor& x);

// Row-wise over the last axis, log-sum-exp stabilized.
Tensor softmax(const Tensor& z);
Tensor log_softmax(const Tensor& z);

/// -log_softmax(z)[y] for every row: [N, C] -> [N].
Tensor cross_entropy_per_sample(const Tensor& logits, std::span<const int> labels);
/// Batch mean of cross_entropy_per_sample.
Tensor cross_entropy(const Tensor& logits, std::span<const int> labels);

/// KL(p || q) along the last axis for probability vectors; rows must be
/// strictly positive and sum to 1 within 1e-6.
Tensor kl_divergence(const Tensor& p, const Tensor& q);
/// KL(softmax(zp) || softmax(zq)) per row, computed from logits: [N, C] -> [N].
Tensor kl_divergence_logits(const Tensor& zp, const Tensor& zq);

}  // namespace dhat::ops
