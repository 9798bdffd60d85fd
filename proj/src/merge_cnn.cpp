#include "dhat/merge_cnn.hpp"

#include "dhat/error.hpp"
#include "dhat/ops.hpp"

namespace dhat {

std::vector<std::pair<int, int>> enumerate_class_pairs(int num_classes) {
  if (num_classes < 2) {
    throw ArgumentError("enumerate_class_pairs: need at least 2 classes, got " +
                        std::to_string(num_classes));
  }
  std::vector<std::pair<int, int>> pairs;
  pairs.reserve(static_cast<std::size_t>(num_classes) * (num_classes - 1) / 2);
  for (int i = 0; i < num_classes; ++i) {
    for (int j = i + 1; j < num_classes; ++j) pairs.emplace_back(i, j);
  }
  return pairs;
}

Tensor stack_logits(const Tensor& logits_main, const Tensor& logits_second) {
  if (logits_main.rank() != 2 || logits_main.shape() != logits_second.shape()) {
    throw DimensionError("stack_logits: expected two equal [N, C] tensors, got " +
                         shape_str(logits_main.shape()) + " and " +
                         shape_str(logits_second.shape()));
  }
  const std::size_t n = logits_main.dim(0), c = logits_main.dim(1);
  // concat yields [2, N, C] in flat order (head, n, c); gather interleaves heads.
  Tensor both = ops::concat(std::vector<Tensor>{logits_main, logits_second}, 0);
  std::vector<std::size_t> idx(2 * n * c);
  for (std::size_t s = 0; s < n; ++s) {
    for (std::size_t k = 0; k < c; ++k) {
      idx[(s * c + k) * 2 + 0] = s * c + k;
      idx[(s * c + k) * 2 + 1] = n * c + s * c + k;
    }
  }
  return ops::gather(both, std::move(idx), {n, 1, c, 2});
}

MergeCNN::MergeCNN(int num_classes, nn::Rng& rng)
    : num_classes_(num_classes), pairs_(enumerate_class_pairs(num_classes)) {
  headwise_weight = nn::fan_in_uniform({kHeadwiseKernels, 1, 1, 2}, 2, rng);
  headwise_bias = nn::fan_in_uniform({kHeadwiseKernels}, 2, rng);
  pair_weight = nn::fan_in_uniform({kPairKernels, 1, 2, 1}, 2, rng);
  pair_bias = nn::fan_in_uniform({kPairKernels}, 2, rng);
  bn = std::make_unique<nn::BatchNorm>(kHeadwiseKernels);
  fc = std::make_unique<nn::Linear>(flatten_width(), static_cast<std::size_t>(num_classes), rng);
}

Tensor MergeCNN::headwise_conv(const Tensor& stacked) const {
  if (stacked.rank() != 4 || stacked.dim(1) != 1 || stacked.dim(3) != 2) {
    throw DimensionError("headwise_conv: expected [N, 1, C, 2], got " + shape_str(stacked.shape()));
  }
  return ops::conv2d(stacked, headwise_weight, headwise_bias, 1, 0);
}

Tensor MergeCNN::headwise(const Tensor& stacked, bool training) {
  Tensor h = ops::relu(bn->forward(headwise_conv(stacked), training));
  return ops::reshape(h, {h.dim(0), h.dim(1), h.dim(2)});
}

Tensor MergeCNN::pairwise_conv(const Tensor& features) const {
  const auto& s = features.shape();
  const bool ok = (s.size() == 3 || (s.size() == 4 && s[3] == 1)) && s[1] == kHeadwiseKernels &&
                  s[2] == static_cast<std::size_t>(num_classes_);
  if (!ok) {
    throw DimensionError("pairwise_conv: expected [N, 8, " + std::to_string(num_classes_) +
                         "], got " + shape_str(s));
  }
  const std::size_t n = s[0], c = s[2], k = kHeadwiseKernels, p = pairs_.size();
  // Lay every (channel, pair) out as a column of height 2 so a 2x1 kernel
  // sees (features[k, i], features[k, j]): [N, 1, 2, 8P].
  std::vector<std::size_t> idx(n * 2 * k * p);
  for (std::size_t b = 0; b < n; ++b) {
    for (std::size_t t = 0; t < 2; ++t) {
      for (std::size_t ch = 0; ch < k; ++ch) {
        for (std::size_t q = 0; q < p; ++q) {
          const auto cls = static_cast<std::size_t>(t == 0 ? pairs_[q].first : pairs_[q].second);
          idx[((b * 2 + t) * k + ch) * p + q] = (b * k + ch) * c + cls;
        }
      }
    }
  }
  Tensor columns = ops::gather(features, std::move(idx), {n, 1, 2, k * p});
  Tensor out = ops::conv2d(columns, pair_weight, pair_bias, 1, 0);  // [N, 16, 1, 8P]
  return ops::reshape(out, {n, kPairKernels, k, p});
}

Tensor MergeCNN::logits(const Tensor& logits_main, const Tensor& logits_second, bool training,
                        Trace* trace) {
  if (logits_main.rank() != 2 || logits_main.dim(1) != static_cast<std::size_t>(num_classes_)) {
    throw ArgumentError("merge: built for " + std::to_string(num_classes_) +
                        " classes, got logits " + shape_str(logits_main.shape()));
  }
  Tensor stacked = stack_logits(logits_main, logits_second);
  Tensor hw = headwise(stacked, training);
  Tensor pw = pairwise_conv(hw);
  Tensor pooled = ops::avg_pool(pw, 1, 2, 2);
  Tensor flat = ops::flatten(pooled);
  Tensor out = fc->forward(flat, training);
  if (trace) *trace = Trace{stacked, hw, pw, pooled, flat, out};
  return out;
}

Tensor MergeCNN::forward(const Tensor& logits_main, const Tensor& logits_second, bool training,
                         Trace* trace) {
  return ops::softmax(logits(logits_main, logits_second, training, trace));
}

std::size_t MergeCNN::parameter_count() const {
  std::vector<nn::NamedTensor> all;
  collect("", all);
  return nn::parameter_count(all);
}

void MergeCNN::collect(const std::string& prefix, std::vector<nn::NamedTensor>& out) const {
  const std::string p = prefix.empty() ? "" : prefix + ".";
  out.push_back({p + "headwise.weight", headwise_weight, true});
  out.push_back({p + "headwise.bias", headwise_bias, true});
  bn->collect(p + "headwise_bn", out);
  out.push_back({p + "pairwise.weight", pair_weight, true});
  out.push_back({p + "pairwise.bias", pair_bias, true});
  fc->collect(p + "fc", out);
}

std::unique_ptr<MergeCNN> MergeCNN::clone() const {
  std::unique_ptr<MergeCNN> m(new MergeCNN());
  auto copy = [](const Tensor& t) {
    auto c = t.detach();
    c.set_requires_grad(t.requires_grad());
    return c;
  };
  m->num_classes_ = num_classes_;
  m->pairs_ = pairs_;
  m->headwise_weight = copy(headwise_weight);
  m->headwise_bias = copy(headwise_bias);
  m->pair_weight = copy(pair_weight);
  m->pair_bias = copy(pair_bias);
  m->bn.reset(static_cast<nn::BatchNorm*>(bn->clone().release()));
  m->fc.reset(static_cast<nn::Linear*>(fc->clone().release()));
  return m;
}

}  // namespace dhat
