#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "dhat/tensor.hpp"

namespace dhat {

struct Dataset {
  Tensor images;  // N x C x H x W, values in [0, 1]
  std::vector<int> labels;
  int num_classes = 0;
  std::string split = "train";
  std::string id;

  std::size_t size() const { return labels.size(); }
  std::size_t channels() const { return images.dim(1); }
  std::size_t image_size() const { return images.dim(2); }
  /// Throws FormatError unless pixels lie in [0,1], labels in range and N > 0.
  void validate() const;
  Dataset slice(std::size_t begin, std::size_t end) const;
  Dataset take(std::span<const std::size_t> rows) const;
};

/// IDX image file (magic 0x803 for N x H x W, 0x804 for N x C x H x W) and
/// label file (0x801). Pixels are scaled by 1/255. When num_classes is 0 it
/// is inferred as max(label) + 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path, int num_classes = 0);
void save_idx(const Dataset& ds, const std::string& images_path, const std::string& labels_path);

/// CIFAR binary records: label byte (CIFAR-100 has a coarse label byte first,
/// which is skipped) followed by 3072 channel-major pixel bytes.
Dataset load_cifar_binary(const std::vector<std::string>& paths, int num_classes);

struct SynthSpec {
  int num_classes = 10;
  int samples_per_class = 100;
  int image_size = 12;
  int channels = 1;
  double sigma = 0.1;
  /// Determines the class prototypes.
  std::uint64_t seed = 0;
  /// Selects an independent noise stream, so train and test sets can share prototypes.
  std::uint64_t noise_stream = 0;
};

/// Class-conditional Gaussian-blob images: each class owns a fixed prototype
/// made of a few Gaussian bumps; a sample is its prototype plus N(0, sigma)
/// pixel noise, clamped to [0,1]. Samples are ordered by class round-robin.
Dataset synth_dataset(const SynthSpec& spec);

/// Permutation of 0..n-1 for the given epoch, reproducible from the seed.
std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch);

struct Batch {
  Tensor x;
  std::vector<int> y;
  std::vector<std::uint64_t> ids;  // dataset row of every sample
};

Batch make_batch(const Dataset& ds, std::span<const std::size_t> rows);

/// Random crop with 4-pixel zero padding and horizontal flip with probability 1/2.
Tensor augment(const Tensor& images, std::mt19937_64& rng);

}  // namespace dhat
