#pragma once

#include <array>
#include <atomic>
#include <json.hpp>
#include <memory>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "dhat/merge_cnn.hpp"
#include "dhat/nn.hpp"
#include "dhat/tensor.hpp"

namespace dhat {

enum class Family { ResNet, WideResNet, SmallConv };

std::string to_string(Family f);
Family family_from_string(std::string_view s);

// Structural description of a single-head classifier. A classifier is a list
// of stages: stage 0 is the input convolution, stages 1..G are the residual
// groups (for smallconv, each further conv layer is a group), and the last
// stage is the classifier (pooling + FC).
struct ArchSpec {
  Family family = Family::SmallConv;
  int depth = 3;
  int widen_factor = 1;          // wideresnet and smallconv
  std::vector<int> group_sizes;  // resnet; derived from depth 18/34 when empty
  int num_classes = 10;
  int input_channels = 1;
  int input_size = 28;

  void validate() const;
  int num_groups() const;
  std::vector<int> blocks_per_group() const;
  /// Output channels of stage 0 followed by those of each group.
  std::vector<std::size_t> stage_widths() const;
  /// Spatial extent after stage 0 and after each group.
  std::vector<std::size_t> stage_extents() const;

  bool operator==(const ArchSpec&) const = default;
};

nlohmann::ordered_json arch_to_json(const ArchSpec& spec);
/// Strict: missing, mistyped, or unknown keys raise ConfigError naming `path.key`.
ArchSpec arch_from_json(const nlohmann::json& j, const std::string& path = "arch");

struct Stage {
  std::string name;
  std::unique_ptr<nn::Layer> layer;
};

using StageList = std::vector<Stage>;

Tensor forward_stages(StageList& stages, const Tensor& x, bool training);
void collect_stages(const StageList& stages, const std::string& prefix,
                    std::vector<nn::NamedTensor>& out);
StageList clone_stages(const StageList& stages);

class Classifier {
 public:
  ArchSpec spec;
  StageList stages;

  Tensor forward(const Tensor& x, bool training = false);
  std::vector<nn::NamedTensor> tensors() const;
  std::size_t parameter_count() const;
  Classifier clone() const;
};

Classifier build_network(const ArchSpec& spec, nn::Rng& rng);

enum class Region { Stem = 0, HeadMain = 1, HeadSecond = 2, Merge = 3 };
enum class HeadMode { Main, Second, Merged };
enum class InitMode { Copy, Fresh };

std::string to_string(Region r);
Region region_from_string(std::string_view s);
std::string to_string(HeadMode m);
HeadMode head_mode_from_string(std::string_view s);
std::string to_string(InitMode m);
InitMode init_mode_from_string(std::string_view s);

constexpr std::array<Region, 4> kAllRegions = {Region::Stem, Region::HeadMain,
                                               Region::HeadSecond, Region::Merge};

struct ParameterCensus {
  std::size_t stem = 0;
  std::size_t head_main = 0;
  std::size_t head_second = 0;
  std::size_t merge = 0;
  std::size_t total = 0;
  /// head_second / (stem + head_main): extra parameters relative to the base network.
  double second_over_base = 0.0;
  /// head_second / head_main.
  double second_over_main = 0.0;
};

class DualHeadNetwork {
 public:
  /// Cuts `base` after residual group `attach_group` (1-based). The result
  /// has a single (main) head.
  DualHeadNetwork(Classifier base, int attach_group = 1);
  DualHeadNetwork(DualHeadNetwork&&) noexcept = default;
  DualHeadNetwork& operator=(DualHeadNetwork&&) noexcept = default;

  void attach_second_head(const ArchSpec& second_spec, InitMode init, nn::Rng& rng);
  void attach_merge(nn::Rng& rng);

  struct Outputs {
    Tensor main;
    Tensor second;
    Tensor merged_logits;
  };

  /// Logits for main/second; probabilities for merged.
  Tensor forward(const Tensor& x, HeadMode mode, bool training = false);
  /// Raw outputs: head logits, or the merge CNN's pre-softmax values.
  Tensor logits(const Tensor& x, HeadMode mode, bool training = false);
  /// Evaluates the stem once and every head available to `mode`.
  Outputs forward_all(const Tensor& x, HeadMode mode, bool training = false,
                      MergeCNN::Trace* trace = nullptr);

  void set_freeze(Region region, bool frozen);
  bool frozen(Region region) const { return frozen_[static_cast<int>(region)]; }
  void set_enabled(HeadMode head, bool enabled);
  bool enabled(HeadMode head) const;

  bool has_second() const { return !head_second_.empty(); }
  bool has_merge() const { return merge_ != nullptr; }
  bool has_region(Region r) const;
  int attach_group() const { return attach_; }
  const ArchSpec& main_spec() const { return main_spec_; }
  const std::optional<ArchSpec>& second_spec() const { return second_spec_; }
  int num_classes() const { return main_spec_.num_classes; }
  MergeCNN* merge() { return merge_.get(); }

  /// Every parameter and buffer under a stable hierarchical name, in a fixed order.
  std::vector<nn::NamedTensor> tensors() const;
  std::vector<nn::NamedTensor> region_tensors(Region region) const;
  /// Parameters that the optimizer may update (not frozen).
  std::vector<Tensor> trainable_parameters() const;

  ParameterCensus census() const;

  /// Number of stem evaluations since construction.
  std::size_t stem_calls() const { return stem_calls_->load(); }

  using Snapshot = std::vector<std::vector<Real>>;
  Snapshot snapshot() const;
  void restore(const Snapshot& snap);

  DualHeadNetwork clone() const;
  /// The single-head classifier made of the stem and the main head.
  Classifier main_classifier() const;

 private:
  DualHeadNetwork() = default;
  Tensor run_stem(const Tensor& x, bool training);
  bool region_training(Region r, bool training) const;
  void apply_freeze(Region region);

  ArchSpec main_spec_;
  std::optional<ArchSpec> second_spec_;
  int attach_ = 1;
  StageList stem_;
  StageList head_main_;
  StageList head_second_;
  std::unique_ptr<MergeCNN> merge_;
  std::array<bool, 4> frozen_{};
  bool enabled_main_ = true;
  bool enabled_second_ = true;
  std::unique_ptr<std::atomic<std::size_t>> stem_calls_ =
      std::make_unique<std::atomic<std::size_t>>(0);
};

DualHeadNetwork attach_second_head(Classifier base, int attach_group, const ArchSpec& second_spec,
                                   InitMode init, nn::Rng& rng);

ParameterCensus parameter_census(const DualHeadNetwork& net);

}  // namespace dhat
