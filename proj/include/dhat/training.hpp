#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dhat/architectures.hpp"
#include "dhat/checkpoint.hpp"
#include "dhat/data.hpp"
#include "dhat/objectives.hpp"

namespace dhat {

struct OptimizerConfig {
  double lr = 0.1;
  double momentum = 0.9;
  double weight_decay = 2e-4;
  /// (epoch, multiplier): from that 1-based epoch on, the rate is multiplied.
  std::vector<std::pair<int, double>> milestones;

  void validate() const;
  double lr_at(int epoch) const;
};

/// Momentum SGD with coupled weight decay:
///   v <- m v + (g + wd w);  w <- w - lr(epoch) v
class Sgd {
 public:
  explicit Sgd(OptimizerConfig cfg);
  void step(std::span<Tensor> params, std::span<const std::vector<Real>> grads, int epoch);
  const OptimizerConfig& config() const { return cfg_; }

 private:
  OptimizerConfig cfg_;
  std::vector<std::vector<Real>> velocity_;
};

enum class TrainStage { MainHead, SecondHead, Merge };

std::string to_string(TrainStage s);
TrainStage stage_from_string(std::string_view s);
/// Head whose output a stage optimizes.
HeadMode stage_head(TrainStage s);
/// Regions a stage requires to be frozen.
std::vector<Region> stage_frozen_regions(TrainStage s);

struct TrainPlan {
  TrainStage stage = TrainStage::MainHead;
  Objective objective;
  int epochs = 1;
  OptimizerConfig optimizer;
  /// Frozen in addition to the stage's own requirements.
  std::vector<Region> freeze_regions;
  InitMode init_second = InitMode::Copy;
  std::uint64_t seed = 0;
  std::size_t batch_size = 64;
  bool augment = false;
  /// Epoch number of the first epoch (for schedules that continue a run).
  int first_epoch = 1;
  /// Attack used to monitor robust validation accuracy (CE mode).
  AttackConfig val_attack;
  /// Keep a parameter snapshot for every epoch in the history.
  bool keep_snapshots = false;
  /// Restore the best validation epoch when the stage ends.
  bool select_best = false;

  void validate() const;
};

/// Default plan for the merge stage: TRADES with weight 2, lr 0.02 constant,
/// momentum 0.9, weight decay 2e-4, 15 epochs.
TrainPlan merge_stage_plan(const AttackConfig& attack);

struct CheckpointRecord {
  int epoch = 0;
  double train_loss = 0;
  double clean_val_acc = 0;
  double robust_val_acc = 0;
  double lr = 0;
  std::optional<DualHeadNetwork::Snapshot> snapshot;
};

/// Epoch (1-based, as recorded) with the highest robust validation accuracy;
/// the earliest one on ties.
int select_best_checkpoint(std::span<const CheckpointRecord> history);

struct TrainOptions {
  std::size_t workers = 1;
  std::size_t eval_batch_size = 256;
  /// Called after every epoch.
  std::function<void(TrainStage, const CheckpointRecord&)> on_epoch;
};

struct StageResult {
  std::vector<CheckpointRecord> history;
  /// Epoch whose parameters the network holds on return (0 when no epoch ran).
  int kept_epoch = 0;
};

/// Runs the plan on `net`. The network's freeze flags must already cover the
/// stage's requirements (StateError otherwise).
StageResult train_stage(DualHeadNetwork& net, const TrainPlan& plan, const Dataset& train,
                        const Dataset& val, const TrainOptions& options = {});

struct PipelineConfig {
  ArchSpec main_arch;
  /// Defaults to main_arch.
  std::optional<ArchSpec> second_arch;
  int attach_group = 1;
  std::uint64_t seed = 0;
  std::string config_digest;
  /// Plans for the main-head, second-head and merge stages.
  TrainPlan stage1, stage2, stage3;
  /// Skip stage-1 training and start from this single-head network instead.
  std::optional<Checkpoint> pretrained;
  /// Stop after this stage (1..3).
  int last_stage = 3;
};

struct PipelineResult {
  DualHeadNetwork net;
  std::vector<Checkpoint> checkpoints;
  std::vector<StageResult> stages;
};

/// Network the pipeline starts from: the pretrained main path, or a fresh build.
DualHeadNetwork pipeline_initial_network(const PipelineConfig& cfg);

/// Runs pipeline stage 1, 2 or 3 on `net`. Stage 2 attaches the second head
/// and stage 3 the merge CNN when they are missing; the stage's freeze set is
/// applied before training.
StageResult run_pipeline_stage(DualHeadNetwork& net, int stage, const PipelineConfig& cfg, const Dataset& train,
                               const Dataset& val, const TrainOptions& options = {});

Checkpoint pipeline_checkpoint(const DualHeadNetwork& net, int stage, int epoch, const PipelineConfig& cfg);

PipelineResult dhat_pipeline(const PipelineConfig& cfg, const Dataset& train, const Dataset& val,
                             const TrainOptions& options = {});

}  // namespace dhat
