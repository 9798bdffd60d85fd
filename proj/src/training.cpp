#include "dhat/training.hpp"

#include <algorithm>
#include <cmath>

#include "dhat/error.hpp"
#include "dhat/evaluation.hpp"

namespace dhat {

void OptimizerConfig::validate() const {
  if (!(lr > 0)) throw ArgumentError("lr must be > 0");
  if (!(momentum >= 0)) throw ArgumentError("momentum must be >= 0");
  if (!(weight_decay >= 0)) throw ArgumentError("weight_decay must be >= 0");
  for (const auto& [epoch, mult] : milestones) {
    if (epoch < 1) throw ArgumentError("milestone epochs are 1-based");
    if (!(mult > 0)) throw ArgumentError("milestone multipliers must be > 0");
  }
}

double OptimizerConfig::lr_at(int epoch) const {
  double rate = lr;
  for (const auto& [at, mult] : milestones) {
    if (at <= epoch) rate *= mult;
  }
  return rate;
}

Sgd::Sgd(OptimizerConfig cfg) : cfg_(std::move(cfg)) { cfg_.validate(); }

void Sgd::step(std::span<Tensor> params, std::span<const std::vector<Real>> grads, int epoch) {
  if (params.size() != grads.size()) throw ArgumentError("sgd: one gradient per parameter required");
  if (velocity_.empty()) {
    for (const auto& p : params) velocity_.emplace_back(p.numel(), Real(0));
  }
  if (velocity_.size() != params.size()) throw StateError("sgd: parameter list changed between steps");
  const Real lr = static_cast<Real>(cfg_.lr_at(epoch));
  const Real m = static_cast<Real>(cfg_.momentum), wd = static_cast<Real>(cfg_.weight_decay);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto w = params[i].mutable_data();
    auto& v = velocity_[i];
    const auto& g = grads[i];
    if (g.size() != w.size() || v.size() != w.size()) throw DimensionError("sgd: gradient size mismatch");
    for (std::size_t k = 0; k < w.size(); ++k) {
      v[k] = m * v[k] + (g[k] + wd * w[k]);
      w[k] -= lr * v[k];
    }
  }
}

std::string to_string(TrainStage s) {
  switch (s) {
    case TrainStage::MainHead: return "main_head";
    case TrainStage::SecondHead: return "second_head";
    case TrainStage::Merge: return "merge";
  }
  return "?";
}

TrainStage stage_from_string(std::string_view s) {
  if (s == "main_head") return TrainStage::MainHead;
  if (s == "second_head") return TrainStage::SecondHead;
  if (s == "merge") return TrainStage::Merge;
  throw ArgumentError("unknown stage '" + std::string(s) + "'");
}

HeadMode stage_head(TrainStage s) {
  switch (s) {
    case TrainStage::MainHead: return HeadMode::Main;
    case TrainStage::SecondHead: return HeadMode::Second;
    case TrainStage::Merge: return HeadMode::Merged;
  }
  return HeadMode::Main;
}

std::vector<Region> stage_frozen_regions(TrainStage s) {
  switch (s) {
    case TrainStage::MainHead: return {};
    case TrainStage::SecondHead: return {Region::Stem, Region::HeadMain};
    case TrainStage::Merge: return {Region::Stem, Region::HeadMain, Region::HeadSecond};
  }
  return {};
}

void TrainPlan::validate() const {
  objective.validate();
  optimizer.validate();
  val_attack.validate();
  if (epochs < 0) throw ArgumentError("epochs must be >= 0");
  if (batch_size == 0) throw ArgumentError("batch_size must be > 0");
  if (first_epoch < 1) throw ArgumentError("first_epoch must be >= 1");
}

TrainPlan merge_stage_plan(const AttackConfig& attack) {
  TrainPlan p;
  p.stage = TrainStage::Merge;
  p.objective = Objective{ObjectiveKind::TRADES, 2.0, attack};
  p.objective.attack.loss_mode = AttackLoss::KL;
  p.epochs = 15;
  p.optimizer = OptimizerConfig{0.02, 0.9, 2e-4, {}};
  p.val_attack = attack;
  p.val_attack.loss_mode = AttackLoss::CE;
  return p;
}

int select_best_checkpoint(std::span<const CheckpointRecord> history) {
  if (history.empty()) throw ArgumentError("select_best_checkpoint: empty history");
  const CheckpointRecord* best = &history[0];
  for (const auto& r : history) {
    if (r.robust_val_acc > best->robust_val_acc) best = &r;
  }
  return best->epoch;
}

StageResult train_stage(DualHeadNetwork& net, const TrainPlan& plan, const Dataset& train,
                        const Dataset& val, const TrainOptions& options) {
  plan.validate();
  if (plan.stage == TrainStage::SecondHead && !net.has_second()) {
    throw StateError("second_head stage needs an attached second head");
  }
  if (plan.stage == TrainStage::Merge && !net.has_merge()) throw StateError("merge stage needs an attached merge CNN");
  for (Region r : stage_frozen_regions(plan.stage)) {
    if (!net.frozen(r)) {
      throw StateError("stage " + to_string(plan.stage) + " requires region " + to_string(r) + " to be frozen");
    }
  }
  for (Region r : plan.freeze_regions) {
    if (net.has_region(r)) net.set_freeze(r, true);
  }

  StageResult result;
  if (plan.epochs == 0) return result;
  train.validate();
  val.validate();

  const HeadMode head = stage_head(plan.stage);
  LossModel model{[&net, head](const Tensor& x) { return net.logits(x, head, true); },
                  [&net, head](const Tensor& x) { return net.logits(x, head, false); }};
  std::vector<Tensor> params = net.trainable_parameters();
  Sgd opt(plan.optimizer);
  AttackConfig val_attack = plan.val_attack;
  val_attack.loss_mode = AttackLoss::CE;
  EvalOptions eval_opts{options.eval_batch_size, mix_seed(plan.seed, 0xe7a1), options.workers};

  std::optional<DualHeadNetwork::Snapshot> best_snapshot;
  double best_robust = -1;

  for (int i = 0; i < plan.epochs; ++i) {
    const int epoch = plan.first_epoch + i;
    const auto order = epoch_order(train.size(), plan.seed, epoch);
    std::mt19937_64 aug_rng(mix_seed(plan.seed, 0xa06, static_cast<std::uint64_t>(epoch)));
    double loss_sum = 0;
    for (std::size_t b = 0; b < order.size(); b += plan.batch_size) {
      const std::size_t e = std::min(order.size(), b + plan.batch_size);
      Batch batch = make_batch(train, std::span<const std::size_t>(order.data() + b, e - b));
      Tensor x = plan.augment ? augment(batch.x, aug_rng) : batch.x;
      AttackOptions ao;
      ao.seed = mix_seed(plan.seed, 0xad5, static_cast<std::uint64_t>(epoch));
      ao.workers = options.workers;
      ao.sample_ids = batch.ids;
      Tensor loss = objective_loss(model, x, batch.y, plan.objective, ao);
      if (!std::isfinite(static_cast<double>(loss.item()))) throw NumericError("training loss is not finite");
      if (!params.empty()) opt.step(params, gradients(loss, params), epoch);
      loss_sum += static_cast<double>(loss.item()) * static_cast<double>(e - b);
    }

    CheckpointRecord rec;
    rec.epoch = epoch;
    rec.lr = plan.optimizer.lr_at(epoch);
    rec.train_loss = loss_sum / static_cast<double>(train.size());
    const RobustResult vr = evaluate_robust(model.eval, val, val_attack, eval_opts);
    rec.clean_val_acc = vr.clean_accuracy;
    rec.robust_val_acc = vr.robust_accuracy;
    if (plan.keep_snapshots) rec.snapshot = net.snapshot();
    if (plan.select_best && rec.robust_val_acc > best_robust) {
      best_robust = rec.robust_val_acc;
      best_snapshot = rec.snapshot ? *rec.snapshot : net.snapshot();
    }
    if (options.on_epoch) options.on_epoch(plan.stage, rec);
    result.history.push_back(std::move(rec));
  }

  result.kept_epoch = result.history.back().epoch;
  if (plan.select_best) {
    result.kept_epoch = select_best_checkpoint(result.history);
    net.restore(*best_snapshot);
  }
  return result;
}

namespace {

TrainStage stage_of(int stage) {
  switch (stage) {
    case 1: return TrainStage::MainHead;
    case 2: return TrainStage::SecondHead;
    case 3: return TrainStage::Merge;
  }
  throw ArgumentError("pipeline stages are numbered 1..3");
}

}  // namespace

Checkpoint pipeline_checkpoint(const DualHeadNetwork& net, int stage, int epoch, const PipelineConfig& cfg) {
  return make_checkpoint(net, CheckpointMeta{epoch, to_string(stage_of(stage)), cfg.config_digest, cfg.seed});
}

DualHeadNetwork pipeline_initial_network(const PipelineConfig& cfg) {
  cfg.main_arch.validate();
  if (cfg.pretrained) {
    DualHeadNetwork loaded = network_from_checkpoint(*cfg.pretrained, &cfg.main_arch);
    return DualHeadNetwork(loaded.main_classifier(), cfg.attach_group);
  }
  nn::Rng rng(mix_seed(cfg.seed, 1));
  return DualHeadNetwork(build_network(cfg.main_arch, rng), cfg.attach_group);
}

StageResult run_pipeline_stage(DualHeadNetwork& net, int stage, const PipelineConfig& cfg, const Dataset& train,
                               const Dataset& val, const TrainOptions& options) {
  const TrainStage kind = stage_of(stage);
  TrainPlan plan = stage == 1 ? cfg.stage1 : stage == 2 ? cfg.stage2 : cfg.stage3;
  plan.stage = kind;
  if (stage == 1 && cfg.pretrained) {
    StageResult r;
    r.kept_epoch = cfg.pretrained->meta.epoch;
    return r;
  }
  nn::Rng rng(mix_seed(cfg.seed, static_cast<std::uint64_t>(stage)));
  if (stage == 2 && !net.has_second()) {
    net.attach_second_head(cfg.second_arch.value_or(cfg.main_arch), plan.init_second, rng);
  }
  if (stage == 3 && !net.has_merge()) net.attach_merge(rng);
  for (Region r : stage_frozen_regions(kind)) net.set_freeze(r, true);
  return train_stage(net, plan, train, val, options);
}

PipelineResult dhat_pipeline(const PipelineConfig& cfg, const Dataset& train, const Dataset& val,
                             const TrainOptions& options) {
  if (cfg.last_stage < 1 || cfg.last_stage > 3) throw ArgumentError("last_stage must be 1, 2 or 3");
  PipelineResult out{pipeline_initial_network(cfg), {}, {}};
  for (int stage = 1; stage <= cfg.last_stage; ++stage) {
    StageResult r = run_pipeline_stage(out.net, stage, cfg, train, val, options);
    out.checkpoints.push_back(pipeline_checkpoint(out.net, stage, r.kept_epoch, cfg));
    out.stages.push_back(std::move(r));
  }
  return out;
}

}  // namespace dhat
