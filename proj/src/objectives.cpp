#include "dhat/objectives.hpp"

#include "dhat/error.hpp"
#include "dhat/ops.hpp"

namespace dhat {

std::string to_string(ObjectiveKind k) {
  switch (k) {
    case ObjectiveKind::SAT: return "sat";
    case ObjectiveKind::TRADES: return "trades";
    case ObjectiveKind::MART: return "mart";
  }
  return "?";
}

ObjectiveKind objective_from_string(std::string_view s) {
  if (s == "sat") return ObjectiveKind::SAT;
  if (s == "trades") return ObjectiveKind::TRADES;
  if (s == "mart") return ObjectiveKind::MART;
  throw ArgumentError("unknown objective '" + std::string(s) + "'");
}

void Objective::validate() const {
  if (kind != ObjectiveKind::SAT && !(inv_lambda >= 0)) throw ArgumentError("inv_lambda must be >= 0");
  attack.validate();
}

namespace {

void check_lambda(double inv_lambda) {
  if (!(inv_lambda >= 0)) throw ArgumentError("inv_lambda must be >= 0");
}

Tensor detached_input(const Tensor& x) {
  Tensor d = x.detach();
  d.set_requires_grad(false);
  return d;
}

}  // namespace

Tensor sat_loss_injected(const LossModel& model, const Tensor& x_adv, std::span<const int> y) {
  return ops::cross_entropy(model.train(detached_input(x_adv)), y);
}

Tensor trades_loss_injected(const LossModel& model, const Tensor& x, const Tensor& x_adv,
                            std::span<const int> y, double inv_lambda) {
  check_lambda(inv_lambda);
  Tensor z = model.train(detached_input(x));
  Tensor ce = ops::cross_entropy(z, y);
  if (inv_lambda == 0) return ce;
  Tensor kl = ops::mean(ops::kl_divergence_logits(z, model.train(detached_input(x_adv))));
  return ops::add(ce, ops::scale(kl, static_cast<Real>(inv_lambda)));
}

Tensor mart_loss_injected(const LossModel& model, const Tensor& x, const Tensor& x_adv,
                          std::span<const int> y, double inv_lambda) {
  check_lambda(inv_lambda);
  Tensor z_adv = model.train(detached_input(x_adv));
  const std::size_t n = z_adv.dim(0), c = z_adv.dim(1);
  if (y.size() != n) throw ArgumentError("mart: one label per sample required");
  Tensor p_adv = ops::softmax(z_adv);

  // Strongest wrong class of the adversarial output.
  std::vector<int> runner_up(n);
  {
    auto p = p_adv.data();
    for (std::size_t i = 0; i < n; ++i) {
      int best = -1;
      for (std::size_t k = 0; k < c; ++k) {
        if (static_cast<int>(k) == y[i]) continue;
        if (best < 0 || p[i * c + k] > p[i * c + best]) best = static_cast<int>(k);
      }
      runner_up[i] = best;
    }
  }
  const Real floor = static_cast<Real>(kMartFloor);
  Tensor true_term = ops::log(ops::clamp(ops::pick(p_adv, y), floor, 1));
  Tensor wrong_term = ops::log(ops::clamp(ops::add_scalar(ops::scale(ops::pick(p_adv, runner_up), -1), 1), floor, 1));
  Tensor bce = ops::scale(ops::mean(ops::add(true_term, wrong_term)), -1);
  if (inv_lambda == 0) return bce;

  Tensor z = model.train(detached_input(x));
  Tensor weight = ops::add_scalar(ops::scale(ops::pick(ops::softmax(z), y), -1), 1);
  Tensor kl = ops::mean(ops::mul(ops::kl_divergence_logits(z, z_adv), weight));
  return ops::add(bce, ops::scale(kl, static_cast<Real>(inv_lambda)));
}

Tensor objective_adversary(const LossModel& model, const Tensor& x, std::span<const int> y,
                           const Objective& objective, const AttackOptions& options) {
  AttackConfig cfg = objective.attack;
  Tensor reference;
  if (objective.kind == ObjectiveKind::TRADES) {
    cfg.loss_mode = AttackLoss::KL;
    NoGradGuard guard;
    reference = model.eval(x);
  } else {
    cfg.loss_mode = AttackLoss::CE;
  }
  return pgd(model.eval, x, y, reference, cfg, options).x_adv;
}

Tensor sat_loss(const LossModel& model, const Tensor& x, std::span<const int> y, const AttackConfig& attack,
                const AttackOptions& options) {
  return objective_loss(model, x, y, Objective{ObjectiveKind::SAT, 0, attack}, options);
}

Tensor trades_loss(const LossModel& model, const Tensor& x, std::span<const int> y, double inv_lambda,
                   const AttackConfig& attack, const AttackOptions& options) {
  return objective_loss(model, x, y, Objective{ObjectiveKind::TRADES, inv_lambda, attack}, options);
}

Tensor mart_loss(const LossModel& model, const Tensor& x, std::span<const int> y, double inv_lambda,
                 const AttackConfig& attack, const AttackOptions& options) {
  return objective_loss(model, x, y, Objective{ObjectiveKind::MART, inv_lambda, attack}, options);
}

Tensor objective_loss(const LossModel& model, const Tensor& x, std::span<const int> y,
                      const Objective& objective, const AttackOptions& options) {
  objective.validate();
  // With a zero TRADES weight the adversary cannot influence the loss.
  if (objective.kind == ObjectiveKind::TRADES && objective.inv_lambda == 0) {
    return trades_loss_injected(model, x, x, y, 0);
  }
  Tensor x_adv = objective_adversary(model, x, y, objective, options);
  switch (objective.kind) {
    case ObjectiveKind::SAT: return sat_loss_injected(model, x_adv, y);
    case ObjectiveKind::TRADES: return trades_loss_injected(model, x, x_adv, y, objective.inv_lambda);
    case ObjectiveKind::MART: return mart_loss_injected(model, x, x_adv, y, objective.inv_lambda);
  }
  throw ArgumentError("unknown objective");
}

}  // namespace dhat
