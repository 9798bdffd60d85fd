#pragma once

#include <functional>
#include <span>
#include <string>

#include "dhat/attacks.hpp"

namespace dhat {

enum class ObjectiveKind { SAT, TRADES, MART };

std::string to_string(ObjectiveKind k);
ObjectiveKind objective_from_string(std::string_view s);

struct Objective {
  ObjectiveKind kind = ObjectiveKind::TRADES;
  /// Weight on the KL term (1/lambda); ignored by SAT.
  double inv_lambda = 6.0;
  AttackConfig attack;

  void validate() const;
};

/// The model as seen by a loss: `train` builds a differentiable graph in
/// training mode, `eval` is the read-only view used by the inner attack.
struct LossModel {
  std::function<Tensor(const Tensor&)> train;
  LogitsFn eval;
};

// Losses with a caller-supplied adversarial batch.
Tensor sat_loss_injected(const LossModel& model, const Tensor& x_adv, std::span<const int> y);
Tensor trades_loss_injected(const LossModel& model, const Tensor& x, const Tensor& x_adv,
                            std::span<const int> y, double inv_lambda);
Tensor mart_loss_injected(const LossModel& model, const Tensor& x, const Tensor& x_adv,
                          std::span<const int> y, double inv_lambda);

/// Probability floor inside the MART logarithms.
inline constexpr double kMartFloor = 1e-12;

/// Inner maximization for `objective`: CE-mode PGD for SAT and MART, KL-mode
/// PGD against the eval-mode clean logits for TRADES.
Tensor objective_adversary(const LossModel& model, const Tensor& x, std::span<const int> y,
                           const Objective& objective, const AttackOptions& options = {});

Tensor sat_loss(const LossModel& model, const Tensor& x, std::span<const int> y, const AttackConfig& attack,
                const AttackOptions& options = {});
Tensor trades_loss(const LossModel& model, const Tensor& x, std::span<const int> y, double inv_lambda,
                   const AttackConfig& attack, const AttackOptions& options = {});
Tensor mart_loss(const LossModel& model, const Tensor& x, std::span<const int> y, double inv_lambda,
                 const AttackConfig& attack, const AttackOptions& options = {});

Tensor objective_loss(const LossModel& model, const Tensor& x, std::span<const int> y,
                      const Objective& objective, const AttackOptions& options = {});

}  // namespace dhat
