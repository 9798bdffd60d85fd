#pragma once

#include <cstdint>
#include <functional>
#include <json.hpp>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dhat/tensor.hpp"

namespace dhat {

enum class AttackLoss { CE, KL };

std::string to_string(AttackLoss l);
AttackLoss attack_loss_from_string(std::string_view s);

struct AttackConfig {
  double epsilon = 8.0 / 255.0;
  /// Unset means 2.5 * epsilon / num_steps.
  std::optional<double> step_size;
  int num_steps = 10;
  int restarts = 1;
  bool random_start = true;
  AttackLoss loss_mode = AttackLoss::CE;
  double lo = 0.0;
  double hi = 1.0;

  void validate() const;
  double effective_step_size() const;
};

double derive_step_size(double epsilon, int num_steps);

nlohmann::ordered_json attack_to_json(const AttackConfig& cfg);

/// Maps a batch of inputs to logits. Attacks call it with the model in
/// evaluation mode; it must not mutate the model.
using LogitsFn = std::function<Tensor(const Tensor&)>;

/// clamp(clamp(x_adv, x - eps, x + eps), lo, hi), element-wise.
Tensor project_linf(const Tensor& x_adv, const Tensor& x, double epsilon, double lo = 0.0,
                    double hi = 1.0);

struct AttackOptions {
  std::uint64_t seed = 0;
  /// Parallel chunks; results do not depend on this value.
  std::size_t workers = 1;
  /// Stable per-sample identifiers seeding the random starts; defaults to 0..N-1.
  std::vector<std::uint64_t> sample_ids;
  /// Index of the first restart; restart r always draws from stream (seed, id, r).
  int first_restart = 0;
};

struct AttackResult {
  Tensor x_adv;
  /// Per-sample attack loss at the returned point.
  std::vector<double> loss;
  /// restart_losses[r][n]: final loss of restart r for sample n.
  std::vector<std::vector<double>> restart_losses;
};

/// One signed-gradient step of size epsilon on the cross-entropy.
Tensor fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> labels, double epsilon,
            double lo = 0.0, double hi = 1.0);

/// Projected gradient ascent. CE mode needs `labels`; KL mode needs the clean
/// logits as `reference` and maximizes KL(softmax(reference) || softmax(f(x'))).
AttackResult pgd(const LogitsFn& model, const Tensor& x, std::span<const int> labels,
                 const Tensor& reference, const AttackConfig& cfg, const AttackOptions& options = {});

/// Per-sample attack loss at `x` (CE against labels or KL against reference).
std::vector<double> attack_loss(const LogitsFn& model, const Tensor& x, std::span<const int> labels,
                                const Tensor& reference, AttackLoss mode);

/// splitmix64-style mixing of (seed, a, b) into an independent stream seed.
std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b = 0);

}  // namespace dhat
