#pragma once

#include <array>
#include <cstdint>
#include <json.hpp>
#include <string>
#include <vector>

#include "dhat/architectures.hpp"
#include "dhat/attacks.hpp"
#include "dhat/data.hpp"

namespace dhat {

/// Eval-mode logits of one head (pre-softmax values for the merged output).
LogitsFn head_logits(DualHeadNetwork& net, HeadMode mode);

struct EvalOptions {
  std::size_t batch_size = 256;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
};

/// Row-wise argmax; ties resolve to the lowest class index.
std::vector<int> argmax_rows(const Tensor& logits);

std::vector<int> predict(const LogitsFn& model, const Tensor& images, std::size_t batch_size = 256);

double evaluate_clean(const LogitsFn& model, const Dataset& ds, std::size_t batch_size = 256);
double evaluate_clean(DualHeadNetwork& net, const Dataset& ds, HeadMode mode, std::size_t batch_size = 256);

struct RobustResult {
  double clean_accuracy = 0;
  /// A sample counts iff it is classified correctly both before and after the attack.
  double robust_accuracy = 0;
  std::vector<int> clean_pred;
  std::vector<int> adv_pred;
};

/// Attacks every sample (CE mode, random starts keyed by dataset row) and
/// classifies the result.
RobustResult evaluate_robust(const LogitsFn& model, const Dataset& ds, const AttackConfig& cfg,
                             const EvalOptions& options = {});
RobustResult evaluate_robust(DualHeadNetwork& net, const Dataset& ds, const AttackConfig& cfg,
                             HeadMode mode, const EvalOptions& options = {});

/// Adversarial examples for every row of `ds`, generated in batches.
Tensor generate_adversarial(const LogitsFn& model, const Dataset& ds, const AttackConfig& cfg,
                            const EvalOptions& options = {});

struct CrossTable {
  /// accuracy[s][t]: examples crafted on model s, classified by model t.
  std::array<std::array<double, 2>, 2> accuracy{};
  std::array<double, 2> clean_accuracy{};
  /// predictions[s][t][n]
  std::array<std::array<std::vector<int>, 2>, 2> predictions;
  std::array<std::vector<int>, 2> clean_predictions;
};

CrossTable cross_evaluate(const LogitsFn& model_a, const LogitsFn& model_b, const Dataset& ds,
                          const AttackConfig& cfg, const EvalOptions& options = {});

nlohmann::ordered_json cross_table_to_json(const CrossTable& t, bool with_predictions = true);

/// Writes `<prefix>_noise.png` = clamp(0.5 + gain (x_adv - x), 0, 1) and
/// `<prefix>_adv.png` = x_adv for one image ([C,H,W] or [1,C,H,W], C in {1,3}).
void export_noise(const Tensor& x, const Tensor& x_adv, double gain, const std::string& prefix);

/// 8-bit grayscale or RGB PNG from a [C,H,W] image in [0,1].
void write_png(const Tensor& image, const std::string& path);
/// Decodes an 8-bit grayscale or RGB PNG into [C,H,W] values byte/255.
Tensor read_png(const std::string& path);

struct AttackEntry {
  std::string name;
  AttackConfig config;
  double robust_accuracy = 0;
};

struct EvalReport {
  std::string model_id;
  std::string model_digest;
  std::string dataset_id;
  std::string heads = "main";
  double clean_accuracy = 0;
  std::vector<AttackEntry> attacks;
  std::uint64_t seed = 0;
  double wall_time_s = 0;
};

nlohmann::ordered_json report_to_json(const EvalReport& r);

}  // namespace dhat
