#pragma once

#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "dhat/data.hpp"
#include "dhat/training.hpp"

namespace dhat {

struct DataConfig {
  /// "synth", "idx" or "cifar".
  std::string source = "synth";
  SynthSpec synth;
  int test_per_class = 100;
  std::string train_images, train_labels, test_images, test_labels;
  std::vector<std::string> train_files, test_files;
  int num_classes = 0;
  /// 0 keeps every sample.
  std::size_t limit_train = 0;
  std::size_t limit_test = 0;
  /// Leading test rows used for validation; unset selects default_val_size.
  std::optional<std::size_t> val_size;
};

struct NamedAttack {
  std::string name;
  AttackConfig config;
};

struct RunConfig {
  DataConfig data;
  PipelineConfig pipeline;
  /// Stage-1 checkpoint to start from instead of training the main head.
  std::optional<std::string> pretrained_path;
  std::vector<NamedAttack> eval;
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  /// The document as parsed, used for the config digest.
  nlohmann::json document;
};

/// Strict attack section; unknown keys and bad types raise ConfigError.
AttackConfig attack_from_json(const nlohmann::json& j, const std::string& path);
TrainPlan plan_from_json(const nlohmann::json& j, const std::string& path, TrainStage stage,
                         const ArchSpec& main, const std::optional<ArchSpec>& second);

/// Validates the whole document before anything runs. `seed_override`
/// replaces the top-level seed (and enters the digest).
RunConfig parse_run_config(nlohmann::json j, std::optional<std::uint64_t> seed_override = std::nullopt);
RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override = std::nullopt);

/// 1000 validation samples, or 20% of the test set when it has fewer than 5000.
std::size_t default_val_size(std::size_t test_size);

struct RunData {
  Dataset train;
  Dataset val;
  Dataset test;
};

/// Loads or generates the datasets and checks them against the architecture.
RunData load_run_data(const RunConfig& cfg);

}  // namespace dhat
