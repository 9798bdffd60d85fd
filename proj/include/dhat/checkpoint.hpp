#pragma once

#include <array>
#include <cstdint>
#include <json.hpp>
#include <optional>
#include <string>
#include <vector>

#include "dhat/architectures.hpp"

namespace dhat {

// File layout: "DHAT", uint32 LE version, uint64 LE header length, the JSON
// header, then every tensor's raw little-endian bytes in header order.
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  int epoch = 0;
  std::string stage = "main_head";
  std::string config_digest;
  std::uint64_t seed = 0;
};

struct StoredTensor {
  std::string name;
  Shape shape;
  std::vector<Real> values;
};

struct Checkpoint {
  CheckpointMeta meta;
  ArchSpec main_arch;
  std::optional<ArchSpec> second_arch;
  int attach_group = 1;
  bool has_merge = false;
  std::array<bool, 4> frozen{};
  bool enabled_main = true;
  bool enabled_second = true;
  std::vector<StoredTensor> tensors;
  /// Unknown header keys seen while loading.
  std::vector<std::string> warnings;
};

/// 64-bit FNV-1a of `text`, as 16 lowercase hex digits.
std::string fnv1a_hex(const std::string& text);

Checkpoint make_checkpoint(const DualHeadNetwork& net, const CheckpointMeta& meta);
std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes);

void save_checkpoint(const DualHeadNetwork& net, const CheckpointMeta& meta, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

/// Copies the stored values into `net`. Names and shapes are validated first
/// (CheckpointError naming the first offending tensor); when
/// `expected_digest` is given it must match the stored config digest.
void restore_checkpoint(DualHeadNetwork& net, const Checkpoint& ckpt,
                        const std::optional<std::string>& expected_digest = std::nullopt);

/// Rebuilds the network described by the checkpoint and loads its values.
/// With `expected_main` the main architecture is taken from the caller, so a
/// mismatching file is rejected.
DualHeadNetwork network_from_checkpoint(const Checkpoint& ckpt,
                                        const ArchSpec* expected_main = nullptr);

}  // namespace dhat
