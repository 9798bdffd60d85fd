#include "dhat/checkpoint.hpp"

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "dhat/error.hpp"

namespace dhat {

namespace {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

constexpr const char* kNativeDtype = sizeof(Real) == 8 ? "f64" : "f32";

void put_le(std::vector<unsigned char>& out, std::uint64_t v, int bytes) {
  for (int i = 0; i < bytes; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_le(const unsigned char* p, int bytes) {
  std::uint64_t v = 0;
  for (int i = bytes - 1; i >= 0; --i) v = (v << 8) | p[i];
  return v;
}

nlohmann::ordered_json structure_json(const Checkpoint& c) {
  nlohmann::ordered_json j;
  j["main_arch"] = arch_to_json(c.main_arch);
  j["second_arch"] = c.second_arch ? nlohmann::ordered_json(arch_to_json(*c.second_arch)) : nullptr;
  j["attach_group"] = c.attach_group;
  j["has_merge"] = c.has_merge;
  nlohmann::ordered_json frozen;
  for (Region r : kAllRegions) frozen[to_string(r)] = c.frozen[static_cast<int>(r)];
  j["frozen"] = frozen;
  j["enabled"] = {{"main", c.enabled_main}, {"second", c.enabled_second}};
  return j;
}

template <typename T>
T field(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) throw FormatError(std::string("checkpoint header lacks '") + key + "'");
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header field '") + key + "': " + e.what());
  }
}

void note_unknown(const nlohmann::json& j, const std::set<std::string>& known, const std::string& where,
                  std::vector<std::string>& warnings) {
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) warnings.push_back("ignoring unknown header key '" + where + key + "'");
  }
}

}  // namespace

std::string fnv1a_hex(const std::string& text) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  static const char* digits = "0123456789abcdef";
  std::string out(16, '0');
  for (int i = 15; i >= 0; --i) {
    out[static_cast<std::size_t>(i)] = digits[h & 0xf];
    h >>= 4;
  }
  return out;
}

Checkpoint make_checkpoint(const DualHeadNetwork& net, const CheckpointMeta& meta) {
  Checkpoint c;
  c.meta = meta;
  c.main_arch = net.main_spec();
  c.second_arch = net.second_spec();
  c.attach_group = net.attach_group();
  c.has_merge = net.has_merge();
  for (Region r : kAllRegions) c.frozen[static_cast<int>(r)] = net.frozen(r);
  c.enabled_main = net.enabled(HeadMode::Main);
  c.enabled_second = net.enabled(HeadMode::Second);
  for (const auto& t : net.tensors()) {
    for (Real v : t.tensor.data()) {
      if (!std::isfinite(v)) throw NumericError("checkpoint: tensor '" + t.name + "' is not finite");
    }
    c.tensors.push_back({t.name, t.tensor.shape(), {t.tensor.data().begin(), t.tensor.data().end()}});
  }
  return c;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& c) {
  nlohmann::ordered_json header;
  header["format"] = "DHAT";
  header["version"] = kCheckpointVersion;
  nlohmann::ordered_json meta;
  meta["epoch"] = c.meta.epoch;
  meta["stage"] = c.meta.stage;
  meta["config_digest"] = c.meta.config_digest;
  meta["seed"] = c.meta.seed;
  header["metadata"] = meta;
  header["network"] = structure_json(c);
  nlohmann::ordered_json index = nlohmann::ordered_json::array();
  std::uint64_t offset = 0;
  for (const auto& t : c.tensors) {
    const std::uint64_t length = t.values.size() * sizeof(Real);
    nlohmann::ordered_json e;
    e["name"] = t.name;
    e["dtype"] = kNativeDtype;
    e["shape"] = t.shape;
    e["offset"] = offset;
    e["length"] = length;
    index.push_back(e);
    offset += length;
  }
  header["tensors"] = index;
  const std::string text = header.dump();

  std::vector<unsigned char> out = {'D', 'H', 'A', 'T'};
  put_le(out, kCheckpointVersion, 4);
  put_le(out, text.size(), 8);
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& t : c.tensors) {
    const auto* p = reinterpret_cast<const unsigned char*>(t.values.data());
    out.insert(out.end(), p, p + t.values.size() * sizeof(Real));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), "DHAT", 4) != 0) {
    throw FormatError("not a DHAT checkpoint (bad magic)");
  }
  const auto version = static_cast<std::uint32_t>(get_le(&bytes[4], 4));
  if (version != kCheckpointVersion) {
    throw FormatError("unsupported checkpoint version " + std::to_string(version));
  }
  const std::uint64_t hlen = get_le(&bytes[8], 8);
  if (hlen > bytes.size() - 16) throw FormatError("checkpoint header runs past the end of the file");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(hlen));
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("checkpoint header is not valid JSON: ") + e.what());
  }
  const std::size_t payload = 16 + hlen;

  Checkpoint c;
  note_unknown(header, {"format", "version", "metadata", "network", "tensors"}, "", c.warnings);
  const auto meta = field<nlohmann::json>(header, "metadata");
  note_unknown(meta, {"epoch", "stage", "config_digest", "seed"}, "metadata.", c.warnings);
  c.meta.epoch = field<int>(meta, "epoch");
  c.meta.stage = field<std::string>(meta, "stage");
  c.meta.config_digest = field<std::string>(meta, "config_digest");
  c.meta.seed = field<std::uint64_t>(meta, "seed");

  const auto net = field<nlohmann::json>(header, "network");
  note_unknown(net, {"main_arch", "second_arch", "attach_group", "has_merge", "frozen", "enabled"},
               "network.", c.warnings);
  try {
    c.main_arch = arch_from_json(field<nlohmann::json>(net, "main_arch"), "network.main_arch");
    const auto second = field<nlohmann::json>(net, "second_arch");
    if (!second.is_null()) c.second_arch = arch_from_json(second, "network.second_arch");
  } catch (const ConfigError& e) {
    throw FormatError(std::string("checkpoint architecture: ") + e.what());
  }
  c.attach_group = field<int>(net, "attach_group");
  c.has_merge = field<bool>(net, "has_merge");
  const auto frozen = field<nlohmann::json>(net, "frozen");
  for (Region r : kAllRegions) c.frozen[static_cast<int>(r)] = field<bool>(frozen, to_string(r).c_str());
  const auto enabled = field<nlohmann::json>(net, "enabled");
  c.enabled_main = field<bool>(enabled, "main");
  c.enabled_second = field<bool>(enabled, "second");

  const auto index = field<nlohmann::json>(header, "tensors");
  if (!index.is_array()) throw FormatError("checkpoint tensor index must be an array");
  for (const auto& e : index) {
    StoredTensor t;
    t.name = field<std::string>(e, "name");
    t.shape = field<Shape>(e, "shape");
    const auto dtype = field<std::string>(e, "dtype");
    const auto offset = field<std::uint64_t>(e, "offset");
    const auto length = field<std::uint64_t>(e, "length");
    const std::size_t width = dtype == "f64" ? 8 : dtype == "f32" ? 4 : 0;
    if (width == 0) throw FormatError("tensor '" + t.name + "': unsupported dtype " + dtype);
    const std::size_t n = shape_numel(t.shape);
    if (length != n * width) throw FormatError("tensor '" + t.name + "': length does not match shape");
    if (offset > bytes.size() - payload || length > bytes.size() - payload - offset) {
      throw FormatError("tensor '" + t.name + "' runs past the end of the file");
    }
    const unsigned char* p = bytes.data() + payload + offset;
    t.values.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      if (width == 8) {
        double v;
        std::memcpy(&v, p + 8 * i, 8);
        t.values[i] = static_cast<Real>(v);
      } else {
        float v;
        std::memcpy(&v, p + 4 * i, 4);
        t.values[i] = static_cast<Real>(v);
      }
    }
    c.tensors.push_back(std::move(t));
  }
  return c;
}

void save_checkpoint(const DualHeadNetwork& net, const CheckpointMeta& meta, const std::string& path) {
  const auto bytes = encode_checkpoint(make_checkpoint(net, meta));
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint '" + path + "'");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path + "'");
  std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
  return decode_checkpoint(bytes);
}

void restore_checkpoint(DualHeadNetwork& net, const Checkpoint& ckpt,
                        const std::optional<std::string>& expected_digest) {
  auto targets = net.tensors();
  const std::size_t n = std::min(targets.size(), ckpt.tensors.size());
  for (std::size_t i = 0; i < n; ++i) {
    const auto& want = targets[i];
    const auto& have = ckpt.tensors[i];
    if (want.name != have.name) {
      throw CheckpointError("tensor '" + want.name + "' expected, checkpoint holds '" + have.name + "'");
    }
    if (want.tensor.shape() != have.shape) {
      throw CheckpointError("tensor '" + want.name + "' has shape " + shape_str(have.shape) +
                            " in the checkpoint, network expects " + shape_str(want.tensor.shape()));
    }
  }
  if (targets.size() > n) throw CheckpointError("tensor '" + targets[n].name + "' missing from checkpoint");
  if (ckpt.tensors.size() > n) {
    throw CheckpointError("tensor '" + ckpt.tensors[n].name + "' is not part of the network");
  }
  if (expected_digest && *expected_digest != ckpt.meta.config_digest) {
    throw CheckpointError("config digest mismatch: checkpoint " + ckpt.meta.config_digest +
                          ", expected " + *expected_digest);
  }
  for (std::size_t i = 0; i < n; ++i) {
    auto dst = targets[i].tensor.mutable_data();
    std::copy(ckpt.tensors[i].values.begin(), ckpt.tensors[i].values.end(), dst.begin());
  }
}

DualHeadNetwork network_from_checkpoint(const Checkpoint& ckpt, const ArchSpec* expected_main) {
  // Values are overwritten by the restore; the generator only fixes the layout.
  nn::Rng rng(0);
  const ArchSpec& main = expected_main ? *expected_main : ckpt.main_arch;
  DualHeadNetwork net = [&] {
    try {
      DualHeadNetwork n(build_network(main, rng), ckpt.attach_group);
      // Compare the main path first so a wrong architecture is reported by
      // tensor name rather than by a failed head attachment.
      auto own = n.tensors();
      for (std::size_t i = 0; i < own.size() && i < ckpt.tensors.size(); ++i) {
        const auto& have = ckpt.tensors[i];
        if (own[i].name != have.name || own[i].tensor.shape() != have.shape) {
          throw CheckpointError("tensor '" + own[i].name + "' does not match the checkpoint (holds '" +
                                have.name + "' with shape " + shape_str(have.shape) + ", network expects " +
                                shape_str(own[i].tensor.shape()) + ")");
        }
      }
      if (ckpt.second_arch) n.attach_second_head(*ckpt.second_arch, InitMode::Fresh, rng);
      if (ckpt.has_merge) n.attach_merge(rng);
      return n;
    } catch (const CheckpointError&) {
      throw;
    } catch (const Error& e) {
      throw CheckpointError(std::string("checkpoint does not describe a valid network: ") + e.what());
    }
  }();
  restore_checkpoint(net, ckpt);
  for (Region r : kAllRegions) net.set_freeze(r, ckpt.frozen[static_cast<int>(r)]);
  net.set_enabled(HeadMode::Main, ckpt.enabled_main);
  net.set_enabled(HeadMode::Second, ckpt.enabled_second);
  return net;
}

}  // namespace dhat
