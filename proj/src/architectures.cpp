#include "dhat/architectures.hpp"

#include <algorithm>
#include <map>
#include <set>

#include "dhat/error.hpp"
#include "dhat/ops.hpp"

namespace dhat {

namespace {

std::size_t strided_extent(std::size_t s, std::size_t stride) { return (s - 1) / stride + 1; }

// Stride of stage `index` (0 = input conv, 1..G = groups).
std::size_t stage_stride(Family f, int index) {
  if (index == 0) return 1;
  if (f == Family::SmallConv) return 2;
  return index == 1 ? 1 : 2;
}

std::unique_ptr<nn::Sequential> conv_bn_relu(std::size_t in, std::size_t out, std::size_t stride,
                                             nn::Rng& rng) {
  auto seq = std::make_unique<nn::Sequential>();
  seq->add("conv", std::make_unique<nn::Conv2d>(in, out, 3, stride, 1, false, rng));
  seq->add("bn", std::make_unique<nn::BatchNorm>(out));
  seq->add("relu", std::make_unique<nn::ReLU>());
  return seq;
}

}  // namespace

std::string to_string(Family f) {
  switch (f) {
    case Family::ResNet: return "resnet";
    case Family::WideResNet: return "wideresnet";
    case Family::SmallConv: return "smallconv";
  }
  return "?";
}

Family family_from_string(std::string_view s) {
  if (s == "resnet") return Family::ResNet;
  if (s == "wideresnet") return Family::WideResNet;
  if (s == "smallconv") return Family::SmallConv;
  throw ArgumentError("unknown architecture family '" + std::string(s) + "'");
}

void ArchSpec::validate() const {
  if (num_classes < 2) throw ArgumentError("num_classes must be >= 2");
  if (input_channels < 1) throw ArgumentError("input_channels must be >= 1");
  if (input_size < 1) throw ArgumentError("input_size must be >= 1");
  switch (family) {
    case Family::WideResNet:
      if (depth < 10 || (depth - 4) % 6 != 0) {
        throw ArgumentError("wideresnet depth must satisfy (depth - 4) % 6 == 0 and depth >= 10, got " +
                            std::to_string(depth));
      }
      if (widen_factor < 1) throw ArgumentError("widen_factor must be >= 1");
      break;
    case Family::ResNet:
      if (group_sizes.empty() && depth != 18 && depth != 34) {
        throw ArgumentError("resnet needs group_sizes unless depth is 18 or 34");
      }
      if (group_sizes.size() > 4) throw ArgumentError("resnet supports at most 4 groups");
      for (int b : group_sizes) {
        if (b < 1) throw ArgumentError("resnet group sizes must be >= 1");
      }
      break;
    case Family::SmallConv:
      if (depth < 2 || depth > 4) throw ArgumentError("smallconv depth must be in [2, 4]");
      if (widen_factor < 1) throw ArgumentError("widen_factor must be >= 1");
      break;
  }
}

std::vector<int> ArchSpec::blocks_per_group() const {
  switch (family) {
    case Family::WideResNet: return std::vector<int>(3, (depth - 4) / 6);
    case Family::ResNet:
      if (!group_sizes.empty()) return group_sizes;
      return depth == 18 ? std::vector<int>{2, 2, 2, 2} : std::vector<int>{3, 4, 6, 3};
    case Family::SmallConv: return std::vector<int>(static_cast<std::size_t>(depth - 1), 1);
  }
  return {};
}

int ArchSpec::num_groups() const { return static_cast<int>(blocks_per_group().size()); }

std::vector<std::size_t> ArchSpec::stage_widths() const {
  const auto g = static_cast<std::size_t>(num_groups());
  const auto w = static_cast<std::size_t>(widen_factor);
  std::vector<std::size_t> widths;
  switch (family) {
    case Family::WideResNet: widths = {16, 16 * w, 32 * w, 64 * w}; break;
    case Family::ResNet: widths = {64, 64, 128, 256, 512}; break;
    case Family::SmallConv: widths = {8 * w, 16 * w, 32 * w, 64 * w}; break;
  }
  widths.resize(g + 1);
  return widths;
}

std::vector<std::size_t> ArchSpec::stage_extents() const {
  std::vector<std::size_t> extents;
  auto s = static_cast<std::size_t>(input_size);
  for (int i = 0; i <= num_groups(); ++i) {
    s = strided_extent(s, stage_stride(family, i));
    extents.push_back(s);
  }
  return extents;
}

nlohmann::ordered_json arch_to_json(const ArchSpec& spec) {
  nlohmann::ordered_json j;
  j["family"] = to_string(spec.family);
  j["depth"] = spec.depth;
  j["widen_factor"] = spec.widen_factor;
  j["group_sizes"] = spec.group_sizes;
  j["num_classes"] = spec.num_classes;
  j["input_channels"] = spec.input_channels;
  j["input_size"] = spec.input_size;
  return j;
}

ArchSpec arch_from_json(const nlohmann::json& j, const std::string& path) {
  if (!j.is_object()) throw ConfigError(path, "expected an object");
  static const std::set<std::string> known = {"family",      "depth",          "widen_factor",
                                              "group_sizes", "num_classes",    "input_channels",
                                              "input_size"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw ConfigError(path + "." + key, "unknown key");
  }
  auto integer = [&](const char* key, int fallback, bool required) {
    if (!j.contains(key)) {
      if (required) throw ConfigError(path + "." + key, "missing required key");
      return fallback;
    }
    if (!j[key].is_number_integer()) throw ConfigError(path + "." + key, "expected an integer");
    return j[key].get<int>();
  };
  ArchSpec spec;
  if (!j.contains("family")) throw ConfigError(path + ".family", "missing required key");
  if (!j["family"].is_string()) throw ConfigError(path + ".family", "expected a string");
  try {
    spec.family = family_from_string(j["family"].get<std::string>());
  } catch (const ArgumentError& e) {
    throw ConfigError(path + ".family", e.what());
  }
  spec.depth = integer("depth", spec.depth, spec.family != Family::ResNet);
  spec.widen_factor = integer("widen_factor", 1, false);
  spec.num_classes = integer("num_classes", 0, true);
  spec.input_channels = integer("input_channels", 0, true);
  spec.input_size = integer("input_size", 0, true);
  if (j.contains("group_sizes")) {
    const auto& g = j["group_sizes"];
    if (!g.is_array()) throw ConfigError(path + ".group_sizes", "expected an array");
    for (std::size_t i = 0; i < g.size(); ++i) {
      if (!g[i].is_number_integer()) {
        throw ConfigError(path + ".group_sizes[" + std::to_string(i) + "]", "expected an integer");
      }
      spec.group_sizes.push_back(g[i].get<int>());
    }
  }
  try {
    spec.validate();
  } catch (const ArgumentError& e) {
    throw ConfigError(path, e.what());
  }
  return spec;
}

Tensor forward_stages(StageList& stages, const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& s : stages) h = s.layer->forward(h, training);
  return h;
}

void collect_stages(const StageList& stages, const std::string& prefix,
                    std::vector<nn::NamedTensor>& out) {
  for (const auto& s : stages) s.layer->collect(prefix.empty() ? s.name : prefix + "." + s.name, out);
}

StageList clone_stages(const StageList& stages) {
  StageList out;
  out.reserve(stages.size());
  for (const auto& s : stages) out.push_back({s.name, s.layer->clone()});
  return out;
}

Tensor Classifier::forward(const Tensor& x, bool training) { return forward_stages(stages, x, training); }

std::vector<nn::NamedTensor> Classifier::tensors() const {
  std::vector<nn::NamedTensor> out;
  collect_stages(stages, "", out);
  return out;
}

std::size_t Classifier::parameter_count() const { return nn::parameter_count(tensors()); }

Classifier Classifier::clone() const { return Classifier{spec, clone_stages(stages)}; }

Classifier build_network(const ArchSpec& spec, nn::Rng& rng) {
  spec.validate();
  const auto widths = spec.stage_widths();
  const auto blocks = spec.blocks_per_group();
  const auto in_ch = static_cast<std::size_t>(spec.input_channels);
  const auto classes = static_cast<std::size_t>(spec.num_classes);

  Classifier net;
  net.spec = spec;

  if (spec.family == Family::WideResNet) {
    net.stages.push_back({"conv", std::make_unique<nn::Conv2d>(in_ch, widths[0], 3, 1, 1, false, rng)});
  } else {
    net.stages.push_back({"conv", conv_bn_relu(in_ch, widths[0], 1, rng)});
  }

  for (std::size_t g = 0; g < blocks.size(); ++g) {
    const std::size_t stride = stage_stride(spec.family, static_cast<int>(g + 1));
    const std::string name = "group" + std::to_string(g + 1);
    if (spec.family == Family::SmallConv) {
      net.stages.push_back({name, conv_bn_relu(widths[g], widths[g + 1], stride, rng)});
      continue;
    }
    auto group = std::make_unique<nn::Sequential>();
    for (int b = 0; b < blocks[g]; ++b) {
      const std::size_t in = b == 0 ? widths[g] : widths[g + 1];
      const std::size_t s = b == 0 ? stride : 1;
      std::unique_ptr<nn::Layer> block;
      if (spec.family == Family::WideResNet) {
        block = std::make_unique<nn::WideBasicBlock>(in, widths[g + 1], s, rng);
      } else {
        block = std::make_unique<nn::BasicBlock>(in, widths[g + 1], s, rng);
      }
      group->add("block" + std::to_string(b), std::move(block));
    }
    net.stages.push_back({name, std::move(group)});
  }

  auto head = std::make_unique<nn::Sequential>();
  const std::size_t last = widths.back();
  switch (spec.family) {
    case Family::WideResNet:
      head->add("bn", std::make_unique<nn::BatchNorm>(last));
      head->add("relu", std::make_unique<nn::ReLU>());
      head->add("pool", std::make_unique<nn::GlobalAvgPool>());
      head->add("fc", std::make_unique<nn::Linear>(last, classes, rng));
      break;
    case Family::ResNet:
      head->add("pool", std::make_unique<nn::GlobalAvgPool>());
      head->add("fc", std::make_unique<nn::Linear>(last, classes, rng));
      break;
    case Family::SmallConv: {
      const std::size_t e = spec.stage_extents().back();
      head->add("flatten", std::make_unique<nn::Flatten>());
      head->add("fc", std::make_unique<nn::Linear>(last * e * e, classes, rng));
      break;
    }
  }
  net.stages.push_back({"classifier", std::move(head)});
  return net;
}

std::string to_string(Region r) {
  switch (r) {
    case Region::Stem: return "stem";
    case Region::HeadMain: return "head_main";
    case Region::HeadSecond: return "head_second";
    case Region::Merge: return "merge";
  }
  return "?";
}

Region region_from_string(std::string_view s) {
  for (Region r : kAllRegions) {
    if (to_string(r) == s) return r;
  }
  throw ArgumentError("unknown region '" + std::string(s) + "'");
}

std::string to_string(HeadMode m) {
  switch (m) {
    case HeadMode::Main: return "main";
    case HeadMode::Second: return "second";
    case HeadMode::Merged: return "merged";
  }
  return "?";
}

HeadMode head_mode_from_string(std::string_view s) {
  if (s == "main") return HeadMode::Main;
  if (s == "second") return HeadMode::Second;
  if (s == "merged") return HeadMode::Merged;
  throw ArgumentError("unknown head mode '" + std::string(s) + "'");
}

std::string to_string(InitMode m) { return m == InitMode::Copy ? "copy" : "fresh"; }

InitMode init_mode_from_string(std::string_view s) {
  if (s == "copy") return InitMode::Copy;
  if (s == "fresh") return InitMode::Fresh;
  throw ArgumentError("unknown init mode '" + std::string(s) + "'");
}

DualHeadNetwork::DualHeadNetwork(Classifier base, int attach_group)
    : main_spec_(base.spec), attach_(attach_group) {
  const int groups = main_spec_.num_groups();
  if (attach_group < 1 || attach_group > groups) {
    throw ArgumentError("attach point must be the end of a group in [1, " + std::to_string(groups) +
                        "], got " + std::to_string(attach_group));
  }
  if (base.stages.size() != static_cast<std::size_t>(groups) + 2) {
    throw ArchitectureError("classifier does not match its ArchSpec");
  }
  for (std::size_t i = 0; i < base.stages.size(); ++i) {
    auto& target = i <= static_cast<std::size_t>(attach_group) ? stem_ : head_main_;
    target.push_back(std::move(base.stages[i]));
  }
}

bool DualHeadNetwork::has_region(Region r) const {
  switch (r) {
    case Region::Stem:
    case Region::HeadMain: return true;
    case Region::HeadSecond: return has_second();
    case Region::Merge: return has_merge();
  }
  return false;
}

void DualHeadNetwork::attach_second_head(const ArchSpec& second_spec, InitMode init, nn::Rng& rng) {
  if (has_second()) throw StateError("second head already attached");
  second_spec.validate();
  if (second_spec.num_classes != main_spec_.num_classes) {
    throw ArchitectureError("second head emits " + std::to_string(second_spec.num_classes) +
                            " logits, main head " + std::to_string(main_spec_.num_classes));
  }
  const auto g = static_cast<std::size_t>(attach_);
  if (second_spec.num_groups() < attach_) {
    throw ArchitectureError("second head has fewer groups than the attach point");
  }
  const auto mw = main_spec_.stage_widths(), sw = second_spec.stage_widths();
  const auto me = main_spec_.stage_extents(), se = second_spec.stage_extents();
  if (mw[g] != sw[g] || me[g] != se[g] || second_spec.input_channels != main_spec_.input_channels) {
    throw ArchitectureError("second head expects input " + std::to_string(sw[g]) + "x" +
                            std::to_string(se[g]) + "x" + std::to_string(se[g]) +
                            " at the attach point, stem produces " + std::to_string(mw[g]) + "x" +
                            std::to_string(me[g]) + "x" + std::to_string(me[g]));
  }

  Classifier donor = build_network(second_spec, rng);
  StageList head;
  for (std::size_t i = g + 1; i < donor.stages.size(); ++i) head.push_back(std::move(donor.stages[i]));

  if (init == InitMode::Copy) {
    std::vector<nn::NamedTensor> src, dst;
    collect_stages(head_main_, "", src);
    collect_stages(head, "", dst);
    if (src.size() != dst.size()) {
      throw ArgumentError("copy init: heads hold " + std::to_string(src.size()) + " and " +
                          std::to_string(dst.size()) + " tensors");
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
      if (src[i].name != dst[i].name || src[i].tensor.shape() != dst[i].tensor.shape()) {
        throw ArgumentError("copy init: tensor '" + dst[i].name + "' " +
                            shape_str(dst[i].tensor.shape()) + " does not match main head '" +
                            src[i].name + "' " + shape_str(src[i].tensor.shape()));
      }
    }
    for (std::size_t i = 0; i < src.size(); ++i) {
      auto from = src[i].tensor.data();
      auto to = dst[i].tensor.mutable_data();
      std::copy(from.begin(), from.end(), to.begin());
    }
  }

  head_second_ = std::move(head);
  second_spec_ = second_spec;
  apply_freeze(Region::HeadSecond);
}

void DualHeadNetwork::attach_merge(nn::Rng& rng) {
  if (!has_second()) throw StateError("merge CNN needs both heads");
  if (has_merge()) throw StateError("merge CNN already attached");
  merge_ = std::make_unique<MergeCNN>(main_spec_.num_classes, rng);
  apply_freeze(Region::Merge);
}

bool DualHeadNetwork::region_training(Region r, bool training) const {
  return training && !frozen(r);
}

Tensor DualHeadNetwork::run_stem(const Tensor& x, bool training) {
  stem_calls_->fetch_add(1);
  return forward_stages(stem_, x, region_training(Region::Stem, training));
}

DualHeadNetwork::Outputs DualHeadNetwork::forward_all(const Tensor& x, HeadMode mode, bool training,
                                                      MergeCNN::Trace* trace) {
  const bool need_main = mode != HeadMode::Second;
  const bool need_second = mode != HeadMode::Main;
  if (need_main && !enabled_main_) throw StateError("main head is switched off");
  if (need_second && !has_second()) throw StateError("no second head attached");
  if (need_second && !enabled_second_) throw StateError("second head is switched off");
  if (mode == HeadMode::Merged && !has_merge()) throw StateError("no merge CNN attached");

  Outputs out;
  Tensor features = run_stem(x, training);
  if (need_main) {
    out.main = forward_stages(head_main_, features, region_training(Region::HeadMain, training));
  }
  if (need_second) {
    out.second = forward_stages(head_second_, features, region_training(Region::HeadSecond, training));
  }
  if (mode == HeadMode::Merged) {
    out.merged_logits =
        merge_->logits(out.main, out.second, region_training(Region::Merge, training), trace);
  }
  return out;
}

Tensor DualHeadNetwork::logits(const Tensor& x, HeadMode mode, bool training) {
  auto out = forward_all(x, mode, training);
  switch (mode) {
    case HeadMode::Main: return out.main;
    case HeadMode::Second: return out.second;
    case HeadMode::Merged: return out.merged_logits;
  }
  return {};
}

Tensor DualHeadNetwork::forward(const Tensor& x, HeadMode mode, bool training) {
  Tensor z = logits(x, mode, training);
  return mode == HeadMode::Merged ? ops::softmax(z) : z;
}

void DualHeadNetwork::apply_freeze(Region region) {
  const bool f = frozen(region);
  for (auto& t : region_tensors(region)) {
    if (!t.trainable) continue;
    t.tensor.set_requires_grad(!f);
    if (f) t.tensor.drop_grad();
  }
}

void DualHeadNetwork::set_freeze(Region region, bool frozen) {
  frozen_[static_cast<int>(region)] = frozen;
  apply_freeze(region);
}

void DualHeadNetwork::set_enabled(HeadMode head, bool enabled) {
  switch (head) {
    case HeadMode::Main: enabled_main_ = enabled; break;
    case HeadMode::Second: enabled_second_ = enabled; break;
    case HeadMode::Merged: throw ArgumentError("only heads can be switched on and off");
  }
}

bool DualHeadNetwork::enabled(HeadMode head) const {
  switch (head) {
    case HeadMode::Main: return enabled_main_;
    case HeadMode::Second: return enabled_second_;
    case HeadMode::Merged: return enabled_main_ && enabled_second_ && has_merge();
  }
  return false;
}

std::vector<nn::NamedTensor> DualHeadNetwork::region_tensors(Region region) const {
  std::vector<nn::NamedTensor> out;
  switch (region) {
    case Region::Stem: collect_stages(stem_, "stem", out); break;
    case Region::HeadMain: collect_stages(head_main_, "head_main", out); break;
    case Region::HeadSecond: collect_stages(head_second_, "head_second", out); break;
    case Region::Merge:
      if (merge_) merge_->collect("merge", out);
      break;
  }
  return out;
}

std::vector<nn::NamedTensor> DualHeadNetwork::tensors() const {
  std::vector<nn::NamedTensor> out;
  for (Region r : kAllRegions) {
    auto part = region_tensors(r);
    out.insert(out.end(), part.begin(), part.end());
  }
  return out;
}

std::vector<Tensor> DualHeadNetwork::trainable_parameters() const {
  std::vector<Tensor> out;
  for (Region r : kAllRegions) {
    if (frozen(r)) continue;
    for (auto& t : region_tensors(r)) {
      if (t.trainable) out.push_back(t.tensor);
    }
  }
  return out;
}

ParameterCensus DualHeadNetwork::census() const {
  ParameterCensus c;
  c.stem = nn::parameter_count(region_tensors(Region::Stem));
  c.head_main = nn::parameter_count(region_tensors(Region::HeadMain));
  c.head_second = nn::parameter_count(region_tensors(Region::HeadSecond));
  c.merge = nn::parameter_count(region_tensors(Region::Merge));
  c.total = c.stem + c.head_main + c.head_second + c.merge;
  c.second_over_base = static_cast<double>(c.head_second) / static_cast<double>(c.stem + c.head_main);
  c.second_over_main =
      c.head_main ? static_cast<double>(c.head_second) / static_cast<double>(c.head_main) : 0.0;
  return c;
}

DualHeadNetwork::Snapshot DualHeadNetwork::snapshot() const {
  Snapshot snap;
  for (const auto& t : tensors()) {
    auto d = t.tensor.data();
    snap.emplace_back(d.begin(), d.end());
  }
  return snap;
}

void DualHeadNetwork::restore(const Snapshot& snap) {
  auto all = tensors();
  if (all.size() != snap.size()) throw StateError("snapshot does not match the network layout");
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all[i].tensor.numel() != snap[i].size()) {
      throw StateError("snapshot entry '" + all[i].name + "' has the wrong size");
    }
  }
  for (std::size_t i = 0; i < all.size(); ++i) {
    auto dst = all[i].tensor.mutable_data();
    std::copy(snap[i].begin(), snap[i].end(), dst.begin());
  }
}

DualHeadNetwork DualHeadNetwork::clone() const {
  DualHeadNetwork c;
  c.main_spec_ = main_spec_;
  c.second_spec_ = second_spec_;
  c.attach_ = attach_;
  c.stem_ = clone_stages(stem_);
  c.head_main_ = clone_stages(head_main_);
  c.head_second_ = clone_stages(head_second_);
  if (merge_) c.merge_ = merge_->clone();
  c.frozen_ = frozen_;
  c.enabled_main_ = enabled_main_;
  c.enabled_second_ = enabled_second_;
  return c;
}

Classifier DualHeadNetwork::main_classifier() const {
  Classifier c{main_spec_, clone_stages(stem_)};
  for (auto& s : clone_stages(head_main_)) c.stages.push_back(std::move(s));
  return c;
}

DualHeadNetwork attach_second_head(Classifier base, int attach_group, const ArchSpec& second_spec,
                                   InitMode init, nn::Rng& rng) {
  DualHeadNetwork net(std::move(base), attach_group);
  net.attach_second_head(second_spec, init, rng);
  return net;
}

ParameterCensus parameter_census(const DualHeadNetwork& net) { return net.census(); }

}  // namespace dhat
