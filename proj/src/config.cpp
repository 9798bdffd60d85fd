#include "dhat/config.hpp"

#include <fstream>
#include <set>

#include "dhat/error.hpp"

namespace dhat {

namespace {

using nlohmann::json;

// Reads one JSON object, rejecting keys outside `known`.
class Section {
 public:
  Section(const json& j, std::string path, std::set<std::string> known) : j_(j), path_(std::move(path)) {
    if (!j_.is_object()) throw ConfigError(path_, "expected an object");
    for (const auto& [key, value] : j_.items()) {
      if (!known.count(key)) throw ConfigError(at(key), "unknown key");
    }
  }

  std::string at(const std::string& key) const { return path_ + "." + key; }
  bool has(const std::string& key) const { return j_.contains(key) && !j_[key].is_null(); }
  const json& raw(const std::string& key) const { return j_[key]; }

  void require(const std::string& key) const {
    if (!has(key)) throw ConfigError(at(key), "missing required key");
  }

  double number(const std::string& key, double fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_number()) throw ConfigError(at(key), "expected a number");
    return j_[key].get<double>();
  }
  long long integer(const std::string& key, long long fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_number_integer()) throw ConfigError(at(key), "expected an integer");
    return j_[key].get<long long>();
  }
  std::size_t count(const std::string& key, std::size_t fallback) const {
    const long long v = integer(key, static_cast<long long>(fallback));
    if (v < 0) throw ConfigError(at(key), "must be >= 0");
    return static_cast<std::size_t>(v);
  }
  bool boolean(const std::string& key, bool fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_boolean()) throw ConfigError(at(key), "expected true or false");
    return j_[key].get<bool>();
  }
  std::string string(const std::string& key, const std::string& fallback) const {
    if (!has(key)) return fallback;
    if (!j_[key].is_string()) throw ConfigError(at(key), "expected a string");
    return j_[key].get<std::string>();
  }
  std::vector<std::string> strings(const std::string& key) const {
    std::vector<std::string> out;
    if (!has(key)) return out;
    if (!j_[key].is_array()) throw ConfigError(at(key), "expected an array of strings");
    for (std::size_t i = 0; i < j_[key].size(); ++i) {
      if (!j_[key][i].is_string()) throw ConfigError(at(key) + "[" + std::to_string(i) + "]", "expected a string");
      out.push_back(j_[key][i].get<std::string>());
    }
    return out;
  }

 private:
  const json& j_;
  std::string path_;
};

// Runs `fn`, turning argument errors into configuration errors at `path`.
template <class Fn>
auto checked(const std::string& path, Fn&& fn) {
  try {
    return fn();
  } catch (const ArgumentError& e) {
    throw ConfigError(path, e.what());
  }
}

OptimizerConfig optimizer_from_json(const json& j, const std::string& path, OptimizerConfig base) {
  Section s(j, path, {"lr", "momentum", "weight_decay", "milestones"});
  base.lr = s.number("lr", base.lr);
  base.momentum = s.number("momentum", base.momentum);
  base.weight_decay = s.number("weight_decay", base.weight_decay);
  if (s.has("milestones")) {
    base.milestones.clear();
    const auto& m = s.raw("milestones");
    if (!m.is_array()) throw ConfigError(s.at("milestones"), "expected an array of [epoch, multiplier] pairs");
    for (std::size_t i = 0; i < m.size(); ++i) {
      const std::string p = s.at("milestones") + "[" + std::to_string(i) + "]";
      if (!m[i].is_array() || m[i].size() != 2 || !m[i][0].is_number_integer() || !m[i][1].is_number()) {
        throw ConfigError(p, "expected [epoch, multiplier]");
      }
      base.milestones.emplace_back(m[i][0].get<int>(), m[i][1].get<double>());
    }
  }
  checked(path, [&] {
    base.validate();
    return 0;
  });
  return base;
}

Region region_at(const std::string& name, const std::string& path) {
  return checked(path, [&] { return region_from_string(name); });
}

}  // namespace

AttackConfig attack_from_json(const json& j, const std::string& path) {
  Section s(j, path, {"name", "epsilon", "step_size", "num_steps", "restarts", "random_start", "loss_mode"});
  AttackConfig a;
  a.epsilon = s.number("epsilon", a.epsilon);
  if (s.has("step_size")) a.step_size = s.number("step_size", 0);
  a.num_steps = static_cast<int>(s.integer("num_steps", a.num_steps));
  a.restarts = static_cast<int>(s.integer("restarts", a.restarts));
  a.random_start = s.boolean("random_start", a.random_start);
  a.loss_mode = checked(s.at("loss_mode"), [&] { return attack_loss_from_string(s.string("loss_mode", "ce")); });
  checked(path, [&] {
    a.validate();
    return 0;
  });
  return a;
}

TrainPlan plan_from_json(const json& j, const std::string& path, TrainStage stage, const ArchSpec& main,
                         const std::optional<ArchSpec>& second) {
  Section s(j, path,
            {"stage", "objective", "epochs", "optimizer", "batch_size", "augment", "select_best", "keep_snapshots",
             "init", "val_attack", "pretrained", "seed", "freeze", "first_epoch"});
  s.require("stage");
  if (s.string("stage", "") != to_string(stage)) {
    throw ConfigError(s.at("stage"), "expected \"" + to_string(stage) + "\" at this position");
  }
  if (stage != TrainStage::MainHead && s.has("pretrained")) {
    throw ConfigError(s.at("pretrained"), "only the main_head stage can start from a checkpoint");
  }
  TrainPlan p;
  AttackConfig default_attack;
  if (stage == TrainStage::Merge) p = merge_stage_plan(default_attack);
  p.stage = stage;
  if (s.has("objective")) {
    Section o(s.raw("objective"), s.at("objective"), {"kind", "inv_lambda", "attack"});
    p.objective.kind = checked(o.at("kind"), [&] {
      return objective_from_string(o.string("kind", to_string(p.objective.kind)));
    });
    p.objective.inv_lambda = o.number("inv_lambda", p.objective.inv_lambda);
    if (o.has("attack")) p.objective.attack = attack_from_json(o.raw("attack"), o.at("attack"));
    if (stage == TrainStage::Merge && p.objective.kind != ObjectiveKind::TRADES) {
      throw ConfigError(o.at("kind"), "the merge stage trains with trades");
    }
    checked(s.at("objective"), [&] {
      p.objective.validate();
      return 0;
    });
  }
  p.epochs = static_cast<int>(s.integer("epochs", p.epochs));
  if (p.epochs < 0) throw ConfigError(s.at("epochs"), "must be >= 0");
  if (s.has("optimizer")) p.optimizer = optimizer_from_json(s.raw("optimizer"), s.at("optimizer"), p.optimizer);
  p.batch_size = s.count("batch_size", p.batch_size);
  if (p.batch_size == 0) throw ConfigError(s.at("batch_size"), "must be > 0");
  p.augment = s.boolean("augment", p.augment);
  p.select_best = s.boolean("select_best", p.select_best);
  p.keep_snapshots = s.boolean("keep_snapshots", p.keep_snapshots);
  p.first_epoch = static_cast<int>(s.integer("first_epoch", p.first_epoch));
  if (p.first_epoch < 1) throw ConfigError(s.at("first_epoch"), "must be >= 1");
  if (s.has("seed")) p.seed = static_cast<std::uint64_t>(s.integer("seed", 0));
  p.val_attack = s.has("val_attack") ? attack_from_json(s.raw("val_attack"), s.at("val_attack")) : p.objective.attack;
  p.val_attack.loss_mode = AttackLoss::CE;
  for (const auto& name : s.strings("freeze")) p.freeze_regions.push_back(region_at(name, s.at("freeze")));

  // Copy needs identical head shapes; "auto" picks copy exactly when they match.
  const bool symmetric = !second || *second == main;
  const std::string init = s.string("init", "auto");
  if (init == "auto") {
    p.init_second = symmetric ? InitMode::Copy : InitMode::Fresh;
  } else {
    p.init_second = checked(s.at("init"), [&] { return init_mode_from_string(init); });
    if (stage == TrainStage::SecondHead && p.init_second == InitMode::Copy && !symmetric) {
      throw ConfigError(s.at("init"), "copy initialisation needs identical head architectures");
    }
  }
  return p;
}

std::size_t default_val_size(std::size_t test_size) {
  return test_size >= 5000 ? 1000 : std::max<std::size_t>(1, test_size / 5);
}

RunConfig parse_run_config(json j, std::optional<std::uint64_t> seed_override) {
  Section top(j, "$", {"data", "arch", "attach", "stages", "eval", "seed", "output_dir"});
  if (seed_override) j["seed"] = *seed_override;
  RunConfig cfg;
  cfg.seed = static_cast<std::uint64_t>(top.integer("seed", 0));
  cfg.output_dir = top.string("output_dir", cfg.output_dir);

  top.require("arch");
  PipelineConfig& pc = cfg.pipeline;
  pc.main_arch = arch_from_json(j["arch"], "arch");
  pc.seed = cfg.seed;
  if (top.has("attach")) {
    Section a(j["attach"], "attach", {"group", "second_arch"});
    pc.attach_group = static_cast<int>(a.integer("group", 1));
    if (pc.attach_group < 1 || pc.attach_group > pc.main_arch.num_groups()) {
      throw ConfigError(a.at("group"), "must lie in 1.." + std::to_string(pc.main_arch.num_groups()));
    }
    if (a.has("second_arch")) {
      pc.second_arch = arch_from_json(j["attach"]["second_arch"], "attach.second_arch");
      if (pc.second_arch->num_classes != pc.main_arch.num_classes) {
        throw ConfigError("attach.second_arch.num_classes", "must match arch.num_classes");
      }
    }
  }

  top.require("data");
  {
    Section d(j["data"], "data",
              {"source", "synth", "test_per_class", "train", "test", "num_classes", "limit_train", "limit_test",
               "val_size"});
    DataConfig& dc = cfg.data;
    dc.source = d.string("source", "synth");
    dc.num_classes = static_cast<int>(d.integer("num_classes", pc.main_arch.num_classes));
    dc.limit_train = d.count("limit_train", 0);
    dc.limit_test = d.count("limit_test", 0);
    if (d.has("val_size")) dc.val_size = d.count("val_size", 0);
    if (dc.source == "synth") {
      dc.synth.num_classes = dc.num_classes;
      dc.synth.image_size = pc.main_arch.input_size;
      dc.synth.channels = pc.main_arch.input_channels;
      dc.synth.seed = cfg.seed;
      if (d.has("synth")) {
        Section s(j["data"]["synth"], "data.synth", {"samples_per_class", "image_size", "channels", "sigma", "seed"});
        dc.synth.samples_per_class = static_cast<int>(s.integer("samples_per_class", dc.synth.samples_per_class));
        dc.synth.image_size = static_cast<int>(s.integer("image_size", dc.synth.image_size));
        dc.synth.channels = static_cast<int>(s.integer("channels", dc.synth.channels));
        dc.synth.sigma = s.number("sigma", dc.synth.sigma);
        dc.synth.seed = static_cast<std::uint64_t>(s.integer("seed", static_cast<long long>(dc.synth.seed)));
        if (dc.synth.samples_per_class < 1) throw ConfigError(s.at("samples_per_class"), "must be >= 1");
        if (!(dc.synth.sigma >= 0)) throw ConfigError(s.at("sigma"), "must be >= 0");
      }
      dc.test_per_class = static_cast<int>(d.integer("test_per_class", dc.test_per_class));
      if (dc.test_per_class < 1) throw ConfigError(d.at("test_per_class"), "must be >= 1");
    } else if (dc.source == "idx") {
      for (const char* split : {"train", "test"}) {
        d.require(split);
        Section s(j["data"][split], d.at(split), {"images", "labels"});
        s.require("images");
        s.require("labels");
        (split == std::string("train") ? dc.train_images : dc.test_images) = s.string("images", "");
        (split == std::string("train") ? dc.train_labels : dc.test_labels) = s.string("labels", "");
      }
    } else if (dc.source == "cifar") {
      for (const char* split : {"train", "test"}) {
        d.require(split);
        Section s(j["data"][split], d.at(split), {"files"});
        s.require("files");
        (split == std::string("train") ? dc.train_files : dc.test_files) = s.strings("files");
      }
      if (dc.num_classes != 10 && dc.num_classes != 100) throw ConfigError(d.at("num_classes"), "cifar needs 10 or 100");
    } else {
      throw ConfigError(d.at("source"), "expected synth, idx or cifar");
    }
    if (dc.num_classes != pc.main_arch.num_classes) {
      throw ConfigError(d.at("num_classes"), "must match arch.num_classes");
    }
  }

  top.require("stages");
  const auto& stages = j["stages"];
  if (!stages.is_array() || stages.empty() || stages.size() > 3) {
    throw ConfigError("stages", "expected an array of 1 to 3 stage plans");
  }
  const TrainStage order[] = {TrainStage::MainHead, TrainStage::SecondHead, TrainStage::Merge};
  TrainPlan* plans[] = {&pc.stage1, &pc.stage2, &pc.stage3};
  for (std::size_t i = 0; i < stages.size(); ++i) {
    const std::string path = "stages[" + std::to_string(i) + "]";
    *plans[i] = plan_from_json(stages[i], path, order[i], pc.main_arch, pc.second_arch);
    if (!stages[i].contains("seed")) plans[i]->seed = mix_seed(cfg.seed, 100 + i);
    if (i == 0 && stages[i].contains("pretrained")) {
      if (!stages[i]["pretrained"].is_string()) throw ConfigError(path + ".pretrained", "expected a string");
      cfg.pretrained_path = stages[i]["pretrained"].get<std::string>();
    }
  }
  pc.last_stage = static_cast<int>(stages.size());

  if (top.has("eval")) {
    const auto& ev = j["eval"];
    if (!ev.is_array()) throw ConfigError("eval", "expected an array of attacks");
    for (std::size_t i = 0; i < ev.size(); ++i) {
      const std::string path = "eval[" + std::to_string(i) + "]";
      NamedAttack a{"", attack_from_json(ev[i], path)};
      a.name = ev[i].contains("name") && ev[i]["name"].is_string() ? ev[i]["name"].get<std::string>()
                                                                  : "pgd" + std::to_string(a.config.num_steps);
      cfg.eval.push_back(a);
    }
  }
  cfg.document = j;
  pc.config_digest = fnv1a_hex(j.dump());
  return cfg;
}

RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path, "cannot open config file");
  json j;
  try {
    j = json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(path, std::string("invalid JSON: ") + e.what());
  }
  return parse_run_config(std::move(j), seed_override);
}

RunData load_run_data(const RunConfig& cfg) {
  const DataConfig& dc = cfg.data;
  RunData d;
  if (dc.source == "synth") {
    SynthSpec s = dc.synth;
    d.train = synth_dataset(s);
    s.samples_per_class = dc.test_per_class;
    s.noise_stream = 1;
    d.test = synth_dataset(s);
    d.train.id = "synth-train";
    d.test.id = "synth-test";
  } else if (dc.source == "idx") {
    d.train = load_idx(dc.train_images, dc.train_labels, dc.num_classes);
    d.test = load_idx(dc.test_images, dc.test_labels, dc.num_classes);
    d.train.id = dc.train_images;
    d.test.id = dc.test_images;
  } else {
    d.train = load_cifar_binary(dc.train_files, dc.num_classes);
    d.test = load_cifar_binary(dc.test_files, dc.num_classes);
    d.train.id = "cifar" + std::to_string(dc.num_classes) + "-train";
    d.test.id = "cifar" + std::to_string(dc.num_classes) + "-test";
  }
  if (dc.limit_train && dc.limit_train < d.train.size()) d.train = d.train.slice(0, dc.limit_train);
  if (dc.limit_test && dc.limit_test < d.test.size()) d.test = d.test.slice(0, dc.limit_test);
  d.train.split = "train";
  d.test.split = "test";
  const ArchSpec& arch = cfg.pipeline.main_arch;
  for (const Dataset* ds : {&d.train, &d.test}) {
    ds->validate();
    if (ds->channels() != static_cast<std::size_t>(arch.input_channels) ||
        ds->image_size() != static_cast<std::size_t>(arch.input_size) || ds->images.dim(3) != ds->image_size()) {
      throw ConfigError("data", "images are " + shape_str(ds->images.shape()) + ", arch expects " +
                                    std::to_string(arch.input_channels) + "x" + std::to_string(arch.input_size) +
                                    "x" + std::to_string(arch.input_size));
    }
  }
  const std::size_t v = std::min(d.test.size(), dc.val_size.value_or(default_val_size(d.test.size())));
  if (v == 0) throw ConfigError("data.val_size", "must be >= 1");
  d.val = d.test.slice(0, v);
  d.val.split = "val";
  return d;
}

}  // namespace dhat
