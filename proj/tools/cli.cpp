#include "cli.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <optional>

#include "dhat/checkpoint.hpp"
#include "dhat/config.hpp"
#include "dhat/error.hpp"
#include "dhat/evaluation.hpp"
#include "dhat/training.hpp"

namespace dhat::cli {

namespace fs = std::filesystem;

namespace {

std::size_t resolve_workers(std::size_t flag) {
  if (const char* env = std::getenv("DHAT_THREADS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
    throw ArgumentError(std::string("DHAT_THREADS must be a positive integer, got '") + env + "'");
  }
  return std::max<std::size_t>(1, flag);
}

struct DataFlags {
  std::string config;
  std::string images, labels;
  std::vector<std::string> cifar;
  int classes = 0;
  std::size_t limit = 0;
  std::string split = "test";

  void add(CLI::App* app) {
    app->add_option("--config", config, "Run config whose data section supplies the dataset");
    app->add_option("--images", images, "IDX image file");
    app->add_option("--labels", labels, "IDX label file");
    app->add_option("--cifar", cifar, "CIFAR binary batch files");
    app->add_option("--classes", classes, "Number of classes (IDX/CIFAR)");
    app->add_option("--limit", limit, "Use only the first N samples");
    app->add_option("--split", split, "Split taken from --config")->check(CLI::IsMember({"train", "val", "test"}));
  }

  Dataset load() const {
    Dataset ds;
    if (!config.empty()) {
      RunData d = load_run_data(load_run_config(config));
      ds = split == "train" ? d.train : split == "val" ? d.val : d.test;
    } else if (!images.empty() || !labels.empty()) {
      if (images.empty() || labels.empty()) throw ConfigError("--images/--labels", "both files are required");
      ds = load_idx(images, labels, classes);
      ds.id = images;
    } else if (!cifar.empty()) {
      ds = load_cifar_binary(cifar, classes == 0 ? 10 : classes);
      ds.id = cifar.front();
    } else {
      throw ConfigError("data", "give --config, --images/--labels or --cifar");
    }
    if (limit && limit < ds.size()) ds = ds.slice(0, limit);
    return ds;
  }
};

// Accepts a plain number or a ratio such as "8/255".
double parse_pixel_value(const std::string& text, const std::string& flag) {
  auto number = [&](const std::string& t) {
    std::size_t used = 0;
    double v = 0;
    try {
      v = std::stod(t, &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != t.size()) throw ConfigError(flag, "expected a number or a ratio like 8/255, got '" + text + "'");
    return v;
  };
  const auto slash = text.find('/');
  if (slash == std::string::npos) return number(text);
  const double den = number(text.substr(slash + 1));
  if (den == 0) throw ConfigError(flag, "zero denominator");
  return number(text.substr(0, slash)) / den;
}

struct AttackFlags {
  std::string kind = "pgd";
  std::string eps_text = "8/255";
  int steps = 10;
  std::string step_text;
  int restarts = 1;
  bool no_random_start = false;

  void add(CLI::App* app, bool allow_none) {
    auto kinds = allow_none ? std::vector<std::string>{"none", "pgd", "fgsm"} : std::vector<std::string>{"pgd", "fgsm"};
    app->add_option("--attack", kind, "Attack")->check(CLI::IsMember(kinds));
    app->add_option("--eps", eps_text, "L-infinity radius in pixel units, e.g. 0.3 or 8/255");
    app->add_option("--steps", steps, "PGD iterations");
    app->add_option("--step-size", step_text, "PGD step (default 2.5 eps / steps)");
    app->add_option("--restarts", restarts, "Random restarts");
    app->add_flag("--no-random-start", no_random_start, "Start PGD at the clean input");
  }

  AttackConfig config() const {
    AttackConfig a;
    const double eps = parse_pixel_value(eps_text, "--eps");
    std::optional<double> step_size;
    if (!step_text.empty()) step_size = parse_pixel_value(step_text, "--step-size");
    a.epsilon = eps;
    if (kind == "fgsm") {
      a.num_steps = 1;
      a.step_size = eps > 0 ? std::optional<double>(eps) : std::nullopt;
      a.random_start = false;
    } else {
      a.num_steps = steps;
      a.step_size = step_size;
      a.restarts = restarts;
      a.random_start = !no_random_start;
    }
    a.validate();
    return a;
  }

  std::string name() const { return kind == "pgd" ? "pgd" + std::to_string(steps) : kind; }
};

void write_json(const nlohmann::ordered_json& j, const std::string& path, std::ostream& out) {
  if (path.empty() || path == "-") {
    out << j.dump(2) << "\n";
    return;
  }
  std::ofstream f(path);
  if (!f) throw IoError("cannot write '" + path + "'");
  f << j.dump(2) << "\n";
}

std::vector<HeadMode> available_heads(const DualHeadNetwork& net) {
  std::vector<HeadMode> out{HeadMode::Main};
  if (net.has_second()) out.push_back(HeadMode::Second);
  if (net.has_merge()) out.push_back(HeadMode::Merged);
  return out;
}

// train ---------------------------------------------------------------------

struct TrainArgs {
  std::string config;
  int stage = 0;
  std::optional<std::uint64_t> seed;
  std::size_t workers = 1;
  std::string output_dir;
  bool quiet = false;
};

int cmd_train(const TrainArgs& a, std::ostream& out) {
  RunConfig cfg = load_run_config(a.config, a.seed);
  if (!a.output_dir.empty()) cfg.output_dir = a.output_dir;
  const PipelineConfig& pc = cfg.pipeline;
  if (a.stage < 0 || a.stage > pc.last_stage) {
    throw ConfigError("--stage", "config defines stages 1.." + std::to_string(pc.last_stage));
  }
  RunData data = load_run_data(cfg);
  if (cfg.pretrained_path) cfg.pipeline.pretrained = load_checkpoint(*cfg.pretrained_path);

  fs::create_directories(cfg.output_dir);
  const fs::path dir(cfg.output_dir);
  const fs::path log_path = dir / "train_log.csv";
  const bool append = a.stage > 1 && fs::exists(log_path);
  std::ofstream log(log_path, append ? std::ios::app : std::ios::trunc);
  if (!log) throw IoError("cannot write '" + log_path.string() + "'");
  if (!append) log << "stage,epoch,train_loss,val_clean,val_robust,lr\n";
  log << std::setprecision(10);

  TrainOptions topts;
  topts.workers = resolve_workers(a.workers);
  topts.on_epoch = [&](TrainStage s, const CheckpointRecord& r) {
    log << to_string(s) << "," << r.epoch << "," << r.train_loss << "," << r.clean_val_acc << ","
        << r.robust_val_acc << "," << r.lr << "\n";
    log.flush();
    if (!a.quiet) {
      out << to_string(s) << " epoch " << r.epoch << "  loss " << r.train_loss << "  val clean " << r.clean_val_acc
          << "  val robust " << r.robust_val_acc << "\n";
    }
  };

  const int first = a.stage == 0 ? 1 : a.stage;
  const int last = a.stage == 0 ? pc.last_stage : a.stage;
  std::optional<DualHeadNetwork> net;
  if (first == 1) {
    net.emplace(pipeline_initial_network(pc));
  } else {
    const fs::path prev = dir / ("stage" + std::to_string(first - 1) + ".dhat");
    Checkpoint ckpt = load_checkpoint(prev.string());
    if (ckpt.meta.config_digest != pc.config_digest) {
      throw CheckpointError("'" + prev.string() + "' was produced by a different config (digest " +
                            ckpt.meta.config_digest + ", expected " + pc.config_digest + ")");
    }
    net.emplace(network_from_checkpoint(ckpt, &pc.main_arch));
  }
  for (int s = first; s <= last; ++s) {
    StageResult r = run_pipeline_stage(*net, s, pc, data.train, data.val, topts);
    const fs::path path = dir / ("stage" + std::to_string(s) + ".dhat");
    save_checkpoint(*net, pipeline_checkpoint(*net, s, r.kept_epoch, pc).meta, path.string());
    out << "wrote " << path.string() << "\n";
  }

  // Final report on the test split for every head the network has.
  auto start = std::chrono::steady_clock::now();
  nlohmann::ordered_json reports = nlohmann::ordered_json::array();
  EvalOptions eo{256, cfg.seed, topts.workers};
  for (HeadMode mode : available_heads(*net)) {
    EvalReport rep;
    rep.model_id = (dir / ("stage" + std::to_string(last) + ".dhat")).string();
    rep.model_digest = pc.config_digest;
    rep.dataset_id = data.test.id;
    rep.heads = to_string(mode);
    rep.seed = cfg.seed;
    LogitsFn f = head_logits(*net, mode);
    rep.clean_accuracy = evaluate_clean(f, data.test);
    for (const auto& atk : cfg.eval) {
      rep.attacks.push_back({atk.name, atk.config, evaluate_robust(f, data.test, atk.config, eo).robust_accuracy});
    }
    rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    reports.push_back(report_to_json(rep));
    out << rep.heads << ": clean " << rep.clean_accuracy;
    for (const auto& e : rep.attacks) out << "  " << e.name << " " << e.robust_accuracy;
    out << "\n";
  }
  write_json(reports, (dir / "report.json").string(), out);
  return kOk;
}

// eval / cross-eval / export-noise ------------------------------------------

DualHeadNetwork load_network(const std::string& path) { return network_from_checkpoint(load_checkpoint(path)); }

struct EvalArgs {
  std::string model;
  std::string heads = "main";
  std::string report;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  DataFlags data;
  AttackFlags attack;
};

int cmd_eval(const EvalArgs& a, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(a.model);
  DualHeadNetwork net = network_from_checkpoint(ckpt);
  Dataset ds = a.data.load();
  const HeadMode mode = head_mode_from_string(a.heads);
  const auto start = std::chrono::steady_clock::now();
  EvalReport rep;
  rep.model_id = a.model;
  rep.model_digest = ckpt.meta.config_digest;
  rep.dataset_id = ds.id;
  rep.heads = a.heads;
  rep.seed = a.seed;
  LogitsFn f = head_logits(net, mode);
  rep.clean_accuracy = evaluate_clean(f, ds);
  if (a.attack.kind != "none") {
    AttackConfig cfg = a.attack.config();
    EvalOptions eo{256, a.seed, resolve_workers(a.workers)};
    rep.attacks.push_back({a.attack.name(), cfg, evaluate_robust(f, ds, cfg, eo).robust_accuracy});
  }
  rep.wall_time_s = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  write_json(report_to_json(rep), a.report, out);
  return kOk;
}

struct CrossArgs {
  std::string model_a, model_b;
  std::string heads = "main";
  std::string report;
  std::uint64_t seed = 0;
  std::size_t workers = 1;
  bool no_predictions = false;
  DataFlags data;
  AttackFlags attack;
};

int cmd_cross_eval(const CrossArgs& a, std::ostream& out) {
  DualHeadNetwork na = load_network(a.model_a), nb = load_network(a.model_b);
  Dataset ds = a.data.load();
  const HeadMode mode = head_mode_from_string(a.heads);
  AttackConfig cfg = a.attack.config();
  EvalOptions eo{256, a.seed, resolve_workers(a.workers)};
  CrossTable t = cross_evaluate(head_logits(na, mode), head_logits(nb, mode), ds, cfg, eo);
  nlohmann::ordered_json j;
  j["models"] = {a.model_a, a.model_b};
  j["dataset_id"] = ds.id;
  j["heads"] = a.heads;
  j["attack"] = attack_to_json(cfg);
  j["seed"] = a.seed;
  j["table"] = cross_table_to_json(t, !a.no_predictions);
  write_json(j, a.report, out);
  return kOk;
}

struct NoiseArgs {
  std::string model;
  std::string heads = "main";
  std::string out_prefix = "noise";
  std::size_t index = 0;
  double gain = 20;
  std::uint64_t seed = 0;
  DataFlags data;
  AttackFlags attack;
};

int cmd_export_noise(const NoiseArgs& a, std::ostream& out) {
  DualHeadNetwork net = load_network(a.model);
  Dataset ds = a.data.load();
  if (a.index >= ds.size()) throw ArgumentError("--index beyond the dataset");
  const std::size_t rows[] = {a.index};
  Dataset one = ds.take(rows);
  Tensor x_adv = generate_adversarial(head_logits(net, head_mode_from_string(a.heads)), one, a.attack.config(),
                                      EvalOptions{1, a.seed, 1});
  export_noise(one.images, x_adv, a.gain, a.out_prefix);
  out << "wrote " << a.out_prefix << "_noise.png and " << a.out_prefix << "_adv.png\n";
  return kOk;
}

// inspect / synth-data ------------------------------------------------------

int cmd_inspect(const std::string& model, bool as_json, std::ostream& out) {
  Checkpoint ckpt = load_checkpoint(model);
  DualHeadNetwork net = network_from_checkpoint(ckpt);
  const ParameterCensus c = net.census();
  nlohmann::ordered_json j;
  j["file"] = model;
  j["metadata"] = {{"epoch", ckpt.meta.epoch},
                   {"stage", ckpt.meta.stage},
                   {"config_digest", ckpt.meta.config_digest},
                   {"seed", ckpt.meta.seed}};
  j["main_arch"] = arch_to_json(ckpt.main_arch);
  j["second_arch"] = ckpt.second_arch ? nlohmann::ordered_json(arch_to_json(*ckpt.second_arch)) : nullptr;
  j["attach_group"] = ckpt.attach_group;
  j["parameters"] = {{"stem", c.stem},
                     {"head_main", c.head_main},
                     {"head_second", c.head_second},
                     {"merge", c.merge},
                     {"total", c.total}};
  j["ratios"] = {{"second_over_base", c.second_over_base}, {"second_over_main", c.second_over_main}};
  nlohmann::ordered_json frozen;
  for (Region r : kAllRegions) frozen[to_string(r)] = net.frozen(r);
  j["frozen"] = frozen;
  j["enabled"] = {{"main", ckpt.enabled_main}, {"second", ckpt.enabled_second}};
  j["warnings"] = ckpt.warnings;
  if (as_json) {
    out << j.dump(2) << "\n";
    return kOk;
  }
  out << "file           " << model << "\n"
      << "stage          " << ckpt.meta.stage << " (epoch " << ckpt.meta.epoch << ", seed " << ckpt.meta.seed << ")\n"
      << "config digest  " << ckpt.meta.config_digest << "\n"
      << "main arch      " << arch_to_json(ckpt.main_arch).dump() << "\n"
      << "second arch    " << (ckpt.second_arch ? arch_to_json(*ckpt.second_arch).dump() : "none") << "\n"
      << "attach group   " << ckpt.attach_group << "\n"
      << "params stem        " << c.stem << "\n"
      << "params head_main   " << c.head_main << "\n"
      << "params head_second " << c.head_second << "\n"
      << "params merge       " << c.merge << "\n"
      << "params total       " << c.total << "\n"
      << std::fixed << std::setprecision(4) << "second/base    " << c.second_over_base << "\n"
      << "second/main    " << c.second_over_main << "\n";
  out << "frozen        ";
  for (Region r : kAllRegions) out << " " << to_string(r) << "=" << (net.frozen(r) ? "yes" : "no");
  out << "\nenabled        main=" << (ckpt.enabled_main ? "yes" : "no")
      << " second=" << (ckpt.enabled_second ? "yes" : "no") << "\n";
  for (const auto& w : ckpt.warnings) out << "warning: " << w << "\n";
  return kOk;
}

struct SynthArgs {
  SynthSpec spec;
  std::string images = "images.idx";
  std::string labels = "labels.idx";
};

int cmd_synth(const SynthArgs& a, std::ostream& out) {
  if (a.spec.num_classes < 1 || a.spec.samples_per_class < 1 || a.spec.image_size < 1) {
    throw ArgumentError("classes, per-class and size must be positive");
  }
  if (a.spec.channels != 1 && a.spec.channels != 3) throw ArgumentError("channels must be 1 or 3");
  Dataset ds = synth_dataset(a.spec);
  save_idx(ds, a.images, a.labels);
  out << "wrote " << ds.size() << " samples to " << a.images << " / " << a.labels << "\n";
  return kOk;
}

template <class Fn>
int guarded(Fn&& fn, std::ostream& err) {
  try {
    return fn();
  } catch (const ConfigError& e) {
    err << "config error: " << e.what() << "\n";
    return kConfigError;
  } catch (const CheckpointError& e) {
    err << "checkpoint error: " << e.what() << "\n";
    return kCheckpointError;
  } catch (const FormatError& e) {
    err << "data error: " << e.what() << "\n";
    return kCheckpointError;
  } catch (const IoError& e) {
    err << "i/o error: " << e.what() << "\n";
    return kCheckpointError;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return kNumericError;
  } catch (const ArgumentError& e) {
    err << "invalid argument: " << e.what() << "\n";
    return kConfigError;
  } catch (const StateError& e) {
    err << "invalid request: " << e.what() << "\n";
    return kConfigError;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kFailure;
  }
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Dual-head adversarial training toolkit", "dhat"};
  app.require_subcommand(1);

  TrainArgs train;
  auto* t = app.add_subcommand("train", "Run the staged training pipeline");
  t->add_option("--config", train.config, "Run config (JSON)")->required();
  t->add_option("--stage", train.stage, "Run only this stage (1..3); later stages read the previous checkpoint");
  t->add_option("--seed", train.seed, "Override the config seed");
  t->add_option("--workers", train.workers, "Attack worker threads");
  t->add_option("--output-dir", train.output_dir, "Override output_dir");
  t->add_flag("--quiet", train.quiet, "No per-epoch progress");

  EvalArgs ev;
  auto* e = app.add_subcommand("eval", "Clean and robust accuracy of a checkpoint");
  e->add_option("--model", ev.model, "Checkpoint")->required();
  e->add_option("--heads", ev.heads, "Output to evaluate")->check(CLI::IsMember({"main", "second", "merged"}));
  e->add_option("--report", ev.report, "Report path (stdout when omitted)");
  e->add_option("--seed", ev.seed, "Attack seed");
  e->add_option("--workers", ev.workers, "Attack worker threads");
  ev.data.add(e);
  ev.attack.add(e, true);

  CrossArgs cr;
  auto* c = app.add_subcommand("cross-eval", "Transfer table between two checkpoints");
  c->add_option("--model-a", cr.model_a, "First checkpoint")->required();
  c->add_option("--model-b", cr.model_b, "Second checkpoint")->required();
  c->add_option("--heads", cr.heads, "Output to evaluate")->check(CLI::IsMember({"main", "second", "merged"}));
  c->add_option("--report", cr.report, "Report path (stdout when omitted)");
  c->add_option("--seed", cr.seed, "Attack seed");
  c->add_option("--workers", cr.workers, "Attack worker threads");
  c->add_flag("--no-predictions", cr.no_predictions, "Omit per-sample predictions");
  cr.data.add(c);
  cr.attack.add(c, false);

  std::string inspect_model;
  bool inspect_json = false;
  auto* i = app.add_subcommand("inspect", "Parameter census and metadata of a checkpoint");
  i->add_option("--model", inspect_model, "Checkpoint")->required();
  i->add_flag("--json", inspect_json, "Print JSON");

  NoiseArgs nz;
  auto* n = app.add_subcommand("export-noise", "Write the amplified perturbation of one sample as PNG");
  n->add_option("--model", nz.model, "Checkpoint")->required();
  n->add_option("--heads", nz.heads, "Output to attack")->check(CLI::IsMember({"main", "second", "merged"}));
  n->add_option("--index", nz.index, "Sample index");
  n->add_option("--gain", nz.gain, "Noise amplification");
  n->add_option("--out", nz.out_prefix, "Output prefix");
  n->add_option("--seed", nz.seed, "Attack seed");
  nz.data.add(n);
  nz.attack.add(n, false);

  SynthArgs sy;
  auto* s = app.add_subcommand("synth-data", "Generate a Gaussian-blob dataset as IDX files");
  s->add_option("--classes", sy.spec.num_classes, "Classes");
  s->add_option("--per-class", sy.spec.samples_per_class, "Samples per class");
  s->add_option("--size", sy.spec.image_size, "Image side length");
  s->add_option("--channels", sy.spec.channels, "1 or 3");
  s->add_option("--sigma", sy.spec.sigma, "Pixel noise");
  s->add_option("--seed", sy.spec.seed, "Prototype seed");
  s->add_option("--stream", sy.spec.noise_stream, "Noise stream");
  s->add_option("--images", sy.images, "Output image file");
  s->add_option("--labels", sy.labels, "Output label file");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kOk;
  } catch (const CLI::ParseError& pe) {
    err << pe.what() << "\n";
    return kConfigError;
  }

  if (t->parsed()) return guarded([&] { return cmd_train(train, out); }, err);
  if (e->parsed()) return guarded([&] { return cmd_eval(ev, out); }, err);
  if (c->parsed()) return guarded([&] { return cmd_cross_eval(cr, out); }, err);
  if (i->parsed()) return guarded([&] { return cmd_inspect(inspect_model, inspect_json, out); }, err);
  if (n->parsed()) return guarded([&] { return cmd_export_noise(nz, out); }, err);
  if (s->parsed()) return guarded([&] { return cmd_synth(sy, out); }, err);
  return kFailure;
}

}  // namespace dhat::cli
