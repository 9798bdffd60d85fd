// Acceptance run: one PASS/FAIL line per criterion, tolerances fixed below.
// Usage: acceptance [--only 1,2,...] [--seeds N] [--workers N]

#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <random>
#include <set>
#include <sstream>

#include "dhat/checkpoint.hpp"
#include "dhat/error.hpp"
#include "dhat/evaluation.hpp"
#include "dhat/merge_cnn.hpp"
#include "dhat/objectives.hpp"
#include "dhat/ops.hpp"
#include "dhat/training.hpp"
#include "support/gradcheck.hpp"

using namespace dhat;
using dhat::testing::gradcheck;
using dhat::testing::random_tensor;
using dhat::testing::rel_error;

namespace {

// Tolerances and thresholds.
constexpr double kGradTol = 1e-4;
constexpr double kGradStep = 1e-5;
constexpr double kGradSeconds = 60;
constexpr int kAttackCases = 1000;
constexpr double kBallSlack = 1e-9;
constexpr double kLossOracleTol = 1e-10;
constexpr double kStepSizeExpected = 0.00196078;
constexpr double kStepSizeTol = 1e-8;
constexpr double kMergedRobustSlack = 0.005;  // 0.5 percentage points
constexpr double kMergedCleanSlack = 0.01;    // 1 percentage point
constexpr double kDirectionalMinutes = 30;
constexpr int kPlantedTrials = 100;

using Clock = std::chrono::steady_clock;
double since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

std::string num(double v, int prec = 4) {
  std::ostringstream s;
  s << std::setprecision(prec) << v;
  return s.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

std::string list(const std::vector<double>& v) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? " " : "") + num(v[i]);
  return s + "]";
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  return a.shape() == b.shape() && std::memcmp(a.data().data(), b.data().data(), a.numel() * sizeof(Real)) == 0;
}

struct Verdict {
  bool pass = false;
  std::string detail;
};

// 1 -------------------------------------------------------------------------

// Uniform values kept at least `gap` away from the kinks of relu/clamp.
Tensor away_from(std::mt19937_64& rng, Shape shape, std::vector<double> kinks, double gap = 1e-3) {
  Tensor t = random_tensor(rng, std::move(shape), -1, 1);
  for (auto& v : t.mutable_data()) {
    for (double k : kinks) {
      if (std::abs(v - k) < gap) v = static_cast<Real>(k + (v >= k ? gap : -gap) * 2);
    }
  }
  return t;
}

Verdict gradient_suite() {
  const auto start = Clock::now();
  std::mt19937_64 rng(101);
  using V = std::vector<Tensor>;
  double worst = 0;
  std::string worst_name;
  std::size_t count = 0;
  auto check = [&](const std::string& name, const std::function<Tensor(const V&)>& fn, V in) {
    const auto r = gradcheck(fn, std::move(in), kGradStep);
    ++count;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      worst_name = name;
    }
  };
  auto weigh = [](const Tensor& t) {
    std::mt19937_64 wr(7);
    return ops::sum(ops::mul(t, random_tensor(wr, t.shape(), -1, 1, false)));
  };

  const std::size_t n = 4, c = 5;
  auto a = random_tensor(rng, {n, c}), b = random_tensor(rng, {n, c});
  std::vector<int> y{0, 3, 4, 1};
  check("add", [&](const V& v) { return weigh(ops::add(v[0], v[1])); }, {a, b});
  check("sub", [&](const V& v) { return weigh(ops::sub(v[0], v[1])); }, {a, b});
  check("mul", [&](const V& v) { return weigh(ops::mul(v[0], v[1])); }, {a, b});
  check("scale", [&](const V& v) { return weigh(ops::scale(v[0], -1.3)); }, {a});
  check("add_scalar", [&](const V& v) { return weigh(ops::add_scalar(v[0], 0.7)); }, {a});
  check("matmul", [&](const V& v) { return weigh(ops::matmul(v[0], v[1])); },
        {random_tensor(rng, {n, 3}), random_tensor(rng, {3, c})});
  check("clamp", [&](const V& v) { return weigh(ops::clamp(v[0], -0.4, 0.5)); }, {away_from(rng, {n, c}, {-0.4, 0.5})});
  check("relu", [&](const V& v) { return weigh(ops::relu(v[0])); }, {away_from(rng, {n, c}, {0.0})});
  check("log", [&](const V& v) { return weigh(ops::log(v[0])); }, {random_tensor(rng, {n, c}, 0.2, 2)});
  check("sum", [&](const V& v) { return ops::sum(ops::mul(v[0], v[0])); }, {a});
  check("mean", [&](const V& v) { return ops::mean(ops::mul(v[0], v[0])); }, {a});
  check("row_sum", [&](const V& v) { return weigh(ops::row_sum(v[0])); }, {a});
  check("reshape", [&](const V& v) { return weigh(ops::reshape(v[0], {c, n})); }, {a});
  check("flatten", [&](const V& v) { return weigh(ops::flatten(v[0])); }, {random_tensor(rng, {2, 3, 2, 2})});
  check("concat", [&](const V& v) {
          std::vector<Tensor> parts{v[0], v[1]};
          return weigh(ops::concat(parts, 1));
        }, {a, b});
  check("gather", [&](const V& v) { return weigh(ops::gather(v[0], {0, 7, 7, 19, 3, 12}, {2, 3})); }, {a});
  check("pick", [&](const V& v) { return weigh(ops::pick(v[0], y)); }, {a});
  check("conv2d s1 p1", [&](const V& v) { return weigh(ops::conv2d(v[0], v[1], v[2], 1, 1)); },
        {random_tensor(rng, {2, 2, 5, 5}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})});
  check("conv2d s2 p0", [&](const V& v) { return weigh(ops::conv2d(v[0], v[1], v[2], 2, 0)); },
        {random_tensor(rng, {2, 2, 6, 6}), random_tensor(rng, {3, 2, 3, 3}), random_tensor(rng, {3})});
  check("linear", [&](const V& v) { return weigh(ops::linear(v[0], v[1], v[2])); },
        {random_tensor(rng, {n, 3}), random_tensor(rng, {c, 3}), random_tensor(rng, {c})});
  for (bool training : {true, false}) {
    check(training ? "batch_norm train" : "batch_norm eval", [&](const V& v) {
            Tensor rm = Tensor::zeros({3}), rv = Tensor::full({3}, 1);
            return weigh(ops::batch_norm(v[0], v[1], v[2], rm, rv, training));
          }, {random_tensor(rng, {4, 3, 2, 2}), random_tensor(rng, {3}, 0.5, 1.5), random_tensor(rng, {3})});
  }
  check("avg_pool", [&](const V& v) { return weigh(ops::avg_pool(v[0], 1, 2, 2)); }, {random_tensor(rng, {2, 4, 3, 2})});
  check("global_avg_pool", [&](const V& v) { return weigh(ops::global_avg_pool(v[0])); }, {random_tensor(rng, {2, 3, 3, 3})});
  check("softmax", [&](const V& v) { return weigh(ops::softmax(v[0])); }, {a});
  check("log_softmax", [&](const V& v) { return weigh(ops::log_softmax(v[0])); }, {a});
  check("cross_entropy_per_sample", [&](const V& v) { return weigh(ops::cross_entropy_per_sample(v[0], y)); }, {a});
  check("cross_entropy", [&](const V& v) { return ops::cross_entropy(v[0], y); }, {a});
  check("kl_divergence", [&](const V& v) { return weigh(ops::kl_divergence(ops::softmax(v[0]), ops::softmax(v[1]))); },
        {a, b});
  check("kl_divergence_logits", [&](const V& v) { return weigh(ops::kl_divergence_logits(v[0], v[1])); }, {a, b});
  {
    // sign has an identically zero gradient; finite differences agree away from 0.
    check("sign", [&](const V& v) { return weigh(ops::sign(v[0])); }, {away_from(rng, {n, c}, {0.0}, 0.05)});
  }
  {
    nn::Rng mr(3);
    MergeCNN merge(4, mr);
    check("merge_cnn", [&](const V& v) { return weigh(merge.logits(v[0], v[1], true)); },
          {random_tensor(rng, {6, 4}, -2, 2), random_tensor(rng, {6, 4}, -2, 2)});
  }
  {
    // conv -> BN -> relu -> conv -> relu -> global pool -> linear -> CE
    auto x = random_tensor(rng, {3, 1, 6, 6}, 0, 1);
    std::vector<int> labels{0, 2, 1};
    V params{x,
             random_tensor(rng, {4, 1, 3, 3}),
             random_tensor(rng, {4}),
             random_tensor(rng, {4}, 0.5, 1.5),
             random_tensor(rng, {4}),
             random_tensor(rng, {5, 4, 3, 3}),
             random_tensor(rng, {5}),
             random_tensor(rng, {3, 5}),
             random_tensor(rng, {3})};
    check("3-layer composite", [&](const V& v) {
            Tensor rm = Tensor::zeros({4}), rv = Tensor::full({4}, 1);
            Tensor h = ops::conv2d(v[0], v[1], v[2], 1, 1);
            h = ops::relu(ops::batch_norm(h, v[3], v[4], rm, rv, true));
            h = ops::relu(ops::conv2d(h, v[5], v[6], 2, 1));
            return ops::cross_entropy(ops::linear(ops::global_avg_pool(h), v[7], v[8]), labels);
          }, params);
  }
  const double secs = since(start);
  return {worst <= kGradTol && secs < kGradSeconds,
          std::to_string(count) + " checks, max rel err " + num(worst, 3) + " (" + worst_name + ") <= " +
              num(kGradTol) + ", " + num(secs, 3) + " s < " + num(kGradSeconds) + " s"};
}

// 2 -------------------------------------------------------------------------

Verdict attack_invariants() {
  std::mt19937_64 rng(202);
  std::uniform_real_distribution<double> ueps(0.0, 0.5);
  std::uniform_int_distribution<int> usteps(1, 5), urestarts(1, 2), uclasses(2, 6), un(1, 4);
  int ball = 0, zero = 0, zero_total = 0, fgsm_eq = 0;
  double worst_excess = -1;
  for (int trial = 0; trial < kAttackCases; ++trial) {
    const int classes = uclasses(rng);
    const std::size_t batch = static_cast<std::size_t>(un(rng));
    auto w = random_tensor(rng, {static_cast<std::size_t>(classes), 12}, -2, 2);
    auto bias = random_tensor(rng, {static_cast<std::size_t>(classes)}, -1, 1);
    LogitsFn f = [w, bias](const Tensor& in) { return ops::linear(ops::flatten(in), w, bias); };
    auto x = random_tensor(rng, {batch, 1, 3, 4}, 0, 1, false);
    std::vector<int> y(batch);
    for (auto& v : y) v = std::uniform_int_distribution<int>(0, classes - 1)(rng);
    AttackConfig cfg;
    cfg.epsilon = trial % 10 == 0 ? 0.0 : ueps(rng);
    cfg.num_steps = usteps(rng);
    cfg.restarts = urestarts(rng);
    cfg.random_start = trial % 2 == 0;
    cfg.loss_mode = trial % 3 == 0 ? AttackLoss::KL : AttackLoss::CE;
    if (trial % 4 == 0) cfg.step_size = ueps(rng) + 1e-3;
    AttackOptions opts;
    opts.seed = static_cast<std::uint64_t>(trial);
    Tensor adv = pgd(f, x, y, f(x), cfg, opts).x_adv;
    Tensor adv_fgsm = fgsm(f, x, y, cfg.epsilon);
    bool ok = true;
    for (const Tensor* t : {&adv, &adv_fgsm}) {
      for (std::size_t i = 0; i < x.numel(); ++i) {
        const double d = std::abs(t->at(i) - x.at(i));
        worst_excess = std::max(worst_excess, d - cfg.epsilon);
        if (d > cfg.epsilon + kBallSlack || t->at(i) < 0.0 || t->at(i) > 1.0) ok = false;
      }
    }
    ball += ok;
    if (cfg.epsilon == 0) {
      ++zero_total;
      zero += bit_equal(adv, x) && bit_equal(adv_fgsm, x);
    }
    AttackConfig one;
    one.epsilon = cfg.epsilon;
    one.step_size = cfg.epsilon > 0 ? std::optional<double>(cfg.epsilon) : std::nullopt;
    one.num_steps = 1;
    one.random_start = false;
    fgsm_eq += bit_equal(pgd(f, x, y, Tensor(), one, opts).x_adv, adv_fgsm);
  }
  return {ball == kAttackCases && zero == zero_total && fgsm_eq == kAttackCases,
          "ball+box " + std::to_string(ball) + "/" + std::to_string(kAttackCases) + " (max excess " +
              num(worst_excess, 3) + " <= " + num(kBallSlack) + "), eps=0 identity " + std::to_string(zero) + "/" +
              std::to_string(zero_total) + ", 1-step PGD == FGSM " + std::to_string(fgsm_eq) + "/" +
              std::to_string(kAttackCases)};
}

// 3 -------------------------------------------------------------------------

Verdict merge_dimensions() {
  bool ok = true;
  std::string detail;
  nn::Rng rng(303);
  auto shapes_ok = [&](int C) {
    std::size_t pairs = 0;
    for (int i = 0; i < C; ++i)
      for (int j = i + 1; j < C; ++j) ++pairs;
    MergeCNN m(C, rng);
    const std::size_t c = static_cast<std::size_t>(C);
    std::mt19937_64 r(static_cast<std::uint64_t>(C));
    MergeCNN::Trace t;
    m.forward(random_tensor(r, {1, c}, -2, 2, false), random_tensor(r, {1, c}, -2, 2, false), false, &t);
    const bool good = pairs == c * (c - 1) / 2 && t.headwise.shape() == Shape{1, 8, c} &&
                      t.pairwise.shape() == Shape{1, 16, 8, pairs} && t.pooled.shape() == Shape{1, 8, 8, pairs} &&
                      t.flat.shape() == Shape{1, 64 * pairs} && m.flatten_width() == 64 * pairs &&
                      t.logits.shape() == Shape{1, c};
    return std::pair{good, m.flatten_width()};
  };
  auto [ten_ok, ten_flat] = shapes_ok(10);
  ok = ten_ok && ten_flat == 2880;
  detail = "C=10 flatten " + std::to_string(ten_flat) + " (expect 2880), chain 8x10 / 16x8x45 / 8x8x45 " +
           (ten_ok ? "ok" : "mismatch");
  for (int C : {2, 3, 4, 100}) {
    auto [good, flat] = shapes_ok(C);
    ok = ok && good;
    detail += "; C=" + std::to_string(C) + " flatten " + std::to_string(flat) + (good ? "" : " MISMATCH");
  }
  return {ok, detail};
}

// 4 -------------------------------------------------------------------------

Verdict parameter_ratios() {
  nn::Rng rng(404);
  ArchSpec wrn;
  wrn.family = Family::WideResNet;
  wrn.depth = 34;
  wrn.widen_factor = 10;
  wrn.num_classes = 10;
  wrn.input_channels = 3;
  wrn.input_size = 32;
  double sym = 0;
  {
    auto net = attach_second_head(build_network(wrn, rng), 1, wrn, InitMode::Copy, rng);
    sym = net.census().second_over_base;
  }
  ArchSpec r34;
  r34.family = Family::ResNet;
  r34.depth = 34;
  r34.num_classes = 100;
  r34.input_channels = 3;
  r34.input_size = 32;
  ArchSpec r18 = r34;
  r18.depth = 18;
  auto net = attach_second_head(build_network(r34, rng), 1, r18, InitMode::Fresh, rng);
  const double asym = net.census().second_over_main;
  return {sym >= 0.90 && sym <= 1.00 && asym >= 0.40 && asym <= 0.60,
          "WRN-34-10 second/base " + num(sym) + " in [0.90, 1.00]; RN-34/RN-18 second/main " + num(asym) +
              " in [0.40, 0.60]"};
}

// shared small pipeline ----------------------------------------------------

ArchSpec smallconv(int classes, int size) {
  ArchSpec s;
  s.family = Family::SmallConv;
  s.depth = 3;
  s.num_classes = classes;
  s.input_channels = 1;
  s.input_size = size;
  return s;
}

Dataset blobs(int classes, int per_class, int size, double sigma, std::uint64_t seed, std::uint64_t stream) {
  SynthSpec s;
  s.num_classes = classes;
  s.samples_per_class = per_class;
  s.image_size = size;
  s.sigma = sigma;
  s.seed = seed;
  s.noise_stream = stream;
  Dataset d = synth_dataset(s);
  d.id = "blobs";
  return d;
}

AttackConfig linf(double eps, int steps, std::optional<double> step = std::nullopt, AttackLoss mode = AttackLoss::CE) {
  AttackConfig a;
  a.epsilon = eps;
  a.num_steps = steps;
  a.step_size = step;
  a.loss_mode = mode;
  return a;
}

TrainPlan trades_plan(TrainStage stage, double inv_lambda, int epochs, const AttackConfig& atk, std::uint64_t seed) {
  TrainPlan p;
  p.stage = stage;
  p.objective = Objective{ObjectiveKind::TRADES, inv_lambda, atk};
  p.epochs = epochs;
  p.optimizer = OptimizerConfig{0.05, 0.9, 2e-4, {}};
  p.batch_size = 32;
  p.val_attack = atk;
  p.seed = seed;
  return p;
}

PipelineConfig tiny_pipeline(std::uint64_t seed) {
  const AttackConfig atk = linf(0.1, 3, 0.04, AttackLoss::KL);
  PipelineConfig c;
  c.main_arch = smallconv(4, 8);
  c.seed = seed;
  c.config_digest = "acceptance";
  c.stage1 = trades_plan(TrainStage::MainHead, 6, 2, atk, mix_seed(seed, 100));
  c.stage2 = trades_plan(TrainStage::SecondHead, 3, 2, atk, mix_seed(seed, 101));
  c.stage3 = merge_stage_plan(atk);
  c.stage3.epochs = 2;
  c.stage3.batch_size = 32;
  c.stage3.seed = mix_seed(seed, 102);
  return c;
}

std::vector<Real> region_values(const DualHeadNetwork& net, std::initializer_list<Region> regions) {
  std::vector<Real> out;
  for (Region r : regions)
    for (const auto& t : net.region_tensors(r)) out.insert(out.end(), t.tensor.data().begin(), t.tensor.data().end());
  return out;
}

// 5 -------------------------------------------------------------------------

Verdict freeze_soundness() {
  const Dataset train = blobs(4, 40, 8, 0.2, 5, 0), val = blobs(4, 8, 8, 0.2, 5, 2);
  const PipelineConfig cfg = tiny_pipeline(17);
  DualHeadNetwork net = pipeline_initial_network(cfg);
  run_pipeline_stage(net, 1, cfg, train, val);
  const Checkpoint stage1 = pipeline_checkpoint(net, 1, cfg.stage1.epochs, cfg);
  const auto stem1 = region_values(net, {Region::Stem});
  const auto main1 = region_values(net, {Region::HeadMain});
  run_pipeline_stage(net, 2, cfg, train, val);
  const bool stem_after2 = region_values(net, {Region::Stem}) == stem1 &&
                           region_values(net, {Region::HeadMain}) == main1;
  const auto heads2 = region_values(net, {Region::Stem, Region::HeadMain, Region::HeadSecond});
  const auto merge_before = region_values(net, {Region::Merge});
  run_pipeline_stage(net, 3, cfg, train, val);
  const bool heads_after3 = region_values(net, {Region::Stem, Region::HeadMain, Region::HeadSecond}) == heads2;
  const bool merge_moved = region_values(net, {Region::Merge}) != merge_before;

  // Round-trip the final artifact and compare against the stage-1 file on 64 samples.
  DualHeadNetwork final_net = network_from_checkpoint(decode_checkpoint(encode_checkpoint(
      pipeline_checkpoint(net, 3, cfg.stage3.epochs, cfg))));
  DualHeadNetwork first = network_from_checkpoint(stage1);
  const Dataset probe = blobs(4, 16, 8, 0.2, 5, 9);
  const bool forward_same = bit_equal(final_net.forward(probe.images, HeadMode::Main),
                                      first.forward(probe.images, HeadMode::Main));
  return {stem_after2 && heads_after3 && merge_moved && forward_same && probe.size() == 64,
          std::string("stage 2 keeps stem+main bytes: ") + (stem_after2 ? "yes" : "no") +
              ", stage 3 keeps stem+heads bytes: " + (heads_after3 ? "yes" : "no") +
              ", merge trained: " + (merge_moved ? "yes" : "no") + ", main forward on " +
              std::to_string(probe.size()) + " samples bit-identical to stage 1: " + (forward_same ? "yes" : "no")};
}

// 6 -------------------------------------------------------------------------

Verdict loss_oracles() {
  std::mt19937_64 rng(606);
  const std::size_t n = 8, d = 12, c = 5;
  Tensor w = random_tensor(rng, {c, d}, -1.5, 1.5), b = random_tensor(rng, {c}, -0.5, 0.5);
  Tensor x = random_tensor(rng, {n, 1, 3, 4}, 0, 1, false);
  Tensor x_adv = x.detach();
  std::uniform_real_distribution<double> u(-0.1, 0.1);
  for (auto& v : x_adv.mutable_data()) v = std::clamp(v + u(rng), 0.0, 1.0);
  std::vector<int> y{0, 1, 2, 3, 4, 0, 1, 2};
  auto f = [w, b](const Tensor& in) { return ops::linear(ops::flatten(in), w, b); };
  LossModel model{f, f};

  auto probs = [&](const Tensor& in) {
    std::vector<std::vector<double>> p(n, std::vector<double>(c));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(c);
      for (std::size_t k = 0; k < c; ++k) {
        double s = b.at(k);
        for (std::size_t j = 0; j < d; ++j) s += w.at(k * d + j) * in.at(i * d + j);
        z[k] = s;
      }
      const double m = *std::max_element(z.begin(), z.end());
      double tot = 0;
      for (double v : z) tot += std::exp(v - m);
      for (std::size_t k = 0; k < c; ++k) p[i][k] = std::exp(z[k] - m) / tot;
    }
    return p;
  };
  const auto p = probs(x), q = probs(x_adv);
  const double inv_lambda = 6.0;
  double ce = 0, kl = 0, bce = 0, wkl = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double row_kl = 0, wrong = 0;
    for (std::size_t k = 0; k < c; ++k) {
      row_kl += p[i][k] * (std::log(p[i][k]) - std::log(q[i][k]));
      if (static_cast<int>(k) != y[i]) wrong = std::max(wrong, q[i][k]);
    }
    ce += -std::log(p[i][y[i]]);
    kl += row_kl;
    bce += -std::log(q[i][y[i]]) - std::log(1 - wrong);
    wkl += row_kl * (1 - p[i][y[i]]);
  }
  const double trades_err =
      rel_error(trades_loss_injected(model, x, x_adv, y, inv_lambda).item(), (ce + inv_lambda * kl) / n, 1e-300);
  const double mart_err =
      rel_error(mart_loss_injected(model, x, x_adv, y, inv_lambda).item(), (bce + inv_lambda * wkl) / n, 1e-300);
  const double clean_ce = ops::cross_entropy(f(x), y).item();
  const bool zero_weight = trades_loss(model, x, y, 0.0, linf(0.3, 5)).item() == clean_ce;
  const double step = derive_step_size(8.0 / 255.0, 40);
  return {trades_err <= kLossOracleTol && mart_err <= kLossOracleTol && zero_weight &&
              std::abs(step - kStepSizeExpected) <= kStepSizeTol,
          "trades rel err " + num(trades_err, 3) + ", mart rel err " + num(mart_err, 3) + " (<= " +
              num(kLossOracleTol) + "), trades(1/lambda=0) == CE: " + (zero_weight ? "yes" : "no") +
              ", PGD40 step at 8/255 = " + num(step, 9) + " (expect " + num(kStepSizeExpected, 9) + " +- " +
              num(kStepSizeTol) + ")"};
}

// 7 / 8 / 9 -----------------------------------------------------------------

struct DeskSetup {
  int classes = 10;
  int size = 12;
  double sigma = 0.3;
  std::uint64_t data_seed = 2024;
  double eps = 0.2;
  double alpha = 0.05;
  int train_steps = 10;
  int eval_steps = 20;
  int merge_epochs = 15;
  std::size_t workers = 1;
};

AttackConfig train_attack(const DeskSetup& s) { return linf(s.eps, s.train_steps, s.alpha, AttackLoss::KL); }
AttackConfig eval_attack(const DeskSetup& s) { return linf(s.eps, s.eval_steps); }

struct HeadScores {
  double clean = 0, robust = 0;
};

HeadScores score(DualHeadNetwork& net, HeadMode mode, const Dataset& test, const DeskSetup& s, std::uint64_t seed) {
  RobustResult r = evaluate_robust(net, test, eval_attack(s), mode, EvalOptions{256, seed, s.workers});
  return {r.clean_accuracy, r.robust_accuracy};
}

Verdict directional_merge(const DeskSetup& s, int seeds, double& minutes) {
  const auto start = Clock::now();
  const Dataset train = blobs(s.classes, 500, s.size, s.sigma, s.data_seed, 0);
  const Dataset test = blobs(s.classes, 100, s.size, s.sigma, s.data_seed, 1);
  const Dataset val = blobs(s.classes, 20, s.size, s.sigma, s.data_seed, 2);
  std::vector<double> main_r, merged_r, merged_c, min_c;
  TrainOptions opts;
  opts.workers = s.workers;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto t0 = Clock::now();
    PipelineConfig cfg;
    cfg.main_arch = smallconv(s.classes, s.size);
    cfg.seed = static_cast<std::uint64_t>(seed);
    cfg.config_digest = "desk-merge";
    const AttackConfig atk = train_attack(s);
    cfg.stage1 = trades_plan(TrainStage::MainHead, 6, 6, atk, mix_seed(cfg.seed, 100));
    cfg.stage2 = trades_plan(TrainStage::SecondHead, 3, 6, atk, mix_seed(cfg.seed, 101));
    cfg.stage1.batch_size = cfg.stage2.batch_size = 64;
    cfg.stage3 = merge_stage_plan(atk);
    cfg.stage3.epochs = s.merge_epochs;
    cfg.stage3.seed = mix_seed(cfg.seed, 102);
    PipelineResult res = dhat_pipeline(cfg, train, val, opts);
    const std::uint64_t eval_seed = mix_seed(cfg.seed, 0xe7a1);
    const HeadScores m = score(res.net, HeadMode::Main, test, s, eval_seed);
    const HeadScores sc = score(res.net, HeadMode::Second, test, s, eval_seed);
    const HeadScores mg = score(res.net, HeadMode::Merged, test, s, eval_seed);
    main_r.push_back(m.robust);
    merged_r.push_back(mg.robust);
    merged_c.push_back(mg.clean);
    min_c.push_back(std::min(m.clean, sc.clean));
    std::cout << "  [7] seed " << seed << ": main clean " << num(m.clean) << " robust " << num(m.robust)
              << " | second clean " << num(sc.clean) << " robust " << num(sc.robust) << " | merged clean "
              << num(mg.clean) << " robust " << num(mg.robust) << " (" << num(since(t0), 3) << " s)" << std::endl;
  }
  minutes = since(start) / 60;
  const double mr = median(merged_r), mm = median(main_r), mc = median(merged_c), hc = median(min_c);
  const bool robust_ok = mr >= mm - kMergedRobustSlack;
  const bool clean_ok = mc >= hc - kMergedCleanSlack;
  return {robust_ok && clean_ok && minutes <= kDirectionalMinutes,
          "median merged robust " + num(mr) + " vs main " + num(mm) + " - 0.005; median merged clean " + num(mc) +
              " vs min head clean " + num(hc) + " - 0.01; " + num(minutes, 3) + " min <= " +
              num(kDirectionalMinutes) + " min"};
}

struct BestLastOutcome {
  Verdict best_last, cross;
};

BestLastOutcome directional_best_last(const DeskSetup& s, int seeds) {
  const Dataset train = blobs(s.classes, 200, s.size, s.sigma, s.data_seed, 0);
  const Dataset test = blobs(s.classes, 50, s.size, s.sigma, s.data_seed, 1);
  const Dataset val = blobs(s.classes, 20, s.size, s.sigma, s.data_seed, 2);
  const int search = 10, extra = 10;
  TrainOptions opts;
  opts.workers = s.workers;
  std::vector<double> merged_r, last_r, self_r, transfer_r;
  for (int seed = 0; seed < seeds; ++seed) {
    const auto t0 = Clock::now();
    const std::uint64_t sd = static_cast<std::uint64_t>(seed);
    const AttackConfig atk = train_attack(s);
    nn::Rng rng(mix_seed(sd, 1));
    DualHeadNetwork net(build_network(smallconv(s.classes, s.size), rng), 1);
    TrainPlan p1 = trades_plan(TrainStage::MainHead, 6, search + extra, atk, mix_seed(sd, 100));
    p1.batch_size = 64;
    p1.optimizer.milestones = {{8, 0.1}};
    p1.keep_snapshots = true;
    StageResult r1 = train_stage(net, p1, train, val, opts);
    // best among the first `search` epochs, so best + extra lies on the same trajectory
    const int best = select_best_checkpoint(std::span<const CheckpointRecord>(r1.history).first(search));
    DualHeadNetwork last = net.clone();
    last.restore(*r1.history[static_cast<std::size_t>(best + extra - 1)].snapshot);
    DualHeadNetwork best_net = net.clone();
    best_net.restore(*r1.history[static_cast<std::size_t>(best - 1)].snapshot);

    // Cross-evaluation between the two checkpoints of this run.
    const std::uint64_t eval_seed = mix_seed(sd, 0xe7a1);
    CrossTable t = cross_evaluate(head_logits(best_net, HeadMode::Main), head_logits(last, HeadMode::Main), test,
                                  eval_attack(s), EvalOptions{256, eval_seed, s.workers});
    self_r.push_back(t.accuracy[0][0]);
    self_r.push_back(t.accuracy[1][1]);
    transfer_r.push_back(t.accuracy[0][1]);
    transfer_r.push_back(t.accuracy[1][0]);

    // Second head copied from the best main head, trained `extra` further epochs.
    DualHeadNetwork dh = best_net.clone();
    dh.attach_second_head(dh.main_spec(), InitMode::Copy, rng);
    for (Region r : stage_frozen_regions(TrainStage::SecondHead)) dh.set_freeze(r, true);
    TrainPlan p2 = trades_plan(TrainStage::SecondHead, 6, extra, atk, mix_seed(sd, 101));
    p2.batch_size = 64;
    p2.optimizer.milestones = p1.optimizer.milestones;
    p2.first_epoch = best + 1;
    train_stage(dh, p2, train, val, opts);
    nn::Rng mrng(mix_seed(sd, 3));
    dh.attach_merge(mrng);
    for (Region r : stage_frozen_regions(TrainStage::Merge)) dh.set_freeze(r, true);
    TrainPlan p3 = merge_stage_plan(atk);
    p3.epochs = s.merge_epochs;
    p3.seed = mix_seed(sd, 102);
    train_stage(dh, p3, train, val, opts);

    const HeadScores merged = score(dh, HeadMode::Merged, test, s, eval_seed);
    const HeadScores lastc = score(last, HeadMode::Main, test, s, eval_seed);
    const HeadScores dh_main = score(dh, HeadMode::Main, test, s, eval_seed);
    const HeadScores dh_second = score(dh, HeadMode::Second, test, s, eval_seed);
    merged_r.push_back(merged.robust);
    last_r.push_back(lastc.robust);
    std::cout << "  [8/9] seed " << seed << ": best epoch " << best << ", last epoch " << best + extra
              << " | merged robust " << num(merged.robust) << " vs last " << num(lastc.robust) << " (heads "
              << num(dh_main.robust) << " / " << num(dh_second.robust) << ") | cross "
              << num(t.accuracy[0][0]) << " " << num(t.accuracy[0][1]) << " / " << num(t.accuracy[1][0]) << " "
              << num(t.accuracy[1][1]) << " (" << num(since(t0), 3) << " s)" << std::endl;
  }
  BestLastOutcome out;
  const double mm = median(merged_r), ml = median(last_r);
  out.best_last = {mm >= ml, "median merged robust " + num(mm) + " " + list(merged_r) + " >= last checkpoint " +
                                 num(ml) + " " + list(last_r)};
  const double ms = median(self_r), mt = median(transfer_r);
  out.cross = {ms <= mt, "median self-attack robust " + num(ms) + " " + list(self_r) + " <= transfer " + num(mt) +
                             " " + list(transfer_r)};
  return out;
}

// 10 ------------------------------------------------------------------------

Verdict reproducibility() {
  namespace fs = std::filesystem;
  bool ok = true;
  std::string detail;
  const Dataset train = blobs(4, 24, 8, 0.2, 5, 0), val = blobs(4, 6, 8, 0.2, 5, 2);
  PipelineResult a = dhat_pipeline(tiny_pipeline(23), train, val);
  PipelineResult b = dhat_pipeline(tiny_pipeline(23), train, val);
  bool same_ckpt = a.checkpoints.size() == 3 && b.checkpoints.size() == 3;
  for (std::size_t i = 0; same_ckpt && i < 3; ++i) {
    same_ckpt = encode_checkpoint(a.checkpoints[i]) == encode_checkpoint(b.checkpoints[i]);
  }
  const Dataset test = blobs(4, 10, 8, 0.2, 5, 1);
  bool same_acc = true;
  for (HeadMode m : {HeadMode::Main, HeadMode::Second, HeadMode::Merged}) {
    RobustResult ra = evaluate_robust(a.net, test, linf(0.1, 5), m, EvalOptions{256, 1, 1});
    RobustResult rb = evaluate_robust(b.net, test, linf(0.1, 5), m, EvalOptions{256, 1, 1});
    same_acc = same_acc && ra.clean_accuracy == rb.clean_accuracy && ra.robust_accuracy == rb.robust_accuracy &&
               ra.adv_pred == rb.adv_pred;
  }
  ok = same_ckpt && same_acc;
  detail = std::string("identical checkpoints: ") + (same_ckpt ? "yes" : "no") +
           ", identical report accuracies: " + (same_acc ? "yes" : "no");

  // checkpoint round trip through a file
  const fs::path dir = fs::temp_directory_path() / "dhat_acceptance";
  fs::create_directories(dir);
  const std::string file = (dir / "rt.dhat").string();
  save_checkpoint(a.net, a.checkpoints[2].meta, file);
  Checkpoint loaded = load_checkpoint(file);
  DualHeadNetwork back = network_from_checkpoint(loaded);
  bool ckpt_rt = encode_checkpoint(loaded) == encode_checkpoint(make_checkpoint(a.net, a.checkpoints[2].meta));
  auto ta = a.net.tensors(), tb = back.tensors();
  ckpt_rt = ckpt_rt && ta.size() == tb.size();
  for (std::size_t i = 0; ckpt_rt && i < ta.size(); ++i) ckpt_rt = bit_equal(ta[i].tensor, tb[i].tensor);
  ckpt_rt = ckpt_rt && bit_equal(back.forward(test.images, HeadMode::Merged), a.net.forward(test.images, HeadMode::Merged));

  // dataset round trips: IDX write/read and CIFAR bytes re-encoded
  Dataset q = blobs(3, 5, 6, 0.3, 9, 0);
  for (auto& v : q.images.mutable_data()) v = static_cast<Real>(std::lround(v * 255.0) / 255.0);
  save_idx(q, (dir / "x.idx").string(), (dir / "y.idx").string());
  Dataset qb = load_idx((dir / "x.idx").string(), (dir / "y.idx").string(), 3);
  bool data_rt = bit_equal(q.images, qb.images) && q.labels == qb.labels;
  {
    std::mt19937_64 rng(10);
    std::vector<unsigned char> bytes(4 * 3073);
    for (auto& v : bytes) v = static_cast<unsigned char>(rng() & 0xff);
    for (int r = 0; r < 4; ++r) bytes[static_cast<std::size_t>(r) * 3073] = static_cast<unsigned char>(r * 3 % 10);
    std::ofstream((dir / "c.bin").string(), std::ios::binary)
        .write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    Dataset cd = load_cifar_binary({(dir / "c.bin").string()}, 10);
    std::vector<unsigned char> again;
    for (std::size_t r = 0; r < cd.size(); ++r) {
      again.push_back(static_cast<unsigned char>(cd.labels[r]));
      for (std::size_t i = 0; i < 3072; ++i) {
        again.push_back(static_cast<unsigned char>(std::lround(cd.images.at(r * 3072 + i) * 255.0)));
      }
    }
    data_rt = data_rt && again == bytes;
  }
  fs::remove_all(dir);

  // planted argmax
  std::mt19937_64 rng(1010);
  int recovered = 0;
  for (int trial = 0; trial < kPlantedTrials; ++trial) {
    const int len = std::uniform_int_distribution<int>(1, 40)(rng);
    const int planted = std::uniform_int_distribution<int>(1, len)(rng);
    std::vector<CheckpointRecord> h(static_cast<std::size_t>(len));
    for (int e = 1; e <= len; ++e) {
      h[e - 1].epoch = e;
      h[e - 1].robust_val_acc = std::uniform_real_distribution<double>(0.0, 0.5)(rng);
    }
    h[planted - 1].robust_val_acc = 0.75;
    recovered += select_best_checkpoint(h) == planted;
  }
  ok = ok && ckpt_rt && data_rt && recovered == kPlantedTrials;
  detail += std::string(", checkpoint round trip bit-exact: ") + (ckpt_rt ? "yes" : "no") +
            ", dataset round trips bit-exact: " + (data_rt ? "yes" : "no") + ", planted argmax " +
            std::to_string(recovered) + "/" + std::to_string(kPlantedTrials);
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria"};
  std::vector<int> only;
  int seeds = 3;
  DeskSetup desk;
  app.add_option("--only", only, "Criteria to run (default all)")->delimiter(',');
  app.add_option("--seeds", seeds, "Seeds for the directional experiments");
  app.add_option("--workers", desk.workers, "Attack worker threads");
  app.add_option("--merge-epochs", desk.merge_epochs, "Merge-stage epochs in the directional experiments");
  CLI11_PARSE(app, argc, argv);
  std::set<int> want(only.begin(), only.end());
  auto enabled = [&](int id) { return want.empty() || want.count(id); };

  int failures = 0;
  auto report = [&](int id, const Verdict& v) {
    std::cout << "criterion " << std::setw(2) << id << ": " << (v.pass ? "PASS" : "FAIL") << "  " << v.detail
              << std::endl;
    failures += !v.pass;
  };
  auto guarded = [&](int id, const std::function<Verdict()>& fn) {
    if (!enabled(id)) return;
    const auto t0 = Clock::now();
    Verdict v;
    try {
      v = fn();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    v.detail += " [" + num(since(t0), 3) + " s]";
    report(id, v);
  };

  guarded(1, gradient_suite);
  guarded(2, attack_invariants);
  guarded(3, merge_dimensions);
  guarded(4, parameter_ratios);
  guarded(5, freeze_soundness);
  guarded(6, loss_oracles);
  guarded(7, [&] {
    double minutes = 0;
    return directional_merge(desk, seeds, minutes);
  });
  if (enabled(8) || enabled(9)) {
    const auto t0 = Clock::now();
    BestLastOutcome o;
    try {
      o = directional_best_last(desk, seeds);
    } catch (const std::exception& e) {
      o.best_last = o.cross = {false, std::string("exception: ") + e.what()};
    }
    const std::string t = " [" + num(since(t0), 3) + " s shared]";
    o.best_last.detail += t;
    o.cross.detail += t;
    if (enabled(8)) report(8, o.best_last);
    if (enabled(9)) report(9, o.cross);
  }
  guarded(10, reproducibility);
  std::cout << (failures ? std::to_string(failures) + " criteria failed" : std::string("all criteria passed"))
            << std::endl;
  return failures ? 1 : 0;
}
