#include "dhat/attacks.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <thread>

#include "dhat/error.hpp"
#include "dhat/ops.hpp"

namespace dhat {

std::string to_string(AttackLoss l) { return l == AttackLoss::CE ? "ce" : "kl"; }

AttackLoss attack_loss_from_string(std::string_view s) {
  if (s == "ce") return AttackLoss::CE;
  if (s == "kl") return AttackLoss::KL;
  throw ArgumentError("unknown attack loss '" + std::string(s) + "'");
}

double derive_step_size(double epsilon, int num_steps) {
  if (num_steps < 1) throw ArgumentError("num_steps must be >= 1");
  return 2.5 * epsilon / num_steps;
}

void AttackConfig::validate() const {
  if (!(epsilon >= 0)) throw ArgumentError("epsilon must be >= 0");
  if (num_steps < 1) throw ArgumentError("num_steps must be >= 1");
  if (restarts < 1) throw ArgumentError("restarts must be >= 1");
  if (step_size && !(*step_size > 0)) throw ArgumentError("step_size must be > 0");
  if (!(lo < hi)) throw ArgumentError("pixel bounds must satisfy lo < hi");
}

double AttackConfig::effective_step_size() const {
  return step_size ? *step_size : derive_step_size(epsilon, num_steps);
}

nlohmann::ordered_json attack_to_json(const AttackConfig& cfg) {
  nlohmann::ordered_json j;
  j["epsilon"] = cfg.epsilon;
  j["step_size"] = cfg.effective_step_size();
  j["step_size_derived"] = !cfg.step_size.has_value();
  j["num_steps"] = cfg.num_steps;
  j["restarts"] = cfg.restarts;
  j["random_start"] = cfg.random_start;
  j["loss_mode"] = to_string(cfg.loss_mode);
  j["pixel_bounds"] = {cfg.lo, cfg.hi};
  return j;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
  auto mix = [](std::uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(mix(seed) ^ a) ^ b);
}

namespace {

void project_in_place(std::span<Real> adv, std::span<const Real> x, double eps, double lo,
                      double hi) {
  for (std::size_t i = 0; i < adv.size(); ++i) {
    Real v = std::clamp(adv[i], static_cast<Real>(x[i] - eps), static_cast<Real>(x[i] + eps));
    adv[i] = std::clamp(v, static_cast<Real>(lo), static_cast<Real>(hi));
  }
}

Tensor per_sample_loss(const LogitsFn& model, const Tensor& x, std::span<const int> labels,
                       const Tensor& reference, AttackLoss mode) {
  Tensor z = model(x);
  if (mode == AttackLoss::CE) return ops::cross_entropy_per_sample(z, labels);
  return ops::kl_divergence_logits(reference, z);
}

// Runs every restart for one contiguous chunk of the batch.
AttackResult pgd_chunk(const LogitsFn& model, const Tensor& x, std::span<const int> labels,
                       const Tensor& reference, const AttackConfig& cfg,
                       std::span<const std::uint64_t> ids, std::uint64_t seed, int first_restart) {
  const std::size_t n = x.dim(0), row = x.numel() / n;
  const double alpha = cfg.effective_step_size();
  auto xd = x.data();

  AttackResult best;
  std::vector<Real> best_adv(xd.begin(), xd.end());
  best.loss.assign(n, -std::numeric_limits<double>::infinity());

  for (int r = 0; r < cfg.restarts; ++r) {
    Tensor adv = x.detach();
    auto ad = adv.mutable_data();
    if (cfg.random_start && cfg.epsilon > 0) {
      std::uniform_real_distribution<double> u(-cfg.epsilon, cfg.epsilon);
      for (std::size_t s = 0; s < n; ++s) {
        std::mt19937_64 rng(mix_seed(seed, ids[s], static_cast<std::uint64_t>(first_restart + r)));
        for (std::size_t i = s * row; i < (s + 1) * row; ++i) ad[i] = static_cast<Real>(ad[i] + u(rng));
      }
      project_in_place(ad, xd, cfg.epsilon, cfg.lo, cfg.hi);
    }
    for (int t = 0; t < cfg.num_steps; ++t) {
      adv.set_requires_grad(true);
      Tensor loss = ops::sum(per_sample_loss(model, adv, labels, reference, cfg.loss_mode));
      const auto g = gradients(loss, std::span<const Tensor>(&adv, 1))[0];
      Tensor next = adv.detach();
      auto nd = next.mutable_data();
      for (std::size_t i = 0; i < nd.size(); ++i) {
        const Real s = g[i] > 0 ? Real(1) : (g[i] < 0 ? Real(-1) : Real(0));
        nd[i] = static_cast<Real>(nd[i] + alpha * s);
      }
      project_in_place(nd, xd, cfg.epsilon, cfg.lo, cfg.hi);
      adv = next;
    }
    std::vector<double> final_loss;
    {
      NoGradGuard guard;
      auto l = per_sample_loss(model, adv, labels, reference, cfg.loss_mode);
      final_loss.assign(l.data().begin(), l.data().end());
    }
    auto fd = adv.data();
    for (std::size_t s = 0; s < n; ++s) {
      if (final_loss[s] > best.loss[s]) {
        best.loss[s] = final_loss[s];
        std::copy(fd.begin() + s * row, fd.begin() + (s + 1) * row, best_adv.begin() + s * row);
      }
    }
    best.restart_losses.push_back(std::move(final_loss));
  }
  best.x_adv = Tensor::from(x.shape(), std::move(best_adv));
  return best;
}

}  // namespace

Tensor project_linf(const Tensor& x_adv, const Tensor& x, double epsilon, double lo, double hi) {
  if (epsilon < 0) throw ArgumentError("project_linf: epsilon must be >= 0");
  if (x_adv.shape() != x.shape()) {
    throw DimensionError("project_linf: shapes " + shape_str(x_adv.shape()) + " and " +
                         shape_str(x.shape()) + " differ");
  }
  Tensor out = x_adv.detach();
  project_in_place(out.mutable_data(), x.data(), epsilon, lo, hi);
  return out;
}

std::vector<double> attack_loss(const LogitsFn& model, const Tensor& x, std::span<const int> labels,
                                const Tensor& reference, AttackLoss mode) {
  NoGradGuard guard;
  auto l = per_sample_loss(model, x, labels, reference, mode);
  return {l.data().begin(), l.data().end()};
}

AttackResult pgd(const LogitsFn& model, const Tensor& x, std::span<const int> labels,
                 const Tensor& reference, const AttackConfig& cfg, const AttackOptions& options) {
  cfg.validate();
  if (x.rank() < 2) throw DimensionError("pgd: expected a batch, got " + shape_str(x.shape()));
  const std::size_t n = x.dim(0);
  if (cfg.loss_mode == AttackLoss::CE && labels.size() != n) {
    throw ArgumentError("pgd: ce mode needs one label per sample");
  }
  if (cfg.loss_mode == AttackLoss::KL && (!reference.defined() || reference.rank() != 2 ||
                                          reference.dim(0) != n)) {
    throw ArgumentError("pgd: kl mode needs the clean logits as reference");
  }
  std::vector<std::uint64_t> ids = options.sample_ids;
  if (ids.empty()) {
    ids.resize(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = i;
  }
  if (ids.size() != n) throw ArgumentError("pgd: sample_ids must have one entry per sample");

  Tensor ref = reference.defined() ? reference.detach() : Tensor();
  Tensor xin = x.detach();
  const std::size_t workers = std::clamp<std::size_t>(options.workers, 1, n);
  if (workers == 1) return pgd_chunk(model, xin, labels, ref, cfg, ids, options.seed, options.first_restart);

  std::vector<std::size_t> bounds(workers + 1);
  for (std::size_t w = 0; w <= workers; ++w) bounds[w] = n * w / workers;
  std::vector<AttackResult> parts(workers);
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&, w] {
      try {
        const std::size_t b = bounds[w], e = bounds[w + 1];
        Tensor xs = slice_rows(xin, b, e);
        Tensor rs = ref.defined() ? slice_rows(ref, b, e) : Tensor();
        auto ls = labels.empty() ? std::span<const int>() : labels.subspan(b, e - b);
        parts[w] = pgd_chunk(model, xs, ls, rs, cfg, std::span<const std::uint64_t>(ids).subspan(b, e - b),
                             options.seed, options.first_restart);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : threads) t.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }

  AttackResult out;
  std::vector<Real> adv;
  adv.reserve(xin.numel());
  out.restart_losses.assign(static_cast<std::size_t>(cfg.restarts), {});
  for (auto& p : parts) {
    adv.insert(adv.end(), p.x_adv.data().begin(), p.x_adv.data().end());
    out.loss.insert(out.loss.end(), p.loss.begin(), p.loss.end());
    for (std::size_t r = 0; r < p.restart_losses.size(); ++r) {
      out.restart_losses[r].insert(out.restart_losses[r].end(), p.restart_losses[r].begin(),
                                   p.restart_losses[r].end());
    }
  }
  out.x_adv = Tensor::from(xin.shape(), std::move(adv));
  return out;
}

Tensor fgsm(const LogitsFn& model, const Tensor& x, std::span<const int> labels, double epsilon,
            double lo, double hi) {
  AttackConfig cfg;
  cfg.epsilon = epsilon;
  cfg.step_size = epsilon > 0 ? epsilon : 1.0;
  cfg.num_steps = 1;
  cfg.restarts = 1;
  cfg.random_start = false;
  cfg.loss_mode = AttackLoss::CE;
  cfg.lo = lo;
  cfg.hi = hi;
  return pgd(model, x, labels, Tensor(), cfg).x_adv;
}

}  // namespace dhat
