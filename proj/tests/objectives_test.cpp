#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "dhat/error.hpp"
#include "dhat/objectives.hpp"
#include "dhat/ops.hpp"
#include "support/gradcheck.hpp"

using namespace dhat;
using dhat::testing::gradcheck;
using dhat::testing::random_tensor;
using dhat::testing::rel_error;

namespace {

// Linear model without batch norm, so training and evaluation views agree.
struct Fixture {
  std::mt19937_64 rng{11};
  std::size_t n = 6, d = 12, c = 4;
  Tensor w = random_tensor(rng, {c, d}, -1.5, 1.5);
  Tensor b = random_tensor(rng, {c}, -0.5, 0.5);
  Tensor x = random_tensor(rng, {n, 1, 3, 4}, 0, 1, false);
  std::vector<int> y{0, 1, 2, 3, 1, 2};

  LossModel model() const {
    auto f = [w = w, b = b](const Tensor& in) { return ops::linear(ops::flatten(in), w, b); };
    return {f, f};
  }
  Tensor perturbed(double eps) {
    Tensor out = x.detach();
    std::uniform_real_distribution<double> u(-eps, eps);
    for (auto& v : out.mutable_data()) v = std::clamp(v + u(rng), 0.0, 1.0);
    return out;
  }
  std::vector<std::vector<double>> probs(const Tensor& in) const {
    std::vector<std::vector<double>> p(n, std::vector<double>(c));
    for (std::size_t i = 0; i < n; ++i) {
      std::vector<double> z(c);
      for (std::size_t k = 0; k < c; ++k) {
        double s = b.at(k);
        for (std::size_t j = 0; j < d; ++j) s += w.at(k * d + j) * in.at(i * d + j);
        z[k] = s;
      }
      double m = *std::max_element(z.begin(), z.end()), tot = 0;
      for (std::size_t k = 0; k < c; ++k) tot += std::exp(z[k] - m);
      for (std::size_t k = 0; k < c; ++k) p[i][k] = std::exp(z[k] - m) / tot;
    }
    return p;
  }
};

double kl_row(const std::vector<double>& p, const std::vector<double>& q) {
  double s = 0;
  for (std::size_t k = 0; k < p.size(); ++k) s += p[k] * (std::log(p[k]) - std::log(q[k]));
  return s;
}

AttackConfig attack(double eps, int steps = 5) {
  AttackConfig a;
  a.epsilon = eps;
  a.num_steps = steps;
  return a;
}

}  // namespace

TEST(Trades, InjectedMatchesDirectSummation) {
  Fixture f;
  Tensor x_adv = f.perturbed(0.1);
  const double inv_lambda = 6.0;
  auto p = f.probs(f.x), q = f.probs(x_adv);
  double ce = 0, kl = 0;
  for (std::size_t i = 0; i < f.n; ++i) {
    ce += -std::log(p[i][f.y[i]]);
    kl += kl_row(p[i], q[i]);
  }
  const double oracle = ce / f.n + inv_lambda * kl / f.n;
  const double got = trades_loss_injected(f.model(), f.x, x_adv, f.y, inv_lambda).item();
  EXPECT_LE(rel_error(got, oracle, 1e-300), 1e-10);
}

TEST(Mart, InjectedMatchesDirectSummation) {
  Fixture f;
  Tensor x_adv = f.perturbed(0.1);
  const double inv_lambda = 6.0;
  auto p = f.probs(f.x), q = f.probs(x_adv);
  double bce = 0, weighted = 0;
  for (std::size_t i = 0; i < f.n; ++i) {
    const int y = f.y[i];
    double wrong = 0;
    for (std::size_t k = 0; k < f.c; ++k) {
      if (static_cast<int>(k) != y) wrong = std::max(wrong, q[i][k]);
    }
    bce += -std::log(q[i][y]) - std::log(1 - wrong);
    weighted += kl_row(p[i], q[i]) * (1 - p[i][y]);
  }
  const double oracle = bce / f.n + inv_lambda * weighted / f.n;
  const double got = mart_loss_injected(f.model(), f.x, x_adv, f.y, inv_lambda).item();
  EXPECT_LE(rel_error(got, oracle, 1e-300), 1e-10);

  const double bce_only = mart_loss_injected(f.model(), f.x, x_adv, f.y, 0).item();
  EXPECT_LE(rel_error(bce_only, bce / f.n, 1e-300), 1e-10);
}

TEST(Mart, ConfidentCorrectSamplesDropTheKlTerm) {
  Fixture f;
  // A large bias on one class drives p(y|x) towards 1 for every sample.
  Tensor b = Tensor::zeros({f.c}, true);
  b.mutable_data()[2] = 30;
  std::vector<int> y(f.n, 2);
  auto fn = [w = f.w, b](const Tensor& in) { return ops::linear(ops::flatten(in), w, b); };
  LossModel m{fn, fn};
  Tensor x_adv = f.perturbed(0.3);
  const double weighted = mart_loss_injected(m, f.x, x_adv, y, 6).item() - mart_loss_injected(m, f.x, x_adv, y, 0).item();
  const double unweighted = trades_loss_injected(m, f.x, x_adv, y, 6).item() - trades_loss_injected(m, f.x, x_adv, y, 0).item();
  ASSERT_GT(unweighted, 0);
  EXPECT_GE(weighted, 0);
  EXPECT_LE(weighted, 1e-9 * unweighted);
}

TEST(Objectives, ZeroWeightTradesIsCleanCrossEntropy) {
  Fixture f;
  const double ce = ops::cross_entropy(f.model().train(f.x), f.y).item();
  EXPECT_EQ(trades_loss(f.model(), f.x, f.y, 0.0, attack(0.3)).item(), ce);
  EXPECT_EQ(trades_loss_injected(f.model(), f.x, f.perturbed(0.3), f.y, 0.0).item(), ce);
}

TEST(Objectives, ZeroEpsilonReducesToCleanCrossEntropy) {
  Fixture f;
  const double ce = ops::cross_entropy(f.model().train(f.x), f.y).item();
  EXPECT_EQ(sat_loss(f.model(), f.x, f.y, attack(0)).item(), ce);
  EXPECT_EQ(trades_loss(f.model(), f.x, f.y, 6.0, attack(0)).item(), ce);
}

TEST(Objectives, SatDecomposesIntoAttackThenCrossEntropy) {
  Fixture f;
  AttackOptions opts;
  opts.seed = 42;
  const AttackConfig cfg = attack(0.1, 7);
  const double loss = sat_loss(f.model(), f.x, f.y, cfg, opts).item();
  Tensor x_adv = pgd(f.model().eval, f.x, f.y, Tensor(), cfg, opts).x_adv;
  EXPECT_EQ(loss, ops::cross_entropy(f.model().eval(x_adv), f.y).item());
  EXPECT_EQ(sat_loss(f.model(), f.x, f.y, cfg, opts).item(), loss);
}

TEST(Objectives, TradesAttackRaisesTheKlTerm) {
  Fixture f;
  AttackConfig cfg = attack(0.1, 10);
  const double clean = trades_loss(f.model(), f.x, f.y, 6.0, attack(0)).item();
  EXPECT_GT(trades_loss(f.model(), f.x, f.y, 6.0, cfg).item(), clean);
}

TEST(Objectives, RejectNegativeWeight) {
  Fixture f;
  EXPECT_THROW(trades_loss_injected(f.model(), f.x, f.x, f.y, -1), ArgumentError);
  EXPECT_THROW(mart_loss_injected(f.model(), f.x, f.x, f.y, -0.5), ArgumentError);
  EXPECT_THROW(trades_loss(f.model(), f.x, f.y, -1, attack(0.1)), ArgumentError);
  EXPECT_NO_THROW(sat_loss(f.model(), f.x, f.y, attack(0.1)));
  EXPECT_EQ(objective_from_string("mart"), ObjectiveKind::MART);
  EXPECT_THROW(objective_from_string("pgd"), ArgumentError);
}

TEST(Objectives, CompositeGradientsMatchFiniteDifferences) {
  Fixture f;
  Tensor x_adv = f.perturbed(0.1);
  for (int kind = 0; kind < 2; ++kind) {
    auto fn = [&](const std::vector<Tensor>& in) {
      auto lin = [w = in[0], b = in[1]](const Tensor& t) { return ops::linear(ops::flatten(t), w, b); };
      LossModel m{lin, lin};
      return kind == 0 ? trades_loss_injected(m, f.x, x_adv, f.y, 6) : mart_loss_injected(m, f.x, x_adv, f.y, 6);
    };
    auto r = gradcheck(fn, {f.w, f.b});
    EXPECT_LE(r.max_rel_error, 1e-4) << "kind " << kind;
    EXPECT_GT(r.checked, 0u);
  }
}
