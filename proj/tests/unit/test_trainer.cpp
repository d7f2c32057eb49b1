#include <gtest/gtest.h>

#include <cmath>

#include "prefnet/trainer.hpp"
#include "support/gradcheck.hpp"
#include "support/oracles.hpp"

using namespace prefnet;
using prefnet::ad::Tensor;

namespace {

Experiment tiny_experiment(std::uint64_t seed = 1, TrainMode mode = TrainMode::PreferenceNet) {
  Experiment ex;
  ex.spec = {2, 2, DemandKind::Additive};
  ex.valuation = ValuationModel::uniform(ex.spec);
  ex.arch = {1, 8, Activation::Tanh};
  auto& t = ex.train;
  t.mode = mode;
  t.seed = seed;
  t.epochs = 2;
  t.regretnet_samples = 256;
  t.batch_size = 64;
  t.mlp_initial_samples = 300;
  t.mlp_hidden = 16;
  t.mlp_epochs = 2;
  t.mlp_cotrain_epochs = 1;
  t.cotrain_interval = 1;
  t.cotrain_samples = 64;
  t.misreport_steps = 3;
  t.test_misreport_steps = 5;
  t.test_restarts = 1;
  t.validation_samples = 64;
  t.test_samples = 64;
  t.reference_pool = 500;
  return ex;
}

// 1x1 model with constant allocation 1/2 and payment b/4 (zero heads).
RegretNetModel posted_price_model() {
  auto model = init_regretnet({1, 1, DemandKind::Additive}, {1, 4, Activation::Tanh}, 3);
  for (Linear* l : {&model.alloc_head, &model.pay_head}) {
    l->weight = Tensor::zeros(l->weight.shape(), true);
    l->bias = Tensor::zeros(l->bias.shape(), true);
  }
  return model;
}

Checkpoint with_metrics(double pca, double pay, double rgt, std::size_t epoch = 0) {
  Checkpoint c;
  c.epoch = epoch;
  c.metrics.pca = pca;
  c.metrics.payment_mean = pay;
  c.metrics.regret_mean = rgt;
  return c;
}

}  // namespace

// ---------------------------------------------------------------------------
// Adversary and regret

TEST(Misreports, ZeroStepsReturnTruth) {
  auto ex = tiny_experiment();
  auto model = init_regretnet(ex.spec, ex.arch, 1);
  auto bids = sample_bids(ex.spec, ex.valuation, 16, 2).values;
  Tensor mis = compute_misreports(model, bids, ex.valuation, 0, 0.1);
  EXPECT_EQ(mis.values(), bids.values());
  for (double r : regret(model, bids, mis).data()) EXPECT_EQ(r, 0.0);
}

TEST(Misreports, HandBuiltLieGainsPointTwo) {
  auto model = posted_price_model();
  Tensor truth({1, 1, 1}, {1.0});
  Tensor lie({1, 1, 1}, {0.2});
  // truthful: 0.5 - 0.25; lying: 0.5 - 0.05
  EXPECT_NEAR(regret(model, truth, lie).item(), 0.2, 1e-15);
}

TEST(Misreports, AscentIsMonotoneAndClipped) {
  auto model = posted_price_model();
  auto valuation = ValuationModel::uniform(model.spec);
  Tensor truth({1, 1, 1}, {0.9});
  double previous = -1.0;
  for (std::size_t steps = 0; steps <= 60; steps += 5) {
    Tensor mis = compute_misreports(model, truth, valuation, steps, 0.1);
    double b = mis.item();
    ASSERT_GE(b, 0.0);
    ASSERT_LE(b, 1.0);
    double u = 0.5 * 0.9 - 0.25 * b;
    EXPECT_GE(u, previous);
    previous = u;
  }
  EXPECT_EQ(compute_misreports(model, truth, valuation, 100, 0.1).item(), 0.0);  // clipped at the support edge
}

TEST(Misreports, StayInsideScaledSupport) {
  Experiment ex = tiny_experiment();
  ex.valuation = ValuationModel::uniform(ex.spec, 0.0, 1.0, {2.0, 1.0});
  auto model = init_regretnet(ex.spec, ex.arch, 5);
  auto bids = sample_bids(ex.spec, ex.valuation, 64, 6).values;
  Tensor mis = best_misreports(model, bids, ex.valuation, 20, 0.5, 2, 7);
  for (std::size_t b = 0; b < 64; ++b)
    for (std::size_t i = 0; i < 2; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double x = mis[(b * 2 + i) * 2 + j];
        EXPECT_GE(x, 0.0);
        EXPECT_LE(x, i == 0 ? 2.0 : 1.0);
      }
}

TEST(Misreports, OptimizedBeatRandomMisreports) {
  auto ex = tiny_experiment();
  auto model = init_regretnet(ex.spec, {2, 32, Activation::Tanh}, 11);
  auto bids = sample_bids(ex.spec, ex.valuation, 1000, 12).values;
  Tensor random = sample_bids(ex.spec, ex.valuation, 1000, 13).values;
  Tensor optimized = compute_misreports(model, bids, ex.valuation, 25, 0.1);
  ad::NoGradScope off;
  Tensor r_opt = regret(model, bids, optimized), r_rand = regret(model, bids, random);
  for (std::size_t i = 0; i < 2; ++i) EXPECT_GE(r_opt[i], r_rand[i]);
}

TEST(Misreports, RestartsNeverWeakenTheAdversary) {
  auto ex = tiny_experiment();
  auto model = init_regretnet(ex.spec, ex.arch, 14);
  auto bids = sample_bids(ex.spec, ex.valuation, 128, 15).values;
  ad::NoGradScope off;
  Tensor plain = regret_terms(model, bids, best_misreports(model, bids, ex.valuation, 10, 0.1, 0, 1),
                              run_mechanism(model, bids)).per_sample;
  Tensor strong = regret_terms(model, bids, best_misreports(model, bids, ex.valuation, 10, 0.1, 3, 1),
                               run_mechanism(model, bids)).per_sample;
  for (std::size_t k = 0; k < plain.size(); ++k) EXPECT_GE(strong[k], plain[k]);
}

// ---------------------------------------------------------------------------
// Losses

TEST(Losses, Eq1TermIsolation) {
  Tensor pay({2, 1}, {1.0, 3.0});
  Tensor zero_rgt = Tensor::zeros({1});
  EXPECT_DOUBLE_EQ(loss_eq1(pay, zero_rgt, {1.0}, 2.0, Tensor::zeros({2})).item(), -2.0);
  // L_rgt = 1 * 0.5 + 2/2 * 0.25
  EXPECT_DOUBLE_EQ(loss_eq1(Tensor::zeros({2, 1}), Tensor({1}, {0.5}), {1.0}, 2.0, Tensor::zeros({2})).item(), 0.75);
  double base = loss_eq1(pay, zero_rgt, {1.0}, 2.0, Tensor({2}, {0.3, 0.4})).item();
  double raised = loss_eq1(pay, zero_rgt, {1.0}, 2.0, Tensor({2}, {0.3, 0.5})).item();
  EXPECT_LT(raised, base);
  EXPECT_THROW(loss_eq1(pay, zero_rgt, {1.0}, 2.0, Tensor::zeros({3})), Error);
}

TEST(Losses, LagrangianPreferenceTerm) {
  // 1*0.5 + 1*0.5 + 2/2 * (0.25 + 0.25)
  EXPECT_DOUBLE_EQ(lagrangian_pref_term(Tensor({2}, {0.5, 0.5}), {1.0, 1.0}, 2.0).item(), 1.5);
  LagrangeState s;
  s.lambda_r = {1.0};
  s.rho_r = 2.0;
  s.lambda_s = {0.0, 0.0};
  s.rho_s = 0.0;
  Tensor pay({2, 1}, {1.0, 3.0});
  Tensor rgt({1}, {0.5});
  EXPECT_DOUBLE_EQ(loss_lagrangian_pref(pay, rgt, Tensor({2}, {0.9, 0.1}), s, TrainMode::LagrangianPref).item(),
                   regret_penalty_loss(pay, rgt, {1.0}, 2.0).item());
  EXPECT_THROW(loss_lagrangian_pref(pay, rgt, Tensor({2}, {0.9, 0.1}), s, TrainMode::PreferenceNet), Error);
}

TEST(Losses, LagrangianGradientIsEq1ScaledByMultiplier) {
  const double p = 0.4, lam = 1.5, rho = 3.0;
  Tensor pay({3, 1}, {1.0, 2.0, 3.0});
  Tensor rgt({1}, {0.1});
  auto grad_wrt_prefs = [&](bool lagrangian) {
    Tensor prefs({3}, {p, p, p}, true);
    ad::Tape tape;
    {
      ad::TapeScope scope(tape);
      LagrangeState s{{1.0}, 1.0, {lam, lam, lam}, rho, 0};
      tape.backward(lagrangian ? loss_lagrangian_pref(pay, rgt, prefs, s, TrainMode::LagrangianPref)
                               : loss_eq1(pay, rgt, {1.0}, 1.0, prefs));
    }
    return std::vector<double>(prefs.grad().begin(), prefs.grad().end());
  };
  auto eq1 = grad_wrt_prefs(false), lag = grad_wrt_prefs(true);
  for (std::size_t k = 0; k < 3; ++k) EXPECT_NEAR(lag[k], eq1[k] * (lam + rho * p), 1e-14);
}

TEST(Losses, PenaltyVanishesAtIdealScore) {
  Experiment ex = tiny_experiment(1, TrainMode::Penalty);
  auto s = LagrangeState::initial(ex);
  Tensor pay = Tensor::zeros({2, 2});
  Tensor rgt = Tensor::zeros({2});
  Tensor uniform({2, 2, 2}, std::vector<double>(8, 0.3));
  Tensor skewed({2, 2, 2}, {1, 0, 0, 1, 1, 0, 0, 1});
  for (auto kind : {PreferenceKind::Tvf, PreferenceKind::Entropy}) {
    PreferenceFunction f;
    f.kind = kind;
    EXPECT_NEAR(loss_penalty(pay, rgt, uniform, f, ex.spec, s).item(), 0.0, 1e-9);
    EXPECT_GT(loss_penalty(pay, rgt, skewed, f, ex.spec, s).item(), 0.5);
  }
}

TEST(Losses, Eq1LeavesTheFrozenMlpWithoutGradient) {
  auto ex = tiny_experiment();
  auto model = init_regretnet(ex.spec, ex.arch, 1);
  auto mlp = init_mlp(4, 2, 8);
  auto frozen = mlp.frozen();
  auto bids = sample_bids(ex.spec, ex.valuation, 8, 3).values;
  ad::Tape tape;
  {
    ad::TapeScope scope(tape);
    Outcome o = run_mechanism(model, bids);
    tape.backward(loss_eq1(o.payments, Tensor::zeros({2}), {1, 1}, 1, mlp_forward(frozen, o.allocation, false)));
  }
  for (const auto& p : mlp.parameters()) EXPECT_FALSE(p.has_grad());
  for (const auto& p : frozen.parameters()) EXPECT_FALSE(p.has_grad());
  for (const auto& p : model.parameters()) EXPECT_TRUE(p.has_grad());
}

TEST(Losses, RevenueAscentIsMonotoneWithoutConstraints) {
  AuctionSpec spec{1, 1};
  auto model = init_regretnet(spec, {2, 16, Activation::Tanh}, 4);
  auto bids = sample_bids(spec, ValuationModel::uniform(spec), 128, 5).values;
  std::vector<Tensor> params = model.parameters();
  ad::AdamState opt(params, 1e-3);
  double previous = -1.0;
  for (int it = 0; it < 50; ++it) {
    ad::Tape tape;
    ad::TapeScope scope(tape);
    Outcome o = run_mechanism(model, bids);
    Tensor loss = loss_eq1(o.payments, Tensor::zeros({1}), {0.0}, 0.0, Tensor::zeros({128}));
    double rev = -loss.item();
    EXPECT_GE(rev, previous) << "iteration " << it;
    previous = rev;
    tape.backward(loss);
    ad::adam_step(params, opt);
  }
}

// ---------------------------------------------------------------------------
// Lagrange schedule

TEST(Lagrange, StepFunctionsWithExactPeriods) {
  Experiment ex = tiny_experiment(1, TrainMode::LagrangianPref);
  auto s = LagrangeState::initial(ex);
  EXPECT_EQ(s.lambda_s.size(), ex.train.batch_size);
  double last_lambda = s.lambda_r[0], last_rho = s.rho_r;
  for (std::size_t it = 1; it <= 5000; ++it) {
    s.advance(ex.train);
    EXPECT_EQ(s.lambda_r[0], 1.0 + static_cast<double>(it / 25));
    EXPECT_EQ(s.rho_r, 1.0 + static_cast<double>(it / 2500));
    EXPECT_EQ(s.lambda_s[0], s.lambda_r[0]);
    EXPECT_EQ(s.rho_s, s.rho_r);
    EXPECT_GE(s.lambda_r[0], last_lambda);
    EXPECT_GE(s.rho_r, last_rho);
    last_lambda = s.lambda_r[0];
    last_rho = s.rho_r;
  }
  EXPECT_TRUE(LagrangeState::initial(tiny_experiment()).lambda_s.empty());
}

// ---------------------------------------------------------------------------
// MLP training

TEST(MlpTraining, SeparableLabelsAreLearned) {
  auto z = sample_uniform_allocations({2, 2}, 2000, 1);
  LabeledAllocationSet set{2, 2, z.values(), std::vector<double>(2000, 0.0), std::vector<int>(2000)};
  for (std::size_t k = 0; k < 2000; ++k) set.labels[k] = set.allocations[k * 4] > set.allocations[k * 4 + 2] ? 1 : 0;
  TrainConfig c;
  c.mlp_hidden = 32;
  c.mlp_epochs = 30;
  auto t = pretrain_mlp(set, c, 2);
  EXPECT_GT(t.accuracy, 0.95);
  auto again = pretrain_mlp(set, c, 2);
  auto pa = t.mlp.parameters(), pb = again.mlp.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k].values(), pb[k].values());
}

TEST(MlpTraining, RandomLabelsGeneralizeToChance) {
  Rng rng(3);
  auto make = [&](std::uint64_t seed) {
    auto z = sample_uniform_allocations({2, 2}, 2000, seed);
    LabeledAllocationSet set{2, 2, z.values(), std::vector<double>(2000, 0.0), std::vector<int>(2000)};
    for (auto& l : set.labels) l = static_cast<int>(rng.index(2));
    return set;
  };
  TrainConfig c;
  c.mlp_hidden = 32;
  c.mlp_epochs = 5;
  auto t = pretrain_mlp(make(4), c, 5);
  EXPECT_NEAR(mlp_accuracy(t.mlp, make(6)), 0.5, 0.06);
}

TEST(MlpTraining, DegenerateLabelsRejected) {
  LabeledAllocationSet set{1, 1, {0.1, 0.2, 0.3}, {0, 0, 0}, {1, 1, 1}};
  EXPECT_THROW(pretrain_mlp(set, TrainConfig{}, 1), Error);
}

TEST(MlpTraining, TvfMlpScoresFairAllocationsHigher) {
  auto ex = tiny_experiment();
  ex.preference.kind = PreferenceKind::Tvf;
  ex.train.mlp_initial_samples = 4000;
  ex.train.mlp_hidden = 32;
  ex.train.mlp_epochs = 10;
  auto t = pretrain_mlp(initial_labels(ex), ex.train, 1);
  // zero violation: each agent's row is constant; violation 2: crossed one-hot rows
  Tensor fair({3, 2, 2}, {0.5, 0.5, 0.5, 0.5, 0.2, 0.2, 0.7, 0.7, 0.4, 0.4, 0.1, 0.1});
  Tensor unfair({2, 2, 2}, {1, 0, 0, 1, 0, 1, 1, 0});
  auto mean = [](const Tensor& s) { return ad::mean_all(s).item(); };
  EXPECT_GT(mean(mlp_score(t.mlp, fair)), mean(mlp_score(t.mlp, unfair)));
}

TEST(MlpTraining, BceDoesNotTouchRegretNet) {
  auto ex = tiny_experiment();
  auto model = init_regretnet(ex.spec, ex.arch, 1);
  pretrain_mlp(initial_labels(ex), ex.train, 1);
  for (const auto& p : model.parameters()) EXPECT_FALSE(p.has_grad());
}

TEST(Cotrain, BookkeepingAndRetention) {
  auto ex = tiny_experiment();
  ex.train.mlp_initial_samples = 3000;
  ex.train.mlp_hidden = 32;
  ex.train.mlp_epochs = 10;
  ex.train.cotrain_samples = 500;
  auto original = initial_labels(ex);
  auto t = pretrain_mlp(original, ex.train, 1);
  double before = mlp_accuracy(t.mlp, original);
  auto model = init_regretnet(ex.spec, ex.arch, 2);
  cotrain_step(t, model, ex.valuation, ex.train, 3);
  EXPECT_EQ(t.data.size(), original.size() + 500);
  EXPECT_EQ(t.rounds, 1u);
  EXPECT_GE(mlp_accuracy(t.mlp, original), 0.8 * before);

  ex.train.cotrain_samples = 0;
  cotrain_step(t, model, ex.valuation, ex.train, 4);
  EXPECT_EQ(t.data.size(), original.size() + 500);
  EXPECT_EQ(t.rounds, 2u);
}

// ---------------------------------------------------------------------------
// Selection

TEST(Selection, Examples) {
  std::vector<Checkpoint> one{with_metrics(0.3, 0.5, 0.1)};
  EXPECT_EQ(validate_select_index(one, 0.45, 0.1, 0.45), 0u);
  std::vector<Checkpoint> two{with_metrics(0.5, 0.8, 0.01, 0), with_metrics(1.0, 0.8, 0.01, 1)};
  EXPECT_EQ(validate_select(two).epoch, 1u);
  std::vector<Checkpoint> tie{with_metrics(1.0, 0.8, 0.01, 0), with_metrics(1.0, 0.8, 0.01, 1)};
  EXPECT_EQ(validate_select(tie).epoch, 0u);
  EXPECT_THROW(validate_select_index(one, 0.5, 0.5, 0.5), Error);
  EXPECT_THROW(validate_select_index({}, 0.45, 0.1, 0.45), Error);
}

TEST(Selection, HandEvaluatedTriple) {
  // max pay 1.0, max regret 0.1
  // a: .45*.9 + .1*.5 + .45*(1-.1/.1) = .455
  // b: .45*.8 + .1*1. + .45*(1-.05/.1) = .685
  // c: .45*1. + .1*.6 + .45*(1-.08/.1) = .600
  std::vector<Checkpoint> cps{with_metrics(0.9, 0.5, 0.1, 0), with_metrics(0.8, 1.0, 0.05, 1),
                              with_metrics(1.0, 0.6, 0.08, 2)};
  auto s = selection_scores(cps, 0.45, 0.1, 0.45);
  EXPECT_NEAR(s[0], 0.455, 1e-12);
  EXPECT_NEAR(s[1], 0.685, 1e-12);
  EXPECT_NEAR(s[2], 0.600, 1e-12);
  EXPECT_EQ(validate_select(cps).epoch, 1u);
}

TEST(Selection, InvariantUnderPaymentRescaling) {
  Rng rng(5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Checkpoint> cps;
    for (std::size_t k = 0; k < 8; ++k) cps.push_back(with_metrics(rng.uniform(), rng.uniform(), rng.uniform(), k));
    auto before = validate_select_index(cps, 0.45, 0.1, 0.45);
    double c = rng.uniform(0.1, 10.0);
    for (auto& cp : cps) cp.metrics.payment_mean *= c;
    EXPECT_EQ(validate_select_index(cps, 0.45, 0.1, 0.45), before);
  }
}

TEST(Selection, MatchesBruteForceOracle) {
  Rng rng(6);
  std::vector<Checkpoint> cps;
  std::vector<double> pca, pay, rgt;
  for (std::size_t k = 0; k < 1000; ++k) {
    cps.push_back(with_metrics(std::round(rng.uniform() * 20) / 20, rng.uniform(), rng.uniform(0, 0.05), k));
    pca.push_back(cps.back().metrics.pca);
    pay.push_back(cps.back().metrics.payment_mean);
    rgt.push_back(cps.back().metrics.regret_mean);
  }
  EXPECT_EQ(validate_select_index(cps, 0.45, 0.1, 0.45), oracle::select(pca, pay, rgt, 0.45, 0.1, 0.45));
  EXPECT_EQ(validate_select_index(cps, 0.2, 0.5, 0.3), oracle::select(pca, pay, rgt, 0.2, 0.5, 0.3));
}

TEST(Selection, RejectsNonFiniteMetrics) {
  std::vector<Checkpoint> cps{with_metrics(1.0, NAN, 0.1)};
  EXPECT_THROW(validate_select_index(cps, 0.45, 0.1, 0.45), Error);
}

// ---------------------------------------------------------------------------
// Training loop and evaluation

TEST(Train, ZeroEpochsGivesTheInitialModel) {
  auto ex = tiny_experiment();
  ex.train.epochs = 0;
  auto r = train(ex);
  ASSERT_EQ(r.checkpoints.size(), 1u);
  auto init = init_regretnet(ex.spec, ex.arch, derive_seed(ex.train.seed, streams::model));
  auto pa = r.checkpoints[0].model.parameters(), pb = init.parameters();
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k].values(), pb[k].values());
}

TEST(Train, ProducesOneCheckpointPerEpochAndIsDeterministic) {
  for (auto mode : {TrainMode::PreferenceNet, TrainMode::LagrangianPref, TrainMode::Penalty, TrainMode::RegretNet}) {
    auto ex = tiny_experiment(4, mode);
    std::size_t calls = 0;
    auto a = train(ex, [&](const EpochLog&) { ++calls; });
    auto b = train(ex);
    ASSERT_FALSE(a.aborted) << a.abort_reason;
    ASSERT_EQ(a.checkpoints.size(), 3u);
    EXPECT_EQ(calls, 3u);
    EXPECT_EQ(a.checkpoints.back().lagrange.iteration, 2 * (256 / 64));
    EXPECT_EQ(a.checkpoints[0].mlp.has_value(), uses_mlp(mode));
    for (std::size_t e = 0; e < 3; ++e) {
      EXPECT_EQ(a.checkpoints[e].metrics, b.checkpoints[e].metrics);
      auto pa = a.checkpoints[e].model.parameters(), pb = b.checkpoints[e].model.parameters();
      for (std::size_t k = 0; k < pa.size(); ++k) ASSERT_EQ(pa[k].values(), pb[k].values());
    }
  }
}

TEST(Train, NoiseFlipsInitialLabels) {
  auto ex = tiny_experiment();
  ex.train.noise = NoiseConfig{};
  auto r = train(ex);
  EXPECT_GT(r.label_flip_fraction, 0.1);
  EXPECT_LT(r.label_flip_fraction, 0.6);
}

TEST(Train, DivergenceAbortsWithLastGoodCheckpoint) {
  auto ex = tiny_experiment(1, TrainMode::RegretNet);
  ex.valuation = ValuationModel::uniform(ex.spec, 0.0, 1e300);
  auto r = train(ex);
  EXPECT_TRUE(r.aborted);
  EXPECT_FALSE(r.abort_reason.empty());
  for (const auto& cp : r.checkpoints) EXPECT_TRUE(finite(cp.metrics));
}

TEST(Train, MixtureExperimentsUseLabeledGroundTruth) {
  auto ex = tiny_experiment();
  ex.preference.kind = PreferenceKind::Mixture;
  PreferenceFunction tvf, ent;
  ent.kind = PreferenceKind::Entropy;
  ex.preference.mixture = {{0.5, tvf}, {0.5, ent}};
  EXPECT_TRUE(std::holds_alternative<LabeledAllocationSet>(make_ground_truth(ex)));
  ex.train.epochs = 1;
  EXPECT_FALSE(train(ex).aborted);
  ex.train.mode = TrainMode::Penalty;
  EXPECT_THROW(ex.validate(), Error);
}

TEST(Evaluate, ZeroPaymentModelAndDeterminism) {
  auto ex = tiny_experiment();
  Checkpoint cp;
  cp.model = init_regretnet(ex.spec, ex.arch, 1);
  cp.model.pay_head.bias = Tensor::full(cp.model.pay_head.bias.shape(), -1e4);
  auto test = sample_bids(ex.spec, ex.valuation, 64, 2);
  auto truth = make_ground_truth(ex);
  auto m = evaluate(cp, ex, test, truth);
  EXPECT_EQ(m.payment_mean, 0.0);
  EXPECT_EQ(evaluate(cp, ex, test, truth), m);
  EXPECT_GE(m.pca, 0.0);
  EXPECT_LE(m.pca, 1.0);
}

TEST(Evaluate, ChunkingDoesNotChangePaymentsOrPca) {
  auto ex = tiny_experiment();
  auto model = init_regretnet(ex.spec, ex.arch, 1);
  auto bids = sample_bids(ex.spec, ex.valuation, 100, 2).values;
  auto truth = make_ground_truth(ex);
  auto a = measure(model, bids, ex.valuation, truth, 0, 0.1, 0, 1, 1000);
  auto b = measure(model, bids, ex.valuation, truth, 0, 0.1, 0, 1, 7);
  EXPECT_EQ(a.pca, b.pca);
  EXPECT_NEAR(a.payment_mean, b.payment_mean, 1e-12);
  EXPECT_EQ(a.regret_max, 0.0);
}

TEST(Config, ValidationRejectsBadValues) {
  TrainConfig c;
  c.batch_size = 0;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.alpha = 0.9;
  EXPECT_THROW(c.validate(), Error);
  c = TrainConfig{};
  c.batch_size = c.regretnet_samples + 1;
  EXPECT_THROW(c.validate(), Error);
  EXPECT_EQ(parse_train_mode(to_string(TrainMode::Penalty)), TrainMode::Penalty);
  EXPECT_THROW(parse_train_mode("sgd"), Error);
}
