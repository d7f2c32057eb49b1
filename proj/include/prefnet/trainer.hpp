#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "prefnet/adam.hpp"
#include "prefnet/auction.hpp"
#include "prefnet/networks.hpp"
#include "prefnet/preference.hpp"
#include "prefnet/random.hpp"

namespace prefnet {

/// How the preference enters the RegretNet objective.
///  preferencenet: frozen-MLP scores subtracted from the loss.
///  lagrangian:    MLP scores under per-sample multipliers and a quadratic term.
///  penalty:       RegretNet with an explicit augmented-Lagrangian penalty on
///                 the exact preference violation (no MLP).
///  regretnet:     no preference term.
enum class TrainMode { PreferenceNet, LagrangianPref, Penalty, RegretNet };

inline std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::PreferenceNet: return "preferencenet";
    case TrainMode::LagrangianPref: return "lagrangian";
    case TrainMode::Penalty: return "penalty";
    case TrainMode::RegretNet: return "regretnet";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "preferencenet") return TrainMode::PreferenceNet;
  if (s == "lagrangian") return TrainMode::LagrangianPref;
  if (s == "penalty") return TrainMode::Penalty;
  if (s == "regretnet") return TrainMode::RegretNet;
  throw Error("unknown training mode '" + s + "' (expected preferencenet, lagrangian, penalty or regretnet)");
}

inline bool uses_mlp(TrainMode m) { return m == TrainMode::PreferenceNet || m == TrainMode::LagrangianPref; }

/// Probit noise on the initial MLP labels. mu is on the min-max rescaled
/// score axis; sigma defaults to the sample std of the rescaled scores.
struct NoiseConfig {
  double k = 1.05;
  double floor = 0.15;
  double mu = 0.7;
  std::optional<double> sigma;
  bool operator==(const NoiseConfig&) const = default;
};

struct TrainConfig {
  std::size_t epochs = 200;
  std::size_t regretnet_samples = 160000;
  std::size_t batch_size = 128;
  double regretnet_lr = 1e-3;

  std::size_t mlp_initial_samples = 80000;
  std::size_t mlp_hidden = 100;
  std::size_t mlp_batch_size = 128;
  double mlp_lr = 1e-3;
  std::size_t mlp_epochs = 20;
  std::size_t mlp_cotrain_epochs = 5;
  std::size_t cotrain_interval = 5;
  std::size_t cotrain_samples = 5000;
  std::size_t n_comparisons = 11;

  std::size_t misreport_steps = 25;
  double misreport_rate = 0.1;
  std::size_t test_misreport_steps = 200;
  double test_misreport_rate = 0.1;
  std::size_t test_restarts = 10;

  std::size_t lambda_period = 25;
  std::size_t rho_period = 2500;
  double lambda_init = 1.0;
  double lambda_increment = 1.0;
  double rho_init = 1.0;
  double rho_increment = 1.0;
  double lambda_s_init = 1.0;
  double lambda_s_increment = 1.0;
  double rho_s_init = 1.0;
  double rho_s_increment = 1.0;

  std::size_t validation_samples = 1000;
  std::size_t test_samples = 20000;
  std::size_t reference_pool = 10000;
  std::optional<double> pca_threshold;  // absolute override of the pool median

  TrainMode mode = TrainMode::PreferenceNet;
  std::optional<NoiseConfig> noise;
  double alpha = 0.45, beta = 0.1, gamma = 0.45;
  std::uint64_t seed = 0;

  void validate() const {
    auto positive = [](std::size_t v, const char* name) {
      if (v < 1) throw Error(std::string("train.") + name + " must be positive");
    };
    positive(regretnet_samples, "regretnet_samples");
    positive(batch_size, "batch_size");
    positive(mlp_hidden, "mlp_hidden");
    positive(mlp_batch_size, "mlp_batch_size");
    positive(cotrain_interval, "cotrain_interval");
    positive(n_comparisons, "n_comparisons");
    positive(lambda_period, "lambda_period");
    positive(rho_period, "rho_period");
    positive(validation_samples, "validation_samples");
    positive(test_samples, "test_samples");
    positive(reference_pool, "reference_pool");
    if (batch_size > regretnet_samples) throw Error("train.batch_size exceeds train.regretnet_samples");
    if (uses_mlp(mode)) {
      positive(mlp_initial_samples, "mlp_initial_samples");
      if (mlp_batch_size < 2) throw Error("train.mlp_batch_size must be at least 2 (batch norm)");
    }
    if (!(regretnet_lr > 0.0) || !(mlp_lr > 0.0)) throw Error("train: learning rates must be positive");
    if (!(misreport_rate > 0.0) || !(test_misreport_rate > 0.0)) throw Error("train: misreport rates must be positive");
    for (double v : {lambda_init, lambda_increment, rho_init, rho_increment, lambda_s_init, lambda_s_increment,
                     rho_s_init, rho_s_increment}) {
      if (!(v >= 0.0)) throw Error("train: multipliers and increments must be non-negative");
    }
    if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) throw Error("train: alpha + beta + gamma must equal 1");
    if (noise) ProbitNoiseModel{noise->mu, noise->sigma.value_or(1.0), noise->k, noise->floor}.validate();
  }

  bool operator==(const TrainConfig&) const = default;
};

/// Everything a training run needs.
struct Experiment {
  AuctionSpec spec;
  ValuationModel valuation = ValuationModel::uniform(AuctionSpec{});
  PreferenceFunction preference;
  Architecture arch;
  TrainConfig train;

  void validate() const {
    spec.validate();
    valuation.validate(spec);
    preference.validate(spec.n_agents);
    train.validate();
    if (train.mode == TrainMode::Penalty && preference.kind == PreferenceKind::Mixture) {
      throw Error("penalty mode needs a scoring function; mixtures only label");
    }
  }
};

// Seed streams derived from the experiment seed.
namespace streams {
inline constexpr std::uint64_t model = 1, mlp = 2, train_bids = 3, mlp_pool = 4, labels = 5, noise = 6,
                               balance = 7, shuffle = 8, validation = 9, test = 10, reference = 11,
                               restarts = 12, cotrain = 100;
}

// ---------------------------------------------------------------------------
// Augmented Lagrangian state

struct LagrangeState {
  std::vector<double> lambda_r;  // one per agent
  double rho_r = 0.0;
  std::vector<double> lambda_s;  // one per batch position (lagrangian) or a single entry (penalty)
  double rho_s = 0.0;
  std::size_t iteration = 0;

  static LagrangeState initial(const Experiment& ex) {
    const auto& c = ex.train;
    LagrangeState s;
    s.lambda_r.assign(ex.spec.n_agents, c.lambda_init);
    s.rho_r = c.rho_init;
    if (c.mode == TrainMode::LagrangianPref) s.lambda_s.assign(c.batch_size, c.lambda_s_init);
    if (c.mode == TrainMode::Penalty) s.lambda_s.assign(1, c.lambda_s_init);
    if (c.mode == TrainMode::LagrangianPref || c.mode == TrainMode::Penalty) s.rho_s = c.rho_s_init;
    return s;
  }

  /// Counts one finished iteration and applies any scheduled increments.
  void advance(const TrainConfig& c) {
    ++iteration;
    if (iteration % c.lambda_period == 0) {
      for (auto& l : lambda_r) l += c.lambda_increment;
      for (auto& l : lambda_s) l += c.lambda_s_increment;
    }
    if (iteration % c.rho_period == 0) {
      rho_r += c.rho_increment;
      if (!lambda_s.empty()) rho_s += c.rho_s_increment;
    }
  }

  double mean_lambda_r() const {
    double s = 0.0;
    for (double l : lambda_r) s += l;
    return lambda_r.empty() ? 0.0 : s / static_cast<double>(lambda_r.size());
  }
  bool operator==(const LagrangeState&) const = default;
};

// ---------------------------------------------------------------------------
// Misreport adversary and regret

namespace detail {

// [n*B, n, m] profiles: block i is `truth` with agent i's row taken from `mis`.
inline std::vector<double> stack_profiles(const Tensor& truth, const Tensor& mis) {
  std::size_t B = truth.dim(0), n = truth.dim(1), m = truth.dim(2);
  const double* t = truth.data().data();
  const double* x = mis.data().data();
  std::vector<double> out(n * B * n * m);
  for (std::size_t i = 0; i < n; ++i) {
    double* blk = out.data() + i * B * n * m;
    std::copy(t, t + B * n * m, blk);
    for (std::size_t b = 0; b < B; ++b) std::copy(x + (b * n + i) * m, x + (b * n + i + 1) * m, blk + (b * n + i) * m);
  }
  return out;
}

inline std::vector<double> tile(const Tensor& truth, std::size_t times) {
  std::vector<double> out;
  out.reserve(truth.size() * times);
  for (std::size_t r = 0; r < times; ++r) out.insert(out.end(), truth.data().begin(), truth.data().end());
  return out;
}

// [n, 1, n] selector: entry (i, 0, i) is 1.
inline Tensor agent_selector(std::size_t n) {
  std::vector<double> s(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) s[i * n + i] = 1.0;
  return Tensor({n, 1, n}, std::move(s));
}

// Agent i's own utility in block i: [n*B, n] -> [n, B].
inline Tensor own_utility(const Tensor& u_stacked, std::size_t n, std::size_t B) {
  return ad::sum(ad::mul(ad::reshape(u_stacked, {n, B, n}), agent_selector(n)), 2);
}

inline void check_profiles(const RegretNetModel& model, const Tensor& t, const char* op) {
  const auto& s = model.spec;
  if (t.rank() != 3 || t.dim(1) != s.n_agents || t.dim(2) != s.m_items) {
    throw Error(std::string(op) + ": profiles of shape " + ad::to_string(t.shape()) + " do not match auction " +
                s.label());
  }
}

}  // namespace detail

/// Gradient ascent on each agent's utility over its own report, other agents
/// held truthful, clipped to the valuation support after every step.
/// Returns misreports [B, n, m] where row i of profile b is agent i's report.
/// `init` defaults to the truthful bids.
inline Tensor compute_misreports(const RegretNetModel& model, const Tensor& truth, const ValuationModel& valuation,
                                 std::size_t steps, double rate, const Tensor* init = nullptr) {
  detail::check_profiles(model, truth, "compute_misreports");
  const std::size_t B = truth.dim(0), n = truth.dim(1), m = truth.dim(2);
  const Tensor& start = init ? *init : truth;
  if (start.shape() != truth.shape()) throw Error("compute_misreports: init shape does not match bids");
  if (steps == 0) return start.detach();

  RegretNetModel frozen = model.frozen();
  Tensor values({n * B, n, m}, detail::tile(truth, n));
  std::vector<double> mask(n * B * n, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < B; ++b) mask[(i * B + b) * n + i] = 1.0;
  Tensor selector({n * B, n}, std::move(mask));
  std::vector<double> lo(n * m), hi(n * m);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < m; ++j) {
      lo[i * m + j] = valuation.support_lower(model.spec, i, j);
      hi[i * m + j] = valuation.support_upper(model.spec, i, j);
    }

  Tensor x({n * B, n, m}, detail::stack_profiles(truth, start), true);
  for (std::size_t step = 0; step < steps; ++step) {
    ad::Tape tape;
    {
      ad::TapeScope scope(tape);
      Outcome o = run_mechanism(frozen, x);
      Tensor objective = ad::sum_all(ad::mul(utility(values, o.allocation, o.payments), selector));
      tape.backward(objective);
    }
    auto g = x.grad();
    auto xd = x.mutable_data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < B; ++b) {
        std::size_t off = ((i * B + b) * n + i) * m;
        for (std::size_t j = 0; j < m; ++j) {
          xd[off + j] = std::clamp(xd[off + j] + rate * g[off + j], lo[i * m + j], hi[i * m + j]);
        }
      }
    x.zero_grad();
  }
  std::vector<double> out(B * n * m);
  const double* xd = x.data().data();
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t b = 0; b < B; ++b)
      std::copy(xd + ((i * B + b) * n + i) * m, xd + ((i * B + b) * n + i + 1) * m, out.data() + (b * n + i) * m);
  return Tensor({B, n, m}, std::move(out));
}

/// Per-sample regret [n, B] (max(0, u_i(mis) - u_i(truth))) and its batch
/// mean per agent [n]. Differentiable in the model parameters.
struct RegretTerms {
  Tensor per_sample;
  Tensor per_agent;
};

inline RegretTerms regret_terms(const RegretNetModel& model, const Tensor& truth, const Tensor& mis,
                                const Outcome& truthful) {
  detail::check_profiles(model, truth, "regret");
  if (mis.shape() != truth.shape()) throw Error("regret: misreport batch does not match the truthful batch");
  const std::size_t B = truth.dim(0), n = truth.dim(1), m = truth.dim(2);
  Tensor stacked({n * B, n, m}, detail::stack_profiles(truth, mis));
  Tensor values({n * B, n, m}, detail::tile(truth, n));
  Outcome lie = run_mechanism(model, stacked);
  Tensor u_lie = detail::own_utility(utility(values, lie.allocation, lie.payments), n, B);
  Tensor u_true = ad::sum(ad::mul(ad::reshape(utility(truth, truthful.allocation, truthful.payments), {1, B, n}),
                                  detail::agent_selector(n)),
                          2);
  Tensor per_sample = ad::relu(ad::sub(u_lie, u_true));
  return {per_sample, ad::mean(per_sample, 1)};
}

/// Mean regret per agent [n].
inline Tensor regret(const RegretNetModel& model, const Tensor& truth, const Tensor& mis) {
  return regret_terms(model, truth, mis, run_mechanism(model, truth)).per_agent;
}

/// Strongest misreports over the truthful start plus `restarts` uniform
/// random starts, chosen per (profile, agent) by realized utility.
inline Tensor best_misreports(const RegretNetModel& model, const Tensor& truth, const ValuationModel& valuation,
                              std::size_t steps, double rate, std::size_t restarts, std::uint64_t seed) {
  const std::size_t B = truth.dim(0), n = truth.dim(1), m = truth.dim(2);
  ad::NoGradScope no_grad;
  Tensor best = compute_misreports(model, truth, valuation, steps, rate);
  if (restarts == 0) return best;
  auto own = [&](const Tensor& mis) {
    Tensor stacked({n * B, n, m}, detail::stack_profiles(truth, mis));
    Tensor values({n * B, n, m}, detail::tile(truth, n));
    Outcome o = run_mechanism(model, stacked);
    return detail::own_utility(utility(values, o.allocation, o.payments), n, B).values();  // [n, B]
  };
  std::vector<double> best_u = own(best);
  std::vector<double> bd = best.values();
  Rng rng(seed);
  for (std::size_t r = 0; r < restarts; ++r) {
    std::vector<double> start(B * n * m);
    for (std::size_t b = 0; b < B; ++b)
      for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < m; ++j)
          start[(b * n + i) * m + j] = rng.uniform(valuation.support_lower(model.spec, i, j),
                                                   valuation.support_upper(model.spec, i, j));
    Tensor init({B, n, m}, std::move(start));
    Tensor cand = compute_misreports(model, truth, valuation, steps, rate, &init);
    auto u = own(cand);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t b = 0; b < B; ++b) {
        if (u[i * B + b] > best_u[i * B + b]) {
          best_u[i * B + b] = u[i * B + b];
          std::copy(cand.data().begin() + (b * n + i) * m, cand.data().begin() + (b * n + i + 1) * m,
                    bd.begin() + (b * n + i) * m);
        }
      }
  }
  return Tensor({B, n, m}, std::move(bd));
}

// ---------------------------------------------------------------------------
// Losses

/// -revenue + sum_i lambda_i rgt_i + rho/2 sum_i rgt_i^2.
inline Tensor regret_penalty_loss(const Tensor& payments, const Tensor& regrets, const std::vector<double>& lambda,
                                  double rho) {
  if (regrets.rank() != 1 || regrets.dim(0) != lambda.size() || payments.rank() != 2 ||
      payments.dim(1) != lambda.size()) {
    throw Error("loss: regrets " + ad::to_string(regrets.shape()) + " and payments " +
                ad::to_string(payments.shape()) + " do not match " + std::to_string(lambda.size()) + " multipliers");
  }
  Tensor lam({lambda.size()}, lambda);
  Tensor l_rgt = ad::add(ad::sum_all(ad::mul(lam, regrets)), ad::sum_all(ad::mul(regrets, regrets)) * (rho / 2.0));
  return ad::add(ad::neg(revenue(payments)), l_rgt);
}

/// Revenue, regret penalty, and the sum of MLP scores over the batch
/// (subtracted, so higher scores lower the loss).
inline Tensor loss_eq1(const Tensor& payments, const Tensor& regrets, const std::vector<double>& lambda_r,
                       double rho_r, const Tensor& prefs) {
  if (prefs.rank() != 1 || prefs.dim(0) != payments.dim(0)) {
    throw Error("loss_eq1: need one preference score per profile, got " + ad::to_string(prefs.shape()));
  }
  return ad::sub(regret_penalty_loss(payments, regrets, lambda_r, rho_r), ad::sum_all(prefs));
}

/// L_pref = sum_j lambda_s,j pref_j + rho_s/2 sum_j pref_j^2.
inline Tensor lagrangian_pref_term(const Tensor& prefs, const std::vector<double>& lambda_s, double rho_s) {
  if (prefs.rank() != 1 || prefs.dim(0) != lambda_s.size()) {
    throw Error("lagrangian_pref_term: " + std::to_string(lambda_s.size()) + " multipliers for scores of shape " +
                ad::to_string(prefs.shape()));
  }
  Tensor lam({lambda_s.size()}, lambda_s);
  return ad::add(ad::sum_all(ad::mul(lam, prefs)), ad::sum_all(ad::mul(prefs, prefs)) * (rho_s / 2.0));
}

inline Tensor loss_lagrangian_pref(const Tensor& payments, const Tensor& regrets, const Tensor& prefs,
                                   const LagrangeState& state, TrainMode mode) {
  if (mode != TrainMode::LagrangianPref) throw Error("loss_lagrangian_pref: lagrangian preference mode is disabled");
  return ad::sub(regret_penalty_loss(payments, regrets, state.lambda_r, state.rho_r),
                 lagrangian_pref_term(prefs, state.lambda_s, state.rho_s));
}

/// Best attainable score: the exact penalty measures the gap to it.
inline double ideal_score(const PreferenceFunction& fn, const AuctionSpec& spec) {
  switch (fn.kind) {
    case PreferenceKind::Tvf: return 0.0;
    case PreferenceKind::Entropy: return static_cast<double>(spec.n_agents) * std::log(static_cast<double>(spec.m_items));
    case PreferenceKind::Quota: return 0.0;
    case PreferenceKind::Mixture: break;
  }
  throw Error("ideal_score: mixtures have no score");
}

/// Exact-penalty RegretNet: lambda_s * mean(v) + rho_s/2 * mean(v^2) with
/// v = relu(ideal - score) per profile.
inline Tensor loss_penalty(const Tensor& payments, const Tensor& regrets, const Tensor& allocation,
                           const PreferenceFunction& fn, const AuctionSpec& spec, const LagrangeState& state) {
  Tensor v = ad::relu(ad::sub(Tensor::scalar(ideal_score(fn, spec)), preference_score_tensor(fn, allocation)));
  double lam = state.lambda_s.empty() ? 0.0 : state.lambda_s[0];
  Tensor pen = ad::add(ad::mean_all(v) * lam, ad::mean_all(ad::mul(v, v)) * (state.rho_s / 2.0));
  return ad::add(regret_penalty_loss(payments, regrets, state.lambda_r, state.rho_r), pen);
}

// ---------------------------------------------------------------------------
// Preference MLP training

struct MlpTrainer {
  PreferenceMLP mlp;
  ad::AdamState opt;
  LabeledAllocationSet data;  // unbalanced pool: ground truth plus co-training additions
  double accuracy = 0.0;      // on the last balanced training set
  std::size_t rounds = 0;
};

/// Eval-mode accuracy of the MLP thresholded at 0.5.
inline double mlp_accuracy(const PreferenceMLP& mlp, const LabeledAllocationSet& set, std::size_t chunk = 4096) {
  if (set.size() == 0) throw Error("mlp_accuracy: empty set");
  std::size_t correct = 0;
  for (std::size_t begin = 0; begin < set.size(); begin += chunk) {
    std::size_t end = std::min(set.size(), begin + chunk);
    std::vector<double> z(set.allocations.begin() + begin * set.width(), set.allocations.begin() + end * set.width());
    Tensor s = mlp_score(mlp, Tensor({end - begin, set.width()}, std::move(z)));
    for (std::size_t k = begin; k < end; ++k) correct += (s[k - begin] >= 0.5 ? 1 : 0) == set.labels[k] ? 1 : 0;
  }
  return static_cast<double>(correct) / static_cast<double>(set.size());
}

/// Minibatch BCE with Adam over a (balanced) labeled set. A trailing batch
/// with a single row is skipped (batch norm needs two).
inline double fit_mlp(PreferenceMLP& mlp, ad::AdamState& opt, const LabeledAllocationSet& set, std::size_t epochs,
                      std::size_t batch_size, std::uint64_t seed) {
  set.validate();
  if (set.width() != mlp.input_width) throw Error("fit_mlp: allocation width does not match the MLP");
  std::vector<std::size_t> order(set.size());
  std::vector<Tensor> params = mlp.parameters();
  Rng rng(seed);
  const std::size_t w = set.width();
  for (std::size_t e = 0; e < epochs; ++e) {
    for (std::size_t k = 0; k < order.size(); ++k) order[k] = k;
    for (std::size_t k = order.size(); k > 1; --k) std::swap(order[k - 1], order[rng.index(k)]);
    for (std::size_t begin = 0; begin < order.size(); begin += batch_size) {
      std::size_t end = std::min(order.size(), begin + batch_size);
      if (end - begin < 2) continue;
      std::vector<double> x((end - begin) * w), y(end - begin);
      for (std::size_t r = begin; r < end; ++r) {
        auto z = set.allocation(order[r]);
        std::copy(z.begin(), z.end(), x.begin() + (r - begin) * w);
        y[r - begin] = set.labels[order[r]];
      }
      ad::Tape tape;
      ad::TapeScope scope(tape);
      Tensor pred = mlp_forward(mlp, Tensor({end - begin, w}, std::move(x)), true);
      Tensor loss = ad::binary_cross_entropy(pred, Tensor({end - begin}, std::move(y)));
      if (!std::isfinite(loss.item())) throw Error("fit_mlp: non-finite BCE loss");
      tape.backward(loss);
      ad::adam_step(params, opt);
    }
  }
  return mlp_accuracy(mlp, set);
}

/// Balances the labeled set and fits a fresh MLP to it.
inline MlpTrainer pretrain_mlp(const LabeledAllocationSet& labeled, const TrainConfig& config, std::uint64_t seed) {
  MlpTrainer t;
  t.data = labeled;
  t.mlp = init_mlp(labeled.width(), derive_seed(seed, streams::mlp), config.mlp_hidden);
  t.opt = ad::AdamState(t.mlp.parameters(), config.mlp_lr);
  LabeledAllocationSet balanced = class_balance(labeled, derive_seed(seed, streams::balance));
  t.accuracy = fit_mlp(t.mlp, t.opt, balanced, config.mlp_epochs, config.mlp_batch_size,
                       derive_seed(seed, streams::shuffle + 1000));
  return t;
}

/// Adds RegretNet allocations on fresh bids, pseudo-labeled by the current
/// MLP at 0.5, then warm-restarts Adam and retrains on the balanced pool.
inline void cotrain_step(MlpTrainer& t, const RegretNetModel& model, const ValuationModel& valuation,
                         const TrainConfig& config, std::uint64_t seed) {
  if (config.cotrain_samples > 0) {
    LabeledAllocationSet fresh;
    fresh.n_agents = t.data.n_agents;
    fresh.m_items = t.data.m_items;
    ad::NoGradScope no_grad;
    BidBatch bids = sample_bids(model.spec, valuation, config.cotrain_samples, derive_seed(seed, 0));
    Tensor z = alloc_forward(model, bids.values);
    Tensor s = mlp_score(t.mlp, z);
    fresh.allocations = z.values();
    fresh.scores = s.values();
    fresh.labels.resize(fresh.scores.size());
    for (std::size_t k = 0; k < fresh.scores.size(); ++k) fresh.labels[k] = fresh.scores[k] >= 0.5 ? 1 : 0;
    t.data.append(fresh);
  }
  LabeledAllocationSet balanced = class_balance(t.data, derive_seed(seed, 1));
  ad::warm_restart(t.opt);
  t.accuracy = fit_mlp(t.mlp, t.opt, balanced, config.mlp_cotrain_epochs, config.mlp_batch_size, derive_seed(seed, 2));
  ++t.rounds;
}

// ---------------------------------------------------------------------------
// Ground truth, metrics, checkpoints

/// Known function with a threshold, or labeled exemplars for mixtures.
using GroundTruth = std::variant<KnownPreference, LabeledAllocationSet>;

inline GroundTruth make_ground_truth(const Experiment& ex) {
  const auto& c = ex.train;
  std::uint64_t seed = derive_seed(c.seed, streams::reference);
  if (ex.preference.kind == PreferenceKind::Mixture) {
    Tensor pool = sample_uniform_allocations(ex.spec, c.reference_pool, seed);
    return build_labels(pool, ex.preference, c.n_comparisons, derive_seed(seed, 1));
  }
  double threshold = c.pca_threshold ? *c.pca_threshold
                                     : reference_threshold(ex.preference, ex.spec, seed, c.reference_pool);
  return KnownPreference{ex.preference, threshold};
}

inline double pca(const Tensor& allocations, const GroundTruth& truth) {
  return std::visit([&](const auto& g) { return pca(allocations, g); }, truth);
}

struct Metrics {
  double pca = 0.0;
  double regret_mean = 0.0;
  double regret_std = 0.0;
  double regret_max = 0.0;
  double payment_mean = 0.0;
  double payment_std = 0.0;
  double payment_max = 0.0;
  bool operator==(const Metrics&) const = default;
};

inline bool finite(const Metrics& m) {
  for (double v : {m.pca, m.regret_mean, m.regret_std, m.regret_max, m.payment_mean, m.payment_std, m.payment_max})
    if (!std::isfinite(v)) return false;
  return true;
}

namespace detail {
struct Moments {
  double mean = 0.0, std = 0.0, max = 0.0;
};
inline Moments moments(const std::vector<double>& v) {
  Moments r;
  if (v.empty()) return r;
  r.max = v[0];
  for (double x : v) {
    r.mean += x;
    r.max = std::max(r.max, x);
  }
  r.mean /= static_cast<double>(v.size());
  double ss = 0.0;
  for (double x : v) ss += (x - r.mean) * (x - r.mean);
  r.std = std::sqrt(ss / static_cast<double>(v.size()));
  return r;
}
}  // namespace detail

/// PCA, regret (per sample and agent) and revenue (per-sample totals) on a
/// bid batch, processed in chunks so large test sets stay in memory.
inline Metrics measure(const RegretNetModel& model, const Tensor& bids, const ValuationModel& valuation,
                       const GroundTruth& truth, std::size_t steps, double rate, std::size_t restarts,
                       std::uint64_t seed, std::size_t chunk = 1000) {
  ad::NoGradScope no_grad;
  const std::size_t L = bids.dim(0), n = bids.dim(1), m = bids.dim(2);
  std::vector<double> regrets, totals, allocs;
  regrets.reserve(L * n);
  totals.reserve(L);
  allocs.reserve(L * n * m);
  for (std::size_t begin = 0, c = 0; begin < L; begin += chunk, ++c) {
    std::size_t end = std::min(L, begin + chunk);
    Tensor part({end - begin, n, m},
                std::vector<double>(bids.data().begin() + begin * n * m, bids.data().begin() + end * n * m));
    Outcome o = run_mechanism(model, part);
    Tensor mis = best_misreports(model, part, valuation, steps, rate, restarts, derive_seed(seed, c));
    Tensor r = regret_terms(model, part, mis, o).per_sample;  // [n, b]
    regrets.insert(regrets.end(), r.data().begin(), r.data().end());
    Tensor pay = ad::sum(o.payments, 1);
    totals.insert(totals.end(), pay.data().begin(), pay.data().end());
    allocs.insert(allocs.end(), o.allocation.data().begin(), o.allocation.data().end());
  }
  Metrics out;
  out.pca = pca(Tensor({L, n, m}, std::move(allocs)), truth);
  auto rm = detail::moments(regrets);
  auto pm = detail::moments(totals);
  out.regret_mean = rm.mean;
  out.regret_std = rm.std;
  out.regret_max = rm.max;
  out.payment_mean = pm.mean;
  out.payment_std = pm.std;
  out.payment_max = pm.max;
  return out;
}

struct Checkpoint {
  std::size_t epoch = 0;
  RegretNetModel model;
  std::optional<PreferenceMLP> mlp;
  LagrangeState lagrange;
  Metrics metrics;  // validation
  std::uint64_t seed = 0;
};

struct EpochLog {
  std::size_t epoch = 0;
  Metrics metrics;
  double lambda_r = 0.0;
  double rho_r = 0.0;
  double train_loss = 0.0;
  double train_revenue = 0.0;
  double mlp_accuracy = 0.0;
};

struct TrainResult {
  std::vector<Checkpoint> checkpoints;
  std::vector<EpochLog> log;
  bool aborted = false;
  std::string abort_reason;
  double initial_mlp_accuracy = 0.0;
  double label_flip_fraction = 0.0;
  std::size_t initial_labels = 0;
};

/// Criterion alpha*PCA + beta*payment/max_payment + gamma*(1 - regret/max_regret)
/// with the maxima taken over the mean validation metrics of every
/// checkpoint. Ties resolve to the earliest checkpoint.
inline std::vector<double> selection_scores(const std::vector<Checkpoint>& cps, double alpha, double beta,
                                            double gamma) {
  if (cps.empty()) throw Error("validate_select: no checkpoints");
  if (std::abs(alpha + beta + gamma - 1.0) > 1e-9) throw Error("validate_select: alpha + beta + gamma must equal 1");
  double max_pay = 0.0, max_rgt = 0.0;
  for (const auto& c : cps) {
    if (!finite(c.metrics)) throw Error("validate_select: checkpoint at epoch " + std::to_string(c.epoch) +
                                        " has non-finite metrics");
    max_pay = std::max(max_pay, c.metrics.payment_mean);
    max_rgt = std::max(max_rgt, c.metrics.regret_mean);
  }
  std::vector<double> out;
  for (const auto& c : cps) {
    double pay = max_pay > 0.0 ? c.metrics.payment_mean / max_pay : 0.0;
    double rgt = max_rgt > 0.0 ? 1.0 - c.metrics.regret_mean / max_rgt : 1.0;
    out.push_back(alpha * c.metrics.pca + beta * pay + gamma * rgt);
  }
  return out;
}

inline std::size_t validate_select_index(const std::vector<Checkpoint>& cps, double alpha, double beta,
                                         double gamma) {
  auto s = selection_scores(cps, alpha, beta, gamma);
  std::size_t best = 0;
  for (std::size_t k = 1; k < s.size(); ++k)
    if (s[k] > s[best]) best = k;
  return best;
}

inline const Checkpoint& validate_select(const std::vector<Checkpoint>& cps, double alpha = 0.45, double beta = 0.1,
                                         double gamma = 0.45) {
  return cps[validate_select_index(cps, alpha, beta, gamma)];
}

/// Test metrics with the strong adversary.
inline Metrics evaluate(const Checkpoint& cp, const Experiment& ex, const BidBatch& test, const GroundTruth& truth) {
  if (!(cp.model.spec == test.spec)) throw Error("evaluate: checkpoint auction does not match the test batch");
  const auto& c = ex.train;
  return measure(cp.model, test.values, ex.valuation, truth, c.test_misreport_steps, c.test_misreport_rate,
                 c.test_restarts, derive_seed(c.seed, streams::restarts));
}

/// The initial labeled set for the MLP: uniform random allocations labeled
/// by pairwise plurality, optionally perturbed with probit noise.
inline LabeledAllocationSet initial_labels(const Experiment& ex, double* flip_fraction = nullptr) {
  const auto& c = ex.train;
  Tensor pool = sample_uniform_allocations(ex.spec, c.mlp_initial_samples, derive_seed(c.seed, streams::mlp_pool));
  LabeledAllocationSet set = build_labels(pool, ex.preference, c.n_comparisons, derive_seed(c.seed, streams::labels));
  if (flip_fraction) *flip_fraction = 0.0;
  if (c.noise) {
    auto x = presentation_scale(set.scores);
    double sigma = c.noise->sigma ? *c.noise->sigma : sample_std(x);
    ProbitNoiseModel model{c.noise->mu, sigma, c.noise->k, c.noise->floor};
    auto noisy = probit_flip(set.labels, x, model, derive_seed(c.seed, streams::noise));
    std::size_t flips = 0;
    for (std::size_t k = 0; k < noisy.size(); ++k) flips += noisy[k] != set.labels[k] ? 1 : 0;
    if (flip_fraction) *flip_fraction = static_cast<double>(flips) / static_cast<double>(noisy.size());
    set.labels = std::move(noisy);
    set.provenance += "+probit";
  }
  return set;
}

using EpochCallback = std::function<void(const EpochLog&)>;

/// Full training run. Every epoch (and the initial model as epoch 0) yields
/// a checkpoint with validation metrics. A non-finite loss stops training;
/// the checkpoints so far are returned with `aborted` set.
inline TrainResult train(const Experiment& ex, const EpochCallback& on_epoch = {}) {
  ex.validate();
  const auto& c = ex.train;
  const AuctionSpec& spec = ex.spec;
  const std::size_t n = spec.n_agents, m = spec.m_items;
  TrainResult result;

  RegretNetModel model = init_regretnet(spec, ex.arch, derive_seed(c.seed, streams::model));
  std::vector<Tensor> params = model.parameters();
  ad::AdamState opt(params, c.regretnet_lr);
  LagrangeState lagrange = LagrangeState::initial(ex);

  std::optional<MlpTrainer> mlp;
  PreferenceMLP scorer;  // frozen copy used inside the loss
  if (uses_mlp(c.mode)) {
    LabeledAllocationSet labels = initial_labels(ex, &result.label_flip_fraction);
    result.initial_labels = labels.size();
    mlp = pretrain_mlp(labels, c, c.seed);
    result.initial_mlp_accuracy = mlp->accuracy;
    scorer = mlp->mlp.frozen();
  }

  GroundTruth truth = make_ground_truth(ex);
  BidBatch train_bids = sample_bids(spec, ex.valuation, c.regretnet_samples, derive_seed(c.seed, streams::train_bids));
  BidBatch val_bids = sample_bids(spec, ex.valuation, c.validation_samples, derive_seed(c.seed, streams::validation));

  auto snapshot = [&](std::size_t epoch, double loss, double rev) {
    Checkpoint cp;
    cp.epoch = epoch;
    cp.model = model.clone();
    if (mlp) cp.mlp = mlp->mlp.clone();
    cp.lagrange = lagrange;
    cp.seed = c.seed;
    cp.metrics = measure(model, val_bids.values, ex.valuation, truth, c.misreport_steps, c.misreport_rate, 0,
                         derive_seed(c.seed, streams::validation + 1000 + epoch));
    EpochLog log{epoch, cp.metrics, lagrange.mean_lambda_r(), lagrange.rho_r, loss, rev, mlp ? mlp->accuracy : 0.0};
    result.checkpoints.push_back(std::move(cp));
    result.log.push_back(log);
    if (on_epoch) on_epoch(log);
  };
  auto diverged = [&](std::size_t epoch) {
    if (finite(result.checkpoints.back().metrics)) return false;
    result.checkpoints.pop_back();
    result.aborted = true;
    result.abort_reason = "non-finite validation metrics at epoch " + std::to_string(epoch);
    return true;
  };
  snapshot(0, 0.0, 0.0);
  if (diverged(0)) return result;

  const std::size_t L = c.regretnet_samples, B = c.batch_size;
  const std::size_t batches = L / B;
  std::vector<std::size_t> order(L);
  const double* all = train_bids.values.data().data();
  for (std::size_t epoch = 1; epoch <= c.epochs; ++epoch) {
    for (std::size_t k = 0; k < L; ++k) order[k] = k;
    Rng shuffle(derive_seed(derive_seed(c.seed, streams::shuffle), epoch));
    for (std::size_t k = L; k > 1; --k) std::swap(order[k - 1], order[shuffle.index(k)]);
    double loss_sum = 0.0, rev_sum = 0.0;
    for (std::size_t it = 0; it < batches; ++it) {
      std::vector<double> x(B * n * m);
      for (std::size_t r = 0; r < B; ++r)
        std::copy(all + order[it * B + r] * n * m, all + (order[it * B + r] + 1) * n * m, x.begin() + r * n * m);
      Tensor batch({B, n, m}, std::move(x));
      Tensor mis = compute_misreports(model, batch, ex.valuation, c.misreport_steps, c.misreport_rate);

      ad::Tape tape;
      ad::TapeScope scope(tape);
      Outcome out = run_mechanism(model, batch);
      Tensor rgt = regret_terms(model, batch, mis, out).per_agent;
      Tensor loss;
      switch (c.mode) {
        case TrainMode::PreferenceNet:
          loss = loss_eq1(out.payments, rgt, lagrange.lambda_r, lagrange.rho_r,
                          mlp_forward(scorer, out.allocation, false));
          break;
        case TrainMode::LagrangianPref:
          loss = loss_lagrangian_pref(out.payments, rgt, mlp_forward(scorer, out.allocation, false), lagrange, c.mode);
          break;
        case TrainMode::Penalty:
          loss = loss_penalty(out.payments, rgt, out.allocation, ex.preference, spec, lagrange);
          break;
        case TrainMode::RegretNet:
          loss = regret_penalty_loss(out.payments, rgt, lagrange.lambda_r, lagrange.rho_r);
          break;
      }
      double value = loss.item();
      if (!std::isfinite(value)) {
        result.aborted = true;
        result.abort_reason = "non-finite loss at epoch " + std::to_string(epoch) + ", iteration " +
                              std::to_string(lagrange.iteration + 1);
        return result;
      }
      tape.backward(loss);
      ad::adam_step(params, opt);
      lagrange.advance(c);
      loss_sum += value;
      rev_sum += revenue(out.payments).item();
    }
    double denom = batches ? static_cast<double>(batches) : 1.0;
    snapshot(epoch, loss_sum / denom, rev_sum / denom);
    if (diverged(epoch)) return result;
    if (mlp && epoch % c.cotrain_interval == 0 && epoch < c.epochs) {
      cotrain_step(*mlp, model, ex.valuation, c, derive_seed(c.seed, streams::cotrain + epoch));
      scorer = mlp->mlp.frozen();
    }
  }
  return result;
}

}  // namespace prefnet
