#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "prefnet/auction.hpp"
#include "prefnet/ops.hpp"
#include "prefnet/random.hpp"

namespace prefnet {

enum class Activation { Tanh, Relu };

inline std::string to_string(Activation a) { return a == Activation::Tanh ? "tanh" : "relu"; }

inline Activation parse_activation(const std::string& s) {
  if (s == "tanh") return Activation::Tanh;
  if (s == "relu") return Activation::Relu;
  throw Error("unknown activation '" + s + "' (expected tanh or relu)");
}

/// Trunk shape shared by the allocation and payment networks.
struct Architecture {
  std::size_t hidden_layers = 2;
  std::size_t width = 100;
  Activation activation = Activation::Tanh;
  bool operator==(const Architecture&) const = default;
};

struct Linear {
  Tensor weight;  // [in, out]
  Tensor bias;    // [out]

  Tensor operator()(const Tensor& x) const { return ad::affine(x, weight, bias); }
  std::size_t in() const { return weight.dim(0); }
  std::size_t out() const { return weight.dim(1); }
};

/// Uniform(-1/sqrt(in), 1/sqrt(in)) for weights and biases.
inline Linear make_linear(std::size_t in, std::size_t out, Rng& rng) {
  double bound = 1.0 / std::sqrt(static_cast<double>(in));
  std::vector<double> w(in * out), b(out);
  for (auto& x : w) x = rng.uniform(-bound, bound);
  for (auto& x : b) x = rng.uniform(-bound, bound);
  return Linear{Tensor({in, out}, std::move(w), true), Tensor({out}, std::move(b), true)};
}

inline Linear detached(const Linear& l) { return Linear{l.weight.detach(), l.bias.detach()}; }
inline Linear cloned(const Linear& l) { return Linear{l.weight.clone(), l.bias.clone()}; }

namespace detail {
inline Tensor activate(const Tensor& x, Activation a) {
  return a == Activation::Tanh ? ad::tanh(x) : ad::relu(x);
}

inline Tensor run_trunk(const std::vector<Linear>& trunk, Tensor x, Activation a) {
  for (const auto& layer : trunk) x = activate(layer(x), a);
  return x;
}

inline Tensor flatten_profiles(const Tensor& bids, const AuctionSpec& spec, const char* op) {
  if (bids.rank() != 3 || bids.dim(1) != spec.n_agents || bids.dim(2) != spec.m_items) {
    throw Error(std::string(op) + ": bids of shape " + ad::to_string(bids.shape()) + " do not match auction " +
                spec.label());
  }
  return ad::reshape(bids, {bids.dim(0), spec.width()});
}
}  // namespace detail

/// Allocation and payment networks (separate trunks).
struct RegretNetModel {
  AuctionSpec spec;
  Architecture arch;
  std::vector<Linear> alloc_trunk;
  Linear alloc_head;       // additive: (n+1)*m logits; unit-demand: per-row n*(m+1)
  Linear alloc_head_cols;  // unit-demand only: per-column (n+1)*m logits
  std::vector<Linear> pay_trunk;
  Linear pay_head;  // n logits
  std::uint64_t seed = 0;

  /// All trainable tensors in a fixed order (also the serialization order).
  std::vector<Tensor> parameters() const {
    std::vector<Tensor> p;
    auto push = [&p](const Linear& l) {
      p.push_back(l.weight);
      p.push_back(l.bias);
    };
    for (const auto& l : alloc_trunk) push(l);
    push(alloc_head);
    if (spec.demand == DemandKind::UnitDemand) push(alloc_head_cols);
    for (const auto& l : pay_trunk) push(l);
    push(pay_head);
    return p;
  }

  RegretNetModel transformed(Linear (*fn)(const Linear&)) const {
    RegretNetModel m = *this;
    for (auto& l : m.alloc_trunk) l = fn(l);
    m.alloc_head = fn(alloc_head);
    if (spec.demand == DemandKind::UnitDemand) m.alloc_head_cols = fn(alloc_head_cols);
    for (auto& l : m.pay_trunk) l = fn(l);
    m.pay_head = fn(pay_head);
    return m;
  }
  /// Deep copy with independent storage.
  RegretNetModel clone() const { return transformed(&cloned); }
  /// Deep copy whose parameters do not require grad.
  RegretNetModel frozen() const { return transformed(&detached); }
};

inline RegretNetModel init_regretnet(const AuctionSpec& spec, const Architecture& arch, std::uint64_t seed) {
  spec.validate();
  if (arch.hidden_layers < 1 || arch.width < 1) throw Error("init_regretnet: need at least one hidden layer");
  Rng rng(seed);
  RegretNetModel m;
  m.spec = spec;
  m.arch = arch;
  m.seed = seed;
  const std::size_t n = spec.n_agents, k = spec.m_items;
  auto trunk = [&](std::vector<Linear>& layers) {
    std::size_t in = spec.width();
    for (std::size_t l = 0; l < arch.hidden_layers; ++l) {
      layers.push_back(make_linear(in, arch.width, rng));
      in = arch.width;
    }
  };
  trunk(m.alloc_trunk);
  if (spec.demand == DemandKind::Additive) {
    m.alloc_head = make_linear(arch.width, (n + 1) * k, rng);
  } else {
    m.alloc_head = make_linear(arch.width, n * (k + 1), rng);
    m.alloc_head_cols = make_linear(arch.width, (n + 1) * k, rng);
  }
  trunk(m.pay_trunk);
  m.pay_head = make_linear(arch.width, n, rng);
  return m;
}

/// Feasible allocation probabilities [B, n, m] for bids [B, n, m].
/// Additive: per item, softmax over the agents plus a dummy "unsold" row.
/// Unit-demand: elementwise minimum of a per-agent softmax over items plus a
/// dummy column and a per-item softmax over agents plus a dummy row.
inline Tensor alloc_forward(const RegretNetModel& model, const Tensor& bids) {
  const auto& spec = model.spec;
  const std::size_t n = spec.n_agents, k = spec.m_items;
  Tensor x = detail::flatten_profiles(bids, spec, "alloc_forward");
  std::size_t B = x.dim(0);
  Tensor h = detail::run_trunk(model.alloc_trunk, x, model.arch.activation);
  if (spec.demand == DemandKind::Additive) {
    Tensor logits = ad::reshape(model.alloc_head(h), {B, n + 1, k});
    return ad::slice(ad::softmax(logits, 1), 1, 0, n);
  }
  Tensor rows = ad::reshape(model.alloc_head(h), {B, n, k + 1});
  Tensor cols = ad::reshape(model.alloc_head_cols(h), {B, n + 1, k});
  Tensor by_row = ad::slice(ad::softmax(rows, 2), 2, 0, k);
  Tensor by_col = ad::slice(ad::softmax(cols, 1), 1, 0, n);
  return ad::minimum(by_row, by_col);
}

/// p_i = sigmoid(head_i) * sum_j b_ij z_ij, so truthful bidders never pay
/// more than their value for the allocation.
inline Tensor payment_forward(const RegretNetModel& model, const Tensor& bids, const Tensor& allocation) {
  Tensor x = detail::flatten_profiles(bids, model.spec, "payment_forward");
  if (allocation.shape() != bids.shape()) {
    throw Error("payment_forward: allocation " + ad::to_string(allocation.shape()) + " does not match bids " +
                ad::to_string(bids.shape()));
  }
  Tensor frac = ad::sigmoid(model.pay_head(detail::run_trunk(model.pay_trunk, x, model.arch.activation)));
  return ad::mul(frac, ad::sum(ad::mul(bids, allocation), 2));
}

struct Outcome {
  Tensor allocation;  // [B, n, m]
  Tensor payments;    // [B, n]
};

inline Outcome run_mechanism(const RegretNetModel& model, const Tensor& bids) {
  Tensor z = alloc_forward(model, bids);
  return {z, payment_forward(model, bids, z)};
}

// ---------------------------------------------------------------------------
// Preference MLP: Linear -> BatchNorm -> ReLU, twice, then Linear -> sigmoid.

struct PreferenceMLP {
  std::size_t input_width = 0;
  std::size_t hidden = 100;
  Linear l1, l2, l3;
  Tensor bn1_gamma, bn1_beta, bn2_gamma, bn2_beta;
  ad::BatchNormStats bn1, bn2;
  std::uint64_t seed = 0;

  std::vector<Tensor> parameters() const {
    return {l1.weight, l1.bias, bn1_gamma, bn1_beta, l2.weight, l2.bias, bn2_gamma, bn2_beta, l3.weight, l3.bias};
  }

  PreferenceMLP clone() const {
    PreferenceMLP m = *this;
    m.l1 = cloned(l1);
    m.l2 = cloned(l2);
    m.l3 = cloned(l3);
    m.bn1_gamma = bn1_gamma.clone();
    m.bn1_beta = bn1_beta.clone();
    m.bn2_gamma = bn2_gamma.clone();
    m.bn2_beta = bn2_beta.clone();
    return m;
  }

  PreferenceMLP frozen() const {
    PreferenceMLP m = *this;
    m.l1 = detached(l1);
    m.l2 = detached(l2);
    m.l3 = detached(l3);
    m.bn1_gamma = bn1_gamma.detach();
    m.bn1_beta = bn1_beta.detach();
    m.bn2_gamma = bn2_gamma.detach();
    m.bn2_beta = bn2_beta.detach();
    return m;
  }
};

inline PreferenceMLP init_mlp(std::size_t input_width, std::uint64_t seed, std::size_t hidden = 100) {
  if (input_width < 1 || hidden < 1) throw Error("init_mlp: widths must be positive");
  Rng rng(seed);
  PreferenceMLP m;
  m.input_width = input_width;
  m.hidden = hidden;
  m.seed = seed;
  m.l1 = make_linear(input_width, hidden, rng);
  m.l2 = make_linear(hidden, hidden, rng);
  m.l3 = make_linear(hidden, 1, rng);
  m.bn1_gamma = Tensor::ones({hidden}, true);
  m.bn1_beta = Tensor::zeros({hidden}, true);
  m.bn2_gamma = Tensor::ones({hidden}, true);
  m.bn2_beta = Tensor::zeros({hidden}, true);
  m.bn1 = ad::BatchNormStats(hidden);
  m.bn2 = ad::BatchNormStats(hidden);
  return m;
}

/// Scores in (0, 1), one per allocation. Accepts [B, n, m] or [B, n*m].
/// Train mode normalizes with batch statistics and updates running stats.
inline Tensor mlp_forward(PreferenceMLP& mlp, const Tensor& allocations, bool train) {
  if (allocations.rank() < 2 || allocations.size() / allocations.dim(0) != mlp.input_width) {
    throw Error("mlp_forward: input of shape " + ad::to_string(allocations.shape()) + " does not have width " +
                std::to_string(mlp.input_width));
  }
  std::size_t B = allocations.dim(0);
  Tensor x = allocations.rank() == 2 ? allocations : ad::reshape(allocations, {B, mlp.input_width});
  x = ad::relu(ad::batch_norm(mlp.l1(x), mlp.bn1_gamma, mlp.bn1_beta, mlp.bn1, train));
  x = ad::relu(ad::batch_norm(mlp.l2(x), mlp.bn2_gamma, mlp.bn2_beta, mlp.bn2, train));
  return ad::reshape(ad::sigmoid(mlp.l3(x)), {B});
}

/// Eval-mode scores without touching the model's running statistics.
inline Tensor mlp_score(const PreferenceMLP& mlp, const Tensor& allocations) {
  PreferenceMLP view = mlp;  // shares parameters, copies the small stats vectors
  return mlp_forward(view, allocations, false);
}

}  // namespace prefnet
