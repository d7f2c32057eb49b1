#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <limits>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "prefnet/auction.hpp"
#include "prefnet/csv.hpp"
#include "prefnet/ops.hpp"
#include "prefnet/random.hpp"

namespace prefnet {

enum class PreferenceKind { Tvf, Entropy, Quota, Mixture };

inline std::string to_string(PreferenceKind k) {
  switch (k) {
    case PreferenceKind::Tvf: return "tvf";
    case PreferenceKind::Entropy: return "entropy";
    case PreferenceKind::Quota: return "quota";
    case PreferenceKind::Mixture: return "mixture";
  }
  return "?";
}

inline PreferenceKind parse_preference_kind(const std::string& s) {
  if (s == "tvf") return PreferenceKind::Tvf;
  if (s == "entropy") return PreferenceKind::Entropy;
  if (s == "quota") return PreferenceKind::Quota;
  if (s == "mixture") return PreferenceKind::Mixture;
  throw Error("unknown preference function '" + s + "' (expected tvf, entropy, quota or mixture)");
}

struct MixtureComponent;

/// A synthetic preference over allocations. TVF uses a single category
/// containing every agent with distance bound `tvf_distance`.
struct PreferenceFunction {
  PreferenceKind kind = PreferenceKind::Tvf;
  double tvf_distance = 0.0;
  std::optional<double> quota_threshold;  // defaults to 0.8 / n_agents
  std::vector<MixtureComponent> mixture;

  double quota_t(std::size_t n_agents) const {
    return quota_threshold.value_or(0.8 / static_cast<double>(n_agents));
  }
  void validate(std::size_t n_agents) const;
  std::string name() const;
  bool operator==(const PreferenceFunction&) const;
};

struct MixtureComponent {
  double fraction = 0.0;
  PreferenceFunction function;
  bool operator==(const MixtureComponent&) const = default;
};

inline bool PreferenceFunction::operator==(const PreferenceFunction& o) const {
  return kind == o.kind && tvf_distance == o.tvf_distance && quota_threshold == o.quota_threshold &&
         mixture == o.mixture;
}

inline void PreferenceFunction::validate(std::size_t n_agents) const {
  if (kind == PreferenceKind::Tvf && !(tvf_distance >= 0.0)) throw Error("tvf: distance bound must be >= 0");
  if (kind == PreferenceKind::Quota) {
    double t = quota_t(n_agents);
    if (!(t > 0.0 && t < 1.0 / static_cast<double>(n_agents))) {
      throw Error("quota: threshold must lie in (0, 1/n_agents), got " + std::to_string(t));
    }
  }
  if (kind == PreferenceKind::Mixture) {
    if (mixture.empty()) throw Error("mixture: needs at least one component");
    double total = 0.0;
    for (const auto& c : mixture) {
      if (!(c.fraction > 0.0)) throw Error("mixture: fractions must be positive");
      if (c.function.kind == PreferenceKind::Mixture) throw Error("mixture: components cannot be mixtures");
      c.function.validate(n_agents);
      total += c.fraction;
    }
    if (std::abs(total - 1.0) > 1e-9) throw Error("mixture: fractions must sum to 1");
  }
}

inline std::string PreferenceFunction::name() const {
  if (kind != PreferenceKind::Mixture) return to_string(kind);
  std::string s = "mixture(";
  for (std::size_t c = 0; c < mixture.size(); ++c) {
    s += (c ? "," : "") + mixture[c].function.name() + ":" + csv::format_double(mixture[c].fraction);
  }
  return s + ")";
}

// ---------------------------------------------------------------------------
// Scores of a single allocation z (row-major n x m)

/// Negated total variation violation over item pairs.
inline double tvf_score(std::span<const double> z, std::size_t n, std::size_t m, double d = 0.0) {
  double violation = 0.0;
  for (std::size_t j = 0; j < m; ++j)
    for (std::size_t k = j + 1; k < m; ++k) {
      double l1 = 0.0;
      for (std::size_t i = 0; i < n; ++i) l1 += std::abs(z[i * m + j] - z[i * m + k]);
      violation += std::max(0.0, l1 - d);
    }
  return -violation;
}

/// Sum over agents of the Shannon entropy of the agent's normalized row.
inline double entropy_score(std::span<const double> z, std::size_t n, std::size_t m) {
  double h = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < m; ++j) row += z[i * m + j];
    if (row <= 0.0) continue;
    for (std::size_t j = 0; j < m; ++j) {
      double p = z[i * m + j] / row;
      if (p > 0.0) h -= p * std::log(p);
    }
  }
  return h;
}

/// Smallest normalized per-item share of any agent, minus the threshold.
inline double quota_score(std::span<const double> z, std::size_t n, std::size_t m, double t) {
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < m; ++j) {
    double col = 0.0;
    for (std::size_t i = 0; i < n; ++i) col += z[i * m + j];
    for (std::size_t i = 0; i < n; ++i) {
      double share = col > 0.0 ? z[i * m + j] / col : 0.0;
      worst = std::min(worst, share);
    }
  }
  return worst - t;
}

inline double preference_score(const PreferenceFunction& fn, std::span<const double> z, std::size_t n,
                               std::size_t m) {
  if (z.size() != n * m) throw Error("preference_score: allocation size does not match n x m");
  switch (fn.kind) {
    case PreferenceKind::Tvf: return tvf_score(z, n, m, fn.tvf_distance);
    case PreferenceKind::Entropy: return entropy_score(z, n, m);
    case PreferenceKind::Quota: return quota_score(z, n, m, fn.quota_t(n));
    case PreferenceKind::Mixture: break;
  }
  throw Error("preference_score: mixtures only label allocations; score a component instead");
}

/// Scores of every allocation in a [B, n, m] batch.
inline std::vector<double> preference_scores(const PreferenceFunction& fn, const Tensor& allocations) {
  if (allocations.rank() != 3) {
    throw Error("preference_scores: expected [B, n, m], got " + ad::to_string(allocations.shape()));
  }
  std::size_t B = allocations.dim(0), n = allocations.dim(1), m = allocations.dim(2);
  std::vector<double> out(B);
  for (std::size_t b = 0; b < B; ++b) out[b] = preference_score(fn, allocations.data().subspan(b * n * m, n * m), n, m);
  return out;
}

/// Differentiable per-allocation scores [B] for explicit preference
/// penalties. Entropy uses log(p + 1e-12), so it matches the exact score to
/// about 1e-11.
inline Tensor preference_score_tensor(const PreferenceFunction& fn, const Tensor& z) {
  using namespace ad;
  if (z.rank() != 3) throw Error("preference_score_tensor: expected [B, n, m], got " + ad::to_string(z.shape()));
  std::size_t B = z.dim(0), n = z.dim(1), m = z.dim(2);
  const Tensor tiny = Tensor::scalar(1e-300);
  switch (fn.kind) {
    case PreferenceKind::Tvf: {
      Tensor violation = Tensor::zeros({B});
      for (std::size_t j = 0; j < m; ++j)
        for (std::size_t k = j + 1; k < m; ++k) {
          Tensor diff = sub(slice(z, 2, j, j + 1), slice(z, 2, k, k + 1));  // [B, n, 1]
          Tensor l1 = reshape(sum(abs(diff), 1), {B});
          violation = add(violation, relu(sub(l1, Tensor::scalar(fn.tvf_distance))));
        }
      return neg(violation);
    }
    case PreferenceKind::Entropy: {
      Tensor p = div(z, add(sum(z, 2, true), tiny));
      return neg(sum(sum(mul(p, log(p)), 2), 1));
    }
    case PreferenceKind::Quota: {
      Tensor share = div(z, add(sum(z, 1, true), tiny));
      Tensor smallest = neg(max(neg(share), 1));  // [B, m]
      smallest = neg(max(neg(smallest), 1));      // [B]
      return sub(smallest, Tensor::scalar(fn.quota_t(n)));
    }
    case PreferenceKind::Mixture: break;
  }
  throw Error("preference_score_tensor: mixtures have no score");
}

// ---------------------------------------------------------------------------
// Labeling

/// 1 iff `score` strictly beats more than half of the comparison scores.
inline int pairwise_label(double score, std::span<const double> comparison_scores) {
  std::size_t wins = 0;
  for (double c : comparison_scores) wins += score > c ? 1 : 0;
  return 2 * wins > comparison_scores.size() ? 1 : 0;
}

struct LabeledAllocationSet {
  std::size_t n_agents = 0;
  std::size_t m_items = 0;
  std::vector<double> allocations;  // size() * n * m, row-major
  std::vector<double> scores;
  std::vector<int> labels;
  std::string provenance;
  std::uint64_t seed = 0;

  std::size_t size() const { return labels.size(); }
  std::size_t width() const { return n_agents * m_items; }
  std::span<const double> allocation(std::size_t k) const {
    return std::span<const double>(allocations).subspan(k * width(), width());
  }
  Tensor tensor() const { return Tensor({size(), n_agents, m_items}, allocations); }
  double positive_fraction() const {
    if (labels.empty()) return 0.0;
    std::size_t pos = 0;
    for (int l : labels) pos += l == 1 ? 1 : 0;
    return static_cast<double>(pos) / static_cast<double>(labels.size());
  }

  void validate() const {
    if (allocations.size() != size() * width() || scores.size() != size()) {
      throw Error("LabeledAllocationSet: parallel arrays have different lengths");
    }
    for (int l : labels) {
      if (l != 0 && l != 1) throw Error("LabeledAllocationSet: labels must be 0 or 1");
    }
  }

  void append(const LabeledAllocationSet& other) {
    if (other.n_agents != n_agents || other.m_items != m_items) {
      throw Error("LabeledAllocationSet::append: auction shapes differ");
    }
    allocations.insert(allocations.end(), other.allocations.begin(), other.allocations.end());
    scores.insert(scores.end(), other.scores.begin(), other.scores.end());
    labels.insert(labels.end(), other.labels.begin(), other.labels.end());
  }
};

namespace detail {

// Labels pool[begin, end) against comparisons drawn from the same range.
inline void label_range(const std::vector<double>& scores, std::size_t begin, std::size_t end,
                        std::size_t n_comparisons, Rng& rng, std::vector<int>& labels) {
  std::size_t size = end - begin;
  if (size <= n_comparisons) {
    throw Error("build_labels: pool of " + std::to_string(size) + " allocations is too small for " +
                std::to_string(n_comparisons) + " comparisons");
  }
  std::vector<std::size_t> picked;
  std::vector<double> comp;
  for (std::size_t k = begin; k < end; ++k) {
    picked.clear();
    comp.clear();
    while (picked.size() < n_comparisons) {
      std::size_t c = begin + rng.index(size);
      if (c == k || std::find(picked.begin(), picked.end(), c) != picked.end()) continue;
      picked.push_back(c);
      comp.push_back(scores[c]);
    }
    labels[k] = pairwise_label(scores[k], comp);
  }
}

}  // namespace detail

/// Labels each allocation in the pool by pairwise plurality against
/// `n_comparisons` distinct other allocations drawn uniformly. Mixtures
/// split the pool into contiguous partitions by their fractions and label
/// each partition with its own function.
inline LabeledAllocationSet build_labels(const Tensor& allocations, const PreferenceFunction& fn,
                                         std::size_t n_comparisons, std::uint64_t seed) {
  if (allocations.rank() != 3) throw Error("build_labels: expected [B, n, m] allocations");
  std::size_t B = allocations.dim(0), n = allocations.dim(1), m = allocations.dim(2);
  fn.validate(n);
  if (n_comparisons < 1) throw Error("build_labels: need at least one comparison");
  LabeledAllocationSet set;
  set.n_agents = n;
  set.m_items = m;
  set.allocations = allocations.values();
  set.scores.assign(B, 0.0);
  set.labels.assign(B, 0);
  set.provenance = fn.name();
  set.seed = seed;
  Rng rng(seed);
  if (fn.kind != PreferenceKind::Mixture) {
    set.scores = preference_scores(fn, allocations);
    detail::label_range(set.scores, 0, B, n_comparisons, rng, set.labels);
    return set;
  }
  double cumulative = 0.0;
  std::size_t begin = 0;
  for (std::size_t c = 0; c < fn.mixture.size(); ++c) {
    cumulative += fn.mixture[c].fraction;
    std::size_t end = c + 1 == fn.mixture.size()
                          ? B
                          : static_cast<std::size_t>(std::llround(cumulative * static_cast<double>(B)));
    end = std::min(end, B);
    for (std::size_t k = begin; k < end; ++k) {
      set.scores[k] = preference_score(fn.mixture[c].function, set.allocation(k), n, m);
    }
    detail::label_range(set.scores, begin, end, n_comparisons, rng, set.labels);
    begin = end;
  }
  return set;
}

/// Random feasible allocations: additive draws each item's split over the
/// agents plus an unsold slot from a flat Dirichlet; unit-demand takes the
/// elementwise minimum of flat-Dirichlet rows and columns, mirroring the
/// network's construction.
inline Tensor sample_uniform_allocations(const AuctionSpec& spec, std::size_t count, std::uint64_t seed) {
  spec.validate();
  const std::size_t n = spec.n_agents, m = spec.m_items;
  Rng rng(seed);
  auto dirichlet = [&rng](std::vector<double>& out) {
    double total = 0.0;
    for (auto& x : out) {
      x = -std::log(1.0 - rng.uniform());
      total += x;
    }
    for (auto& x : out) x /= total;
  };
  std::vector<double> z(count * n * m);
  std::vector<double> col(n + 1), row(m + 1);
  std::vector<double> by_col(n * m);
  for (std::size_t s = 0; s < count; ++s) {
    double* zs = z.data() + s * n * m;
    for (std::size_t j = 0; j < m; ++j) {
      dirichlet(col);
      for (std::size_t i = 0; i < n; ++i) by_col[i * m + j] = col[i];
    }
    if (spec.demand == DemandKind::Additive) {
      std::copy(by_col.begin(), by_col.end(), zs);
      continue;
    }
    for (std::size_t i = 0; i < n; ++i) {
      dirichlet(row);
      for (std::size_t j = 0; j < m; ++j) zs[i * m + j] = std::min(row[j], by_col[i * m + j]);
    }
  }
  return Tensor({count, n, m}, std::move(z));
}

inline double median(std::vector<double> v) {
  if (v.empty()) throw Error("median of empty sample");
  std::sort(v.begin(), v.end());
  std::size_t h = v.size() / 2;
  return v.size() % 2 ? v[h] : 0.5 * (v[h - 1] + v[h]);
}

/// Known-function ground truth: an allocation satisfies the preference iff
/// its score is >= threshold.
struct KnownPreference {
  PreferenceFunction function;
  double threshold = 0.0;
};

/// Median score over a seeded pool of random feasible allocations.
inline double reference_threshold(const PreferenceFunction& fn, const AuctionSpec& spec, std::uint64_t seed,
                                  std::size_t pool_size = 10000) {
  return median(preference_scores(fn, sample_uniform_allocations(spec, pool_size, seed)));
}

inline std::vector<int> known_labels(const Tensor& allocations, const KnownPreference& truth) {
  auto scores = preference_scores(truth.function, allocations);
  std::vector<int> s(scores.size());
  for (std::size_t k = 0; k < s.size(); ++k) s[k] = scores[k] >= truth.threshold ? 1 : 0;
  return s;
}

/// Preference classification accuracy with a known preference function.
inline double pca(const Tensor& allocations, const KnownPreference& truth) {
  if (allocations.rank() != 3 || allocations.dim(0) == 0) throw Error("pca: empty allocation set");
  auto s = known_labels(allocations, truth);
  double pos = 0.0;
  for (int v : s) pos += v;
  return pos / static_cast<double>(s.size());
}

/// Nearest (Euclidean) ground-truth allocation for each query; ties resolve
/// to the lowest index.
inline std::vector<std::size_t> nearest_neighbors(const Tensor& allocations, const LabeledAllocationSet& truth) {
  std::size_t w = truth.width();
  if (allocations.rank() != 3 || allocations.size() / allocations.dim(0) != w) {
    throw Error("nearest_neighbors: allocation shape does not match the ground-truth set");
  }
  std::vector<std::size_t> nn(allocations.dim(0));
  const double* q = allocations.data().data();
  const double* g = truth.allocations.data();
  for (std::size_t a = 0; a < nn.size(); ++a) {
    double best = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < truth.size(); ++t) {
      double d = 0.0;
      for (std::size_t k = 0; k < w; ++k) {
        double diff = q[a * w + k] - g[t * w + k];
        d += diff * diff;
      }
      if (d < best) {
        best = d;
        nn[a] = t;
      }
    }
  }
  return nn;
}

/// Preference classification accuracy against labeled exemplars (1-NN).
inline double pca(const Tensor& allocations, const LabeledAllocationSet& truth) {
  if (truth.size() == 0) throw Error("pca: ground-truth set is empty");
  if (allocations.rank() != 3 || allocations.dim(0) == 0) throw Error("pca: empty allocation set");
  auto nn = nearest_neighbors(allocations, truth);
  double pos = 0.0;
  for (auto t : nn) pos += truth.labels[t];
  return pos / static_cast<double>(nn.size());
}

// ---------------------------------------------------------------------------
// Label noise

/// Probit flip model: q(x) = clamp(k * (1 - Phi(|x - mu| / sigma)), f, 1).
/// Noise peaks (k/2) at the decision boundary mu and decays to the floor f.
struct ProbitNoiseModel {
  double mu = 0.7;
  double sigma = 1.0;
  double k = 1.05;
  double floor = 0.15;

  void validate() const {
    if (!(sigma > 0.0)) throw Error("ProbitNoiseModel: sigma must be positive");
    if (!(floor >= 0.0 && floor <= 1.0)) throw Error("ProbitNoiseModel: floor must lie in [0, 1]");
    if (!(k >= 0.0)) throw Error("ProbitNoiseModel: k must be non-negative");
  }

  double flip_probability(double x) const {
    double z = std::abs(x - mu) / sigma;
    double tail = 0.5 * std::erfc(z / std::sqrt(2.0));  // 1 - Phi(z)
    return std::clamp(k * tail, floor, 1.0);
  }
};

/// Min-max rescaling of raw scores onto [0, 1] (constant input maps to 0).
inline std::vector<double> presentation_scale(std::span<const double> scores) {
  auto [lo, hi] = std::minmax_element(scores.begin(), scores.end());
  std::vector<double> x(scores.size(), 0.0);
  if (scores.empty() || *hi == *lo) return x;
  for (std::size_t k = 0; k < x.size(); ++k) x[k] = (scores[k] - *lo) / (*hi - *lo);
  return x;
}

inline double sample_std(std::span<const double> x) {
  if (x.size() < 2) return 0.0;
  double mean = 0.0;
  for (double v : x) mean += v;
  mean /= static_cast<double>(x.size());
  double ss = 0.0;
  for (double v : x) ss += (v - mean) * (v - mean);
  return std::sqrt(ss / static_cast<double>(x.size() - 1));
}

/// Flips each label independently with probability q(x).
inline std::vector<int> probit_flip(std::span<const int> labels, std::span<const double> x,
                                    const ProbitNoiseModel& model, std::uint64_t seed) {
  model.validate();
  if (labels.size() != x.size()) throw Error("probit_flip: labels and scores differ in length");
  Rng rng(seed);
  std::vector<int> out(labels.begin(), labels.end());
  for (std::size_t k = 0; k < out.size(); ++k) {
    if (rng.uniform() < model.flip_probability(x[k])) out[k] = 1 - out[k];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Similarity and balancing

/// Mean Euclidean distance between paired allocations of two [B, n, m] batches.
inline double allocation_similarity(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape() || a.rank() != 3) {
    throw Error("allocation_similarity: shapes " + ad::to_string(a.shape()) + " and " + ad::to_string(b.shape()) +
                " differ");
  }
  std::size_t B = a.dim(0), w = a.size() / B;
  double total = 0.0;
  for (std::size_t s = 0; s < B; ++s) {
    double d = 0.0;
    for (std::size_t k = 0; k < w; ++k) {
      double diff = a[s * w + k] - b[s * w + k];
      d += diff * diff;
    }
    total += std::sqrt(d);
  }
  return total / static_cast<double>(B);
}

/// Over-samples the minority class with replacement until both classes have
/// equal counts. Originals keep their order; duplicates are appended.
inline LabeledAllocationSet class_balance(const LabeledAllocationSet& set, std::uint64_t seed) {
  set.validate();
  std::vector<std::size_t> pos, neg;
  for (std::size_t k = 0; k < set.size(); ++k) (set.labels[k] ? pos : neg).push_back(k);
  if (pos.empty() || neg.empty()) {
    throw Error("class_balance: only one class present (" + std::to_string(pos.size()) + " positive, " +
                std::to_string(neg.size()) + " negative); labeling is degenerate");
  }
  const auto& minority = pos.size() < neg.size() ? pos : neg;
  std::size_t deficit = std::max(pos.size(), neg.size()) - minority.size();
  LabeledAllocationSet out = set;
  Rng rng(seed);
  out.allocations.reserve((set.size() + deficit) * set.width());
  for (std::size_t d = 0; d < deficit; ++d) {
    std::size_t k = minority[rng.index(minority.size())];
    auto z = set.allocation(k);
    out.allocations.insert(out.allocations.end(), z.begin(), z.end());
    out.scores.push_back(set.scores[k]);
    out.labels.push_back(set.labels[k]);
  }
  return out;
}

// ---------------------------------------------------------------------------
// CSV: allocations `sample,agent,item,z` plus sidecar `sample,score,label`

inline void write_allocations_csv(std::ostream& out, const LabeledAllocationSet& set) {
  out << "sample,agent,item,z\n";
  for (std::size_t s = 0; s < set.size(); ++s)
    for (std::size_t i = 0; i < set.n_agents; ++i)
      for (std::size_t j = 0; j < set.m_items; ++j)
        out << s << ',' << i << ',' << j << ',' << csv::format_double(set.allocations[s * set.width() + i * set.m_items + j])
            << '\n';
}

inline void write_labels_csv(std::ostream& out, const LabeledAllocationSet& set) {
  out << "sample,score,label\n";
  for (std::size_t s = 0; s < set.size(); ++s)
    out << s << ',' << csv::format_double(set.scores[s]) << ',' << set.labels[s] << '\n';
}

/// Reads allocations only; scores zero and labels zero until a sidecar is read.
inline LabeledAllocationSet read_allocations_csv(std::istream& in) {
  auto grid = csv::read_grid(in, "sample,agent,item,z", "allocations");
  LabeledAllocationSet set;
  set.n_agents = grid.agents;
  set.m_items = grid.items;
  set.allocations = std::move(grid.values);
  set.scores.assign(grid.samples, 0.0);
  set.labels.assign(grid.samples, 0);
  set.provenance = "external";
  return set;
}

inline void read_labels_csv(std::istream& in, LabeledAllocationSet& set) {
  csv::Reader reader(in, "sample,score,label", "labels");
  std::vector<std::string> row;
  std::vector<bool> seen(set.size(), false);
  while (reader.next(row)) {
    auto s = csv::parse_index(row[0], "labels", reader.line());
    if (s >= set.size()) csv::fail("labels", reader.line(), "sample " + row[0] + " has no allocation");
    if (seen[s]) csv::fail("labels", reader.line(), "duplicate sample " + row[0]);
    seen[s] = true;
    set.scores[s] = csv::parse_double(row[1], "labels", reader.line());
    if (row[2] != "0" && row[2] != "1") csv::fail("labels", reader.line(), "label must be 0 or 1, got '" + row[2] + "'");
    set.labels[s] = row[2] == "1" ? 1 : 0;
  }
  if (std::find(seen.begin(), seen.end(), false) != seen.end()) {
    throw Error("labels CSV: some allocations have no label row");
  }
}

}  // namespace prefnet
