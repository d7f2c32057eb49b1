#pragma once

// Brute-force reference loops. They share only the seeded draw protocol with
// the library (Rng::index for comparison and resampling draws); every score,
// count and comparison is recomputed independently.

#include <cmath>
#include <limits>
#include <vector>

#include "prefnet/preference.hpp"
#include "prefnet/trainer.hpp"

namespace oracle {

using namespace prefnet;

inline double z_at(const std::vector<double>& z, std::size_t s, std::size_t i, std::size_t j, std::size_t n,
                   std::size_t m) {
  return z[(s * n + i) * m + j];
}

inline double score(const PreferenceFunction& fn, const std::vector<double>& z, std::size_t s, std::size_t n,
                    std::size_t m) {
  if (fn.kind == PreferenceKind::Tvf) {
    double total = 0.0;
    for (std::size_t j = 0; j < m; ++j)
      for (std::size_t k = j + 1; k < m; ++k) {
        double dist = 0.0;
        for (std::size_t i = 0; i < n; ++i) dist += std::fabs(z_at(z, s, i, j, n, m) - z_at(z, s, i, k, n, m));
        if (dist - fn.tvf_distance > 0.0) total += dist - fn.tvf_distance;
      }
    return -total;
  }
  if (fn.kind == PreferenceKind::Entropy) {
    double h = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double row = 0.0;
      for (std::size_t j = 0; j < m; ++j) row += z_at(z, s, i, j, n, m);
      if (row <= 0.0) continue;
      for (std::size_t j = 0; j < m; ++j) {
        double p = z_at(z, s, i, j, n, m) / row;
        if (p > 0.0) h -= p * std::log(p);
      }
    }
    return h;
  }
  double t = fn.quota_threshold ? *fn.quota_threshold : 0.8 / static_cast<double>(n);
  double worst = std::numeric_limits<double>::infinity();
  for (std::size_t j = 0; j < m; ++j) {
    double col = 0.0, low = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < n; ++i) {
      col += z_at(z, s, i, j, n, m);
      low = std::fmin(low, z_at(z, s, i, j, n, m));
    }
    worst = std::fmin(worst, col > 0.0 ? low / col : 0.0);
  }
  return worst - t;
}

/// Labels by plurality: comparison k' is drawn by rejection until n distinct
/// indices other than k have been collected; label 1 iff wins > n / 2.
inline std::vector<int> labels(const std::vector<double>& z, std::size_t count, std::size_t n, std::size_t m,
                               const PreferenceFunction& fn, std::size_t comparisons, std::uint64_t seed) {
  std::vector<double> s(count);
  for (std::size_t k = 0; k < count; ++k) s[k] = score(fn, z, k, n, m);
  Rng rng(seed);
  std::vector<int> out(count);
  for (std::size_t k = 0; k < count; ++k) {
    std::vector<bool> used(count, false);
    used[k] = true;
    std::size_t drawn = 0, wins = 0;
    while (drawn < comparisons) {
      std::size_t c = rng.index(count);
      if (used[c]) continue;
      used[c] = true;
      ++drawn;
      if (s[k] > s[c]) ++wins;
    }
    out[k] = wins * 2 > comparisons ? 1 : 0;
  }
  return out;
}

inline double pca_known(const std::vector<double>& z, std::size_t count, std::size_t n, std::size_t m,
                        const PreferenceFunction& fn, double threshold) {
  std::size_t good = 0;
  for (std::size_t k = 0; k < count; ++k)
    if (!(score(fn, z, k, n, m) < threshold)) ++good;
  return static_cast<double>(good) / static_cast<double>(count);
}

inline double pca_nearest(const std::vector<double>& queries, std::size_t count, const std::vector<double>& truth,
                          const std::vector<int>& truth_labels, std::size_t width) {
  std::size_t good = 0;
  for (std::size_t q = 0; q < count; ++q) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t t = 0; t < truth_labels.size(); ++t) {
      double d = 0.0;
      for (std::size_t k = 0; k < width; ++k) d += std::pow(queries[q * width + k] - truth[t * width + k], 2);
      if (d < best_d) {
        best_d = d;
        best = t;
      }
    }
    good += truth_labels[best] == 1 ? 1 : 0;
  }
  return static_cast<double>(good) / static_cast<double>(count);
}

/// Minority over-sampling: the originals first, then `deficit` draws of
/// minority[rng.index(|minority|)].
inline std::vector<std::size_t> balance_indices(const std::vector<int>& labels, std::uint64_t seed) {
  std::vector<std::size_t> ones, zeros, out;
  for (std::size_t k = 0; k < labels.size(); ++k) {
    out.push_back(k);
    if (labels[k] == 1) ones.push_back(k);
    else zeros.push_back(k);
  }
  const std::vector<std::size_t>& minority = ones.size() < zeros.size() ? ones : zeros;
  std::size_t target = ones.size() < zeros.size() ? zeros.size() : ones.size();
  Rng rng(seed);
  for (std::size_t c = minority.size(); c < target; ++c) out.push_back(minority[rng.index(minority.size())]);
  return out;
}

/// Selection: argmax (first on ties) of alpha*pca + beta*pay/max_pay +
/// gamma*(1 - rgt/max_rgt).
inline std::size_t select(const std::vector<double>& pca, const std::vector<double>& pay,
                          const std::vector<double>& rgt, double alpha, double beta, double gamma) {
  double max_pay = 0.0, max_rgt = 0.0;
  for (std::size_t k = 0; k < pay.size(); ++k) {
    if (pay[k] > max_pay) max_pay = pay[k];
    if (rgt[k] > max_rgt) max_rgt = rgt[k];
  }
  std::size_t best = 0;
  double best_score = -std::numeric_limits<double>::infinity();
  for (std::size_t k = 0; k < pca.size(); ++k) {
    double p = max_pay > 0.0 ? pay[k] / max_pay : 0.0;
    double r = max_rgt > 0.0 ? 1.0 - rgt[k] / max_rgt : 1.0;
    double s = alpha * pca[k] + beta * p + gamma * r;
    if (s > best_score) {
      best_score = s;
      best = k;
    }
  }
  return best;
}

}  // namespace oracle
