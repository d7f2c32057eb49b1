#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <istream>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "prefnet/csv.hpp"
#include "prefnet/ops.hpp"
#include "prefnet/random.hpp"
#include "prefnet/tensor.hpp"

namespace prefnet {

using ad::Tensor;

enum class DemandKind { Additive, UnitDemand };

inline std::string to_string(DemandKind kind) {
  return kind == DemandKind::Additive ? "additive" : "unit_demand";
}

inline DemandKind parse_demand_kind(const std::string& s) {
  if (s == "additive" || s == "a") return DemandKind::Additive;
  if (s == "unit_demand" || s == "unit" || s == "u") return DemandKind::UnitDemand;
  throw Error("unknown demand kind '" + s + "' (expected additive or unit_demand)");
}

struct AuctionSpec {
  std::size_t n_agents = 2;
  std::size_t m_items = 2;
  DemandKind demand = DemandKind::Additive;

  void validate() const {
    if (n_agents < 1 || m_items < 1) throw Error("AuctionSpec: need at least one agent and one item");
  }
  std::size_t width() const { return n_agents * m_items; }
  /// Table-style label such as "2x2 a".
  std::string label() const {
    return std::to_string(n_agents) + "x" + std::to_string(m_items) +
           (demand == DemandKind::Additive ? " a" : " u");
  }
  bool operator==(const AuctionSpec&) const = default;
};

/// Independent uniform valuations per (agent, item); each agent's support is
/// multiplied by its scale factor.
struct ValuationModel {
  struct Range {
    double lower = 0.0;
    double upper = 1.0;
    bool operator==(const Range&) const = default;
  };
  std::vector<Range> ranges;   // n_agents * m_items, row-major
  std::vector<double> scales;  // n_agents

  static ValuationModel uniform(const AuctionSpec& spec, double lower = 0.0, double upper = 1.0,
                                std::vector<double> scales = {}) {
    ValuationModel m;
    m.ranges.assign(spec.width(), Range{lower, upper});
    m.scales = scales.empty() ? std::vector<double>(spec.n_agents, 1.0) : std::move(scales);
    m.validate(spec);
    return m;
  }

  void validate(const AuctionSpec& spec) const {
    if (ranges.size() != spec.width() || scales.size() != spec.n_agents) {
      throw Error("ValuationModel: descriptor sizes do not match the auction " + spec.label());
    }
    for (const auto& r : ranges) {
      if (!(r.lower < r.upper)) throw Error("ValuationModel: need lower < upper");
    }
    for (double s : scales) {
      if (!(s > 0.0)) throw Error("ValuationModel: scale factors must be positive");
    }
  }

  double support_lower(const AuctionSpec& spec, std::size_t agent, std::size_t item) const {
    return ranges[agent * spec.m_items + item].lower * scales[agent];
  }
  double support_upper(const AuctionSpec& spec, std::size_t agent, std::size_t item) const {
    return ranges[agent * spec.m_items + item].upper * scales[agent];
  }
  bool operator==(const ValuationModel&) const = default;
};

/// Sampled valuation profiles, shape [L, n_agents, m_items].
struct BidBatch {
  AuctionSpec spec;
  Tensor values;
  std::uint64_t seed = 0;

  std::size_t size() const { return values.dim(0); }
};

inline BidBatch sample_bids(const AuctionSpec& spec, const ValuationModel& model, std::size_t count,
                            std::uint64_t seed) {
  spec.validate();
  model.validate(spec);
  if (count < 1) throw Error("sample_bids: count must be at least 1");
  Rng rng(seed);
  std::vector<double> v(count * spec.width());
  for (std::size_t s = 0; s < count; ++s)
    for (std::size_t i = 0; i < spec.n_agents; ++i)
      for (std::size_t j = 0; j < spec.m_items; ++j)
        v[(s * spec.n_agents + i) * spec.m_items + j] =
            rng.uniform(model.support_lower(spec, i, j), model.support_upper(spec, i, j));
  return BidBatch{spec, Tensor({count, spec.n_agents, spec.m_items}, std::move(v)), seed};
}

namespace detail {
inline void expect_shape(const char* op, const Tensor& t, const ad::Shape& shape) {
  if (t.shape() != shape) {
    throw Error(std::string(op) + ": expected shape " + ad::to_string(shape) + ", got " +
                ad::to_string(t.shape()));
  }
}
}  // namespace detail

/// u_i = sum_j v_ij z_ij - p_i for every profile: values and allocation
/// [B, n, m], payments [B, n] -> [B, n]. Differentiable.
inline Tensor utility(const Tensor& values, const Tensor& allocation, const Tensor& payments) {
  if (values.rank() != 3) throw Error("utility: values must be [B, n, m], got " + ad::to_string(values.shape()));
  detail::expect_shape("utility", allocation, values.shape());
  detail::expect_shape("utility", payments, {values.dim(0), values.dim(1)});
  return ad::sub(ad::sum(ad::mul(values, allocation), 2), payments);
}

/// Mean over the batch of total payments; payments [B, n]. Differentiable.
inline Tensor revenue(const Tensor& payments) {
  if (payments.rank() != 2 || payments.size() == 0) {
    throw Error("revenue: expected non-empty [B, n] payments, got " + ad::to_string(payments.shape()));
  }
  return ad::mean_all(ad::sum(payments, 1));
}

/// Largest constraint violation over an allocation [n, m] or a batch
/// [B, n, m]: entries outside [0, 1], and item supply (each column summed
/// over agents) above 1. Unit-demand additionally caps each agent's row sum
/// at 1.
inline double check_feasibility(const Tensor& allocation, DemandKind demand) {
  if (allocation.rank() != 2 && allocation.rank() != 3) {
    throw Error("check_feasibility: expected [n, m] or [B, n, m], got " + ad::to_string(allocation.shape()));
  }
  std::size_t batch = allocation.rank() == 3 ? allocation.dim(0) : 1;
  std::size_t n = allocation.dim(allocation.rank() - 2);
  std::size_t m = allocation.dim(allocation.rank() - 1);
  const double* z = allocation.data().data();
  double worst = 0.0;
  for (std::size_t b = 0; b < batch; ++b) {
    const double* zb = z + b * n * m;
    for (std::size_t k = 0; k < n * m; ++k) {
      worst = std::max(worst, -zb[k]);
      worst = std::max(worst, zb[k] - 1.0);
    }
    for (std::size_t j = 0; j < m; ++j) {
      double col = 0.0;
      for (std::size_t i = 0; i < n; ++i) col += zb[i * m + j];
      worst = std::max(worst, col - 1.0);
    }
    if (demand == DemandKind::UnitDemand) {
      for (std::size_t i = 0; i < n; ++i) {
        double row = 0.0;
        for (std::size_t j = 0; j < m; ++j) row += zb[i * m + j];
        worst = std::max(worst, row - 1.0);
      }
    }
  }
  return worst;
}

struct BaselineRevenue {
  double mean = 0.0;
  double std = 0.0;
};

/// Independent second-price auction with a reserve for each item: the
/// highest bidder wins iff their bid meets the reserve and pays
/// max(second-highest bid, reserve). Ties go to the lowest agent index.
inline BaselineRevenue itemwise_myerson_revenue(const BidBatch& bids, const std::vector<double>& reserves) {
  const auto& spec = bids.spec;
  if (spec.demand != DemandKind::Additive) {
    throw Error("itemwise_myerson_revenue: baseline is defined for additive valuations only");
  }
  if (reserves.size() != spec.m_items) {
    throw Error("itemwise_myerson_revenue: need one reserve per item");
  }
  std::size_t L = bids.size();
  const double* v = bids.values.data().data();
  double total = 0.0, total_sq = 0.0;
  for (std::size_t s = 0; s < L; ++s) {
    double rev = 0.0;
    for (std::size_t j = 0; j < spec.m_items; ++j) {
      double best = -1.0, second = 0.0;
      for (std::size_t i = 0; i < spec.n_agents; ++i) {
        double b = v[(s * spec.n_agents + i) * spec.m_items + j];
        if (b > best) {
          second = std::max(second, best);
          best = b;
        } else {
          second = std::max(second, b);
        }
      }
      if (best >= reserves[j]) rev += std::max(second, reserves[j]);
    }
    total += rev;
    total_sq += rev * rev;
  }
  double mean = total / static_cast<double>(L);
  double var = std::max(0.0, total_sq / static_cast<double>(L) - mean * mean);
  return {mean, std::sqrt(var)};
}

/// Allocations [L, n, m] of the same itemwise auction (0/1 entries).
inline Tensor itemwise_myerson_allocation(const BidBatch& bids, const std::vector<double>& reserves) {
  const auto& spec = bids.spec;
  if (reserves.size() != spec.m_items) throw Error("itemwise_myerson_allocation: need one reserve per item");
  std::size_t L = bids.size(), n = spec.n_agents, m = spec.m_items;
  const double* v = bids.values.data().data();
  std::vector<double> z(L * n * m, 0.0);
  for (std::size_t s = 0; s < L; ++s)
    for (std::size_t j = 0; j < m; ++j) {
      std::size_t winner = 0;
      for (std::size_t i = 1; i < n; ++i)
        if (v[(s * n + i) * m + j] > v[(s * n + winner) * m + j]) winner = i;
      if (v[(s * n + winner) * m + j] >= reserves[j]) z[(s * n + winner) * m + j] = 1.0;
    }
  return Tensor({L, n, m}, std::move(z));
}

/// Monopoly reserve for U[lo, hi] values: the zero of the virtual value
/// 2v - hi, clipped to the support. Uses agent 0's range for each item.
inline std::vector<double> myerson_reserves(const AuctionSpec& spec, const ValuationModel& model) {
  std::vector<double> r(spec.m_items);
  for (std::size_t j = 0; j < spec.m_items; ++j) {
    r[j] = std::max(model.support_lower(spec, 0, j), 0.5 * model.support_upper(spec, 0, j));
  }
  return r;
}

// ---------------------------------------------------------------------------
// CSV: sample,agent,item,value

inline void write_bids_csv(std::ostream& out, const BidBatch& bids) {
  const auto& spec = bids.spec;
  out << "sample,agent,item,value\n";
  const double* v = bids.values.data().data();
  for (std::size_t s = 0; s < bids.size(); ++s)
    for (std::size_t i = 0; i < spec.n_agents; ++i)
      for (std::size_t j = 0; j < spec.m_items; ++j)
        out << s << ',' << i << ',' << j << ',' << csv::format_double(v[(s * spec.n_agents + i) * spec.m_items + j])
            << '\n';
}

/// Reads a bid CSV; dimensions are inferred and must form a complete grid.
inline BidBatch read_bids_csv(std::istream& in, DemandKind demand = DemandKind::Additive) {
  auto grid = csv::read_grid(in, "sample,agent,item,value", "bids");
  BidBatch bids;
  bids.spec = AuctionSpec{grid.agents, grid.items, demand};
  bids.values = Tensor({grid.samples, grid.agents, grid.items}, std::move(grid.values));
  return bids;
}

}  // namespace prefnet
