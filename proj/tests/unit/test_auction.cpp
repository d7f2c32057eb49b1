#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "prefnet/auction.hpp"

using namespace prefnet;
using prefnet::ad::Tensor;

TEST(SampleBids, StaysInsideScaledSupport) {
  AuctionSpec spec{3, 2, DemandKind::Additive};
  auto model = ValuationModel::uniform(spec, 0.0, 1.0, {2.0, 1.0, 1.0});
  auto bids = sample_bids(spec, model, 2000, 5);
  double agent0_max = 0.0;
  for (std::size_t s = 0; s < bids.size(); ++s)
    for (std::size_t i = 0; i < 3; ++i)
      for (std::size_t j = 0; j < 2; ++j) {
        double v = bids.values[(s * 3 + i) * 2 + j];
        ASSERT_GE(v, 0.0);
        ASSERT_LE(v, i == 0 ? 2.0 : 1.0);
        if (i == 0) agent0_max = std::max(agent0_max, v);
      }
  EXPECT_GT(agent0_max, 1.5);
}

TEST(SampleBids, DeterministicUnderSeed) {
  AuctionSpec spec;
  auto model = ValuationModel::uniform(spec);
  EXPECT_EQ(sample_bids(spec, model, 50, 9).values.values(), sample_bids(spec, model, 50, 9).values.values());
  EXPECT_NE(sample_bids(spec, model, 50, 9).values.values(), sample_bids(spec, model, 50, 10).values.values());
}

TEST(SampleBids, RejectsBadInput) {
  AuctionSpec spec;
  EXPECT_THROW(sample_bids(spec, ValuationModel::uniform(spec), 0, 1), Error);
  EXPECT_THROW(ValuationModel::uniform(spec, 1.0, 1.0), Error);
  EXPECT_THROW(ValuationModel::uniform(spec, 0.0, 1.0, {1.0, -1.0}), Error);
  EXPECT_THROW((AuctionSpec{0, 2}.validate()), Error);
}

TEST(Utility, HandExamples) {
  EXPECT_EQ(utility(Tensor({1, 1, 2}, {1, 2}), Tensor({1, 1, 2}, {0.5, 0.5}), Tensor({1, 1}, {1})).values(),
            (std::vector<double>{0.5}));
  EXPECT_EQ(utility(Tensor::ones({1, 2, 2}), Tensor::zeros({1, 2, 2}), Tensor::zeros({1, 2})).values(),
            (std::vector<double>{0, 0}));
  EXPECT_THROW(utility(Tensor::ones({1, 2, 2}), Tensor::ones({1, 2, 3}), Tensor::zeros({1, 2})), Error);
}

TEST(Utility, MatchesScalarLoop) {
  Rng rng(3);
  const std::size_t B = 20, n = 3, m = 4;
  std::vector<double> v(B * n * m), z(B * n * m), p(B * n);
  for (auto& x : v) x = rng.uniform();
  for (auto& x : z) x = rng.uniform();
  for (auto& x : p) x = rng.uniform();
  Tensor u = utility(Tensor({B, n, m}, v), Tensor({B, n, m}, z), Tensor({B, n}, p));
  for (std::size_t b = 0; b < B; ++b)
    for (std::size_t i = 0; i < n; ++i) {
      double ref = -p[b * n + i];
      for (std::size_t j = 0; j < m; ++j) ref += v[(b * n + i) * m + j] * z[(b * n + i) * m + j];
      EXPECT_NEAR(u[b * n + i], ref, 1e-12);
    }
}

TEST(Utility, LinearInPayments) {
  Rng rng(4);
  std::vector<double> v(12), z(12), p(6);
  for (auto& x : v) x = rng.uniform();
  for (auto& x : z) x = rng.uniform();
  for (auto& x : p) x = rng.uniform();
  Tensor base = utility(Tensor({2, 3, 2}, v), Tensor({2, 3, 2}, z), Tensor({2, 3}, p));
  for (auto& x : p) x += 0.25;
  Tensor shifted = utility(Tensor({2, 3, 2}, v), Tensor({2, 3, 2}, z), Tensor({2, 3}, p));
  for (std::size_t k = 0; k < 6; ++k) EXPECT_NEAR(shifted[k], base[k] - 0.25, 1e-15);
}

TEST(Revenue, MeanOfTotals) {
  EXPECT_EQ(revenue(Tensor::zeros({3, 2})).item(), 0.0);
  EXPECT_EQ(revenue(Tensor({2, 2}, {0.5, 0.5, 1, 2})).item(), 2.0);
  EXPECT_THROW(revenue(Tensor::zeros({0, 2})), Error);
}

TEST(Revenue, InvariantUnderAgentPermutation) {
  Tensor a({2, 3}, {0.1, 0.2, 0.3, 0.4, 0.5, 0.6});
  Tensor b({2, 3}, {0.3, 0.1, 0.2, 0.6, 0.4, 0.5});
  EXPECT_DOUBLE_EQ(revenue(a).item(), revenue(b).item());
}

TEST(Feasibility, HandExamples) {
  EXPECT_EQ(check_feasibility(Tensor({2, 2}, {1, 0, 0, 1}), DemandKind::UnitDemand), 0.0);
  // two agents each at 0.8 of the same item oversell it by 0.6
  EXPECT_NEAR(check_feasibility(Tensor({2, 2}, {0.8, 0, 0.8, 0}), DemandKind::Additive), 0.6, 1e-15);
  // an additive agent may win several items
  EXPECT_EQ(check_feasibility(Tensor({2, 2}, {0.8, 0.8, 0, 0}), DemandKind::Additive), 0.0);
  EXPECT_NEAR(check_feasibility(Tensor({2, 2}, {0.8, 0.8, 0, 0}), DemandKind::UnitDemand), 0.6, 1e-15);
  EXPECT_NEAR(check_feasibility(Tensor({1, 2}, {-0.1, 0.5}), DemandKind::Additive), 0.1, 1e-15);
}

TEST(Myerson, HandExamples) {
  AuctionSpec spec{2, 1};
  BidBatch one{spec, Tensor({1, 2, 1}, {0.9, 0.2})};
  EXPECT_DOUBLE_EQ(itemwise_myerson_revenue(one, {0.5}).mean, 0.5);
  BidBatch low{spec, Tensor({1, 2, 1}, {0.3, 0.2})};
  EXPECT_EQ(itemwise_myerson_revenue(low, {0.5}).mean, 0.0);
  EXPECT_EQ(itemwise_myerson_allocation(one, {0.5}).values(), (std::vector<double>{1, 0}));
  EXPECT_EQ(itemwise_myerson_allocation(low, {0.5}).values(), (std::vector<double>{0, 0}));
  EXPECT_THROW(itemwise_myerson_revenue(one, {0.5, 0.5}), Error);
}

TEST(Myerson, ZeroReserveIsSecondPriceOnRationalGrid) {
  // every profile of 3 bidders x 2 items with bids in {0, 1/4, ..., 1}
  AuctionSpec spec{3, 2};
  std::vector<double> v;
  double second_sum = 0.0;
  std::size_t L = 0;
  for (int code = 0; code < 15625; ++code) {
    int c = code;
    double bids[6];
    for (double& b : bids) {
      b = (c % 5) / 4.0;
      c /= 5;
    }
    v.insert(v.end(), bids, bids + 6);
    for (int j = 0; j < 2; ++j) {
      double col[3] = {bids[j], bids[2 + j], bids[4 + j]};
      std::sort(col, col + 3);
      second_sum += col[1];
    }
    ++L;
  }
  BidBatch batch{spec, Tensor({L, 3, 2}, v)};
  EXPECT_NEAR(itemwise_myerson_revenue(batch, {0.0, 0.0}).mean, second_sum / static_cast<double>(L), 1e-12);
}

TEST(Myerson, MonteCarloMatchesClosedForm) {
  // E[rev] = 5/12 for two U[0,1] bidders with reserve 1/2
  AuctionSpec spec{2, 1};
  auto bids = sample_bids(spec, ValuationModel::uniform(spec), 200000, 21);
  EXPECT_NEAR(itemwise_myerson_revenue(bids, {0.5}).mean, 5.0 / 12.0, 0.005);
  EXPECT_EQ(myerson_reserves(spec, ValuationModel::uniform(spec)), (std::vector<double>{0.5}));
}

TEST(BidsCsv, RoundTrip) {
  AuctionSpec spec{2, 3};
  auto bids = sample_bids(spec, ValuationModel::uniform(spec), 4, 1);
  std::stringstream ss;
  write_bids_csv(ss, bids);
  auto back = read_bids_csv(ss);
  EXPECT_EQ(back.spec, spec);
  EXPECT_EQ(back.values.values(), bids.values.values());
}

TEST(BidsCsv, RejectsIncompleteGrid) {
  std::stringstream ss("sample,agent,item,value\n0,0,0,0.5\n0,1,1,0.5\n");
  EXPECT_THROW(read_bids_csv(ss), Error);
}
