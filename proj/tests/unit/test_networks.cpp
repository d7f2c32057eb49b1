#include <gtest/gtest.h>

#include <cmath>

#include "prefnet/networks.hpp"
#include "support/gradcheck.hpp"

using namespace prefnet;
using prefnet::ad::Tensor;

namespace {

RegretNetModel small_model(DemandKind demand, std::uint64_t seed, std::size_t n = 2, std::size_t m = 3) {
  return init_regretnet({n, m, demand}, {2, 16, Activation::Tanh}, seed);
}

BidBatch bids_for(const RegretNetModel& model, std::size_t count, std::uint64_t seed) {
  return sample_bids(model.spec, ValuationModel::uniform(model.spec), count, seed);
}

// Rebuilds a model whose parameters are the given tensors, in parameters() order.
RegretNetModel with_parameters(const RegretNetModel& base, const std::vector<Tensor>& p) {
  RegretNetModel m = base;
  std::size_t k = 0;
  auto take = [&](Linear& l) {
    l.weight = p[k++];
    l.bias = p[k++];
  };
  for (auto& l : m.alloc_trunk) take(l);
  take(m.alloc_head);
  if (m.spec.demand == DemandKind::UnitDemand) take(m.alloc_head_cols);
  for (auto& l : m.pay_trunk) take(l);
  take(m.pay_head);
  return m;
}

}  // namespace

class NetworkDemand : public ::testing::TestWithParam<DemandKind> {};

TEST_P(NetworkDemand, AllocationsFeasibleAndPaymentsIndividuallyRational) {
  ad::NoGradScope off;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    auto model = small_model(GetParam(), seed);
    auto bids = bids_for(model, 500, 100 + seed);
    auto out = run_mechanism(model, bids.values);
    EXPECT_LE(check_feasibility(out.allocation, GetParam()), 1e-6);
    Tensor u = utility(bids.values, out.allocation, out.payments);
    for (double x : u.data()) EXPECT_GE(x, -1e-9);
    for (double p : out.payments.data()) EXPECT_GE(p, 0.0);
  }
}

TEST_P(NetworkDemand, MeanPaymentGradientMatchesFiniteDifferences) {
  auto base = init_regretnet({2, 2, GetParam()}, {1, 4, Activation::Tanh}, 8);
  auto bids = bids_for(base, 6, 9).values;
  Rng rng(10);
  double err = gradcheck::check(
      [&](const std::vector<Tensor>& p) {
        auto out = run_mechanism(with_parameters(base, p), bids);
        return ad::mean_all(out.payments);
      },
      base.clone().parameters(), rng);
  EXPECT_LT(err, 1e-4);
}

INSTANTIATE_TEST_SUITE_P(Demand, NetworkDemand, ::testing::Values(DemandKind::Additive, DemandKind::UnitDemand),
                         [](const auto& info) { return to_string(info.param); });

TEST(RegretNet, ZeroHeadGivesUniformAdditiveAllocation) {
  auto model = small_model(DemandKind::Additive, 1);
  model.alloc_head.weight = Tensor::zeros(model.alloc_head.weight.shape());
  model.alloc_head.bias = Tensor::zeros(model.alloc_head.bias.shape());
  Tensor z = alloc_forward(model, bids_for(model, 4, 2).values);
  for (double x : z.data()) EXPECT_NEAR(x, 1.0 / 3.0, 1e-15);
}

TEST(RegretNet, PaymentIsFractionOfBidValue) {
  auto model = small_model(DemandKind::Additive, 1, 1, 2);
  model.pay_head.weight = Tensor::zeros(model.pay_head.weight.shape());
  model.pay_head.bias = Tensor::zeros(model.pay_head.bias.shape());  // sigmoid(0) = 0.5
  Tensor bids({1, 1, 2}, {1.0, 1.0});
  EXPECT_NEAR(payment_forward(model, bids, Tensor({1, 1, 2}, {0.5, 0.5})).item(), 0.5, 1e-15);
  EXPECT_EQ(payment_forward(model, bids, Tensor::zeros({1, 1, 2})).item(), 0.0);
}

TEST(RegretNet, InitIsSeeded) {
  auto a = small_model(DemandKind::UnitDemand, 4), b = small_model(DemandKind::UnitDemand, 4);
  auto c = small_model(DemandKind::UnitDemand, 5);
  auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
  ASSERT_EQ(pa.size(), pb.size());
  for (std::size_t k = 0; k < pa.size(); ++k) EXPECT_EQ(pa[k].values(), pb[k].values());
  EXPECT_NE(pa[0].values(), pc[0].values());
  Tensor z = alloc_forward(a, bids_for(a, 16, 1).values);
  for (double x : z.data()) EXPECT_TRUE(std::isfinite(x));
}

TEST(RegretNet, CloneAndFrozenCopiesAreIndependent) {
  auto model = small_model(DemandKind::Additive, 2);
  auto copy = model.clone();
  auto frozen = model.frozen();
  copy.parameters()[0].mutable_data()[0] += 1.0;
  EXPECT_NE(copy.parameters()[0][0], model.parameters()[0][0]);
  for (const auto& p : frozen.parameters()) EXPECT_FALSE(p.requires_grad());
  for (const auto& p : model.parameters()) EXPECT_TRUE(p.requires_grad());
}

TEST(RegretNet, RejectsMismatchedBids) {
  auto model = small_model(DemandKind::Additive, 2);
  EXPECT_THROW(alloc_forward(model, Tensor::ones({4, 3, 3})), Error);
  EXPECT_THROW(payment_forward(model, Tensor::ones({4, 2, 3}), Tensor::ones({4, 2, 2})), Error);
}

TEST(PreferenceMlp, ScoresInOpenUnitInterval) {
  auto mlp = init_mlp(4, 3, 16);
  Rng rng(1);
  Tensor z = gradcheck::uniform(rng, {64, 2, 2}, 0.0, 1.0);
  for (double s : mlp_forward(mlp, z, true).data()) {
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  for (double s : mlp_score(mlp, z).data()) {
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
  }
  EXPECT_THROW(mlp_score(mlp, Tensor::ones({2, 5})), Error);
}

TEST(PreferenceMlp, EvalModeIsPureAndLeavesStatsAlone) {
  auto mlp = init_mlp(4, 3, 16);
  Rng rng(2);
  mlp_forward(mlp, gradcheck::uniform(rng, {32, 4}, 0.0, 1.0), true);  // move the running stats
  auto mean = mlp.bn1.running_mean;
  Tensor row = gradcheck::uniform(rng, {1, 4}, 0.0, 1.0);
  Tensor twice({2, 4}, {row[0], row[1], row[2], row[3], row[0], row[1], row[2], row[3]});
  Tensor s = mlp_score(mlp, twice);
  EXPECT_EQ(s[0], s[1]);
  EXPECT_EQ(mlp.bn1.running_mean, mean);
}
