#include <gtest/gtest.h>

#include <cmath>
#include <numeric>
#include <random>

#include "protoclip/error.hpp"
#include "protoclip/losses.hpp"

using namespace protoclip;

namespace {

Var c(Tensor t) { return Var::constant(std::move(t)); }
Var tau(double t) { return Var::constant(Tensor::scalar(t)); }

Tensor random_unit_rows(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(n, d);
  for (double& v : t.data()) v = normal(rng);
  return normalized_rows(t);
}

}  // namespace

TEST(InfoNce, SingleElementIsZero) {
  EXPECT_NEAR(info_nce(c(Tensor::from_rows({{1, 0}})), c(Tensor::from_rows({{0.6, 0.8}})), tau(0.07)).value().item(),
              0.0, 1e-15);
}

TEST(InfoNce, ScalarEvaluations) {
  const Tensor eye = Tensor::identity(2);
  EXPECT_NEAR(info_nce(c(eye), c(eye), tau(1.0)).value().item(), std::log1p(std::exp(-1.0)), 1e-12);
  EXPECT_NEAR(info_nce(c(eye), c(eye), tau(0.5)).value().item(), std::log1p(std::exp(-2.0)), 1e-12);
  EXPECT_NEAR(std::log1p(std::exp(-1.0)), 0.31326, 1e-5);
  EXPECT_NEAR(std::log1p(std::exp(-2.0)), 0.12693, 1e-5);
}

TEST(InfoNce, BatchMismatch) {
  EXPECT_THROW(info_nce(c(Tensor(2, 2, 0.5)), c(Tensor(3, 2, 0.5)), tau(1.0)), ContractError);
}

TEST(InfoNce, RotationAndShuffleInvariance) {
  std::mt19937_64 rng(11);
  const Tensor zi = random_unit_rows(6, 2, rng);
  const Tensor zt = random_unit_rows(6, 2, rng);
  const double base = info_nce(c(zi), c(zt), tau(0.2)).value().item();

  const double angle = 0.7;
  const Tensor rot = Tensor::from_rows({{std::cos(angle), -std::sin(angle)}, {std::sin(angle), std::cos(angle)}});
  const Tensor zi_r = matmul(c(zi), c(rot)).value();
  const Tensor zt_r = matmul(c(zt), c(rot)).value();
  EXPECT_NEAR(info_nce(c(zi_r), c(zt_r), tau(0.2)).value().item(), base, 1e-9);

  std::vector<std::size_t> perm{3, 1, 5, 0, 4, 2};
  EXPECT_NEAR(info_nce(c(zi.gather_rows(perm)), c(zt.gather_rows(perm)), tau(0.2)).value().item(), base, 1e-12);
}

TEST(ProtoScores, Examples) {
  const Tensor p = proto_scores(c(Tensor::from_rows({{1, 0}})), c(Tensor::identity(2)), tau(1.0)).value();
  EXPECT_NEAR(p(0, 0), 0.7311, 1e-4);
  EXPECT_NEAR(p(0, 1), 0.2689, 1e-4);

  const Tensor protos = Tensor::from_rows({{1, 0, 0}, {0, 1, 0}, {0, 0, 1}, {0, 0, -1}});
  const Tensor u = proto_scores(c(Tensor::from_rows({{0.6, 0.8, 0}})), c(protos.gather_rows(std::vector<std::size_t>{2, 3})), tau(0.3)).value();
  EXPECT_DOUBLE_EQ(u(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(u(0, 1), 0.5);

  const Tensor hard = proto_scores(c(Tensor::from_rows({{1, 0}})), c(Tensor::identity(2)), tau(0.01)).value();
  EXPECT_NEAR(hard(0, 0), 1.0, 1e-12);
  EXPECT_NEAR(hard(0, 1), 0.0, 1e-12);

  EXPECT_THROW(proto_scores(c(Tensor(1, 3, 0.5)), c(Tensor::identity(2)), tau(1.0)), DimensionError);
}

TEST(ProtoScores, NoGradientToPrototypes) {
  const Var h = Var::parameter(normalized_rows(Tensor::from_rows({{1, 2}, {-1, 0.5}})));
  const Var protos = Var::parameter(Tensor::identity(2));
  const Var p = proto_scores(h, protos, tau(0.5));
  const Tensor y = Tensor::from_rows({{1, 0}, {0, 1}});
  backward(proto_loss(p, y, p, y));
  EXPECT_EQ(protos.grad(), Tensor(2, 2));
  double norm = 0.0;
  for (double v : h.grad().data()) norm += v * v;
  EXPECT_GT(norm, 0.0);

  const Tensor moved = normalized_rows(Tensor::from_rows({{1, 0.3}, {0, 1}}));
  const Var p2 = proto_scores(h, c(moved), tau(0.5));
  EXPECT_NE(proto_loss(p2, y, p2, y).value().item(), proto_loss(p, y, p, y).value().item());
}

TEST(ProtoLoss, Examples) {
  const Tensor onehot = Tensor::from_rows({{0, 1, 0}});
  EXPECT_LE(proto_loss(c(onehot), onehot, c(onehot), onehot).value().item(), 1e-10);

  const Tensor half = Tensor::from_rows({{0.5, 0.5}});
  EXPECT_NEAR(proto_loss(c(half), half, c(half), half).value().item(), std::log(2.0), 1e-12);

  const Tensor uniform(1, 4, 0.25);
  const Tensor y = Tensor::from_rows({{0, 0, 1, 0}});
  EXPECT_NEAR(proto_loss(c(uniform), y, c(uniform), y).value().item(), std::log(4.0), 1e-12);
}

TEST(ProtoLoss, ContractChecks) {
  const Tensor half = Tensor::from_rows({{0.5, 0.5}});
  EXPECT_THROW(proto_loss(c(half), Tensor::from_rows({{0.5, 0.6}}), c(half), half), ContractError);
  EXPECT_THROW(proto_loss(c(half), Tensor(2, 2, 0.5), c(half), half), ContractError);
  EXPECT_THROW(proto_loss(c(Tensor::from_rows({{0.5, 0.4}})), half, c(half), half), ContractError);
}

TEST(ProtoLoss, NonNegative) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.01, 1.0);
  for (int t = 0; t < 50; ++t) {
    Tensor p(3, 4), y(3, 4);
    for (auto* m : {&p, &y}) {
      for (std::size_t r = 0; r < 3; ++r) {
        double s = 0.0;
        for (double& v : m->row(r)) s += (v = u(rng));
        for (double& v : m->row(r)) v /= s;
      }
    }
    EXPECT_GE(proto_loss(c(p), y, c(p), y).value().item(), 0.0);
  }
}

TEST(ExternalLoss, Examples) {
  const Tensor y = Tensor::from_rows({{0.2, 0.8}, {0.6, 0.4}});
  // Cross-entropy against soft targets is minimised, not zeroed, at p = y; one-hot
  // targets give the zero case.
  const Tensor onehot = Tensor::from_rows({{0, 1}, {1, 0}});
  EXPECT_LE(external_proto_loss(c(onehot), c(onehot), onehot).value().item(), 1e-10);

  const Tensor uniform(2, 2, 0.5);
  EXPECT_NEAR(external_proto_loss(c(onehot), c(uniform), onehot).value().item(), 0.5 * std::log(2.0), 1e-12);
  EXPECT_THROW(external_proto_loss(c(y), c(Tensor(3, 2, 0.5)), y), ContractError);
}

TEST(TotalLoss, Sums) {
  EXPECT_DOUBLE_EQ(total_loss(LossBreakdown{1.0, 2.0, 0.5}), 3.5);
  EXPECT_DOUBLE_EQ(total_loss(LossBreakdown{1.0, 2.0, std::nullopt}), 3.0);
  EXPECT_DOUBLE_EQ(total_loss(LossBreakdown{}), 0.0);
  EXPECT_DOUBLE_EQ((LossBreakdown{1.0, 2.0, std::nullopt}.external_or_zero()), 0.0);
  EXPECT_DOUBLE_EQ(total_loss(tau(1.0), tau(2.0), Var()).value().item(), 3.0);
  EXPECT_DOUBLE_EQ(total_loss(tau(1.0), Var(), tau(0.5)).value().item(), 1.5);
}

TEST(Temperature, InitialAndClip) {
  TemperatureParam t;
  EXPECT_NEAR(t.tau(), 0.07, 1e-15);
  EXPECT_NEAR(t.inverse(), 1.0 / 0.07, 1e-12);

  TemperatureParam high = TemperatureParam::from_tau(1.0 / 150.0);
  clip_temperature(high);
  EXPECT_NEAR(high.inverse(), 100.0, 1e-12);
  EXPECT_LE(high.inverse(), 100.0);

  TemperatureParam init;
  const double before = init.log_inverse;
  clip_temperature(init);
  EXPECT_EQ(init.log_inverse, before);

  TemperatureParam edge;
  edge.log_inverse = std::log(100.0);
  clip_temperature(edge);
  EXPECT_LE(edge.inverse(), 100.0);
  EXPECT_NEAR(edge.log_inverse, std::log(100.0), 1e-15);

  TemperatureParam custom = TemperatureParam::from_tau(0.01);
  clip_temperature(custom, 50.0);
  EXPECT_NEAR(custom.inverse(), 50.0, 1e-12);
  EXPECT_LE(custom.inverse(), 50.0);
}

TEST(Temperature, DifferentiableThroughLogInverse) {
  const Var log_inv = Var::parameter(Tensor::scalar(std::log(2.0)));
  const Var t = temperature_from_log_inverse(log_inv);
  EXPECT_NEAR(t.value().item(), 0.5, 1e-15);
  backward(t);
  EXPECT_NEAR(log_inv.grad().item(), -0.5, 1e-15);
}

TEST(Losses, GradientsMatchFiniteDifferences) {
  std::mt19937_64 rng(21);
  std::normal_distribution<double> normal(0.0, 1.0);
  auto gaussian = [&](std::size_t r, std::size_t c) {
    Tensor t(r, c);
    for (double& v : t.data()) v = normal(rng);
    return t;
  };
  const ScalarFn clip = [](std::span<const Var> p) {
    return info_nce(l2_normalize_rows(p[0]), l2_normalize_rows(p[1]), temperature_from_log_inverse(p[2]));
  };
  for (int i = 0; i < 20; ++i) {
    EXPECT_LT(finite_diff_check(clip, {gaussian(4, 3), gaussian(4, 3), Tensor::scalar(1.5)}), 1e-4);
  }
}
