#include <gtest/gtest.h>

#include <cmath>
#include <numbers>

#include "throttle/error.hpp"
#include "throttle/training.hpp"

using namespace throttle;

namespace {

Dataset blobs(std::size_t count, std::uint64_t seed) {
  return synth_dataset(SynthKind::kBlobs, count, seed, SynthOptions{4, 1, 8, 0.1});
}

NetworkSpec mlp(std::uint64_t seed) {
  ArchConfig c = ArchConfig::defaults("t-mlp");
  c.classes = 4;
  c.widths = {16, 16};
  return build_network(c, seed);
}

TrainConfig quick(std::size_t epochs) {
  TrainConfig t;
  t.epochs = epochs;
  t.batch_size = 16;
  t.optimizer.lr = 0.05;
  t.schedule.t0 = static_cast<double>(epochs);
  t.seed = 11;
  return t;
}

}  // namespace

TEST(CosineLr, WarmRestarts) {
  EXPECT_DOUBLE_EQ(cosine_lr(0, 0.1, 0.0, 10, 2), 0.1);
  EXPECT_NEAR(cosine_lr(5, 0.1, 0.0, 10, 2), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(5, 0.1, 0.02, 10, 2), 0.06, 1e-15);
  EXPECT_DOUBLE_EQ(cosine_lr(10, 0.1, 0.0, 10, 2), 0.1);
  // second period spans epochs [10, 30)
  EXPECT_NEAR(cosine_lr(20, 0.1, 0.0, 10, 2), 0.05, 1e-15);
  EXPECT_NEAR(cosine_lr(2.5, 1.0, 0.0, 10, 1), 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-15);
  EXPECT_NEAR(cosine_lr(12.5, 1.0, 0.0, 10, 1), 0.5 * (1 + std::cos(std::numbers::pi / 4)), 1e-12);
  LrSchedule constant{false};
  EXPECT_DOUBLE_EQ(constant.at(7.3, 0.01), 0.01);
}

TEST(Optimizer, SgdMomentumMatchesManualUpdate) {
  ParamStore store;
  store.add("w", Tensor::vector({1.0, -2.0}));
  OptimizerConfig cfg{OptimizerConfig::Kind::kSgdMomentum, 0.1, 0.9, 0.01};
  OptimizerState state;
  double theta[2] = {1.0, -2.0}, v[2] = {0, 0};
  const double grads[2][2] = {{0.5, -1.0}, {0.25, 0.75}};
  for (const auto& g : grads) {
    const std::vector<Tensor> gt{Tensor::vector({g[0], g[1]})};
    optimizer_step(cfg, 0.1, store, gt, state);
    for (int i = 0; i < 2; ++i) {
      v[i] = 0.9 * v[i] + (g[i] + 0.01 * theta[i]);
      theta[i] -= 0.1 * v[i];
    }
  }
  for (int i = 0; i < 2; ++i) EXPECT_NEAR(store.at(0)[i], theta[i], 1e-15);
}

TEST(Optimizer, AdamMatchesManualUpdate) {
  ParamStore store;
  store.add("w", Tensor::vector({0.3}));
  OptimizerConfig cfg;
  cfg.kind = OptimizerConfig::Kind::kAdam;
  cfg.weight_decay = 0.0;
  OptimizerState state;
  double theta = 0.3, m = 0, s = 0;
  const double grads[3] = {1.0, -0.5, 2.0};
  for (int t = 1; t <= 3; ++t) {
    const double g = grads[t - 1];
    const std::vector<Tensor> gt{Tensor::vector({g})};
    optimizer_step(cfg, 0.01, store, gt, state);
    m = 0.9 * m + 0.1 * g;
    s = 0.999 * s + 0.001 * g * g;
    const double mh = m / (1 - std::pow(0.9, t)), sh = s / (1 - std::pow(0.999, t));
    theta -= 0.01 * mh / (std::sqrt(sh) + 1e-8);
  }
  EXPECT_NEAR(store.at(0)[0], theta, 1e-14);
}

TEST(Optimizer, ClipNormRescalesRawGradient) {
  ParamStore store;
  store.add("w", Tensor::vector({0.0, 0.0}));
  OptimizerConfig cfg{OptimizerConfig::Kind::kSgdMomentum, 1.0, 0.0, 0.0};
  cfg.clip_norm = 1.0;
  OptimizerState state;
  const std::vector<Tensor> big{Tensor::vector({3.0, 4.0})};
  optimizer_step(cfg, 1.0, store, big, state);
  EXPECT_NEAR(store.at(0)[0], -0.6, 1e-15);
  EXPECT_NEAR(store.at(0)[1], -0.8, 1e-15);
  const std::vector<Tensor> small{Tensor::vector({0.3, 0.4})};
  optimizer_step(cfg, 1.0, store, small, state);
  EXPECT_NEAR(store.at(0)[0], -0.9, 1e-15);
}

TEST(UDistributionTest, AnnealedRangeShrinksTowardZero) {
  EXPECT_DOUBLE_EQ(anneal_u_sampler(0, 1.0, 0.05).lo, 1.0);
  EXPECT_NEAR(anneal_u_sampler(4, 1.0, 0.05).lo, 0.8, 1e-15);
  EXPECT_DOUBLE_EQ(anneal_u_sampler(100, 1.0, 0.05).lo, 0.0);
  EXPECT_DOUBLE_EQ(anneal_u_sampler(3, 1.0, 0.05).hi, 1.0);
  UDistribution fixed{UDistribution::Kind::kFixed};
  fixed.fixed = 0.4;
  EXPECT_DOUBLE_EQ(fixed.range(9).lo, 0.4);
  EXPECT_DOUBLE_EQ(fixed.range(9).hi, 0.4);
}

TEST(CombinedLoss, CrossEntropyPlusPenalty) {
  const Tensor logits = Tensor({2, 2}, {0.0, 0.0, 2.0, 0.0});
  const std::vector<int> labels{1, 0};
  const GatePlan plan{GateVector({1, 0, 0, 0})};
  PenaltySpec spec{PenaltySpec::Form::kDist, 2, 10.0};
  const LossBreakdown b = combined_loss(logits, labels, plan, 0.5, spec);
  const double expect_l = 0.5 * (std::log(2.0) + std::log(1.0 + std::exp(-2.0)));
  EXPECT_NEAR(b.L, expect_l, 1e-14);
  EXPECT_DOUBLE_EQ(b.c, 0.25);
  EXPECT_NEAR(b.C, 0.0625, 1e-15);
  EXPECT_NEAR(b.J, expect_l + 0.625, 1e-14);
}

TEST(TrainDatapath, LossDecreasesAndLogsEveryStep) {
  NetworkSpec net = mlp(1);
  const Dataset data = blobs(256, 2);
  std::size_t records = 0;
  const TrainSummary s = train_datapath(net, data, quick(4), [&](const MetricRecord& r) {
    EXPECT_EQ(r.phase, "datapath");
    EXPECT_TRUE(std::isfinite(r.loss.L));
    ++records;
  });
  ASSERT_EQ(s.epoch_loss.size(), 4u);
  EXPECT_LT(s.epoch_loss.back(), s.epoch_loss.front());
  EXPECT_EQ(records, s.steps);
  EXPECT_EQ(s.steps, 4u * 16u);
}

TEST(TrainDatapath, DeterministicForFixedSeed) {
  const Dataset data = blobs(128, 3);
  NetworkSpec a = mlp(5), b = mlp(5);
  train_datapath(a, data, quick(2));
  train_datapath(b, data, quick(2));
  ASSERT_EQ(a.params.size(), b.params.size());
  for (std::size_t i = 0; i < a.params.size(); ++i) EXPECT_EQ(a.params.at(i), b.params.at(i));
}

TEST(TrainDatapath, DivergenceIsReported) {
  NetworkSpec net = mlp(1);
  TrainConfig t = quick(2);
  t.optimizer.lr = 1e6;
  EXPECT_THROW(train_datapath(net, blobs(128, 4), t), DivergenceError);
}

TEST(DatapathPlan, NestedPrefixesOrIndependentCounts) {
  NetworkSpec net = mlp(1);
  TrainConfig t = quick(1);
  Rng rng(3);
  for (double u : {0.0, 0.3, 0.7, 1.0}) {
    const GatePlan p = datapath_plan(net, t, u, rng);
    for (const GateVector& g : p) EXPECT_EQ(g, nested_gate(g.size(), u));
  }
  t.nested = false;
  const GatePlan p = datapath_plan(net, t, 0.5, rng);
  for (const GateVector& g : p) EXPECT_EQ(g.active_count(), nested_k(g.size(), 0.5));
}

TEST(RelaxedObjective, GradientMatchesFiniteDifference) {
  NetworkSpec net = mlp(2);
  const Dataset data = blobs(8, 5);
  const std::vector<std::size_t> idx{0, 1, 2, 3, 4, 5, 6, 7};
  const Tensor x = data.gather(idx);
  const std::vector<int> y = data.gather_labels(idx);
  const std::size_t n = net.total_components();
  Rng rng(6);
  std::vector<double> p(n), noise(n);
  for (double& v : p) v = rng.uniform(0.2, 0.8);
  for (double& v : noise) v = rng.logistic();
  PenaltySpec spec{PenaltySpec::Form::kDist, 2, 3.0};
  const RelaxedResult r = relaxed_objective(net, x, y, 0.4, p, noise, 0.5, spec);
  ASSERT_EQ(r.grad_p.size(), n);
  for (std::size_t i = 0; i < n; ++i) {
    auto hi = p, lo = p;
    hi[i] += 1e-6;
    lo[i] -= 1e-6;
    const double fd = (relaxed_objective(net, x, y, 0.4, hi, noise, 0.5, spec).loss.J -
                       relaxed_objective(net, x, y, 0.4, lo, noise, 0.5, spec).loss.J) / 2e-6;
    EXPECT_NEAR(r.grad_p[i], fd, 1e-6 * std::max(1.0, std::abs(fd))) << i;
  }
}

TEST(TrainController, UpdatesControllerOnly) {
  NetworkSpec net = mlp(3);
  const Dataset data = blobs(128, 7);
  train_datapath(net, data, quick(2));
  const ParamStore frozen = net.params;
  Rng init(1);
  BlindController ctl(net.total_components(), init, 8);
  const ParamStore before = ctl.params();
  TrainConfig t = quick(2);
  t.optimizer.kind = OptimizerConfig::Kind::kAdam;
  t.optimizer.lr = 0.01;
  t.penalty = PenaltySpec{PenaltySpec::Form::kDist, 2, 1.0};
  std::size_t records = 0;
  train_controller(net, ctl, data, t, [&](const MetricRecord& r) {
    EXPECT_EQ(r.phase, "controller");
    ++records;
  });
  EXPECT_GT(records, 0u);
  for (std::size_t i = 0; i < frozen.size(); ++i) EXPECT_EQ(net.params.at(i), frozen.at(i));
  bool moved = false;
  for (std::size_t i = 0; i < before.size(); ++i) moved |= !(ctl.params().at(i) == before.at(i));
  EXPECT_TRUE(moved);
  EXPECT_GT(ctl.alpha(), 0.8);
}

TEST(TrainConfigTest, ValidationNamesKey) {
  TrainConfig t;
  t.batch_size = 0;
  try {
    t.validate();
    FAIL();
  } catch (const ConfigError& e) {
    EXPECT_NE(std::string(e.what()).find("train.batch_size"), std::string::npos);
  }
  t = TrainConfig{};
  t.estimator = TrainConfig::Estimator::kConcrete;
  t.temperature = 0.0;
  EXPECT_THROW(t.validate(), ConfigError);
}
