#include <gtest/gtest.h>

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "throttle/evaluation.hpp"
#include "throttle/training.hpp"

using namespace throttle;

namespace {

CurveRecord point(double c, double acc) { return CurveRecord{"nested", c, c, acc, 0.0}; }

struct Trained {
  NetworkSpec net;
  Dataset test;
};

const Trained& trained() {
  static const Trained t = [] {
    ArchConfig c = ArchConfig::defaults("t-mlp");
    c.classes = 4;
    c.widths = {16, 16};
    Trained r{build_network(c, 1), synth_dataset(SynthKind::kBlobs, 150, 2, SynthOptions{4, 1, 8, 0.1})};
    TrainConfig tc;
    tc.epochs = 3;
    tc.batch_size = 16;
    tc.schedule.t0 = 3;
    train_datapath(r.net, synth_dataset(SynthKind::kBlobs, 256, 1, SynthOptions{4, 1, 8, 0.1}), tc);
    return r;
  }();
  return t;
}

}  // namespace

TEST(Auc, TrapezoidOverUtilizationSpan) {
  const std::vector<CurveRecord> flat{point(0, 0.5), point(0.5, 0.5), point(1, 0.5)};
  EXPECT_DOUBLE_EQ(auc(flat), 0.5);
  const std::vector<CurveRecord> ramp{point(0, 0), point(1, 1)};
  EXPECT_DOUBLE_EQ(auc(ramp), 0.5);
  const std::vector<CurveRecord> step{point(0.25, 0.2), point(0.5, 0.6), point(1.0, 0.6)};
  EXPECT_NEAR(auc(step), (0.25 * 0.4 + 0.5 * 0.6) / 0.75, 1e-15);
  const std::vector<CurveRecord> single{point(0.5, 0.3), point(0.5, 0.5)};
  EXPECT_DOUBLE_EQ(auc(single), 0.4);
  const std::vector<CurveRecord> unsorted{point(1, 1), point(0, 0)};
  EXPECT_DOUBLE_EQ(auc(unsorted), 0.5);
}

TEST(FlopCount, GlueDenseAndHalf) {
  const NetworkSpec& net = trained().net;
  std::uint64_t dense = net.glue_flops;
  for (const auto& m : net.component_flops)
    for (auto f : m) dense += f;
  EXPECT_EQ(flop_count(net, net.all_off_plan()), net.glue_flops);
  EXPECT_EQ(flop_count(net, net.all_on_plan()), dense);
  Rng rng(1);
  const GatePlan half = evaluation_plan(net, Strategy::kNested, 0.5, nullptr, rng);
  std::uint64_t expect = net.glue_flops;
  for (std::size_t m = 0; m < half.size(); ++m)
    for (std::size_t i = 0; i < half[m].size() / 2; ++i) expect += net.component_flops[m][i];
  EXPECT_EQ(flop_count(net, half), expect);
}

TEST(EvaluateAt, AllOnMatchesDenseForward) {
  const Trained& t = trained();
  const CurveRecord r = evaluate_at(t.net, Strategy::kAllOn, 0.3, t.test);
  const Tensor logits = network_logits(t.net, t.test.images, t.net.all_on_plan());
  const std::vector<int> pred = predict(logits);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) correct += pred[i] == t.test.labels[i];
  EXPECT_DOUBLE_EQ(r.accuracy, static_cast<double>(correct) / t.test.count());
  EXPECT_DOUBLE_EQ(r.utilization, 1.0);
}

TEST(EvaluateAt, ReportedUtilizationComesFromPlans) {
  const Trained& t = trained();
  for (Strategy s : {Strategy::kNested, Strategy::kIndependent}) {
    std::vector<GatePlan> plans;
    const CurveRecord r = evaluate_at(t.net, s, 0.4, t.test, nullptr, 9, 40, &plans);
    ASSERT_EQ(plans.size(), 4u);
    const std::size_t sizes[4] = {40, 40, 40, 30};
    double c = 0, flops = 0;
    for (std::size_t b = 0; b < 4; ++b) {
      c += sizes[b] * network_utilization(plans[b]);
      flops += sizes[b] * static_cast<double>(flop_count(t.net, plans[b]));
    }
    EXPECT_NEAR(r.utilization, c / 150, 1e-12);
    EXPECT_NEAR(r.flops, flops / 150, 1e-6);
    EXPECT_EQ(r.strategy, strategy_name(s));
  }
}

TEST(Sweep, GridOrderAndThreadInvariance) {
  const Trained& t = trained();
  SweepSpec spec;
  spec.grid = default_grid(9);
  spec.strategy = Strategy::kIndependent;
  spec.seed = 4;
  spec.threads = 1;
  const auto one = sweep(t.net, spec, t.test);
  spec.threads = 4;
  const auto four = sweep(t.net, spec, t.test);
  ASSERT_EQ(one.size(), 9u);
  for (std::size_t i = 0; i < 9; ++i) {
    EXPECT_DOUBLE_EQ(one[i].u_target, i / 8.0);
    EXPECT_EQ(one[i].accuracy, four[i].accuracy);
    EXPECT_EQ(one[i].utilization, four[i].utilization);
  }
  setenv("THROTTLENET_THREADS", "2", 1);
  EXPECT_EQ(worker_threads(), 2u);
  EXPECT_EQ(worker_threads(1), 1u);
  unsetenv("THROTTLENET_THREADS");
}

TEST(Sweep, NestedCurveEndpoints) {
  const Trained& t = trained();
  SweepSpec spec;
  spec.grid = {0.0, 1.0};
  const auto r = sweep(t.net, spec, t.test);
  EXPECT_DOUBLE_EQ(r[0].utilization, 0.0);
  EXPECT_DOUBLE_EQ(r[1].utilization, 1.0);
  EXPECT_EQ(r[1].accuracy, evaluate_at(t.net, Strategy::kAllOn, 1.0, t.test).accuracy);
}

TEST(Csv, CurveAndProfileFormat) {
  std::ostringstream curve;
  const std::vector<CurveRecord> recs{{"nested", 0.5, 0.5, 0.875, 12345678.0}};
  write_curve_csv(curve, recs);
  EXPECT_EQ(curve.str(), "strategy,u_target,utilization,accuracy,flops\nnested,0.5,0.5,0.875,1.23457e+07\n");
  std::ostringstream prof;
  const std::vector<ProfileRow> rows{{0.25, 1, 0.5}};
  write_profile_csv(prof, rows);
  EXPECT_EQ(prof.str(), "u_target,module_id,mean_activation\n0.25,1,0.5\n");
}

TEST(Profile, NestedRowsPerModule) {
  const NetworkSpec& net = trained().net;
  const std::vector<double> grid{0.0, 0.5, 1.0};
  const auto rows = utilization_profile(net, Strategy::kNested, nullptr, grid);
  ASSERT_EQ(rows.size(), 3 * net.module_count());
  for (const auto& r : rows) {
    const double n = static_cast<double>(net.modules[r.module_id].components.size());
    EXPECT_DOUBLE_EQ(r.mean_activation, nested_k(net.modules[r.module_id].components.size(), r.u_target) / n);
  }
}

TEST(Strategies, ParseAndLearnedNeedsController) {
  EXPECT_EQ(parse_strategy("all-on"), Strategy::kAllOn);
  EXPECT_EQ(strategy_name(Strategy::kLearned), "learned");
  EXPECT_ANY_THROW(parse_strategy("bogus"));
  Rng rng(1);
  EXPECT_ANY_THROW(evaluation_plan(trained().net, Strategy::kLearned, 0.5, nullptr, rng));
}

TEST(Predict, TiesGoToLowestClass) {
  const Tensor logits({2, 3}, {1.0, 3.0, 3.0, 0.0, 0.0, 0.0});
  EXPECT_EQ(predict(logits), (std::vector<int>{1, 0}));
}
