#include "throttle/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "throttle/params.hpp"

namespace throttle {

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (double& v : t.values()) v = rng.uniform(lo, hi);
  return t;
}

double weighted_output(const OpCase& op, const std::vector<Tensor>& inputs, const Tensor& weights) {
  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : inputs) ids.push_back(g.constant(t));
  const Tensor& out = g.value(op.build(g, ids));
  double s = 0.0;
  for (std::size_t i = 0; i < out.numel(); ++i) s += weights[i] * out[i];
  return s;
}

}  // namespace

double finite_diff_check(const OpCase& op, double step, Rng& rng) {
  std::vector<Tensor> inputs = op.inputs;
  for (Tensor& t : inputs)
    for (double& v : t.values()) v += rng.uniform(-op.jitter, op.jitter);

  Graph g;
  std::vector<NodeId> ids;
  for (const Tensor& t : inputs) {
    Tensor leaf = t;
    ids.push_back(g.leaf(std::move(leaf.set_requires_grad(true))));
  }
  const NodeId out = op.build(g, ids);
  const Tensor weights = random_tensor(g.value(out).shape(), rng);
  const GradientSeed seed{out, weights};
  const Gradients grads = g.backward(std::span<const GradientSeed>(&seed, 1));

  double worst = 0.0;
  for (std::size_t s = 0; s < inputs.size(); ++s) {
    const Tensor* analytic = grads.find(ids[s]);
    for (std::size_t i = 0; i < inputs[s].numel(); ++i) {
      const double original = inputs[s][i];
      inputs[s][i] = original + step;
      const double plus = weighted_output(op, inputs, weights);
      inputs[s][i] = original - step;
      const double minus = weighted_output(op, inputs, weights);
      inputs[s][i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = analytic ? (*analytic)[i] : 0.0;
      const double denom = std::max({1.0, std::abs(a), std::abs(numeric)});
      worst = std::max(worst, std::abs(a - numeric) / denom);
    }
  }
  return worst;
}

std::vector<OpCase> standard_op_cases(Rng& rng) {
  std::vector<OpCase> cases;
  auto unary = [](auto fn) {
    return [fn](Graph& g, std::span<const NodeId> in) { return fn(g, in[0]); };
  };

  cases.push_back({"matmul", {random_tensor({4, 4}, rng), random_tensor({4, 4}, rng)},
                   [](Graph& g, std::span<const NodeId> in) { return g.matmul(in[0], in[1]); }});
  cases.push_back({"conv2d", {random_tensor({1, 2, 5, 5}, rng), random_tensor({3, 2, 3, 3}, rng)},
                   [](Graph& g, std::span<const NodeId> in) {
                     return g.conv2d(in[0], in[1], {.stride = 2, .padding = 1});
                   }});
  cases.push_back({"add", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                   [](Graph& g, std::span<const NodeId> in) { return g.add(in[0], in[1]); }});
  cases.push_back({"scalar_mul", {random_tensor({2, 3}, rng), random_tensor({}, rng)},
                   [](Graph& g, std::span<const NodeId> in) {
                     return g.add(g.scale(in[0], in[1]), g.scale(in[0], 0.7));
                   }});
  cases.push_back({"mul", {random_tensor({3, 4}, rng), random_tensor({3, 4}, rng)},
                   [](Graph& g, std::span<const NodeId> in) { return g.mul(in[0], in[1]); }});
  cases.push_back({"relu", {random_tensor({4, 5}, rng)}, unary([](Graph& g, NodeId x) { return g.relu(x); })});
  cases.push_back({"sigmoid", {random_tensor({4, 5}, rng, -3, 3)},
                   unary([](Graph& g, NodeId x) { return g.sigmoid(x, 0.85); })});
  cases.push_back({"concat",
                   {random_tensor({2, 2, 3}, rng), random_tensor({2, 1, 3}, rng), random_tensor({2, 3, 3}, rng)},
                   [](Graph& g, std::span<const NodeId> in) { return g.concat(in, 1); }});
  cases.push_back({"sum_components",
                   {random_tensor({2, 3}, rng), random_tensor({2, 3}, rng), random_tensor({2, 3}, rng)},
                   [](Graph& g, std::span<const NodeId> in) { return g.sum_components(in); }});
  cases.push_back({"global_mean_pool", {random_tensor({2, 3, 4, 4}, rng)},
                   unary([](Graph& g, NodeId x) { return g.global_mean_pool(x); })});
  cases.push_back({"flatten", {random_tensor({2, 3, 2, 2}, rng)},
                   unary([](Graph& g, NodeId x) { return g.flatten(x); })});
  {
    std::vector<int> labels;
    for (int i = 0; i < 3; ++i) labels.push_back(static_cast<int>(rng.index(10)));
    cases.push_back({"softmax_cross_entropy", {random_tensor({3, 10}, rng, -2, 2)},
                     [labels](Graph& g, std::span<const NodeId> in) {
                       return g.softmax_cross_entropy(in[0], labels);
                     }});
  }
  cases.push_back({"batch_mean", {random_tensor({4, 3}, rng)},
                   unary([](Graph& g, NodeId x) { return g.batch_mean(x); })});
  cases.push_back({"bias_add", {random_tensor({2, 3, 2, 2}, rng), random_tensor({3}, rng)},
                   [](Graph& g, std::span<const NodeId> in) { return g.bias_add(in[0], in[1]); }});
  cases.push_back({"max_pool2d", {random_tensor({2, 2, 4, 4}, rng)},
                   unary([](Graph& g, NodeId x) { return g.max_pool2d(x); })});
  cases.push_back({"reduce_sum", {random_tensor({3, 3}, rng)},
                   unary([](Graph& g, NodeId x) { return g.reduce_sum(x); })});
  cases.push_back({"select", {random_tensor({5}, rng)},
                   unary([](Graph& g, NodeId x) { return g.select(x, 3); })});
  cases.push_back({"normalize_l1", {random_tensor({5}, rng, 0.1, 1.0)},
                   unary([](Graph& g, NodeId x) { return g.normalize_l1(x); })});
  {
    Tensor noise({6});
    for (double& v : noise.values()) v = rng.logistic();
    cases.push_back({"binary_concrete", {random_tensor({6}, rng, 0.1, 0.9)},
                     [noise](Graph& g, std::span<const NodeId> in) {
                       return g.binary_concrete(in[0], noise, 0.5);
                     }});
  }
  return cases;
}

std::vector<GradcheckRow> run_gradcheck(const std::function<std::vector<OpCase>(Rng&)>& make_cases,
                                        int trials, double step, double tolerance,
                                        std::uint64_t seed) {
  std::vector<GradcheckRow> rows;
  Rng rng(seed);
  for (int trial = 0; trial < trials; ++trial) {
    std::vector<OpCase> cases = make_cases(rng);
    if (rows.empty()) {
      for (const OpCase& c : cases) rows.push_back({c.name, 0.0, true});
    }
    for (std::size_t i = 0; i < cases.size(); ++i) {
      rows[i].max_error = std::max(rows[i].max_error, finite_diff_check(cases[i], step, rng));
    }
  }
  for (GradcheckRow& r : rows) r.passed = std::isfinite(r.max_error) && r.max_error < tolerance;
  return rows;
}

double controller_finite_diff_check(const BlindController& controller, double u, double step, Rng& rng) {
  BlindController probe = controller;
  Graph g;
  ParamBinder bind(g, probe.params(), true);
  const NodeId out = probe.forward(bind, u);
  const Tensor weights = random_tensor(g.value(out).shape(), rng);
  const GradientSeed seed{out, weights};
  const std::vector<Tensor> grads = bind.collect(g.backward(std::span<const GradientSeed>(&seed, 1)));

  auto objective = [&] {
    const std::vector<double> p = probe.probabilities(u);
    double s = 0.0;
    for (std::size_t i = 0; i < p.size(); ++i) s += weights[i] * p[i];
    return s;
  };
  double worst = 0.0;
  for (std::size_t k = 0; k < probe.params().size(); ++k) {
    Tensor& t = probe.params().at(k);
    for (std::size_t i = 0; i < t.numel(); ++i) {
      const double original = t[i];
      t[i] = original + step;
      const double plus = objective();
      t[i] = original - step;
      const double minus = objective();
      t[i] = original;
      const double numeric = (plus - minus) / (2.0 * step);
      const double a = grads[k][i];
      worst = std::max(worst, std::abs(a - numeric) / std::max({1.0, std::abs(a), std::abs(numeric)}));
    }
  }
  return worst;
}

std::vector<GradcheckRow> full_gradcheck(int trials, double step, double tolerance, std::uint64_t seed) {
  std::vector<GradcheckRow> rows = run_gradcheck(standard_op_cases, trials, step, tolerance, seed);
  Rng rng(derive_seed(seed, "controller"));
  GradcheckRow row{"controller", 0.0, true};
  for (int trial = 0; trial < trials; ++trial) {
    BlindController controller(6, rng, 8);
    controller.set_alpha(rng.uniform(0.8, 0.99));
    for (double u : {0.1, 0.5, 0.9}) row.max_error = std::max(row.max_error, controller_finite_diff_check(controller, u, step, rng));
  }
  row.passed = std::isfinite(row.max_error) && row.max_error < tolerance;
  rows.push_back(row);
  return rows;
}

}  // namespace throttle
