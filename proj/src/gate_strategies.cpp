#include "throttle/gate_strategies.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

namespace throttle {

namespace {

void check_u(double u) {
  if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("control signal u must lie in [0,1], got " + std::to_string(u));
}

GateVector with_weights(std::vector<double> values, const ModuleLayout& layout) {
  if (layout.weights.empty()) return GateVector(std::move(values));
  return GateVector(std::move(values), layout.weights);
}

std::vector<double> random_k_values(std::size_t n, std::size_t k, Rng& rng) {
  std::vector<double> values(n, 0.0);
  std::fill(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), 1.0);
  rng.shuffle(values);
  return values;
}

std::vector<double> prefix_values(std::size_t n, std::size_t k) {
  std::vector<double> values(n, 0.0);
  std::fill(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(k), 1.0);
  return values;
}

double logistic_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t nested_k(std::size_t n, double u) {
  if (n == 0) throw std::invalid_argument("nested_k needs n >= 1");
  check_u(u);
  const auto k = static_cast<std::size_t>(std::floor(u * static_cast<double>(n + 1)));
  return std::min(n, k);
}

GateVector nested_gate(std::size_t n, double u) { return GateVector(prefix_values(n, nested_k(n, u))); }

GateVector independent_gate(std::size_t n, double u, Rng& rng) {
  return GateVector(random_k_values(n, nested_k(n, u), rng));
}

std::vector<std::size_t> depthwise_nested_counts(std::span<const std::size_t> stage_sizes, double u) {
  check_u(u);
  std::size_t total = 0;
  for (std::size_t s : stage_sizes) {
    if (s == 0) throw std::invalid_argument("stage sizes must be positive");
    total += s;
  }
  std::vector<std::size_t> counts(stage_sizes.size(), 0);
  std::size_t active = 0;
  for (;;) {
    bool added = false;
    for (std::size_t s = stage_sizes.size(); s-- > 0;) {
      if (counts[s] == stage_sizes[s]) continue;
      const double proportion = static_cast<double>(counts[s] + 1) / static_cast<double>(stage_sizes[s]);
      if (proportion > u) continue;
      ++counts[s];
      ++active;
      added = true;
      if (static_cast<double>(active) / static_cast<double>(total) > u) return counts;
    }
    if (!added) return counts;
  }
}

GatePlan depthwise_nested_gate(std::span<const std::size_t> stage_sizes, double u) {
  const auto counts = depthwise_nested_counts(stage_sizes, u);
  GatePlan plan;
  for (std::size_t s = 0; s < stage_sizes.size(); ++s) plan.emplace_back(prefix_values(stage_sizes[s], counts[s]));
  return plan;
}

std::size_t total_components(std::span<const ModuleLayout> layouts) {
  std::size_t n = 0;
  for (const auto& l : layouts) n += l.size;
  return n;
}

GatePlan static_plan(StaticRule rule, std::span<const ModuleLayout> layouts, double u, Rng& rng) {
  check_u(u);
  GatePlan plan;
  if (rule == StaticRule::kDepthNested) {
    std::vector<std::size_t> sizes;
    for (const auto& l : layouts) sizes.push_back(l.size);
    const auto counts = depthwise_nested_counts(sizes, u);
    for (std::size_t m = 0; m < layouts.size(); ++m) {
      const std::size_t k = std::max(counts[m], layouts[m].min_active);
      plan.push_back(with_weights(prefix_values(layouts[m].size, k), layouts[m]));
    }
    return plan;
  }
  for (const auto& layout : layouts) {
    std::size_t k = rule == StaticRule::kAllOn ? layout.size : nested_k(layout.size, u);
    k = std::max(k, layout.min_active);
    auto values = rule == StaticRule::kIndependent ? random_k_values(layout.size, k, rng)
                                                   : prefix_values(layout.size, k);
    plan.push_back(with_weights(std::move(values), layout));
  }
  return plan;
}

GatePlan per_module_k_plan(bool nested, std::span<const ModuleLayout> layouts, Rng& rng) {
  GatePlan plan;
  for (const auto& layout : layouts) {
    const std::size_t k = std::max(rng.index(layout.size + 1), layout.min_active);
    auto values = nested ? prefix_values(layout.size, k) : random_k_values(layout.size, k, rng);
    plan.push_back(with_weights(std::move(values), layout));
  }
  return plan;
}

GatePlan split_plan(std::span<const double> flat, std::span<const ModuleLayout> layouts) {
  if (flat.size() != total_components(layouts))
    throw std::invalid_argument("gate vector length " + std::to_string(flat.size()) + " differs from " +
                                std::to_string(total_components(layouts)) + " gated components");
  GatePlan plan;
  std::size_t offset = 0;
  for (const auto& layout : layouts) {
    plan.push_back(with_weights(std::vector<double>(flat.begin() + static_cast<std::ptrdiff_t>(offset),
                                                    flat.begin() + static_cast<std::ptrdiff_t>(offset + layout.size)),
                                layout));
    offset += layout.size;
  }
  return plan;
}

std::vector<double> flatten_plan(const GatePlan& plan) {
  std::vector<double> flat;
  for (const auto& g : plan) flat.insert(flat.end(), g.values().begin(), g.values().end());
  return flat;
}

void enforce_min_active(std::vector<double>& flat, std::span<const double> probabilities,
                        std::span<const ModuleLayout> layouts) {
  std::size_t offset = 0;
  for (const auto& layout : layouts) {
    std::size_t active = 0;
    for (std::size_t i = 0; i < layout.size; ++i) active += flat[offset + i] != 0.0;
    while (active < layout.min_active) {
      std::size_t best = layout.size;
      for (std::size_t i = 0; i < layout.size; ++i) {
        if (flat[offset + i] != 0.0) continue;
        if (best == layout.size || probabilities[offset + i] > probabilities[offset + best]) best = i;
      }
      flat[offset + best] = 1.0;
      ++active;
    }
    offset += layout.size;
  }
}

BlindController::BlindController(std::size_t outputs, Rng& init, std::size_t hidden)
    : outputs_(outputs), hidden_(hidden) {
  if (outputs == 0 || hidden == 0) throw std::invalid_argument("controller needs positive sizes");
  Tensor w1({1, hidden});
  for (double& v : w1.values()) v = init.normal();
  Tensor b1({hidden});
  for (double& v : b1.values()) v = init.uniform(-0.5, 0.5);
  Tensor w2({hidden, outputs});
  const double scale = 0.1 / std::sqrt(static_cast<double>(hidden));
  for (double& v : w2.values()) v = scale * init.normal();
  params_.add("controller.fc1.weight", std::move(w1));
  params_.add("controller.fc1.bias", std::move(b1));
  params_.add("controller.fc2.weight", std::move(w2));
  params_.add("controller.fc2.bias", Tensor({outputs}));
}

void BlindController::set_alpha(double alpha) {
  if (!(alpha > 0.5 && alpha <= 1.0)) throw std::invalid_argument("sigmoid mix must lie in (0.5, 1]");
  alpha_ = alpha;
}

NodeId BlindController::logits(ParamBinder& bind, double u) const {
  Graph& g = bind.graph();
  NodeId x = g.constant(Tensor({1, 1}, u));
  NodeId h = g.relu(g.bias_add(g.matmul(x, bind(0)), bind(1)));
  NodeId z = g.bias_add(g.matmul(h, bind(2)), bind(3));
  return g.batch_mean(z);
}

NodeId BlindController::forward(ParamBinder& bind, double u) const {
  check_u(u);
  return bind.graph().sigmoid(logits(bind, u), alpha_);
}

std::vector<double> BlindController::probabilities(double u) const {
  Graph g;
  ParamBinder bind(g, params_, false);
  const Tensor& p = g.value(forward(bind, u));
  return {p.values().begin(), p.values().end()};
}

double annealed_alpha(double epoch_progress, double anneal_epochs, double start, double end) {
  if (anneal_epochs <= 0.0) return end;
  const double t = std::clamp(epoch_progress / anneal_epochs, 0.0, 1.0);
  return start + (end - start) * t;
}

GateVector sample_bernoulli(std::span<const double> p, Rng& rng) {
  std::vector<double> values(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] >= 0.0 && p[i] <= 1.0)) throw std::invalid_argument("Bernoulli probability outside [0,1]");
    values[i] = rng.bernoulli(p[i]) ? 1.0 : 0.0;
  }
  return GateVector(std::move(values));
}

double log_prob(const GateVector& g, std::span<const double> p) {
  if (g.size() != p.size()) throw std::invalid_argument("log_prob: gate and probability lengths differ");
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::log(g[i] * p[i] + (1.0 - g[i]) * (1.0 - p[i]));
  return total;
}

std::vector<double> log_prob_gradient(const GateVector& g, std::span<const double> p) {
  if (g.size() != p.size()) throw std::invalid_argument("log_prob: gate and probability lengths differ");
  std::vector<double> d(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) d[i] = (2.0 * g[i] - 1.0) / (g[i] * p[i] + (1.0 - g[i]) * (1.0 - p[i]));
  return d;
}

std::vector<Tensor> reinforce_grad(double objective, const GateVector& g, std::span<const double> p,
                                   const std::function<std::vector<Tensor>(const Tensor&)>& backprop) {
  std::vector<double> dp = log_prob_gradient(g, p);
  for (double& v : dp) v *= objective;
  return backprop(Tensor::vector(std::move(dp)));
}

ConcreteSample sample_concrete(std::span<const double> p, double temperature, Rng& rng) {
  if (temperature < 0.0 || std::isnan(temperature))
    throw std::invalid_argument("Concrete temperature must be >= 0, got " + std::to_string(temperature));
  ConcreteSample s{std::vector<double>(p.size()), Tensor({std::max<std::size_t>(p.size(), 1)})};
  for (std::size_t i = 0; i < p.size(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) throw std::invalid_argument("Concrete probabilities must lie in (0,1)");
    const double noise = rng.logistic();
    s.noise[i] = noise;
    const double logit = std::log(p[i]) - std::log1p(-p[i]);
    s.gates[i] = temperature == 0.0 ? (logit + noise > 0.0 ? 1.0 : 0.0)
                                    : logistic_sigmoid((logit + noise) / temperature);
  }
  return s;
}

GateVector test_time_gate(std::span<const double> p) {
  std::vector<double> values(p.size());
  for (std::size_t i = 0; i < p.size(); ++i) values[i] = p[i] > 0.5 ? 1.0 : 0.0;
  return GateVector(std::move(values));
}

}  // namespace throttle
