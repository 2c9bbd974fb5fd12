#pragma once

#include <functional>
#include <span>
#include <vector>

#include "throttle/gating.hpp"
#include "throttle/rng.hpp"

namespace throttle {

// Number of active components for control signal u: min(n, floor(u*(n+1))).
std::size_t nested_k(std::size_t n, double u);
// 1^k 0^(n-k).
GateVector nested_gate(std::size_t n, double u);
// Exactly k = nested_k(n,u) ones at uniformly random positions.
GateVector independent_gate(std::size_t n, double u, Rng& rng);

// Per-stage active counts from the round-robin rule: sweep the stages from
// the output end towards the input, turning on one more layer in each stage
// unless that would push the stage's active proportion above u; stop once a
// full sweep adds nothing or total utilization exceeds u. Active layers are
// the leading ones in each stage.
std::vector<std::size_t> depthwise_nested_counts(std::span<const std::size_t> stage_sizes, double u);
GatePlan depthwise_nested_gate(std::span<const std::size_t> stage_sizes, double u);

// What a gate strategy needs to know about one gated module.
struct ModuleLayout {
  std::size_t size = 1;
  std::size_t min_active = 0;
  std::vector<double> weights;  // empty = uniform
};

std::size_t total_components(std::span<const ModuleLayout> layouts);

enum class StaticRule { kNested, kIndependent, kDepthNested, kAllOn };

// Static plan for one u; every module's k is derived from the same u and
// raised to its min_active.
GatePlan static_plan(StaticRule rule, std::span<const ModuleLayout> layouts, double u, Rng& rng);
// Training-time variant that draws k ~ DiscreteUniform[0, n] independently
// per module (nested prefix or random positions).
GatePlan per_module_k_plan(bool nested, std::span<const ModuleLayout> layouts, Rng& rng);

// Splits a flat length-N vector of gate values into per-module vectors.
GatePlan split_plan(std::span<const double> flat, std::span<const ModuleLayout> layouts);
std::vector<double> flatten_plan(const GatePlan& plan);

// Forces the highest-probability gates on until min_active is met.
void enforce_min_active(std::vector<double>& flat, std::span<const double> probabilities,
                        std::span<const ModuleLayout> layouts);

// Blind gate controller: u -> FC(1,H) -> ReLU -> FC(H,N) -> modified
// sigmoid mix*s(x) + (1-mix)*(1-s(x)), so every probability lies in
// [1-mix, mix].
class BlindController {
 public:
  static constexpr std::size_t kDefaultHidden = 32;

  BlindController(std::size_t outputs, Rng& init, std::size_t hidden = kDefaultHidden);

  std::size_t outputs() const noexcept { return outputs_; }
  std::size_t hidden() const noexcept { return hidden_; }
  double alpha() const noexcept { return alpha_; }
  void set_alpha(double alpha);

  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }

  // Pre-activations [N] and probabilities [N] as graph nodes.
  NodeId logits(ParamBinder& bind, double u) const;
  NodeId forward(ParamBinder& bind, double u) const;
  std::vector<double> probabilities(double u) const;

 private:
  std::size_t outputs_;
  std::size_t hidden_;
  double alpha_ = 0.8;
  ParamStore params_;
};

// Linear ramp from 0.8 to 0.99 over `anneal_epochs`, then held.
double annealed_alpha(double epoch_progress, double anneal_epochs, double start = 0.8, double end = 0.99);

GateVector sample_bernoulli(std::span<const double> p, Rng& rng);

// sum_i log[g_i p_i + (1-g_i)(1-p_i)] for binary g.
double log_prob(const GateVector& g, std::span<const double> p);
// d log_prob / d p.
std::vector<double> log_prob_gradient(const GateVector& g, std::span<const double> p);

// Score-function estimate J * grad_psi log Pr(g). `backprop` maps an upstream
// gradient on the probability vector to parameter gradients.
std::vector<Tensor> reinforce_grad(double objective, const GateVector& g, std::span<const double> p,
                                   const std::function<std::vector<Tensor>(const Tensor&)>& backprop);

struct ConcreteSample {
  std::vector<double> gates;
  Tensor noise;  // the Logistic(0,1) draws used
};

// t > 0: sigmoid((log(p/(1-p)) + L) / t); t == 0: hard 1(log(p/(1-p)) + L > 0).
ConcreteSample sample_concrete(std::span<const double> p, double temperature, Rng& rng);

// Deterministic evaluation gate 1(p_i > 0.5); ties resolve to off.
GateVector test_time_gate(std::span<const double> p);

}  // namespace throttle
