#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "throttle/architectures.hpp"
#include "throttle/data_io.hpp"
#include "throttle/gate_strategies.hpp"

namespace throttle {

struct LossBreakdown {
  double L = 0.0;  // mean cross-entropy
  double C = 0.0;  // complexity penalty
  double J = 0.0;  // L + lambda * C
  double c = 0.0;  // network utilization
};

// L from [N,K] logits, c from the plan, C = penalty(c, u).
LossBreakdown combined_loss(const Tensor& logits, std::span<const int> labels, const GatePlan& gates, double u,
                            const PenaltySpec& spec);

// Warm-restart cosine schedule; `epoch_progress` counts epochs (fractional
// within an epoch). Period i has length t0 * t_mult^i.
double cosine_lr(double epoch_progress, double eta_max, double eta_min, double t0, double t_mult);

struct OptimizerConfig {
  enum class Kind { kSgdMomentum, kAdam };
  Kind kind = Kind::kSgdMomentum;
  double lr = 0.05;
  double momentum = 0.9;
  double weight_decay = 5e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  double clip_norm = 0.0;  // > 0: rescale raw gradients to this global L2 norm
};

struct OptimizerState {
  std::vector<Tensor> first;   // momentum buffer / Adam first moment
  std::vector<Tensor> second;  // Adam second moment
  std::uint64_t steps = 0;
};

// SGD: v = momentum*v + (g + wd*theta); theta -= lr*v.
// Adam: bias-corrected moments of (g + wd*theta).
// With clip_norm > 0, g is first scaled by min(1, clip_norm / ||g||).
void optimizer_step(const OptimizerConfig& cfg, double lr, ParamStore& params, std::span<const Tensor> grads,
                    OptimizerState& state);

struct URange {
  double lo = 0.0;
  double hi = 1.0;
};

// Uniform[t, 1] with t = max(0, t0 - step*epoch).
URange anneal_u_sampler(std::size_t epoch, double t0, double step);

struct UDistribution {
  enum class Kind { kUniform01, kAnnealed, kFixed };
  Kind kind = Kind::kUniform01;
  double t0 = 1.0;
  double step = 0.05;
  double fixed = 1.0;

  URange range(std::size_t epoch) const;
};

// Cosine warm restarts with eta_max = the optimizer's base rate, or a
// constant rate.
struct LrSchedule {
  bool cosine = true;
  double eta_min = 0.0;
  double t0 = 10.0;
  double t_mult = 2.0;

  double at(double epoch_progress, double base_lr) const;
};

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t batch_size = 32;
  OptimizerConfig optimizer;
  LrSchedule schedule;
  PenaltySpec penalty;
  UDistribution u;
  bool nested = true;           // gating order for phase 1 (false: random positions)
  bool per_module_k = false;    // draw k per module instead of one u
  bool per_example_u = false;   // one u (and plan) per example instead of per batch
  enum class Estimator { kReinforce, kConcrete };
  Estimator estimator = Estimator::kReinforce;
  double temperature = 0.1;
  std::size_t samples = 4;       // gate samples per batch (REINFORCE)
  bool baseline = false;         // moving-average baseline for REINFORCE
  double alpha_anneal_epochs = 20.0;
  bool flip = false;
  std::size_t pad_crop = 0;
  std::uint64_t seed = 0;

  // Throws ConfigError naming the offending field.
  void validate() const;
};

struct MetricRecord {
  std::string phase;
  std::size_t epoch = 0;
  std::size_t step = 0;
  LossBreakdown loss;
  double lr = 0.0;
  std::uint64_t seed = 0;
};

std::string metric_json(const MetricRecord& r);

using MetricSink = std::function<void(const MetricRecord&)>;

struct TrainSummary {
  std::vector<double> epoch_loss;  // mean L per epoch
  std::size_t steps = 0;
};

// Phase 1: optimizes the data path on L under random gate plans.
TrainSummary train_datapath(NetworkSpec& net, const Dataset& data, const TrainConfig& cfg,
                            const MetricSink& sink = {});

// Phase 2: optimizes the controller on J with the data path frozen.
TrainSummary train_controller(const NetworkSpec& net, BlindController& controller, const Dataset& data,
                              const TrainConfig& cfg, const MetricSink& sink = {});

// Phase-1 gate plan for control value u.
GatePlan datapath_plan(const NetworkSpec& net, const TrainConfig& cfg, double u, Rng& rng);

struct RelaxedResult {
  LossBreakdown loss;          // c is the relaxed utilization sum(w*z)/sum(w)
  std::vector<double> grad_p;  // dJ/dp
};

// J for relaxed Concrete gates z = sigmoid((logit p + noise) / t) on one
// batch with the data path frozen, and its gradient with respect to p.
RelaxedResult relaxed_objective(const NetworkSpec& net, const Tensor& x, std::span<const int> labels, double u,
                                std::span<const double> p, std::span<const double> noise, double temperature,
                                const PenaltySpec& spec);

}  // namespace throttle
