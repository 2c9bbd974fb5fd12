#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include "throttle/layers.hpp"

namespace throttle {

// Activation pattern of one gated module. Values lie in [0,1]; they are
// binary at test time and may be relaxed during Concrete training. Weights
// are the per-component resource weights used by utilization().
class GateVector {
 public:
  // Uniform weights.
  explicit GateVector(std::vector<double> values);
  GateVector(std::vector<double> values, std::vector<double> weights);

  std::size_t size() const noexcept { return values_.size(); }
  std::span<const double> values() const noexcept { return values_; }
  std::span<const double> weights() const noexcept { return weights_; }
  double operator[](std::size_t i) const { return values_[i]; }
  bool active(std::size_t i) const { return values_[i] != 0.0; }
  std::size_t active_count() const;
  bool binary() const;

  friend bool operator==(const GateVector&, const GateVector&) = default;

 private:
  std::vector<double> values_;
  std::vector<double> weights_;
};

// One gate vector per gated module of a network, in network order.
using GatePlan = std::vector<GateVector>;

enum class Aggregation { kConcat, kSum };
enum class GatingAxis { kWidth, kDepth };
// How components are connected:
//   parallel       all components see the module input; outputs aggregated
//   residual_chain component i maps h -> h + g_i * f_i(h) (depth gating)
//   dense_chain    component i sees concat(input, earlier outputs); all
//                  outputs are concatenated onto the input (DenseNet)
enum class Wiring { kParallel, kResidualChain, kDenseChain };

struct GatedModule {
  std::vector<Sequential> components;
  Aggregation aggregation = Aggregation::kSum;
  GatingAxis axis = GatingAxis::kWidth;
  Wiring wiring = Wiring::kParallel;
  std::size_t min_active = 0;

  std::size_t size() const noexcept { return components.size(); }
  // Validates the aggregation contract and returns the (batched) output
  // shape, which does not depend on the gates.
  Shape output_shape(const ParamStore& store, const Shape& input) const;
};

// Per-component bookkeeping for one module, owned by the caller of a
// forward pass. FLOPs are per batch, as executed.
struct ComponentCounters {
  std::vector<std::uint64_t> evaluations;
  std::vector<std::uint64_t> flops;

  explicit ComponentCounters(std::size_t n = 0) : evaluations(n, 0), flops(n, 0) {}
};

std::vector<double> normalize_gate(const GateVector& g);
std::vector<double> normalize_gate(std::span<const double> values);

// Weighted active fraction ||w||_1^-1 * sum_i w_i * 1(g_i != 0).
double utilization(const GateVector& g);
// Utilization of the concatenation of all module gate vectors.
double network_utilization(std::span<const GateVector> gates);

struct PenaltySpec {
  enum class Form { kHinge, kDist };
  Form form = Form::kDist;
  int exponent = 2;
  double lambda = 10.0;
};

// hinge: max(0, c-u)^p, dist: |c-u|^p.
double complexity_penalty(double c, double u, const PenaltySpec& spec);
// d penalty / d c (one-sided zero at the kink).
double complexity_penalty_derivative(double c, double u, const PenaltySpec& spec);

// Optional differentiable gate source: a rank-1 node whose values equal the
// GateVector's values (used for relaxed Concrete gates).
struct GateSource {
  const GateVector* gates;
  std::optional<NodeId> node;
};

// Constant applied on top of the normalized gate: n for width-gated concat
// modules (so the all-on gate leaves every slab unscaled), 1 otherwise.
double concat_gain(const GatedModule& module);

// Executes the gated module, evaluating only components with g_i != 0.
// Width-gated modules scale component outputs by concat_gain * normalized
// gate; depth gating applies the raw gate. Skipped concat slabs are
// zero-filled.
NodeId gated_forward(ParamBinder& bind, const GatedModule& module, NodeId x, GateSource gates,
                     ComponentCounters* counters = nullptr);
NodeId gated_forward(ParamBinder& bind, const GatedModule& module, NodeId x, const GateVector& gates,
                     ComponentCounters* counters = nullptr);

// Dense masked form: evaluates every component, multiplies by the
// (normalized) gate and aggregates. Oracle for gated_forward.
NodeId reference_forward(ParamBinder& bind, const GatedModule& module, NodeId x, const GateVector& gates,
                         ComponentCounters* counters = nullptr);

// Checks gate count and min-active; throws std::invalid_argument.
void validate_gates(const GatedModule& module, const GateVector& gates);

}  // namespace throttle
