#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "throttle/gate_strategies.hpp"
#include "throttle/graph.hpp"
#include "throttle/rng.hpp"

namespace throttle {

// One instance of an operation under test: the builder receives leaf nodes
// for `inputs` (in order) and returns the node whose output is checked.
struct OpCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<NodeId(Graph&, std::span<const NodeId>)> build;
  // Size of the random offset applied to every input element before
  // checking; keeps evaluation points off kinks and ties.
  double jitter = 1e-3;
};

// Compares backward() against central differences of the scalar
// sum(r * output) for a fixed random r. Returns the maximum over all input
// elements of |analytic - numeric| / max(1, |analytic|, |numeric|).
double finite_diff_check(const OpCase& op, double step, Rng& rng);

// One case per differentiable OpKind, with random inputs.
std::vector<OpCase> standard_op_cases(Rng& rng);

struct GradcheckRow {
  std::string name;
  double max_error = 0.0;
  bool passed = false;
};

// Runs every case `trials` times (fresh random inputs per trial) and keeps
// the worst error per case.
std::vector<GradcheckRow> run_gradcheck(
    const std::function<std::vector<OpCase>(Rng&)>& make_cases, int trials, double step,
    double tolerance, std::uint64_t seed);

// Same measure for the controller parameters at control value u, on
// sum(r * probabilities).
double controller_finite_diff_check(const BlindController& controller, double u, double step, Rng& rng);

// Per-op rows (standard_op_cases) followed by a "controller" row covering a
// freshly initialized controller at several u values.
std::vector<GradcheckRow> full_gradcheck(int trials, double step, double tolerance, std::uint64_t seed);

}  // namespace throttle
