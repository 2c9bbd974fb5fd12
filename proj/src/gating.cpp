#include "throttle/gating.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>
#include <string>

#include "throttle/error.hpp"

namespace throttle {

GateVector::GateVector(std::vector<double> values)
    : GateVector(values, std::vector<double>(values.size(), 1.0)) {}

GateVector::GateVector(std::vector<double> values, std::vector<double> weights)
    : values_(std::move(values)), weights_(std::move(weights)) {
  if (values_.empty()) throw std::invalid_argument("gate vector needs at least one component");
  if (weights_.size() != values_.size())
    throw std::invalid_argument("gate vector has " + std::to_string(values_.size()) + " values but " +
                                std::to_string(weights_.size()) + " weights");
  bool any_positive = false;
  for (double w : weights_) {
    if (!(w >= 0.0)) throw std::invalid_argument("gate weights must be nonnegative");
    any_positive |= w > 0.0;
  }
  if (!any_positive) throw std::invalid_argument("gate weights need a positive entry");
  for (double v : values_)
    if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument("gate values must lie in [0,1]");
}

std::size_t GateVector::active_count() const {
  return static_cast<std::size_t>(std::count_if(values_.begin(), values_.end(), [](double v) { return v != 0.0; }));
}

bool GateVector::binary() const {
  return std::all_of(values_.begin(), values_.end(), [](double v) { return v == 0.0 || v == 1.0; });
}

std::vector<double> normalize_gate(std::span<const double> values) {
  double total = 0.0;
  for (double v : values) total += v;
  std::vector<double> out(values.size(), 0.0);
  if (total > 0.0)
    for (std::size_t i = 0; i < values.size(); ++i) out[i] = values[i] / total;
  return out;
}

std::vector<double> normalize_gate(const GateVector& g) { return normalize_gate(g.values()); }

double utilization(const GateVector& g) {
  double active = 0.0, total = 0.0;
  for (std::size_t i = 0; i < g.size(); ++i) {
    total += g.weights()[i];
    if (g.active(i)) active += g.weights()[i];
  }
  return active / total;
}

double network_utilization(std::span<const GateVector> gates) {
  if (gates.empty()) throw std::invalid_argument("network_utilization needs at least one module");
  double active = 0.0, total = 0.0;
  for (const GateVector& g : gates) {
    for (std::size_t i = 0; i < g.size(); ++i) {
      total += g.weights()[i];
      if (g.active(i)) active += g.weights()[i];
    }
  }
  return active / total;
}

double complexity_penalty(double c, double u, const PenaltySpec& spec) {
  const double d = spec.form == PenaltySpec::Form::kHinge ? std::max(0.0, c - u) : std::abs(c - u);
  return spec.exponent == 1 ? d : d * d;
}

double complexity_penalty_derivative(double c, double u, const PenaltySpec& spec) {
  const double diff = c - u;
  if (spec.form == PenaltySpec::Form::kHinge) {
    if (diff <= 0.0) return 0.0;
    return spec.exponent == 1 ? 1.0 : 2.0 * diff;
  }
  if (spec.exponent == 1) return diff > 0.0 ? 1.0 : (diff < 0.0 ? -1.0 : 0.0);
  return 2.0 * diff;
}

Shape GatedModule::output_shape(const ParamStore& store, const Shape& input) const {
  if (components.empty()) throw ShapeError("gated module has no components");
  if (min_active > components.size())
    throw ShapeError("gated module min_active " + std::to_string(min_active) + " exceeds " +
                     std::to_string(components.size()) + " components");
  switch (wiring) {
    case Wiring::kParallel: {
      const Shape first = components[0].output_shape(store, input);
      Shape out = first;
      if (aggregation == Aggregation::kConcat) out[1] = 0;
      for (const Sequential& c : components) {
        const Shape s = c.output_shape(store, input);
        bool ok = s.size() == first.size() && s.size() >= 2;
        for (std::size_t d = 0; ok && d < s.size(); ++d)
          ok = s[d] == first[d] || (aggregation == Aggregation::kConcat && d == 1);
        if (!ok)
          throw ShapeError("gated module: component outputs " + shape_string(first) + " and " +
                           shape_string(s) + " cannot be aggregated");
        if (aggregation == Aggregation::kConcat) out[1] += s[1];
      }
      return out;
    }
    case Wiring::kResidualChain:
      for (const Sequential& c : components) {
        const Shape s = c.output_shape(store, input);
        if (s != input)
          throw ShapeError("residual component maps " + shape_string(input) + " to " + shape_string(s));
      }
      return input;
    case Wiring::kDenseChain: {
      Shape cur = input;
      for (const Sequential& c : components) {
        const Shape s = c.output_shape(store, cur);
        if (s.size() != 4 || s[0] != cur[0] || s[2] != cur[2] || s[3] != cur[3])
          throw ShapeError("dense component maps " + shape_string(cur) + " to " + shape_string(s));
        cur[1] += s[1];
      }
      return cur;
    }
  }
  return input;
}

void validate_gates(const GatedModule& module, const GateVector& gates) {
  if (gates.size() != module.size())
    throw std::invalid_argument("gate vector has " + std::to_string(gates.size()) + " entries, module has " +
                                std::to_string(module.size()) + " components");
  if (gates.active_count() < module.min_active)
    throw std::invalid_argument("gate vector activates " + std::to_string(gates.active_count()) +
                                " components, module requires at least " + std::to_string(module.min_active));
}

double concat_gain(const GatedModule& module) {
  return module.axis == GatingAxis::kWidth && module.aggregation == Aggregation::kConcat
             ? static_cast<double>(module.size())
             : 1.0;
}

namespace {

struct ModuleRun {
  ParamBinder& bind;
  const GatedModule& module;
  const GateVector& gates;
  std::optional<NodeId> gate_node;
  ComponentCounters* counters;
  bool dense;  // evaluate every component (reference form)

  Graph& g() { return bind.graph(); }

  bool evaluate(std::size_t i) const { return dense || gates.active(i); }

  // Node or constant factor applied to component i's output.
  std::optional<NodeId> factor_node;
  std::vector<double> factors;

  void prepare_factors() {
    const bool width = module.axis == GatingAxis::kWidth;
    const double gain = concat_gain(module);
    factors = width ? normalize_gate(gates) : std::vector<double>(gates.values().begin(), gates.values().end());
    for (double& f : factors) f *= gain;
    if (gate_node) {
      factor_node = width ? g().normalize_l1(*gate_node) : *gate_node;
      if (gain != 1.0) factor_node = g().scale(*factor_node, gain);
    }
  }

  NodeId scaled(std::size_t i, NodeId y) {
    if (factor_node) return g().scale(y, g().select(*factor_node, i));
    return g().scale(y, factors[i]);
  }

  NodeId component(std::size_t i, NodeId x) {
    const std::uint64_t before = g().flops();
    NodeId y = scaled(i, module.components[i].forward(bind, x));
    if (counters) {
      counters->evaluations[i] += 1;
      counters->flops[i] += g().flops() - before;
    }
    return y;
  }

  void charge(std::size_t i, std::uint64_t flops) {
    if (counters) counters->flops[i] += flops;
  }

  NodeId run(NodeId x) {
    validate_gates(module, gates);
    if (gate_node && g().value(*gate_node).shape() != Shape{gates.size()})
      throw std::invalid_argument("gate node shape differs from gate vector");
    if (counters && counters->evaluations.size() != module.size()) *counters = ComponentCounters(module.size());
    prepare_factors();
    const ParamStore& store = bind.store();
    const Shape in_shape = g().value(x).shape();
    switch (module.wiring) {
      case Wiring::kParallel: {
        std::vector<NodeId> parts;
        std::vector<std::size_t> evaluated;
        for (std::size_t i = 0; i < module.size(); ++i) {
          if (evaluate(i)) {
            parts.push_back(component(i, x));
            evaluated.push_back(i);
          } else if (module.aggregation == Aggregation::kConcat) {
            parts.push_back(g().constant(Tensor(module.components[i].output_shape(store, in_shape))));
          }
        }
        if (module.aggregation == Aggregation::kConcat) return g().concat(parts, 1);
        if (parts.empty()) return g().constant(Tensor(module.output_shape(store, in_shape)));
        NodeId y = g().sum_components(parts);
        const std::uint64_t share = g().value(y).numel();
        for (std::size_t i : evaluated) charge(i, share);
        return y;
      }
      case Wiring::kResidualChain: {
        NodeId h = x;
        for (std::size_t i = 0; i < module.size(); ++i) {
          if (!evaluate(i)) continue;
          NodeId y = component(i, h);
          const std::uint64_t before = g().flops();
          h = g().add(h, y);
          charge(i, g().flops() - before);
        }
        return h;
      }
      case Wiring::kDenseChain: {
        std::vector<NodeId> features{x};
        Shape cur = in_shape;
        for (std::size_t i = 0; i < module.size(); ++i) {
          const Shape out = module.components[i].output_shape(store, cur);
          if (evaluate(i)) {
            NodeId input = features.size() == 1 ? features[0] : g().concat(features, 1);
            features.push_back(component(i, input));
          } else {
            features.push_back(g().constant(Tensor(out)));
          }
          cur[1] += out[1];
        }
        return g().concat(features, 1);
      }
    }
    return x;
  }
};

}  // namespace

NodeId gated_forward(ParamBinder& bind, const GatedModule& module, NodeId x, GateSource gates,
                     ComponentCounters* counters) {
  ModuleRun run{bind, module, *gates.gates, gates.node, counters, false};
  return run.run(x);
}

NodeId gated_forward(ParamBinder& bind, const GatedModule& module, NodeId x, const GateVector& gates,
                     ComponentCounters* counters) {
  return gated_forward(bind, module, x, GateSource{&gates, std::nullopt}, counters);
}

NodeId reference_forward(ParamBinder& bind, const GatedModule& module, NodeId x, const GateVector& gates,
                         ComponentCounters* counters) {
  ModuleRun run{bind, module, gates, std::nullopt, counters, true};
  return run.run(x);
}

}  // namespace throttle
