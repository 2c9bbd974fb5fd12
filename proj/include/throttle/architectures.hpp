#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "throttle/gate_strategies.hpp"
#include "throttle/gating.hpp"

namespace throttle {

// Architecture selection and sizing. Fields that do not apply to the chosen
// architecture are ignored.
//
//   t-mlp        `stages` width-gated hidden layers (concat of n narrow
//                linear+relu groups), linear head
//   t-vgg        `stages` conv stages of `blocks` gated conv layers each
//                (n filter groups, concat, min one group active), max-pool
//                after every stage, FC head of `head_width` units
//   t-resnext-w  stem conv, `stages` x `blocks` residual blocks whose
//                residual branch is a sum of n grouped bottleneck paths
//   t-resnet-d   stem conv, `stages` stages of n depth-gated residual
//                blocks (one gated module per stage)
//   t-densenet   stem conv, `stages` dense blocks of n narrow layers with
//                growth rate `growth`, transition conv + pool between blocks
struct ArchConfig {
  std::string name = "t-mlp";
  std::size_t components = 4;
  std::size_t stages = 2;
  std::size_t blocks = 1;
  std::vector<std::size_t> widths{32, 32};
  std::size_t growth = 12;
  std::size_t head_width = 256;
  Shape input{1, 8, 8};  // per example: channels, height, width
  std::size_t classes = 10;

  static ArchConfig defaults(const std::string& name);
  // Throws ConfigError naming the offending field.
  void validate() const;
};

// One step of a network's trunk.
struct NetworkItem {
  enum class Kind { kGlue, kGated };
  Kind kind = Kind::kGlue;
  Sequential glue;
  std::size_t module = 0;
  // Gated items only: y = relu(shortcut(x) + module(x)); an empty shortcut
  // is the identity.
  bool residual = false;
  Sequential shortcut;
};

struct NetworkSpec {
  ArchConfig config;
  ParamStore params;
  std::vector<NetworkItem> items;
  std::vector<GatedModule> modules;
  // Per-example FLOPs charged to each gated component when it is active.
  std::vector<std::vector<std::uint64_t>> component_flops;
  // Per-example FLOPs of everything outside gated components.
  std::uint64_t glue_flops = 0;

  std::size_t module_count() const noexcept { return modules.size(); }
  std::size_t total_components() const;
  std::vector<ModuleLayout> layouts() const;
  // Static rule that "nested" denotes for this architecture: the
  // stage-wise depth rule for depth-gated networks, prefixes otherwise.
  StaticRule nested_rule() const;
  GatePlan all_on_plan() const;
  GatePlan all_off_plan() const;  // respects min_active
};

NetworkSpec build_network(const ArchConfig& cfg, std::uint64_t seed);

// Same parameters, every gated item removed (residual items degrade to
// relu(shortcut(x))).
NetworkSpec glue_only_network(const NetworkSpec& net);

// Per-module optional differentiable gate nodes (relaxed training).
struct PlanNodes {
  std::vector<std::optional<NodeId>> nodes;
};

// Logits [N, classes]. Gated-off components are never evaluated.
NodeId forward_with_plan(ParamBinder& bind, const NetworkSpec& net, NodeId x, const GatePlan& plan,
                         std::vector<ComponentCounters>* counters = nullptr,
                         const PlanNodes* nodes = nullptr);
// Dense masked form used as the oracle.
NodeId reference_network_forward(ParamBinder& bind, const NetworkSpec& net, NodeId x, const GatePlan& plan,
                                 std::vector<ComponentCounters>* counters = nullptr);

// Convenience wrapper running a private graph without gradients.
Tensor network_logits(const NetworkSpec& net, const Tensor& x, const GatePlan& plan);

// Throws std::invalid_argument when the plan does not fit the network.
void check_plan(const NetworkSpec& net, const GatePlan& plan);

}  // namespace throttle
