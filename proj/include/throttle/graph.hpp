#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <span>
#include <string_view>
#include <vector>

#include "throttle/tensor.hpp"

namespace throttle {

enum class OpKind : std::uint8_t {
  kLeaf,
  kMatMul,
  kConv2d,
  kAdd,
  kScalarMul,
  kMul,
  kRelu,
  kSigmoid,
  kConcat,
  kSumComponents,
  kGlobalMeanPool,
  kFlatten,
  kSoftmaxCrossEntropy,
  kBatchMean,
  kBiasAdd,
  kMaxPool2d,
  kReduceSum,
  kSelect,
  kNormalizeL1,
  kBinaryConcrete,
};

std::string_view op_name(OpKind kind);
// Every differentiable kind, in declaration order (excludes kLeaf).
std::span<const OpKind> differentiable_ops();

struct NodeId {
  std::uint32_t index = 0;
  friend bool operator==(NodeId, NodeId) = default;
};

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct Pool2dOptions {
  std::size_t window = 2;
  std::size_t stride = 2;
};

class Graph;

// Result of a reverse sweep: dLoss/dNode for every node that the loss
// depends on through a differentiable path.
class Gradients {
 public:
  const Tensor* find(NodeId id) const;
  const Tensor& at(NodeId id) const;

 private:
  friend class Graph;
  std::vector<std::optional<Tensor>> grads_;
};

struct GradientSeed {
  NodeId node;
  Tensor upstream;
};

// Records a forward computation as it is executed and replays it in
// reverse for gradients. Nodes are appended in execution order, so node
// inputs always precede the node. A graph owns its node values; it is not
// safe to mutate one graph from several threads.
//
// Shape contracts per kind:
//   matmul            [m,k] x [k,n] -> [m,n]
//   conv2d            [N,C,H,W] x [O,C,kh,kw] -> [N,O,Ho,Wo]
//   add, mul          identical shapes
//   scale             any x, constant or single-element node factor
//   relu, sigmoid     elementwise; sigmoid(mix) = mix*s(x) + (1-mix)*(1-s(x))
//   concat            identical shapes except on the concat axis
//   sum_components    identical shapes
//   global_mean_pool  [N,C,H,W] -> [N,C]
//   flatten           [N,...] -> [N, prod(...)]
//   softmax_ce        logits [N,K], N labels in [0,K) -> per-example [N]
//   batch_mean        [N,...] -> [...]
//   bias_add          [N,C,...] + [C]
//   max_pool2d        [N,C,H,W] -> [N,C,Ho,Wo]
//   reduce_sum        any -> scalar
//   select            rank-1 [n], index < n -> scalar
//   normalize_l1      nonnegative rank-1 gate vector -> g/sum(g), 0 if sum 0
//   binary_concrete   probabilities in (0,1) -> relaxed gates (see below)
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  Graph(Graph&&) = default;
  Graph& operator=(Graph&&) = default;

  // Leaf whose gradient is reported when value.requires_grad() is set.
  NodeId leaf(Tensor value);
  NodeId constant(Tensor value);

  NodeId matmul(NodeId a, NodeId b);
  NodeId conv2d(NodeId x, NodeId weight, Conv2dOptions options = {});
  NodeId add(NodeId a, NodeId b);
  NodeId scale(NodeId x, double factor);
  NodeId scale(NodeId x, NodeId factor);
  NodeId mul(NodeId a, NodeId b);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x, double mix = 1.0);
  NodeId concat(std::span<const NodeId> inputs, std::size_t axis);
  NodeId sum_components(std::span<const NodeId> inputs);
  NodeId global_mean_pool(NodeId x);
  NodeId flatten(NodeId x);
  NodeId softmax_cross_entropy(NodeId logits, std::span<const int> labels);
  NodeId batch_mean(NodeId x);
  NodeId bias_add(NodeId x, NodeId bias);
  NodeId max_pool2d(NodeId x, Pool2dOptions options = {});
  NodeId reduce_sum(NodeId x);
  NodeId select(NodeId vector, std::size_t index);
  NodeId normalize_l1(NodeId gates);
  // sigmoid((log(p/(1-p)) + noise) / temperature), elementwise; noise is a
  // fixed Logistic(0,1) sample of the same shape as p. temperature > 0.
  NodeId binary_concrete(NodeId probabilities, Tensor noise,
                         double temperature);

  const Tensor& value(NodeId id) const;
  OpKind kind(NodeId id) const;
  std::size_t size() const noexcept { return nodes_.size(); }
  bool needs_grad(NodeId id) const;

  // Floating-point operations executed by forward rules so far
  // (multiply-accumulate = 2). Loss ops are not counted.
  std::uint64_t flops() const noexcept { return flops_; }

  // Reverse sweep from a scalar loss. A graph supports a single sweep.
  Gradients backward(NodeId loss);
  // Reverse sweep from arbitrary upstream gradients; seeds on the same
  // node accumulate.
  Gradients backward(std::span<const GradientSeed> seeds);

 private:
  struct Node {
    OpKind kind = OpKind::kLeaf;
    std::vector<NodeId> inputs;
    Tensor value;
    bool needs_grad = false;
    // Per-kind attributes; unused fields stay at their defaults.
    std::size_t axis = 0;
    std::size_t stride = 1;
    std::size_t padding = 0;
    std::size_t window = 0;
    double scalar = 0.0;
    std::vector<int> labels;
    Tensor saved;
  };

  NodeId push(Node node);
  const Node& node(NodeId id) const;
  void backward_node(const Node& n, const Tensor& upstream,
                     std::vector<std::optional<Tensor>>& grads) const;

  std::vector<Node> nodes_;
  std::uint64_t flops_ = 0;
  bool swept_ = false;
};

namespace testing {
// Scales the gradient produced by the backward rule of `kind` by 1.5 so
// that gradient checkers can be exercised against a known-bad rule. Pass
// std::nullopt to restore correct behaviour.
void set_backward_fault(std::optional<OpKind> kind);
}  // namespace testing

}  // namespace throttle
