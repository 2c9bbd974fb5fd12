#pragma once

#include <cstdint>
#include <variant>
#include <vector>

#include "throttle/params.hpp"

namespace throttle {

// Layer specs reference parameters by index into a ParamStore.
struct ConvLayer {
  std::size_t weight;  // [O,C,kh,kw]
  std::optional<std::size_t> bias;
  std::size_t stride = 1;
  std::size_t padding = 0;
};

struct LinearLayer {
  std::size_t weight;  // [in,out]
  std::optional<std::size_t> bias;
};

struct ReluLayer {};
struct MaxPoolLayer {
  std::size_t window = 2;
  std::size_t stride = 2;
};
struct GlobalPoolLayer {};
struct FlattenLayer {};

using Layer = std::variant<ConvLayer, LinearLayer, ReluLayer, MaxPoolLayer, GlobalPoolLayer,
                           FlattenLayer>;

// Straight-line stack of layers; used for gated components and for the
// un-gated glue around them.
struct Sequential {
  std::vector<Layer> layers;

  bool empty() const noexcept { return layers.empty(); }
  NodeId forward(ParamBinder& bind, NodeId x) const;
  // Shapes include the batch axis.
  Shape output_shape(const ParamStore& store, const Shape& input) const;
  // Forward FLOPs for one example with the given per-example input shape
  // (no batch axis), using the same accounting as Graph::flops().
  std::uint64_t flops(const ParamStore& store, const Shape& input) const;
};

}  // namespace throttle
