#include "throttle/layers.hpp"

#include "throttle/error.hpp"

namespace throttle {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};

Shape with_batch(const Shape& s) {
  Shape out{1};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

}  // namespace

NodeId Sequential::forward(ParamBinder& bind, NodeId x) const {
  Graph& g = bind.graph();
  for (const Layer& layer : layers) {
    x = std::visit(
        Overloaded{
            [&](const ConvLayer& c) {
              NodeId y = g.conv2d(x, bind(c.weight), {.stride = c.stride, .padding = c.padding});
              return c.bias ? g.bias_add(y, bind(*c.bias)) : y;
            },
            [&](const LinearLayer& l) {
              NodeId y = g.matmul(x, bind(l.weight));
              return l.bias ? g.bias_add(y, bind(*l.bias)) : y;
            },
            [&](const ReluLayer&) { return g.relu(x); },
            [&](const MaxPoolLayer& p) { return g.max_pool2d(x, {.window = p.window, .stride = p.stride}); },
            [&](const GlobalPoolLayer&) { return g.global_mean_pool(x); },
            [&](const FlattenLayer&) { return g.flatten(x); },
        },
        layer);
  }
  return x;
}

Shape Sequential::output_shape(const ParamStore& store, const Shape& input) const {
  Shape s = input;
  for (const Layer& layer : layers) {
    s = std::visit(
        Overloaded{
            [&](const ConvLayer& c) {
              const Shape& w = store.at(c.weight).shape();
              if (s.size() != 4 || w.size() != 4 || s[1] != w[1])
                throw ShapeError("conv layer: input " + shape_string(s) + " incompatible with kernel " +
                                 shape_string(w));
              return Shape{s[0], w[0], (s[2] + 2 * c.padding - w[2]) / c.stride + 1,
                           (s[3] + 2 * c.padding - w[3]) / c.stride + 1};
            },
            [&](const LinearLayer& l) {
              const Shape& w = store.at(l.weight).shape();
              if (s.size() != 2 || s[1] != w[0])
                throw ShapeError("linear layer: input " + shape_string(s) + " incompatible with weight " +
                                 shape_string(w));
              return Shape{s[0], w[1]};
            },
            [&](const ReluLayer&) { return s; },
            [&](const MaxPoolLayer& p) {
              if (s.size() != 4 || s[2] < p.window || s[3] < p.window)
                throw ShapeError("max pool: input " + shape_string(s) + " too small");
              return Shape{s[0], s[1], (s[2] - p.window) / p.stride + 1, (s[3] - p.window) / p.stride + 1};
            },
            [&](const GlobalPoolLayer&) {
              if (s.size() != 4) throw ShapeError("global pool: input " + shape_string(s) + " is not 4-d");
              return Shape{s[0], s[1]};
            },
            [&](const FlattenLayer&) { return Shape{s[0], shape_numel(s) / s[0]}; },
        },
        layer);
  }
  return s;
}

std::uint64_t Sequential::flops(const ParamStore& store, const Shape& input) const {
  std::uint64_t total = 0;
  Shape s = with_batch(input);
  for (const Layer& layer : layers) {
    Sequential single{{layer}};
    const Shape out = single.output_shape(store, s);
    const std::uint64_t out_numel = shape_numel(out);
    std::visit(Overloaded{
                   [&](const ConvLayer& c) {
                     const Shape& w = store.at(c.weight).shape();
                     total += 2 * out_numel * w[1] * w[2] * w[3];
                     if (c.bias) total += out_numel;
                   },
                   [&](const LinearLayer& l) {
                     const Shape& w = store.at(l.weight).shape();
                     total += 2 * w[0] * w[1];
                     if (l.bias) total += out_numel;
                   },
                   [&](const ReluLayer&) { total += out_numel; },
                   [&](const MaxPoolLayer& p) { total += out_numel * p.window * p.window; },
                   [&](const GlobalPoolLayer&) { total += shape_numel(s); },
                   [&](const FlattenLayer&) {},
               },
               layer);
    s = out;
  }
  return total;
}

}  // namespace throttle
