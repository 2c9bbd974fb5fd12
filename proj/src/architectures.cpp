#include "throttle/architectures.hpp"

#include <cmath>
#include <stdexcept>

#include "throttle/error.hpp"

namespace throttle {

namespace {

Shape batched(const Shape& s) {
  Shape out{1};
  out.insert(out.end(), s.begin(), s.end());
  return out;
}

Shape unbatched(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

bool width_gated(const std::string& name) {
  return name == "t-mlp" || name == "t-vgg" || name == "t-resnext-w";
}

class Builder {
 public:
  Builder(NetworkSpec& net, std::uint64_t seed) : net_(net), rng_(derive_seed(seed, "init")) {}

  ConvLayer conv(const std::string& name, std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                 bool bias, double gain = 1.0) {
    Tensor w({out, in, k, k});
    const double sd = gain * std::sqrt(2.0 / static_cast<double>(in * k * k));
    for (double& v : w.values()) v = sd * rng_.normal();
    ConvLayer layer{net_.params.add(name + ".weight", std::move(w)), std::nullopt, stride, k / 2};
    if (bias) layer.bias = net_.params.add(name + ".bias", Tensor({out}));
    return layer;
  }

  LinearLayer linear(const std::string& name, std::size_t in, std::size_t out, double gain = 1.0) {
    Tensor w({in, out});
    const double sd = gain * std::sqrt(2.0 / static_cast<double>(in));
    for (double& v : w.values()) v = sd * rng_.normal();
    return {net_.params.add(name + ".weight", std::move(w)), net_.params.add(name + ".bias", Tensor({out}))};
  }

  void glue(Sequential seq) {
    if (seq.empty()) return;
    NetworkItem item;
    item.glue = std::move(seq);
    advance(item);
    net_.items.push_back(std::move(item));
  }

  void gated(GatedModule module, bool residual = false, Sequential shortcut = {}) {
    NetworkItem item;
    item.kind = NetworkItem::Kind::kGated;
    item.module = net_.modules.size();
    item.residual = residual;
    item.shortcut = std::move(shortcut);
    net_.modules.push_back(std::move(module));
    advance(item);
    net_.items.push_back(std::move(item));
  }

  std::size_t channels() const { return shape_.at(1); }
  const Shape& shape() const { return shape_; }
  void start(const Shape& input) { shape_ = batched(input); }

 private:
  void advance(const NetworkItem& item) {
    try {
      if (item.kind == NetworkItem::Kind::kGlue) {
        shape_ = item.glue.output_shape(net_.params, shape_);
      } else {
        const Shape out = net_.modules[item.module].output_shape(net_.params, shape_);
        if (item.residual) {
          const Shape s = item.shortcut.empty() ? shape_ : item.shortcut.output_shape(net_.params, shape_);
          if (s != out)
            throw ShapeError("residual shortcut gives " + shape_string(s) + ", branch gives " + shape_string(out));
        }
        shape_ = out;
      }
    } catch (const ShapeError& e) {
      throw ConfigError(net_.config.name + ": " + e.what());
    }
  }

  NetworkSpec& net_;
  Rng rng_;
  Shape shape_;
};

void build_mlp(Builder& b, const ArchConfig& c) {
  b.glue({{FlattenLayer{}}});
  for (std::size_t s = 0; s < c.stages; ++s) {
    GatedModule m{.aggregation = Aggregation::kConcat, .axis = GatingAxis::kWidth};
    const std::size_t in = b.channels();
    for (std::size_t i = 0; i < c.components; ++i) {
      auto name = "layer" + std::to_string(s) + ".group" + std::to_string(i);
      m.components.push_back({{b.linear(name, in, c.widths[s] / c.components), ReluLayer{}}});
    }
    b.gated(std::move(m));
  }
  b.glue({{b.linear("head", b.channels(), c.classes, 0.5)}});
}

void build_vgg(Builder& b, const ArchConfig& c) {
  for (std::size_t s = 0; s < c.stages; ++s) {
    for (std::size_t l = 0; l < c.blocks; ++l) {
      GatedModule m{.aggregation = Aggregation::kConcat, .axis = GatingAxis::kWidth, .min_active = 1};
      const std::size_t in = b.channels();
      for (std::size_t i = 0; i < c.components; ++i) {
        auto name = "stage" + std::to_string(s) + ".conv" + std::to_string(l) + ".group" + std::to_string(i);
        m.components.push_back({{b.conv(name, in, c.widths[s] / c.components, 3, 1, true), ReluLayer{}}});
      }
      b.gated(std::move(m));
    }
    b.glue({{MaxPoolLayer{}}});
  }
  const std::size_t flat = shape_numel(b.shape());
  b.glue({{FlattenLayer{}, b.linear("fc", flat, c.head_width), ReluLayer{}}});
  b.glue({{b.linear("head", c.head_width, c.classes, 0.5)}});
}

void build_resnext(Builder& b, const ArchConfig& c) {
  // expand-conv init gain sqrt(n)
  const double branch_gain = std::sqrt(static_cast<double>(c.components));
  b.glue({{b.conv("stem", c.input[0], c.widths[0], 3, 1, true), ReluLayer{}}});
  for (std::size_t s = 0; s < c.stages; ++s) {
    for (std::size_t k = 0; k < c.blocks; ++k) {
      const std::size_t in = b.channels(), out = c.widths[s];
      const std::size_t stride = (s > 0 && k == 0) ? 2 : 1;
      const std::size_t d = out / c.components;
      const std::string prefix = "stage" + std::to_string(s) + ".block" + std::to_string(k);
      GatedModule m{.aggregation = Aggregation::kSum, .axis = GatingAxis::kWidth};
      for (std::size_t i = 0; i < c.components; ++i) {
        const std::string name = prefix + ".group" + std::to_string(i);
        m.components.push_back({{b.conv(name + ".reduce", in, d, 1, 1, true), ReluLayer{},
                                 b.conv(name + ".conv", d, d, 3, stride, true), ReluLayer{},
                                 b.conv(name + ".expand", d, out, 1, 1, true, branch_gain)}});
      }
      Sequential shortcut;
      if (stride != 1 || in != out) shortcut.layers.push_back(b.conv(prefix + ".shortcut", in, out, 1, stride, false));
      b.gated(std::move(m), true, std::move(shortcut));
    }
  }
  b.glue({{GlobalPoolLayer{}, b.linear("head", b.channels(), c.classes, 0.5)}});
}

void build_resnet_d(Builder& b, const ArchConfig& c) {
  b.glue({{b.conv("stem", c.input[0], c.widths[0], 3, 1, true), ReluLayer{}}});
  for (std::size_t s = 0; s < c.stages; ++s) {
    if (s > 0)
      b.glue({{b.conv("stage" + std::to_string(s) + ".transition", b.channels(), c.widths[s], 3, 2, true),
               ReluLayer{}}});
    const std::size_t w = c.widths[s];
    GatedModule m{.aggregation = Aggregation::kSum, .axis = GatingAxis::kDepth, .wiring = Wiring::kResidualChain};
    for (std::size_t i = 0; i < c.components; ++i) {
      const std::string name = "stage" + std::to_string(s) + ".block" + std::to_string(i);
      m.components.push_back({{ReluLayer{}, b.conv(name + ".conv1", w, w, 3, 1, true), ReluLayer{},
                               b.conv(name + ".conv2", w, w, 3, 1, true, 0.3)}});
    }
    b.gated(std::move(m));
  }
  b.glue({{ReluLayer{}, GlobalPoolLayer{}, b.linear("head", b.channels(), c.classes, 0.5)}});
}

void build_densenet(Builder& b, const ArchConfig& c) {
  b.glue({{b.conv("stem", c.input[0], 2 * c.growth, 3, 1, true)}});
  for (std::size_t s = 0; s < c.stages; ++s) {
    GatedModule m{.aggregation = Aggregation::kConcat, .axis = GatingAxis::kWidth, .wiring = Wiring::kDenseChain};
    std::size_t in = b.channels();
    for (std::size_t i = 0; i < c.components; ++i) {
      const std::string name = "block" + std::to_string(s) + ".layer" + std::to_string(i);
      m.components.push_back({{ReluLayer{}, b.conv(name, in, c.growth, 3, 1, true)}});
      in += c.growth;
    }
    b.gated(std::move(m));
    if (s + 1 < c.stages) {
      const std::size_t ch = b.channels();
      b.glue({{ReluLayer{}, b.conv("transition" + std::to_string(s), ch, ch / 2, 1, 1, true), MaxPoolLayer{}}});
    }
  }
  b.glue({{ReluLayer{}, GlobalPoolLayer{}, b.linear("head", b.channels(), c.classes, 0.5)}});
}

// Fills component_flops and glue_flops from the analytic per-layer model.
void account_flops(NetworkSpec& net) {
  const ParamStore& store = net.params;
  net.component_flops.assign(net.modules.size(), {});
  net.glue_flops = 0;
  Shape s = net.config.input;
  for (const NetworkItem& item : net.items) {
    if (item.kind == NetworkItem::Kind::kGlue) {
      net.glue_flops += item.glue.flops(store, s);
      s = unbatched(item.glue.output_shape(store, batched(s)));
      continue;
    }
    const GatedModule& m = net.modules[item.module];
    auto& costs = net.component_flops[item.module];
    Shape cur = s;
    for (const Sequential& comp : m.components) {
      const Shape out = unbatched(comp.output_shape(store, batched(cur)));
      const std::uint64_t out_numel = shape_numel(out);
      std::uint64_t cost = comp.flops(store, cur) + out_numel;
      if (m.wiring == Wiring::kResidualChain || (m.wiring == Wiring::kParallel && m.aggregation == Aggregation::kSum))
        cost += out_numel;
      costs.push_back(cost);
      if (m.wiring == Wiring::kDenseChain) cur[0] += out[0];
    }
    const Shape out = unbatched(m.output_shape(store, batched(s)));
    if (item.residual) {
      net.glue_flops += item.shortcut.flops(store, s) + 2 * shape_numel(out);
    }
    s = out;
  }
}

NodeId run_network(ParamBinder& bind, const NetworkSpec& net, NodeId x, const GatePlan& plan,
                   std::vector<ComponentCounters>* counters, const PlanNodes* nodes, bool dense) {
  check_plan(net, plan);
  if (nodes && nodes->nodes.size() != net.modules.size())
    throw std::invalid_argument("gate node list does not match the module count");
  if (counters) {
    counters->clear();
    for (const GatedModule& m : net.modules) counters->emplace_back(m.size());
  }
  Graph& g = bind.graph();
  for (const NetworkItem& item : net.items) {
    if (item.kind == NetworkItem::Kind::kGlue) {
      x = item.glue.forward(bind, x);
      continue;
    }
    const GatedModule& m = net.modules[item.module];
    ComponentCounters* c = counters ? &(*counters)[item.module] : nullptr;
    NodeId y;
    if (dense) {
      y = reference_forward(bind, m, x, plan[item.module], c);
    } else {
      GateSource src{&plan[item.module], nodes ? nodes->nodes[item.module] : std::nullopt};
      y = gated_forward(bind, m, x, src, c);
    }
    if (item.residual) {
      NodeId s = item.shortcut.empty() ? x : item.shortcut.forward(bind, x);
      y = g.relu(g.add(s, y));
    }
    x = y;
  }
  return x;
}

}  // namespace

ArchConfig ArchConfig::defaults(const std::string& name) {
  ArchConfig c;
  c.name = name;
  if (name == "t-mlp") return c;
  c.input = {3, 32, 32};
  if (name == "t-vgg") {
    c.components = 16;
    c.stages = 3;
    c.blocks = 2;
    c.widths = {64, 128, 256};
  } else if (name == "t-resnext-w") {
    c.components = 16;
    c.stages = 3;
    c.blocks = 3;
    c.widths = {64, 128, 256};
  } else if (name == "t-resnet-d") {
    c.components = 4;
    c.stages = 3;
    c.widths = {16, 32, 64};
  } else if (name == "t-densenet") {
    c.components = 16;
    c.stages = 3;
    c.growth = 12;
    c.widths = {};
  } else {
    throw ConfigError("model.name: unknown architecture '" + name + "'");
  }
  return c;
}

void ArchConfig::validate() const {
  auto fail = [](const std::string& msg) { throw ConfigError(msg); };
  if (name != "t-mlp" && name != "t-vgg" && name != "t-resnext-w" && name != "t-resnet-d" && name != "t-densenet")
    fail("model.name: unknown architecture '" + name + "'");
  if (components < 1) fail("model.components must be >= 1");
  if (stages < 1) fail("model.stages must be >= 1");
  if (blocks < 1) fail("model.blocks must be >= 1");
  if (classes < 2) fail("model.classes must be >= 2");
  if (input.size() != 3 || input[0] == 0 || input[1] == 0 || input[2] == 0)
    fail("model.input must be three positive extents (channels, height, width)");
  if (name == "t-densenet") {
    if (growth < 1) fail("model.growth must be >= 1");
    return;
  }
  if (widths.size() != stages)
    fail("model.widths has " + std::to_string(widths.size()) + " entries, expected one per stage (" +
         std::to_string(stages) + ")");
  for (std::size_t w : widths) {
    if (w == 0) fail("model.widths entries must be positive");
    if (width_gated(name) && w % components != 0)
      fail("model.widths entry " + std::to_string(w) + " is not divisible by model.components " +
           std::to_string(components));
  }
  if (name == "t-vgg" && head_width < 1) fail("model.head_width must be >= 1");
}

std::size_t NetworkSpec::total_components() const {
  std::size_t n = 0;
  for (const auto& m : modules) n += m.size();
  return n;
}

std::vector<ModuleLayout> NetworkSpec::layouts() const {
  std::vector<ModuleLayout> out;
  for (const auto& m : modules) out.push_back({m.size(), m.min_active, {}});
  return out;
}

StaticRule NetworkSpec::nested_rule() const {
  return config.name == "t-resnet-d" ? StaticRule::kDepthNested : StaticRule::kNested;
}

GatePlan NetworkSpec::all_on_plan() const {
  GatePlan plan;
  for (const auto& m : modules) plan.emplace_back(std::vector<double>(m.size(), 1.0));
  return plan;
}

GatePlan NetworkSpec::all_off_plan() const {
  GatePlan plan;
  for (const auto& m : modules) {
    std::vector<double> v(m.size(), 0.0);
    for (std::size_t i = 0; i < m.min_active; ++i) v[i] = 1.0;
    plan.emplace_back(std::move(v));
  }
  return plan;
}

NetworkSpec build_network(const ArchConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  NetworkSpec net;
  net.config = cfg;
  Builder b(net, seed);
  b.start(cfg.input);
  if (cfg.name == "t-mlp") build_mlp(b, cfg);
  else if (cfg.name == "t-vgg") build_vgg(b, cfg);
  else if (cfg.name == "t-resnext-w") build_resnext(b, cfg);
  else if (cfg.name == "t-resnet-d") build_resnet_d(b, cfg);
  else build_densenet(b, cfg);
  account_flops(net);
  return net;
}

NetworkSpec glue_only_network(const NetworkSpec& net) {
  NetworkSpec out;
  out.config = net.config;
  out.params = net.params;
  for (const NetworkItem& item : net.items) {
    if (item.kind == NetworkItem::Kind::kGlue) {
      out.items.push_back(item);
    } else if (item.residual) {
      NetworkItem glue;
      glue.glue = item.shortcut;
      glue.glue.layers.push_back(ReluLayer{});
      out.items.push_back(std::move(glue));
    }
  }
  account_flops(out);
  return out;
}

void check_plan(const NetworkSpec& net, const GatePlan& plan) {
  if (plan.size() != net.modules.size())
    throw std::invalid_argument("gate plan has " + std::to_string(plan.size()) + " modules, network has " +
                                std::to_string(net.modules.size()));
  for (std::size_t m = 0; m < plan.size(); ++m) {
    try {
      validate_gates(net.modules[m], plan[m]);
    } catch (const std::invalid_argument& e) {
      throw std::invalid_argument("module " + std::to_string(m) + ": " + e.what());
    }
  }
}

NodeId forward_with_plan(ParamBinder& bind, const NetworkSpec& net, NodeId x, const GatePlan& plan,
                         std::vector<ComponentCounters>* counters, const PlanNodes* nodes) {
  return run_network(bind, net, x, plan, counters, nodes, false);
}

NodeId reference_network_forward(ParamBinder& bind, const NetworkSpec& net, NodeId x, const GatePlan& plan,
                                 std::vector<ComponentCounters>* counters) {
  return run_network(bind, net, x, plan, counters, nullptr, true);
}

Tensor network_logits(const NetworkSpec& net, const Tensor& x, const GatePlan& plan) {
  Graph g;
  ParamBinder bind(g, net.params, false);
  return g.value(forward_with_plan(bind, net, g.constant(x), plan));
}

}  // namespace throttle
