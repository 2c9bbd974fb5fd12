#include "throttle/graph.hpp"

#include <algorithm>
#include <array>
#include <atomic>
#include <cmath>
#include <limits>
#include <string>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include "kernels.hpp"
#include "throttle/error.hpp"

#ifdef __GLIBC__
namespace {
// Keep large per-step buffers on the heap.
[[maybe_unused]] const bool kAllocatorTuned = [] {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  return true;
}();
}  // namespace
#endif

namespace throttle {

namespace {

std::atomic<int> g_backward_fault{-1};

constexpr std::array kDifferentiableOps = {
    OpKind::kMatMul,         OpKind::kConv2d,         OpKind::kAdd,
    OpKind::kScalarMul,      OpKind::kMul,            OpKind::kRelu,
    OpKind::kSigmoid,        OpKind::kConcat,         OpKind::kSumComponents,
    OpKind::kGlobalMeanPool, OpKind::kFlatten,        OpKind::kSoftmaxCrossEntropy,
    OpKind::kBatchMean,      OpKind::kBiasAdd,        OpKind::kMaxPool2d,
    OpKind::kReduceSum,      OpKind::kSelect,         OpKind::kNormalizeL1,
    OpKind::kBinaryConcrete,
};

[[noreturn]] void shape_fail(OpKind kind, const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail);
}

[[noreturn]] void shape_fail(OpKind kind, const Shape& a, const Shape& b,
                             const std::string& detail) {
  throw ShapeError(std::string(op_name(kind)) + ": " + detail + " (got " + shape_string(a) +
                   " and " + shape_string(b) + ")");
}

double logistic_sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

void accumulate(std::optional<Tensor>& slot, Tensor&& grad) {
  if (!slot) {
    slot.emplace(std::move(grad));
    return;
  }
  double* dst = slot->data();
  const double* src = grad.data();
  for (std::size_t i = 0, n = grad.numel(); i < n; ++i) dst[i] += src[i];
}

Shape drop_leading(const Shape& s) { return Shape(s.begin() + 1, s.end()); }

}  // namespace

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kLeaf: return "leaf";
    case OpKind::kMatMul: return "matmul";
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kAdd: return "add";
    case OpKind::kScalarMul: return "scalar_mul";
    case OpKind::kMul: return "mul";
    case OpKind::kRelu: return "relu";
    case OpKind::kSigmoid: return "sigmoid";
    case OpKind::kConcat: return "concat";
    case OpKind::kSumComponents: return "sum_components";
    case OpKind::kGlobalMeanPool: return "global_mean_pool";
    case OpKind::kFlatten: return "flatten";
    case OpKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case OpKind::kBatchMean: return "batch_mean";
    case OpKind::kBiasAdd: return "bias_add";
    case OpKind::kMaxPool2d: return "max_pool2d";
    case OpKind::kReduceSum: return "reduce_sum";
    case OpKind::kSelect: return "select";
    case OpKind::kNormalizeL1: return "normalize_l1";
    case OpKind::kBinaryConcrete: return "binary_concrete";
  }
  return "unknown";
}

std::span<const OpKind> differentiable_ops() { return kDifferentiableOps; }

const Tensor* Gradients::find(NodeId id) const {
  if (id.index >= grads_.size() || !grads_[id.index]) return nullptr;
  return &*grads_[id.index];
}

const Tensor& Gradients::at(NodeId id) const {
  const Tensor* t = find(id);
  if (!t) throw std::out_of_range("no gradient recorded for node " + std::to_string(id.index));
  return *t;
}

NodeId Graph::push(Node node) {
  if (nodes_.size() >= std::numeric_limits<std::uint32_t>::max())
    throw std::length_error("graph node limit reached");
  if (node.kind != OpKind::kLeaf) {
    node.needs_grad = std::any_of(node.inputs.begin(), node.inputs.end(),
                                  [this](NodeId in) { return nodes_[in.index].needs_grad; });
  }
  nodes_.push_back(std::move(node));
  return NodeId{static_cast<std::uint32_t>(nodes_.size() - 1)};
}

const Graph::Node& Graph::node(NodeId id) const {
  if (id.index >= nodes_.size())
    throw std::out_of_range("node " + std::to_string(id.index) + " not in graph");
  return nodes_[id.index];
}

const Tensor& Graph::value(NodeId id) const { return node(id).value; }
OpKind Graph::kind(NodeId id) const { return node(id).kind; }
bool Graph::needs_grad(NodeId id) const { return node(id).needs_grad; }

NodeId Graph::leaf(Tensor value) {
  Node n;
  n.needs_grad = value.requires_grad();
  n.value = std::move(value);
  return push(std::move(n));
}

NodeId Graph::constant(Tensor value) {
  value.set_requires_grad(false);
  return leaf(std::move(value));
}

NodeId Graph::matmul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.rank() != 2 || bv.rank() != 2 || av.extent(1) != bv.extent(0))
    shape_fail(OpKind::kMatMul, av.shape(), bv.shape(), "need [m,k] x [k,n]");
  const std::size_t m = av.extent(0), k = av.extent(1), n = bv.extent(1);
  Tensor out({m, n});
  kernels::gemm(m, n, k, av.data(), bv.data(), out.data(), false);
  flops_ += 2 * m * n * k;
  Node node{.kind = OpKind::kMatMul, .inputs = {a, b}, .value = std::move(out)};
  return push(std::move(node));
}

namespace {
kernels::ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, std::size_t stride,
                                    std::size_t padding) {
  kernels::ConvGeometry g{};
  g.batch = x.extent(0);
  g.channels = x.extent(1);
  g.height = x.extent(2);
  g.width = x.extent(3);
  g.kernel_h = w.extent(2);
  g.kernel_w = w.extent(3);
  g.stride = stride;
  g.padding = padding;
  g.out_h = (g.height + 2 * padding - g.kernel_h) / stride + 1;
  g.out_w = (g.width + 2 * padding - g.kernel_w) / stride + 1;
  return g;
}
}  // namespace

NodeId Graph::conv2d(NodeId x, NodeId weight, Conv2dOptions options) {
  const Tensor& xv = value(x);
  const Tensor& wv = value(weight);
  if (xv.rank() != 4 || wv.rank() != 4)
    shape_fail(OpKind::kConv2d, xv.shape(), wv.shape(), "need [N,C,H,W] input and [O,C,kh,kw] kernel");
  if (xv.extent(1) != wv.extent(1))
    shape_fail(OpKind::kConv2d, xv.shape(), wv.shape(), "input channels differ from kernel channels");
  if (options.stride == 0) shape_fail(OpKind::kConv2d, "stride must be positive");
  if (xv.extent(2) + 2 * options.padding < wv.extent(2) ||
      xv.extent(3) + 2 * options.padding < wv.extent(3))
    shape_fail(OpKind::kConv2d, xv.shape(), wv.shape(), "kernel larger than padded input");

  const auto g = conv_geometry(xv, wv, options.stride, options.padding);
  const std::size_t out_ch = wv.extent(0);
  const std::size_t plane = g.out_h * g.out_w;
  std::vector<double> cols(g.patch() * g.positions());
  kernels::im2col(g, xv.data(), cols.data());
  std::vector<double> y2(out_ch * g.positions());
  kernels::gemm(out_ch, g.positions(), g.patch(), wv.data(), cols.data(), y2.data(), false);

  Tensor out({g.batch, out_ch, g.out_h, g.out_w});
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t o = 0; o < out_ch; ++o)
      std::copy_n(y2.data() + o * g.positions() + n * plane, plane,
                  out.data() + (n * out_ch + o) * plane);
  flops_ += 2 * out_ch * g.patch() * g.positions();

  Node node{.kind = OpKind::kConv2d, .inputs = {x, weight}, .value = std::move(out)};
  node.stride = options.stride;
  node.padding = options.padding;
  return push(std::move(node));
}

NodeId Graph::add(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.shape() != bv.shape()) shape_fail(OpKind::kAdd, av.shape(), bv.shape(), "shapes differ");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] + bv[i];
  flops_ += out.numel();
  return push(Node{.kind = OpKind::kAdd, .inputs = {a, b}, .value = std::move(out)});
}

NodeId Graph::scale(NodeId x, double factor) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = factor * xv[i];
  flops_ += out.numel();
  Node node{.kind = OpKind::kScalarMul, .inputs = {x}, .value = std::move(out)};
  node.scalar = factor;
  return push(std::move(node));
}

NodeId Graph::scale(NodeId x, NodeId factor) {
  const Tensor& xv = value(x);
  const Tensor& fv = value(factor);
  if (fv.numel() != 1)
    shape_fail(OpKind::kScalarMul, xv.shape(), fv.shape(), "factor must have one element");
  const double s = fv[0];
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = s * xv[i];
  flops_ += out.numel();
  return push(Node{.kind = OpKind::kScalarMul, .inputs = {x, factor}, .value = std::move(out)});
}

NodeId Graph::mul(NodeId a, NodeId b) {
  const Tensor& av = value(a);
  const Tensor& bv = value(b);
  if (av.shape() != bv.shape()) shape_fail(OpKind::kMul, av.shape(), bv.shape(), "shapes differ");
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = av[i] * bv[i];
  flops_ += out.numel();
  return push(Node{.kind = OpKind::kMul, .inputs = {a, b}, .value = std::move(out)});
}

NodeId Graph::relu(NodeId x) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) out[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  flops_ += out.numel();
  return push(Node{.kind = OpKind::kRelu, .inputs = {x}, .value = std::move(out)});
}

NodeId Graph::sigmoid(NodeId x, double mix) {
  const Tensor& xv = value(x);
  Tensor out(xv.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    const double s = logistic_sigmoid(xv[i]);
    out[i] = mix * s + (1.0 - mix) * (1.0 - s);
  }
  flops_ += out.numel();
  Node node{.kind = OpKind::kSigmoid, .inputs = {x}, .value = std::move(out)};
  node.scalar = mix;
  return push(std::move(node));
}

NodeId Graph::concat(std::span<const NodeId> inputs, std::size_t axis) {
  if (inputs.empty()) shape_fail(OpKind::kConcat, "needs at least one input");
  const Shape& first = value(inputs[0]).shape();
  if (axis >= first.size()) shape_fail(OpKind::kConcat, "axis out of range for " + shape_string(first));
  std::size_t total = 0;
  for (NodeId id : inputs) {
    const Shape& s = value(id).shape();
    bool ok = s.size() == first.size();
    for (std::size_t d = 0; ok && d < s.size(); ++d) ok = d == axis || s[d] == first[d];
    if (!ok) shape_fail(OpKind::kConcat, first, s, "extents differ off the concat axis");
    total += s[axis];
  }
  Shape out_shape = first;
  out_shape[axis] = total;
  Tensor out(out_shape);
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= first[d];
  for (std::size_t d = axis + 1; d < first.size(); ++d) inner *= first[d];
  std::size_t offset = 0;
  for (NodeId id : inputs) {
    const Tensor& v = value(id);
    const std::size_t block = v.extent(axis) * inner;
    for (std::size_t o = 0; o < outer; ++o)
      std::copy_n(v.data() + o * block, block, out.data() + o * total * inner + offset);
    offset += block;
  }
  Node node{.kind = OpKind::kConcat, .inputs = {inputs.begin(), inputs.end()}, .value = std::move(out)};
  node.axis = axis;
  return push(std::move(node));
}

NodeId Graph::sum_components(std::span<const NodeId> inputs) {
  if (inputs.empty()) shape_fail(OpKind::kSumComponents, "needs at least one input");
  const Tensor& first = value(inputs[0]);
  Tensor out(first.shape());
  for (NodeId id : inputs) {
    const Tensor& v = value(id);
    if (v.shape() != first.shape())
      shape_fail(OpKind::kSumComponents, first.shape(), v.shape(), "component shapes differ");
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] += v[i];
  }
  flops_ += inputs.size() * out.numel();
  return push(Node{.kind = OpKind::kSumComponents, .inputs = {inputs.begin(), inputs.end()},
                   .value = std::move(out)});
}

NodeId Graph::global_mean_pool(NodeId x) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) shape_fail(OpKind::kGlobalMeanPool, "need [N,C,H,W], got " + shape_string(xv.shape()));
  const std::size_t nc = xv.extent(0) * xv.extent(1);
  const std::size_t plane = xv.extent(2) * xv.extent(3);
  Tensor out({xv.extent(0), xv.extent(1)});
  for (std::size_t i = 0; i < nc; ++i) {
    double s = 0.0;
    for (std::size_t q = 0; q < plane; ++q) s += xv[i * plane + q];
    out[i] = s / static_cast<double>(plane);
  }
  flops_ += xv.numel();
  return push(Node{.kind = OpKind::kGlobalMeanPool, .inputs = {x}, .value = std::move(out)});
}

NodeId Graph::flatten(NodeId x) {
  const Tensor& xv = value(x);
  if (xv.rank() < 2) shape_fail(OpKind::kFlatten, "need rank >= 2, got " + shape_string(xv.shape()));
  Tensor out({xv.extent(0), xv.numel() / xv.extent(0)},
             std::vector<double>(xv.values().begin(), xv.values().end()));
  return push(Node{.kind = OpKind::kFlatten, .inputs = {x}, .value = std::move(out)});
}

NodeId Graph::softmax_cross_entropy(NodeId logits, std::span<const int> labels) {
  const Tensor& lv = value(logits);
  if (lv.rank() != 2)
    shape_fail(OpKind::kSoftmaxCrossEntropy, "need logits [N,K], got " + shape_string(lv.shape()));
  const std::size_t n = lv.extent(0), k = lv.extent(1);
  if (labels.size() != n)
    shape_fail(OpKind::kSoftmaxCrossEntropy, lv.shape(), Shape{labels.size()}, "label count differs from batch");
  Tensor probs({n, k});
  Tensor out({n});
  for (std::size_t i = 0; i < n; ++i) {
    const int label = labels[i];
    if (label < 0 || static_cast<std::size_t>(label) >= k)
      shape_fail(OpKind::kSoftmaxCrossEntropy, "label " + std::to_string(label) + " outside [0," +
                                                    std::to_string(k) + ")");
    const double* row = lv.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = mx + std::log(z);
    for (std::size_t j = 0; j < k; ++j) probs[i * k + j] = std::exp(row[j] - log_z);
    out[i] = log_z - row[label];
  }
  Node node{.kind = OpKind::kSoftmaxCrossEntropy, .inputs = {logits}, .value = std::move(out)};
  node.labels.assign(labels.begin(), labels.end());
  node.saved = std::move(probs);
  return push(std::move(node));
}

NodeId Graph::batch_mean(NodeId x) {
  const Tensor& xv = value(x);
  if (xv.rank() < 1) shape_fail(OpKind::kBatchMean, "need a leading batch axis, got a scalar");
  const std::size_t n = xv.extent(0);
  const std::size_t row = xv.numel() / n;
  Tensor out(drop_leading(xv.shape()));
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t j = 0; j < row; ++j) out[j] += xv[b * row + j];
  for (std::size_t j = 0; j < row; ++j) out[j] /= static_cast<double>(n);
  return push(Node{.kind = OpKind::kBatchMean, .inputs = {x}, .value = std::move(out)});
}

NodeId Graph::bias_add(NodeId x, NodeId bias) {
  const Tensor& xv = value(x);
  const Tensor& bv = value(bias);
  if (xv.rank() < 2 || bv.rank() != 1 || bv.extent(0) != xv.extent(1))
    shape_fail(OpKind::kBiasAdd, xv.shape(), bv.shape(), "need [N,C,...] and [C]");
  const std::size_t n = xv.extent(0), c = xv.extent(1);
  const std::size_t inner = xv.numel() / (n * c);
  Tensor out(xv.shape());
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch) {
      const std::size_t base = (b * c + ch) * inner;
      for (std::size_t q = 0; q < inner; ++q) out[base + q] = xv[base + q] + bv[ch];
    }
  flops_ += out.numel();
  return push(Node{.kind = OpKind::kBiasAdd, .inputs = {x, bias}, .value = std::move(out)});
}

NodeId Graph::max_pool2d(NodeId x, Pool2dOptions options) {
  const Tensor& xv = value(x);
  if (xv.rank() != 4) shape_fail(OpKind::kMaxPool2d, "need [N,C,H,W], got " + shape_string(xv.shape()));
  if (options.window == 0 || options.stride == 0) shape_fail(OpKind::kMaxPool2d, "window and stride must be positive");
  const std::size_t h = xv.extent(2), w = xv.extent(3);
  if (h < options.window || w < options.window)
    shape_fail(OpKind::kMaxPool2d, "window larger than input " + shape_string(xv.shape()));
  const std::size_t oh = (h - options.window) / options.stride + 1;
  const std::size_t ow = (w - options.window) / options.stride + 1;
  const std::size_t planes = xv.extent(0) * xv.extent(1);
  Tensor out({xv.extent(0), xv.extent(1), oh, ow});
  Tensor argmax(out.shape());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* src = xv.data() + p * h * w;
    for (std::size_t i = 0; i < oh; ++i)
      for (std::size_t j = 0; j < ow; ++j) {
        std::size_t best = (i * options.stride) * w + j * options.stride;
        for (std::size_t a = 0; a < options.window; ++a)
          for (std::size_t b = 0; b < options.window; ++b) {
            const std::size_t idx = (i * options.stride + a) * w + j * options.stride + b;
            if (src[idx] > src[best]) best = idx;
          }
        const std::size_t o = (p * oh + i) * ow + j;
        out[o] = src[best];
        argmax[o] = static_cast<double>(p * h * w + best);
      }
  }
  flops_ += out.numel() * options.window * options.window;
  Node node{.kind = OpKind::kMaxPool2d, .inputs = {x}, .value = std::move(out)};
  node.window = options.window;
  node.stride = options.stride;
  node.saved = std::move(argmax);
  return push(std::move(node));
}

NodeId Graph::reduce_sum(NodeId x) {
  const Tensor& xv = value(x);
  double s = 0.0;
  for (double v : xv.values()) s += v;
  return push(Node{.kind = OpKind::kReduceSum, .inputs = {x}, .value = Tensor::scalar(s)});
}

NodeId Graph::select(NodeId vector, std::size_t index) {
  const Tensor& v = value(vector);
  if (v.rank() != 1 || index >= v.extent(0))
    shape_fail(OpKind::kSelect, "index " + std::to_string(index) + " invalid for " + shape_string(v.shape()));
  Node node{.kind = OpKind::kSelect, .inputs = {vector}, .value = Tensor::scalar(v[index])};
  node.axis = index;
  return push(std::move(node));
}

NodeId Graph::normalize_l1(NodeId gates) {
  const Tensor& g = value(gates);
  if (g.rank() != 1) shape_fail(OpKind::kNormalizeL1, "need a rank-1 gate vector, got " + shape_string(g.shape()));
  double total = 0.0;
  for (double v : g.values()) {
    if (v < 0.0) shape_fail(OpKind::kNormalizeL1, "gate values must be nonnegative");
    total += v;
  }
  Tensor out(g.shape());
  if (total > 0.0)
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = g[i] / total;
  flops_ += out.numel();
  Node node{.kind = OpKind::kNormalizeL1, .inputs = {gates}, .value = std::move(out)};
  node.scalar = total;
  return push(std::move(node));
}

NodeId Graph::binary_concrete(NodeId probabilities, Tensor noise, double temperature) {
  const Tensor& p = value(probabilities);
  if (noise.shape() != p.shape())
    shape_fail(OpKind::kBinaryConcrete, p.shape(), noise.shape(), "noise shape differs from probabilities");
  if (!(temperature > 0.0)) shape_fail(OpKind::kBinaryConcrete, "temperature must be positive");
  Tensor out(p.shape());
  for (std::size_t i = 0; i < out.numel(); ++i) {
    if (!(p[i] > 0.0 && p[i] < 1.0)) shape_fail(OpKind::kBinaryConcrete, "probabilities must lie in (0,1)");
    const double logit = std::log(p[i]) - std::log1p(-p[i]);
    out[i] = logistic_sigmoid((logit + noise[i]) / temperature);
  }
  flops_ += out.numel();
  Node node{.kind = OpKind::kBinaryConcrete, .inputs = {probabilities}, .value = std::move(out)};
  node.scalar = temperature;
  node.saved = std::move(noise);
  return push(std::move(node));
}

Gradients Graph::backward(NodeId loss) {
  const Tensor& lv = value(loss);
  if (lv.numel() != 1)
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_string(lv.shape()));
  GradientSeed seed{loss, Tensor(lv.shape(), 1.0)};
  return backward(std::span<const GradientSeed>(&seed, 1));
}

Gradients Graph::backward(std::span<const GradientSeed> seeds) {
  if (swept_) throw std::logic_error("backward: graph already swept; build a new graph per forward pass");
  swept_ = true;
  Gradients result;
  auto& grads = result.grads_;
  grads.resize(nodes_.size());
  std::size_t top = 0;
  for (const auto& seed : seeds) {
    const Node& n = node(seed.node);
    if (seed.upstream.shape() != n.value.shape())
      throw ShapeError("backward: seed shape " + shape_string(seed.upstream.shape()) +
                       " differs from node shape " + shape_string(n.value.shape()));
    accumulate(grads[seed.node.index], Tensor(seed.upstream));
    top = std::max<std::size_t>(top, seed.node.index + 1);
  }
  for (std::size_t i = top; i-- > 0;) {
    const Node& n = nodes_[i];
    if (n.kind == OpKind::kLeaf || !n.needs_grad || !grads[i]) continue;
    backward_node(n, *grads[i], grads);
  }
  return result;
}

void Graph::backward_node(const Node& n, const Tensor& up,
                          std::vector<std::optional<Tensor>>& grads) const {
  const bool faulty = g_backward_fault.load(std::memory_order_relaxed) == static_cast<int>(n.kind);
  auto emit = [&](std::size_t slot, Tensor&& g) {
    if (faulty)
      for (double& v : g.values()) v *= 1.5;
    accumulate(grads[n.inputs[slot].index], std::move(g));
  };
  auto wants = [&](std::size_t slot) { return nodes_[n.inputs[slot].index].needs_grad; };
  auto in = [&](std::size_t slot) -> const Tensor& { return nodes_[n.inputs[slot].index].value; };

  switch (n.kind) {
    case OpKind::kLeaf:
      break;
    case OpKind::kMatMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      const std::size_t m = a.extent(0), k = a.extent(1), nn = b.extent(1);
      if (wants(0)) {
        std::vector<double> bt(k * nn);
        kernels::transpose(k, nn, b.data(), bt.data());
        Tensor da(a.shape());
        kernels::gemm(m, k, nn, up.data(), bt.data(), da.data(), false);
        emit(0, std::move(da));
      }
      if (wants(1)) {
        std::vector<double> at(m * k);
        kernels::transpose(m, k, a.data(), at.data());
        Tensor db(b.shape());
        kernels::gemm(k, nn, m, at.data(), up.data(), db.data(), false);
        emit(1, std::move(db));
      }
      break;
    }
    case OpKind::kConv2d: {
      const Tensor& x = in(0);
      const Tensor& w = in(1);
      const auto g = conv_geometry(x, w, n.stride, n.padding);
      const std::size_t out_ch = w.extent(0);
      const std::size_t plane = g.out_h * g.out_w;
      const std::size_t positions = g.positions();
      std::vector<double> dy2(out_ch * positions);
      for (std::size_t b = 0; b < g.batch; ++b)
        for (std::size_t o = 0; o < out_ch; ++o)
          std::copy_n(up.data() + (b * out_ch + o) * plane, plane,
                      dy2.data() + o * positions + b * plane);
      if (wants(1)) {
        std::vector<double> cols(g.patch() * positions);
        kernels::im2col(g, x.data(), cols.data());
        Tensor dw(w.shape());
        kernels::gemm_nt(out_ch, g.patch(), positions, dy2.data(), cols.data(), dw.data());
        emit(1, std::move(dw));
      }
      if (wants(0)) {
        std::vector<double> wt(w.numel());
        kernels::transpose(out_ch, g.patch(), w.data(), wt.data());
        std::vector<double> dcols(g.patch() * positions);
        kernels::gemm(g.patch(), positions, out_ch, wt.data(), dy2.data(), dcols.data(), false);
        Tensor dx(x.shape());
        kernels::col2im_add(g, dcols.data(), dx.data());
        emit(0, std::move(dx));
      }
      break;
    }
    case OpKind::kAdd:
      if (wants(0)) emit(0, Tensor(up));
      if (wants(1)) emit(1, Tensor(up));
      break;
    case OpKind::kScalarMul: {
      const Tensor& x = in(0);
      const double s = n.inputs.size() == 2 ? in(1)[0] : n.scalar;
      if (wants(0)) {
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = s * up[i];
        emit(0, std::move(dx));
      }
      if (n.inputs.size() == 2 && wants(1)) {
        double ds = 0.0;
        for (std::size_t i = 0; i < x.numel(); ++i) ds += up[i] * x[i];
        emit(1, Tensor(in(1).shape(), ds));
      }
      break;
    }
    case OpKind::kMul: {
      const Tensor& a = in(0);
      const Tensor& b = in(1);
      if (wants(0)) {
        Tensor da(a.shape());
        for (std::size_t i = 0; i < da.numel(); ++i) da[i] = up[i] * b[i];
        emit(0, std::move(da));
      }
      if (wants(1)) {
        Tensor db(b.shape());
        for (std::size_t i = 0; i < db.numel(); ++i) db[i] = up[i] * a[i];
        emit(1, std::move(db));
      }
      break;
    }
    case OpKind::kRelu: {
      const Tensor& x = in(0);
      Tensor dx(x.shape());
      for (std::size_t i = 0; i < dx.numel(); ++i) dx[i] = x[i] > 0.0 ? up[i] : 0.0;
      emit(0, std::move(dx));
      break;
    }
    case OpKind::kSigmoid: {
      const Tensor& x = in(0);
      Tensor dx(x.shape());
      const double slope = 2.0 * n.scalar - 1.0;
      for (std::size_t i = 0; i < dx.numel(); ++i) {
        const double s = logistic_sigmoid(x[i]);
        dx[i] = up[i] * slope * s * (1.0 - s);
      }
      emit(0, std::move(dx));
      break;
    }
    case OpKind::kConcat: {
      const Shape& shape = n.value.shape();
      std::size_t outer = 1, inner = 1;
      for (std::size_t d = 0; d < n.axis; ++d) outer *= shape[d];
      for (std::size_t d = n.axis + 1; d < shape.size(); ++d) inner *= shape[d];
      const std::size_t total = shape[n.axis];
      std::size_t offset = 0;
      for (std::size_t s = 0; s < n.inputs.size(); ++s) {
        const Tensor& v = in(s);
        const std::size_t block = v.extent(n.axis) * inner;
        if (wants(s)) {
          Tensor dv(v.shape());
          for (std::size_t o = 0; o < outer; ++o)
            std::copy_n(up.data() + o * total * inner + offset, block, dv.data() + o * block);
          emit(s, std::move(dv));
        }
        offset += block;
      }
      break;
    }
    case OpKind::kSumComponents:
      for (std::size_t s = 0; s < n.inputs.size(); ++s)
        if (wants(s)) emit(s, Tensor(up));
      break;
    case OpKind::kGlobalMeanPool: {
      const Tensor& x = in(0);
      const std::size_t plane = x.extent(2) * x.extent(3);
      Tensor dx(x.shape());
      const double inv = 1.0 / static_cast<double>(plane);
      for (std::size_t i = 0; i < up.numel(); ++i)
        for (std::size_t q = 0; q < plane; ++q) dx[i * plane + q] = up[i] * inv;
      emit(0, std::move(dx));
      break;
    }
    case OpKind::kFlatten:
      emit(0, Tensor(in(0).shape(), std::vector<double>(up.values().begin(), up.values().end())));
      break;
    case OpKind::kSoftmaxCrossEntropy: {
      const Tensor& probs = n.saved;
      const std::size_t rows = probs.extent(0), k = probs.extent(1);
      Tensor dl(probs.shape());
      for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < k; ++j) dl[i * k + j] = up[i] * probs[i * k + j];
        dl[i * k + static_cast<std::size_t>(n.labels[i])] -= up[i];
      }
      emit(0, std::move(dl));
      break;
    }
    case OpKind::kBatchMean: {
      const Tensor& x = in(0);
      const std::size_t rows = x.extent(0);
      const std::size_t row = x.numel() / rows;
      Tensor dx(x.shape());
      const double inv = 1.0 / static_cast<double>(rows);
      for (std::size_t b = 0; b < rows; ++b)
        for (std::size_t j = 0; j < row; ++j) dx[b * row + j] = up[j] * inv;
      emit(0, std::move(dx));
      break;
    }
    case OpKind::kBiasAdd: {
      const Tensor& x = in(0);
      if (wants(0)) emit(0, Tensor(up));
      if (wants(1)) {
        const std::size_t rows = x.extent(0), c = x.extent(1);
        const std::size_t inner = x.numel() / (rows * c);
        Tensor db({c});
        for (std::size_t b = 0; b < rows; ++b)
          for (std::size_t ch = 0; ch < c; ++ch) {
            const std::size_t base = (b * c + ch) * inner;
            for (std::size_t q = 0; q < inner; ++q) db[ch] += up[base + q];
          }
        emit(1, std::move(db));
      }
      break;
    }
    case OpKind::kMaxPool2d: {
      Tensor dx(in(0).shape());
      for (std::size_t o = 0; o < up.numel(); ++o)
        dx[static_cast<std::size_t>(n.saved[o])] += up[o];
      emit(0, std::move(dx));
      break;
    }
    case OpKind::kReduceSum:
      emit(0, Tensor(in(0).shape(), up[0]));
      break;
    case OpKind::kSelect: {
      Tensor dv(in(0).shape());
      dv[n.axis] = up[0];
      emit(0, std::move(dv));
      break;
    }
    case OpKind::kNormalizeL1: {
      const Tensor& g = in(0);
      Tensor dg(g.shape());
      const double total = n.scalar;
      if (total > 0.0) {
        double dot = 0.0;
        for (std::size_t i = 0; i < g.numel(); ++i) dot += up[i] * n.value[i];
        for (std::size_t i = 0; i < g.numel(); ++i) dg[i] = (up[i] - dot) / total;
      }
      emit(0, std::move(dg));
      break;
    }
    case OpKind::kBinaryConcrete: {
      const Tensor& p = in(0);
      const double t = n.scalar;
      Tensor dp(p.shape());
      for (std::size_t i = 0; i < dp.numel(); ++i) {
        const double y = n.value[i];
        dp[i] = up[i] * y * (1.0 - y) / (t * p[i] * (1.0 - p[i]));
      }
      emit(0, std::move(dp));
      break;
    }
  }
}

namespace testing {
void set_backward_fault(std::optional<OpKind> kind) {
  g_backward_fault.store(kind ? static_cast<int>(*kind) : -1, std::memory_order_relaxed);
}
}  // namespace testing

}  // namespace throttle
