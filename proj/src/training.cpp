#include "throttle/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

#include <json.hpp>

#include "throttle/error.hpp"

namespace throttle {

namespace {

double mean_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  if (labels.size() != n) throw std::invalid_argument("label count differs from logit rows");
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * k;
    const double mx = *std::max_element(row, row + k);
    double s = 0.0;
    for (std::size_t j = 0; j < k; ++j) s += std::exp(row[j] - mx);
    total += std::log(s) + mx - row[labels[i]];
  }
  return total / static_cast<double>(n);
}

void check_finite(const LossBreakdown& loss, const char* phase, std::size_t epoch, std::size_t step) {
  if (!std::isfinite(loss.L) || !std::isfinite(loss.J))
    throw DivergenceError(std::string(phase) + " training diverged: non-finite loss at epoch " +
                          std::to_string(epoch) + ", step " + std::to_string(step));
}

// Penalty node on a rank-0 utilization node.
NodeId penalty_node(Graph& g, NodeId c, double u, const PenaltySpec& spec) {
  NodeId d = g.add(c, g.constant(Tensor::scalar(-u)));
  NodeId r = spec.form == PenaltySpec::Form::kHinge ? g.relu(d) : d;
  if (spec.exponent == 2) return g.mul(r, r);
  if (spec.form == PenaltySpec::Form::kHinge) return r;
  return g.add(g.relu(d), g.relu(g.scale(d, -1.0)));
}

std::size_t step_count(std::size_t count, std::size_t batch) { return (count + batch - 1) / batch; }

void accumulate(std::vector<Tensor>& total, const std::vector<Tensor>& grads, double weight) {
  if (total.empty()) {
    for (const Tensor& g : grads) total.emplace_back(g.shape());
  }
  for (std::size_t i = 0; i < grads.size(); ++i)
    for (std::size_t j = 0; j < grads[i].numel(); ++j) total[i][j] += weight * grads[i][j];
}

}  // namespace

LossBreakdown combined_loss(const Tensor& logits, std::span<const int> labels, const GatePlan& gates, double u,
                            const PenaltySpec& spec) {
  LossBreakdown r;
  r.L = mean_cross_entropy(logits, labels);
  r.c = network_utilization(gates);
  r.C = complexity_penalty(r.c, u, spec);
  r.J = r.L + spec.lambda * r.C;
  return r;
}

double cosine_lr(double epoch_progress, double eta_max, double eta_min, double t0, double t_mult) {
  if (!(t0 > 0.0) || !(t_mult >= 1.0)) throw std::invalid_argument("cosine schedule needs T0 > 0 and T_mult >= 1");
  double start = 0.0, period = t0;
  while (epoch_progress >= start + period) {
    start += period;
    period *= t_mult;
  }
  const double t_cur = epoch_progress - start;
  return eta_min + 0.5 * (eta_max - eta_min) * (1.0 + std::cos(std::numbers::pi * t_cur / period));
}

void optimizer_step(const OptimizerConfig& cfg, double lr, ParamStore& params, std::span<const Tensor> grads,
                    OptimizerState& state) {
  if (grads.size() != params.size())
    throw std::invalid_argument("optimizer got " + std::to_string(grads.size()) + " gradients for " +
                                std::to_string(params.size()) + " parameters");
  if (state.first.empty()) {
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.first.emplace_back(params.at(i).shape());
      if (cfg.kind == OptimizerConfig::Kind::kAdam) state.second.emplace_back(params.at(i).shape());
    }
  }
  double scale = 1.0;
  if (cfg.clip_norm > 0.0) {
    double sq = 0.0;
    for (const Tensor& g : grads)
      for (double v : g.values()) sq += v * v;
    const double norm = std::sqrt(sq);
    if (norm > cfg.clip_norm) scale = cfg.clip_norm / norm;
  }
  ++state.steps;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.steps));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.steps));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Tensor& theta = params.at(i);
    const Tensor& g = grads[i];
    if (g.shape() != theta.shape())
      throw std::invalid_argument("gradient shape " + shape_string(g.shape()) + " differs from parameter '" +
                                  params.name(i) + "' " + shape_string(theta.shape()));
    Tensor& m = state.first[i];
    for (std::size_t j = 0; j < theta.numel(); ++j) {
      const double grad = scale * g[j] + cfg.weight_decay * theta[j];
      if (cfg.kind == OptimizerConfig::Kind::kSgdMomentum) {
        m[j] = cfg.momentum * m[j] + grad;
        theta[j] -= lr * m[j];
      } else {
        Tensor& v = state.second[i];
        m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * grad;
        v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * grad * grad;
        theta[j] -= lr * (m[j] / bc1) / (std::sqrt(v[j] / bc2) + cfg.epsilon);
      }
    }
  }
}

URange anneal_u_sampler(std::size_t epoch, double t0, double step) {
  if (!(t0 >= 0.0 && t0 <= 1.0) || !(step > 0.0)) throw std::invalid_argument("annealed u needs t0 in [0,1], step > 0");
  return {std::max(0.0, t0 - step * static_cast<double>(epoch)), 1.0};
}

URange UDistribution::range(std::size_t epoch) const {
  switch (kind) {
    case Kind::kUniform01: return {0.0, 1.0};
    case Kind::kAnnealed: return anneal_u_sampler(epoch, t0, step);
    case Kind::kFixed: return {fixed, fixed};
  }
  return {0.0, 1.0};
}

double LrSchedule::at(double epoch_progress, double base_lr) const {
  return cosine ? cosine_lr(epoch_progress, base_lr, eta_min, t0, t_mult) : base_lr;
}

void TrainConfig::validate() const {
  auto fail = [](const std::string& m) { throw ConfigError(m); };
  if (epochs < 1) fail("train.epochs must be >= 1");
  if (batch_size < 1) fail("train.batch_size must be >= 1");
  if (!(optimizer.lr > 0.0)) fail("train.lr must be > 0");
  if (!(optimizer.momentum >= 0.0 && optimizer.momentum < 1.0)) fail("train.momentum must lie in [0,1)");
  if (!(optimizer.weight_decay >= 0.0)) fail("train.weight_decay must be >= 0");
  if (!(optimizer.clip_norm >= 0.0)) fail("train.clip_norm must be >= 0 (0 disables clipping)");
  if (!(penalty.lambda >= 0.0)) fail("controller.lambda must be >= 0");
  if (penalty.exponent != 1 && penalty.exponent != 2) fail("controller.exponent must be 1 or 2");
  if (schedule.cosine && (!(schedule.t0 > 0.0) || !(schedule.t_mult >= 1.0)))
    fail("train.t0 must be > 0 and train.t_mult >= 1 for the cosine schedule");
  if (!(schedule.eta_min >= 0.0)) fail("train.eta_min must be >= 0");
  if (u.kind == UDistribution::Kind::kFixed && !(u.fixed >= 0.0 && u.fixed <= 1.0)) fail("train.u_fixed must lie in [0,1]");
  if (u.kind == UDistribution::Kind::kAnnealed && (!(u.t0 >= 0.0 && u.t0 <= 1.0) || !(u.step > 0.0)))
    fail("train.u_t0 must lie in [0,1] and train.u_step must be > 0");
  if (estimator == Estimator::kConcrete && !(temperature > 0.0))
    fail("controller.temperature must be > 0 for the concrete estimator");
  if (samples < 1) fail("controller.samples must be >= 1");
  if (!(alpha_anneal_epochs >= 0.0)) fail("controller.alpha_anneal_epochs must be >= 0");
}

std::string metric_json(const MetricRecord& r) {
  nlohmann::ordered_json j;
  j["phase"] = r.phase;
  j["epoch"] = r.epoch;
  j["step"] = r.step;
  j["L"] = r.loss.L;
  j["C"] = r.loss.C;
  j["J"] = r.loss.J;
  j["utilization"] = r.loss.c;
  j["lr"] = r.lr;
  j["seed"] = r.seed;
  return j.dump();
}

GatePlan datapath_plan(const NetworkSpec& net, const TrainConfig& cfg, double u, Rng& rng) {
  const auto layouts = net.layouts();
  if (cfg.per_module_k) return per_module_k_plan(cfg.nested, layouts, rng);
  return static_plan(cfg.nested ? StaticRule::kNested : StaticRule::kIndependent, layouts, u, rng);
}

TrainSummary train_datapath(NetworkSpec& net, const Dataset& data, const TrainConfig& cfg, const MetricSink& sink) {
  cfg.validate();
  data.validate();
  Rng gates(derive_seed(cfg.seed, "gates"));
  BatchStream stream{&data, cfg.batch_size, true, cfg.seed, cfg.flip, cfg.pad_crop};
  OptimizerState state;
  TrainSummary summary;
  const std::size_t steps = step_count(data.count(), cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const URange range = cfg.u.range(epoch);
    const auto order = batch_indices(stream, epoch);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const double lr = cfg.schedule.at(static_cast<double>(epoch) + static_cast<double>(b) / steps, cfg.optimizer.lr);
      const Batch batch = make_batch(stream, order[b], epoch, b);
      Graph g;
      ParamBinder bind(g, net.params, true);
      LossBreakdown loss;
      NodeId objective;
      if (cfg.per_example_u) {
        std::vector<NodeId> losses;
        const std::size_t n = batch.labels.size();
        const std::size_t stride = batch.images.numel() / n;
        Shape one = batch.images.shape();
        one[0] = 1;
        for (std::size_t i = 0; i < n; ++i) {
          const double u = gates.uniform(range.lo, range.hi);
          const GatePlan plan = datapath_plan(net, cfg, u, gates);
          Tensor xi(one, std::vector<double>(batch.images.data() + i * stride, batch.images.data() + (i + 1) * stride));
          NodeId logits = forward_with_plan(bind, net, g.constant(std::move(xi)), plan);
          const int label = batch.labels[i];
          const LossBreakdown li = combined_loss(g.value(logits), std::span<const int>(&label, 1), plan, u, cfg.penalty);
          losses.push_back(g.softmax_cross_entropy(logits, std::span<const int>(&label, 1)));
          loss.L += li.L / n;
          loss.C += li.C / n;
          loss.c += li.c / n;
        }
        loss.J = loss.L + cfg.penalty.lambda * loss.C;
        objective = g.batch_mean(g.concat(losses, 0));
      } else {
        const double u = gates.uniform(range.lo, range.hi);
        const GatePlan plan = datapath_plan(net, cfg, u, gates);
        NodeId logits = forward_with_plan(bind, net, g.constant(batch.images), plan);
        loss = combined_loss(g.value(logits), batch.labels, plan, u, cfg.penalty);
        objective = g.batch_mean(g.softmax_cross_entropy(logits, batch.labels));
      }
      check_finite(loss, "data-path", epoch, summary.steps);
      const auto grads = bind.collect(g.backward(objective));
      optimizer_step(cfg.optimizer, lr, net.params, grads, state);
      epoch_loss += loss.L;
      if (sink) sink({"datapath", epoch, summary.steps, loss, lr, cfg.seed});
      ++summary.steps;
    }
    summary.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return summary;
}

RelaxedResult relaxed_objective(const NetworkSpec& net, const Tensor& x, std::span<const int> labels, double u,
                                std::span<const double> p, std::span<const double> noise, double temperature,
                                const PenaltySpec& spec) {
  const auto layouts = net.layouts();
  const std::size_t total = total_components(layouts);
  if (p.size() != total || noise.size() != total)
    throw std::invalid_argument("relaxed objective needs one probability and one noise value per component");
  Graph g;
  ParamBinder bind(g, net.params, false);
  std::vector<NodeId> p_leaves;
  PlanNodes nodes;
  GatePlan plan;
  std::vector<NodeId> sums;
  std::size_t offset = 0;
  for (const auto& layout : layouts) {
    std::vector<double> pm(p.begin() + static_cast<std::ptrdiff_t>(offset),
                           p.begin() + static_cast<std::ptrdiff_t>(offset + layout.size));
    std::vector<double> nm(noise.begin() + static_cast<std::ptrdiff_t>(offset),
                           noise.begin() + static_cast<std::ptrdiff_t>(offset + layout.size));
    Tensor pt = Tensor::vector(std::move(pm));
    pt.set_requires_grad(true);
    NodeId leaf = g.leaf(std::move(pt));
    NodeId z = g.binary_concrete(leaf, Tensor::vector(std::move(nm)), temperature);
    p_leaves.push_back(leaf);
    nodes.nodes.push_back(z);
    const auto zv = g.value(z).values();
    plan.emplace_back(std::vector<double>(zv.begin(), zv.end()));
    sums.push_back(g.reduce_sum(z));
    offset += layout.size;
  }
  NodeId logits = forward_with_plan(bind, net, g.constant(x), plan, nullptr, &nodes);
  NodeId task = g.batch_mean(g.softmax_cross_entropy(logits, labels));
  NodeId c = sums.size() == 1 ? sums[0] : g.sum_components(sums);
  c = g.scale(c, 1.0 / static_cast<double>(total));
  NodeId penalty = penalty_node(g, c, u, spec);
  NodeId j = g.add(task, g.scale(penalty, spec.lambda));

  RelaxedResult r;
  r.loss.L = g.value(task).item();
  r.loss.C = g.value(penalty).item();
  r.loss.J = r.loss.L + spec.lambda * r.loss.C;
  r.loss.c = g.value(c).item();
  const Gradients grads = g.backward(j);
  for (std::size_t m = 0; m < p_leaves.size(); ++m) {
    const Tensor* gp = grads.find(p_leaves[m]);
    for (std::size_t i = 0; i < layouts[m].size; ++i) r.grad_p.push_back(gp ? (*gp)[i] : 0.0);
  }
  return r;
}

TrainSummary train_controller(const NetworkSpec& net, BlindController& controller, const Dataset& data,
                              const TrainConfig& cfg, const MetricSink& sink) {
  cfg.validate();
  data.validate();
  const auto layouts = net.layouts();
  if (controller.outputs() != total_components(layouts))
    throw std::invalid_argument("controller has " + std::to_string(controller.outputs()) + " outputs, network has " +
                                std::to_string(total_components(layouts)) + " gated components");
  Rng rng(derive_seed(cfg.seed, "controller"));
  BatchStream stream{&data, cfg.batch_size, true, cfg.seed, cfg.flip, cfg.pad_crop};
  OptimizerState state;
  TrainSummary summary;
  double baseline = 0.0;
  bool have_baseline = false;
  const std::size_t steps = step_count(data.count(), cfg.batch_size);
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const URange range = cfg.u.range(epoch);
    const auto order = batch_indices(stream, epoch);
    double epoch_loss = 0.0;
    for (std::size_t b = 0; b < order.size(); ++b) {
      const double progress = static_cast<double>(epoch) + static_cast<double>(b) / steps;
      controller.set_alpha(annealed_alpha(progress, cfg.alpha_anneal_epochs));
      const double lr = cfg.schedule.at(progress, cfg.optimizer.lr);
      const Batch batch = make_batch(stream, order[b], epoch, b);
      const std::size_t n = batch.labels.size();
      const std::size_t samples = std::min(cfg.samples, n);
      std::vector<Tensor> total;
      LossBreakdown mean;
      double sample_j_sum = 0.0;
      for (std::size_t s = 0; s < samples; ++s) {
        const std::size_t lo = s * n / samples, hi = (s + 1) * n / samples;
        std::vector<std::size_t> rows(hi - lo);
        for (std::size_t i = 0; i < rows.size(); ++i) rows[i] = lo + i;
        const Dataset view{batch.images, batch.labels, data.classes, data.split};
        const Tensor x = view.gather(rows);
        const std::vector<int> y = view.gather_labels(rows);
        const double u = rng.uniform(range.lo, range.hi);

        Graph cg;
        ParamBinder cb(cg, controller.params(), true);
        NodeId p_node = controller.forward(cb, u);
        const auto pv = cg.value(p_node).values();
        const std::vector<double> p(pv.begin(), pv.end());
        std::vector<double> upstream;
        LossBreakdown loss;
        if (cfg.estimator == TrainConfig::Estimator::kReinforce) {
          std::vector<double> flat = flatten_plan({sample_bernoulli(p, rng)});
          enforce_min_active(flat, p, layouts);
          const GatePlan plan = split_plan(flat, layouts);
          loss = combined_loss(network_logits(net, x, plan), y, plan, u, cfg.penalty);
          const double advantage = loss.J - (cfg.baseline && have_baseline ? baseline : 0.0);
          upstream = log_prob_gradient(GateVector(flat), p);
          for (double& v : upstream) v *= advantage;
        } else {
          std::vector<double> noise(p.size());
          for (double& v : noise) v = rng.logistic();
          const RelaxedResult r = relaxed_objective(net, x, y, u, p, noise, cfg.temperature, cfg.penalty);
          loss = r.loss;
          upstream = r.grad_p;
        }
        sample_j_sum += loss.J;
        mean.L += loss.L / samples;
        mean.C += loss.C / samples;
        mean.c += loss.c / samples;
        const GradientSeed seed{p_node, Tensor::vector(std::move(upstream))};
        accumulate(total, cb.collect(cg.backward(std::span<const GradientSeed>(&seed, 1))),
                   1.0 / static_cast<double>(samples));
      }
      mean.J = mean.L + cfg.penalty.lambda * mean.C;
      check_finite(mean, "controller", epoch, summary.steps);
      if (cfg.baseline) {
        const double batch_j = sample_j_sum / samples;
        baseline = have_baseline ? 0.9 * baseline + 0.1 * batch_j : batch_j;
        have_baseline = true;
      }
      optimizer_step(cfg.optimizer, lr, controller.params(), total, state);
      epoch_loss += mean.L;
      if (sink) sink({"controller", epoch, summary.steps, mean, lr, cfg.seed});
      ++summary.steps;
    }
    summary.epoch_loss.push_back(epoch_loss / static_cast<double>(order.size()));
  }
  return summary;
}

}  // namespace throttle
