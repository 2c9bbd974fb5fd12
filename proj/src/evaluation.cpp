#include "throttle/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <ostream>
#include <stdexcept>
#include <thread>

#include "throttle/error.hpp"

namespace throttle {

namespace {

std::string fmt6(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}

std::uint64_t u_key(double u) { return static_cast<std::uint64_t>(std::llround(u * 1e9)); }

}  // namespace

Strategy parse_strategy(const std::string& name) {
  if (name == "nested") return Strategy::kNested;
  if (name == "independent") return Strategy::kIndependent;
  if (name == "all-on") return Strategy::kAllOn;
  if (name == "learned") return Strategy::kLearned;
  throw ConfigError("unknown strategy '" + name + "' (expected nested, independent, all-on or learned)");
}

std::string strategy_name(Strategy s) {
  switch (s) {
    case Strategy::kNested: return "nested";
    case Strategy::kIndependent: return "independent";
    case Strategy::kAllOn: return "all-on";
    case Strategy::kLearned: return "learned";
  }
  return "nested";
}

std::vector<double> default_grid(std::size_t points) {
  if (points < 2) throw std::invalid_argument("a u grid needs at least 2 points");
  std::vector<double> grid(points);
  for (std::size_t i = 0; i < points; ++i) grid[i] = static_cast<double>(i) / static_cast<double>(points - 1);
  return grid;
}

void SweepSpec::validate() const {
  if (grid.empty()) throw ConfigError("sweep.grid must not be empty");
  for (std::size_t i = 0; i < grid.size(); ++i) {
    if (!(grid[i] >= 0.0 && grid[i] <= 1.0)) throw ConfigError("sweep.grid values must lie in [0,1]");
    if (i > 0 && grid[i] < grid[i - 1]) throw ConfigError("sweep.grid must be sorted ascending");
  }
  if (batch_size < 1) throw ConfigError("sweep.batch_size must be >= 1");
}

GatePlan evaluation_plan(const NetworkSpec& net, Strategy strategy, double u, const BlindController* controller,
                         Rng& rng) {
  const auto layouts = net.layouts();
  switch (strategy) {
    case Strategy::kNested: return static_plan(net.nested_rule(), layouts, u, rng);
    case Strategy::kIndependent: return static_plan(StaticRule::kIndependent, layouts, u, rng);
    case Strategy::kAllOn: return static_plan(StaticRule::kAllOn, layouts, u, rng);
    case Strategy::kLearned: {
      if (!controller) throw std::invalid_argument("the learned strategy needs a controller");
      const std::vector<double> p = controller->probabilities(u);
      std::vector<double> flat = flatten_plan({test_time_gate(p)});
      enforce_min_active(flat, p, layouts);
      return split_plan(flat, layouts);
    }
  }
  return {};
}

std::uint64_t flop_count(const NetworkSpec& net, const GatePlan& plan) {
  check_plan(net, plan);
  std::uint64_t total = net.glue_flops;
  for (std::size_t m = 0; m < plan.size(); ++m)
    for (std::size_t i = 0; i < plan[m].size(); ++i)
      if (plan[m].active(i)) total += net.component_flops[m][i];
  return total;
}

std::vector<int> predict(const Tensor& logits) {
  const std::size_t n = logits.extent(0), k = logits.extent(1);
  std::vector<int> out(n);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = logits.data() + i * k;
    out[i] = static_cast<int>(std::max_element(row, row + k) - row);
  }
  return out;
}

CurveRecord evaluate_at(const NetworkSpec& net, Strategy strategy, double u, const Dataset& test,
                        const BlindController* controller, std::uint64_t seed, std::size_t batch_size,
                        std::vector<GatePlan>* plans) {
  if (!(u >= 0.0 && u <= 1.0)) throw std::invalid_argument("u must lie in [0,1]");
  test.validate();
  Rng rng(derive_seed(seed, "eval", u_key(u)));
  BatchStream stream{&test, batch_size, false, seed};
  double correct = 0.0, util = 0.0, flops = 0.0;
  std::optional<GatePlan> fixed;
  for (const auto& rows : batch_indices(stream, 0)) {
    GatePlan plan = (fixed && strategy != Strategy::kIndependent) ? *fixed
                                                                  : evaluation_plan(net, strategy, u, controller, rng);
    if (!fixed) fixed = plan;
    const Tensor logits = network_logits(net, test.gather(rows), plan);
    const auto pred = predict(logits);
    for (std::size_t i = 0; i < rows.size(); ++i) correct += pred[i] == test.labels[rows[i]];
    const double n = static_cast<double>(rows.size());
    util += n * network_utilization(plan);
    flops += n * static_cast<double>(flop_count(net, plan));
    if (plans) plans->push_back(std::move(plan));
  }
  const double count = static_cast<double>(test.count());
  return {strategy_name(strategy), u, util / count, correct / count, flops / count};
}

std::size_t worker_threads(std::size_t cap) {
  std::size_t n = std::max(1u, std::thread::hardware_concurrency());
  if (const char* env = std::getenv("THROTTLENET_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && v >= 1) n = static_cast<std::size_t>(v);
  }
  return cap ? std::min(n, cap) : n;
}

std::vector<CurveRecord> sweep(const NetworkSpec& net, const SweepSpec& spec, const Dataset& test,
                               const BlindController* controller) {
  spec.validate();
  if (spec.strategy == Strategy::kLearned && !controller)
    throw std::invalid_argument("the learned strategy needs a controller");
  std::vector<CurveRecord> out(spec.grid.size());
  const std::size_t workers = std::min(worker_threads(spec.threads), spec.grid.size());
  auto run = [&](std::size_t first) {
    for (std::size_t i = first; i < spec.grid.size(); i += workers)
      out[i] = evaluate_at(net, spec.strategy, spec.grid[i], test, controller, spec.seed, spec.batch_size);
  };
  if (workers <= 1) {
    run(0);
    return out;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        run(w);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return out;
}

double auc(std::span<const CurveRecord> records) {
  if (records.size() < 2) throw std::invalid_argument("auc needs at least 2 records");
  std::vector<CurveRecord> sorted(records.begin(), records.end());
  std::stable_sort(sorted.begin(), sorted.end(),
                   [](const CurveRecord& a, const CurveRecord& b) { return a.utilization < b.utilization; });
  const double span = sorted.back().utilization - sorted.front().utilization;
  if (!(span > 0.0)) {
    double s = 0.0;
    for (const auto& r : sorted) s += r.accuracy;
    return s / static_cast<double>(sorted.size());
  }
  double area = 0.0;
  for (std::size_t i = 1; i < sorted.size(); ++i)
    area += 0.5 * (sorted[i].accuracy + sorted[i - 1].accuracy) * (sorted[i].utilization - sorted[i - 1].utilization);
  return area / span;
}

std::vector<ProfileRow> utilization_profile(const NetworkSpec& net, Strategy strategy,
                                            const BlindController* controller, std::span<const double> grid,
                                            std::uint64_t seed) {
  std::vector<ProfileRow> rows;
  for (double u : grid) {
    Rng rng(derive_seed(seed, "eval", u_key(u)));
    const GatePlan plan = evaluation_plan(net, strategy, u, controller, rng);
    for (std::size_t m = 0; m < plan.size(); ++m) rows.push_back({u, m, utilization(plan[m])});
  }
  return rows;
}

void write_curve_csv(std::ostream& out, std::span<const CurveRecord> records) {
  out << "strategy,u_target,utilization,accuracy,flops\n";
  for (const auto& r : records)
    out << r.strategy << ',' << fmt6(r.u_target) << ',' << fmt6(r.utilization) << ',' << fmt6(r.accuracy) << ','
        << fmt6(r.flops) << '\n';
}

void write_profile_csv(std::ostream& out, std::span<const ProfileRow> rows) {
  out << "u_target,module_id,mean_activation\n";
  for (const auto& r : rows) out << fmt6(r.u_target) << ',' << r.module_id << ',' << fmt6(r.mean_activation) << '\n';
}

void write_curve_csv(const std::filesystem::path& path, std::span<const CurveRecord> records) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  write_curve_csv(out, records);
}

void write_profile_csv(const std::filesystem::path& path, std::span<const ProfileRow> rows) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'");
  write_profile_csv(out, rows);
}

}  // namespace throttle
