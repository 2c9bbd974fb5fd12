#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <span>
#include <string>
#include <vector>

#include "throttle/architectures.hpp"
#include "throttle/data_io.hpp"
#include "throttle/gate_strategies.hpp"

namespace throttle {

// nested: the architecture's nested rule (prefix per module, or the
// stage-wise depth rule for depth-gated networks); independent: k random
// positions per module; all-on: no gating; learned: thresholded controller.
enum class Strategy { kNested, kIndependent, kAllOn, kLearned };

Strategy parse_strategy(const std::string& name);
std::string strategy_name(Strategy s);

struct CurveRecord {
  std::string strategy;
  double u_target = 0.0;
  double utilization = 0.0;
  double accuracy = 0.0;
  double flops = 0.0;  // mean per example
};

// {0, 1/(points-1), ..., 1}
std::vector<double> default_grid(std::size_t points = 17);

struct SweepSpec {
  std::vector<double> grid = default_grid();
  Strategy strategy = Strategy::kNested;
  std::size_t batch_size = 100;
  std::uint64_t seed = 0;
  // Worker cap; 0 = THROTTLENET_THREADS or the hardware concurrency.
  std::size_t threads = 0;

  void validate() const;
};

// Gate plan used at evaluation time. Deterministic except for the
// independent strategy, which draws from `rng`.
GatePlan evaluation_plan(const NetworkSpec& net, Strategy strategy, double u, const BlindController* controller,
                         Rng& rng);

// Analytic FLOPs per example: glue plus the recorded cost of every active
// component.
std::uint64_t flop_count(const NetworkSpec& net, const GatePlan& plan);

// Evaluates the full split at one u. When `plans` is given, the plan used
// for every batch is appended to it.
CurveRecord evaluate_at(const NetworkSpec& net, Strategy strategy, double u, const Dataset& test,
                        const BlindController* controller = nullptr, std::uint64_t seed = 0,
                        std::size_t batch_size = 100, std::vector<GatePlan>* plans = nullptr);

// One record per grid point, in grid order.
std::vector<CurveRecord> sweep(const NetworkSpec& net, const SweepSpec& spec, const Dataset& test,
                               const BlindController* controller = nullptr);

// Trapezoidal area under accuracy vs. actual utilization divided by the
// utilization span (mean accuracy when the span is zero).
double auc(std::span<const CurveRecord> records);

struct ProfileRow {
  double u_target = 0.0;
  std::size_t module_id = 0;
  double mean_activation = 0.0;
};

std::vector<ProfileRow> utilization_profile(const NetworkSpec& net, Strategy strategy,
                                            const BlindController* controller, std::span<const double> grid,
                                            std::uint64_t seed = 0);

// Worker count from THROTTLENET_THREADS, capped by `cap` (0 = no cap).
std::size_t worker_threads(std::size_t cap = 0);

void write_curve_csv(std::ostream& out, std::span<const CurveRecord> records);
void write_profile_csv(std::ostream& out, std::span<const ProfileRow> rows);
void write_curve_csv(const std::filesystem::path& path, std::span<const CurveRecord> records);
void write_profile_csv(const std::filesystem::path& path, std::span<const ProfileRow> rows);

// Argmax per row; ties resolve to the lowest class index.
std::vector<int> predict(const Tensor& logits);

}  // namespace throttle
