// throttlenet command-line driver.
#include <cstdio>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "throttlenet.h"

namespace {

struct Common {
  std::string config;
  std::vector<std::string> sets;
  std::string out;
  std::optional<std::uint64_t> seed;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("--config", c.config, "Experiment config file");
  cmd->add_option("--set", c.sets, "Override KEY=VALUE (repeatable)")->allow_extra_args(false);
  cmd->add_option("--out", c.out, "Output directory");
  cmd->add_option("--seed", c.seed, "Global seed");
}

int report(tn_status s) {
  if (s != TN_OK) std::fprintf(stderr, "error: %s\n", tn_last_error());
  return static_cast<int>(s);
}

using ExperimentPtr = std::unique_ptr<tn_experiment, decltype(&tn_experiment_destroy)>;

// Builds the experiment from config + overrides; returns a status on error.
tn_status open_experiment(const Common& c, ExperimentPtr& exp) {
  tn_experiment* raw = nullptr;
  tn_status s = tn_experiment_create(c.config.empty() ? nullptr : c.config.c_str(), &raw);
  if (s != TN_OK) return s;
  exp.reset(raw);
  for (const std::string& kv : c.sets) {
    const auto eq = kv.find('=');
    const std::string key = kv.substr(0, eq);
    const std::string value = eq == std::string::npos ? "" : kv.substr(eq + 1);
    if ((s = tn_experiment_set(raw, key.c_str(), value.c_str())) != TN_OK) return s;
  }
  if (!c.out.empty() && (s = tn_experiment_set_out_dir(raw, c.out.c_str())) != TN_OK) return s;
  if (c.seed && (s = tn_experiment_set_seed(raw, *c.seed)) != TN_OK) return s;
  return TN_OK;
}

const char* or_null(const std::string& s) { return s.empty() ? nullptr : s.c_str(); }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Throttleable neural networks: training, sweeps and gradient checks"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(tn_version()));

  Common common;
  std::string datapath, controller, strategy, csv, corrupt;

  auto* train_dp = app.add_subcommand("train-datapath", "Train the data path under random gating");
  add_common(train_dp, common);

  auto* train_ctl = app.add_subcommand("train-controller", "Train the gate controller on a frozen data path");
  add_common(train_ctl, common);
  train_ctl->add_option("--datapath", datapath, "Data path checkpoint (default <out>/datapath.ckpt)");

  auto* sweep = app.add_subcommand("sweep", "Evaluate accuracy over a grid of control values");
  add_common(sweep, common);
  sweep->add_option("--datapath", datapath, "Data path checkpoint (default <out>/datapath.ckpt)");
  sweep->add_option("--controller", controller, "Controller checkpoint (needed by the learned strategy)");
  sweep->add_option("--strategy", strategy, "nested, independent, all-on or learned");
  sweep->add_option("--csv", csv, "Curve CSV path (default <out>/curve.csv)");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference check of every differentiable op");
  gradcheck->add_option("--corrupt-op", corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return TN_USAGE_ERROR;
  }

  if (*gradcheck) {
    std::printf("%-24s %-14s %s\n", "op", "max_rel_error", "status");
    const tn_status s = tn_gradcheck(
        or_null(corrupt),
        [](const char* name, double err, int passed, void*) {
          std::printf("%-24s %-14.3e %s\n", name, err, passed ? "ok" : "FAIL");
        },
        nullptr);
    return report(s);
  }

  ExperimentPtr exp(nullptr, &tn_experiment_destroy);
  if (const tn_status s = open_experiment(common, exp); s != TN_OK) return report(s);

  if (*train_dp) {
    const tn_status s = tn_train_datapath(exp.get());
    if (s == TN_OK) std::printf("data path trained\n");
    return report(s);
  }
  if (*train_ctl) {
    const tn_status s = tn_train_controller(exp.get(), or_null(datapath));
    if (s == TN_OK) std::printf("controller trained\n");
    return report(s);
  }
  tn_sweep_summary summary{};
  const tn_status s =
      tn_sweep(exp.get(), or_null(datapath), or_null(controller), or_null(strategy), or_null(csv), &summary);
  if (s == TN_OK) std::printf("points %zu\nauc %.6g\npeak_accuracy %.6g\n", summary.points, summary.auc,
                              summary.peak_accuracy);
  return report(s);
}
