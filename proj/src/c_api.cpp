#include "throttlenet.h"

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "throttle/error.hpp"
#include "throttle/experiment.hpp"
#include "throttle/gradcheck.hpp"

struct tn_experiment {
  std::vector<throttle::ConfigAssignment> assignments;
  std::string rendered;
};

namespace {

thread_local std::string g_last_error;

tn_status fail(tn_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <typename Fn>
tn_status guarded(Fn&& fn) {
  g_last_error.clear();
  try {
    return fn();
  } catch (const throttle::DivergenceError& e) {
    return fail(TN_DIVERGED, e.what());
  } catch (const throttle::ConfigError& e) {
    return fail(TN_USAGE_ERROR, e.what());
  } catch (const throttle::FormatError& e) {
    return fail(TN_USAGE_ERROR, e.what());
  } catch (const std::invalid_argument& e) {
    return fail(TN_USAGE_ERROR, e.what());
  } catch (const std::exception& e) {
    return fail(TN_INTERNAL_ERROR, e.what());
  } catch (...) {
    return fail(TN_INTERNAL_ERROR, "unknown error");
  }
}

std::optional<std::filesystem::path> opt_path(const char* p) {
  if (!p || !*p) return std::nullopt;
  return std::filesystem::path(p);
}

tn_status add(tn_experiment* exp, throttle::ConfigAssignment a) {
  exp->assignments.push_back(std::move(a));
  try {
    throttle::resolve_config(exp->assignments);
  } catch (...) {
    exp->assignments.pop_back();
    throw;
  }
  return TN_OK;
}

}  // namespace

extern "C" {

const char* tn_last_error(void) { return g_last_error.c_str(); }

const char* tn_version(void) { return "1.0.0"; }

tn_status tn_experiment_create(const char* config_path, tn_experiment** out) {
  return guarded([&] {
    if (!out) return fail(TN_USAGE_ERROR, "out must not be NULL");
    auto exp = std::make_unique<tn_experiment>();
    if (config_path && *config_path) exp->assignments = throttle::read_config_file(config_path);
    throttle::resolve_config(exp->assignments);
    *out = exp.release();
    return TN_OK;
  });
}

void tn_experiment_destroy(tn_experiment* exp) { delete exp; }

tn_status tn_experiment_set(tn_experiment* exp, const char* key, const char* value) {
  return guarded([&] {
    if (!exp || !key || !value) return fail(TN_USAGE_ERROR, "arguments must not be NULL");
    return add(exp, throttle::parse_override(std::string(key) + "=" + value));
  });
}

tn_status tn_experiment_set_out_dir(tn_experiment* exp, const char* dir) {
  return guarded([&] {
    if (!exp || !dir || !*dir) return fail(TN_USAGE_ERROR, "output directory must be a non-empty string");
    return add(exp, {"run.out", nlohmann::json(dir).dump(), "--out"});
  });
}

tn_status tn_experiment_set_seed(tn_experiment* exp, uint64_t seed) {
  return guarded([&] {
    if (!exp) return fail(TN_USAGE_ERROR, "experiment must not be NULL");
    return add(exp, {"run.seed", std::to_string(seed), "--seed"});
  });
}

tn_status tn_experiment_config(tn_experiment* exp, const char** text) {
  return guarded([&] {
    if (!exp || !text) return fail(TN_USAGE_ERROR, "arguments must not be NULL");
    exp->rendered = throttle::render_config(throttle::resolve_config(exp->assignments));
    *text = exp->rendered.c_str();
    return TN_OK;
  });
}

tn_status tn_train_datapath(tn_experiment* exp) {
  return guarded([&] {
    if (!exp) return fail(TN_USAGE_ERROR, "experiment must not be NULL");
    throttle::run_train_datapath(throttle::resolve_config(exp->assignments));
    return TN_OK;
  });
}

tn_status tn_train_controller(tn_experiment* exp, const char* datapath_checkpoint) {
  return guarded([&] {
    if (!exp) return fail(TN_USAGE_ERROR, "experiment must not be NULL");
    throttle::run_train_controller(throttle::resolve_config(exp->assignments), opt_path(datapath_checkpoint));
    return TN_OK;
  });
}

tn_status tn_sweep(tn_experiment* exp, const char* datapath_checkpoint, const char* controller_checkpoint,
                   const char* strategy, const char* csv_path, tn_sweep_summary* summary) {
  return guarded([&] {
    if (!exp) return fail(TN_USAGE_ERROR, "experiment must not be NULL");
    auto assignments = exp->assignments;
    if (strategy && *strategy) assignments.push_back({"sweep.strategy", nlohmann::json(strategy).dump(), "--strategy"});
    const throttle::SweepResult r = throttle::run_sweep(throttle::resolve_config(assignments),
                                                       opt_path(datapath_checkpoint), opt_path(controller_checkpoint),
                                                       opt_path(csv_path));
    if (summary) *summary = {r.auc, r.peak_accuracy, r.records.size()};
    return TN_OK;
  });
}

tn_status tn_gradcheck(const char* corrupt_op, tn_gradcheck_row_fn row, void* user) {
  return guarded([&] {
    std::optional<throttle::OpKind> fault;
    if (corrupt_op && *corrupt_op) {
      for (throttle::OpKind k : throttle::differentiable_ops())
        if (throttle::op_name(k) == corrupt_op) fault = k;
      if (!fault) return fail(TN_USAGE_ERROR, std::string("unknown op '") + corrupt_op + "'");
    }
    struct Restore {
      ~Restore() { throttle::testing::set_backward_fault(std::nullopt); }
    } restore;
    throttle::testing::set_backward_fault(fault);
    const auto rows = throttle::full_gradcheck(3, 1e-5, 1e-4, 0);
    std::string failed;
    for (const auto& r : rows) {
      if (row) row(r.name.c_str(), r.max_error, r.passed ? 1 : 0, user);
      if (!r.passed) failed += (failed.empty() ? "" : ", ") + r.name;
    }
    if (!failed.empty()) return fail(TN_CHECK_FAILED, "gradient check failed for: " + failed);
    return TN_OK;
  });
}

}  // extern "C"
