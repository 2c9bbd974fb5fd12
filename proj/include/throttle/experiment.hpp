#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "throttle/config.hpp"

namespace throttle {

struct DataSplits {
  Dataset train;
  Dataset test;
};

// Loads or generates both splits. Missing paths raise ConfigError naming
// the data.* field.
DataSplits load_data(const DataConfig& data, std::uint64_t seed);

// Network sized for the dataset (input shape and class count).
NetworkSpec make_network(const ExperimentConfig& cfg, const Dataset& data);

// Checkpoint helpers. Controller files hold the controller parameters plus
// a "controller.alpha" record of shape {1}.
void load_network_params(NetworkSpec& net, const std::filesystem::path& path);
void save_controller(const BlindController& controller, const std::filesystem::path& path);
BlindController load_controller(const std::filesystem::path& path, std::size_t outputs);

// File names inside the output directory. Every command first writes its
// resolved config to "<command>.config.toml".
std::string config_echo_name(const std::string& command);
inline constexpr const char* kDatapathCheckpoint = "datapath.ckpt";
inline constexpr const char* kControllerCheckpoint = "controller.ckpt";
inline constexpr const char* kDatapathMetrics = "metrics_datapath.jsonl";
inline constexpr const char* kControllerMetrics = "metrics_controller.jsonl";
inline constexpr const char* kCurveCsv = "curve.csv";
inline constexpr const char* kProfileCsv = "profile.csv";

// Writes the config echo, metrics_datapath.jsonl and datapath.ckpt.
TrainSummary run_train_datapath(const ExperimentConfig& cfg);

// Reads the data path checkpoint (default: <out>/datapath.ckpt) and writes
// the config echo, metrics_controller.jsonl and controller.ckpt.
TrainSummary run_train_controller(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& datapath);

struct SweepResult {
  std::vector<CurveRecord> records;
  double auc = 0.0;
  double peak_accuracy = 0.0;
  std::filesystem::path csv;
  std::optional<std::filesystem::path> profile;
};

// Writes the curve CSV (default: <out>/curve.csv) and, when a controller
// checkpoint is given, the utilization profile next to it.
SweepResult run_sweep(const ExperimentConfig& cfg, const std::optional<std::filesystem::path>& datapath,
                      const std::optional<std::filesystem::path>& controller,
                      const std::optional<std::filesystem::path>& csv);

}  // namespace throttle
