#include "throttle/experiment.hpp"

#include <algorithm>
#include <fstream>

#include "throttle/error.hpp"

namespace throttle {

namespace fs = std::filesystem;

namespace {

void require_file(const std::string& path, const std::string& field) {
  if (path.empty()) throw ConfigError(field + " is required for this data source");
  if (!fs::exists(path)) throw ConfigError(field + ": file '" + path + "' does not exist");
}

fs::path out_file(const ExperimentConfig& cfg, const char* name) { return fs::path(cfg.out) / name; }

void prepare_out(const ExperimentConfig& cfg, const std::string& command) {
  std::error_code ec;
  fs::create_directories(cfg.out, ec);
  if (ec) throw ConfigError("run.out: cannot create '" + cfg.out + "': " + ec.message());
  std::ofstream echo(fs::path(cfg.out) / config_echo_name(command), std::ios::trunc);
  if (!echo) throw ConfigError("run.out: cannot write into '" + cfg.out + "'");
  echo << render_config(cfg);
}

class JsonlSink {
 public:
  explicit JsonlSink(const fs::path& path) : out_(path, std::ios::trunc) {
    if (!out_) throw ConfigError("run.out: cannot write '" + path.string() + "'");
  }
  MetricSink sink() {
    return [this](const MetricRecord& r) { out_ << metric_json(r) << '\n'; };
  }

 private:
  std::ofstream out_;
};

fs::path checkpoint_or(const ExperimentConfig& cfg, const std::optional<fs::path>& given, const char* name) {
  const fs::path path = given ? *given : out_file(cfg, name);
  if (!fs::exists(path)) throw ConfigError("checkpoint '" + path.string() + "' does not exist");
  return path;
}

}  // namespace

std::string config_echo_name(const std::string& command) { return command + ".config.toml"; }

DataSplits load_data(const DataConfig& data, std::uint64_t seed) {
  DataSplits out;
  if (data.source == "synthetic") {
    const SynthKind kind = parse_synth_kind(data.kind);
    SynthOptions synth = data.synth;
    synth.task_seed = seed;
    out.train = synth_dataset(kind, data.train_count, derive_seed(seed, "dataset", 0), synth);
    out.test = synth_dataset(kind, data.test_count, derive_seed(seed, "dataset", 1), synth);
    out.train.split = "train";
    out.test.split = "test";
  } else if (data.source == "idx") {
    require_file(data.train_images, "data.train_images");
    require_file(data.train_labels, "data.train_labels");
    require_file(data.test_images, "data.test_images");
    require_file(data.test_labels, "data.test_labels");
    out.train = load_idx(data.train_images, data.train_labels);
    out.test = load_idx(data.test_images, data.test_labels);
  } else if (data.source == "cifar") {
    if (data.cifar_dir.empty()) throw ConfigError("data.cifar_dir is required for this data source");
    if (!fs::is_directory(data.cifar_dir))
      throw ConfigError("data.cifar_dir: directory '" + data.cifar_dir + "' does not exist");
    CifarSplits s = load_cifar_binary(data.cifar_dir);
    out.train = std::move(s.train);
    out.test = std::move(s.test);
  } else {
    throw ConfigError("data.source: unknown value '" + data.source + "'");
  }
  if (data.normalize) {
    const ChannelNorm norm = data.source == "cifar" ? ChannelNorm::cifar10() : ChannelNorm::fit(out.train);
    normalize_channels(out.train, norm);
    normalize_channels(out.test, norm);
  }
  return out;
}

NetworkSpec make_network(const ExperimentConfig& cfg, const Dataset& data) {
  ArchConfig model = cfg.model;
  model.input = data.example_shape();
  model.classes = data.classes;
  return build_network(model, cfg.seed);
}

void load_network_params(NetworkSpec& net, const fs::path& path) {
  const auto records = load_checkpoint(path);
  try {
    net.params.assign(records);
  } catch (const std::exception& e) {
    throw ConfigError("checkpoint '" + path.string() + "' does not match the configured model: " + e.what());
  }
}

void save_controller(const BlindController& controller, const fs::path& path) {
  std::vector<NamedTensor> records(controller.params().entries().begin(), controller.params().entries().end());
  records.push_back({"controller.alpha", Tensor({1}, controller.alpha())});
  save_checkpoint(path, records);
}

BlindController load_controller(const fs::path& path, std::size_t outputs) {
  std::vector<NamedTensor> records = load_checkpoint(path);
  const auto alpha = std::find_if(records.begin(), records.end(),
                                  [](const NamedTensor& r) { return r.name == "controller.alpha"; });
  if (alpha == records.end() || alpha->value.numel() != 1)
    throw ConfigError("checkpoint '" + path.string() + "' is not a controller checkpoint");
  const double a = alpha->value[0];
  records.erase(alpha);
  const auto fc1 = std::find_if(records.begin(), records.end(),
                                [](const NamedTensor& r) { return r.name == "controller.fc1.weight"; });
  if (fc1 == records.end() || fc1->value.rank() != 2)
    throw ConfigError("checkpoint '" + path.string() + "' is not a controller checkpoint");
  Rng unused(0);
  BlindController controller(outputs, unused, fc1->value.extent(1));
  try {
    controller.params().assign(records);
    controller.set_alpha(a);
  } catch (const std::exception& e) {
    throw ConfigError("controller checkpoint '" + path.string() + "' does not match the network: " + e.what());
  }
  return controller;
}

TrainSummary run_train_datapath(const ExperimentConfig& cfg) {
  const DataSplits data = load_data(cfg.data, cfg.seed);
  NetworkSpec net = make_network(cfg, data.train);
  prepare_out(cfg, "train-datapath");
  JsonlSink metrics(out_file(cfg, kDatapathMetrics));
  const TrainSummary summary = train_datapath(net, data.train, cfg.train, metrics.sink());
  save_checkpoint(out_file(cfg, kDatapathCheckpoint), net.params.entries());
  return summary;
}

TrainSummary run_train_controller(const ExperimentConfig& cfg, const std::optional<fs::path>& datapath) {
  const fs::path ckpt = checkpoint_or(cfg, datapath, kDatapathCheckpoint);
  const DataSplits data = load_data(cfg.data, cfg.seed);
  NetworkSpec net = make_network(cfg, data.train);
  load_network_params(net, ckpt);
  prepare_out(cfg, "train-controller");
  Rng init(derive_seed(cfg.seed, "init", 1));
  BlindController controller(net.total_components(), init, cfg.controller_hidden);
  JsonlSink metrics(out_file(cfg, kControllerMetrics));
  const TrainSummary summary = train_controller(net, controller, data.train, cfg.controller, metrics.sink());
  save_controller(controller, out_file(cfg, kControllerCheckpoint));
  return summary;
}

SweepResult run_sweep(const ExperimentConfig& cfg, const std::optional<fs::path>& datapath,
                      const std::optional<fs::path>& controller_path, const std::optional<fs::path>& csv) {
  if (cfg.sweep.strategy == Strategy::kLearned && !controller_path)
    throw ConfigError("sweep.strategy: the learned strategy needs a controller checkpoint");
  const fs::path ckpt = checkpoint_or(cfg, datapath, kDatapathCheckpoint);
  const DataSplits data = load_data(cfg.data, cfg.seed);
  NetworkSpec net = make_network(cfg, data.train);
  load_network_params(net, ckpt);
  std::optional<BlindController> controller;
  if (controller_path) controller = load_controller(checkpoint_or(cfg, controller_path, kControllerCheckpoint),
                                                    net.total_components());
  prepare_out(cfg, "sweep");

  SweepResult result;
  result.records = sweep(net, cfg.sweep, data.test, controller ? &*controller : nullptr);
  result.auc = auc(result.records);
  for (const auto& r : result.records) result.peak_accuracy = std::max(result.peak_accuracy, r.accuracy);
  result.csv = csv ? *csv : out_file(cfg, kCurveCsv);
  if (result.csv.has_parent_path()) fs::create_directories(result.csv.parent_path());
  write_curve_csv(result.csv, result.records);
  if (controller) {
    result.profile = result.csv.parent_path() / kProfileCsv;
    write_profile_csv(*result.profile,
                      utilization_profile(net, Strategy::kLearned, &*controller, cfg.sweep.grid, cfg.seed));
  }
  return result;
}

}  // namespace throttle
