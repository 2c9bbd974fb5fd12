#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "throttle/architectures.hpp"
#include "throttle/data_io.hpp"
#include "throttle/evaluation.hpp"
#include "throttle/training.hpp"

namespace throttle {

struct DataConfig {
  std::string source = "synthetic";  // synthetic | idx | cifar
  std::string kind = "glyphs";       // synthetic generator
  std::size_t train_count = 2000;
  std::size_t test_count = 1000;
  SynthOptions synth{10, 1, 12, 0.1};
  std::string train_images, train_labels, test_images, test_labels;  // idx
  std::string cifar_dir;
  bool normalize = false;
};

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::string out = "out";
  ArchConfig model = ArchConfig::defaults("t-resnext-w");
  DataConfig data;
  TrainConfig train;
  TrainConfig controller;
  std::size_t controller_hidden = BlindController::kDefaultHidden;
  SweepSpec sweep;

  ExperimentConfig();
};

// Raw assignments in the order they were made (file lines, then overrides).
struct ConfigAssignment {
  std::string key;     // "section.field"
  std::string value;   // value text as written
  std::string origin;  // "<path>:<line>" or "--set"
};

// Sections in square brackets, `key = value` lines, `#` comments. Values
// are numbers, booleans, "quoted strings", bare words or [lists].
// Throws ConfigError("<path>:<line>: ...") on malformed lines.
std::vector<ConfigAssignment> parse_config_text(const std::string& text, const std::string& source);
std::vector<ConfigAssignment> read_config_file(const std::filesystem::path& path);
// "a.b=value"
ConfigAssignment parse_override(const std::string& text);

// Applies assignments over the defaults. Setting model.name first resets
// the model section to that architecture's defaults. Errors name the
// field and the origin of the offending assignment.
ExperimentConfig resolve_config(const std::vector<ConfigAssignment>& assignments);

// Fully-resolved config in the same syntax; resolve_config(parse(...))
// of the result reproduces the config.
std::string render_config(const ExperimentConfig& cfg);

// Every known key, in render order.
std::vector<std::string> config_keys();

}  // namespace throttle
