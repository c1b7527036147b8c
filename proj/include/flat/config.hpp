#pragma once

// Flat dotted-key experiment configuration:
//
//   # comment
//   attack.epsilon = 0.2
//   sweep.attacks = none, badnets, flat
//
// Unknown keys, malformed values and out-of-range values are rejected with
// the key path and line number.

#include "flat/data.hpp"
#include "flat/flsim.hpp"

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace flat::config {

struct DatasetConfig {
  std::string kind = "synthetic";  // synthetic | idx
  int classes = 10;
  int per_class = 100;
  int test_per_class = 50;
  int side = 12;
  std::uint64_t seed = 7;
  std::string train_images;
  std::string train_labels;
  std::string test_images;
  std::string test_labels;
  int downsample = 1;
  // 0 keeps every sample.
  int train_limit = 0;
  int test_limit = 0;
};

struct TheoryConfig {
  std::vector<double> lambdas{0.0, 0.1, 0.5, 2.0};
  int generator_epochs = 30;
  int classifier_epochs = 5;
  int n_mc = 10000;
  int probes = 20;
};

struct ExperimentConfig {
  flsim::FLConfig fl;
  DatasetConfig dataset;
  TheoryConfig theory;
  std::string out_dir = "out";
  std::vector<std::uint64_t> seeds{1};
  std::vector<std::string> sweep_attacks{"none", "badnets", "flat"};
  std::vector<std::string> sweep_defenses{"fedavg", "krum", "median"};
  bool checkpoints = true;

  void validate() const;
};

class ConfigError : public std::runtime_error {
 public:
  ConfigError(const std::string& key, int line, const std::string& message);
  const std::string& key() const { return key_; }
  int line() const { return line_; }

 private:
  std::string key_;
  int line_;
};

ExperimentConfig parse_config(const std::string& text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);

// Ordered (key, value) pairs as serialize_config writes them.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& cfg);

// Attack presets accepted by sweeps: none, badnets, blended, flat, flat-single,
// flat-noz, flat-nodiv, flat-nostealth.
void apply_attack_preset(ExperimentConfig& cfg, const std::string& preset);
void apply_defense(ExperimentConfig& cfg, const std::string& rule);
bool is_attack_preset(const std::string& preset);

// Builds (train, test) from the dataset section.
std::pair<data::Dataset, data::Dataset> load_datasets(const DatasetConfig& cfg);

}  // namespace flat::config
