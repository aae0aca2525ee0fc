// SPDX-License-Identifier: Apache-2.0
//
// Run configuration: every knob of the generator, the networks, the optimiser
// and the distillation objective under one flat namespace of dotted keys
// ("synth.visual_noise", "train.epochs", ...). JSON files and command-line
// overrides use the same keys; unknown keys are rejected.
#pragma once

#include <filesystem>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "lipdistill/dataset.hpp"
#include "lipdistill/losses.hpp"
#include "lipdistill/nn/models.hpp"
#include "lipdistill/training.hpp"

namespace lipdistill {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct RunConfig {
  data::SynthConfig synth;
  nn::ModelConfig model;
  train::TrainConfig train;
  loss::DistillConfig distill;
  std::string out_dir = "runs";

  /// Throws ConfigError describing the first offending value.
  void validate() const;
  /// Architecture with geometry filled in from the generator settings.
  nn::ModelConfig model_config() const;

  nlohmann::json to_json() const;
  /// Applies the keys present in j on top of the current values.
  void merge(const nlohmann::json& j);
  /// Applies one override given as text. Numbers, booleans and arrays are
  /// parsed as JSON; anything else is taken as a string.
  void set(const std::string& key, const std::string& text);

  static RunConfig from_file(const std::filesystem::path& path);
};

struct ConfigKey {
  std::string key;
  std::string help;
};
/// Every accepted key in a stable order.
const std::vector<ConfigKey>& config_keys();

/// Default output root: $LIPDISTILL_OUT when set, else "runs".
std::string default_out_root();

}  // namespace lipdistill
