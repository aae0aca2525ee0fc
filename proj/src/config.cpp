// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/config.hpp"

#include <cstdlib>
#include <fstream>
#include <type_traits>
#include <utility>

namespace lipdistill {

using nlohmann::json;

namespace {

template <typename T>
T convert(const std::string& key, const json& v) {
  auto bad = [&](const char* want) {
    throw ConfigError("config key '" + key + "' expects " + want + ", got " + v.dump());
  };
  if constexpr (std::is_same_v<T, bool>) {
    if (!v.is_boolean()) bad("true or false");
    return v.get<bool>();
  } else if constexpr (std::is_integral_v<T>) {
    if (!v.is_number_integer() || (v.is_number_integer() && !v.is_number_unsigned() && v.get<long long>() < 0)) {
      bad("a non-negative integer");
    }
    return v.get<T>();
  } else if constexpr (std::is_floating_point_v<T>) {
    if (!v.is_number()) bad("a number");
    return v.get<T>();
  } else if constexpr (std::is_same_v<T, std::string>) {
    if (!v.is_string()) bad("a string");
    return v.get<std::string>();
  } else if constexpr (std::is_same_v<T, std::vector<std::size_t>>) {
    if (!v.is_array()) bad("an array of non-negative integers");
    T out;
    for (const auto& e : v) out.push_back(convert<std::size_t>(key, e));
    return out;
  } else {
    static_assert(std::is_same_v<T, std::vector<std::pair<std::size_t, std::size_t>>>);
    if (!v.is_array()) bad("an array of [a, b] pairs");
    T out;
    for (const auto& e : v) {
      if (!e.is_array() || e.size() != 2) bad("an array of [a, b] pairs");
      out.emplace_back(convert<std::size_t>(key, e[0]), convert<std::size_t>(key, e[1]));
    }
    return out;
  }
}

template <typename T>
json to_json_value(const T& v) {
  if constexpr (std::is_same_v<T, std::vector<std::pair<std::size_t, std::size_t>>>) {
    json out = json::array();
    for (const auto& [a, b] : v) out.push_back({a, b});
    return out;
  } else {
    return json(v);
  }
}

struct Field {
  ConfigKey info;
  std::function<json(const RunConfig&)> get;
  std::function<void(RunConfig&, const json&)> set;
};

template <typename Section, typename T>
Field field(const char* key, const char* help, Section RunConfig::*section, T Section::*member) {
  const std::string k = key;
  return {{k, help},
          [=](const RunConfig& c) { return to_json_value((c.*section).*member); },
          [=](RunConfig& c, const json& v) { (c.*section).*member = convert<T>(k, v); }};
}

const std::vector<Field>& fields() {
  using data::SynthConfig;
  using loss::DistillConfig;
  using nn::ModelConfig;
  using train::TrainConfig;
  static const std::vector<Field> all = {
      field("synth.num_classes", "number of word classes", &RunConfig::synth, &SynthConfig::num_classes),
      field("synth.train_per_class", "training samples per class", &RunConfig::synth, &SynthConfig::train_per_class),
      field("synth.val_per_class", "validation samples per class", &RunConfig::synth, &SynthConfig::val_per_class),
      field("synth.test_per_class", "test samples per class", &RunConfig::synth, &SynthConfig::test_per_class),
      field("synth.visual_frames", "video frames per clip", &RunConfig::synth, &SynthConfig::visual_frames),
      field("synth.raw_frame_size", "rendered frame side before cropping", &RunConfig::synth, &SynthConfig::raw_frame_size),
      field("synth.audio_frames", "spectrogram frames per clip", &RunConfig::synth, &SynthConfig::audio_frames),
      field("synth.audio_bins", "spectrogram bins per frame", &RunConfig::synth, &SynthConfig::audio_bins),
      field("synth.word_frames", "nominal word length in video frames", &RunConfig::synth, &SynthConfig::word_frames),
      field("synth.boundary_jitter", "max shift of the word in video frames", &RunConfig::synth, &SynthConfig::boundary_jitter),
      field("synth.visual_noise", "pixel noise std per colour channel", &RunConfig::synth, &SynthConfig::visual_noise),
      field("synth.audio_noise", "spectrogram noise std", &RunConfig::synth, &SynthConfig::audio_noise),
      field("synth.distractor_level", "strength of the surrounding words", &RunConfig::synth, &SynthConfig::distractor_level),
      field("synth.audio_margin", "minimum audio distance within a confusable pair", &RunConfig::synth, &SynthConfig::audio_margin),
      field("synth.confusable_pairs", "class pairs sharing their lip movement", &RunConfig::synth, &SynthConfig::confusable_pairs),
      field("synth.seed", "dataset seed", &RunConfig::synth, &SynthConfig::seed),
      field("model.frame_size", "network input crop side", &RunConfig::model, &ModelConfig::frame_size),
      field("model.visual_widths", "channels of each visual residual block", &RunConfig::model, &ModelConfig::visual_widths),
      field("model.audio_widths", "channels of the three audio residual blocks", &RunConfig::model, &ModelConfig::audio_widths),
      field("model.feature_dim", "audio per-frame feature width", &RunConfig::model, &ModelConfig::feature_dim),
      field("model.se_reduction", "squeeze-excitation reduction ratio", &RunConfig::model, &ModelConfig::se_reduction),
      field("model.hidden_size", "GRU hidden units per direction", &RunConfig::model, &ModelConfig::hidden_size),
      field("model.gru_layers", "stacked bidirectional GRU layers", &RunConfig::model, &ModelConfig::gru_layers),
      field("model.dropout", "dropout rate", &RunConfig::model, &ModelConfig::dropout),
      field("train.lr", "initial learning rate", &RunConfig::train, &TrainConfig::initial_lr),
      field("train.epochs", "training epochs", &RunConfig::train, &TrainConfig::epochs),
      field("train.batch_size", "samples per step", &RunConfig::train, &TrainConfig::batch_size),
      field("train.beta1", "Adam first-moment decay", &RunConfig::train, &TrainConfig::beta1),
      field("train.beta2", "Adam second-moment decay", &RunConfig::train, &TrainConfig::beta2),
      field("train.adam_eps", "Adam epsilon", &RunConfig::train, &TrainConfig::adam_eps),
      field("train.weight_decay", "L2 weight decay", &RunConfig::train, &TrainConfig::weight_decay),
      field("train.seed", "initialisation and shuffling seed", &RunConfig::train, &TrainConfig::seed),
      field("train.word_isolation", "zero teacher audio outside the word", &RunConfig::train, &TrainConfig::word_isolation),
      field("train.spec_augment", "time/frequency masking of teacher audio", &RunConfig::train, &TrainConfig::spec_augment),
      field("train.word_boundary", "boundary indicator channel for the student", &RunConfig::train, &TrainConfig::word_boundary),
      field("train.max_time_mask", "widest time mask in frames", &RunConfig::train, &TrainConfig::max_time_mask),
      field("train.max_freq_mask", "widest frequency mask in bins", &RunConfig::train, &TrainConfig::max_freq_mask),
      field("distill.lambda1", "sequence-level KD weight", &RunConfig::distill, &DistillConfig::lambda1),
      field("distill.lambda2", "frame-level KD weight", &RunConfig::distill, &DistillConfig::lambda2),
      field("distill.epsilon", "label smoothing", &RunConfig::distill, &DistillConfig::epsilon),
      field("distill.mixup", "mix pairs of student samples", &RunConfig::distill, &DistillConfig::mixup_enabled),
      field("distill.mixup_alpha", "Beta(α, α) shape for the mixing weight", &RunConfig::distill, &DistillConfig::mixup_alpha),
      field("distill.kd1", "sequence-level KD on", &RunConfig::distill, &DistillConfig::kd1_enabled),
      field("distill.kd2", "frame-level KD on", &RunConfig::distill, &DistillConfig::kd2_enabled),
      field("distill.sigma", "alignment Gaussian width in audio frames", &RunConfig::distill, &DistillConfig::sigma),
      field("distill.window", "alignment window in audio frames (odd)", &RunConfig::distill, &DistillConfig::window),
      {{"run.out_dir", "output directory"},
       [](const RunConfig& c) { return json(c.out_dir); },
       [](RunConfig& c, const json& v) { c.out_dir = convert<std::string>("run.out_dir", v); }},
  };
  return all;
}

const Field& lookup(const std::string& key) {
  for (const auto& f : fields()) {
    if (f.info.key == key) return f;
  }
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    for (const auto& f : fields()) out.push_back(f.info);
    return out;
  }();
  return keys;
}

std::string default_out_root() {
  const char* env = std::getenv("LIPDISTILL_OUT");
  return (env && *env) ? env : "runs";
}

json RunConfig::to_json() const {
  json out = json::object();
  for (const auto& f : fields()) out[f.info.key] = f.get(*this);
  return out;
}

void RunConfig::merge(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object of dotted keys");
  // check every key before touching anything
  for (const auto& [key, value] : j.items()) lookup(key);
  for (const auto& [key, value] : j.items()) lookup(key).set(*this, value);
}

void RunConfig::set(const std::string& key, const std::string& text) {
  const Field& f = lookup(key);
  json value = json::parse(text, nullptr, false);
  if (value.is_discarded() || value.is_object()) value = text;
  f.set(*this, value);
}

RunConfig RunConfig::from_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  json j = json::parse(in, nullptr, false);
  if (j.is_discarded()) throw ConfigError("config file " + path.string() + " is not valid JSON");
  RunConfig c;
  c.merge(j);
  return c;
}

nn::ModelConfig RunConfig::model_config() const {
  return train::model_config_for(synth, model);
}

void RunConfig::validate() const {
  try {
    synth.validate();
    train.validate();
    distill.validate();
    model_config();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(e.what());
  }
  if (train.max_time_mask >= synth.audio_frames) {
    throw ConfigError("train.max_time_mask must be smaller than synth.audio_frames");
  }
  if (train.max_freq_mask >= synth.audio_bins) {
    throw ConfigError("train.max_freq_mask must be smaller than synth.audio_bins");
  }
  if (out_dir.empty()) throw ConfigError("run.out_dir must not be empty");
}

}  // namespace lipdistill
