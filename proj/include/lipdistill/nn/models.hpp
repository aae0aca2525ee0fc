// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <memory>
#include <vector>

#include "lipdistill/nn/layers.hpp"

namespace lipdistill::nn {

struct ModelConfig {
  // visual stream, as seen by the network (after grayscale + crop)
  std::size_t visual_frames = 29;
  std::size_t visual_channels = 1;
  std::size_t frame_size = 16;
  std::vector<std::size_t> visual_widths{8, 16};
  // audio stream
  std::size_t audio_frames = 139;
  std::size_t audio_bins = 20;
  std::vector<std::size_t> audio_widths{24, 24, 24};
  std::size_t feature_dim = 16;  // audio per-frame projection width
  // shared
  std::size_t se_reduction = 4;
  std::size_t hidden_size = 64;
  std::size_t gru_layers = 3;
  std::size_t num_classes = 20;
  double dropout = 0.2;

  /// Throws std::invalid_argument on inconsistent values.
  void validate() const;
};

/// Common interface of the teacher and student: input -> encoder -> logits.
class SequenceClassifier {
 public:
  virtual ~SequenceClassifier() = default;

  virtual Shape input_shape() const = 0;
  virtual EncoderVars encode(const Context& ctx, ad::Var input) const = 0;
  ad::Var logits(const Context& ctx, ad::Var sequence_vector) const {
    return head_.forward(ctx, sequence_vector);
  }

  std::size_t encoder_dim() const { return encoder_.output_dim(); }
  const ParameterSet& params() const { return params_; }
  ParameterSet& params() { return params_; }
  const BiGru& encoder() const { return encoder_; }
  const ModelConfig& config() const { return config_; }

 protected:
  explicit SequenceClassifier(ModelConfig config) : config_(std::move(config)) {}
  void init_backend(std::size_t encoder_in, Rng& rng);

  ModelConfig config_;
  ParameterSet params_;
  BiGru encoder_;
  ClassifierHead head_;
};

/// Visual student: per-frame 2-D SE residual stack -> global average pool ->
/// dropout -> BiGRU -> temporal mean -> head.
class StudentModel : public SequenceClassifier {
 public:
  /// word_boundary adds one indicator channel to the visual input.
  StudentModel(ModelConfig config, bool word_boundary, std::uint64_t seed);

  Shape input_shape() const override;
  std::size_t input_channels() const { return input_channels_; }
  /// frames[T×C×H×W] -> per-frame features [T×D_in]
  ad::Var frontend(const Context& ctx, ad::Var frames) const;
  /// frames after the residual stack, before pooling: [T×C'×H'×W']
  ad::Var conv_stack(const Context& ctx, ad::Var frames) const;
  EncoderVars encode(const Context& ctx, ad::Var frames) const override;

 private:
  std::size_t input_channels_;
  std::vector<ResidualBlock2d> blocks_;
};

/// Audio teacher: three 1-D residual blocks over time -> per-frame linear ->
/// BiGRU -> temporal mean -> head.
class TeacherModel : public SequenceClassifier {
 public:
  TeacherModel(ModelConfig config, std::uint64_t seed);

  Shape input_shape() const override;
  /// spectrogram[T_a×F] -> per-frame features [T_a×feature_dim]
  ad::Var frontend(const Context& ctx, ad::Var spectrogram) const;
  EncoderVars encode(const Context& ctx, ad::Var spectrogram) const override;

  const std::vector<ResidualBlock1d>& blocks() const { return blocks_; }

 private:
  std::vector<ResidualBlock1d> blocks_;
  Linear projection_;
};

/// Teacher and student must expose equal encoder widths so their sequence
/// vectors and frame states compare without an extra projection.
void require_matched_backends(const SequenceClassifier& teacher,
                              const SequenceClassifier& student);

}  // namespace lipdistill::nn
