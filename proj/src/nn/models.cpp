// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/nn/models.hpp"

#include <stdexcept>
#include <string>

namespace lipdistill::nn {

namespace {

constexpr std::size_t kKernel = 3;

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("model config: " + msg);
}

}  // namespace

void ModelConfig::validate() const {
  check(visual_frames >= 1, "visual_frames must be >= 1");
  check(visual_channels >= 1, "visual_channels must be >= 1");
  check(!visual_widths.empty(), "visual_widths must not be empty");
  check(frame_size >> (visual_widths.size() - 1) >= 1,
        "frame_size too small for the number of visual blocks");
  check(audio_frames >= kKernel, "audio_frames must be >= the conv kernel (3)");
  check(audio_bins >= 1, "audio_bins must be >= 1");
  check(audio_widths.size() == 3, "the audio front-end has exactly three residual blocks");
  check(feature_dim >= 1 && hidden_size >= 1 && gru_layers >= 1, "dimensions must be >= 1");
  check(se_reduction >= 1, "se_reduction must be >= 1");
  check(num_classes >= 2, "num_classes must be >= 2");
  check(dropout >= 0.0 && dropout < 1.0, "dropout must lie in [0, 1)");
  for (auto w : visual_widths) check(w >= 1, "visual widths must be >= 1");
  for (auto w : audio_widths) check(w >= 1, "audio widths must be >= 1");
}

void SequenceClassifier::init_backend(std::size_t encoder_in, Rng& rng) {
  encoder_ = BiGru{"encoder", encoder_in, config_.hidden_size, config_.gru_layers, config_.dropout};
  encoder_.init(params_, rng);
  head_ = ClassifierHead{Linear{"head", encoder_.output_dim(), config_.num_classes},
                         config_.dropout};
  head_.init(params_, rng);
}

// ---- student ---------------------------------------------------------------------

StudentModel::StudentModel(ModelConfig config, bool word_boundary, std::uint64_t seed)
    : SequenceClassifier(std::move(config)),
      input_channels_(config_.visual_channels + (word_boundary ? 1 : 0)) {
  config_.validate();
  Rng rng = derive_stream(seed, {0x5354554445ULL});
  std::size_t in = input_channels_;
  for (std::size_t i = 0; i < config_.visual_widths.size(); ++i) {
    blocks_.push_back(ResidualBlock2d{"frontend.block" + std::to_string(i), in,
                                      config_.visual_widths[i], true, config_.se_reduction,
                                      kKernel});
    blocks_.back().init(params_, rng);
    in = config_.visual_widths[i];
  }
  init_backend(in, rng);
}

Shape StudentModel::input_shape() const {
  return {config_.visual_frames, input_channels_, config_.frame_size, config_.frame_size};
}

ad::Var StudentModel::conv_stack(const Context& ctx, ad::Var frames) const {
  const Shape& s = frames.shape();
  if (s.size() != 4 || s[1] != input_channels_ || s[2] != config_.frame_size ||
      s[3] != config_.frame_size) {
    throw std::invalid_argument("student: expected frames [T×" + std::to_string(input_channels_) +
                                "×" + std::to_string(config_.frame_size) + "×" +
                                std::to_string(config_.frame_size) + "], got " +
                                shape_to_string(s));
  }
  ad::Var h = frames;
  for (std::size_t i = 0; i < blocks_.size(); ++i) {
    if (i > 0) h = ad::avg_pool2x2(h);
    h = blocks_[i].forward(ctx, h);
  }
  return h;
}

ad::Var StudentModel::frontend(const Context& ctx, ad::Var frames) const {
  ad::Var h = conv_stack(ctx, frames);
  const Shape s = h.shape();
  ad::Var pooled = ad::mean(ad::reshape(h, {s[0], s[1], s[2] * s[3]}), 2);  // [T×C]
  if (ctx.training && config_.dropout > 0.0) {
    pooled = ad::dropout(pooled, config_.dropout, ctx.dropout_rng(), true);
  }
  return pooled;
}

EncoderVars StudentModel::encode(const Context& ctx, ad::Var frames) const {
  return encoder_.forward(ctx, frontend(ctx, frames));
}

// ---- teacher ---------------------------------------------------------------------

TeacherModel::TeacherModel(ModelConfig config, std::uint64_t seed)
    : SequenceClassifier(std::move(config)) {
  config_.validate();
  Rng rng = derive_stream(seed, {0x5445414348ULL});
  std::size_t in = config_.audio_bins;
  for (std::size_t i = 0; i < config_.audio_widths.size(); ++i) {
    blocks_.push_back(ResidualBlock1d{"frontend.block" + std::to_string(i), in,
                                      config_.audio_widths[i], false, config_.se_reduction,
                                      kKernel});
    blocks_.back().init(params_, rng);
    in = config_.audio_widths[i];
  }
  projection_ = Linear{"frontend.proj", in, config_.feature_dim};
  projection_.init(params_, rng);
  init_backend(config_.feature_dim, rng);
}

Shape TeacherModel::input_shape() const { return {config_.audio_frames, config_.audio_bins}; }

ad::Var TeacherModel::frontend(const Context& ctx, ad::Var spectrogram) const {
  const Shape& s = spectrogram.shape();
  if (s.size() != 2 || s[1] != config_.audio_bins) {
    throw std::invalid_argument("teacher: expected spectrogram [T×" +
                                std::to_string(config_.audio_bins) + "], got " +
                                shape_to_string(s));
  }
  if (s[0] < kKernel) {
    throw std::invalid_argument("teacher: " + std::to_string(s[0]) +
                                " audio frames is shorter than the conv kernel");
  }
  ad::Var h = spectrogram;
  for (const auto& block : blocks_) h = block.forward(ctx, h);
  return projection_.forward(ctx, h);
}

EncoderVars TeacherModel::encode(const Context& ctx, ad::Var spectrogram) const {
  return encoder_.forward(ctx, frontend(ctx, spectrogram));
}

void require_matched_backends(const SequenceClassifier& teacher,
                              const SequenceClassifier& student) {
  if (teacher.encoder_dim() != student.encoder_dim()) {
    throw std::invalid_argument("teacher encoder width " + std::to_string(teacher.encoder_dim()) +
                                " != student encoder width " +
                                std::to_string(student.encoder_dim()));
  }
}

}  // namespace lipdistill::nn
