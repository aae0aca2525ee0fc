// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <iosfwd>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "lipdistill/alignment.hpp"
#include "lipdistill/batch.hpp"
#include "lipdistill/checkpoint.hpp"
#include "lipdistill/dataset.hpp"
#include "lipdistill/losses.hpp"
#include "lipdistill/nn/models.hpp"

namespace lipdistill::train {

struct TrainConfig {
  double initial_lr = 3e-4;
  std::size_t epochs = 30;
  std::size_t batch_size = 16;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.0;
  std::uint64_t seed = 1;
  // data-side switches
  bool word_isolation = true;
  bool spec_augment = true;
  bool word_boundary = true;
  std::size_t max_time_mask = 20;
  std::size_t max_freq_mask = 4;

  /// Throws std::invalid_argument.
  void validate() const;
};

/// lr0 · ½(1 + cos(π·step/total)).
double cosine_lr(std::size_t step, std::size_t total_steps, double lr0);

class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Adam with bias correction. Weight decay, when nonzero, is plain L2 added
/// to the gradient.
class Adam {
 public:
  Adam(const nn::ParameterSet& params, const TrainConfig& cfg);

  /// Throws TrainingError on a non-finite gradient without touching params.
  void step(nn::ParameterSet& params, const std::vector<Tensor>& grads, double lr);

  std::size_t steps() const { return t_; }
  const std::vector<Tensor>& first_moment() const { return m_; }
  const std::vector<Tensor>& second_moment() const { return v_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<Tensor> m_, v_;
};

struct EpochMetrics {
  std::size_t epoch = 0;
  double lr = 0.0;
  double loss_base = 0.0;
  double loss_kd1 = 0.0;
  double loss_kd2 = 0.0;
  double loss_total = 0.0;
  double train_top1 = 0.0;
  double val_top1 = 0.0;

  nlohmann::json to_json() const;
};

struct StepRecord {
  std::size_t step = 0;
  double lr = 0.0;
  double loss_base = 0.0;
  double loss_kd1 = 0.0;
  double loss_kd2 = 0.0;
  double loss_total = 0.0;
};

struct TrainResult {
  Checkpoint checkpoint;  // best validation epoch
  std::vector<EpochMetrics> epochs;
  std::vector<StepRecord> steps;
  std::size_t best_epoch = 0;
  double best_val_top1 = 0.0;
};

struct RunOptions {
  Execution execution = Execution::kParallel;
  nlohmann::json config_echo = nlohmann::json::object();
  std::ostream* log = nullptr;  // one human-readable line per epoch
  std::function<void(const EpochMetrics&)> on_epoch;
};

// ---- input pipelines ----------------------------------------------------------------

/// Teacher view of a sample: word isolation per flag, spec augment in training.
Tensor teacher_input(const data::AVSample& s, bool word_isolation, bool spec_augment,
                     const TrainConfig& cfg, Rng& rng, bool training);
/// Student view: random crop in training (centre crop otherwise), then the
/// optional boundary channel.
Tensor student_input(const data::AVSample& s, std::size_t frame_size, bool word_boundary,
                     Rng& rng, bool training);

/// Network geometry for a dataset: copies frame counts, bins and class count
/// from the generator settings into the architecture knobs.
nn::ModelConfig model_config_for(const data::SynthConfig& synth, nn::ModelConfig knobs);

// ---- procedures ---------------------------------------------------------------------

TrainResult train_teacher(const data::AVDataset& ds, const nn::ModelConfig& model,
                          const TrainConfig& cfg, double label_smoothing,
                          const RunOptions& options = {});

/// The frozen teacher used during distillation and how it reads audio.
struct FrozenTeacher {
  const nn::TeacherModel& model;
  bool word_isolation = true;
};

TrainResult train_student(const data::AVDataset& ds, const FrozenTeacher& teacher,
                          const nn::ModelConfig& model, const TrainConfig& cfg,
                          const loss::DistillConfig& distill, const RunOptions& options = {});

/// Fraction of samples whose arg-max logit equals the label, in eval mode.
using InputFn = std::function<Tensor(const data::AVSample&)>;
double evaluate_top1(const nn::SequenceClassifier& model, const std::vector<data::AVSample>& samples,
                     const InputFn& input, Execution exec = Execution::kParallel);
double evaluate_teacher(const nn::TeacherModel& model, const std::vector<data::AVSample>& samples,
                        bool word_isolation, Execution exec = Execution::kParallel);
double evaluate_student(const nn::StudentModel& model, const std::vector<data::AVSample>& samples,
                        bool word_boundary, Execution exec = Execution::kParallel);

/// Sequence vector and aligned frame states of the teacher in eval mode.
struct TeacherTargets {
  Tensor sequence;  // [D]
  Tensor frames;    // [J×D] after alignment
};
TeacherTargets teacher_targets(const nn::TeacherModel& teacher, const Tensor& audio_input,
                               const align::AlignmentMap& map);

/// Rebuild a model from a checkpoint; names and shapes must match.
nn::TeacherModel make_teacher(const nn::ModelConfig& model, const Checkpoint& ckpt);
nn::StudentModel make_student(const nn::ModelConfig& model, bool word_boundary,
                              const Checkpoint& ckpt);

}  // namespace lipdistill::train
