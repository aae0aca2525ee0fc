// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/training.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>

namespace lipdistill::train {

namespace {

constexpr std::uint64_t kShuffleKey = 0x5348554646;
constexpr std::uint64_t kTeacherStepKey = 0x5453544550;
constexpr std::uint64_t kStudentStepKey = 0x5353544550;
constexpr std::uint64_t kMixupKey = 0x4D49585550;

void check(bool ok, const std::string& msg) {
  if (!ok) throw std::invalid_argument("train config: " + msg);
}

std::size_t argmax(const Tensor& t) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < t.size(); ++i) {
    if (t[i] > t[best]) best = i;
  }
  return best;
}

}  // namespace

void TrainConfig::validate() const {
  check(initial_lr > 0.0 && std::isfinite(initial_lr), "initial_lr must be > 0");
  check(epochs >= 1, "epochs must be >= 1");
  check(batch_size >= 1, "batch_size must be >= 1");
  check(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0, "betas must lie in [0, 1)");
  check(adam_eps > 0.0, "adam_eps must be > 0");
  check(weight_decay >= 0.0, "weight_decay must be >= 0");
}

double cosine_lr(std::size_t step, std::size_t total_steps, double lr0) {
  if (total_steps == 0) throw std::invalid_argument("cosine_lr: total_steps must be >= 1");
  if (step > total_steps) throw std::invalid_argument("cosine_lr: step beyond total_steps");
  const double progress = static_cast<double>(step) / static_cast<double>(total_steps);
  return lr0 * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

// ---- Adam ---------------------------------------------------------------------------

Adam::Adam(const nn::ParameterSet& params, const TrainConfig& cfg)
    : beta1_(cfg.beta1), beta2_(cfg.beta2), eps_(cfg.adam_eps), weight_decay_(cfg.weight_decay) {
  for (const Tensor& p : params.values()) {
    m_.emplace_back(p.shape());
    v_.emplace_back(p.shape());
  }
}

void Adam::step(nn::ParameterSet& params, const std::vector<Tensor>& grads, double lr) {
  if (grads.size() != params.size()) throw std::invalid_argument("adam: gradient count mismatch");
  for (std::size_t p = 0; p < grads.size(); ++p) {
    if (grads[p].shape() != params.values()[p].shape()) {
      throw std::invalid_argument("adam: gradient shape mismatch for " + params.names()[p]);
    }
    for (double g : grads[p].data()) {
      if (!std::isfinite(g)) {
        throw TrainingError("adam: non-finite gradient in " + params.names()[p] + " at update " +
                            std::to_string(t_ + 1));
      }
    }
  }
  ++t_;
  const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t p = 0; p < grads.size(); ++p) {
    double* w = params.values()[p].raw();
    double* m = m_[p].raw();
    double* v = v_[p].raw();
    const double* g = grads[p].raw();
    for (std::size_t k = 0; k < grads[p].size(); ++k) {
      const double gk = g[k] + weight_decay_ * w[k];
      m[k] = beta1_ * m[k] + (1.0 - beta1_) * gk;
      v[k] = beta2_ * v[k] + (1.0 - beta2_) * gk * gk;
      w[k] -= lr * (m[k] / c1) / (std::sqrt(v[k] / c2) + eps_);
    }
  }
}

nlohmann::json EpochMetrics::to_json() const {
  return {{"epoch", epoch},         {"lr", lr},
          {"loss_base", loss_base}, {"loss_kd1", loss_kd1},
          {"loss_kd2", loss_kd2},   {"loss_total", loss_total},
          {"train_top1", train_top1}, {"val_top1", val_top1}};
}

// ---- inputs -------------------------------------------------------------------------

Tensor teacher_input(const data::AVSample& s, bool word_isolation, bool spec_augment,
                     const TrainConfig& cfg, Rng& rng, bool training) {
  Tensor x = word_isolation ? data::word_isolate(s.audio, s.boundary_a) : s.audio;
  if (spec_augment && training) {
    x = data::spec_augment(x, cfg.max_time_mask, cfg.max_freq_mask, rng, true);
  }
  return x;
}

Tensor student_input(const data::AVSample& s, std::size_t frame_size, bool word_boundary,
                     Rng& rng, bool training) {
  Tensor x = data::grayscale_and_crop(s.visual, frame_size, frame_size, rng,
                                      training ? data::CropMode::kRandom : data::CropMode::kCenter);
  return word_boundary ? data::attach_word_boundary_indicator(x, s.boundary_v) : x;
}

nn::ModelConfig model_config_for(const data::SynthConfig& synth, nn::ModelConfig knobs) {
  if (knobs.frame_size > synth.raw_frame_size) {
    throw std::invalid_argument("model frame_size " + std::to_string(knobs.frame_size) +
                                " exceeds the rendered frame size " +
                                std::to_string(synth.raw_frame_size));
  }
  knobs.visual_frames = synth.visual_frames;
  knobs.visual_channels = 1;
  knobs.audio_frames = synth.audio_frames;
  knobs.audio_bins = synth.audio_bins;
  knobs.num_classes = synth.num_classes;
  knobs.validate();
  return knobs;
}

// ---- evaluation ---------------------------------------------------------------------

double evaluate_top1(const nn::SequenceClassifier& model, const std::vector<data::AVSample>& samples,
                     const InputFn& input, Execution exec) {
  if (samples.empty()) throw std::invalid_argument("evaluate_top1: empty split");
  std::vector<char> correct(samples.size(), 0);
  for_each_index(samples.size(), exec, [&](std::size_t i) {
    ad::Tape tape;
    nn::BoundParams bound(tape, model.params(), false);
    nn::Context ctx{tape, bound, false, nullptr};
    const auto enc = model.encode(ctx, tape.constant(input(samples[i])));
    correct[i] = argmax(model.logits(ctx, enc.sequence_vector).value()) == samples[i].label;
  });
  std::size_t hits = 0;
  for (char c : correct) hits += static_cast<std::size_t>(c);
  return static_cast<double>(hits) / static_cast<double>(samples.size());
}

double evaluate_teacher(const nn::TeacherModel& model, const std::vector<data::AVSample>& samples,
                        bool word_isolation, Execution exec) {
  const TrainConfig unused;
  return evaluate_top1(model, samples, [&](const data::AVSample& s) {
    Rng rng;
    return teacher_input(s, word_isolation, false, unused, rng, false);
  }, exec);
}

double evaluate_student(const nn::StudentModel& model, const std::vector<data::AVSample>& samples,
                        bool word_boundary, Execution exec) {
  const std::size_t size = model.config().frame_size;
  return evaluate_top1(model, samples, [&](const data::AVSample& s) {
    Rng rng;
    return student_input(s, size, word_boundary, rng, false);
  }, exec);
}

TeacherTargets teacher_targets(const nn::TeacherModel& teacher, const Tensor& audio_input,
                               const align::AlignmentMap& map) {
  ad::Tape tape;
  nn::BoundParams bound(tape, teacher.params(), false);
  nn::Context ctx{tape, bound, false, nullptr};
  const auto enc = teacher.encode(ctx, tape.constant(audio_input));
  return {enc.sequence_vector.value(), align::apply_alignment(map, enc.frame_states.value())};
}

nn::TeacherModel make_teacher(const nn::ModelConfig& model, const Checkpoint& ckpt) {
  nn::TeacherModel teacher(model, 0);
  assign_params(teacher.params(), ckpt.params);
  return teacher;
}

nn::StudentModel make_student(const nn::ModelConfig& model, bool word_boundary,
                              const Checkpoint& ckpt) {
  nn::StudentModel student(model, word_boundary, 0);
  assign_params(student.params(), ckpt.params);
  return student;
}

// ---- shared loop --------------------------------------------------------------------

namespace {

/// Builds the per-sample closure for one step given the batch's dataset indices.
using BatchFactory =
    std::function<SampleFn(const std::vector<std::size_t>& indices, std::size_t step)>;

TrainResult run_loop(const std::string& role, nn::SequenceClassifier& model,
                     const data::AVDataset& ds, const TrainConfig& cfg,
                     const loss::DistillConfig& weights, const BatchFactory& factory,
                     const std::function<double()>& validate, const RunOptions& options) {
  const std::size_t n = ds.train.size();
  if (n == 0) throw std::invalid_argument(role + ": empty training split");
  const std::size_t per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const std::size_t total_steps = per_epoch * cfg.epochs;

  Rng shuffle_rng = derive_stream(cfg.seed, {kShuffleKey});
  Adam adam(model.params(), cfg);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);

  TrainResult result;
  nn::ParameterSet best = model.params();
  double best_val = -1.0;
  std::size_t step = 0;

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    for (std::size_t i = n; i > 1; --i) {
      const auto j = static_cast<std::size_t>(uniform_int(shuffle_rng, 0, static_cast<long>(i) - 1));
      std::swap(order[i - 1], order[j]);
    }
    EpochMetrics em;
    em.epoch = epoch;
    std::size_t correct = 0;
    for (std::size_t b = 0; b < per_epoch; ++b, ++step) {
      const std::size_t lo = b * cfg.batch_size;
      const std::size_t hi = std::min(n, lo + cfg.batch_size);
      const std::vector<std::size_t> indices(order.begin() + static_cast<long>(lo),
                                             order.begin() + static_cast<long>(hi));
      const double lr = cosine_lr(step, total_steps, cfg.initial_lr);
      if (b == 0) em.lr = lr;

      BatchOutcome out;
      try {
        out = run_batch(indices.size(), factory(indices, step), options.execution);
      } catch (const ad::NonFiniteError& e) {
        throw TrainingError(role + ": step " + std::to_string(step) + ": " + e.what());
      }
      StepRecord rec{step, lr, out.loss_base, out.loss_kd1, out.loss_kd2,
                     loss::total_loss(out.loss_base, out.loss_kd1, out.loss_kd2, weights)};
      if (!std::isfinite(rec.loss_total)) {
        throw TrainingError(role + ": non-finite loss at step " + std::to_string(step));
      }
      try {
        adam.step(model.params(), out.grads, lr);
      } catch (const TrainingError& e) {
        throw TrainingError(role + ": step " + std::to_string(step) + ": " + e.what());
      }
      result.steps.push_back(rec);
      em.loss_base += rec.loss_base;
      em.loss_kd1 += rec.loss_kd1;
      em.loss_kd2 += rec.loss_kd2;
      em.loss_total += rec.loss_total;
      correct += out.correct;
    }
    const double steps = static_cast<double>(per_epoch);
    em.loss_base /= steps;
    em.loss_kd1 /= steps;
    em.loss_kd2 /= steps;
    em.loss_total /= steps;
    em.train_top1 = static_cast<double>(correct) / static_cast<double>(n);
    em.val_top1 = validate();
    if (em.val_top1 > best_val) {
      best_val = em.val_top1;
      best = model.params();
      result.best_epoch = epoch;
    }
    result.epochs.push_back(em);
    if (options.log) {
      *options.log << "[" << role << "] epoch " << epoch + 1 << "/" << cfg.epochs << " lr "
                   << em.lr << " loss " << em.loss_total << " (base " << em.loss_base << ", kd1 "
                   << em.loss_kd1 << ", kd2 " << em.loss_kd2 << ") train " << em.train_top1
                   << " val " << em.val_top1 << std::endl;
    }
    if (options.on_epoch) options.on_epoch(em);
  }

  model.params() = best;
  result.best_val_top1 = best_val;
  Checkpoint& ckpt = result.checkpoint;
  ckpt.role = role;
  ckpt.params = best;
  ckpt.config = options.config_echo;
  ckpt.epoch = result.best_epoch;
  ckpt.rng_state = save_rng_state(shuffle_rng);
  ckpt.metrics = {{"best_epoch", result.best_epoch}, {"best_val_top1", best_val}};
  return result;
}

const std::vector<data::AVSample>& validation_split(const data::AVDataset& ds) {
  // fall back to the training split for tiny smoke configurations
  return ds.val.empty() ? ds.train : ds.val;
}

}  // namespace

// ---- teacher ------------------------------------------------------------------------

TrainResult train_teacher(const data::AVDataset& ds, const nn::ModelConfig& model_cfg,
                          const TrainConfig& cfg, double label_smoothing,
                          const RunOptions& options) {
  cfg.validate();
  nn::TeacherModel model(model_cfg, cfg.seed);
  const std::size_t classes = model_cfg.num_classes;
  const loss::DistillConfig no_kd;

  BatchFactory factory = [&](const std::vector<std::size_t>& indices, std::size_t step) {
    return [&, indices, step](std::size_t pos) {
      const data::AVSample& s = ds.train[indices[pos]];
      Rng rng = derive_stream(cfg.seed, {kTeacherStepKey, step, pos});
      const Tensor x = teacher_input(s, cfg.word_isolation, cfg.spec_augment, cfg, rng, true);
      ad::Tape tape;
      nn::BoundParams bound(tape, model.params(), true);
      nn::Context ctx{tape, bound, true, &rng};
      const auto enc = model.encode(ctx, tape.constant(x));
      const ad::Var logits = model.logits(ctx, enc.sequence_vector);
      const ad::Var base = loss::label_smoothed_ce(
          logits, loss::SmoothedTarget::make(classes, s.label, label_smoothing));
      tape.backward(base);
      SampleOutcome out;
      out.grads = bound.gradients();
      out.loss_base = base.value().item();
      out.correct = argmax(logits.value()) == s.label;
      return out;
    };
  };
  auto validate = [&] {
    return evaluate_teacher(model, validation_split(ds), cfg.word_isolation, options.execution);
  };
  return run_loop("teacher", model, ds, cfg, no_kd, factory, validate, options);
}

// ---- student ------------------------------------------------------------------------

TrainResult train_student(const data::AVDataset& ds, const FrozenTeacher& teacher,
                          const nn::ModelConfig& model_cfg, const TrainConfig& cfg,
                          const loss::DistillConfig& distill, const RunOptions& options) {
  cfg.validate();
  distill.validate();
  nn::StudentModel model(model_cfg, cfg.word_boundary, cfg.seed);
  nn::require_matched_backends(teacher.model, model);
  if (teacher.model.config().audio_frames != model_cfg.audio_frames ||
      teacher.model.config().audio_bins != model_cfg.audio_bins) {
    throw std::invalid_argument("student: teacher audio geometry differs from the dataset");
  }
  const std::size_t classes = model_cfg.num_classes;
  const std::size_t frame_size = model_cfg.frame_size;
  const bool use_teacher = distill.kd1_enabled || distill.kd2_enabled;
  const align::AlignmentMap map = align::build_alignment_map(
      model_cfg.audio_frames, model_cfg.visual_frames, distill.sigma, distill.window);

  auto teacher_view = [&](const data::AVSample& s) {
    Rng unused;
    return teacher_input(s, teacher.word_isolation, false, cfg, unused, false);
  };

  // Without mixup the teacher sees fixed inputs, so its targets are computed once.
  std::vector<TeacherTargets> cache;
  if (use_teacher && !distill.mixup_enabled) {
    cache.resize(ds.train.size());
    for_each_index(ds.train.size(), options.execution, [&](std::size_t i) {
      cache[i] = teacher_targets(teacher.model, teacher_view(ds.train[i]), map);
    });
  }

  BatchFactory factory = [&](const std::vector<std::size_t>& indices, std::size_t step) {
    double lambda = 1.0;
    std::vector<std::size_t> partner(indices.size());
    std::iota(partner.begin(), partner.end(), 0);
    if (distill.mixup_enabled) {
      Rng mix_rng = derive_stream(cfg.seed, {kMixupKey, step});
      lambda = loss::sample_mixup_lambda(mix_rng, distill.mixup_alpha);
      for (std::size_t i = partner.size(); i > 1; --i) {
        const auto j = static_cast<std::size_t>(uniform_int(mix_rng, 0, static_cast<long>(i) - 1));
        std::swap(partner[i - 1], partner[j]);
      }
    }
    return [&, indices, partner, lambda, step](std::size_t pos) {
      const data::AVSample& a = ds.train[indices[pos]];
      Rng rng = derive_stream(cfg.seed, {kStudentStepKey, step, pos});
      Tensor visual = student_input(a, frame_size, cfg.word_boundary, rng, true);
      Tensor target = loss::SmoothedTarget::make(classes, a.label, distill.epsilon).distribution;
      const TeacherTargets* targets = nullptr;
      TeacherTargets mixed_targets;
      if (distill.mixup_enabled) {
        const data::AVSample& b = ds.train[indices[partner[pos]]];
        visual = loss::mix(visual, student_input(b, frame_size, cfg.word_boundary, rng, true), lambda);
        target = loss::mix(target,
                           loss::SmoothedTarget::make(classes, b.label, distill.epsilon).distribution,
                           lambda);
        if (use_teacher) {
          mixed_targets = teacher_targets(
              teacher.model, loss::mix(teacher_view(a), teacher_view(b), lambda), map);
          targets = &mixed_targets;
        }
      } else if (use_teacher) {
        targets = &cache[indices[pos]];
      }

      ad::Tape tape;
      nn::BoundParams bound(tape, model.params(), true);
      nn::Context ctx{tape, bound, true, &rng};
      const auto enc = model.encode(ctx, tape.constant(visual));
      const ad::Var logits = model.logits(ctx, enc.sequence_vector);
      const ad::Var base = loss::label_smoothed_ce(logits, target);
      std::optional<ad::Var> kd1, kd2;
      if (distill.kd1_enabled) kd1 = loss::seq_kd_loss(targets->sequence, enc.sequence_vector);
      if (distill.kd2_enabled) kd2 = loss::frame_kd_loss(enc.frame_states, targets->frames);
      tape.backward(loss::total_loss(base, kd1, kd2, distill));

      SampleOutcome out;
      out.grads = bound.gradients();
      out.loss_base = base.value().item();
      out.loss_kd1 = kd1 ? kd1->value().item() : 0.0;
      out.loss_kd2 = kd2 ? kd2->value().item() : 0.0;
      out.correct = argmax(logits.value()) == argmax(target);
      return out;
    };
  };
  auto validate = [&] {
    return evaluate_student(model, validation_split(ds), cfg.word_boundary, options.execution);
  };
  return run_loop("student", model, ds, cfg, distill, factory, validate, options);
}

}  // namespace lipdistill::train
