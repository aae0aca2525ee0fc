// SPDX-License-Identifier: Apache-2.0
//
// Training objectives: label-smoothed cross-entropy, mixup, sequence- and
// frame-level distillation, and their weighted sum.
//
// Batch conventions: a rank-1 operand is one sample; a rank-2 logits/target
// pair or a rank-3 frame tensor carries a leading batch axis and the loss is
// the mean over samples.
#pragma once

#include <cstddef>
#include <optional>
#include <vector>

#include "lipdistill/autodiff.hpp"
#include "lipdistill/random.hpp"

namespace lipdistill::loss {

struct DistillConfig {
  double lambda1 = 2.0;   // sequence-level weight
  double lambda2 = 10.0;  // frame-level weight
  double epsilon = 0.1;   // label smoothing
  double mixup_alpha = 0.2;
  bool mixup_enabled = false;
  bool kd1_enabled = false;
  bool kd2_enabled = false;
  // frame-level alignment window
  double sigma = 3.0;
  std::size_t window = 7;

  /// Throws std::invalid_argument.
  void validate() const;
};

/// q_i = ε/N off the label, 1 − (N−1)ε/N on it.
struct SmoothedTarget {
  Tensor distribution;  // [N]

  static SmoothedTarget make(std::size_t num_classes, std::size_t label, double epsilon);
  /// λ·a + (1−λ)·b
  static SmoothedTarget mix(const SmoothedTarget& a, const SmoothedTarget& b, double lambda);
};

/// −Σ q_i log softmax(logits)_i. logits [N] with target [N], or [B×N] with
/// targets [B×N] (batch mean).
ad::Var label_smoothed_ce(ad::Var logits, const Tensor& target);
ad::Var label_smoothed_ce(ad::Var logits, const SmoothedTarget& target);

/// ‖s_a − s_v‖². The teacher vector is a constant, so gradients reach s_v only.
ad::Var seq_kd_loss(const Tensor& teacher_sequence, ad::Var student_sequence);

/// (1/J) Σ_j ‖h_v_j − h̃_a_j‖² for [J×D] operands; [B×J×D] averages over B too.
ad::Var frame_kd_loss(ad::Var student_frames, const Tensor& aligned_teacher_frames);

/// L_base + λ1·L_KD1 + λ2·L_KD2 with absent terms contributing nothing.
ad::Var total_loss(ad::Var base, std::optional<ad::Var> kd1, std::optional<ad::Var> kd2,
                   const DistillConfig& cfg);
/// Same combination over already-evaluated components (disabled terms are 0).
double total_loss(double base, double kd1, double kd2, const DistillConfig& cfg);

struct MixupExample {
  Tensor visual;
  Tensor audio;
  Tensor target;  // smoothed distribution [N]
};

/// λ·a + (1−λ)·b elementwise. Throws when λ ∉ [0, 1] or shapes differ.
Tensor mix(const Tensor& a, const Tensor& b, double lambda);

/// Pairs a[i] with b[i] and mixes visual, audio and target with the same λ.
std::vector<MixupExample> mixup_batch(const std::vector<MixupExample>& a,
                                      const std::vector<MixupExample>& b, double lambda);

/// Draw λ ~ Beta(α, α).
double sample_mixup_lambda(Rng& rng, double alpha);

}  // namespace lipdistill::loss
