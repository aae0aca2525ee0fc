// SPDX-License-Identifier: Apache-2.0
#include "lipdistill/losses.hpp"

#include <cmath>
#include <stdexcept>
#include <string>

namespace lipdistill::loss {

void DistillConfig::validate() const {
  auto fail = [](const std::string& m) { throw std::invalid_argument("distill config: " + m); };
  if (!(lambda1 >= 0.0) || !(lambda2 >= 0.0)) fail("lambda1 and lambda2 must be >= 0");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) fail("epsilon must lie in [0, 1)");
  if (mixup_enabled && !(mixup_alpha > 0.0)) fail("mixup_alpha must be > 0 when mixup is on");
  if (!(sigma > 0.0) || !std::isfinite(sigma)) fail("sigma must be positive");
  if (window == 0 || window % 2 == 0) fail("window must be odd and positive");
}

SmoothedTarget SmoothedTarget::make(std::size_t num_classes, std::size_t label, double epsilon) {
  if (num_classes < 2) throw std::invalid_argument("smoothed target: need at least 2 classes");
  if (label >= num_classes) throw std::invalid_argument("smoothed target: label out of range");
  if (!(epsilon >= 0.0 && epsilon < 1.0)) {
    throw std::invalid_argument("smoothed target: epsilon must lie in [0, 1)");
  }
  const double n = static_cast<double>(num_classes);
  SmoothedTarget t{Tensor({num_classes}, epsilon / n)};
  t.distribution[label] = 1.0 - (n - 1.0) * epsilon / n;
  return t;
}

SmoothedTarget SmoothedTarget::mix(const SmoothedTarget& a, const SmoothedTarget& b,
                                   double lambda) {
  return SmoothedTarget{loss::mix(a.distribution, b.distribution, lambda)};
}

ad::Var label_smoothed_ce(ad::Var logits, const Tensor& target) {
  if (logits.shape() != target.shape()) {
    throw std::invalid_argument("label_smoothed_ce: logits " + shape_to_string(logits.shape()) +
                                " vs target " + shape_to_string(target.shape()));
  }
  const std::size_t batch = logits.value().rank() == 2 ? logits.value().dim(0) : 1;
  ad::Tape& tape = logits.tape();
  ad::Var weighted = ad::mul(ad::log_softmax(logits), tape.constant(target));
  return ad::scale(ad::sum_all(weighted), -1.0 / static_cast<double>(batch));
}

ad::Var label_smoothed_ce(ad::Var logits, const SmoothedTarget& target) {
  return label_smoothed_ce(logits, target.distribution);
}

namespace {

ad::Var squared_distance(ad::Var student, const Tensor& teacher, const char* what) {
  if (student.shape() != teacher.shape()) {
    throw std::invalid_argument(std::string(what) + ": student " +
                                shape_to_string(student.shape()) + " vs teacher " +
                                shape_to_string(teacher.shape()));
  }
  ad::Var diff = ad::sub(student, student.tape().constant(teacher));
  return ad::sum_all(ad::mul(diff, diff));
}

}  // namespace

ad::Var seq_kd_loss(const Tensor& teacher_sequence, ad::Var student_sequence) {
  const std::size_t rank = student_sequence.value().rank();
  if (rank != 1 && rank != 2) throw std::invalid_argument("seq_kd_loss: expected [D] or [B×D]");
  ad::Var total = squared_distance(student_sequence, teacher_sequence, "seq_kd_loss");
  if (rank == 1) return total;
  return ad::scale(total, 1.0 / static_cast<double>(student_sequence.value().dim(0)));
}

ad::Var frame_kd_loss(ad::Var student_frames, const Tensor& aligned_teacher_frames) {
  const Tensor& v = student_frames.value();
  if (v.rank() != 2 && v.rank() != 3) {
    throw std::invalid_argument("frame_kd_loss: expected [J×D] or [B×J×D]");
  }
  ad::Var total = squared_distance(student_frames, aligned_teacher_frames, "frame_kd_loss");
  const std::size_t rows = v.rank() == 2 ? v.dim(0) : v.dim(0) * v.dim(1);
  return ad::scale(total, 1.0 / static_cast<double>(rows));
}

ad::Var total_loss(ad::Var base, std::optional<ad::Var> kd1, std::optional<ad::Var> kd2,
                   const DistillConfig& cfg) {
  ad::Var out = base;
  if (kd1) out = ad::add(out, ad::scale(*kd1, cfg.lambda1));
  if (kd2) out = ad::add(out, ad::scale(*kd2, cfg.lambda2));
  return out;
}

double total_loss(double base, double kd1, double kd2, const DistillConfig& cfg) {
  return base + cfg.lambda1 * kd1 + cfg.lambda2 * kd2;
}

Tensor mix(const Tensor& a, const Tensor& b, double lambda) {
  if (!(lambda >= 0.0 && lambda <= 1.0)) {
    throw std::invalid_argument("mixup: lambda must lie in [0, 1], got " + std::to_string(lambda));
  }
  if (a.shape() != b.shape()) {
    throw std::invalid_argument("mixup: shapes " + shape_to_string(a.shape()) + " and " +
                                shape_to_string(b.shape()) + " differ");
  }
  Tensor out(a.shape());
  const double other = 1.0 - lambda;
  for (std::size_t i = 0; i < a.size(); ++i) out[i] = lambda * a[i] + other * b[i];
  return out;
}

std::vector<MixupExample> mixup_batch(const std::vector<MixupExample>& a,
                                      const std::vector<MixupExample>& b, double lambda) {
  if (a.size() != b.size()) throw std::invalid_argument("mixup: batch sizes differ");
  std::vector<MixupExample> out;
  out.reserve(a.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    out.push_back({mix(a[i].visual, b[i].visual, lambda), mix(a[i].audio, b[i].audio, lambda),
                   mix(a[i].target, b[i].target, lambda)});
  }
  return out;
}

double sample_mixup_lambda(Rng& rng, double alpha) {
  if (!(alpha > 0.0)) throw std::invalid_argument("mixup: alpha must be > 0");
  return beta(rng, alpha, alpha);
}

}  // namespace lipdistill::loss
