#pragma once

#include <cmath>
#include <optional>

#include "protoclip/autodiff.hpp"
#include "protoclip/tensor.hpp"

namespace protoclip {

/// Learnable temperature stored as the log of its inverse, so the effective
/// temperature is 1 / exp(log_inverse).
struct TemperatureParam {
  static constexpr double kInitial = 0.07;
  static constexpr double kMaxInverse = 100.0;

  double log_inverse = -std::log(kInitial);

  static TemperatureParam from_tau(double tau);
  double tau() const;
  double inverse() const;
};

/// tau = exp(-log_inverse) as a differentiable 1x1 Var.
Var temperature_from_log_inverse(const Var& log_inverse);

/// Bounds 1/tau at max_inverse. In-range values are left untouched.
void clip_temperature(TemperatureParam& tau, double max_inverse = TemperatureParam::kMaxInverse);

/// Bidirectional InfoNCE over the N x N similarity matrix of already
/// L2-normalized rows, averaged over both directions.
Var info_nce(const Var& z_image, const Var& z_text, const Var& tau);

/// Softmax over prototype similarities, softmax(h * prototypes^T / tau).
/// Prototypes are detached; both inputs are expected row-normalized.
Var proto_scores(const Var& h, const Var& prototypes, const Var& tau);

/// Cross-modal prototypical cross-entropy averaged over samples and the two
/// directions. `text_targets` are the rows the image scores are trained on
/// and vice versa. Probabilities are clamped at 1e-12 before the log.
Var proto_loss(const Var& p_image, const Tensor& text_targets, const Var& p_text, const Tensor& image_targets);

/// Both modalities trained towards the same external-teacher target rows.
Var external_proto_loss(const Var& p_image_ext, const Var& p_text_ext, const Tensor& external_targets);

struct LossBreakdown {
  double l_clip = 0.0;
  double l_proto = 0.0;
  std::optional<double> l_proto_external;  // empty when the teacher is disabled

  double external_or_zero() const { return l_proto_external.value_or(0.0); }
};

double total_loss(const LossBreakdown& parts);
/// Differentiable sum of the enabled terms. Null Vars are skipped.
Var total_loss(const Var& l_clip, const Var& l_proto, const Var& l_proto_external);

}  // namespace protoclip
