#include "protoclip/losses.hpp"

#include <cmath>

#include "protoclip/error.hpp"

namespace protoclip {

namespace {

void check_rows_stochastic(const Tensor& t, const char* what) {
  for (std::size_t r = 0; r < t.rows(); ++r) {
    double s = 0.0;
    for (double v : t.row(r)) s += v;
    if (std::abs(s - 1.0) > 1e-6) {
      throw ContractError(std::string(what) + ": row " + std::to_string(r) + " is not stochastic");
    }
  }
}

void check_pair(const Tensor& p, const Tensor& y, const char* what) {
  if (p.rows() != y.rows() || p.cols() != y.cols()) {
    throw ContractError(std::string(what) + ": scores " + p.shape_string() + " vs targets " + y.shape_string());
  }
  check_rows_stochastic(p, what);
  check_rows_stochastic(y, what);
}

}  // namespace

TemperatureParam TemperatureParam::from_tau(double tau) {
  if (!(tau > 0.0)) throw DomainError("temperature must be positive");
  return TemperatureParam{-std::log(tau)};
}

double TemperatureParam::tau() const { return std::exp(-log_inverse); }
double TemperatureParam::inverse() const { return std::exp(log_inverse); }

Var temperature_from_log_inverse(const Var& log_inverse) { return exp(neg(log_inverse)); }

void clip_temperature(TemperatureParam& tau, double max_inverse) {
  if (!(max_inverse > 0.0)) throw DomainError("clip_temperature: max_inverse must be positive");
  double bound = std::log(max_inverse);
  while (std::exp(bound) > max_inverse) bound = std::nextafter(bound, -HUGE_VAL);
  if (tau.log_inverse > bound) tau.log_inverse = bound;
}

Var info_nce(const Var& z_image, const Var& z_text, const Var& tau) {
  if (z_image.rows() != z_text.rows()) {
    throw ContractError("info_nce: " + std::to_string(z_image.rows()) + " images vs " +
                        std::to_string(z_text.rows()) + " texts");
  }
  if (z_image.rows() == 0) throw ContractError("info_nce: empty batch");
  Var logits = div_scalar(matmul_nt(z_image, z_text), tau);
  Var image_to_text = mean(diag(log_softmax_rows(logits)));
  Var text_to_image = mean(diag(log_softmax_rows(transpose(logits))));
  return scale(add(image_to_text, text_to_image), -0.5);
}

Var proto_scores(const Var& h, const Var& prototypes, const Var& tau) {
  if (h.cols() != prototypes.cols()) {
    throw DimensionError("proto_scores: representations " + h.value().shape_string() + " vs prototypes " +
                         prototypes.value().shape_string());
  }
  return softmax_rows(matmul_nt(h, detach(prototypes)), tau);
}

Var proto_loss(const Var& p_image, const Tensor& text_targets, const Var& p_text, const Tensor& image_targets) {
  check_pair(p_image.value(), text_targets, "proto_loss (image)");
  check_pair(p_text.value(), image_targets, "proto_loss (text)");
  return scale(add(soft_cross_entropy(p_image, text_targets), soft_cross_entropy(p_text, image_targets)), 0.5);
}

Var external_proto_loss(const Var& p_image_ext, const Var& p_text_ext, const Tensor& external_targets) {
  check_pair(p_image_ext.value(), external_targets, "external_proto_loss (image)");
  check_pair(p_text_ext.value(), external_targets, "external_proto_loss (text)");
  return scale(add(soft_cross_entropy(p_image_ext, external_targets), soft_cross_entropy(p_text_ext, external_targets)),
               0.5);
}

double total_loss(const LossBreakdown& parts) {
  double total = parts.l_clip + parts.l_proto;
  if (parts.l_proto_external) total += *parts.l_proto_external;
  return total;
}

Var total_loss(const Var& l_clip, const Var& l_proto, const Var& l_proto_external) {
  Var total;
  for (const Var* term : {&l_clip, &l_proto, &l_proto_external}) {
    if (!*term) continue;
    total = total ? add(total, *term) : *term;
  }
  if (!total) throw ContractError("total_loss: no loss terms enabled");
  return total;
}

}  // namespace protoclip
