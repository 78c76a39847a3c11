#include "protoclip/gradcheck.hpp"

#include <algorithm>
#include <array>

#include "protoclip/encoders.hpp"
#include "protoclip/error.hpp"
#include "protoclip/losses.hpp"

namespace protoclip {

namespace {

Tensor gaussian(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

Tensor stochastic_rows(std::size_t rows, std::size_t cols, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> uniform(0.05, 1.0);
  Tensor t(rows, cols);
  for (std::size_t r = 0; r < rows; ++r) {
    double total = 0.0;
    for (double& v : t.row(r)) total += (v = uniform(rng));
    for (double& v : t.row(r)) v /= total;
  }
  return t;
}

// log(1/tau) for tau drawn around the usual initial range.
Tensor log_inverse_temperature(std::mt19937_64& rng) {
  return Tensor::scalar(std::uniform_real_distribution<double>(0.5, 3.0)(rng));
}

Var tau_of(const Var& log_inverse) { return temperature_from_log_inverse(log_inverse); }

// Fixed random readout turning a matrix output into a scalar.
Var readout(const Var& out, const Tensor& weights) { return sum(mul(out, Var::constant(weights))); }

GradInstance mlp_instance(std::mt19937_64& rng, std::span<const std::size_t> widths) {
  const MlpParams mlp = init_tower(widths, rng());
  const std::size_t n = 4;
  const Tensor x = gaussian(n, widths.front(), rng);
  const Tensor w = gaussian(n, widths.back(), rng);
  GradInstance inst;
  for (const auto& layer : mlp.layers) {
    inst.params.push_back(layer.weight);
    inst.params.push_back(layer.bias);
  }
  // Biases away from zero keep ReLU inputs off the kink.
  for (std::size_t i = 1; i < inst.params.size(); i += 2)
    for (double& v : inst.params[i].data()) v = std::normal_distribution<double>(0.0, 0.5)(rng);
  inst.fn = [x, w](std::span<const Var> p) {
    MlpVars vars;
    for (std::size_t i = 0; i < p.size(); i += 2) {
      vars.weights.push_back(p[i]);
      vars.biases.push_back(p[i + 1]);
    }
    return readout(mlp_forward(vars, Var::constant(x)), w);
  };
  return inst;
}

}  // namespace

std::vector<GradCase> default_grad_cases() {
  std::vector<GradCase> cases;
  cases.push_back({"info_nce", [](std::mt19937_64& rng) {
                     GradInstance inst;
                     inst.params = {gaussian(5, 4, rng), gaussian(5, 4, rng), log_inverse_temperature(rng)};
                     inst.fn = [](std::span<const Var> p) {
                       return info_nce(l2_normalize_rows(p[0]), l2_normalize_rows(p[1]), tau_of(p[2]));
                     };
                     return inst;
                   }});
  cases.push_back({"proto_loss", [](std::mt19937_64& rng) {
                     const std::size_t n = 5, k = 3, d = 4;
                     const Tensor protos_for_image = normalized_rows(gaussian(k, d, rng));
                     const Tensor protos_for_text = normalized_rows(gaussian(k, d, rng));
                     const Tensor text_targets = stochastic_rows(n, k, rng);
                     const Tensor image_targets = stochastic_rows(n, k, rng);
                     GradInstance inst;
                     inst.params = {gaussian(n, d, rng), gaussian(n, d, rng), log_inverse_temperature(rng)};
                     inst.fn = [=](std::span<const Var> p) {
                       const Var tau = tau_of(p[2]);
                       const Var p_image =
                           proto_scores(l2_normalize_rows(p[0]), Var::constant(protos_for_image), tau);
                       const Var p_text = proto_scores(l2_normalize_rows(p[1]), Var::constant(protos_for_text), tau);
                       return proto_loss(p_image, text_targets, p_text, image_targets);
                     };
                     return inst;
                   }});
  cases.push_back({"external_proto_loss", [](std::mt19937_64& rng) {
                     const std::size_t n = 5, k = 3, d = 4;
                     const Tensor for_image = normalized_rows(gaussian(k, d, rng));
                     const Tensor for_text = normalized_rows(gaussian(k, d, rng));
                     const Tensor targets = stochastic_rows(n, k, rng);
                     GradInstance inst;
                     inst.params = {gaussian(n, d, rng), gaussian(n, d, rng), log_inverse_temperature(rng)};
                     inst.fn = [=](std::span<const Var> p) {
                       const Var tau = tau_of(p[2]);
                       return external_proto_loss(proto_scores(l2_normalize_rows(p[0]), Var::constant(for_image), tau),
                                                  proto_scores(l2_normalize_rows(p[1]), Var::constant(for_text), tau),
                                                  targets);
                     };
                     return inst;
                   }});
  cases.push_back({"encoder_tower", [](std::mt19937_64& rng) {
                     const std::array<std::size_t, 4> widths{3, 5, 4, 3};
                     return mlp_instance(rng, widths);
                   }});
  cases.push_back({"projection_head", [](std::mt19937_64& rng) {
                     const std::array<std::size_t, 3> widths{4, 6, 3};
                     return mlp_instance(rng, widths);
                   }});
  cases.push_back({"tau_clip", [](std::mt19937_64& rng) {
                     const Tensor z_image = normalized_rows(gaussian(6, 3, rng));
                     const Tensor z_text = normalized_rows(gaussian(6, 3, rng));
                     GradInstance inst;
                     inst.params = {log_inverse_temperature(rng)};
                     inst.fn = [=](std::span<const Var> p) {
                       return info_nce(Var::constant(z_image), Var::constant(z_text), tau_of(p[0]));
                     };
                     return inst;
                   }});
  cases.push_back({"tau_proto", [](std::mt19937_64& rng) {
                     const std::size_t n = 6, k = 4, d = 3;
                     const Tensor h_image = normalized_rows(gaussian(n, d, rng));
                     const Tensor h_text = normalized_rows(gaussian(n, d, rng));
                     const Tensor protos_image = normalized_rows(gaussian(k, d, rng));
                     const Tensor protos_text = normalized_rows(gaussian(k, d, rng));
                     const Tensor y_text = stochastic_rows(n, k, rng);
                     const Tensor y_image = stochastic_rows(n, k, rng);
                     GradInstance inst;
                     inst.params = {log_inverse_temperature(rng)};
                     inst.fn = [=](std::span<const Var> p) {
                       const Var tau = tau_of(p[0]);
                       return proto_loss(proto_scores(Var::constant(h_image), Var::constant(protos_image), tau), y_text,
                                         proto_scores(Var::constant(h_text), Var::constant(protos_text), tau), y_image);
                     };
                     return inst;
                   }});
  return cases;
}

std::vector<GradCheckResult> run_grad_checks(std::span<const GradCase> cases, std::size_t instances,
                                             std::uint64_t seed, double tolerance) {
  if (cases.empty()) throw ContractError("grad-check: the op registry is empty");
  std::vector<GradCheckResult> results;
  for (std::size_t c = 0; c < cases.size(); ++c) {
    std::mt19937_64 rng(seed + 0x9E3779B97F4A7C15ull * (c + 1));
    GradCheckResult r{cases[c].name, instances, 0, 0.0};
    for (std::size_t i = 0; i < instances; ++i) {
      const GradInstance inst = cases[c].make(rng);
      const double err = finite_diff_check(inst.fn, inst.params);
      r.worst_rel_error = std::max(r.worst_rel_error, err);
      if (!(err < tolerance)) ++r.failures;
    }
    results.push_back(r);
  }
  return results;
}

}  // namespace protoclip
