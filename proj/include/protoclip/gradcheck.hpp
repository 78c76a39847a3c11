#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "protoclip/autodiff.hpp"

namespace protoclip {

/// One random problem: a scalar function and the point to check it at.
struct GradInstance {
  ScalarFn fn;
  std::vector<Tensor> params;
};

struct GradCase {
  std::string name;
  std::function<GradInstance(std::mt19937_64&)> make;
};

struct GradCheckResult {
  std::string name;
  std::size_t instances = 0;
  std::size_t failures = 0;
  double worst_rel_error = 0.0;
  bool passed() const { return failures == 0; }
};

/// Losses, encoder towers, projection heads and both temperatures.
std::vector<GradCase> default_grad_cases();

/// Runs every case on `instances` random draws. Throws ContractError on an
/// empty registry.
std::vector<GradCheckResult> run_grad_checks(std::span<const GradCase> cases, std::size_t instances,
                                             std::uint64_t seed, double tolerance = 1e-4);

}  // namespace protoclip
