#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "protoclip/data.hpp"
#include "protoclip/evaluation.hpp"
#include "protoclip/trainer.hpp"

namespace protoclip {

/// Everything a CLI invocation needs, read from a flat `key = value` file.
/// Lines starting with '#' are comments. Unknown keys are rejected.
struct RunConfig {
  SyntheticSpec data;
  std::size_t heldout_per_class = 100;
  TeacherSpec teacher;
  /// Text-side offset as a multiple of the training text RMS row norm; 0 disables it.
  double gap_ratio = 0.0;
  std::uint64_t gap_seed = 99;
  TrainConfig train;
  EvalConfig eval;
};

RunConfig parse_config(const std::string& text);
RunConfig load_config(const std::filesystem::path& path);
/// Round-trippable dump of every key.
std::string format_config(const RunConfig& cfg);
/// Propagates a single --seed override to the data, training and evaluation seeds.
void apply_seed(RunConfig& cfg, std::uint64_t seed);

/// The held-out split generated alongside the training set.
SyntheticSpec heldout_spec(const RunConfig& cfg);
/// Text offset vector for cfg (zero-norm when gap_ratio is 0).
Tensor modality_gap(const RunConfig& cfg, const PairedDataset& train);

/// Everything gen-data writes, with the modality gap already applied.
struct PreparedData {
  PairedDataset train;
  PairedDataset heldout;
  TeacherCache teacher;
  Tensor prompts;  // one raw text input per class
};
PreparedData prepare_data(const RunConfig& cfg);

}  // namespace protoclip
