#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "protoclip/data.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/losses.hpp"
#include "protoclip/prototypes.hpp"

namespace protoclip {

/// Every hyperparameter of a training run. Defaults are the desk-scale
/// configuration; the large-scale reference values are noted alongside.
struct TrainConfig {
  // Architecture.
  std::size_t d_z = 64;           // 1024 at scale
  std::size_t d_h = 16;           // 128 at scale
  std::size_t tower_hidden = 128;
  std::size_t head_hidden = 64;   // 2048 at scale

  // Episodic schedule.
  std::size_t batch_size = 64;        // 512
  std::size_t episode_size = 2000;    // 200,000
  std::size_t n_epoch = 4;            // 32
  std::size_t warmup_episodes = 2;    // 40

  // Optimization.
  double lr = 1e-3;                   // 5e-4
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
  double weight_decay = 0.1;          // 0.5
  double max_grad_norm = 1e5;
  double tau_init = TemperatureParam::kInitial;
  double tau_max_inverse = TemperatureParam::kMaxInverse;

  // Prototypes.
  double tau_y = 0.01;
  std::size_t images_per_prototype = 100;  // 10
  std::size_t kmeans_iters = 20;

  // Ablation switches.
  bool use_proto = true;
  bool use_teacher = true;
  bool use_pbt = true;
  bool use_soft_targets = true;
  double aug_sigma = 0.1;
  double lock_image_fraction = 0.0;  // 0 disables locked-image tuning

  std::uint64_t seed = 0;

  /// Throws ConfigError on inconsistent values.
  void validate() const;
};

/// Named switch overrides mirroring the component ablations.
/// Known names: full, no-teacher, no-pbt, no-soft-target, no-kmeans,
/// no-augmentation, clip-only.
void apply_preset(TrainConfig& cfg, const std::string& preset);
std::span<const std::string_view> preset_names();

struct ModelParams {
  TowerParams image_tower;
  TowerParams text_tower;
  HeadParams image_head;
  HeadParams text_head;
  TemperatureParam tau_clip;
  TemperatureParam tau_proto;

  std::vector<NamedTensor> to_named() const;
  static ModelParams from_named(std::span<const NamedTensor> records);

  friend bool operator==(const ModelParams& a, const ModelParams& b);
};

ModelParams init_model(const TrainConfig& cfg, std::size_t d_in_image, std::size_t d_in_text);

/// n_epoch * M / m rounded up.
std::size_t episode_count(std::size_t n_epoch, std::size_t dataset_size, std::size_t episode_size);
/// Sizes of every episode of a run; all equal m except possibly the last.
std::vector<std::size_t> episode_sizes(std::size_t n_epoch, std::size_t dataset_size, std::size_t episode_size);

/// m distinct indices drawn uniformly from [0, M).
std::vector<std::size_t> sample_episode(std::size_t dataset_size, std::size_t m, std::mt19937_64& rng);

/// Linear warmup to lr_base, then half-cosine decay to zero at total_steps.
double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_base);

/// One optimizable block of values and how the optimizer treats it.
struct ParamSlot {
  std::span<double> values;
  bool decay = true;       // decoupled weight decay applies
  bool image_side = false; // follows the image learning rate
};

/// Adam with decoupled weight decay. State is kept per slot, in slot order.
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay);

  /// One update. `grads[i]` must have as many entries as `slots[i].values`.
  void step(std::span<const ParamSlot> slots, std::span<const Tensor> grads, double lr, double image_lr);
  std::size_t steps_taken() const { return t_; }

 private:
  double beta1_, beta2_, eps_, weight_decay_;
  std::size_t t_ = 0;
  std::vector<std::vector<double>> m_, v_;
};

/// Global L2 norm over all gradients.
double global_norm(std::span<const Tensor> grads);
/// Scales gradients so their global norm is at most max_norm. Returns the norm before clipping.
double clip_grad_norm(std::span<Tensor> grads, double max_norm);

/// Parameter views in optimizer order: image tower, image head, text tower,
/// text head, tau_clip, tau_proto.
std::vector<ParamSlot> parameter_slots(ModelParams& params);

struct Episode {
  std::size_t number = 0;
  std::vector<std::size_t> indices;
  Tensor h_image;  // m x d_h, raw projected features
  Tensor h_text;
  Tensor teacher;  // m x d_teacher, empty without a teacher

  bool has_proto = false;
  bool has_external = false;
  PrototypeSet image_protos;
  PrototypeSet text_protos;
  PrototypeSet external_protos;

  /// Row-normalized classifiers applied to each student space.
  Tensor classifier_for_image;   // from text prototypes
  Tensor classifier_for_text;    // from image prototypes
  Tensor external_for_image;
  Tensor external_for_text;
  bool pbt = false;

  SoftTargetTable image_targets;
  SoftTargetTable text_targets;
  SoftTargetTable external_targets;
};

/// Feature extraction (augmentation draw #1), clustering of each space and
/// classifier/target construction for one sampled index set.
Episode build_episode(std::vector<std::size_t> indices, const PairedDataset& ds, const TeacherCache* teacher,
                      const TrainConfig& cfg, const ModelParams& params, std::mt19937_64& rng,
                      std::mt19937_64& aug_rng);

struct MetricsRow {
  std::size_t episode = 0;
  std::size_t step = 0;
  double loss_clip = 0.0;
  double loss_proto = 0.0;
  double loss_external = 0.0;
  double loss_total = 0.0;
  double tau_clip = 0.0;
  double tau_proto = 0.0;
  double lr = 0.0;
  double grad_norm = 0.0;
};

struct StepSchedule {
  std::size_t total_steps = 0;
  std::size_t warmup_steps = 0;
  std::size_t image_lock_step = 0;  // == total_steps when locking is disabled
  double lr_base = 0.0;

  double lr(std::size_t step) const;
  double image_lr(std::size_t step) const;
};

StepSchedule make_schedule(const TrainConfig& cfg, std::span<const std::size_t> sizes);

/// Optimizer state carried across episodes.
struct TrainState {
  ModelParams params;
  AdamW optimizer;
  StepSchedule schedule;
  std::size_t step = 0;
};

using StepCallback = std::function<void(const MetricsRow&, const ModelParams&)>;

/// Minibatch optimization over one episode (augmentation draw #2 per batch).
/// `on_step` runs after every optimizer step.
std::vector<MetricsRow> train_episode(const Episode& episode, const PairedDataset& ds, const TrainConfig& cfg,
                                      TrainState& state, std::mt19937_64& aug_rng, const StepCallback& on_step = {});

/// Optional hooks used by tests to inspect a run as it progresses.
struct TrainObserver {
  std::function<void(const Episode&)> on_episode;
  StepCallback on_step;
};

struct RunResult {
  ModelParams params;
  std::vector<MetricsRow> metrics;
  std::size_t episodes = 0;
};

/// Builds then trains ceil(n_epoch * M / m) episodes.
RunResult run(const PairedDataset& ds, const TeacherCache* teacher, const TrainConfig& cfg,
              const TrainObserver& observer = {});

inline constexpr std::string_view kMetricsHeader =
    "episode,step,loss_clip,loss_proto,loss_external,loss_total,tau_clip,tau_proto,lr,grad_norm";

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);
std::string format_metrics_csv(std::span<const MetricsRow> rows);

}  // namespace protoclip
