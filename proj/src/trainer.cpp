#include "protoclip/trainer.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <sstream>
#include <string_view>

#include "protoclip/error.hpp"

namespace protoclip {

namespace {

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) {
  // splitmix64 finalizer over (seed, tag).
  std::uint64_t z = seed + 0x9E3779B97F4A7C15ull * (tag + 1);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

enum SeedTag : std::uint64_t {
  kImageTower = 1,
  kTextTower = 2,
  kImageHead = 3,
  kTextHead = 4,
  kEpisodes = 5,
  kAugment = 6,
};

void append_mlp_slots(MlpParams& mlp, bool image_side, std::vector<ParamSlot>& out) {
  for (auto& layer : mlp.layers) {
    out.push_back({layer.weight.data(), true, image_side});
    out.push_back({layer.bias.data(), false, image_side});
  }
}

void append_mlp_grads(const MlpVars& vars, std::vector<Tensor>& out) {
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    out.push_back(vars.weights[l].grad());
    out.push_back(vars.biases[l].grad());
  }
}

Tensor classifier(const Tensor& centroids) { return normalized_rows(centroids); }

std::vector<std::uint32_t> slice(const std::vector<std::uint32_t>& v, std::size_t begin, std::size_t end) {
  return {v.begin() + static_cast<std::ptrdiff_t>(begin), v.begin() + static_cast<std::ptrdiff_t>(end)};
}

template <typename F>
Var guarded(const char* term, std::size_t episode, std::size_t step, F&& compute) {
  try {
    return compute();
  } catch (const DataError& e) {
    throw DataError(std::string("non-finite ") + term + " at episode " + std::to_string(episode) + ", step " +
                    std::to_string(step) + ": " + e.what());
  }
}

constexpr std::array<std::string_view, 7> kPresets = {"full",      "no-teacher",      "no-pbt",   "no-soft-target",
                                                      "no-kmeans", "no-augmentation", "clip-only"};

}  // namespace

void TrainConfig::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) throw ConfigError(std::string("invalid training config: ") + what);
  };
  require(d_z > 0 && d_h > 0 && tower_hidden > 0 && head_hidden > 0, "layer widths must be positive");
  require(batch_size > 0, "batch_size must be positive");
  require(episode_size > 0, "episode_size must be positive");
  require(lr >= 0.0, "lr must be non-negative");
  require(adam_beta1 >= 0.0 && adam_beta1 < 1.0, "adam_beta1 must lie in [0, 1)");
  require(adam_beta2 >= 0.0 && adam_beta2 < 1.0, "adam_beta2 must lie in [0, 1)");
  require(adam_eps > 0.0, "adam_eps must be positive");
  require(weight_decay >= 0.0, "weight_decay must be non-negative");
  require(max_grad_norm > 0.0, "max_grad_norm must be positive");
  require(tau_init > 0.0, "tau_init must be positive");
  require(tau_max_inverse > 0.0, "tau_max_inverse must be positive");
  require(tau_y > 0.0, "tau_y must be positive");
  require(images_per_prototype > 0, "images_per_prototype must be positive");
  require(kmeans_iters > 0, "kmeans_iters must be positive");
  require(aug_sigma >= 0.0, "aug_sigma must be non-negative");
  require(lock_image_fraction >= 0.0 && lock_image_fraction <= 1.0, "lock_image_fraction must lie in [0, 1]");
}

std::span<const std::string_view> preset_names() { return kPresets; }

void apply_preset(TrainConfig& cfg, const std::string& preset) {
  if (preset == "full") {
    cfg.use_proto = cfg.use_teacher = cfg.use_pbt = cfg.use_soft_targets = true;
    return;
  }
  // The component ablations are taken relative to the teacher-free model.
  cfg.use_proto = true;
  cfg.use_teacher = false;
  cfg.use_pbt = true;
  cfg.use_soft_targets = true;
  if (preset == "no-teacher") return;
  if (preset == "no-pbt") {
    cfg.use_pbt = false;
  } else if (preset == "no-soft-target") {
    cfg.use_soft_targets = false;
  } else if (preset == "no-kmeans" || preset == "clip-only") {
    cfg.use_proto = false;
  } else if (preset == "no-augmentation") {
    cfg.aug_sigma = 0.0;
  } else {
    throw ConfigError("unknown preset '" + preset + "'");
  }
}

std::vector<NamedTensor> ModelParams::to_named() const {
  std::vector<NamedTensor> out;
  append_named(image_tower, "image_tower", out);
  append_named(image_head, "image_head", out);
  append_named(text_tower, "text_tower", out);
  append_named(text_head, "text_head", out);
  out.push_back({"tau_clip.log_inverse", Tensor::scalar(tau_clip.log_inverse)});
  out.push_back({"tau_proto.log_inverse", Tensor::scalar(tau_proto.log_inverse)});
  return out;
}

ModelParams ModelParams::from_named(std::span<const NamedTensor> records) {
  auto scalar = [&](const std::string& name) {
    for (const auto& r : records)
      if (r.name == name) {
        if (!r.value.is_scalar()) throw IoError("checkpoint record " + name + " is not a scalar");
        return r.value.item();
      }
    throw IoError("checkpoint lacks " + name);
  };
  ModelParams p;
  static_cast<MlpParams&>(p.image_tower) = mlp_from_named(records, "image_tower");
  static_cast<MlpParams&>(p.image_head) = mlp_from_named(records, "image_head");
  static_cast<MlpParams&>(p.text_tower) = mlp_from_named(records, "text_tower");
  static_cast<MlpParams&>(p.text_head) = mlp_from_named(records, "text_head");
  p.tau_clip.log_inverse = scalar("tau_clip.log_inverse");
  p.tau_proto.log_inverse = scalar("tau_proto.log_inverse");
  return p;
}

bool operator==(const ModelParams& a, const ModelParams& b) { return a.to_named() == b.to_named(); }

ModelParams init_model(const TrainConfig& cfg, std::size_t d_in_image, std::size_t d_in_text) {
  const std::array<std::size_t, 3> image_widths{d_in_image, cfg.tower_hidden, cfg.d_z};
  const std::array<std::size_t, 3> text_widths{d_in_text, cfg.tower_hidden, cfg.d_z};
  const std::array<std::size_t, 3> head_widths{cfg.d_z, cfg.head_hidden, cfg.d_h};
  ModelParams p;
  p.image_tower = init_tower(image_widths, derive_seed(cfg.seed, kImageTower));
  p.text_tower = init_tower(text_widths, derive_seed(cfg.seed, kTextTower));
  p.image_head = init_head(head_widths, derive_seed(cfg.seed, kImageHead));
  p.text_head = init_head(head_widths, derive_seed(cfg.seed, kTextHead));
  p.tau_clip = TemperatureParam::from_tau(cfg.tau_init);
  p.tau_proto = TemperatureParam::from_tau(cfg.tau_init);
  return p;
}

std::size_t episode_count(std::size_t n_epoch, std::size_t dataset_size, std::size_t episode_size) {
  if (episode_size == 0) throw ConfigError("episode_size must be positive");
  const std::size_t total = n_epoch * dataset_size;
  return (total + episode_size - 1) / episode_size;
}

std::vector<std::size_t> episode_sizes(std::size_t n_epoch, std::size_t dataset_size, std::size_t episode_size) {
  if (episode_size > dataset_size) {
    throw ConfigError("episode_size " + std::to_string(episode_size) + " exceeds dataset size " +
                      std::to_string(dataset_size));
  }
  const std::size_t count = episode_count(n_epoch, dataset_size, episode_size);
  std::vector<std::size_t> sizes(count, episode_size);
  const std::size_t total = n_epoch * dataset_size;
  if (count > 0) sizes.back() = total - (count - 1) * episode_size;
  return sizes;
}

std::vector<std::size_t> sample_episode(std::size_t dataset_size, std::size_t m, std::mt19937_64& rng) {
  if (m == 0 || m > dataset_size) {
    throw ConfigError("episode of " + std::to_string(m) + " samples from a dataset of " + std::to_string(dataset_size));
  }
  std::vector<std::size_t> pool(dataset_size);
  for (std::size_t i = 0; i < dataset_size; ++i) pool[i] = i;
  // Partial Fisher-Yates: the first m slots are a uniform sample without replacement.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(i, dataset_size - 1)(rng);
    std::swap(pool[i], pool[j]);
  }
  pool.resize(m);
  return pool;
}

double lr_schedule(std::size_t step, std::size_t total_steps, std::size_t warmup_steps, double lr_base) {
  if (warmup_steps >= total_steps) {
    throw ConfigError("warmup of " + std::to_string(warmup_steps) + " steps does not fit in " +
                      std::to_string(total_steps) + " total steps");
  }
  if (step > total_steps) throw ContractError("lr_schedule: step beyond total_steps");
  if (step < warmup_steps) return lr_base * static_cast<double>(step) / static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) / static_cast<double>(total_steps - warmup_steps);
  return lr_base * 0.5 * (1.0 + std::cos(std::numbers::pi * progress));
}

double StepSchedule::lr(std::size_t step) const { return lr_schedule(step, total_steps, warmup_steps, lr_base); }

double StepSchedule::image_lr(std::size_t step) const {
  if (image_lock_step >= total_steps) return lr(step);
  if (step >= image_lock_step) return 0.0;
  const std::size_t warmup = std::min(warmup_steps, image_lock_step - 1);
  return lr_schedule(step, image_lock_step, warmup, lr_base);
}

StepSchedule make_schedule(const TrainConfig& cfg, std::span<const std::size_t> sizes) {
  StepSchedule s;
  s.lr_base = cfg.lr;
  for (std::size_t e = 0; e < sizes.size(); ++e) {
    const std::size_t steps = (sizes[e] + cfg.batch_size - 1) / cfg.batch_size;
    s.total_steps += steps;
    if (e < cfg.warmup_episodes) s.warmup_steps += steps;
  }
  if (s.total_steps > 0 && s.warmup_steps >= s.total_steps) {
    throw ConfigError("warmup_episodes (" + std::to_string(cfg.warmup_episodes) + ") must be fewer than the " +
                      std::to_string(sizes.size()) + " episodes of the run");
  }
  s.image_lock_step = s.total_steps;
  if (cfg.lock_image_fraction > 0.0) {
    s.image_lock_step = static_cast<std::size_t>(std::floor(cfg.lock_image_fraction * static_cast<double>(s.total_steps)));
  }
  return s;
}

AdamW::AdamW(double beta1, double beta2, double eps, double weight_decay)
    : beta1_(beta1), beta2_(beta2), eps_(eps), weight_decay_(weight_decay) {}

void AdamW::step(std::span<const ParamSlot> slots, std::span<const Tensor> grads, double lr, double image_lr) {
  if (slots.size() != grads.size()) throw ContractError("AdamW: slot and gradient counts differ");
  if (m_.empty()) {
    for (const auto& s : slots) {
      m_.emplace_back(s.values.size(), 0.0);
      v_.emplace_back(s.values.size(), 0.0);
    }
  }
  if (m_.size() != slots.size()) throw ContractError("AdamW: parameter layout changed between steps");
  ++t_;
  const double bias1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  const double bias2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  for (std::size_t i = 0; i < slots.size(); ++i) {
    auto values = slots[i].values;
    const auto g = grads[i].data();
    if (g.size() != values.size()) throw ContractError("AdamW: gradient size mismatch");
    const double rate = slots[i].image_side ? image_lr : lr;
    const double shrink = slots[i].decay ? 1.0 - rate * weight_decay_ : 1.0;
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t j = 0; j < values.size(); ++j) {
      m[j] = beta1_ * m[j] + (1.0 - beta1_) * g[j];
      v[j] = beta2_ * v[j] + (1.0 - beta2_) * g[j] * g[j];
      const double update = (m[j] / bias1) / (std::sqrt(v[j] / bias2) + eps_);
      values[j] = values[j] * shrink - rate * update;
    }
  }
}

double global_norm(std::span<const Tensor> grads) {
  double total = 0.0;
  for (const auto& g : grads)
    for (double v : g.data()) total += v * v;
  return std::sqrt(total);
}

double clip_grad_norm(std::span<Tensor> grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double factor = max_norm / norm;
    for (auto& g : grads)
      for (double& v : g.data()) v *= factor;
  }
  return norm;
}

std::vector<ParamSlot> parameter_slots(ModelParams& params) {
  std::vector<ParamSlot> slots;
  append_mlp_slots(params.image_tower, true, slots);
  append_mlp_slots(params.image_head, true, slots);
  append_mlp_slots(params.text_tower, false, slots);
  append_mlp_slots(params.text_head, false, slots);
  slots.push_back({std::span<double>(&params.tau_clip.log_inverse, 1), false, false});
  slots.push_back({std::span<double>(&params.tau_proto.log_inverse, 1), false, false});
  return slots;
}

Episode build_episode(std::vector<std::size_t> indices, const PairedDataset& ds, const TeacherCache* teacher,
                      const TrainConfig& cfg, const ModelParams& params, std::mt19937_64& rng,
                      std::mt19937_64& aug_rng) {
  Episode ep;
  ep.indices = std::move(indices);
  const std::size_t m = ep.indices.size();

  const Tensor x_image = augment(ds.x_image.gather_rows(ep.indices), cfg.aug_sigma, aug_rng);
  const Tensor x_text = augment(ds.x_text.gather_rows(ep.indices), cfg.aug_sigma, aug_rng);
  ep.h_image = project(params.image_head, encode(params.image_tower, x_image));
  ep.h_text = project(params.text_head, encode(params.text_tower, x_text));

  ep.has_proto = cfg.use_proto;
  ep.has_external = cfg.use_teacher;
  ep.pbt = cfg.use_pbt;
  if (!ep.has_proto && !ep.has_external) return ep;

  const std::size_t k = std::max<std::size_t>(1, m / cfg.images_per_prototype);
  auto targets_for = [&](const Tensor& normalized) {
    return cfg.use_soft_targets ? soft_targets(normalized, cfg.tau_y) : hard_targets(normalized.rows());
  };

  if (ep.has_proto) {
    const std::uint64_t image_seed = rng();
    const std::uint64_t text_seed = rng();
    ep.image_protos = kmeans(ep.h_image, k, cfg.kmeans_iters, image_seed);
    ep.image_protos.space = Space::Image;
    ep.text_protos = kmeans(ep.h_text, k, cfg.kmeans_iters, text_seed);
    ep.text_protos.space = Space::Text;

    const Tensor image_protos = classifier(ep.image_protos.centroids);
    const Tensor text_protos = classifier(ep.text_protos.centroids);
    if (cfg.use_pbt) {
      ep.classifier_for_image = classifier(pbt_centroids(ep.text_protos.assignments, k, ep.h_image));
      ep.classifier_for_text = classifier(pbt_centroids(ep.image_protos.assignments, k, ep.h_text));
    } else {
      ep.classifier_for_image = text_protos;
      ep.classifier_for_text = image_protos;
    }
    ep.text_targets = targets_for(text_protos);
    ep.image_targets = targets_for(image_protos);
  }

  if (ep.has_external) {
    if (!teacher) throw ConfigError("teacher loss enabled but no teacher cache was provided");
    ep.teacher = teacher->features.gather_rows(ep.indices);
    ep.external_protos = kmeans(ep.teacher, k, cfg.kmeans_iters, rng());
    ep.external_protos.space = Space::External;
    const Tensor external_protos = classifier(ep.external_protos.centroids);
    if (cfg.use_pbt) {
      ep.external_for_image = classifier(pbt_centroids(ep.external_protos.assignments, k, ep.h_image));
      ep.external_for_text = classifier(pbt_centroids(ep.external_protos.assignments, k, ep.h_text));
    } else {
      if (external_protos.cols() != cfg.d_h) {
        throw ConfigError("without PBT the teacher width (" + std::to_string(external_protos.cols()) +
                          ") must equal d_h (" + std::to_string(cfg.d_h) + ")");
      }
      ep.external_for_image = external_protos;
      ep.external_for_text = external_protos;
    }
    ep.external_targets = targets_for(external_protos);
  }
  return ep;
}

std::vector<MetricsRow> train_episode(const Episode& episode, const PairedDataset& ds, const TrainConfig& cfg,
                                      TrainState& state, std::mt19937_64& aug_rng, const StepCallback& on_step) {
  std::vector<MetricsRow> rows;
  const std::size_t m = episode.indices.size();
  auto slots = parameter_slots(state.params);

  for (std::size_t begin = 0; begin < m; begin += cfg.batch_size) {
    const std::size_t end = std::min(m, begin + cfg.batch_size);
    const std::span<const std::size_t> batch(episode.indices.data() + begin, end - begin);
    const std::size_t step = state.step;
    ModelParams& p = state.params;

    const Var x_image = Var::constant(augment(ds.x_image.gather_rows(batch), cfg.aug_sigma, aug_rng));
    const Var x_text = Var::constant(augment(ds.x_text.gather_rows(batch), cfg.aug_sigma, aug_rng));

    const MlpVars image_tower = bind(p.image_tower, true);
    const MlpVars image_head = bind(p.image_head, true);
    const MlpVars text_tower = bind(p.text_tower, true);
    const MlpVars text_head = bind(p.text_head, true);
    const Var tau_clip_param = Var::parameter(Tensor::scalar(p.tau_clip.log_inverse));
    const Var tau_proto_param = Var::parameter(Tensor::scalar(p.tau_proto.log_inverse));

    const Var z_image = encode(image_tower, x_image);
    const Var z_text = encode(text_tower, x_text);
    Var h_image, h_text;
    if (episode.has_proto || episode.has_external) {
      h_image = l2_normalize_rows(project(image_head, z_image));
      h_text = l2_normalize_rows(project(text_head, z_text));
    }

    MetricsRow row;
    row.episode = episode.number;
    row.step = step;
    row.tau_clip = p.tau_clip.tau();
    row.tau_proto = p.tau_proto.tau();

    const Var l_clip = guarded("loss_clip", episode.number, step, [&] {
      return info_nce(l2_normalize_rows(z_image), l2_normalize_rows(z_text), temperature_from_log_inverse(tau_clip_param));
    });

    Var l_proto;
    if (episode.has_proto) {
      l_proto = guarded("loss_proto", episode.number, step, [&] {
        const Var tau = temperature_from_log_inverse(tau_proto_param);
        const Var p_image = proto_scores(h_image, Var::constant(episode.classifier_for_image), tau);
        const Var p_text = proto_scores(h_text, Var::constant(episode.classifier_for_text), tau);
        const Tensor text_targets = episode.text_targets.select(slice(episode.text_protos.assignments, begin, end));
        const Tensor image_targets = episode.image_targets.select(slice(episode.image_protos.assignments, begin, end));
        return proto_loss(p_image, text_targets, p_text, image_targets);
      });
    }

    Var l_external;
    if (episode.has_external) {
      l_external = guarded("loss_external", episode.number, step, [&] {
        const Var tau = temperature_from_log_inverse(tau_proto_param);
        const Var p_image = proto_scores(h_image, Var::constant(episode.external_for_image), tau);
        const Var p_text = proto_scores(h_text, Var::constant(episode.external_for_text), tau);
        const Tensor targets = episode.external_targets.select(slice(episode.external_protos.assignments, begin, end));
        return external_proto_loss(p_image, p_text, targets);
      });
    }

    const Var total = total_loss(l_clip, l_proto, l_external);
    backward(total);

    std::vector<Tensor> grads;
    grads.reserve(slots.size());
    append_mlp_grads(image_tower, grads);
    append_mlp_grads(image_head, grads);
    append_mlp_grads(text_tower, grads);
    append_mlp_grads(text_head, grads);
    grads.push_back(tau_clip_param.grad());
    grads.push_back(tau_proto_param.grad());

    row.grad_norm = clip_grad_norm(grads, cfg.max_grad_norm);
    row.lr = state.schedule.lr(step);
    state.optimizer.step(slots, grads, row.lr, state.schedule.image_lr(step));
    clip_temperature(p.tau_clip, cfg.tau_max_inverse);
    clip_temperature(p.tau_proto, cfg.tau_max_inverse);

    row.loss_clip = l_clip.value().item();
    row.loss_proto = l_proto ? l_proto.value().item() : 0.0;
    row.loss_external = l_external ? l_external.value().item() : 0.0;
    LossBreakdown parts{row.loss_clip, row.loss_proto, std::nullopt};
    if (l_external) parts.l_proto_external = row.loss_external;
    row.loss_total = total_loss(parts);
    rows.push_back(row);
    ++state.step;
    if (on_step) on_step(row, p);
  }
  return rows;
}

RunResult run(const PairedDataset& ds, const TeacherCache* teacher, const TrainConfig& cfg,
              const TrainObserver& observer) {
  cfg.validate();
  if (cfg.use_teacher) {
    if (!teacher) throw ConfigError("teacher loss enabled but no teacher cache was provided");
    if (teacher->features.rows() != ds.size()) throw ConfigError("teacher cache rows do not match the dataset");
  }
  const auto sizes = episode_sizes(cfg.n_epoch, ds.size(), cfg.episode_size);
  TrainState state{init_model(cfg, ds.x_image.cols(), ds.x_text.cols()),
                   AdamW(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps, cfg.weight_decay),
                   make_schedule(cfg, sizes), 0};

  std::mt19937_64 rng(derive_seed(cfg.seed, kEpisodes));
  std::mt19937_64 aug_rng(derive_seed(cfg.seed, kAugment));
  RunResult result;
  for (std::size_t e = 0; e < sizes.size(); ++e) {
    Episode ep = build_episode(sample_episode(ds.size(), sizes[e], rng), ds, teacher, cfg, state.params, rng, aug_rng);
    ep.number = e;
    if (observer.on_episode) observer.on_episode(ep);
    auto rows = train_episode(ep, ds, cfg, state, aug_rng, observer.on_step);
    result.metrics.insert(result.metrics.end(), rows.begin(), rows.end());
  }
  result.params = std::move(state.params);
  result.episodes = sizes.size();
  return result;
}

std::string format_metrics_csv(std::span<const MetricsRow> rows) {
  std::ostringstream os;
  os << kMetricsHeader << '\n';
  char buf[512];
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof buf, "%zu,%zu,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g\n", r.episode, r.step,
                  r.loss_clip, r.loss_proto, r.loss_external, r.loss_total, r.tau_clip, r.tau_proto, r.lr, r.grad_norm);
    os << buf;
  }
  return os.str();
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << format_metrics_csv(rows);
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace protoclip
