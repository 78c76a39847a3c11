#include "protoclip/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "protoclip/error.hpp"

namespace protoclip {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

template <typename T>
T parse_number(const std::string& key, const std::string& value) {
  T out{};
  const auto* end = value.data() + value.size();
  auto [ptr, ec] = std::from_chars(value.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value '" + value + "' for " + key);
  return out;
}

bool parse_bool(const std::string& key, const std::string& value) {
  if (value == "true" || value == "1") return true;
  if (value == "false" || value == "0") return false;
  throw ConfigError("bad boolean '" + value + "' for " + key);
}

std::string show(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

struct Field {
  std::function<void(RunConfig&, const std::string&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <typename T>
Field field(T RunConfig::*outer) {
  return {[outer](RunConfig& c, const std::string& k, const std::string& v) { c.*outer = parse_number<T>(k, v); },
          [outer](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) return show(c.*outer);
            else return std::to_string(c.*outer);
          }};
}

template <typename S, typename T>
Field field(S RunConfig::*outer, T S::*inner) {
  if constexpr (std::is_same_v<T, bool>) {
    return {[=](RunConfig& c, const std::string& k, const std::string& v) { (c.*outer).*inner = parse_bool(k, v); },
            [=](const RunConfig& c) { return std::string((c.*outer).*inner ? "true" : "false"); }};
  } else {
    return {[=](RunConfig& c, const std::string& k, const std::string& v) {
              (c.*outer).*inner = parse_number<T>(k, v);
            },
            [=](const RunConfig& c) {
              if constexpr (std::is_floating_point_v<T>) return show((c.*outer).*inner);
              else return std::to_string((c.*outer).*inner);
            }};
  }
}

const std::map<std::string, Field>& fields() {
  using R = RunConfig;
  static const std::map<std::string, Field> table = {
      {"data.n_classes", field(&R::data, &SyntheticSpec::n_classes)},
      {"data.per_class", field(&R::data, &SyntheticSpec::per_class)},
      {"data.d_latent", field(&R::data, &SyntheticSpec::d_latent)},
      {"data.d_in_image", field(&R::data, &SyntheticSpec::d_in_image)},
      {"data.d_in_text", field(&R::data, &SyntheticSpec::d_in_text)},
      {"data.noise_sigma", field(&R::data, &SyntheticSpec::noise_sigma)},
      {"data.view_noise_ratio", field(&R::data, &SyntheticSpec::view_noise_ratio)},
      {"data.seed", field(&R::data, &SyntheticSpec::seed)},
      {"data.heldout_per_class", field(&R::heldout_per_class)},
      {"data.gap_ratio", field(&R::gap_ratio)},
      {"data.gap_seed", field(&R::gap_seed)},
      {"teacher.hidden", field(&R::teacher, &TeacherSpec::hidden)},
      {"teacher.raw_dim", field(&R::teacher, &TeacherSpec::raw_dim)},
      {"teacher.reduced_dim", field(&R::teacher, &TeacherSpec::reduced_dim)},
      {"teacher.seed", field(&R::teacher, &TeacherSpec::seed)},
      {"train.d_z", field(&R::train, &TrainConfig::d_z)},
      {"train.d_h", field(&R::train, &TrainConfig::d_h)},
      {"train.tower_hidden", field(&R::train, &TrainConfig::tower_hidden)},
      {"train.head_hidden", field(&R::train, &TrainConfig::head_hidden)},
      {"train.batch_size", field(&R::train, &TrainConfig::batch_size)},
      {"train.episode_size", field(&R::train, &TrainConfig::episode_size)},
      {"train.n_epoch", field(&R::train, &TrainConfig::n_epoch)},
      {"train.warmup_episodes", field(&R::train, &TrainConfig::warmup_episodes)},
      {"train.lr", field(&R::train, &TrainConfig::lr)},
      {"train.adam_beta1", field(&R::train, &TrainConfig::adam_beta1)},
      {"train.adam_beta2", field(&R::train, &TrainConfig::adam_beta2)},
      {"train.adam_eps", field(&R::train, &TrainConfig::adam_eps)},
      {"train.weight_decay", field(&R::train, &TrainConfig::weight_decay)},
      {"train.max_grad_norm", field(&R::train, &TrainConfig::max_grad_norm)},
      {"train.tau_init", field(&R::train, &TrainConfig::tau_init)},
      {"train.tau_max_inverse", field(&R::train, &TrainConfig::tau_max_inverse)},
      {"train.tau_y", field(&R::train, &TrainConfig::tau_y)},
      {"train.images_per_prototype", field(&R::train, &TrainConfig::images_per_prototype)},
      {"train.kmeans_iters", field(&R::train, &TrainConfig::kmeans_iters)},
      {"train.use_proto", field(&R::train, &TrainConfig::use_proto)},
      {"train.use_teacher", field(&R::train, &TrainConfig::use_teacher)},
      {"train.use_pbt", field(&R::train, &TrainConfig::use_pbt)},
      {"train.use_soft_targets", field(&R::train, &TrainConfig::use_soft_targets)},
      {"train.aug_sigma", field(&R::train, &TrainConfig::aug_sigma)},
      {"train.lock_image_fraction", field(&R::train, &TrainConfig::lock_image_fraction)},
      {"train.seed", field(&R::train, &TrainConfig::seed)},
      {"eval.split_fraction", field(&R::eval, &EvalConfig::split_fraction)},
      {"eval.seed", field(&R::eval, &EvalConfig::seed)},
      {"eval.knn_k", field(&R::eval, &EvalConfig::knn_k)},
      {"eval.cluster_seeds", field(&R::eval, &EvalConfig::cluster_seeds)},
      {"eval.cluster_iters", field(&R::eval, &EvalConfig::cluster_iters)},
      {"eval.probe_iterations",
       {[](R& c, const std::string& k, const std::string& v) { c.eval.probe.iterations = parse_number<std::size_t>(k, v); },
        [](const R& c) { return std::to_string(c.eval.probe.iterations); }}},
      {"eval.probe_step",
       {[](R& c, const std::string& k, const std::string& v) { c.eval.probe.step = parse_number<double>(k, v); },
        [](const R& c) { return show(c.eval.probe.step); }}},
  };
  return table;
}

}  // namespace

RunConfig parse_config(const std::string& text) {
  RunConfig cfg;
  std::istringstream in(text);
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    const std::string body = trim(line);
    if (body.empty() || body.front() == '#') continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) throw ConfigError("line " + std::to_string(number) + ": expected key = value");
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    const auto it = fields().find(key);
    if (it == fields().end()) throw ConfigError("line " + std::to_string(number) + ": unknown key '" + key + "'");
    it->second.set(cfg, key, value);
  }
  return cfg;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open config " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const RunConfig& cfg) {
  std::string out;
  for (const auto& [key, f] : fields()) out += key + " = " + f.get(cfg) + "\n";
  return out;
}

void apply_seed(RunConfig& cfg, std::uint64_t seed) {
  cfg.data.seed = seed;
  cfg.train.seed = seed;
  cfg.eval.seed = seed;
}

SyntheticSpec heldout_spec(const RunConfig& cfg) {
  SyntheticSpec spec = cfg.data;
  spec.per_class = cfg.heldout_per_class;
  return spec;
}

Tensor modality_gap(const RunConfig& cfg, const PairedDataset& train) {
  if (cfg.gap_ratio < 0.0) throw ConfigError("data.gap_ratio must be non-negative");
  if (cfg.gap_ratio == 0.0) return Tensor(1, train.x_text.cols());
  return random_gap_vector(train.x_text.cols(), cfg.gap_ratio * rms_row_norm(train.x_text), cfg.gap_seed);
}

PreparedData prepare_data(const RunConfig& cfg) {
  PreparedData d;
  d.train = generate_synthetic(cfg.data, 0);
  d.heldout = generate_synthetic(heldout_spec(cfg), 1);
  const Tensor gap = modality_gap(cfg, d.train);
  d.prompts = offset_rows(class_prompts(cfg.data), gap);
  d.train = inject_modality_gap(std::move(d.train), gap);
  d.heldout = inject_modality_gap(std::move(d.heldout), gap);
  d.teacher = build_teacher_cache(d.train, cfg.teacher);
  return d;
}

}  // namespace protoclip
