#include "protoclip/cli.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <optional>

#include "protoclip/config.hpp"
#include "protoclip/error.hpp"
#include "protoclip/evaluation.hpp"
#include "protoclip/gradcheck.hpp"
#include "protoclip/prototypes.hpp"

namespace protoclip {

namespace fs = std::filesystem;

namespace {

struct Options {
  std::string config;
  std::string out = ".";
  std::optional<std::uint64_t> seed;
  std::string preset;
};

RunConfig resolve_config(const Options& opt) {
  RunConfig cfg = opt.config.empty() ? RunConfig{} : load_config(opt.config);
  if (opt.seed) apply_seed(cfg, *opt.seed);
  if (!opt.preset.empty()) apply_preset(cfg.train, opt.preset);
  return cfg;
}

fs::path require_dir(const std::string& dir) {
  const fs::path p(dir);
  if (!fs::is_directory(p)) throw IoError("output directory " + p.string() + " does not exist");
  return p;
}

std::string run_name(const Options& opt) { return opt.preset.empty() ? "run" : opt.preset; }

int gen_data(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  const fs::path dir = require_dir(opt.out);
  PreparedData data = prepare_data(cfg);
  const PairedDataset& train = data.train;
  const PairedDataset& heldout = data.heldout;
  const TeacherCache& teacher = data.teacher;

  write_dataset(dir / "train.bin", train);
  write_dataset(dir / "heldout.bin", heldout);
  write_teacher_cache(dir / "teacher.bin", teacher);
  const std::vector<NamedTensor> prompt_records{{"prompts", std::move(data.prompts)}};
  write_checkpoint(dir / "prompts.bin", prompt_records);

  out << "M=" << train.size() << " heldout=" << heldout.size() << " d_in_image=" << train.x_image.cols()
      << " d_in_text=" << train.x_text.cols() << " teacher_dim=" << teacher.features.cols() << '\n';
  std::vector<std::size_t> counts(train.n_classes, 0);
  for (auto y : train.labels) ++counts[y];
  out << "class_counts=";
  for (std::size_t c = 0; c < counts.size(); ++c) out << (c ? "," : "") << counts[c];
  out << '\n';
  return 0;
}

int train(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  const fs::path dir = require_dir(opt.out);
  const PairedDataset ds = read_dataset(dir / "train.bin");
  std::optional<TeacherCache> teacher;
  if (cfg.train.use_teacher) teacher = read_teacher_cache(dir / "teacher.bin");

  TrainObserver observer;
  observer.on_episode = [&](const Episode& ep) {
    out << "episode " << ep.number << " m=" << ep.indices.size();
    if (ep.has_proto) {
      out << " K=" << ep.image_protos.k() << " classifiers=" << (ep.pbt ? "pbt-means" : "cross-modal-centroids");
    }
    if (ep.has_external) out << " external=" << (ep.pbt ? "pbt-means" : "teacher-centroids");
    out << '\n';
  };
  const RunResult result = run(ds, teacher ? &*teacher : nullptr, cfg.train, observer);

  const std::string name = run_name(opt);
  write_metrics_csv(dir / (name + ".metrics.csv"), result.metrics);
  write_checkpoint(dir / (name + ".ckpt"), result.params.to_named());
  out << "episodes=" << result.episodes << " steps=" << result.metrics.size() << '\n';
  return 0;
}

Tensor read_prompts(const fs::path& path) {
  const auto records = read_checkpoint(path);
  for (const auto& r : records)
    if (r.name == "prompts") return r.value;
  throw IoError(path.string() + " holds no prompts record");
}

int eval(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  const fs::path dir = require_dir(opt.out);
  const ModelParams model = ModelParams::from_named(read_checkpoint(dir / (run_name(opt) + ".ckpt")));
  const PairedDataset heldout = read_dataset(dir / "heldout.bin");
  const EvalReport report = evaluate(model, heldout, read_prompts(dir / "prompts.bin"), cfg.eval);
  append_report(dir / (run_name(opt) + ".results.txt"), report);
  out << report.to_record() << '\n';
  return 0;
}

int cluster_report(const Options& opt, std::ostream& out) {
  const RunConfig cfg = resolve_config(opt);
  const fs::path dir = require_dir(opt.out);
  const ModelParams model = ModelParams::from_named(read_checkpoint(dir / (run_name(opt) + ".ckpt")));
  const PairedDataset heldout = read_dataset(dir / "heldout.bin");

  const Tensor z_image = encode(model.image_tower, heldout.x_image);
  const Tensor z_text = encode(model.text_tower, heldout.x_text);
  const std::vector<std::pair<std::string, Tensor>> spaces = {
      {"z_image", normalized_rows(z_image)},
      {"z_text", normalized_rows(z_text)},
      {"h_image", normalized_rows(project(model.image_head, z_image))},
      {"h_text", normalized_rows(project(model.text_head, z_text))},
  };
  std::vector<std::uint64_t> seeds(cfg.eval.cluster_seeds);
  for (std::size_t s = 0; s < seeds.size(); ++s) seeds[s] = cfg.eval.seed * 1000003ull + s;

  std::ostringstream report;
  report << "space,ari,ami,objective\n";
  for (const auto& [name, z] : spaces) {
    const ClusterScore cs = cluster_eval(z, heldout.labels, heldout.n_classes, seeds, cfg.eval.cluster_iters);
    char buf[256];
    std::snprintf(buf, sizeof buf, "%s,%.17g,%.17g,%.17g\n", name.c_str(), cs.ari, cs.ami, cs.objective);
    report << buf;
  }
  std::ofstream os(dir / (run_name(opt) + ".clusters.csv"), std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot write cluster report in " + dir.string());
  os << report.str();
  out << report.str();
  return 0;
}

int grad_check(const Options& opt, std::ostream& out) {
  const auto cases = default_grad_cases();
  const auto results = run_grad_checks(cases, 100, opt.seed.value_or(0));
  bool ok = true;
  out << std::left << std::setw(22) << "op" << std::setw(11) << "instances" << std::setw(10) << "failures"
      << "worst_rel_error  status\n";
  for (const auto& r : results) {
    char err[32];
    std::snprintf(err, sizeof err, "%.3e", r.worst_rel_error);
    out << std::left << std::setw(22) << r.name << std::setw(11) << r.instances << std::setw(10) << r.failures
        << std::setw(17) << err << (r.passed() ? "pass" : "FAIL") << '\n';
    ok = ok && r.passed();
  }
  return ok ? 0 : 1;
}

}  // namespace

int cli_main(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Prototypical contrastive pretraining on synthetic paired data"};
  app.require_subcommand(1, 1);
  Options opt;
  std::uint64_t seed = 0;

  const std::map<std::string, std::string> commands = {
      {"gen-data", "write train/held-out datasets, class prompts and the teacher cache"},
      {"train", "train a model and write its metrics CSV and checkpoint"},
      {"eval", "score a checkpoint on the held-out split"},
      {"cluster-report", "K-Means ARI/AMI of every representation space"},
      {"grad-check", "finite-difference check of every differentiable op"},
  };
  std::map<std::string, CLI::App*> subs;
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", opt.config, "key = value config file");
    sub->add_option("--out", opt.out, "working directory");
    sub->add_option("--seed", seed, "overrides data, training and evaluation seeds");
    sub->add_option("--preset", opt.preset, "ablation preset");
    subs[name] = sub;
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 1;
  }

  try {
    for (const auto& [name, sub] : subs) {
      if (!*sub) continue;
      if (sub->count("--seed")) opt.seed = seed;
      if (name == "gen-data") return gen_data(opt, out);
      if (name == "train") return train(opt, out);
      if (name == "eval") return eval(opt, out);
      if (name == "cluster-report") return cluster_report(opt, out);
      return grad_check(opt, out);
    }
  } catch (const IoError& e) {
    err << "error: " << e.what() << '\n';
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return 1;
  }
  return 1;
}

}  // namespace protoclip
