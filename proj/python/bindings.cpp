#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "protoclip/autodiff.hpp"
#include "protoclip/config.hpp"
#include "protoclip/data.hpp"
#include "protoclip/error.hpp"
#include "protoclip/evaluation.hpp"
#include "protoclip/gradcheck.hpp"
#include "protoclip/losses.hpp"
#include "protoclip/prototypes.hpp"
#include "protoclip/trainer.hpp"

namespace py = pybind11;
using namespace protoclip;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const Array& a) {
  if (a.ndim() == 1) return Tensor(1, a.shape(0), std::vector<double>(a.data(), a.data() + a.size()));
  if (a.ndim() != 2) throw DimensionError("expected a 1-D or 2-D array");
  return Tensor(a.shape(0), a.shape(1), std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const Tensor& t) {
  Array out({t.rows(), t.cols()});
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

std::vector<std::uint32_t> to_labels(const LabelArray& a) { return {a.data(), a.data() + a.size()}; }

LabelArray labels_array(const std::vector<std::uint32_t>& v) {
  LabelArray out(v.size());
  std::copy(v.begin(), v.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Prototypical contrastive pretraining core";
  m.attr("__version__") = "0.1.0";

  py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
  py::register_exception<ContractError>(m, "ContractError", PyExc_ValueError);
  py::register_exception<DimensionError>(m, "DimensionError", PyExc_ValueError);
  py::register_exception<DomainError>(m, "DomainError", PyExc_ValueError);
  py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
  py::register_exception<IoError>(m, "IoError", PyExc_OSError);

  m.def("info_nce", [](const Array& z_image, const Array& z_text, double tau) {
    return info_nce(Var::constant(to_tensor(z_image)), Var::constant(to_tensor(z_text)),
                    Var::constant(Tensor::scalar(tau))).value().item();
  }, py::arg("z_image"), py::arg("z_text"), py::arg("tau"), "Bidirectional InfoNCE of row-normalized inputs.");

  m.def("proto_scores", [](const Array& h, const Array& prototypes, double tau) {
    return to_array(proto_scores(Var::constant(to_tensor(h)), Var::constant(to_tensor(prototypes)),
                                 Var::constant(Tensor::scalar(tau))).value());
  }, py::arg("h"), py::arg("prototypes"), py::arg("tau"));

  m.def("proto_loss", [](const Array& p_image, const Array& text_targets, const Array& p_text,
                         const Array& image_targets) {
    return proto_loss(Var::constant(to_tensor(p_image)), to_tensor(text_targets), Var::constant(to_tensor(p_text)),
                      to_tensor(image_targets)).value().item();
  }, py::arg("p_image"), py::arg("text_targets"), py::arg("p_text"), py::arg("image_targets"));

  m.def("kmeans", [](const Array& h, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
    const PrototypeSet ps = kmeans(to_tensor(h), k, max_iters, seed);
    py::dict out;
    out["centroids"] = to_array(ps.centroids);
    out["assignments"] = labels_array(ps.assignments);
    out["objective"] = ps.objective;
    out["objective_trace"] = ps.objective_trace;
    out["iterations"] = ps.iterations;
    return out;
  }, py::arg("h"), py::arg("k"), py::arg("max_iters") = 20, py::arg("seed") = 0);

  m.def("soft_targets", [](const Array& normalized_centroids, double tau_y) {
    return to_array(soft_targets(to_tensor(normalized_centroids), tau_y).rows);
  }, py::arg("normalized_centroids"), py::arg("tau_y") = 0.01);

  m.def("pbt_centroids", [](const LabelArray& assignments, std::size_t k, const Array& h_student) {
    return to_array(pbt_centroids(to_labels(assignments), k, to_tensor(h_student)));
  }, py::arg("assignments"), py::arg("k"), py::arg("h_student"));

  m.def("ari", [](const LabelArray& a, const LabelArray& b) { return ari(to_labels(a), to_labels(b)); });
  m.def("ami", [](const LabelArray& a, const LabelArray& b) { return ami(to_labels(a), to_labels(b)); });

  m.def("zero_shot", [](const Array& test_z, const LabelArray& labels, const Array& class_z) {
    return zero_shot(to_tensor(test_z), to_labels(labels), to_tensor(class_z));
  });
  m.def("knn_classify", [](const Array& train_z, const LabelArray& train_y, const Array& test_z,
                           const LabelArray& test_y, std::size_t k) {
    return knn_classify(to_tensor(train_z), to_labels(train_y), to_tensor(test_z), to_labels(test_y), k);
  }, py::arg("train_z"), py::arg("train_y"), py::arg("test_z"), py::arg("test_y"), py::arg("k") = 20);
  m.def("linear_probe", [](const Array& train_z, const LabelArray& train_y, const Array& test_z,
                           const LabelArray& test_y, std::size_t iterations, double step) {
    return linear_probe(to_tensor(train_z), to_labels(train_y), to_tensor(test_z), to_labels(test_y),
                        {iterations, step});
  }, py::arg("train_z"), py::arg("train_y"), py::arg("test_z"), py::arg("test_y"), py::arg("iterations") = 1000,
     py::arg("step") = 0.1);
  m.def("retrieval_recall", [](const Array& z_image, const Array& z_text) {
    const RetrievalRecall r = retrieval_recall(to_tensor(z_image), to_tensor(z_text));
    py::dict out;
    out["image_to_text"] = std::vector<double>(r.image_to_text, r.image_to_text + 3);
    out["text_to_image"] = std::vector<double>(r.text_to_image, r.text_to_image + 3);
    out["mean"] = r.mean;
    return out;
  });

  m.def("episode_count", &episode_count, py::arg("n_epoch"), py::arg("dataset_size"), py::arg("episode_size"));
  m.def("lr_schedule", &lr_schedule, py::arg("step"), py::arg("total_steps"), py::arg("warmup_steps"),
        py::arg("lr_base"));

  m.def("generate_synthetic", [](std::size_t n_classes, std::size_t per_class, std::uint64_t seed) {
    SyntheticSpec spec;
    spec.n_classes = n_classes;
    spec.per_class = per_class;
    spec.seed = seed;
    const PairedDataset ds = generate_synthetic(spec);
    return py::make_tuple(to_array(ds.x_image), to_array(ds.x_text), labels_array(ds.labels));
  }, py::arg("n_classes") = 20, py::arg("per_class") = 500, py::arg("seed") = 7);

  m.def("train_and_evaluate", [](const std::string& config_text, const std::string& preset) {
    RunConfig cfg = parse_config(config_text);
    if (!preset.empty()) apply_preset(cfg.train, preset);
    const PreparedData data = prepare_data(cfg);
    RunResult result;
    {
      py::gil_scoped_release release;
      result = run(data.train, cfg.train.use_teacher ? &data.teacher : nullptr, cfg.train);
    }
    const EvalReport report = evaluate(result.params, data.heldout, data.prompts, cfg.eval);
    py::dict out;
    out["episodes"] = result.episodes;
    out["metrics_csv"] = format_metrics_csv(result.metrics);
    out["report"] = report.to_record();
    return out;
  }, py::arg("config_text") = "", py::arg("preset") = "");

  m.def("grad_check", [](std::size_t instances, std::uint64_t seed) {
    const auto cases = default_grad_cases();
    py::list out;
    for (const auto& r : run_grad_checks(cases, instances, seed))
      out.append(py::make_tuple(r.name, r.failures, r.worst_rel_error));
    return out;
  }, py::arg("instances") = 10, py::arg("seed") = 0);
}
