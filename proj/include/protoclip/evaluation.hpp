#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protoclip/data.hpp"
#include "protoclip/tensor.hpp"

namespace protoclip {

struct ModelParams;

using Labels = std::span<const std::uint32_t>;

/// Fraction of test rows whose highest-scoring class row (dot product) is the
/// true label. Ties go to the lowest class index.
double zero_shot(const Tensor& test_z, Labels test_labels, const Tensor& class_z);

/// Cosine-similarity K-NN with majority vote; vote ties go to the smallest label
/// and neighbour ties to the lower train index.
double knn_classify(const Tensor& train_z, Labels train_labels, const Tensor& test_z, Labels test_labels,
                    std::size_t k = 20);

struct ProbeOptions {
  std::size_t iterations = 1000;
  double step = 0.1;
};

/// Multinomial logistic regression on standardized features, full-batch
/// gradient descent from zero weights. Returns test accuracy.
double linear_probe(const Tensor& train_z, Labels train_labels, const Tensor& test_z, Labels test_labels,
                    const ProbeOptions& options = {});

struct RetrievalRecall {
  double image_to_text[3] = {0.0, 0.0, 0.0};  // r@1, r@5, r@10
  double text_to_image[3] = {0.0, 0.0, 0.0};
  double mean = 0.0;
};

/// Row i of each side is the true pair. Ranking ties favour the lower index.
RetrievalRecall retrieval_recall(const Tensor& z_image, const Tensor& z_text);
/// Recall@k in one direction (queries against candidates).
double recall_at(const Tensor& queries, const Tensor& candidates, std::size_t k);

double ari(Labels a, Labels b);
/// Expected-MI adjusted, normalized by max(H(a), H(b)).
double ami(Labels a, Labels b);

struct ClusterScore {
  double ari = 0.0;
  double ami = 0.0;
  double objective = 0.0;
};

/// K-Means once per seed, keeps the lowest objective and scores it.
ClusterScore cluster_eval(const Tensor& z, Labels labels, std::size_t k, std::span<const std::uint64_t> seeds,
                          std::size_t max_iters = 100);

struct EvalConfig {
  double split_fraction = 0.5;  // share of held-out rows used to fit probes
  std::uint64_t seed = 0;
  std::size_t knn_k = 20;
  ProbeOptions probe;
  std::size_t cluster_seeds = 10;
  std::size_t cluster_iters = 100;
};

struct EvalReport {
  double zero_shot_top1 = 0.0;
  double linear_top1 = 0.0;
  double knn_top1 = 0.0;
  RetrievalRecall retrieval;
  double ari = 0.0;
  double ami = 0.0;
  std::uint64_t seed = 0;
  std::size_t n_probe_train = 0;
  std::size_t n_probe_test = 0;

  /// One line of space-separated key=value pairs.
  std::string to_record() const;
};

/// Deterministic split of [0, n) into (probe-train, probe-test).
std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                            std::uint64_t seed);

/// Scores a model on held-out pairs. `prompts` holds one raw text input per class.
EvalReport evaluate(const ModelParams& model, const PairedDataset& heldout, const Tensor& prompts,
                    const EvalConfig& cfg);

/// Appends the report record as one line.
void append_report(const std::filesystem::path& path, const EvalReport& report);

}  // namespace protoclip
