#include "protoclip/evaluation.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <random>

#include "protoclip/error.hpp"
#include "protoclip/prototypes.hpp"
#include "protoclip/trainer.hpp"

namespace protoclip {

namespace {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Eigen::Map<const Matrix> as_matrix(const Tensor& t) {
  return {t.data().data(), static_cast<Eigen::Index>(t.rows()), static_cast<Eigen::Index>(t.cols())};
}

void check_labels(const Tensor& z, Labels labels, const char* what) {
  if (z.rows() != labels.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(z.rows()) + " rows but " +
                        std::to_string(labels.size()) + " labels");
  }
}

double accuracy(std::span<const std::uint32_t> predicted, Labels truth) {
  if (truth.empty()) throw ContractError("accuracy over an empty test set");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hits += predicted[i] == truth[i];
  return static_cast<double>(hits) / static_cast<double>(truth.size());
}

std::size_t argmax_row(std::span<const double> row) {
  std::size_t best = 0;
  for (std::size_t j = 1; j < row.size(); ++j)
    if (row[j] > row[best]) best = j;
  return best;
}

// Dense relabeling to 0..n-1 in order of first appearance.
std::vector<std::size_t> compact(Labels labels, std::size_t& count) {
  std::map<std::uint32_t, std::size_t> ids;
  std::vector<std::size_t> out(labels.size());
  for (std::size_t i = 0; i < labels.size(); ++i) out[i] = ids.try_emplace(labels[i], ids.size()).first->second;
  count = ids.size();
  return out;
}

struct Contingency {
  std::size_t n = 0;
  std::vector<std::vector<std::size_t>> table;
  std::vector<std::size_t> a_sums, b_sums;
};

Contingency contingency(Labels a, Labels b) {
  if (a.size() != b.size()) {
    throw ContractError("labelings differ in length: " + std::to_string(a.size()) + " vs " + std::to_string(b.size()));
  }
  if (a.size() < 2) throw ContractError("clustering comparison needs at least two samples");
  std::size_t ka = 0, kb = 0;
  const auto ca = compact(a, ka);
  const auto cb = compact(b, kb);
  Contingency c;
  c.n = a.size();
  c.table.assign(ka, std::vector<std::size_t>(kb, 0));
  c.a_sums.assign(ka, 0);
  c.b_sums.assign(kb, 0);
  for (std::size_t i = 0; i < a.size(); ++i) {
    ++c.table[ca[i]][cb[i]];
    ++c.a_sums[ca[i]];
    ++c.b_sums[cb[i]];
  }
  return c;
}

double pairs(std::size_t n) { return 0.5 * static_cast<double>(n) * static_cast<double>(n - (n > 0)); }

double entropy(std::span<const std::size_t> sums, double n) {
  double h = 0.0;
  for (auto s : sums) {
    if (s == 0) continue;
    const double p = static_cast<double>(s) / n;
    h -= p * std::log(p);
  }
  return h;
}

double expected_mutual_information(const Contingency& c) {
  const double n = static_cast<double>(c.n);
  const double lg_n = std::lgamma(n + 1.0);
  double emi = 0.0;
  for (auto ai : c.a_sums) {
    for (auto bj : c.b_sums) {
      const double a = static_cast<double>(ai), b = static_cast<double>(bj);
      const std::size_t lo = std::max<std::size_t>(1, ai + bj > c.n ? ai + bj - c.n : 0);
      const std::size_t hi = std::min(ai, bj);
      const double fixed = std::lgamma(a + 1) + std::lgamma(b + 1) + std::lgamma(n - a + 1) + std::lgamma(n - b + 1) - lg_n;
      for (std::size_t nij = lo; nij <= hi; ++nij) {
        const double x = static_cast<double>(nij);
        const double log_p = fixed - std::lgamma(x + 1) - std::lgamma(a - x + 1) - std::lgamma(b - x + 1) -
                             std::lgamma(n - a - b + x + 1);
        emi += x / n * std::log(n * x / (a * b)) * std::exp(log_p);
      }
    }
  }
  return emi;
}

}  // namespace

double zero_shot(const Tensor& test_z, Labels test_labels, const Tensor& class_z) {
  check_labels(test_z, test_labels, "zero_shot");
  if (class_z.rows() == 0) throw ContractError("zero_shot: no class rows");
  if (test_z.cols() != class_z.cols()) {
    throw ContractError("zero_shot: test " + test_z.shape_string() + " vs classes " + class_z.shape_string());
  }
  const Tensor scores = matmul_transposed(test_z, class_z);
  std::vector<std::uint32_t> predicted(test_z.rows());
  for (std::size_t i = 0; i < test_z.rows(); ++i) predicted[i] = static_cast<std::uint32_t>(argmax_row(scores.row(i)));
  return accuracy(predicted, test_labels);
}

double knn_classify(const Tensor& train_z, Labels train_labels, const Tensor& test_z, Labels test_labels,
                    std::size_t k) {
  check_labels(train_z, train_labels, "knn_classify");
  check_labels(test_z, test_labels, "knn_classify");
  if (train_z.rows() == 0) throw ContractError("knn_classify: empty train set");
  if (k == 0 || k > train_z.rows()) {
    throw ContractError("knn_classify: K=" + std::to_string(k) + " with " + std::to_string(train_z.rows()) +
                        " train rows");
  }
  if (train_z.cols() != test_z.cols()) throw ContractError("knn_classify: feature widths differ");

  const Tensor sims = matmul_transposed(normalized_rows(test_z), normalized_rows(train_z));
  const std::uint32_t n_labels = *std::max_element(train_labels.begin(), train_labels.end()) + 1;
  std::vector<std::size_t> order(train_z.rows());
  std::vector<std::uint32_t> predicted(test_z.rows());
  std::vector<std::size_t> votes(n_labels);
  for (std::size_t i = 0; i < test_z.rows(); ++i) {
    auto s = sims.row(i);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(k), order.end(),
                      [&](std::size_t x, std::size_t y) { return s[x] > s[y] || (s[x] == s[y] && x < y); });
    std::fill(votes.begin(), votes.end(), 0);
    for (std::size_t j = 0; j < k; ++j) ++votes[train_labels[order[j]]];
    predicted[i] = static_cast<std::uint32_t>(std::max_element(votes.begin(), votes.end()) - votes.begin());
  }
  return accuracy(predicted, test_labels);
}

double linear_probe(const Tensor& train_z, Labels train_labels, const Tensor& test_z, Labels test_labels,
                    const ProbeOptions& options) {
  check_labels(train_z, train_labels, "linear_probe");
  check_labels(test_z, test_labels, "linear_probe");
  if (train_z.cols() != test_z.cols()) throw ContractError("linear_probe: feature widths differ");
  std::size_t distinct = 0;
  compact(train_labels, distinct);
  if (distinct < 2) throw ConfigError("linear_probe: train set holds a single class");

  std::uint32_t max_label = *std::max_element(train_labels.begin(), train_labels.end());
  for (auto y : test_labels) max_label = std::max(max_label, y);
  const auto n_classes = static_cast<Eigen::Index>(max_label) + 1;
  const auto n = static_cast<Eigen::Index>(train_z.rows());
  const auto d = static_cast<Eigen::Index>(train_z.cols());

  const Eigen::RowVectorXd mean = as_matrix(train_z).colwise().mean();
  Eigen::RowVectorXd scale = ((as_matrix(train_z).rowwise() - mean).array().square().colwise().mean()).sqrt();
  for (Eigen::Index c = 0; c < d; ++c) scale[c] = scale[c] > 1e-12 ? 1.0 / scale[c] : 1.0;
  auto standardize = [&](const Tensor& z) {
    Matrix x(z.rows(), d + 1);
    x.leftCols(d) = ((as_matrix(z).rowwise() - mean).array().rowwise() * scale.array()).matrix();
    x.col(d).setOnes();
    return x;
  };
  const Matrix x = standardize(train_z);
  Matrix onehot = Matrix::Zero(n, n_classes);
  for (Eigen::Index i = 0; i < n; ++i) onehot(i, train_labels[static_cast<std::size_t>(i)]) = 1.0;

  Matrix w = Matrix::Zero(d + 1, n_classes);
  for (std::size_t it = 0; it < options.iterations; ++it) {
    Matrix p = x * w;
    for (Eigen::Index i = 0; i < n; ++i) {
      auto row = p.row(i);
      row.array() -= row.maxCoeff();
      row = row.array().exp().matrix();
      row /= row.sum();
    }
    w -= options.step / static_cast<double>(n) * (x.transpose() * (p - onehot));
  }

  const Matrix scores = standardize(test_z) * w;
  std::vector<std::uint32_t> predicted(test_z.rows());
  for (Eigen::Index i = 0; i < scores.rows(); ++i) {
    Eigen::Index best = 0;
    for (Eigen::Index c = 1; c < n_classes; ++c)
      if (scores(i, c) > scores(i, best)) best = c;
    predicted[static_cast<std::size_t>(i)] = static_cast<std::uint32_t>(best);
  }
  return accuracy(predicted, test_labels);
}

double recall_at(const Tensor& queries, const Tensor& candidates, std::size_t k) {
  if (queries.rows() != candidates.rows()) {
    throw ContractError("retrieval: " + std::to_string(queries.rows()) + " queries vs " +
                        std::to_string(candidates.rows()) + " candidates");
  }
  if (queries.rows() == 0) throw ContractError("retrieval: empty set");
  const Tensor sims = matmul_transposed(queries, candidates);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < sims.rows(); ++i) {
    auto s = sims.row(i);
    std::size_t rank = 0;
    for (std::size_t j = 0; j < s.size(); ++j) rank += s[j] > s[i] || (s[j] == s[i] && j < i);
    hits += rank < k;
  }
  return static_cast<double>(hits) / static_cast<double>(sims.rows());
}

RetrievalRecall retrieval_recall(const Tensor& z_image, const Tensor& z_text) {
  if (z_image.rows() != z_text.rows()) {
    throw ContractError("retrieval: " + std::to_string(z_image.rows()) + " images vs " +
                        std::to_string(z_text.rows()) + " texts");
  }
  constexpr std::size_t ks[3] = {1, 5, 10};
  RetrievalRecall r;
  for (int i = 0; i < 3; ++i) {
    r.image_to_text[i] = recall_at(z_image, z_text, ks[i]);
    r.text_to_image[i] = recall_at(z_text, z_image, ks[i]);
    r.mean += r.image_to_text[i] + r.text_to_image[i];
  }
  r.mean /= 6.0;
  return r;
}

double ari(Labels a, Labels b) {
  const Contingency c = contingency(a, b);
  double index = 0.0, sum_a = 0.0, sum_b = 0.0;
  for (const auto& row : c.table)
    for (auto v : row) index += pairs(v);
  for (auto s : c.a_sums) sum_a += pairs(s);
  for (auto s : c.b_sums) sum_b += pairs(s);
  // Scaled by 2 * pairs(n) so small tables stay in exact integer arithmetic.
  const double total = pairs(c.n);
  const double num = 2.0 * (total * index - sum_a * sum_b);
  const double den = total * (sum_a + sum_b) - 2.0 * sum_a * sum_b;
  if (den == 0.0) return 1.0;
  return num / den;
}

double ami(Labels a, Labels b) {
  const Contingency c = contingency(a, b);
  const bool single_a = c.a_sums.size() == 1, single_b = c.b_sums.size() == 1;
  if (single_a && single_b) return 1.0;
  if (single_a || single_b) return 0.0;
  const double n = static_cast<double>(c.n);
  double mi = 0.0;
  for (std::size_t i = 0; i < c.table.size(); ++i) {
    for (std::size_t j = 0; j < c.table[i].size(); ++j) {
      const double nij = static_cast<double>(c.table[i][j]);
      if (nij == 0.0) continue;
      mi += nij / n * std::log(n * nij / (static_cast<double>(c.a_sums[i]) * static_cast<double>(c.b_sums[j])));
    }
  }
  const double emi = expected_mutual_information(c);
  const double denom = std::max(entropy(c.a_sums, n), entropy(c.b_sums, n)) - emi;
  if (std::abs(denom) < std::numeric_limits<double>::epsilon()) return 1.0;
  return (mi - emi) / denom;
}

ClusterScore cluster_eval(const Tensor& z, Labels labels, std::size_t k, std::span<const std::uint64_t> seeds,
                          std::size_t max_iters) {
  check_labels(z, labels, "cluster_eval");
  if (seeds.empty()) throw ConfigError("cluster_eval: no seeds");
  PrototypeSet best;
  bool have = false;
  for (auto seed : seeds) {
    PrototypeSet ps = kmeans(z, k, max_iters, seed);
    if (!have || ps.objective < best.objective) {
      best = std::move(ps);
      have = true;
    }
  }
  return {ari(best.assignments, labels), ami(best.assignments, labels), best.objective};
}

std::string EvalReport::to_record() const {
  char buf[1024];
  std::snprintf(buf, sizeof buf,
                "zero_shot_top1=%.17g linear_top1=%.17g knn_top1=%.17g i2t_r1=%.17g i2t_r5=%.17g i2t_r10=%.17g "
                "t2i_r1=%.17g t2i_r5=%.17g t2i_r10=%.17g mean_recall=%.17g ari=%.17g ami=%.17g seed=%llu "
                "n_probe_train=%zu n_probe_test=%zu",
                zero_shot_top1, linear_top1, knn_top1, retrieval.image_to_text[0], retrieval.image_to_text[1],
                retrieval.image_to_text[2], retrieval.text_to_image[0], retrieval.text_to_image[1],
                retrieval.text_to_image[2], retrieval.mean, ari, ami, static_cast<unsigned long long>(seed),
                n_probe_train, n_probe_test);
  return buf;
}

std::pair<std::vector<std::size_t>, std::vector<std::size_t>> split_indices(std::size_t n, double fraction,
                                                                            std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction < 1.0)) {
    throw ConfigError("split_fraction must lie strictly between 0 and 1, got " + std::to_string(fraction));
  }
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  for (std::size_t i = n; i > 1; --i) {
    const std::size_t j = std::uniform_int_distribution<std::size_t>(0, i - 1)(rng);
    std::swap(order[i - 1], order[j]);
  }
  const auto cut = static_cast<std::size_t>(std::floor(fraction * static_cast<double>(n)));
  if (cut == 0 || cut == n) throw ConfigError("split_fraction leaves one side of the split empty");
  std::vector<std::size_t> train(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(cut));
  std::vector<std::size_t> test(order.begin() + static_cast<std::ptrdiff_t>(cut), order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  return {std::move(train), std::move(test)};
}

EvalReport evaluate(const ModelParams& model, const PairedDataset& heldout, const Tensor& prompts,
                    const EvalConfig& cfg) {
  if (prompts.rows() != heldout.n_classes) {
    throw ContractError("evaluate: " + std::to_string(prompts.rows()) + " prompts for " +
                        std::to_string(heldout.n_classes) + " classes");
  }
  const auto [train_idx, test_idx] = split_indices(heldout.size(), cfg.split_fraction, cfg.seed);
  const PairedDataset train = heldout.subset(train_idx);
  const PairedDataset test = heldout.subset(test_idx);

  const Tensor z_image_train = encode(model.image_tower, train.x_image);
  const Tensor z_image_test = encode(model.image_tower, test.x_image);
  const Tensor n_image_test = normalized_rows(z_image_test);
  const Tensor n_text_test = normalized_rows(encode(model.text_tower, test.x_text));
  const Tensor class_z = normalized_rows(encode(model.text_tower, prompts));

  EvalReport r;
  r.seed = cfg.seed;
  r.n_probe_train = train.size();
  r.n_probe_test = test.size();
  r.zero_shot_top1 = zero_shot(n_image_test, test.labels, class_z);
  r.knn_top1 = knn_classify(z_image_train, train.labels, z_image_test, test.labels, cfg.knn_k);
  r.linear_top1 = linear_probe(z_image_train, train.labels, z_image_test, test.labels, cfg.probe);
  r.retrieval = retrieval_recall(n_image_test, n_text_test);

  std::vector<std::uint64_t> seeds(cfg.cluster_seeds);
  for (std::size_t s = 0; s < seeds.size(); ++s) seeds[s] = cfg.seed * 1000003ull + s;
  const ClusterScore cs = cluster_eval(normalized_rows(encode(model.image_tower, heldout.x_image)), heldout.labels,
                                       heldout.n_classes, seeds, cfg.cluster_iters);
  r.ari = cs.ari;
  r.ami = cs.ami;
  return r;
}

void append_report(const std::filesystem::path& path, const EvalReport& report) {
  std::ofstream os(path, std::ios::binary | std::ios::app);
  if (!os) throw IoError("cannot open " + path.string() + " for appending");
  os << report.to_record() << '\n';
  if (!os) throw IoError("failed writing " + path.string());
}

}  // namespace protoclip
