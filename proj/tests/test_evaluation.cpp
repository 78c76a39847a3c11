#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <random>

#include "protoclip/error.hpp"
#include "protoclip/evaluation.hpp"
#include "protoclip/trainer.hpp"

using namespace protoclip;

namespace {

using LabelVec = std::vector<std::uint32_t>;

double entropy_of(const LabelVec& a) {
  std::map<std::uint32_t, double> counts;
  for (auto v : a) counts[v] += 1.0;
  double h = 0.0;
  for (const auto& [_, c] : counts) {
    const double p = c / static_cast<double>(a.size());
    h -= p * std::log(p);
  }
  return h;
}

double mutual_information(const LabelVec& a, const LabelVec& b) {
  std::map<std::pair<std::uint32_t, std::uint32_t>, double> joint;
  std::map<std::uint32_t, double> ca, cb;
  for (std::size_t i = 0; i < a.size(); ++i) {
    joint[{a[i], b[i]}] += 1.0;
    ca[a[i]] += 1.0;
    cb[b[i]] += 1.0;
  }
  const double n = static_cast<double>(a.size());
  double mi = 0.0;
  for (const auto& [key, c] : joint) mi += c / n * std::log(n * c / (ca[key.first] * cb[key.second]));
  return mi;
}

// Expected MI under the permutation model by enumerating every permutation of b.
double brute_force_ami(const LabelVec& a, LabelVec b) {
  std::vector<std::size_t> order(b.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  double total = 0.0;
  std::size_t count = 0;
  do {
    LabelVec permuted(b.size());
    for (std::size_t i = 0; i < b.size(); ++i) permuted[i] = b[order[i]];
    total += mutual_information(a, permuted);
    ++count;
  } while (std::next_permutation(order.begin(), order.end()));
  const double emi = total / static_cast<double>(count);
  return (mutual_information(a, b) - emi) / (std::max(entropy_of(a), entropy_of(b)) - emi);
}

Tensor gaussian(std::size_t n, std::size_t d, std::mt19937_64& rng, double sigma = 1.0) {
  std::normal_distribution<double> normal(0.0, sigma);
  Tensor t(n, d);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

// Well separated blobs: class c centred at 10 * e_c.
std::pair<Tensor, LabelVec> blobs(std::size_t classes, std::size_t per_class, std::mt19937_64& rng, double spread) {
  Tensor x = gaussian(classes * per_class, classes, rng, spread);
  LabelVec y(x.rows());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    y[i] = static_cast<std::uint32_t>(i % classes);
    x(i, y[i]) += 10.0;
  }
  return {x, y};
}

}  // namespace

TEST(ZeroShot, Examples) {
  const Tensor classes = Tensor::identity(2);
  EXPECT_EQ(zero_shot(Tensor::from_rows({{0, 1}}), LabelVec{1}, classes), 1.0);
  const double s = 1.0 / std::sqrt(2.0);
  EXPECT_EQ(zero_shot(Tensor::from_rows({{s, s}}), LabelVec{0}, classes), 1.0);
  EXPECT_EQ(zero_shot(Tensor::from_rows({{s, s}}), LabelVec{1}, classes), 0.0);
  EXPECT_THROW(zero_shot(Tensor(1, 3, 0.5), LabelVec{0}, classes), ContractError);
  EXPECT_THROW(zero_shot(Tensor(2, 2, 0.5), LabelVec{0}, classes), ContractError);
}

TEST(ZeroShot, NoiselessThreeClassIsPerfectAndRotationInvariant) {
  std::mt19937_64 rng(1);
  const Tensor centers = normalized_rows(gaussian(3, 4, rng));
  std::vector<std::size_t> idx;
  LabelVec y;
  for (std::size_t i = 0; i < 30; ++i) {
    idx.push_back(i % 3);
    y.push_back(static_cast<std::uint32_t>(i % 3));
  }
  const Tensor test = centers.gather_rows(idx);
  EXPECT_EQ(zero_shot(test, y, centers), 1.0);

  Tensor noisy = test;
  for (double& v : noisy.data()) v += std::normal_distribution<double>(0.0, 0.4)(rng);
  noisy = normalized_rows(noisy);
  const double base = zero_shot(noisy, y, centers);
  // Orthogonal map from a QR-free construction: a Householder reflection.
  Tensor v = normalized_rows(gaussian(1, 4, rng));
  Tensor h = Tensor::identity(4);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) h(i, j) -= 2.0 * v[i] * v[j];
  EXPECT_EQ(zero_shot(matmul_transposed(noisy, h), y, matmul_transposed(centers, h)), base);
}

TEST(Knn, Examples) {
  const Tensor train = Tensor::from_rows({{1, 0}, {0, 1}, {-1, 0}});
  const LabelVec ty{4, 2, 7};
  EXPECT_EQ(knn_classify(train, ty, Tensor::from_rows({{0, 1}}), LabelVec{2}, 1), 1.0);
  EXPECT_EQ(knn_classify(train, LabelVec{3, 3, 3}, Tensor::from_rows({{5, 1}}), LabelVec{3}, 3), 1.0);

  const Tensor two = Tensor::from_rows({{1, 0.1}, {1, 0.2}, {1, -0.5}, {-1, 0}});
  EXPECT_EQ(knn_classify(two, LabelVec{0, 0, 1, 1}, Tensor::from_rows({{1, 0}}), LabelVec{0}, 3), 1.0);
  // Vote tie resolves to the smaller label.
  EXPECT_EQ(knn_classify(two, LabelVec{1, 0, 1, 0}, Tensor::from_rows({{1, 0.15}}), LabelVec{0}, 2), 1.0);

  EXPECT_THROW(knn_classify(Tensor(0, 2), LabelVec{}, Tensor::from_rows({{1, 0}}), LabelVec{0}, 1), ContractError);
  EXPECT_THROW(knn_classify(train, ty, Tensor::from_rows({{1, 0}}), LabelVec{0}, 4), ContractError);
}

TEST(Knn, SelfMatchWithDistinctPoints) {
  std::mt19937_64 rng(2);
  const Tensor x = gaussian(25, 3, rng);
  LabelVec y(25);
  for (std::size_t i = 0; i < 25; ++i) y[i] = static_cast<std::uint32_t>(i % 5);
  EXPECT_EQ(knn_classify(x, y, x, y, 1), 1.0);
}

TEST(LinearProbe, SeparableBlobs) {
  std::mt19937_64 rng(3);
  auto [x, y] = blobs(2, 50, rng, 1.0);
  EXPECT_EQ(linear_probe(x, y, x, y), 1.0);
}

TEST(LinearProbe, MemorizationBeatsMajorityBaseline) {
  std::mt19937_64 rng(4);
  const Tensor x = gaussian(12, 6, rng);
  LabelVec y{0, 1, 2, 0, 1, 2, 0, 1, 2, 0, 0, 0};
  EXPECT_GE(linear_probe(x, y, x, y), 6.0 / 12.0);
}

TEST(LinearProbe, ShuffledLabelsAreChance) {
  std::mt19937_64 rng(5);
  auto [x, y] = blobs(10, 100, rng, 1.0);
  LabelVec shuffled = y;
  std::shuffle(shuffled.begin(), shuffled.end(), rng);
  const std::vector<std::size_t> train_idx = [] {
    std::vector<std::size_t> v(500);
    std::iota(v.begin(), v.end(), std::size_t{0});
    return v;
  }();
  std::vector<std::size_t> test_idx(500);
  std::iota(test_idx.begin(), test_idx.end(), std::size_t{500});
  const LabelVec ytr(shuffled.begin(), shuffled.begin() + 500), yte(shuffled.begin() + 500, shuffled.end());
  EXPECT_NEAR(linear_probe(x.gather_rows(train_idx), ytr, x.gather_rows(test_idx), yte), 0.1, 0.05);
}

TEST(LinearProbe, SingleClassRejected) {
  EXPECT_THROW(linear_probe(Tensor(3, 2, 1.0), LabelVec{1, 1, 1}, Tensor(1, 2), LabelVec{1}), ConfigError);
}

TEST(Retrieval, Examples) {
  std::mt19937_64 rng(6);
  const Tensor z = normalized_rows(gaussian(12, 4, rng));
  const RetrievalRecall perfect = retrieval_recall(z, z);
  EXPECT_EQ(perfect.mean, 1.0);
  for (int i = 0; i < 3; ++i) {
    EXPECT_EQ(perfect.image_to_text[i], 1.0);
    EXPECT_EQ(perfect.text_to_image[i], 1.0);
  }

  const Tensor images = Tensor::from_rows({{1, 0}, {0, 1}});
  const Tensor texts = Tensor::from_rows({{0, 1}, {1, 0}});
  const RetrievalRecall anti = retrieval_recall(images, texts);
  EXPECT_EQ(anti.image_to_text[0], 0.0);
  EXPECT_EQ(anti.text_to_image[0], 0.0);
  EXPECT_EQ(anti.image_to_text[1], 1.0);
  EXPECT_EQ(recall_at(images, texts, 2), 1.0);
  EXPECT_THROW(retrieval_recall(images, Tensor(3, 2, 0.5)), ContractError);
}

TEST(Retrieval, MeanOfSixAndPermutationInvariant) {
  std::mt19937_64 rng(7);
  const Tensor zi = normalized_rows(gaussian(40, 3, rng));
  Tensor zt = zi;
  for (double& v : zt.data()) v += std::normal_distribution<double>(0.0, 0.5)(rng);
  zt = normalized_rows(zt);
  const RetrievalRecall r = retrieval_recall(zi, zt);
  double sum = 0.0;
  for (int i = 0; i < 3; ++i) sum += r.image_to_text[i] + r.text_to_image[i];
  EXPECT_DOUBLE_EQ(r.mean, sum / 6.0);
  std::vector<std::size_t> perm(40);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::shuffle(perm.begin(), perm.end(), rng);
  EXPECT_DOUBLE_EQ(retrieval_recall(zi.gather_rows(perm), zt.gather_rows(perm)).mean, r.mean);
}

TEST(Ari, Examples) {
  EXPECT_EQ(ari(LabelVec{0, 0, 1, 1}, LabelVec{0, 1, 0, 1}), -0.5);
  EXPECT_DOUBLE_EQ(ari(LabelVec{0, 0, 1, 2}, LabelVec{0, 0, 1, 2}), 1.0);
  EXPECT_DOUBLE_EQ(ari(LabelVec{0, 0, 1, 2}, LabelVec{5, 5, 9, 3}), 1.0);
  EXPECT_NEAR(ari(LabelVec{0, 0, 1, 1, 2, 2, 2}, LabelVec{0, 1, 1, 1, 2, 2, 0}), 0.2125, 1e-12);
  EXPECT_EQ(ari(LabelVec{0, 0, 0, 0}, LabelVec{0, 1, 0, 1}), 0.0);
  EXPECT_THROW(ari(LabelVec{0, 1}, LabelVec{0}), ContractError);
}

TEST(Ami, Examples) {
  EXPECT_NEAR(ami(LabelVec{0, 1, 1, 2}, LabelVec{0, 1, 1, 2}), 1.0, 1e-12);
  EXPECT_EQ(ami(LabelVec{0, 0, 0, 0}, LabelVec{0, 1, 0, 1}), 0.0);
  EXPECT_EQ(ami(LabelVec{0, 1, 0, 1}, LabelVec{3, 3, 3, 3}), 0.0);
  const double oracle = brute_force_ami({0, 0, 1, 1}, {0, 1, 0, 1});
  EXPECT_NEAR(oracle, -0.5, 1e-12);
  EXPECT_NEAR(ami(LabelVec{0, 0, 1, 1}, LabelVec{0, 1, 0, 1}), oracle, 1e-12);
  const LabelVec a{0, 0, 1, 1, 2, 2, 2}, b{0, 1, 1, 1, 2, 2, 0};
  EXPECT_NEAR(ami(a, b), brute_force_ami(a, b), 1e-12);
  EXPECT_THROW(ami(LabelVec{0, 1}, LabelVec{0}), ContractError);
}

TEST(Ari, SymmetricAndRenamingInvariant) {
  std::mt19937_64 rng(8);
  for (int t = 0; t < 100; ++t) {
    LabelVec a(30), b(30);
    for (auto& v : a) v = static_cast<std::uint32_t>(rng() % 4);
    for (auto& v : b) v = static_cast<std::uint32_t>(rng() % 5);
    LabelVec renamed = a;
    for (auto& v : renamed) v = (v * 7 + 3) % 11;
    EXPECT_NEAR(ari(a, b), ari(b, a), 1e-12);
    EXPECT_NEAR(ami(a, b), ami(b, a), 1e-12);
    EXPECT_NEAR(ari(renamed, b), ari(a, b), 1e-12);
    EXPECT_NEAR(ami(renamed, b), ami(a, b), 1e-12);
    EXPECT_LE(ami(a, b), 1.0);
  }
}

TEST(ClusterEval, Examples) {
  std::mt19937_64 rng(9);
  auto [x, y] = blobs(4, 25, rng, 0.5);
  const std::vector<std::uint64_t> seeds{0, 1, 2};
  const ClusterScore perfect = cluster_eval(x, y, 4, seeds);
  EXPECT_NEAR(perfect.ari, 1.0, 1e-12);
  EXPECT_NEAR(perfect.ami, 1.0, 1e-12);
  EXPECT_EQ(cluster_eval(x, y, 1, seeds).ari, 0.0);

  const Tensor noise = gaussian(400, 3, rng);
  LabelVec random400(400);
  for (auto& v : random400) v = static_cast<std::uint32_t>(rng() % 4);
  EXPECT_NEAR(cluster_eval(noise, random400, 4, seeds).ari, 0.0, 0.05);
  EXPECT_THROW(cluster_eval(x, y, 4, std::vector<std::uint64_t>{}), ConfigError);
}

TEST(Split, DeterministicDisjointAndValidated) {
  const auto [a_train, a_test] = split_indices(100, 0.3, 5);
  const auto [b_train, b_test] = split_indices(100, 0.3, 5);
  EXPECT_EQ(a_train, b_train);
  EXPECT_EQ(a_train.size(), 30u);
  EXPECT_EQ(a_test.size(), 70u);
  std::vector<std::size_t> all = a_train;
  all.insert(all.end(), a_test.begin(), a_test.end());
  std::sort(all.begin(), all.end());
  for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(all[i], i);
  EXPECT_THROW(split_indices(100, 0.0, 5), ConfigError);
  EXPECT_THROW(split_indices(100, 1.0, 5), ConfigError);
}

TEST(Evaluate, UntrainedModelIsNearChanceAtZeroShot) {
  SyntheticSpec spec;
  spec.per_class = 50;
  double total = 0.0;
  for (std::uint64_t seed = 0; seed < 3; ++seed) {
    spec.seed = seed;
    TrainConfig cfg;
    cfg.seed = seed;
    const ModelParams model = init_model(cfg, spec.d_in_image, spec.d_in_text);
    EvalConfig ec;
    ec.seed = seed;
    ec.probe.iterations = 50;
    const EvalReport r = evaluate(model, generate_synthetic(spec, 1), class_prompts(spec), ec);
    total += r.zero_shot_top1;
    EXPECT_EQ(r.n_probe_train + r.n_probe_test, 1000u);
    EXPECT_EQ(r.to_record(), evaluate(model, generate_synthetic(spec, 1), class_prompts(spec), ec).to_record());
  }
  EXPECT_NEAR(total / 3.0, 1.0 / 20.0, 0.05);
}

TEST(Evaluate, ReportRecordIsFlat) {
  EvalReport r;
  r.seed = 4;
  const std::string rec = r.to_record();
  EXPECT_EQ(rec.find('\n'), std::string::npos);
  for (const char* key : {"zero_shot_top1=", "linear_top1=", "knn_top1=", "mean_recall=", "ari=", "ami=", "seed=4",
                          "i2t_r10=", "t2i_r1="})
    EXPECT_NE(rec.find(key), std::string::npos) << key;
}
