#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <random>

#include "protoclip/error.hpp"
#include "protoclip/prototypes.hpp"

using namespace protoclip;

namespace {

Tensor random_points(std::size_t n, std::size_t d, std::mt19937_64& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Tensor t(n, d);
  for (double& v : t.data()) v = normal(rng);
  return t;
}

// Best objective over every 2-partition of the rows.
double brute_force_two_means(const Tensor& h) {
  const std::size_t n = h.rows(), d = h.cols();
  double best = std::numeric_limits<double>::infinity();
  for (std::uint64_t mask = 1; mask + 1 < (1ull << n); ++mask) {
    if (mask & 1) continue;  // each partition once
    double cost = 0.0;
    for (int side = 0; side < 2; ++side) {
      std::vector<double> mean(d, 0.0);
      std::size_t count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (((mask >> i) & 1) != static_cast<std::uint64_t>(side)) continue;
        for (std::size_t c = 0; c < d; ++c) mean[c] += h(i, c);
        ++count;
      }
      for (double& m : mean) m /= static_cast<double>(count);
      for (std::size_t i = 0; i < n; ++i) {
        if (((mask >> i) & 1) != static_cast<std::uint64_t>(side)) continue;
        cost += squared_distance(h.row(i), mean);
      }
    }
    best = std::min(best, cost);
  }
  return best;
}

}  // namespace

TEST(KMeans, FourPointsTwoClusters) {
  const Tensor h = Tensor::from_rows({{0, 0}, {0, 1}, {10, 0}, {10, 1}});
  const PrototypeSet ps = kmeans(h, 2, 20, 0);
  EXPECT_NEAR(ps.objective, 1.0, 1e-12);
  std::vector<std::vector<double>> centroids;
  for (std::size_t k = 0; k < 2; ++k) centroids.emplace_back(ps.centroids.row(k).begin(), ps.centroids.row(k).end());
  std::sort(centroids.begin(), centroids.end());
  EXPECT_EQ(centroids[0], (std::vector<double>{0, 0.5}));
  EXPECT_EQ(centroids[1], (std::vector<double>{10, 0.5}));
  EXPECT_NEAR(brute_force_two_means(h), 1.0, 1e-12);
}

TEST(KMeans, DegenerateK) {
  std::mt19937_64 rng(1);
  const Tensor h = random_points(6, 3, rng);
  const PrototypeSet every = kmeans(h, 6, 20, 4);
  EXPECT_NEAR(every.objective, 0.0, 1e-24);
  const PrototypeSet one = kmeans(h, 1, 20, 4);
  for (std::size_t c = 0; c < 3; ++c) {
    double mean = 0.0;
    for (std::size_t i = 0; i < 6; ++i) mean += h(i, c);
    EXPECT_NEAR(one.centroids(0, c), mean / 6.0, 1e-12);
  }
}

TEST(KMeans, Errors) {
  EXPECT_THROW(kmeans(Tensor(2, 2), 3, 20, 0), ConfigError);
  EXPECT_THROW(kmeans(Tensor(2, 2), 0, 20, 0), ConfigError);
  Tensor bad(3, 2, 1.0);
  bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_THROW(kmeans(bad, 2, 20, 0), DataError);
}

TEST(KMeans, InvariantsOnRandomRuns) {
  std::mt19937_64 rng(2);
  for (int trial = 0; trial < 100; ++trial) {
    const std::size_t n = 20 + trial % 30, k = 1 + trial % 8;
    const Tensor h = random_points(n, 3, rng);
    const PrototypeSet ps = kmeans(h, k, 20, static_cast<std::uint64_t>(trial));
    for (std::size_t t = 1; t < ps.objective_trace.size(); ++t)
      EXPECT_LE(ps.objective_trace[t], ps.objective_trace[t - 1] + 1e-12);
    std::vector<std::size_t> sizes(k, 0);
    for (auto a : ps.assignments) {
      ASSERT_LT(a, k);
      ++sizes[a];
    }
    for (auto s : sizes) EXPECT_GE(s, 1u);
    EXPECT_NEAR(ps.objective, kmeans_objective(h, ps.centroids, ps.assignments), 1e-6);
  }
}

TEST(KMeans, DeterministicAndIdempotentAtConvergence) {
  std::mt19937_64 rng(3);
  const Tensor h = random_points(40, 2, rng);
  const PrototypeSet a = kmeans(h, 4, 100, 9);
  const PrototypeSet b = kmeans(h, 4, 100, 9);
  EXPECT_EQ(a.centroids, b.centroids);
  EXPECT_EQ(a.assignments, b.assignments);
  ASSERT_LT(a.iterations, 100u);
  const PrototypeSet again = kmeans_from(h, a.centroids, 20);
  EXPECT_EQ(again.assignments, a.assignments);
  EXPECT_EQ(again.centroids, a.centroids);
}

TEST(KMeans, MatchesBruteForceOnSmallInstances) {
  std::mt19937_64 rng(4);
  int optimal = 0;
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor h = random_points(8, 2, rng);
    double best = std::numeric_limits<double>::infinity();
    for (std::uint64_t seed = 0; seed < 10; ++seed) best = std::min(best, kmeans(h, 2, 20, seed).objective);
    const double oracle = brute_force_two_means(h);
    EXPECT_GE(best, oracle - 1e-9);
    optimal += best <= oracle + 1e-9;
  }
  EXPECT_GE(optimal, 47);
}

TEST(RepairEmptyClusters, NoEmptyIsIdentity) {
  const Tensor h = Tensor::from_rows({{0, 0}, {1, 0}, {5, 5}});
  PrototypeSet ps;
  ps.centroids = Tensor::from_rows({{0.5, 0}, {5, 5}});
  ps.assignments = {0, 0, 1};
  const PrototypeSet out = repair_empty_clusters(ps, h);
  EXPECT_EQ(out.centroids, ps.centroids);
  EXPECT_EQ(out.assignments, ps.assignments);
  EXPECT_NEAR(out.objective, 0.5, 1e-15);
}

TEST(RepairEmptyClusters, FarthestPointTakesEmptyCluster) {
  const Tensor h = Tensor::from_rows({{0, 0}, {1, 0}, {2, 0}, {9, 0}});
  PrototypeSet ps;
  ps.centroids = Tensor::from_rows({{1, 0}, {100, 100}});
  ps.assignments = {0, 0, 0, 0};
  const PrototypeSet out = repair_empty_clusters(ps, h);
  EXPECT_EQ(out.centroids.row(1)[0], 9.0);
  EXPECT_EQ(out.centroids.row(1)[1], 0.0);
  EXPECT_EQ(out.assignments, (std::vector<std::uint32_t>{0, 0, 0, 1}));
}

TEST(RepairEmptyClusters, TieGoesToLowerIndex) {
  const Tensor h = Tensor::from_rows({{-2, 0}, {0, 0}, {2, 0}});
  PrototypeSet ps;
  ps.centroids = Tensor::from_rows({{0, 0}, {50, 50}});
  ps.assignments = {0, 0, 0};
  const PrototypeSet out = repair_empty_clusters(ps, h);
  EXPECT_EQ(out.centroids.row(1)[0], -2.0);
  EXPECT_EQ(out.assignments[0], 1u);
}

TEST(SoftTargets, Examples) {
  const SoftTargetTable t = soft_targets(Tensor::identity(2), 1.0);
  EXPECT_NEAR(t.rows(0, 0), 0.7311, 1e-4);
  EXPECT_NEAR(t.rows(0, 1), 0.2689, 1e-4);
  const SoftTargetTable hard = soft_targets(Tensor::identity(3), 0.01);
  for (std::size_t r = 0; r < 3; ++r)
    for (std::size_t c = 0; c < 3; ++c) {
      if (r == c) EXPECT_NEAR(hard.rows(r, c), 1.0, 1e-15);
      else EXPECT_LT(hard.rows(r, c), 1e-40);
    }
  EXPECT_EQ(soft_targets(Tensor::from_rows({{0.6, 0.8}}), 0.01).rows, Tensor::scalar(1.0));
  EXPECT_THROW(soft_targets(Tensor::identity(2), 0.0), DomainError);
  EXPECT_EQ(hard_targets(3).rows, Tensor::identity(3));
}

TEST(SoftTargets, StochasticRowsWithDiagonalArgmax) {
  std::mt19937_64 rng(5);
  for (int trial = 0; trial < 50; ++trial) {
    const Tensor c = normalized_rows(random_points(6, 4, rng));
    const SoftTargetTable t = soft_targets(c, trial % 2 ? 0.01 : 0.5);
    for (std::size_t r = 0; r < 6; ++r) {
      double total = 0.0;
      for (double v : t.rows.row(r)) total += v;
      EXPECT_NEAR(total, 1.0, 1e-9);
      const auto row = t.rows.row(r);
      EXPECT_EQ(static_cast<std::size_t>(std::max_element(row.begin(), row.end()) - row.begin()), r);
    }
  }
  const SoftTargetTable t = soft_targets(Tensor::identity(3), 1.0);
  const std::vector<std::uint32_t> a{2, 0};
  const Tensor sel = t.select(a);
  EXPECT_EQ(sel.rows(), 2u);
  EXPECT_EQ(sel(0, 2), t.rows(2, 2));
  const std::vector<std::uint32_t> bad{3};
  EXPECT_THROW(t.select(bad), ContractError);
}

TEST(Pbt, Examples) {
  const std::vector<std::uint32_t> a{0, 0, 1};
  const Tensor h = Tensor::from_rows({{1, 0}, {3, 0}, {5, 5}});
  EXPECT_EQ(pbt_centroids(a, 2, h), Tensor::from_rows({{2, 0}, {5, 5}}));

  const std::vector<std::uint32_t> single{0};
  EXPECT_EQ(pbt_centroids(single, 1, Tensor::from_rows({{4, -2}})), Tensor::from_rows({{4, -2}}));

  const std::vector<std::uint32_t> all{0, 0, 0};
  const Tensor mean = pbt_centroids(all, 1, h);
  EXPECT_DOUBLE_EQ(mean(0, 0), 3.0);
  EXPECT_DOUBLE_EQ(mean(0, 1), 5.0 / 3.0);

  const std::vector<std::uint32_t> out_of_range{0, 2, 1};
  EXPECT_THROW(pbt_centroids(out_of_range, 2, h), ContractError);
  EXPECT_THROW(pbt_centroids(a, 2, Tensor(2, 2)), ContractError);
}

TEST(Pbt, DependsOnlyOnAssignments) {
  std::mt19937_64 rng(6);
  const Tensor teacher = random_points(30, 3, rng);
  const Tensor student = random_points(30, 4, rng);
  const PrototypeSet ps = kmeans(teacher, 5, 20, 1);
  // Positive scaling plus translation preserves nearest-centroid assignments.
  Tensor mapped = teacher;
  for (double& v : mapped.data()) v = 3.0 * v + 1.0;
  Tensor mapped_centroids = ps.centroids;
  for (double& v : mapped_centroids.data()) v = 3.0 * v + 1.0;
  const auto mapped_assign = assign_nearest(mapped, mapped_centroids);
  ASSERT_EQ(mapped_assign, ps.assignments);
  EXPECT_EQ(pbt_centroids(ps.assignments, 5, student), pbt_centroids(mapped_assign, 5, student));
}

TEST(Pbt, TranslationEquivariance) {
  std::mt19937_64 rng(7);
  const Tensor student = random_points(30, 4, rng);
  const PrototypeSet ps = kmeans(random_points(30, 2, rng), 4, 20, 2);
  const std::vector<double> g{10.0, -3.0, 0.5, 7.0};
  Tensor shifted = student;
  for (std::size_t i = 0; i < shifted.rows(); ++i)
    for (std::size_t c = 0; c < 4; ++c) shifted(i, c) += g[c];
  const Tensor a = pbt_centroids(ps.assignments, 4, student);
  const Tensor b = pbt_centroids(ps.assignments, 4, shifted);
  for (std::size_t k = 0; k < 4; ++k)
    for (std::size_t c = 0; c < 4; ++c) EXPECT_NEAR(b(k, c) - a(k, c), g[c], 1e-12);
}
