#include "protoclip/prototypes.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

#include "protoclip/error.hpp"

namespace protoclip {

namespace {

void check_input(const Tensor& h, std::size_t k) {
  if (k == 0) throw ConfigError("kmeans: K must be at least 1");
  if (h.rows() < k) {
    throw ConfigError("kmeans: " + std::to_string(h.rows()) + " samples cannot form " + std::to_string(k) + " clusters");
  }
  if (!h.all_finite()) throw DataError("kmeans: input contains non-finite values");
}

std::vector<std::size_t> cluster_sizes(std::span<const std::uint32_t> assignments, std::size_t k) {
  std::vector<std::size_t> sizes(k, 0);
  for (auto a : assignments) ++sizes[a];
  return sizes;
}

Tensor kmeans_plus_plus(const Tensor& h, std::size_t k, std::uint64_t seed) {
  const std::size_t n = h.rows();
  std::mt19937_64 rng(seed);
  Tensor centroids(k, h.cols());
  std::vector<double> nearest(n, std::numeric_limits<double>::infinity());

  std::size_t pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
  for (std::size_t c = 0; c < k; ++c) {
    std::copy(h.row(pick).begin(), h.row(pick).end(), centroids.row(c).begin());
    if (c + 1 == k) break;
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      nearest[i] = std::min(nearest[i], squared_distance(h.row(i), centroids.row(c)));
      total += nearest[i];
    }
    if (total <= 0.0) {
      // Every sample coincides with a chosen centroid; any further pick is a duplicate.
      pick = std::uniform_int_distribution<std::size_t>(0, n - 1)(rng);
      continue;
    }
    const double target = std::uniform_real_distribution<double>(0.0, total)(rng);
    double running = 0.0;
    pick = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      running += nearest[i];
      if (running > target && nearest[i] > 0.0) {
        pick = i;
        break;
      }
    }
  }
  return centroids;
}

Tensor cluster_means(const Tensor& h, std::span<const std::uint32_t> assignments, const Tensor& previous) {
  const std::size_t k = previous.rows();
  Tensor sums(k, h.cols());
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto dst = sums.row(assignments[i]);
    auto src = h.row(i);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    ++counts[assignments[i]];
  }
  for (std::size_t j = 0; j < k; ++j) {
    auto row = sums.row(j);
    if (counts[j] == 0) {
      std::copy(previous.row(j).begin(), previous.row(j).end(), row.begin());
      continue;
    }
    const double inv = 1.0 / static_cast<double>(counts[j]);
    for (double& v : row) v *= inv;
  }
  return sums;
}

PrototypeSet lloyd(const Tensor& h, Tensor centroids, std::size_t max_iters) {
  PrototypeSet ps;
  ps.centroids = std::move(centroids);
  ps.assignments = assign_nearest(h, ps.centroids);
  ps = repair_empty_clusters(std::move(ps), h);
  ps.objective_trace.push_back(ps.objective);

  for (std::size_t it = 0; it < max_iters; ++it) {
    PrototypeSet next;
    next.centroids = cluster_means(h, ps.assignments, ps.centroids);
    next.assignments = assign_nearest(h, next.centroids);
    next = repair_empty_clusters(std::move(next), h);
    next.objective_trace = std::move(ps.objective_trace);
    next.objective_trace.push_back(next.objective);
    next.iterations = it + 1;
    const bool converged = next.assignments == ps.assignments;
    ps = std::move(next);
    if (converged) break;
  }
  return ps;
}

}  // namespace

const char* to_string(Space space) {
  switch (space) {
    case Space::Image: return "image";
    case Space::Text: return "text";
    case Space::External: return "external";
  }
  return "unknown";
}

std::vector<std::uint32_t> assign_nearest(const Tensor& h, const Tensor& centroids) {
  if (h.cols() != centroids.cols()) {
    throw DimensionError("assign_nearest: samples " + h.shape_string() + " vs centroids " + centroids.shape_string());
  }
  std::vector<std::uint32_t> out(h.rows());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto x = h.row(i);
    double best = std::numeric_limits<double>::infinity();
    std::uint32_t best_j = 0;
    for (std::size_t j = 0; j < centroids.rows(); ++j) {
      const double d = squared_distance(x, centroids.row(j));
      if (d < best) {
        best = d;
        best_j = static_cast<std::uint32_t>(j);
      }
    }
    out[i] = best_j;
  }
  return out;
}

double kmeans_objective(const Tensor& h, const Tensor& centroids, std::span<const std::uint32_t> assignments) {
  double total = 0.0;
  for (std::size_t i = 0; i < h.rows(); ++i) total += squared_distance(h.row(i), centroids.row(assignments[i]));
  return total;
}

PrototypeSet repair_empty_clusters(PrototypeSet ps, const Tensor& h) {
  const std::size_t k = ps.centroids.rows();
  const std::size_t n = h.rows();
  if (ps.assignments.size() != n) throw ContractError("repair_empty_clusters: assignment count does not match samples");
  for (auto a : ps.assignments)
    if (a >= k) throw ContractError("repair_empty_clusters: assignment out of range");

  // A pass can empty another cluster when its members move to a repaired
  // centroid, so repeat; n >= K distinct points guarantee progress.
  for (std::size_t pass = 0; pass <= k; ++pass) {
    auto sizes = cluster_sizes(ps.assignments, k);
    if (std::find(sizes.begin(), sizes.end(), std::size_t{0}) == sizes.end()) break;

    std::vector<bool> claimed(n, false);
    for (std::size_t j = 0; j < k; ++j) {
      if (sizes[j] != 0) continue;
      double far = -1.0;
      std::size_t far_i = n;
      for (std::size_t i = 0; i < n; ++i) {
        if (claimed[i] || sizes[ps.assignments[i]] <= 1) continue;
        const double d = squared_distance(h.row(i), ps.centroids.row(ps.assignments[i]));
        if (d > far) {
          far = d;
          far_i = i;
        }
      }
      if (far_i == n) break;
      std::copy(h.row(far_i).begin(), h.row(far_i).end(), ps.centroids.row(j).begin());
      --sizes[ps.assignments[far_i]];
      ++sizes[j];
      ps.assignments[far_i] = static_cast<std::uint32_t>(j);
      claimed[far_i] = true;
    }
    auto reassigned = assign_nearest(h, ps.centroids);
    for (std::size_t i = 0; i < n; ++i)
      if (!claimed[i]) ps.assignments[i] = reassigned[i];
  }
  ps.objective = kmeans_objective(h, ps.centroids, ps.assignments);
  return ps;
}

PrototypeSet kmeans(const Tensor& h, std::size_t k, std::size_t max_iters, std::uint64_t seed) {
  check_input(h, k);
  return lloyd(h, kmeans_plus_plus(h, k, seed), max_iters);
}

PrototypeSet kmeans_from(const Tensor& h, Tensor initial_centroids, std::size_t max_iters) {
  check_input(h, initial_centroids.rows());
  if (initial_centroids.cols() != h.cols()) throw DimensionError("kmeans_from: centroid width does not match samples");
  return lloyd(h, std::move(initial_centroids), max_iters);
}

Tensor SoftTargetTable::select(std::span<const std::uint32_t> assignments) const {
  Tensor out(assignments.size(), rows.cols());
  for (std::size_t i = 0; i < assignments.size(); ++i) {
    if (assignments[i] >= rows.rows()) throw ContractError("soft target lookup out of range");
    auto src = rows.row(assignments[i]);
    std::copy(src.begin(), src.end(), out.row(i).begin());
  }
  return out;
}

SoftTargetTable soft_targets(const Tensor& normalized_centroids, double tau_y) {
  if (!(tau_y > 0.0)) throw DomainError("soft_targets: tau_y must be positive");
  const std::size_t k = normalized_centroids.rows();
  Tensor scores = matmul_transposed(normalized_centroids, normalized_centroids);
  for (std::size_t r = 0; r < k; ++r) {
    auto row = scores.row(r);
    double mx = -std::numeric_limits<double>::infinity();
    for (double& v : row) {
      v /= tau_y;
      mx = std::max(mx, v);
    }
    double z = 0.0;
    for (double& v : row) {
      v = std::exp(v - mx);
      z += v;
    }
    for (double& v : row) v /= z;
  }
  return {std::move(scores), tau_y};
}

SoftTargetTable hard_targets(std::size_t k) { return {Tensor::identity(k), 0.0}; }

Tensor pbt_centroids(std::span<const std::uint32_t> teacher_assignments, std::size_t k, const Tensor& h_student) {
  if (teacher_assignments.size() != h_student.rows()) {
    throw ContractError("pbt_centroids: " + std::to_string(teacher_assignments.size()) + " assignments for " +
                        std::to_string(h_student.rows()) + " student rows");
  }
  Tensor sums(k, h_student.cols());
  std::vector<std::size_t> counts(k, 0);
  for (std::size_t i = 0; i < h_student.rows(); ++i) {
    const auto a = teacher_assignments[i];
    if (a >= k) throw ContractError("pbt_centroids: cluster index " + std::to_string(a) + " out of range");
    auto dst = sums.row(a);
    auto src = h_student.row(i);
    for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
    ++counts[a];
  }
  for (std::size_t j = 0; j < k; ++j) {
    if (counts[j] == 0) throw ContractError("pbt_centroids: teacher cluster " + std::to_string(j) + " is empty");
    const double inv = 1.0 / static_cast<double>(counts[j]);
    for (double& v : sums.row(j)) v *= inv;
  }
  return sums;
}

}  // namespace protoclip
