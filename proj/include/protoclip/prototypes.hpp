#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "protoclip/tensor.hpp"

namespace protoclip {

enum class Space { Image, Text, External };

const char* to_string(Space space);

struct PrototypeSet {
  Tensor centroids;                       // K x d
  std::vector<std::uint32_t> assignments; // one cluster index per sample
  double objective = 0.0;                 // sum of squared distances to assigned centroids
  Space space = Space::Image;
  /// Objective after every assignment step, first entry from the seeding.
  std::vector<double> objective_trace;
  std::size_t iterations = 0;

  std::size_t k() const { return centroids.rows(); }
};

/// Lloyd's algorithm with k-means++ seeding. Stops after `max_iters` update
/// steps or once assignments stop changing. Empty clusters are repaired after
/// every update.
PrototypeSet kmeans(const Tensor& h, std::size_t k, std::size_t max_iters, std::uint64_t seed);

/// Lloyd iterations starting from the given centroids instead of seeding.
PrototypeSet kmeans_from(const Tensor& h, Tensor initial_centroids, std::size_t max_iters);

/// Nearest-centroid assignment (ties to the lower cluster index).
std::vector<std::uint32_t> assign_nearest(const Tensor& h, const Tensor& centroids);

double kmeans_objective(const Tensor& h, const Tensor& centroids, std::span<const std::uint32_t> assignments);

/// Moves each empty cluster onto the sample farthest from its current
/// centroid (ties to the lower sample index) and recomputes assignments once.
PrototypeSet repair_empty_clusters(PrototypeSet ps, const Tensor& h);

struct SoftTargetTable {
  Tensor rows;  // K x K, row-stochastic
  double temperature = 0.0;

  /// Target rows for each sample's assigned prototype.
  Tensor select(std::span<const std::uint32_t> assignments) const;
};

/// Row k = softmax(C c_k / tau_y) over L2-normalized centroids.
SoftTargetTable soft_targets(const Tensor& normalized_centroids, double tau_y);
/// One-hot rows; the hard-target ablation.
SoftTargetTable hard_targets(std::size_t k);

/// Row k = mean of the student rows whose sample was assigned to teacher
/// cluster k. Summation runs in sample order. Not normalized.
Tensor pbt_centroids(std::span<const std::uint32_t> teacher_assignments, std::size_t k, const Tensor& h_student);

}  // namespace protoclip
