#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <vector>

#include "protoclip/tensor.hpp"

namespace protoclip {

/// Parameters of the synthetic paired-modality generator.
///
/// Each class owns a latent center drawn from N(0, I). A sample's latent is
/// its class center plus N(0, noise_sigma^2) content noise shared by both
/// modalities; each modality observes its own fixed random linear map of the
/// latent plus independent N(0, (noise_sigma * view_noise_ratio)^2) noise.
struct SyntheticSpec {
  std::size_t n_classes = 20;
  std::size_t per_class = 500;
  std::size_t d_latent = 16;
  std::size_t d_in_image = 32;
  std::size_t d_in_text = 32;
  double noise_sigma = 1.0;
  double view_noise_ratio = 0.5;
  std::uint64_t seed = 7;
};

struct PairedDataset {
  Tensor x_image;                    // M x d_in_image
  Tensor x_text;                     // M x d_in_text
  std::vector<std::uint32_t> labels; // ground truth, evaluation only
  std::size_t n_classes = 0;

  std::size_t size() const { return labels.size(); }
  PairedDataset subset(std::span<const std::size_t> indices) const;

  friend bool operator==(const PairedDataset&, const PairedDataset&) = default;
};

/// Draws a dataset. `sample_stream` selects an independent sample draw over
/// the same class centers and modality maps (0 = pretraining split,
/// 1 = held-out evaluation split).
PairedDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t sample_stream = 0);

/// Noiseless text input of every class center: the canonical class "prompt".
Tensor class_prompts(const SyntheticSpec& spec);

/// Root mean square of the row norms.
double rms_row_norm(const Tensor& x);

/// Random direction scaled to `norm`.
Tensor random_gap_vector(std::size_t dim, double norm, std::uint64_t seed);

/// Adds `gap` (1 x d_in_text) to every text row.
PairedDataset inject_modality_gap(PairedDataset ds, const Tensor& gap);
/// Adds the same offset to a matrix of text inputs (e.g. class prompts).
Tensor offset_rows(Tensor x, const Tensor& gap);

/// Additive isotropic Gaussian noise.
void augment(std::span<double> row, double sigma, std::mt19937_64& rng);
Tensor augment(const Tensor& x, double sigma, std::mt19937_64& rng);

struct PcaResult {
  Tensor projected;  // n x d_out
  Tensor basis;      // d x d_out, columns are principal axes
  Tensor mean;       // 1 x d
  std::vector<double> explained_variance;
};

/// Mean-centered projection on the top `d_out` covariance eigenvectors in
/// descending eigenvalue order. Each axis is signed so its largest-magnitude
/// entry is positive.
PcaResult pca_reduce(const Tensor& x, std::size_t d_out);

struct TeacherSpec {
  std::size_t hidden = 256;
  std::size_t raw_dim = 256;
  std::size_t reduced_dim = 16;
  std::uint64_t seed = 1234;
};

struct TeacherCache {
  Tensor features;  // M x reduced_dim, row i is sample i
  std::size_t source_dim = 0;
  Tensor basis;     // source_dim x reduced_dim

  friend bool operator==(const TeacherCache&, const TeacherCache&) = default;
};

/// Frozen random ReLU network over the text inputs, evaluated once for the
/// whole dataset, then reduced with pca_reduce.
TeacherCache build_teacher_cache(const PairedDataset& ds, const TeacherSpec& spec);

/// PROTO-DATA1: magic, u32 M, d_in_image, d_in_text, n_classes, x_image and
/// x_text as f64 row-major, labels as u32. Little-endian.
void write_dataset(const std::filesystem::path& path, const PairedDataset& ds);
PairedDataset read_dataset(const std::filesystem::path& path);

/// PROTO-TEACH1: magic, u32 M, reduced_dim, features f64, basis f64.
void write_teacher_cache(const std::filesystem::path& path, const TeacherCache& cache);
TeacherCache read_teacher_cache(const std::filesystem::path& path);

}  // namespace protoclip
