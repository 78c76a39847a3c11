#include "protoclip/data.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

#include "binary_io.hpp"
#include "protoclip/encoders.hpp"
#include "protoclip/error.hpp"

namespace protoclip {

namespace {

constexpr std::string_view kDataMagic = "PROTO-DATA1";
constexpr std::string_view kTeacherMagic = "PROTO-TEACH1";

enum class Stream : std::uint64_t { Centers = 1, ImageMap = 2, TextMap = 3, Samples = 4, Gap = 5 };

std::mt19937_64 stream_rng(std::uint64_t seed, Stream stream, std::uint64_t sub = 0) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(sub),
                    static_cast<std::uint32_t>(sub >> 32)};
  return std::mt19937_64(seq);
}

Tensor gaussian(std::size_t rows, std::size_t cols, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, 1.0);
  Tensor t(rows, cols);
  for (double& v : t.data()) v = stddev * dist(rng);
  return t;
}

void validate(const SyntheticSpec& spec) {
  if (spec.n_classes == 0 || spec.per_class == 0 || spec.d_latent == 0 || spec.d_in_image == 0 ||
      spec.d_in_text == 0) {
    throw ConfigError("synthetic dataset dimensions must all be at least 1");
  }
  if (!(spec.noise_sigma >= 0.0) || !(spec.view_noise_ratio >= 0.0)) {
    throw ConfigError("synthetic noise levels must be non-negative");
  }
}

struct Generator {
  Tensor centers;  // n_classes x d_latent
  Tensor map_image;
  Tensor map_text;
};

Generator make_generator(const SyntheticSpec& spec) {
  validate(spec);
  auto centers_rng = stream_rng(spec.seed, Stream::Centers);
  auto image_rng = stream_rng(spec.seed, Stream::ImageMap);
  auto text_rng = stream_rng(spec.seed, Stream::TextMap);
  const double map_scale = 1.0 / std::sqrt(static_cast<double>(spec.d_latent));
  return {gaussian(spec.n_classes, spec.d_latent, 1.0, centers_rng),
          gaussian(spec.d_latent, spec.d_in_image, map_scale, image_rng),
          gaussian(spec.d_latent, spec.d_in_text, map_scale, text_rng)};
}

Tensor linear_map(const Tensor& x, const Tensor& map) {
  Tensor out(x.rows(), map.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto dst = out.row(r);
    auto src = x.row(r);
    for (std::size_t k = 0; k < src.size(); ++k) {
      auto m = map.row(k);
      for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[k] * m[c];
    }
  }
  return out;
}

}  // namespace

PairedDataset PairedDataset::subset(std::span<const std::size_t> indices) const {
  PairedDataset out;
  out.x_image = x_image.gather_rows(indices);
  out.x_text = x_text.gather_rows(indices);
  out.n_classes = n_classes;
  out.labels.reserve(indices.size());
  for (auto i : indices) out.labels.push_back(labels.at(i));
  return out;
}

PairedDataset generate_synthetic(const SyntheticSpec& spec, std::uint64_t sample_stream) {
  const Generator gen = make_generator(spec);
  const std::size_t m = spec.n_classes * spec.per_class;
  auto rng = stream_rng(spec.seed, Stream::Samples, sample_stream);
  std::normal_distribution<double> normal(0.0, 1.0);
  const double view_sigma = spec.noise_sigma * spec.view_noise_ratio;

  Tensor latent(m, spec.d_latent);
  PairedDataset ds;
  ds.n_classes = spec.n_classes;
  ds.labels.resize(m);
  // Classes are interleaved so that any prefix of the dataset is balanced.
  for (std::size_t i = 0; i < m; ++i) {
    const std::size_t c = i % spec.n_classes;
    ds.labels[i] = static_cast<std::uint32_t>(c);
    auto row = latent.row(i);
    auto center = gen.centers.row(c);
    for (std::size_t k = 0; k < row.size(); ++k) row[k] = center[k] + spec.noise_sigma * normal(rng);
  }
  ds.x_image = linear_map(latent, gen.map_image);
  ds.x_text = linear_map(latent, gen.map_text);
  for (double& v : ds.x_image.data()) v += view_sigma * normal(rng);
  for (double& v : ds.x_text.data()) v += view_sigma * normal(rng);
  return ds;
}

Tensor class_prompts(const SyntheticSpec& spec) {
  const Generator gen = make_generator(spec);
  return linear_map(gen.centers, gen.map_text);
}

double rms_row_norm(const Tensor& x) {
  if (x.rows() == 0) return 0.0;
  double total = 0.0;
  for (double v : x.data()) total += v * v;
  return std::sqrt(total / static_cast<double>(x.rows()));
}

Tensor random_gap_vector(std::size_t dim, double norm, std::uint64_t seed) {
  if (norm == 0.0) return Tensor(1, dim);
  auto rng = stream_rng(seed, Stream::Gap);
  Tensor v = gaussian(1, dim, 1.0, rng);
  const double n = std::sqrt(dot(v.data(), v.data()));
  for (double& x : v.data()) x *= norm / n;
  return v;
}

Tensor offset_rows(Tensor x, const Tensor& gap) {
  if (gap.rows() != 1 || gap.cols() != x.cols()) {
    throw DimensionError("modality gap " + gap.shape_string() + " does not match rows of width " + std::to_string(x.cols()));
  }
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto row = x.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += gap[c];
  }
  return x;
}

PairedDataset inject_modality_gap(PairedDataset ds, const Tensor& gap) {
  ds.x_text = offset_rows(std::move(ds.x_text), gap);
  return ds;
}

void augment(std::span<double> row, double sigma, std::mt19937_64& rng) {
  if (sigma < 0.0) throw ConfigError("augmentation sigma must be non-negative");
  if (sigma == 0.0) return;
  std::normal_distribution<double> dist(0.0, sigma);
  for (double& v : row) v += dist(rng);
}

Tensor augment(const Tensor& x, double sigma, std::mt19937_64& rng) {
  Tensor out = x;
  for (std::size_t r = 0; r < out.rows(); ++r) augment(out.row(r), sigma, rng);
  return out;
}

PcaResult pca_reduce(const Tensor& x, std::size_t d_out) {
  const std::size_t n = x.rows();
  const std::size_t d = x.cols();
  if (n < 2) throw DataError("pca_reduce: need at least two samples");
  if (d_out == 0 || d_out > d) {
    throw ConfigError("pca_reduce: output width " + std::to_string(d_out) + " outside [1, " + std::to_string(d) + "]");
  }
  Eigen::MatrixXd centered(n, d);
  PcaResult result;
  result.mean = Tensor(1, d);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) result.mean[c] += x(r, c);
  for (double& v : result.mean.data()) v /= static_cast<double>(n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d; ++c) centered(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = x(r, c) - result.mean[c];

  const Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(cov);
  if (solver.info() != Eigen::Success) throw DataError("pca_reduce: eigendecomposition failed");

  // Eigen returns ascending eigenvalues.
  Eigen::MatrixXd basis(d, d_out);
  for (std::size_t j = 0; j < d_out; ++j) {
    const auto src = static_cast<Eigen::Index>(d - 1 - j);
    Eigen::VectorXd axis = solver.eigenvectors().col(src);
    Eigen::Index arg = 0;
    axis.cwiseAbs().maxCoeff(&arg);
    if (axis(arg) < 0) axis = -axis;
    basis.col(static_cast<Eigen::Index>(j)) = axis;
    result.explained_variance.push_back(std::max(0.0, solver.eigenvalues()(src)));
  }
  const Eigen::MatrixXd projected = centered * basis;

  result.basis = Tensor(d, d_out);
  for (std::size_t r = 0; r < d; ++r)
    for (std::size_t c = 0; c < d_out; ++c) result.basis(r, c) = basis(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  result.projected = Tensor(n, d_out);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < d_out; ++c)
      result.projected(r, c) = projected(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
  return result;
}

TeacherCache build_teacher_cache(const PairedDataset& ds, const TeacherSpec& spec) {
  if (spec.reduced_dim > spec.raw_dim) throw ConfigError("teacher reduced_dim exceeds raw_dim");
  const std::vector<std::size_t> widths{ds.x_text.cols(), spec.hidden, spec.raw_dim};
  const TowerParams teacher = init_tower(widths, spec.seed);
  const Tensor raw = encode(teacher, ds.x_text);
  PcaResult pca = pca_reduce(raw, spec.reduced_dim);
  return {std::move(pca.projected), spec.raw_dim, std::move(pca.basis)};
}

void write_dataset(const std::filesystem::path& path, const PairedDataset& ds) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binary::write_magic(os, kDataMagic);
  binary::write_u32(os, binary::checked_u32(ds.size(), "M"));
  binary::write_u32(os, binary::checked_u32(ds.x_image.cols(), "d_in_image"));
  binary::write_u32(os, binary::checked_u32(ds.x_text.cols(), "d_in_text"));
  binary::write_u32(os, binary::checked_u32(ds.n_classes, "n_classes"));
  binary::write_values(os, ds.x_image);
  binary::write_values(os, ds.x_text);
  for (auto l : ds.labels) binary::write_u32(os, l);
  if (!os) throw IoError("failed writing " + path.string());
}

PairedDataset read_dataset(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open dataset " + path.string());
  binary::expect_magic(is, kDataMagic, path.string());
  const std::uint32_t m = binary::read_u32(is, "M");
  const std::uint32_t d_image = binary::read_u32(is, "d_in_image");
  const std::uint32_t d_text = binary::read_u32(is, "d_in_text");
  PairedDataset ds;
  ds.n_classes = binary::read_u32(is, "n_classes");
  ds.x_image = binary::read_tensor(is, m, d_image, "image inputs");
  ds.x_text = binary::read_tensor(is, m, d_text, "text inputs");
  ds.labels.resize(m);
  for (auto& l : ds.labels) {
    l = binary::read_u32(is, "labels");
    if (l >= ds.n_classes) throw IoError(path.string() + ": label out of range");
  }
  return ds;
}

void write_teacher_cache(const std::filesystem::path& path, const TeacherCache& cache) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binary::write_magic(os, kTeacherMagic);
  binary::write_u32(os, binary::checked_u32(cache.features.rows(), "M"));
  binary::write_u32(os, binary::checked_u32(cache.features.cols(), "reduced_dim"));
  binary::write_values(os, cache.features);
  binary::write_values(os, cache.basis);
  if (!os) throw IoError("failed writing " + path.string());
}

TeacherCache read_teacher_cache(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open teacher cache " + path.string());
  binary::expect_magic(is, kTeacherMagic, path.string());
  const std::uint32_t m = binary::read_u32(is, "M");
  const std::uint32_t reduced = binary::read_u32(is, "reduced_dim");
  TeacherCache cache;
  cache.features = binary::read_tensor(is, m, reduced, "teacher features");
  // The source dimension is implied by the remaining payload.
  const auto here = is.tellg();
  is.seekg(0, std::ios::end);
  const auto remaining = static_cast<std::size_t>(is.tellg() - here);
  is.seekg(here);
  if (reduced == 0 || remaining % (8 * static_cast<std::size_t>(reduced)) != 0) {
    throw IoError(path.string() + ": PCA basis payload has an unexpected size");
  }
  cache.source_dim = remaining / (8 * static_cast<std::size_t>(reduced));
  cache.basis = binary::read_tensor(is, cache.source_dim, reduced, "PCA basis");
  return cache;
}

}  // namespace protoclip
