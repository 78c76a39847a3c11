#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protoclip/autodiff.hpp"
#include "protoclip/tensor.hpp"

namespace protoclip {

struct DenseLayer {
  Tensor weight;  // fan_in x fan_out
  Tensor bias;    // 1 x fan_out
};

/// Fully connected ReLU network: linear, ReLU, ..., linear.
struct MlpParams {
  std::vector<DenseLayer> layers;

  std::size_t in_width() const;
  std::size_t out_width() const;
  std::vector<std::size_t> widths() const;
  std::size_t parameter_count() const;
};

/// Encoder tower f: raw input -> representation z.
struct TowerParams : MlpParams {};

/// Two-layer projection head g: z -> h.
struct HeadParams : MlpParams {};

/// Weights ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
/// `widths` lists every layer width including input and output.
TowerParams init_tower(std::span<const std::size_t> widths, std::uint64_t seed);
/// Same initialization; `widths` must be {d_z, hidden, d_h}.
HeadParams init_head(std::span<const std::size_t> widths, std::uint64_t seed);

/// Parameters of one MLP bound into a graph as Vars, layer by layer.
struct MlpVars {
  std::vector<Var> weights;
  std::vector<Var> biases;
};

/// Wraps the parameters as graph leaves. With `trainable` false they are constants.
MlpVars bind(const MlpParams& params, bool trainable);

/// Differentiable forward pass of a bound MLP.
Var mlp_forward(const MlpVars& vars, const Var& x);

/// Raw representation z = f(x); not normalized.
Var encode(const MlpVars& tower, const Var& x);
/// Projected representation h = g(z).
Var project(const MlpVars& head, const Var& z);

/// Non-differentiable conveniences for feature extraction and evaluation.
Tensor encode(const TowerParams& tower, const Tensor& x);
Tensor project(const HeadParams& head, const Tensor& z);

struct NamedTensor {
  std::string name;
  Tensor value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Checkpoint layout: magic "PROTO-CKPT1", then per tensor: u32 name length,
/// name bytes, u32 rows, u32 cols, rows*cols f64. All little-endian.
void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors);
std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path);

/// Flattens an MLP into records named "<prefix>.<layer>.weight|bias".
void append_named(const MlpParams& params, const std::string& prefix, std::vector<NamedTensor>& out);
/// Inverse of append_named; throws IoError when records are missing.
MlpParams mlp_from_named(std::span<const NamedTensor> records, const std::string& prefix);

}  // namespace protoclip
