#include "protoclip/encoders.hpp"

#include <cmath>
#include <fstream>
#include <random>

#include "binary_io.hpp"
#include "protoclip/error.hpp"

namespace protoclip {

namespace {

constexpr std::string_view kCheckpointMagic = "PROTO-CKPT1";

MlpParams init_mlp(std::span<const std::size_t> widths, std::uint64_t seed) {
  if (widths.size() < 2) throw ConfigError("an MLP needs at least an input and an output width");
  for (std::size_t w : widths)
    if (w == 0) throw ConfigError("layer width must be positive");
  std::mt19937_64 rng(seed);
  MlpParams params;
  for (std::size_t l = 0; l + 1 < widths.size(); ++l) {
    const std::size_t fan_in = widths[l];
    const std::size_t fan_out = widths[l + 1];
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    DenseLayer layer{Tensor(fan_in, fan_out), Tensor(1, fan_out)};
    for (double& w : layer.weight.data()) w = dist(rng);
    params.layers.push_back(std::move(layer));
  }
  return params;
}

Tensor forward_plain(const MlpParams& params, const Tensor& x) {
  return mlp_forward(bind(params, false), Var::constant(x)).value();
}

}  // namespace

std::size_t MlpParams::in_width() const { return layers.empty() ? 0 : layers.front().weight.rows(); }
std::size_t MlpParams::out_width() const { return layers.empty() ? 0 : layers.back().weight.cols(); }

std::vector<std::size_t> MlpParams::widths() const {
  std::vector<std::size_t> w;
  if (layers.empty()) return w;
  w.push_back(in_width());
  for (const auto& l : layers) w.push_back(l.weight.cols());
  return w;
}

std::size_t MlpParams::parameter_count() const {
  std::size_t n = 0;
  for (const auto& l : layers) n += l.weight.size() + l.bias.size();
  return n;
}

TowerParams init_tower(std::span<const std::size_t> widths, std::uint64_t seed) {
  TowerParams t;
  static_cast<MlpParams&>(t) = init_mlp(widths, seed);
  return t;
}

HeadParams init_head(std::span<const std::size_t> widths, std::uint64_t seed) {
  if (widths.size() != 3) throw ConfigError("projection head must have exactly two layers");
  HeadParams h;
  static_cast<MlpParams&>(h) = init_mlp(widths, seed);
  return h;
}

MlpVars bind(const MlpParams& params, bool trainable) {
  MlpVars vars;
  for (const auto& l : params.layers) {
    vars.weights.push_back(trainable ? Var::parameter(l.weight) : Var::constant(l.weight));
    vars.biases.push_back(trainable ? Var::parameter(l.bias) : Var::constant(l.bias));
  }
  return vars;
}

Var mlp_forward(const MlpVars& vars, const Var& x) {
  if (vars.weights.empty()) throw ContractError("forward through an empty MLP");
  if (x.cols() != vars.weights.front().rows()) {
    throw DimensionError("MLP input has " + std::to_string(x.cols()) + " columns, first layer expects " +
                         std::to_string(vars.weights.front().rows()));
  }
  Var h = x;
  for (std::size_t l = 0; l < vars.weights.size(); ++l) {
    h = add_row_bias(matmul(h, vars.weights[l]), vars.biases[l]);
    if (l + 1 < vars.weights.size()) h = relu(h);
  }
  return h;
}

Var encode(const MlpVars& tower, const Var& x) { return mlp_forward(tower, x); }
Var project(const MlpVars& head, const Var& z) { return mlp_forward(head, z); }

Tensor encode(const TowerParams& tower, const Tensor& x) { return forward_plain(tower, x); }
Tensor project(const HeadParams& head, const Tensor& z) { return forward_plain(head, z); }

void write_checkpoint(const std::filesystem::path& path, std::span<const NamedTensor> tensors) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  binary::write_magic(os, kCheckpointMagic);
  for (const auto& t : tensors) {
    binary::write_u32(os, binary::checked_u32(t.name.size(), "tensor name length"));
    os.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
    binary::write_u32(os, binary::checked_u32(t.value.rows(), "rows"));
    binary::write_u32(os, binary::checked_u32(t.value.cols(), "cols"));
    binary::write_values(os, t.value);
  }
  if (!os) throw IoError("failed writing " + path.string());
}

std::vector<NamedTensor> read_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("cannot open checkpoint " + path.string());
  binary::expect_magic(is, kCheckpointMagic, path.string());
  std::vector<NamedTensor> out;
  while (is.peek() != std::char_traits<char>::eof()) {
    NamedTensor t;
    const std::uint32_t len = binary::read_u32(is, "name length");
    t.name.resize(len);
    binary::read_exact(is, t.name.data(), len, "tensor name");
    const std::uint32_t rows = binary::read_u32(is, "rows");
    const std::uint32_t cols = binary::read_u32(is, "cols");
    t.value = binary::read_tensor(is, rows, cols, "tensor values");
    out.push_back(std::move(t));
  }
  return out;
}

void append_named(const MlpParams& params, const std::string& prefix, std::vector<NamedTensor>& out) {
  for (std::size_t l = 0; l < params.layers.size(); ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    out.push_back({base + ".weight", params.layers[l].weight});
    out.push_back({base + ".bias", params.layers[l].bias});
  }
}

MlpParams mlp_from_named(std::span<const NamedTensor> records, const std::string& prefix) {
  auto find = [&](const std::string& name) -> const Tensor* {
    for (const auto& r : records)
      if (r.name == name) return &r.value;
    return nullptr;
  };
  MlpParams params;
  for (std::size_t l = 0;; ++l) {
    const std::string base = prefix + "." + std::to_string(l);
    const Tensor* w = find(base + ".weight");
    const Tensor* b = find(base + ".bias");
    if (!w && !b) break;
    if (!w || !b) throw IoError("checkpoint record " + base + " is incomplete");
    if (b->rows() != 1 || b->cols() != w->cols()) throw IoError("checkpoint record " + base + " has inconsistent shapes");
    if (!params.layers.empty() && params.layers.back().weight.cols() != w->rows()) {
      throw IoError("checkpoint layers of " + prefix + " do not compose");
    }
    params.layers.push_back({*w, *b});
  }
  if (params.layers.empty()) throw IoError("checkpoint has no tensors for " + prefix);
  return params;
}

}  // namespace protoclip
