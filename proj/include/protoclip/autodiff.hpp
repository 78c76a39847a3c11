#pragma once

#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "protoclip/tensor.hpp"

namespace protoclip {

namespace detail {
struct Node;
}

/// Handle to a node of a define-by-run reverse-mode graph.
///
/// Leaves are either constants (never receive gradients) or parameters.
/// Every op result requires a gradient iff one of its inputs does. Graphs
/// are rebuilt from scratch for every forward pass; a Var keeps its whole
/// upstream graph alive.
class Var {
 public:
  Var() = default;

  static Var constant(Tensor value);
  static Var parameter(Tensor value);

  const Tensor& value() const;
  /// Gradient of the last backward() through this node. Zeros when the
  /// loss did not depend on it.
  const Tensor& grad() const;
  bool requires_grad() const;
  const std::string& op_name() const;

  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
  explicit operator bool() const noexcept { return node_ != nullptr; }

 private:
  explicit Var(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend struct VarAccess;
  std::shared_ptr<detail::Node> node_;
};

/// Receives the gradient flowing into an op's output and accumulates into
/// the gradient buffers of its parents. Entries of `parent_grads` are null
/// for parents that do not require gradients.
using BackwardFn = std::function<void(const Tensor& out_grad, std::span<Tensor* const> parent_grads)>;

/// Registers a new op node. Throws DataError if `value` is not finite.
Var make_op(std::string name, Tensor value, std::vector<Var> parents, BackwardFn backward);

/// Cuts the graph: same value, no gradient flow.
Var detach(const Var& x);

Var matmul(const Var& a, const Var& b);
/// a * b^T.
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& x);

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& x, double factor);
/// Adds a 1 x n bias to every row of an m x n input.
Var add_row_bias(const Var& x, const Var& bias);
/// Multiplies/divides every entry by a 1 x 1 Var.
Var mul_scalar(const Var& x, const Var& s);
Var div_scalar(const Var& x, const Var& s);

Var relu(const Var& x);
Var exp(const Var& x);
Var neg(const Var& x);
Var square(const Var& x);

Var sum(const Var& x);
Var mean(const Var& x);
/// Main diagonal of a square matrix as a 1 x n row.
Var diag(const Var& x);

Var l2_normalize_rows(const Var& x);
Var softmax_rows(const Var& x);
Var softmax_rows(const Var& x, double temperature);
Var softmax_rows(const Var& x, const Var& temperature);
Var log_softmax_rows(const Var& x);
/// Mean over rows of -sum_k targets * log(max(p, floor)).
Var soft_cross_entropy(const Var& p, const Tensor& targets, double floor = 1e-12);

/// Reverse-mode accumulation from a scalar loss. Gradients of every node in
/// the graph are reset first, so repeated calls are deterministic.
void backward(const Var& loss);

/// Scalar function of a list of parameter tensors, built from Var ops.
using ScalarFn = std::function<Var(std::span<const Var> params)>;

/// Max over all coordinates of |analytic - central| / max(|analytic|, |central|, 1e-8).
/// `step` must lie in [1e-7, 1e-3].
double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double step = 1e-5);

}  // namespace protoclip
