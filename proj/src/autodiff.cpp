#include "protoclip/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "protoclip/error.hpp"

namespace protoclip {

namespace detail {

struct Node {
  Tensor value;
  mutable Tensor grad;
  bool requires_grad = false;
  std::string name;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;

  Tensor& grad_buffer() const {
    if (grad.rows() != value.rows() || grad.cols() != value.cols()) {
      grad = Tensor(value.rows(), value.cols());
    }
    return grad;
  }
};

}  // namespace detail

struct VarAccess {
  static const std::shared_ptr<detail::Node>& node(const Var& v) {
    if (!v.node_) throw ContractError("use of an empty Var");
    return v.node_;
  }
  static Var wrap(std::shared_ptr<detail::Node> n) { return Var(std::move(n)); }
};

namespace {

using detail::Node;

Var make_leaf(Tensor value, bool requires_grad, const char* name) {
  if (!value.all_finite()) throw DataError(std::string("non-finite value in ") + name);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->name = name;
  return VarAccess::wrap(std::move(node));
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + a.shape_string() + " vs " +
                         b.shape_string());
  }
}

void require_scalar(const Tensor& s, const char* op) {
  if (!s.is_scalar()) throw DimensionError(std::string(op) + ": expected 1x1 scalar, got " + s.shape_string());
}

// C += A * B
void gemm_nn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.row(i).data();
    const double* ai = a.row(i).data();
    for (std::size_t p = 0; p < k; ++p) {
      const double av = ai[p];
      if (av == 0.0) continue;
      const double* bp = b.row(p).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

// C += A * B^T
void gemm_nt(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t m = a.rows(), n = b.rows();
  for (std::size_t i = 0; i < m; ++i) {
    auto ai = a.row(i);
    double* ci = c.row(i).data();
    for (std::size_t j = 0; j < n; ++j) ci[j] += dot(ai, b.row(j));
  }
}

// C += A^T * B
void gemm_tn(const Tensor& a, const Tensor& b, Tensor& c) {
  const std::size_t k = a.rows(), m = a.cols(), n = b.cols();
  for (std::size_t p = 0; p < k; ++p) {
    const double* ap = a.row(p).data();
    const double* bp = b.row(p).data();
    for (std::size_t i = 0; i < m; ++i) {
      const double av = ap[i];
      if (av == 0.0) continue;
      double* ci = c.row(i).data();
      for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
    }
  }
}

Tensor softmax_rows_value(const Tensor& x) {
  Tensor y(x.rows(), x.cols());
  for (std::size_t r = 0; r < x.rows(); ++r) {
    auto xr = x.row(r);
    auto yr = y.row(r);
    const double mx = *std::max_element(xr.begin(), xr.end());
    double z = 0.0;
    for (std::size_t c = 0; c < xr.size(); ++c) {
      yr[c] = std::exp(xr[c] - mx);
      z += yr[c];
    }
    for (double& v : yr) v /= z;
  }
  return y;
}

}  // namespace

Var Var::constant(Tensor value) { return make_leaf(std::move(value), false, "constant"); }
Var Var::parameter(Tensor value) { return make_leaf(std::move(value), true, "parameter"); }

const Tensor& Var::value() const { return VarAccess::node(*this)->value; }
const Tensor& Var::grad() const { return VarAccess::node(*this)->grad_buffer(); }
bool Var::requires_grad() const { return VarAccess::node(*this)->requires_grad; }
const std::string& Var::op_name() const { return VarAccess::node(*this)->name; }

Var make_op(std::string name, Tensor value, std::vector<Var> parents, BackwardFn backward) {
  if (!value.all_finite()) throw DataError("non-finite value produced by " + name);
  auto node = std::make_shared<Node>();
  node->value = std::move(value);
  node->name = std::move(name);
  for (const auto& p : parents) {
    const auto& pn = VarAccess::node(p);
    node->requires_grad = node->requires_grad || pn->requires_grad;
    node->parents.push_back(pn);
  }
  if (node->requires_grad) node->backward = std::move(backward);
  else node->parents.clear();
  return VarAccess::wrap(std::move(node));
}

Var detach(const Var& x) { return Var::constant(x.value()); }

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.rows()) {
    throw DimensionError("matmul: inner dimensions differ, " + av.shape_string() + " * " + bv.shape_string());
  }
  Tensor out(av.rows(), bv.cols());
  gemm_nn(av, bv, out);
  return make_op("matmul", std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0]) gemm_nt(g, b.value(), *pg[0]);
    if (pg[1]) gemm_tn(a.value(), g, *pg[1]);
  });
}

Var matmul_nt(const Var& a, const Var& b) {
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.cols() != bv.cols()) {
    throw DimensionError("matmul_nt: " + av.shape_string() + " * " + bv.shape_string() + "^T");
  }
  Tensor out(av.rows(), bv.rows());
  gemm_nt(av, bv, out);
  return make_op("matmul_nt", std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0]) gemm_nn(g, b.value(), *pg[0]);
    if (pg[1]) gemm_tn(g, a.value(), *pg[1]);
  });
}

Var transpose(const Var& x) {
  return make_op("transpose", x.value().transposed(), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& dx = *pg[0];
    for (std::size_t r = 0; r < g.rows(); ++r)
      for (std::size_t c = 0; c < g.cols(); ++c) dx(c, r) += g(r, c);
  });
}

Var add(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "add");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] += b.value()[i];
  return make_op("add", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
    for (Tensor* d : pg)
      if (d)
        for (std::size_t i = 0; i < g.size(); ++i) (*d)[i] += g[i];
  });
}

Var sub(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "sub");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b.value()[i];
  return make_op("sub", std::move(out), {a, b}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] -= g[i];
  });
}

Var mul(const Var& a, const Var& b) {
  require_same_shape(a.value(), b.value(), "mul");
  Tensor out = a.value();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b.value()[i];
  return make_op("mul", std::move(out), {a, b}, [a, b](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * b.value()[i];
    if (pg[1])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[1])[i] += g[i] * a.value()[i];
  });
}

Var scale(const Var& x, double factor) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= factor;
  return make_op("scale", std::move(out), {x}, [factor](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += factor * g[i];
  });
}

Var add_row_bias(const Var& x, const Var& bias) {
  const Tensor& xv = x.value();
  const Tensor& bv = bias.value();
  if (bv.rows() != 1 || bv.cols() != xv.cols()) {
    throw DimensionError("add_row_bias: bias " + bv.shape_string() + " does not match " + xv.shape_string());
  }
  Tensor out = xv;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto row = out.row(r);
    for (std::size_t c = 0; c < row.size(); ++c) row[c] += bv[c];
  }
  return make_op("add_row_bias", std::move(out), {x, bias}, [](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i];
    if (pg[1]) {
      Tensor& db = *pg[1];
      for (std::size_t r = 0; r < g.rows(); ++r)
        for (std::size_t c = 0; c < g.cols(); ++c) db[c] += g(r, c);
    }
  });
}

Var mul_scalar(const Var& x, const Var& s) {
  require_scalar(s.value(), "mul_scalar");
  const double sv = s.value().item();
  Tensor out = x.value();
  for (double& v : out.data()) v *= sv;
  return make_op("mul_scalar", std::move(out), {x, s}, [x, sv](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * sv;
    if (pg[1]) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x.value()[i];
      (*pg[1])[0] += acc;
    }
  });
}

Var div_scalar(const Var& x, const Var& s) {
  require_scalar(s.value(), "div_scalar");
  const double sv = s.value().item();
  if (sv == 0.0) throw DomainError("div_scalar: division by zero");
  Tensor out = x.value();
  for (double& v : out.data()) v /= sv;
  return make_op("div_scalar", std::move(out), {x, s}, [x, sv](const Tensor& g, std::span<Tensor* const> pg) {
    if (pg[0])
      for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] / sv;
    if (pg[1]) {
      double acc = 0.0;
      for (std::size_t i = 0; i < g.size(); ++i) acc += g[i] * x.value()[i];
      (*pg[1])[0] -= acc / (sv * sv);
    }
  });
}

Var relu(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  return make_op("relu", std::move(out), {x}, [x](const Tensor& g, std::span<Tensor* const> pg) {
    const Tensor& xv = x.value();
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > 0.0) (*pg[0])[i] += g[i];
  });
}

Var exp(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v = std::exp(v);
  auto result = make_op("exp", out, {x}, [out](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += g[i] * out[i];
  });
  return result;
}

Var neg(const Var& x) { return scale(x, -1.0); }

Var square(const Var& x) {
  Tensor out = x.value();
  for (double& v : out.data()) v *= v;
  return make_op("square", std::move(out), {x}, [x](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < g.size(); ++i) (*pg[0])[i] += 2.0 * x.value()[i] * g[i];
  });
}

Var sum(const Var& x) {
  double s = 0.0;
  for (double v : x.value().data()) s += v;
  return make_op("sum", Tensor::scalar(s), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    const double gv = g[0];
    for (double& d : pg[0]->data()) d += gv;
  });
}

Var mean(const Var& x) {
  const std::size_t n = x.value().size();
  if (n == 0) throw ContractError("mean of empty tensor");
  return scale(sum(x), 1.0 / static_cast<double>(n));
}

Var diag(const Var& x) {
  const Tensor& xv = x.value();
  if (xv.rows() != xv.cols()) throw DimensionError("diag: matrix " + xv.shape_string() + " is not square");
  Tensor out(1, xv.rows());
  for (std::size_t i = 0; i < xv.rows(); ++i) out[i] = xv(i, i);
  return make_op("diag", std::move(out), {x}, [](const Tensor& g, std::span<Tensor* const> pg) {
    for (std::size_t i = 0; i < g.cols(); ++i) (*pg[0])(i, i) += g[i];
  });
}

Var l2_normalize_rows(const Var& x) {
  const Tensor& xv = x.value();
  std::vector<double> norms(xv.rows());
  Tensor out = xv;
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto row = out.row(r);
    norms[r] = std::sqrt(dot(row, row));
    if (norms[r] < 1e-12) {
      throw DegenerateRowError(r, "l2_normalize_rows: row " + std::to_string(r) + " has norm below 1e-12");
    }
    for (double& v : row) v /= norms[r];
  }
  Tensor y = out;
  return make_op("l2_normalize_rows", std::move(out), {x},
                 [y, norms](const Tensor& g, std::span<Tensor* const> pg) {
                   Tensor& dx = *pg[0];
                   for (std::size_t r = 0; r < g.rows(); ++r) {
                     auto gr = g.row(r);
                     auto yr = y.row(r);
                     const double gy = dot(gr, yr);
                     auto dr = dx.row(r);
                     for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += (gr[c] - yr[c] * gy) / norms[r];
                   }
                 });
}

Var softmax_rows(const Var& x) {
  Tensor y = softmax_rows_value(x.value());
  Tensor saved = y;
  return make_op("softmax_rows", std::move(y), {x}, [saved](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& dx = *pg[0];
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      auto yr = saved.row(r);
      const double gy = dot(gr, yr);
      auto dr = dx.row(r);
      for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += yr[c] * (gr[c] - gy);
    }
  });
}

Var softmax_rows(const Var& x, double temperature) {
  if (!(temperature > 0.0)) throw DomainError("softmax_rows: temperature must be positive");
  return softmax_rows(scale(x, 1.0 / temperature));
}

Var softmax_rows(const Var& x, const Var& temperature) {
  require_scalar(temperature.value(), "softmax_rows");
  if (!(temperature.value().item() > 0.0)) throw DomainError("softmax_rows: temperature must be positive");
  return softmax_rows(div_scalar(x, temperature));
}

Var log_softmax_rows(const Var& x) {
  const Tensor& xv = x.value();
  Tensor out(xv.rows(), xv.cols());
  Tensor probs(xv.rows(), xv.cols());
  for (std::size_t r = 0; r < xv.rows(); ++r) {
    auto xr = xv.row(r);
    const double mx = *std::max_element(xr.begin(), xr.end());
    double z = 0.0;
    for (double v : xr) z += std::exp(v - mx);
    const double lse = mx + std::log(z);
    for (std::size_t c = 0; c < xr.size(); ++c) {
      out(r, c) = xr[c] - lse;
      probs(r, c) = std::exp(out(r, c));
    }
  }
  return make_op("log_softmax_rows", std::move(out), {x}, [probs](const Tensor& g, std::span<Tensor* const> pg) {
    Tensor& dx = *pg[0];
    for (std::size_t r = 0; r < g.rows(); ++r) {
      auto gr = g.row(r);
      double gs = 0.0;
      for (double v : gr) gs += v;
      auto dr = dx.row(r);
      for (std::size_t c = 0; c < gr.size(); ++c) dr[c] += gr[c] - probs(r, c) * gs;
    }
  });
}

Var soft_cross_entropy(const Var& p, const Tensor& targets, double floor) {
  require_same_shape(p.value(), targets, "soft_cross_entropy");
  const Tensor& pv = p.value();
  const double inv_n = 1.0 / static_cast<double>(pv.rows());
  double loss = 0.0;
  for (std::size_t i = 0; i < pv.size(); ++i) {
    if (targets[i] != 0.0) loss -= targets[i] * std::log(std::max(pv[i], floor));
  }
  loss *= inv_n;
  return make_op("soft_cross_entropy", Tensor::scalar(loss), {p},
                 [p, targets, floor, inv_n](const Tensor& g, std::span<Tensor* const> pg) {
                   const Tensor& pv = p.value();
                   Tensor& dp = *pg[0];
                   for (std::size_t i = 0; i < pv.size(); ++i) {
                     if (targets[i] != 0.0 && pv[i] > floor) dp[i] -= g[0] * inv_n * targets[i] / pv[i];
                   }
                 });
}

void backward(const Var& loss) {
  const auto& root = VarAccess::node(loss);
  if (!root->value.is_scalar()) {
    throw ContractError("backward: loss must be scalar, got " + root->value.shape_string());
  }
  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* parent = node->parents[next++].get();
      if (parent->requires_grad && visited.insert(parent).second) stack.emplace_back(parent, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  for (Node* n : order) {
    Tensor& g = n->grad_buffer();
    std::fill(g.data().begin(), g.data().end(), 0.0);
  }
  root->grad_buffer()[0] = 1.0;

  std::vector<Tensor*> parent_grads;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (!n->requires_grad || !n->backward) continue;
    parent_grads.clear();
    for (const auto& p : n->parents) parent_grads.push_back(p->requires_grad ? &p->grad_buffer() : nullptr);
    n->backward(n->grad, parent_grads);
  }
  for (Node* n : order) {
    if (!n->grad.all_finite()) throw DataError("non-finite gradient at " + n->name);
  }
}

double finite_diff_check(const ScalarFn& f, const std::vector<Tensor>& params, double step) {
  if (!(step >= 1e-7 && step <= 1e-3)) throw ContractError("finite_diff_check: step must lie in [1e-7, 1e-3]");

  auto evaluate = [&](const std::vector<Tensor>& values) -> double {
    std::vector<Var> vars;
    vars.reserve(values.size());
    try {
      for (const auto& v : values) vars.push_back(Var::constant(v));
      Var out = f(vars);
      const double result = out.value().item();
      if (!std::isfinite(result)) throw EvaluationError("finite_diff_check: non-finite function value");
      return result;
    } catch (const DataError& e) {
      throw EvaluationError(std::string("finite_diff_check: ") + e.what());
    }
  };

  std::vector<Var> vars;
  std::vector<Tensor> analytic;
  try {
    for (const auto& p : params) vars.push_back(Var::parameter(p));
    Var out = f(vars);
    if (!std::isfinite(out.value().item())) throw EvaluationError("finite_diff_check: non-finite function value");
    backward(out);
    for (const auto& v : vars) analytic.push_back(v.grad());
  } catch (const DataError& e) {
    throw EvaluationError(std::string("finite_diff_check: ") + e.what());
  }

  double worst = 0.0;
  std::vector<Tensor> probe = params;
  for (std::size_t p = 0; p < params.size(); ++p) {
    for (std::size_t i = 0; i < params[p].size(); ++i) {
      const double original = params[p][i];
      probe[p][i] = original + step;
      const double up = evaluate(probe);
      probe[p][i] = original - step;
      const double down = evaluate(probe);
      probe[p][i] = original;
      const double central = (up - down) / (2.0 * step);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(central), 1e-8});
      worst = std::max(worst, std::abs(a - central) / denom);
    }
  }
  return worst;
}

}  // namespace protoclip
