#include "deid/tensor.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <sstream>

#include <Eigen/Dense>

#include "deid/error.hpp"
#include "deid/rng.hpp"

namespace deid::nn {

namespace {

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMatrix = Eigen::Map<RowMatrix>;
using ConstMapMatrix = Eigen::Map<const RowMatrix>;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

thread_local Graph* g_current_graph = nullptr;
#ifdef NDEBUG
thread_local bool g_finite_checks = false;
#else
thread_local bool g_finite_checks = true;
#endif

std::size_t product(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) out += (i ? "," : "") + std::to_string(s[i]);
  return out + "]";
}

std::vector<double>& grad_of(TensorNode& node) {
  if (node.grad.empty()) node.grad.assign(node.values.size(), 0.0);
  return node.grad;
}

ConstMapMatrix as_matrix(const Tensor& t) {
  return ConstMapMatrix(t.values().data(), static_cast<Eigen::Index>(t.rows()),
                        static_cast<Eigen::Index>(t.cols()));
}

MapMatrix as_matrix(std::vector<double>& v, std::size_t rows, std::size_t cols) {
  return MapMatrix(v.data(), static_cast<Eigen::Index>(rows), static_cast<Eigen::Index>(cols));
}

void require_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2) {
    throw ShapeError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Tensor

Tensor::Tensor() : node_(std::make_shared<TensorNode>()) {
  node_->values.assign(1, 0.0);
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : node_(std::make_shared<TensorNode>()) {
  if (product(shape) != values.size()) {
    throw ShapeError("tensor of shape " + shape_str(shape) + " given " +
                     std::to_string(values.size()) + " values");
  }
  node_->shape = std::move(shape);
  node_->values = std::move(values);
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const std::size_t n = product(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor({}, {value}, requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return Tensor({rows, cols}, std::move(values), requires_grad);
}

std::size_t Tensor::rows() const {
  return rank() == 2 ? node_->shape[0] : 1;
}

std::size_t Tensor::cols() const {
  if (rank() == 0) return 1;
  return node_->shape.back();
}

double Tensor::item() const {
  if (size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->values[0];
}

std::span<const double> Tensor::grad() const {
  if (node_->grad.empty()) node_->grad.assign(node_->values.size(), 0.0);
  return node_->grad;
}

std::span<double> Tensor::mutable_grad() { return grad_of(*node_); }

Tensor Tensor::clone() const {
  return Tensor(node_->shape, node_->values, node_->requires_grad);
}

// Builds an op result and records its backward function when a graph is
// current and any input requires a gradient.
Tensor make_result(Shape shape, std::vector<double> values,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorNode&)> backward_fn) {
  auto node = std::make_shared<TensorNode>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  if (g_finite_checks) {
    for (double v : node->values) {
      if (!std::isfinite(v)) throw Error("numeric_error", "non-finite value produced by op");
    }
  }
  Graph* graph = Graph::current();
  const bool needs_grad =
      graph != nullptr &&
      std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
  if (needs_grad) {
    node->requires_grad = true;
    node->graph = graph;
    graph->record(node, std::move(backward_fn));
  }
  return Tensor(std::move(node));
}

// ---------------------------------------------------------------------------
// Graph

Graph::~Graph() {
  if (g_current_graph == this) g_current_graph = nullptr;
}

Graph::Scope::Scope(Graph& g) : previous_(g_current_graph) { g_current_graph = &g; }
Graph::Scope::~Scope() { g_current_graph = previous_; }

Graph* Graph::current() { return g_current_graph; }

Graph::NoGradScope::NoGradScope() : previous_(g_current_graph) { g_current_graph = nullptr; }
Graph::NoGradScope::~NoGradScope() { g_current_graph = previous_; }

void Graph::record(std::shared_ptr<TensorNode> output, std::function<void(TensorNode&)> fn) {
  records_.push_back({std::move(output), std::move(fn)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  auto& seed = grad_of(*loss.node());
  seed[0] += 1.0;
  for (auto it = records_.rbegin(); it != records_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it->output);
  }
  records_.clear();
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be a scalar, got shape " + shape_str(loss.shape()));
  }
  Graph* g = loss.node()->graph;
  if (g == nullptr) {
    if (loss.requires_grad()) {
      grad_of(*loss.node())[0] += 1.0;  // a leaf loss
      return;
    }
    throw Error("graph_error", "backward: loss was not recorded on a graph");
  }
  g->backward(loss);
}

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul");
  require_rank2(b, "matmul");
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " are incompatible");
  }
  const std::size_t m = a.rows(), n = b.cols();
  std::vector<double> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a) * as_matrix(b);
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, n](TensorNode& o) {
    const ConstMapMatrix dy(o.grad.data(), static_cast<Eigen::Index>(m),
                            static_cast<Eigen::Index>(n));
    const auto k = an->shape[1];
    if (an->requires_grad) {
      as_matrix(grad_of(*an), m, k).noalias() +=
          dy * ConstMapMatrix(bn->values.data(), static_cast<Eigen::Index>(k),
                              static_cast<Eigen::Index>(n))
                   .transpose();
    }
    if (bn->requires_grad) {
      as_matrix(grad_of(*bn), k, n).noalias() +=
          ConstMapMatrix(an->values.data(), static_cast<Eigen::Index>(m),
                         static_cast<Eigen::Index>(k))
              .transpose() *
          dy;
    }
  });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_rank2(a, "matmul_nt");
  require_rank2(b, "matmul_nt");
  if (a.cols() != b.cols()) {
    throw ShapeError("matmul_nt: shapes " + shape_str(a.shape()) + " and " +
                     shape_str(b.shape()) + " are incompatible");
  }
  const std::size_t m = a.rows(), n = b.rows(), k = a.cols();
  std::vector<double> out(m * n);
  as_matrix(out, m, n).noalias() = as_matrix(a) * as_matrix(b).transpose();
  auto an = a.node(), bn = b.node();
  return make_result({m, n}, std::move(out), {&a, &b}, [an, bn, m, n, k](TensorNode& o) {
    const ConstMapMatrix dy(o.grad.data(), static_cast<Eigen::Index>(m),
                            static_cast<Eigen::Index>(n));
    if (an->requires_grad) {
      as_matrix(grad_of(*an), m, k).noalias() +=
          dy * ConstMapMatrix(bn->values.data(), static_cast<Eigen::Index>(n),
                              static_cast<Eigen::Index>(k));
    }
    if (bn->requires_grad) {
      as_matrix(grad_of(*bn), n, k).noalias() +=
          dy.transpose() * ConstMapMatrix(an->values.data(), static_cast<Eigen::Index>(m),
                                          static_cast<Eigen::Index>(k));
    }
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto an = a.node(), bn = b.node();
  if (a.shape() == b.shape()) {
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] + b.values()[i];
    return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode& o) {
      if (an->requires_grad) {
        auto& g = grad_of(*an);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      }
      if (bn->requires_grad) {
        auto& g = grad_of(*bn);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
      }
    });
  }
  const bool row_vector = b.rank() == 1 || (b.rank() == 2 && b.rows() == 1);
  if (a.rank() != 2 || !row_vector || b.cols() != a.cols()) {
    throw ShapeError("add: cannot broadcast " + shape_str(b.shape()) + " onto " +
                     shape_str(a.shape()));
  }
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(a.size());
  const auto av = a.values();
  const auto bv = b.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] = av[r * cols + c] + bv[c];
  }
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn, rows, cols](TensorNode& o) {
    if (an->requires_grad) {
      auto& g = grad_of(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_of(*bn);
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) g[c] += o.grad[r * cols + c];
      }
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
  std::vector<double> out(a.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * b.values()[i];
  auto an = a.node(), bn = b.node();
  return make_result(a.shape(), std::move(out), {&a, &b}, [an, bn](TensorNode& o) {
    if (an->requires_grad) {
      auto& g = grad_of(*an);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * bn->values[i];
    }
    if (bn->requires_grad) {
      auto& g = grad_of(*bn);
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * an->values[i];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  std::vector<double> out(a.values().begin(), a.values().end());
  for (auto& v : out) v *= s;
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, s](TensorNode& o) {
    auto& g = grad_of(*an);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += s * o.grad[i];
  });
}

Tensor sum(const Tensor& a) {
  const double total = std::accumulate(a.values().begin(), a.values().end(), 0.0);
  auto an = a.node();
  return make_result({}, {total}, {&a}, [an](TensorNode& o) {
    auto& g = grad_of(*an);
    for (auto& v : g) v += o.grad[0];
  });
}

Tensor softmax_rows(const Tensor& a) {
  const std::size_t rows = a.rows(), cols = a.cols();
  std::vector<double> out(a.size());
  const auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = av.data() + r * cols;
    double* y = out.data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (y[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) y[c] /= z;
  }
  auto an = a.node();
  return make_result(a.shape(), std::move(out), {&a}, [an, rows, cols](TensorNode& o) {
    auto& g = grad_of(*an);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* y = o.values.data() + r * cols;
      const double* dy = o.grad.data() + r * cols;
      double dot = 0.0;
      for (std::size_t c = 0; c < cols; ++c) dot += dy[c] * y[c];
      for (std::size_t c = 0; c < cols; ++c) g[r * cols + c] += y[c] * (dy[c] - dot);
    }
  });
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  const std::size_t rows = x.rows(), cols = x.cols();
  if (gamma.size() != cols || beta.size() != cols) {
    throw ShapeError("layer_norm: gamma/beta of size " + std::to_string(gamma.size()) + "/" +
                     std::to_string(beta.size()) + " for rows of width " + std::to_string(cols));
  }
  std::vector<double> out(x.size());
  auto xhat = std::make_shared<std::vector<double>>(x.size());
  auto inv_std = std::make_shared<std::vector<double>>(rows);
  const auto xv = x.values();
  const auto gv = gamma.values();
  const auto bv = beta.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = xv.data() + r * cols;
    double mean = 0.0;
    for (std::size_t c = 0; c < cols; ++c) mean += xr[c];
    mean /= static_cast<double>(cols);
    double var = 0.0;
    for (std::size_t c = 0; c < cols; ++c) var += (xr[c] - mean) * (xr[c] - mean);
    var /= static_cast<double>(cols);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::size_t c = 0; c < cols; ++c) {
      const double h = (xr[c] - mean) * is;
      (*xhat)[r * cols + c] = h;
      out[r * cols + c] = gv[c] * h + bv[c];
    }
  }
  auto xn = x.node(), gn = gamma.node(), bn = beta.node();
  return make_result(x.shape(), std::move(out), {&x, &gamma, &beta},
                     [xn, gn, bn, xhat, inv_std, rows, cols](TensorNode& o) {
                       const auto n = static_cast<double>(cols);
                       if (gn->requires_grad || bn->requires_grad) {
                         auto& gg = grad_of(*gn);
                         auto& gb = grad_of(*bn);
                         for (std::size_t r = 0; r < rows; ++r) {
                           for (std::size_t c = 0; c < cols; ++c) {
                             gg[c] += o.grad[r * cols + c] * (*xhat)[r * cols + c];
                             gb[c] += o.grad[r * cols + c];
                           }
                         }
                       }
                       if (!xn->requires_grad) return;
                       auto& gx = grad_of(*xn);
                       for (std::size_t r = 0; r < rows; ++r) {
                         double mean_d = 0.0, mean_dh = 0.0;
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double d = o.grad[r * cols + c] * gn->values[c];
                           mean_d += d;
                           mean_dh += d * (*xhat)[r * cols + c];
                         }
                         mean_d /= n;
                         mean_dh /= n;
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double d = o.grad[r * cols + c] * gn->values[c];
                           gx[r * cols + c] += (*inv_std)[r] *
                                               (d - mean_d - (*xhat)[r * cols + c] * mean_dh);
                         }
                       }
                     });
}

Tensor gelu(const Tensor& x) {
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  constexpr double kInvSqrt2Pi = 0.39894228040143267794;
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i] = 0.5 * xv[i] * (1.0 + std::erf(xv[i] * kInvSqrt2));
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {&x}, [xn](TensorNode& o) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xn->values[i];
      const double d =
          0.5 * (1.0 + std::erf(v * kInvSqrt2)) + v * kInvSqrt2Pi * std::exp(-0.5 * v * v);
      g[i] += o.grad[i] * d;
    }
  });
}

Tensor embedding_lookup(const Tensor& table, std::span<const int> ids) {
  require_rank2(table, "embedding_lookup");
  const std::size_t vocab = table.rows(), dim = table.cols();
  std::vector<double> out(ids.size() * dim);
  const auto tv = table.values();
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab) {
      throw Error("index_error", "embedding id " + std::to_string(ids[i]) +
                                     " out of range for table of " + std::to_string(vocab) +
                                     " rows");
    }
    std::copy_n(tv.data() + static_cast<std::size_t>(ids[i]) * dim, dim, out.data() + i * dim);
  }
  auto tn = table.node();
  std::vector<int> id_copy(ids.begin(), ids.end());
  return make_result({ids.size(), dim}, std::move(out), {&table},
                     [tn, id_copy = std::move(id_copy), dim](TensorNode& o) {
                       auto& g = grad_of(*tn);
                       for (std::size_t i = 0; i < id_copy.size(); ++i) {
                         double* row = g.data() + static_cast<std::size_t>(id_copy[i]) * dim;
                         for (std::size_t c = 0; c < dim; ++c) row[c] += o.grad[i * dim + c];
                       }
                     });
}

Tensor dropout(const Tensor& x, double p, std::uint64_t seed) {
  if (!(p >= 0.0 && p < 1.0)) {
    throw ConfigError("dropout probability must lie in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) return x;
  Rng rng(seed);
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.size());
  std::vector<double> out(x.size());
  const auto xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) {
    (*mask)[i] = rng.uniform() < p ? 0.0 : keep_scale;
    out[i] = xv[i] * (*mask)[i];
  }
  auto xn = x.node();
  return make_result(x.shape(), std::move(out), {&x}, [xn, mask](TensorNode& o) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * (*mask)[i];
  });
}

Tensor cross_entropy_with_ignore(const Tensor& logits, std::span<const int> targets,
                                 int ignore_id) {
  require_rank2(logits, "cross_entropy_with_ignore");
  const std::size_t rows = logits.rows(), cols = logits.cols();
  if (targets.size() != rows) {
    throw ShapeError("cross_entropy_with_ignore: " + std::to_string(targets.size()) +
                     " targets for " + std::to_string(rows) + " rows");
  }
  auto probs = std::make_shared<std::vector<double>>(logits.size());
  const auto lv = logits.values();
  double total = 0.0;
  std::size_t counted = 0;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = lv.data() + r * cols;
    double* p = probs->data() + r * cols;
    const double mx = *std::max_element(x, x + cols);
    double z = 0.0;
    for (std::size_t c = 0; c < cols; ++c) z += (p[c] = std::exp(x[c] - mx));
    for (std::size_t c = 0; c < cols; ++c) p[c] /= z;
    if (targets[r] == ignore_id) continue;
    if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= cols) {
      throw Error("index_error", "target " + std::to_string(targets[r]) + " out of range for " +
                                     std::to_string(cols) + " classes");
    }
    // log-sum-exp form: -log p = log z + mx - x_t
    total += std::log(z) + mx - x[targets[r]];
    ++counted;
  }
  const double loss = counted == 0 ? 0.0 : total / static_cast<double>(counted);
  auto ln = logits.node();
  std::vector<int> t(targets.begin(), targets.end());
  return make_result({}, {loss}, {&logits},
                     [ln, probs, t = std::move(t), rows, cols, counted, ignore_id](TensorNode& o) {
                       auto& g = grad_of(*ln);
                       if (counted == 0) return;
                       const double s = o.grad[0] / static_cast<double>(counted);
                       for (std::size_t r = 0; r < rows; ++r) {
                         if (t[r] == ignore_id) continue;
                         for (std::size_t c = 0; c < cols; ++c) {
                           const double indicator = static_cast<int>(c) == t[r] ? 1.0 : 0.0;
                           g[r * cols + c] += s * ((*probs)[r * cols + c] - indicator);
                         }
                       }
                     });
}

Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_rows");
  const std::size_t cols = x.cols();
  if (start + count > x.rows()) {
    throw ShapeError("slice_rows: rows [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(x.values().begin() + static_cast<std::ptrdiff_t>(start * cols),
                          x.values().begin() + static_cast<std::ptrdiff_t>((start + count) * cols));
  auto xn = x.node();
  return make_result({count, cols}, std::move(out), {&x}, [xn, start, cols](TensorNode& o) {
    auto& g = grad_of(*xn);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[start * cols + i] += o.grad[i];
  });
}

Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count) {
  require_rank2(x, "slice_cols");
  const std::size_t rows = x.rows(), cols = x.cols();
  if (start + count > cols) {
    throw ShapeError("slice_cols: cols [" + std::to_string(start) + "," +
                     std::to_string(start + count) + ") outside " + shape_str(x.shape()));
  }
  std::vector<double> out(rows * count);
  const auto xv = x.values();
  for (std::size_t r = 0; r < rows; ++r) {
    std::copy_n(xv.data() + r * cols + start, count, out.data() + r * count);
  }
  auto xn = x.node();
  return make_result({rows, count}, std::move(out), {&x},
                     [xn, rows, cols, start, count](TensorNode& o) {
                       auto& g = grad_of(*xn);
                       for (std::size_t r = 0; r < rows; ++r) {
                         for (std::size_t c = 0; c < count; ++c) {
                           g[r * cols + start + c] += o.grad[r * count + c];
                         }
                       }
                     });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_rows: no inputs");
  const std::size_t cols = parts[0].cols();
  std::size_t rows = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_rows");
    if (p.cols() != cols) throw ShapeError("concat_rows: column counts differ");
    rows += p.rows();
  }
  std::vector<double> out;
  out.reserve(rows * cols);
  std::vector<std::shared_ptr<TensorNode>> nodes;
  bool any_grad = false;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    nodes.push_back(p.node());
    any_grad = any_grad || p.requires_grad();
  }
  // make_result inspects at most the first input for requires_grad; pass a
  // representative that requires grad when any part does.
  const Tensor* rep = &parts[0];
  for (const auto& p : parts) {
    if (p.requires_grad()) {
      rep = &p;
      break;
    }
  }
  return make_result({rows, cols}, std::move(out), {rep}, [nodes](TensorNode& o) {
    std::size_t offset = 0;
    for (const auto& n : nodes) {
      if (n->requires_grad) {
        auto& g = grad_of(*n);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[offset + i];
      }
      offset += n->values.size();
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  const std::size_t rows = parts[0].rows();
  std::size_t cols = 0;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != rows) throw ShapeError("concat_cols: row counts differ");
    cols += p.cols();
  }
  std::vector<double> out(rows * cols);
  std::vector<std::shared_ptr<TensorNode>> nodes;
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const std::size_t pc = p.cols();
    for (std::size_t r = 0; r < rows; ++r) {
      std::copy_n(p.values().data() + r * pc, pc, out.data() + r * cols + offset);
    }
    offset += pc;
    nodes.push_back(p.node());
  }
  const Tensor* rep = &parts[0];
  for (const auto& p : parts) {
    if (p.requires_grad()) {
      rep = &p;
      break;
    }
  }
  return make_result({rows, cols}, std::move(out), {rep}, [nodes, rows, cols](TensorNode& o) {
    std::size_t off = 0;
    for (const auto& n : nodes) {
      const std::size_t pc = n->shape[1];
      if (n->requires_grad) {
        auto& g = grad_of(*n);
        for (std::size_t r = 0; r < rows; ++r) {
          for (std::size_t c = 0; c < pc; ++c) g[r * pc + c] += o.grad[r * cols + off + c];
        }
      }
      off += pc;
    }
  });
}

Tensor packed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> offsets, std::size_t heads,
                        std::span<const std::uint8_t> key_mask) {
  require_rank2(q, "packed_attention");
  if (q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("packed_attention: q/k/v shapes differ");
  }
  const std::size_t total = q.rows(), dim = q.cols();
  if (heads == 0 || dim % heads != 0) {
    throw ShapeError("packed_attention: width " + std::to_string(dim) +
                     " not divisible by " + std::to_string(heads) + " heads");
  }
  if (offsets.empty() || offsets.front() != 0 || offsets.back() != total ||
      key_mask.size() != total) {
    throw ShapeError("packed_attention: offsets/mask do not cover " + std::to_string(total) +
                     " rows");
  }
  const std::size_t hd = dim / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(hd));
  const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(dim));

  // Attention probabilities per (sequence, head), kept for the backward pass.
  auto probs = std::make_shared<std::vector<RowMatrix>>();
  std::vector<double> out(total * dim, 0.0);
  const std::size_t n_seq = offsets.size() - 1;
  probs->reserve(n_seq * heads);
  for (std::size_t s = 0; s < n_seq; ++s) {
    const std::size_t begin = offsets[s];
    const auto len = static_cast<Eigen::Index>(offsets[s + 1] - begin);
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t base = begin * dim + h * hd;
      ConstStridedMap qs(q.values().data() + base, len, static_cast<Eigen::Index>(hd), stride);
      ConstStridedMap ks(k.values().data() + base, len, static_cast<Eigen::Index>(hd), stride);
      ConstStridedMap vs(v.values().data() + base, len, static_cast<Eigen::Index>(hd), stride);
      RowMatrix scores = (qs * ks.transpose()) * inv_sqrt;
      for (Eigen::Index i = 0; i < len; ++i) {
        double mx = -std::numeric_limits<double>::infinity();
        for (Eigen::Index j = 0; j < len; ++j) {
          if (key_mask[begin + static_cast<std::size_t>(j)]) mx = std::max(mx, scores(i, j));
        }
        double z = 0.0;
        for (Eigen::Index j = 0; j < len; ++j) {
          const bool keep = key_mask[begin + static_cast<std::size_t>(j)];
          scores(i, j) = keep ? std::exp(scores(i, j) - mx) : 0.0;
          z += scores(i, j);
        }
        if (z > 0.0) scores.row(i) /= z;
      }
      StridedMap os(out.data() + base, len, static_cast<Eigen::Index>(hd), stride);
      os.noalias() = scores * vs;
      probs->push_back(std::move(scores));
    }
  }

  auto qn = q.node(), kn = k.node(), vn = v.node();
  std::vector<std::size_t> offs(offsets.begin(), offsets.end());
  return make_result(
      q.shape(), std::move(out), {&q, &k, &v},
      [qn, kn, vn, probs, offs = std::move(offs), heads, hd, dim, inv_sqrt](TensorNode& o) {
        const auto stride = Eigen::OuterStride<>(static_cast<Eigen::Index>(dim));
        auto& gq = grad_of(*qn);
        auto& gk = grad_of(*kn);
        auto& gv = grad_of(*vn);
        std::size_t idx = 0;
        for (std::size_t s = 0; s + 1 < offs.size(); ++s) {
          const std::size_t begin = offs[s];
          const auto len = static_cast<Eigen::Index>(offs[s + 1] - begin);
          for (std::size_t h = 0; h < heads; ++h, ++idx) {
            const std::size_t base = begin * dim + h * hd;
            const auto ehd = static_cast<Eigen::Index>(hd);
            const RowMatrix& p = (*probs)[idx];
            ConstStridedMap dout(o.grad.data() + base, len, ehd, stride);
            ConstStridedMap qs(qn->values.data() + base, len, ehd, stride);
            ConstStridedMap ks(kn->values.data() + base, len, ehd, stride);
            ConstStridedMap vs(vn->values.data() + base, len, ehd, stride);
            StridedMap(gv.data() + base, len, ehd, stride).noalias() += p.transpose() * dout;
            RowMatrix dp = dout * vs.transpose();
            for (Eigen::Index i = 0; i < len; ++i) {
              const double dot = dp.row(i).dot(p.row(i));
              for (Eigen::Index j = 0; j < len; ++j) dp(i, j) = p(i, j) * (dp(i, j) - dot);
            }
            StridedMap(gq.data() + base, len, ehd, stride).noalias() += (dp * ks) * inv_sqrt;
            StridedMap(gk.data() + base, len, ehd, stride).noalias() +=
                (dp.transpose() * qs) * inv_sqrt;
          }
        }
      });
}

// ---------------------------------------------------------------------------
// ParameterSet

void ParameterSet::add(std::string name, Tensor tensor) {
  if (contains(name)) throw Error("parameter_error", "duplicate parameter '" + name + "'");
  entries_.emplace_back(std::move(name), std::move(tensor));
}

bool ParameterSet::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const auto& e) { return e.first == name; });
}

const Tensor& ParameterSet::at(const std::string& name) const {
  for (const auto& [n, t] : entries_) {
    if (n == name) return t;
  }
  throw Error("parameter_error", "no parameter named '" + name + "'");
}

Tensor& ParameterSet::at(const std::string& name) {
  return const_cast<Tensor&>(static_cast<const ParameterSet&>(*this).at(name));
}

std::size_t ParameterSet::num_elements() const {
  std::size_t n = 0;
  for (const auto& [_, t] : entries_) n += t.size();
  return n;
}

void ParameterSet::zero_grad() {
  for (auto& [_, t] : entries_) t.zero_grad();
}

ParameterSet ParameterSet::clone() const {
  ParameterSet out;
  for (const auto& [n, t] : entries_) out.add(n, t.clone());
  return out;
}

bool ParameterSet::values_equal(const ParameterSet& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& [na, ta] = entries_[i];
    const auto& [nb, tb] = other.entries_[i];
    if (na != nb || ta.shape() != tb.shape()) return false;
    if (std::memcmp(ta.values().data(), tb.values().data(), ta.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

namespace {

constexpr std::string_view kCheckpointMagic = "DEIDCKPT 1";

void append_le_f64(std::string& out, std::span<const double> values) {
  for (double v : values) {
    auto bits = std::bit_cast<std::uint64_t>(v);
    for (int b = 0; b < 8; ++b) out += static_cast<char>((bits >> (8 * b)) & 0xFF);
  }
}

}  // namespace

std::string serialize_parameters(const ParameterSet& params, const std::string& metadata) {
  if (metadata.find('\n') != std::string::npos) {
    throw Error("checkpoint_error", "checkpoint metadata must be a single line");
  }
  std::string out;
  out += kCheckpointMagic;
  out += '\n';
  out += "meta " + metadata + '\n';
  out += "tensors " + std::to_string(params.size()) + '\n';
  for (const auto& [name, t] : params.entries()) {
    out += "tensor " + name + " f64 " + std::to_string(t.rank());
    for (auto d : t.shape()) out += ' ' + std::to_string(d);
    out += '\n';
    append_le_f64(out, t.values());
    out += '\n';
  }
  return out;
}

ParameterSet deserialize_parameters(std::string_view bytes, std::string* metadata) {
  std::size_t pos = 0;
  auto read_line = [&]() -> std::string_view {
    const std::size_t nl = bytes.find('\n', pos);
    if (nl == std::string_view::npos) throw Error("checkpoint_error", "truncated checkpoint");
    auto line = bytes.substr(pos, nl - pos);
    pos = nl + 1;
    return line;
  };
  if (read_line() != kCheckpointMagic) throw Error("checkpoint_error", "bad checkpoint header");
  const auto meta = read_line();
  if (meta.substr(0, 5) != "meta ") throw Error("checkpoint_error", "missing meta line");
  if (metadata) *metadata = std::string(meta.substr(5));
  const auto count_line = read_line();
  if (count_line.substr(0, 8) != "tensors ") throw Error("checkpoint_error", "missing tensor count");
  const std::size_t count = std::stoull(std::string(count_line.substr(8)));
  ParameterSet params;
  for (std::size_t i = 0; i < count; ++i) {
    std::istringstream header{std::string(read_line())};
    std::string keyword, name, dtype;
    std::size_t rank = 0;
    header >> keyword >> name >> dtype >> rank;
    if (keyword != "tensor" || !header) throw Error("checkpoint_error", "bad tensor header");
    Shape shape(rank);
    for (auto& d : shape) header >> d;
    std::size_t width = 0;
    if (dtype == "f64") width = 8;
    else if (dtype == "f32") width = 4;
    else throw Error("checkpoint_error", "unsupported dtype '" + dtype + "'");
    const std::size_t n = product(shape);
    if (pos + n * width + 1 > bytes.size()) throw Error("checkpoint_error", "truncated tensor data");
    std::vector<double> values(n);
    for (std::size_t j = 0; j < n; ++j) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < width; ++b) {
        bits |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + j * width + b]))
                << (8 * b);
      }
      values[j] = width == 8 ? std::bit_cast<double>(bits)
                             : static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)));
    }
    pos += n * width;
    if (bytes[pos] != '\n') throw Error("checkpoint_error", "tensor '" + name + "' size mismatch");
    ++pos;
    params.add(name, Tensor(std::move(shape), std::move(values), true));
  }
  return params;
}

// ---------------------------------------------------------------------------
// Gradient check

GradCheckResult grad_check(const std::function<Tensor()>& f, ParameterSet& params,
                           const GradCheckOptions& options) {
  GradCheckResult result;
  params.zero_grad();
  double base_value = 0.0;
  {
    Graph graph;
    Graph::Scope scope(graph);
    const Tensor loss = f();
    base_value = loss.item();
    backward(loss);
  }
  std::vector<std::vector<double>> analytic;
  for (const auto& [_, t] : params.entries()) {
    analytic.emplace_back(t.grad().begin(), t.grad().end());
  }
  // Without a current graph, f() runs in inference mode.
  auto eval = [&]() { return f().item(); };
  if (eval() != base_value) {
    result.deterministic = false;
    result.max_relative_error = std::numeric_limits<double>::infinity();
    return result;
  }

  Rng rng(options.seed);
  for (std::size_t p = 0; p < params.size(); ++p) {
    auto& [name, tensor] = params.entries()[p];
    auto values = tensor.mutable_values();
    std::vector<std::size_t> indices;
    if (options.max_elements_per_tensor == 0 || values.size() <= options.max_elements_per_tensor) {
      indices.resize(values.size());
      std::iota(indices.begin(), indices.end(), std::size_t{0});
    } else {
      std::vector<std::size_t> nonzero;
      for (std::size_t i = 0; i < values.size(); ++i) {
        if (analytic[p][i] != 0.0) nonzero.push_back(i);
      }
      rng.shuffle(nonzero);
      const std::size_t half = options.max_elements_per_tensor / 2;
      indices.assign(nonzero.begin(), nonzero.begin() + static_cast<std::ptrdiff_t>(
                                                          std::min(half, nonzero.size())));
      while (indices.size() < options.max_elements_per_tensor) {
        indices.push_back(static_cast<std::size_t>(rng.index(values.size())));
      }
    }
    for (std::size_t i : indices) {
      const double original = values[i];
      values[i] = original + options.eps;
      const double plus = eval();
      values[i] = original - options.eps;
      const double minus = eval();
      values[i] = original;
      const double numeric = (plus - minus) / (2.0 * options.eps);
      const double a = analytic[p][i];
      const double denom = std::max({std::abs(a), std::abs(numeric), 1e-8});
      const double err = std::abs(a - numeric) / denom;
      ++result.elements_checked;
      if (err > result.max_relative_error || !std::isfinite(err)) {
        result.max_relative_error = err;
        result.worst_parameter = name;
        result.worst_index = i;
      }
    }
  }
  params.zero_grad();
  return result;
}

}  // namespace deid::nn
