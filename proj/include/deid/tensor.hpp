#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace deid::nn {

using Shape = std::vector<std::size_t>;

class Graph;

struct TensorNode {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until a gradient is accumulated
  bool requires_grad = false;
  Graph* graph = nullptr;  // graph that recorded this node, if any
};

// Shared handle to a dense row-major tensor of rank 0, 1 or 2. Copies share
// storage; use clone() for a deep copy.
class Tensor {
 public:
  Tensor();
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);

  const Shape& shape() const { return node_->shape; }
  std::size_t rank() const { return node_->shape.size(); }
  std::size_t size() const { return node_->values.size(); }
  // Rank 0 -> 1x1, rank 1 [n] -> 1xn.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const { return node_->values; }
  std::span<double> mutable_values() { return node_->values; }
  double item() const;
  double at(std::size_t r, std::size_t c) const { return node_->values[r * cols() + c]; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on) { node_->requires_grad = on; }
  bool has_grad() const { return !node_->grad.empty(); }
  // Zero-filled view when no gradient has been accumulated yet.
  std::span<const double> grad() const;
  std::span<double> mutable_grad();
  void zero_grad() { node_->grad.clear(); }

  Tensor clone() const;
  bool same_node(const Tensor& other) const { return node_ == other.node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<TensorNode> node) : node_(std::move(node)) {}
  friend Tensor make_result(Shape, std::vector<double>, std::initializer_list<const Tensor*>,
                            std::function<void(TensorNode&)>);

  std::shared_ptr<TensorNode> node_;
};

// Records differentiable ops in execution order. Ops record onto the graph
// made current by a Scope on the calling thread; with no current graph ops
// run in inference mode and record nothing.
class Graph {
 public:
  Graph() = default;
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;
  ~Graph();

  class Scope {
   public:
    explicit Scope(Graph& g);
    ~Scope();
    Scope(const Scope&) = delete;
    Scope& operator=(const Scope&) = delete;

   private:
    Graph* previous_;
  };

  static Graph* current();

  // Suspends recording on this thread (inference inside a training scope).
  class NoGradScope {
   public:
    NoGradScope();
    ~NoGradScope();
    NoGradScope(const NoGradScope&) = delete;
    NoGradScope& operator=(const NoGradScope&) = delete;

   private:
    Graph* previous_;
  };

  std::size_t size() const { return records_.size(); }
  void clear() { records_.clear(); }

  // Seeds d(loss)/d(loss) = 1, runs the recorded backward functions in reverse
  // order, then clears the graph.
  void backward(const Tensor& loss);

  void record(std::shared_ptr<TensorNode> output, std::function<void(TensorNode&)> fn);

 private:
  struct Record {
    std::shared_ptr<TensorNode> output;
    std::function<void(TensorNode&)> backward;
  };
  std::vector<Record> records_;
};

// Backward through the graph that recorded `loss`. Throws ShapeError for a
// non-scalar loss.
void backward(const Tensor& loss);

// Finite-value checking after every op (on by default in debug builds).
void set_finite_checks(bool on);
bool finite_checks();

// ---------------------------------------------------------------------------
// Ops

Tensor matmul(const Tensor& a, const Tensor& b);     // [m,k] x [k,n]
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // [m,k] x [n,k]^T
// Same shape, or b of rank 1 / shape [1,n] broadcast over the rows of a.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, double s);
Tensor sum(const Tensor& a);  // scalar
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-5);
Tensor gelu(const Tensor& x);
Tensor embedding_lookup(const Tensor& table, std::span<const int> ids);
// Inverted dropout: kept units are scaled by 1/(1-p). Identity when p == 0.
Tensor dropout(const Tensor& x, double p, std::uint64_t seed);
// Mean negative log-likelihood over rows whose target != ignore_id. With
// every row ignored the loss is 0 and all gradients are 0.
Tensor cross_entropy_with_ignore(const Tensor& logits, std::span<const int> targets,
                                 int ignore_id);
Tensor slice_rows(const Tensor& x, std::size_t start, std::size_t count);
Tensor slice_cols(const Tensor& x, std::size_t start, std::size_t count);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);

// Multi-head scaled dot-product attention over packed sequences. q, k, v are
// [T, d]; rows [offsets[s], offsets[s+1]) form sequence s and only attend
// within it. Keys with key_mask[t] == 0 are excluded.
Tensor packed_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                        std::span<const std::size_t> offsets, std::size_t heads,
                        std::span<const std::uint8_t> key_mask);

// ---------------------------------------------------------------------------
// Parameters and checkpoints

class ParameterSet {
 public:
  void add(std::string name, Tensor tensor);
  const Tensor& at(const std::string& name) const;
  Tensor& at(const std::string& name);
  bool contains(const std::string& name) const;

  std::size_t size() const { return entries_.size(); }
  std::size_t num_elements() const;
  const std::vector<std::pair<std::string, Tensor>>& entries() const { return entries_; }
  std::vector<std::pair<std::string, Tensor>>& entries() { return entries_; }

  void zero_grad();
  // Deep copy (values only; gradients dropped).
  ParameterSet clone() const;
  bool values_equal(const ParameterSet& other) const;

 private:
  std::vector<std::pair<std::string, Tensor>> entries_;
};

// Versioned header, a free-form metadata line, then per tensor: name, shape,
// dtype and raw little-endian values. Reload is bit-exact.
std::string serialize_parameters(const ParameterSet& params, const std::string& metadata = {});
ParameterSet deserialize_parameters(std::string_view bytes, std::string* metadata = nullptr);

// ---------------------------------------------------------------------------
// Gradient check

struct GradCheckOptions {
  double eps = 1e-4;
  // Elements checked per tensor (0 = all). Half are drawn from elements with a
  // nonzero analytic gradient.
  std::size_t max_elements_per_tensor = 0;
  std::uint64_t seed = 0;
};

struct GradCheckResult {
  double max_relative_error = 0.0;
  std::string worst_parameter;
  std::size_t worst_index = 0;
  std::size_t elements_checked = 0;
  // False when two evaluations at the same point differ (e.g. dropout left on).
  bool deterministic = true;

  bool passed(double tolerance) const {
    return deterministic && max_relative_error <= tolerance;
  }
};

// Central differences (f(p+eps) - f(p-eps)) / 2eps against autodiff.
// Relative error uses the denominator max(|a|, |b|, 1e-8).
GradCheckResult grad_check(const std::function<Tensor()>& f, ParameterSet& params,
                           const GradCheckOptions& options = {});

}  // namespace deid::nn
