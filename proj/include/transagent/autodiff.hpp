#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major-agnostic
// Eigen matrices. A Graph records operations in creation order, which is
// already a topological order, so backward() is a single reverse sweep.

#include <Eigen/Dense>

#include <cstddef>
#include <functional>
#include <span>
#include <vector>

namespace transagent {

using Matrix = Eigen::MatrixXd;

namespace ad {

/// Trainable tensor. Gradients accumulate across backward() calls until
/// zero_grad().
struct Parameter {
  Matrix value;
  Matrix grad;

  Parameter() = default;
  explicit Parameter(Matrix v) : value(std::move(v)), grad(Matrix::Zero(value.rows(), value.cols())) {}

  void zero_grad() { grad.setZero(value.rows(), value.cols()); }
};

class Graph;

/// Handle to a node of a Graph. Cheap to copy; only valid while the graph lives.
class Var {
 public:
  Var() = default;

  const Matrix& value() const;
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }
  double scalar() const { return value()(0, 0); }
  bool valid() const { return graph_ != nullptr; }
  Graph* graph() const { return graph_; }
  int id() const { return id_; }

 private:
  friend class Graph;
  Var(Graph* g, int id) : graph_(g), id_(id) {}

  Graph* graph_ = nullptr;
  int id_ = -1;
};

class Graph {
 public:
  Graph() { nodes_.reserve(1024); }
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  Var constant(Matrix m);
  /// Constant that aliases `m`; the caller keeps it alive and unchanged.
  Var constant_ref(const Matrix& m);
  Var param(Parameter& p);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and propagates to every
  /// Parameter reached, adding into Parameter::grad.
  void backward(Var out);

  const Matrix& value(int id) const {
    const Node& n = nodes_[static_cast<std::size_t>(id)];
    return n.ref != nullptr ? *n.ref : n.owned;
  }
  bool needs_grad(int id) const { return nodes_[static_cast<std::size_t>(id)].needs_grad; }
  Matrix& grad(int id);
  std::size_t size() const { return nodes_.size(); }

  using Backprop = std::function<void(Graph&, const Matrix& upstream)>;

  /// Records a derived node. `backprop` receives the node's upstream gradient
  /// and must push contributions to parents via accumulate().
  Var record(Matrix value, std::span<const Var> parents, Backprop backprop);
  void accumulate(Var v, const Matrix& g);

 private:
  struct Node {
    Matrix owned;
    const Matrix* ref = nullptr;
    Matrix grad;
    Parameter* param = nullptr;
    Backprop backprop;
    bool needs_grad = false;
  };

  std::vector<Node> nodes_;
};

inline const Matrix& Var::value() const { return graph_->value(id_); }

// Arithmetic.
Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var scale(Var a, double s);
Var hadamard(Var a, Var b);
/// a (R x C) + row (1 x C) broadcast over rows.
Var add_row(Var a, Var row);
/// Row i of x multiplied by w(i, 0); w is R x 1.
Var scale_rows(Var x, Var w);
Var transpose(Var a);

// Element-wise.
Var gelu(Var a);
Var exp(Var a);
Var abs(Var a);
Var square(Var a);

// Row-wise reductions and normalizations.
Var softmax_rows(Var a, bool causal = false);
Var log_softmax_rows(Var a);
Var layer_norm_rows(Var x, const Matrix& gamma, const Matrix& beta, double eps = 1e-5);
/// Throws NumericalError on a row whose norm is below `min_norm`.
Var l2_normalize_rows(Var x, double min_norm = 1e-12);
Var mean_rows(Var a);  // -> 1 x C
Var sum_cols(Var a);   // -> R x 1
Var mean_all(Var a);   // -> 1 x 1
Var sum_all(Var a);    // -> 1 x 1

// Structural.
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);

/// -mean_n logp(n, labels[n]).
Var nll_mean(Var logp, std::span<const int> labels);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(double s, Var a) { return scale(a, s); }

}  // namespace ad
}  // namespace transagent
