#pragma once

// Minimal matrix-valued reverse-mode differentiation. A Tape records nodes
// in creation order; backward() walks them in reverse, each node pushing its
// gradient into its parents. Ops are coarse (whole-matrix) so a forward pass
// of the predictor creates tens of nodes, not thousands.

#include <Eigen/Dense>
#include <Eigen/SparseCore>
#include <deque>
#include <functional>
#include <span>
#include <vector>

namespace trafficfuse::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using SparseRowMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

class Tape;

class Var {
 public:
  Var() = default;
  Var(Tape* tape, int id) : tape_(tape), id_(id) {}

  const Matrix& value() const;
  const Matrix& grad() const;
  int id() const { return id_; }
  Tape* tape() const { return tape_; }
  Eigen::Index rows() const { return value().rows(); }
  Eigen::Index cols() const { return value().cols(); }

 private:
  Tape* tape_ = nullptr;
  int id_ = -1;
};

class Tape {
 public:
  struct Node {
    Matrix value;
    Matrix grad;
    bool needs_grad = false;
    std::function<void()> backward;
  };

  /// Differentiable input; its gradient is available after backward().
  Var variable(Matrix value);
  /// Non-differentiable input.
  Var constant(Matrix value);

  /// Creates a result node. `backward` is invoked with the node's gradient
  /// already accumulated; it is skipped when no parent needs a gradient.
  Var record(Matrix value, std::initializer_list<Var> parents, std::function<void(const Matrix&)> backward);

  /// Seeds d(out)/d(out) = 1 for a 1x1 output and back-propagates.
  void backward(Var out);

  Node& node(int id) { return nodes_[static_cast<std::size_t>(id)]; }
  const Node& node(int id) const { return nodes_[static_cast<std::size_t>(id)]; }
  /// Adds `g` into the gradient of `v` if it needs one.
  void accumulate(Var v, const Matrix& g);
  bool needs_grad(Var v) const { return node(v.id()).needs_grad; }
  std::size_t size() const { return nodes_.size(); }

 private:
  std::deque<Node> nodes_;
};

Var matmul(Var a, Var b);
Var add(Var a, Var b);
Var add3(Var a, Var b, Var c);
/// a (r x c) plus a broadcast 1 x c row.
Var add_row(Var a, Var row);
/// Applies `op` (n x n) to each of `blocks` consecutive n-row blocks of x.
/// `op` is held by reference and must outlive the tape.
Var graph_mix(const SparseRowMatrix& op, Var x, int blocks);
/// Row-wise LayerNorm with affine gamma, beta (1 x c each).
Var layer_norm(Var x, Var gamma, Var beta, double eps = 1e-5);
/// Exact GELU: x * Phi(x).
Var gelu(Var x);
/// out.row(r) = x.row(perm[r]).
Var permute_rows(Var x, std::vector<int> perm);
/// Regroups a (groups*len) x c matrix to groups x (len*c), row-major vec.
Var flatten_groups(Var x, int groups);
/// Scaled dot-product self-attention within each group of `len` consecutive
/// rows, `heads` heads over the column dimension. If `weights_out` is given
/// it receives the attention matrices, group-major then head-major.
Var grouped_attention(Var q, Var k, Var v, int groups, int len, int heads,
                      std::vector<Matrix>* weights_out = nullptr);

double gelu_value(double x);

}  // namespace trafficfuse::ad
