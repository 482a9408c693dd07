#pragma once

// Reverse-mode automatic differentiation over dense double matrices.
//
// A Var is a shared handle to a graph node holding a value and, after
// backward(), an accumulated gradient. Ops record a closure that pushes the
// output gradient into their parents. Leaves created with requires_grad=true
// act as parameters; everything else is an intermediate that is released
// together with the last Var referencing it.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gcd::ad {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Vec = Eigen::VectorXd;
using Index = Eigen::Index;

struct Node {
  Mat value;
  Mat grad;  // empty until something flows into it
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Mat&)> backward_fn;

  void add_grad(const Mat& g);
};

class Var {
 public:
  Var() = default;
  explicit Var(Mat value, bool requires_grad = false);

  static Var scalar(double v, bool requires_grad = false);

  const Mat& value() const { return node_->value; }
  // Direct value access for optimizers and tests; bypasses the graph.
  Mat& mutable_value() { return node_->value; }
  // Zero matrix of the value's shape when nothing has been accumulated.
  Mat grad() const;
  bool has_grad() const { return node_->grad.size() != 0; }
  bool requires_grad() const { return node_ && node_->requires_grad; }
  bool defined() const { return static_cast<bool>(node_); }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  void zero_grad() { node_->grad.resize(0, 0); }
  // Seeds d(self)/d(self) = 1 and propagates; self must be 1x1.
  void backward() const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Copy of the value with no history (stop-gradient).
Var detach(const Var& x);
Var constant(Mat value);

// --- linear algebra -------------------------------------------------------
Var matmul(const Var& a, const Var& b);
// a * b^T
Var matmul_nt(const Var& a, const Var& b);
Var transpose(const Var& a);

// --- elementwise ----------------------------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var exp(const Var& a);
Var log(const Var& a);
// log(1 + e^x), stable for large |x|
Var softplus(const Var& a);
Var gelu(const Var& a);

// Broadcast a 1 x n row over every row of a.
Var add_row(const Var& a, const Var& row);
Var mul_row(const Var& a, const Var& row);
// Row i multiplied by the constant w[i].
Var scale_rows(const Var& a, const Vec& w);

// --- reductions -----------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
// Column means: [m, n] -> [1, n]
Var mean_rows(const Var& a);
// Per-row sums: [m, n] -> [m, 1]
Var row_sum(const Var& a);
// sum_i w[i] * a(i, 0) for a column vector a
Var weighted_sum(const Var& a, const Vec& w);

// --- row-wise nonlinear ---------------------------------------------------
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var normalize_rows(const Var& a, double eps = 1e-12);
// Zero-mean unit-variance per row, no affine part.
Var layer_norm_rows(const Var& a, double eps = 1e-6);

// --- structural -----------------------------------------------------------
Var concat_rows(std::span<const Var> parts);
Var concat_cols(std::span<const Var> parts);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
// Row r of the output is row idx[r] of a (repeats allowed).
Var gather_rows(const Var& a, std::span<const Index> idx);
// Output element k (row-major) is input element src[k] (row-major).
Var gather(const Var& a, Index out_rows, Index out_cols, std::span<const Index> src);

// Multi-head self attention over n_seq independent sequences stacked as
// [n_seq * seq_len, 3 * d] (query | key | value). Returns [n_seq * seq_len, d].
// When cls_attn is non-null it receives, per sequence, the head-averaged
// attention of token 0 to tokens 1..seq_len-1 renormalised to sum to one.
Var self_attention(const Var& qkv, Index n_seq, Index seq_len, int heads, Mat* cls_attn = nullptr);

}  // namespace gcd::ad
