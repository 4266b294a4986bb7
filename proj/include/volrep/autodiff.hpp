#pragma once

// Reverse-mode automatic differentiation over dense row-major matrices.
//
// A Var is a handle to a graph node. Leaves created with parameter() keep
// their gradient across backward() calls until zero_grad(); every other node
// lives only as long as some Var (or a downstream node) refers to it.

#include <Eigen/Dense>

#include <cstdint>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

namespace volrep::ad {

using Matrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Index = Eigen::Index;

struct Node {
  Matrix value;
  Matrix grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(const Matrix&)> backward;

  void accumulate(const Matrix& g);
  bool has_grad() const { return grad.size() != 0; }
};

class Var {
 public:
  Var() = default;
  explicit Var(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  const Matrix& value() const { return node_->value; }
  Matrix& mutable_value() { return node_->value; }
  const Matrix& grad() const { return node_->grad; }
  Matrix& mutable_grad() { return node_->grad; }
  bool has_grad() const { return node_->has_grad(); }
  void zero_grad() { node_->grad.resize(0, 0); }
  bool requires_grad() const { return node_->requires_grad; }

  Index rows() const { return node_->value.rows(); }
  Index cols() const { return node_->value.cols(); }
  double item() const;

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Trainable leaf; accumulates gradient.
Var parameter(Matrix value);
/// Non-trainable leaf.
Var constant(Matrix value);
Var scalar(double v);

bool grad_enabled();

/// Disables graph recording in the current thread for its lifetime.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

/// Seeds d(root)/d(root) = 1 for a 1x1 root and propagates to every leaf
/// with requires_grad.
void backward(const Var& root);

// ---- elementwise / linear algebra -------------------------------------
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
/// a * s for a 1x1 Var s.
Var scale_by(const Var& a, const Var& s);
Var neg(const Var& a);
Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);
/// a (n x c) + b (1 x c) broadcast over rows.
Var add_rowvec(const Var& a, const Var& b);
/// a (n x c) scaled row-wise by b (n x 1).
Var mul_colvec(const Var& a, const Var& b);

Var exp(const Var& a);
Var log(const Var& a);
Var relu(const Var& a);
Var gelu(const Var& a);
Var sigmoid(const Var& a);
Var tanh(const Var& a);
Var square(const Var& a);

// ---- reductions -------------------------------------------------------
Var sum(const Var& a);
Var mean(const Var& a);
Var row_sum(const Var& a);

// ---- shape ------------------------------------------------------------
Var reshape(const Var& a, Index rows, Index cols);
Var slice_rows(const Var& a, Index start, Index count);
Var slice_cols(const Var& a, Index start, Index count);
Var concat_rows(const std::vector<Var>& parts);
Var concat_cols(const std::vector<Var>& parts);
/// out.flat[i] = a.flat[index[i]]; out is rows x cols.
Var gather_flat(const Var& a, std::shared_ptr<const std::vector<std::int32_t>> index, Index rows,
                Index cols);

struct RowPick {
  std::int32_t source;
  std::int32_t row;
};
/// Builds a matrix whose r-th row is sources[picks[r].source].row(picks[r].row).
Var gather_rows(const std::vector<Var>& sources, const std::vector<RowPick>& picks);
Var gather_rows(const Var& source, const std::vector<std::int32_t>& rows);

// ---- special ----------------------------------------------------------
/// Value passes through, gradient is blocked.
Var detach(const Var& a);
/// Copy with the diagonal overwritten by a constant; no gradient flows to it.
Var fill_diagonal(const Var& a, double value);
Var softmax_rows(const Var& a);
Var log_softmax_rows(const Var& a);
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_rows(const Var& a, double eps = 1e-12);

// ---- losses -----------------------------------------------------------
/// Mean softmax cross-entropy over rows.
Var cross_entropy(const Var& logits, const std::vector<int>& targets);
/// Mean over all elements of the positively weighted logistic loss.
/// pos_weight is a 1 x cols row (one weight per output column).
Var bce_with_logits(const Var& logits, const Matrix& targets, const Matrix& pos_weight);
Var mse(const Var& a, const Var& b);

// ---- attention --------------------------------------------------------
struct Segment {
  Index start;
  Index length;
};
/// Multi-head scaled dot-product attention applied independently within each
/// row segment. q, k, v are (T x width) with width divisible by heads.
Var segmented_attention(const Var& q, const Var& k, const Var& v, const std::vector<Segment>& segments,
                        int heads, bool causal);

inline Var operator+(const Var& a, const Var& b) { return add(a, b); }
inline Var operator-(const Var& a, const Var& b) { return sub(a, b); }
inline Var operator*(const Var& a, double s) { return scale(a, s); }
inline Var operator*(double s, const Var& a) { return scale(a, s); }

}  // namespace volrep::ad
