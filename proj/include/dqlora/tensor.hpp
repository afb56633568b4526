// SPDX-License-Identifier: Apache-2.0
//
// Dense tensors with a tape-based reverse-mode autodiff.
//
// Every tensor in this library is a rank-2 row-major matrix (vectors are
// 1×n rows or n×1 columns, scalars are 1×1). A Tensor is a shared handle:
// copies alias the same storage, so a parameter held by a model and the
// same parameter captured by a Graph node refer to one gradient buffer.
//
// Operations record themselves on a Graph only when at least one input
// requires a gradient; with all-constant inputs they simply compute.
#pragma once

#include <Eigen/Core>

#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace dqlora {

template <typename Scalar>
using MatrixT =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using VectorT = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Matrix = MatrixT<double>;
using Vector = VectorT<double>;
using Index = Eigen::Index;

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Matrix value, bool requires_grad = false);

  static Tensor zeros(Index rows, Index cols, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);
  /// A fresh tensor with a copy of `value` that never receives gradients.
  static Tensor constant(const Matrix& value);

  bool defined() const { return static_cast<bool>(storage_); }
  Index rows() const;
  Index cols() const;
  Index numel() const;

  const Matrix& value() const;
  /// Direct write access; bypasses the graph (optimizer updates, loading).
  Matrix& mutable_value();
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);

  bool has_grad() const;
  /// Gradient buffer; zeros of the value's shape until something accumulates.
  const Matrix& grad() const;
  /// Allocates the gradient buffer on first use.
  Matrix& grad_buffer() const;
  void zero_grad();

  /// True when both handles refer to the same storage.
  bool same_as(const Tensor& other) const { return storage_ == other.storage_; }

 private:
  struct Storage {
    Matrix value;
    Matrix grad;
    bool requires_grad = false;
  };
  std::shared_ptr<Storage> storage_;
};

/// Ordered record of differentiable operations. Nodes are appended in
/// execution order, which is a topological order of the data flow.
class Graph {
 public:
  using Rule = std::function<void(const Matrix& grad_output)>;

  /// Appends a node; `rule` receives dL/d(output) and must accumulate into
  /// the gradient buffers of the inputs it captured.
  void record(Tensor output, Rule rule);

  /// Propagates d(loss)/d(loss) = 1 back through every node once.
  /// Leaf gradients accumulate (+=) into their existing buffers.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor output;
    Rule rule;
  };
  std::vector<Node> nodes_;
  bool consumed_ = false;
};

bool any_requires_grad(std::initializer_list<const Tensor*> inputs);

/// Throws NumericError naming `op` if `m` holds a NaN or Inf.
void require_finite(const Matrix& m, const char* op);

// ---- operations ------------------------------------------------------------

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b);
Tensor transpose(Graph& g, const Tensor& a);
Tensor add(Graph& g, const Tensor& a, const Tensor& b);
Tensor sub(Graph& g, const Tensor& a, const Tensor& b);
/// Elementwise product.
Tensor mul(Graph& g, const Tensor& a, const Tensor& b);
Tensor scale(Graph& g, const Tensor& a, double factor);
/// x[T×n] + bias[1×n] added to every row.
Tensor add_bias(Graph& g, const Tensor& x, const Tensor& bias);
Tensor tanh(Graph& g, const Tensor& x);
/// Row-wise log-softmax over the last axis.
Tensor log_softmax(Graph& g, const Tensor& x);
/// Depthwise temporal convolution, odd kernel, zero padding of (K-1)/2.
Tensor temporal_conv(Graph& g, const Tensor& x, const Tensor& kernel);
Tensor slice_rows(Graph& g, const Tensor& x, Index begin, Index count);
Tensor sum(Graph& g, const Tensor& x);
Tensor mean(Graph& g, const Tensor& x);
Tensor squared_norm(Graph& g, const Tensor& x);
/// Σ_t weights[t]·‖x_t‖² over the rows of x.
Tensor weighted_row_sq_norm(Graph& g, const Tensor& x, const Vector& weights);

// Value-level helpers shared by several modules.

template <typename Derived>
MatrixT<typename Derived::Scalar> log_softmax_rows(
    const Eigen::MatrixBase<Derived>& x) {
  using S = typename Derived::Scalar;
  MatrixT<S> out(x.rows(), x.cols());
  for (Index r = 0; r < x.rows(); ++r) {
    const S m = x.row(r).maxCoeff();
    const S lse = m + std::log((x.row(r).array() - m).exp().sum());
    out.row(r) = x.row(r).array() - lse;
  }
  return out;
}

template <typename Scalar>
Scalar log_sum_exp(Scalar a, Scalar b) {
  if (a == -std::numeric_limits<Scalar>::infinity()) return b;
  if (b == -std::numeric_limits<Scalar>::infinity()) return a;
  const Scalar m = a > b ? a : b;
  return m + std::log(std::exp(a - m) + std::exp(b - m));
}

}  // namespace dqlora
