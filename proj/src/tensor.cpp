// SPDX-License-Identifier: Apache-2.0
#include "dqlora/tensor.hpp"

#include <algorithm>
#include <string>

#include "dqlora/errors.hpp"

namespace dqlora {

namespace {

std::string shape_str(const Tensor& t) {
  return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a) +
                     " vs " + shape_str(b));
  }
}

// Wraps a computed value; records `rule` when any input needs gradients.
template <typename Rule>
Tensor finish(Graph& g, Matrix value, const char* op, bool needs_grad,
              Rule&& rule) {
  require_finite(value, op);
  Tensor out(std::move(value), needs_grad);
  if (needs_grad) g.record(out, std::forward<Rule>(rule));
  return out;
}

}  // namespace

// ---- Tensor ----------------------------------------------------------------

Tensor::Tensor(Matrix value, bool requires_grad)
    : storage_(std::make_shared<Storage>()) {
  storage_->value = std::move(value);
  storage_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Index rows, Index cols, bool requires_grad) {
  return Tensor(Matrix::Zero(rows, cols), requires_grad);
}

Tensor Tensor::scalar(double v, bool requires_grad) {
  return Tensor(Matrix::Constant(1, 1, v), requires_grad);
}

Tensor Tensor::constant(const Matrix& value) { return Tensor(value, false); }

Index Tensor::rows() const { return storage_ ? storage_->value.rows() : 0; }
Index Tensor::cols() const { return storage_ ? storage_->value.cols() : 0; }
Index Tensor::numel() const { return storage_ ? storage_->value.size() : 0; }

const Matrix& Tensor::value() const { return storage_->value; }
Matrix& Tensor::mutable_value() { return storage_->value; }

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item(): tensor is not a scalar");
  return storage_->value(0, 0);
}

bool Tensor::requires_grad() const {
  return storage_ && storage_->requires_grad;
}
void Tensor::set_requires_grad(bool on) { storage_->requires_grad = on; }

bool Tensor::has_grad() const {
  return storage_ && storage_->grad.size() == storage_->value.size() &&
         storage_->grad.size() > 0;
}

const Matrix& Tensor::grad() const {
  if (!has_grad()) {
    storage_->grad = Matrix::Zero(rows(), cols());
  }
  return storage_->grad;
}

Matrix& Tensor::grad_buffer() const {
  if (storage_->grad.rows() != rows() || storage_->grad.cols() != cols()) {
    storage_->grad = Matrix::Zero(rows(), cols());
  }
  return storage_->grad;
}

void Tensor::zero_grad() {
  if (storage_) storage_->grad = Matrix::Zero(rows(), cols());
}

// ---- Graph -----------------------------------------------------------------

void Graph::record(Tensor output, Rule rule) {
  nodes_.push_back(Node{std::move(output), std::move(rule)});
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ContractError("backward: loss must be a scalar, got " +
                        shape_str(loss));
  }
  if (consumed_) throw ContractError("backward: graph already consumed");
  consumed_ = true;
  if (!loss.requires_grad()) return;

  Tensor seed = loss;
  seed.grad_buffer()(0, 0) += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (!it->output.has_grad()) continue;
    it->rule(it->output.grad());
  }
}

bool any_requires_grad(std::initializer_list<const Tensor*> inputs) {
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

void require_finite(const Matrix& m, const char* op) {
  if (!m.allFinite()) {
    throw NumericError(std::string(op) + ": non-finite value produced");
  }
}

// ---- operations ------------------------------------------------------------

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
  if (a.cols() != b.rows()) {
    throw ShapeError("matmul: inner dimensions differ " + shape_str(a) +
                     " x " + shape_str(b));
  }
  Matrix value = a.value() * b.value();
  return finish(g, std::move(value), "matmul", any_requires_grad({&a, &b}),
                [a, b](const Matrix& go) mutable {
                  if (a.requires_grad())
                    a.grad_buffer().noalias() += go * b.value().transpose();
                  if (b.requires_grad())
                    b.grad_buffer().noalias() += a.value().transpose() * go;
                });
}

Tensor transpose(Graph& g, const Tensor& a) {
  Matrix value = a.value().transpose();
  return finish(g, std::move(value), "transpose", a.requires_grad(),
                [a](const Matrix& go) mutable {
                  a.grad_buffer() += go.transpose();
                });
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Matrix value = a.value() + b.value();
  return finish(g, std::move(value), "add", any_requires_grad({&a, &b}),
                [a, b](const Matrix& go) mutable {
                  if (a.requires_grad()) a.grad_buffer() += go;
                  if (b.requires_grad()) b.grad_buffer() += go;
                });
}

Tensor sub(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Matrix value = a.value() - b.value();
  return finish(g, std::move(value), "sub", any_requires_grad({&a, &b}),
                [a, b](const Matrix& go) mutable {
                  if (a.requires_grad()) a.grad_buffer() += go;
                  if (b.requires_grad()) b.grad_buffer() -= go;
                });
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Matrix value = a.value().cwiseProduct(b.value());
  return finish(g, std::move(value), "mul", any_requires_grad({&a, &b}),
                [a, b](const Matrix& go) mutable {
                  if (a.requires_grad())
                    a.grad_buffer() += go.cwiseProduct(b.value());
                  if (b.requires_grad())
                    b.grad_buffer() += go.cwiseProduct(a.value());
                });
}

Tensor scale(Graph& g, const Tensor& a, double factor) {
  Matrix value = a.value() * factor;
  return finish(g, std::move(value), "scale", a.requires_grad(),
                [a, factor](const Matrix& go) mutable {
                  a.grad_buffer() += go * factor;
                });
}

Tensor add_bias(Graph& g, const Tensor& x, const Tensor& bias) {
  if (bias.rows() != 1 || bias.cols() != x.cols()) {
    throw ShapeError("add_bias: bias " + shape_str(bias) +
                     " does not match rows of " + shape_str(x));
  }
  Matrix value = x.value().rowwise() + bias.value().row(0);
  return finish(g, std::move(value), "add_bias",
                any_requires_grad({&x, &bias}),
                [x, bias](const Matrix& go) mutable {
                  if (x.requires_grad()) x.grad_buffer() += go;
                  if (bias.requires_grad())
                    bias.grad_buffer() += go.colwise().sum();
                });
}

Tensor tanh(Graph& g, const Tensor& x) {
  Matrix value = x.value().array().tanh().matrix();
  require_finite(value, "tanh");
  Tensor out(std::move(value), x.requires_grad());
  if (out.requires_grad()) {
    g.record(out, [x, out](const Matrix& go) mutable {
      x.grad_buffer().array() +=
          go.array() * (1.0 - out.value().array().square());
    });
  }
  return out;
}

Tensor log_softmax(Graph& g, const Tensor& x) {
  if (x.cols() < 1) throw ShapeError("log_softmax: empty last axis");
  Matrix value = log_softmax_rows(x.value());
  require_finite(value, "log_softmax");
  Tensor out(std::move(value), x.requires_grad());
  if (out.requires_grad()) {
    g.record(out, [x, out](const Matrix& go) mutable {
      const Matrix probs = out.value().array().exp().matrix();
      const Vector row_sums = go.rowwise().sum();
      Matrix& gx = x.grad_buffer();
      gx += go;
      gx.noalias() -= (probs.array().colwise() * row_sums.array()).matrix();
    });
  }
  return out;
}

Tensor temporal_conv(Graph& g, const Tensor& x, const Tensor& kernel) {
  const Index K = kernel.rows();
  if (K % 2 == 0) {
    throw ContractError("temporal_conv: kernel length must be odd, got " +
                        std::to_string(K));
  }
  if (kernel.cols() != x.cols()) {
    throw ShapeError("temporal_conv: kernel " + shape_str(kernel) +
                     " does not match channels of " + shape_str(x));
  }
  const Index T = x.rows();
  const Index pad = (K - 1) / 2;
  // Output row t reads input row t + shift for shift = j - pad.
  auto valid = [T](Index shift, Index& t0, Index& n) {
    t0 = std::max<Index>(0, -shift);
    const Index t1 = std::min<Index>(T, T - shift);
    n = std::max<Index>(0, t1 - t0);
  };

  Matrix value = Matrix::Zero(T, x.cols());
  for (Index j = 0; j < K; ++j) {
    Index t0, n;
    valid(j - pad, t0, n);
    if (n == 0) continue;
    value.middleRows(t0, n).array() +=
        x.value().middleRows(t0 + j - pad, n).array().rowwise() *
        kernel.value().row(j).array();
  }
  return finish(
      g, std::move(value), "temporal_conv", any_requires_grad({&x, &kernel}),
      [x, kernel, K, pad, valid](const Matrix& go) mutable {
        for (Index j = 0; j < K; ++j) {
          Index t0, n;
          valid(j - pad, t0, n);
          if (n == 0) continue;
          const Index src = t0 + j - pad;
          if (x.requires_grad()) {
            x.grad_buffer().middleRows(src, n).array() +=
                go.middleRows(t0, n).array().rowwise() *
                kernel.value().row(j).array();
          }
          if (kernel.requires_grad()) {
            kernel.grad_buffer().row(j) +=
                go.middleRows(t0, n)
                    .cwiseProduct(x.value().middleRows(src, n))
                    .colwise()
                    .sum();
          }
        }
      });
}

Tensor slice_rows(Graph& g, const Tensor& x, Index begin, Index count) {
  if (begin < 0 || count < 0 || begin + count > x.rows()) {
    throw ShapeError("slice_rows: range [" + std::to_string(begin) + ", " +
                     std::to_string(begin + count) + ") outside " +
                     shape_str(x));
  }
  Matrix value = x.value().middleRows(begin, count);
  return finish(g, std::move(value), "slice_rows", x.requires_grad(),
                [x, begin, count](const Matrix& go) mutable {
                  x.grad_buffer().middleRows(begin, count) += go;
                });
}

Tensor sum(Graph& g, const Tensor& x) {
  Matrix value = Matrix::Constant(1, 1, x.value().sum());
  return finish(g, std::move(value), "sum", x.requires_grad(),
                [x](const Matrix& go) mutable {
                  x.grad_buffer().array() += go(0, 0);
                });
}

Tensor mean(Graph& g, const Tensor& x) {
  if (x.numel() == 0) throw ShapeError("mean: empty tensor");
  const double inv = 1.0 / static_cast<double>(x.numel());
  Matrix value = Matrix::Constant(1, 1, x.value().sum() * inv);
  return finish(g, std::move(value), "mean", x.requires_grad(),
                [x, inv](const Matrix& go) mutable {
                  x.grad_buffer().array() += go(0, 0) * inv;
                });
}

Tensor squared_norm(Graph& g, const Tensor& x) {
  Matrix value = Matrix::Constant(1, 1, x.value().squaredNorm());
  return finish(g, std::move(value), "squared_norm", x.requires_grad(),
                [x](const Matrix& go) mutable {
                  x.grad_buffer() += 2.0 * go(0, 0) * x.value();
                });
}

Tensor weighted_row_sq_norm(Graph& g, const Tensor& x, const Vector& weights) {
  if (weights.size() != x.rows()) {
    throw ShapeError("weighted_row_sq_norm: " + std::to_string(weights.size()) +
                     " weights for " + shape_str(x));
  }
  const Vector row_norms = x.value().rowwise().squaredNorm();
  Matrix value = Matrix::Constant(1, 1, weights.dot(row_norms));
  return finish(g, std::move(value), "weighted_row_sq_norm", x.requires_grad(),
                [x, weights](const Matrix& go) mutable {
                  x.grad_buffer().array() +=
                      x.value().array().colwise() *
                      (2.0 * go(0, 0) * weights.array());
                });
}

}  // namespace dqlora
