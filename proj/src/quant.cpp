// SPDX-License-Identifier: Apache-2.0
#include "dqlora/quant.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dqlora/errors.hpp"

namespace dqlora {

namespace {

// Standard normal quantile: Newton on Φ(z) = erfc(−z/√2)/2 from z = 0.
// Only evaluated on p in (0.5, 0.97), where it converges in a few steps.
double normal_quantile_at(double p) {
  double z = 0.0;
  for (int it = 0; it < 60; ++it) {
    const double cdf = 0.5 * std::erfc(-z / std::numbers::sqrt2);
    const double pdf = std::exp(-0.5 * z * z) / std::sqrt(2.0 * std::numbers::pi);
    const double step = (cdf - p) / pdf;
    z -= step;
    if (std::abs(step) < 1e-15) break;
  }
  return z;
}

}  // namespace

// ---- Codebook --------------------------------------------------------------

Codebook Codebook::linear_symmetric() {
  std::array<double, kLevels> levels{};
  int slot = 0;
  for (int k = -7; k <= 7; ++k) {
    levels[slot++] = static_cast<double>(k) / 7.0;
    if (k == 0) levels[slot++] = 0.0;  // spare slot
  }
  return from_levels(levels);
}

Codebook Codebook::normal_quantile() {
  // Asymmetric split: 8 positive quantiles, 7 negative, one exact zero.
  constexpr double kOffset = 0.9677083;
  std::array<double, kLevels> levels{};
  int slot = 0;
  for (int i = 0; i < 7; ++i) {
    const double p = kOffset + (0.5 - kOffset) * i / 7.0;
    levels[slot++] = -normal_quantile_at(p);
  }
  levels[slot++] = 0.0;
  for (int i = 7; i >= 0; --i) {
    const double p = kOffset + (0.5 - kOffset) * i / 8.0;
    levels[slot++] = normal_quantile_at(p);
  }
  const double top = levels.back();
  const double bottom = -levels.front();
  for (double& v : levels) v = v > 0 ? v / top : v / bottom;
  return from_levels(levels);
}

Codebook Codebook::from_levels(const std::array<double, kLevels>& levels) {
  for (double v : levels) {
    if (!std::isfinite(v) || v < -1.0 || v > 1.0) {
      throw ContractError("codebook level outside [-1, 1]");
    }
  }
  if (!std::is_sorted(levels.begin(), levels.end())) {
    throw ContractError("codebook levels must be sorted ascending");
  }
  if (std::find(levels.begin(), levels.end(), 0.0) == levels.end()) {
    throw ContractError("codebook must contain 0");
  }
  if (std::max(-levels.front(), levels.back()) != 1.0) {
    throw ContractError("codebook must reach magnitude 1");
  }
  return Codebook(levels);
}

std::uint8_t Codebook::nearest(double v) const {
  int best = 0;
  double best_dist = std::abs(v - levels_[0]);
  for (int k = 1; k < kLevels; ++k) {
    const double dist = std::abs(v - levels_[k]);
    if (dist < best_dist ||
        (dist == best_dist && std::abs(levels_[k]) > std::abs(levels_[best]))) {
      best = k;
      best_dist = dist;
    }
  }
  return static_cast<std::uint8_t>(best);
}

double Codebook::max_gap() const {
  double gap = 0.0;
  for (int k = 1; k < kLevels; ++k) {
    gap = std::max(gap, levels_[k] - levels_[k - 1]);
  }
  return gap;
}

// ---- QuantizedTensor -------------------------------------------------------

Index packed_size(Index numel) { return (numel + 1) / 2; }

QuantizedTensor::QuantizedTensor(Index rows, Index cols, int block_size,
                                 std::vector<double> scales,
                                 std::vector<std::uint8_t> packed,
                                 Codebook codebook)
    : rows_(rows),
      cols_(cols),
      block_size_(block_size),
      scales_(std::move(scales)),
      packed_(std::move(packed)),
      codebook_(codebook) {
  if (rows < 0 || cols < 0 || block_size < 1) {
    throw ContractError("QuantizedTensor: invalid geometry");
  }
  const Index n = rows * cols;
  if (static_cast<Index>(scales_.size()) != (n + block_size - 1) / block_size) {
    throw ContractError("QuantizedTensor: scale count does not match blocks");
  }
  if (static_cast<Index>(packed_.size()) != packed_size(n)) {
    throw ContractError("QuantizedTensor: packed code length mismatch");
  }
  for (double s : scales_) {
    if (!std::isfinite(s) || s < 0.0) {
      throw ContractError("QuantizedTensor: scales must be finite and >= 0");
    }
  }
}

QuantizedTensor quantize(const Matrix& x, int block_size,
                         const Codebook& codebook) {
  if (block_size < 1) throw ContractError("quantize: block_size must be >= 1");
  if (!x.allFinite()) throw NumericError("quantize: non-finite input");

  const Index n = x.size();
  const Index n_blocks = (n + block_size - 1) / block_size;
  std::vector<double> scales(static_cast<std::size_t>(n_blocks), 0.0);
  std::vector<std::uint8_t> packed(static_cast<std::size_t>(packed_size(n)), 0);
  const double* data = x.data();

  for (Index b = 0; b < n_blocks; ++b) {
    const Index begin = b * block_size;
    const Index end = std::min(n, begin + block_size);
    double scale = 0.0;
    for (Index i = begin; i < end; ++i) scale = std::max(scale, std::abs(data[i]));
    scales[static_cast<std::size_t>(b)] = scale;
    if (scale == 0.0) continue;  // all-zero block keeps code 0
    for (Index i = begin; i < end; ++i) {
      const std::uint8_t code = codebook.nearest(data[i] / scale);
      packed[static_cast<std::size_t>(i / 2)] |=
          (i % 2 == 0) ? code : static_cast<std::uint8_t>(code << 4);
    }
  }
  return QuantizedTensor(x.rows(), x.cols(), block_size, std::move(scales),
                         std::move(packed), codebook);
}

Matrix dequantize(const QuantizedTensor& q) {
  Matrix out(q.rows(), q.cols());
  double* data = out.data();
  const Index n = q.numel();
  for (Index i = 0; i < n; ++i) {
    const double scale = q.scales()[static_cast<std::size_t>(i / q.block_size())];
    data[i] = scale == 0.0 ? 0.0 : scale * q.codebook().level(q.code(i));
  }
  return out;
}

double round_trip_bound(const QuantizedTensor& q) {
  const double max_scale =
      q.scales().empty() ? 0.0
                         : *std::max_element(q.scales().begin(), q.scales().end());
  return max_scale * q.codebook().max_gap() / 2.0;
}

// ---- QuantizedLinear -------------------------------------------------------

QuantizedLinear::QuantizedLinear(QuantizedTensor base, Matrix bias,
                                 Matrix lora_a, Matrix lora_b,
                                 double lora_alpha)
    : base_(std::move(base)), lora_alpha_(lora_alpha) {
  const Index in = base_.cols();
  const Index out = base_.rows();
  if (bias.rows() != 1 || bias.cols() != out) {
    throw ShapeError("QuantizedLinear: bias must be 1x" + std::to_string(out));
  }
  if (lora_a.rows() < 1 || lora_a.cols() != in) {
    throw ShapeError("QuantizedLinear: lora_A must be r x " + std::to_string(in));
  }
  if (lora_b.rows() != out || lora_b.cols() != lora_a.rows()) {
    throw ShapeError("QuantizedLinear: lora_B must be out x r");
  }
  if (!(lora_alpha > 0.0)) throw ContractError("QuantizedLinear: lora_alpha <= 0");
  frozen_weight_t_ = Tensor::constant(dequantize(base_).transpose());
  bias_ = Tensor::constant(bias);
  lora_a_ = Tensor(std::move(lora_a), true);
  lora_b_ = Tensor(std::move(lora_b), true);
}

QuantizedLinear QuantizedLinear::from_dense(const Matrix& weight,
                                            const Matrix& bias, int rank,
                                            double lora_alpha, int block_size,
                                            const Codebook& codebook,
                                            Rng& rng) {
  if (rank <= 0) throw ContractError("adapter rank must be positive");
  const Index in = weight.cols();
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Matrix a(rank, in);
  for (Index i = 0; i < a.size(); ++i) a.data()[i] = rng.uniform(-bound, bound);
  return QuantizedLinear(quantize(weight, block_size, codebook), bias, a,
                         Matrix::Zero(weight.rows(), rank), lora_alpha);
}

Index QuantizedLinear::trainable_count() const {
  return rank() * (in_features() + out_features());
}

Tensor QuantizedLinear::forward(Graph& g, const Tensor& x) const {
  if (x.cols() != in_features()) {
    throw ShapeError("QuantizedLinear: input has " + std::to_string(x.cols()) +
                     " features, expected " + std::to_string(in_features()));
  }
  Tensor y = add_bias(g, matmul(g, x, frozen_weight_t_), bias_);
  Tensor low = matmul(g, x, transpose(g, lora_a_));
  Tensor delta = scale(g, matmul(g, low, transpose(g, lora_b_)),
                       lora_alpha_ / static_cast<double>(rank()));
  return add(g, y, delta);
}

Tensor lora_forward(Graph& g, const QuantizedLinear& layer, const Tensor& x) {
  if (x.cols() != 1) throw ShapeError("lora_forward: x must be a column vector");
  return transpose(g, layer.forward(g, transpose(g, x)));
}

double trainable_fraction(std::span<const ParamInfo> params) {
  if (params.empty()) throw ContractError("trainable_fraction: empty model");
  Index trainable = 0;
  Index total = 0;
  for (const ParamInfo& p : params) {
    total += p.numel;
    if (p.trainable) trainable += p.numel;
  }
  if (total == 0) throw ContractError("trainable_fraction: model has no weights");
  return static_cast<double>(trainable) / static_cast<double>(total);
}

std::vector<ParamInfo> param_info(const QuantizedLinear& layer,
                                  const std::string& prefix) {
  return {
      {prefix + ".weight", layer.base().numel(), false},
      {prefix + ".bias", layer.bias().numel(), false},
      {prefix + ".lora_A", layer.lora_a().numel(), layer.lora_a().requires_grad()},
      {prefix + ".lora_B", layer.lora_b().numel(), layer.lora_b().requires_grad()},
  };
}

}  // namespace dqlora
