// SPDX-License-Identifier: Apache-2.0
//
// Block-wise 4-bit weight quantization and low-rank adapters on top of it.
#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "dqlora/rng.hpp"
#include "dqlora/tensor.hpp"

namespace dqlora {

/// 16 reconstruction levels in [-1, 1], sorted ascending, containing 0 and
/// reaching magnitude 1.
class Codebook {
 public:
  static constexpr int kLevels = 16;

  /// {-7..7}/7 plus a second 0 in the spare slot.
  static Codebook linear_symmetric();
  /// Normal-quantile levels (the 4-bit NormalFloat construction).
  static Codebook normal_quantile();
  /// Validates sortedness, range, and presence of 0 and ±1 extremes.
  static Codebook from_levels(const std::array<double, kLevels>& levels);

  const std::array<double, kLevels>& levels() const { return levels_; }
  double level(std::uint8_t code) const { return levels_[code]; }
  /// Index of the level nearest `v`; exact ties go to the level farther from
  /// zero, duplicates resolve to the lowest index.
  std::uint8_t nearest(double v) const;
  /// Largest distance between adjacent levels.
  double max_gap() const;

  bool operator==(const Codebook&) const = default;

 private:
  explicit Codebook(const std::array<double, kLevels>& levels)
      : levels_(levels) {}
  std::array<double, kLevels> levels_{};
};

/// Frozen 4-bit representation of a rank-2 tensor. Elements are blocked in
/// row-major order; each block carries one absmax scale.
class QuantizedTensor {
 public:
  QuantizedTensor(Index rows, Index cols, int block_size,
                  std::vector<double> scales, std::vector<std::uint8_t> packed,
                  Codebook codebook);

  Index rows() const { return rows_; }
  Index cols() const { return cols_; }
  Index numel() const { return rows_ * cols_; }
  int block_size() const { return block_size_; }
  Index n_blocks() const { return static_cast<Index>(scales_.size()); }
  const std::vector<double>& scales() const { return scales_; }
  /// Two codes per byte, element 2i in the low nibble.
  const std::vector<std::uint8_t>& packed_codes() const { return packed_; }
  const Codebook& codebook() const { return codebook_; }

  std::uint8_t code(Index i) const {
    const std::uint8_t byte = packed_[static_cast<std::size_t>(i / 2)];
    return (i % 2 == 0) ? (byte & 0x0F) : (byte >> 4);
  }

  bool operator==(const QuantizedTensor&) const = default;

 private:
  Index rows_;
  Index cols_;
  int block_size_;
  std::vector<double> scales_;
  std::vector<std::uint8_t> packed_;
  Codebook codebook_;
};

Index packed_size(Index numel);

QuantizedTensor quantize(const Matrix& x, int block_size,
                         const Codebook& codebook);
Matrix dequantize(const QuantizedTensor& q);

/// Worst-case elementwise reconstruction error: max scale × max gap / 2.
double round_trip_bound(const QuantizedTensor& q);

/// y = x·Ŵᵀ + b + (alpha/r)·(x·Aᵀ)·Bᵀ, with Ŵ = dequantize(base) frozen.
/// Rows of x are independent inputs.
class QuantizedLinear {
 public:
  QuantizedLinear(QuantizedTensor base, Matrix bias, Matrix lora_a,
                  Matrix lora_b, double lora_alpha);

  /// Quantizes a dense (out×in) weight; lora_B starts at zero and lora_A is
  /// drawn from U(-1/√in, 1/√in).
  static QuantizedLinear from_dense(const Matrix& weight, const Matrix& bias,
                                    int rank, double lora_alpha, int block_size,
                                    const Codebook& codebook, Rng& rng);

  Index in_features() const { return base_.cols(); }
  Index out_features() const { return base_.rows(); }
  int rank() const { return static_cast<int>(lora_a_.rows()); }
  double lora_alpha() const { return lora_alpha_; }

  const QuantizedTensor& base() const { return base_; }
  const Tensor& bias() const { return bias_; }
  const Tensor& lora_a() const { return lora_a_; }
  const Tensor& lora_b() const { return lora_b_; }
  Tensor& lora_a() { return lora_a_; }
  Tensor& lora_b() { return lora_b_; }

  /// r·(in + out).
  Index trainable_count() const;

  Tensor forward(Graph& g, const Tensor& x) const;

 private:
  QuantizedTensor base_;
  Tensor frozen_weight_t_;  // dequantize(base)ᵀ, in×out
  Tensor bias_;             // 1×out, never trainable
  Tensor lora_a_;           // r×in
  Tensor lora_b_;           // out×r
  double lora_alpha_;
};

/// Column-vector form: x is in×1, result out×1.
Tensor lora_forward(Graph& g, const QuantizedLinear& layer, const Tensor& x);

/// One weight-bearing item of a model, for parameter accounting.
struct ParamInfo {
  std::string name;
  Index numel = 0;
  bool trainable = false;
};

/// Σ trainable / Σ all, frozen quantized bases counted at full element count.
double trainable_fraction(std::span<const ParamInfo> params);

/// Parameter accounting entries for a layer: base, bias, lora_A, lora_B.
std::vector<ParamInfo> param_info(const QuantizedLinear& layer,
                                  const std::string& prefix);

}  // namespace dqlora
