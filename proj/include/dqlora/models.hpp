// SPDX-License-Identifier: Apache-2.0
//
// Teacher and student CTC encoders.
//
//   h_0 = cmvn(x)·W_inᵀ + b_in
//   h_{i+1} = h_i + fc2(tanh(fc1(conv_i(h_i))))      (fc1: d→2d, fc2: 2d→d)
//   logits = h_N·W_headᵀ + b_head
//
// conv_i is a depthwise temporal convolution, so every stage keeps the frame
// count. In the adapter phase fc1/fc2 become QuantizedLinear layers with
// low-rank adapters, the input projection and conv kernels are quantized and
// frozen, and the head stays full precision and trainable.
#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "dqlora/checkpoint.hpp"
#include "dqlora/quant.hpp"
#include "dqlora/signal.hpp"
#include "dqlora/tensor.hpp"

namespace dqlora {

struct EncoderConfig {
  int n_blocks = 2;
  int d_model = 32;
  int conv_kernel = 5;
  int vocab_size = kNumTokens + 1;
  int feature_dim = kFeatureBins;

  static EncoderConfig teacher() { return {4, 64, 5, kNumTokens + 1, kFeatureBins}; }
  static EncoderConfig student() { return {2, 32, 5, kNumTokens + 1, kFeatureBins}; }

  bool operator==(const EncoderConfig&) const = default;
};

struct AdapterConfig {
  int rank = 1;
  double lora_alpha = 2.0;
  int block_size = 64;
  Codebook codebook = Codebook::linear_symmetric();
};

/// Plain trainable affine map; weight is out×in, bias 1×out.
struct DenseLinear {
  Tensor weight;
  Tensor bias;
};

/// Frozen quantized weight with its dequantized values cached.
struct FrozenQuantized {
  QuantizedTensor codes;
  Tensor values;

  explicit FrozenQuantized(QuantizedTensor q)
      : codes(std::move(q)), values(Tensor::constant(dequantize(codes))) {}
};

using Weight = std::variant<Tensor, FrozenQuantized>;
using PointwiseLinear = std::variant<DenseLinear, QuantizedLinear>;

struct EncoderBlock {
  Weight conv;  // K × d
  PointwiseLinear fc1;
  PointwiseLinear fc2;
};

struct Encoder {
  EncoderConfig config;
  Weight input_weight;  // d × F
  Tensor input_bias;    // 1 × d
  std::vector<EncoderBlock> blocks;
  DenseLinear head;     // V × d

  bool adapter_phase() const;
};

/// Student→teacher latent map: P is d_teacher × d_student.
struct LatentProjection {
  Tensor weight;

  static LatentProjection init(int d_teacher, int d_student, std::uint64_t seed);
  Tensor apply(Graph& g, const Tensor& student_latents) const;
};

struct EncoderOutput {
  Tensor logits;   // T × V, pre-softmax
  Tensor latents;  // T × d, final block output
};

/// Per-utterance mean and variance normalization of each feature bin.
Matrix normalize_features(const Matrix& frames);

/// Seeded U(-1/√fan_in, 1/√fan_in) weights, zero biases, all trainable.
Encoder init_encoder(const EncoderConfig& cfg, std::uint64_t seed);

EncoderOutput encoder_forward(Graph& g, const Encoder& enc, const FeatureSequence& feats);

/// Adapter-phase copy of a plain encoder. Shares no storage with `base`.
Encoder freeze_and_quantize(const Encoder& base, const AdapterConfig& adapter,
                            std::uint64_t seed);

/// Deep copy with fresh storage.
Encoder clone(const Encoder& enc);

/// Sets requires_grad on every plain tensor (plain encoders only train as a
/// whole); adapter-phase encoders keep their fixed trainable set.
void set_trainable(Encoder& enc, bool on);

struct NamedTensor {
  std::string name;
  Tensor tensor;
};

/// Every tensor that currently requires a gradient, in a stable order.
std::vector<NamedTensor> trainable_parameters(const Encoder& enc);

/// Weight inventory for trainable_fraction and reporting.
std::vector<ParamInfo> parameter_inventory(const Encoder& enc);

/// FNV-1a over the serialized bytes of every frozen tensor.
std::uint64_t frozen_checksum(const Encoder& enc);

// ---- checkpoints -----------------------------------------------------------

inline constexpr std::uint16_t kFlagAdapterPhase = 0x1;

struct ModelBundle {
  Encoder encoder;
  std::optional<LatentProjection> projection;
  std::map<std::string, double> meta;
};

Checkpoint to_checkpoint(const Encoder& enc,
                         const LatentProjection* projection = nullptr,
                         const std::map<std::string, double>& meta = {});
ModelBundle from_checkpoint(const Checkpoint& ckpt);

}  // namespace dqlora
