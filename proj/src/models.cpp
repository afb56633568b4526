// SPDX-License-Identifier: Apache-2.0
#include "dqlora/models.hpp"

#include <cmath>
#include <functional>

#include "dqlora/binary_io.hpp"
#include "dqlora/errors.hpp"
#include "dqlora/rng.hpp"

namespace dqlora {

namespace {

constexpr double kVarianceFloor = 1.0;

const Tensor& weight_tensor(const Weight& w) {
  if (const auto* t = std::get_if<Tensor>(&w)) return *t;
  return std::get<FrozenQuantized>(w).values;
}

Tensor linear(Graph& g, const PointwiseLinear& layer, const Tensor& x) {
  if (const auto* q = std::get_if<QuantizedLinear>(&layer)) return q->forward(g, x);
  const auto& d = std::get<DenseLinear>(layer);
  if (x.cols() != d.weight.cols()) {
    throw ShapeError("linear: input has " + std::to_string(x.cols()) +
                     " features, expected " + std::to_string(d.weight.cols()));
  }
  return add_bias(g, matmul(g, x, transpose(g, d.weight)), d.bias);
}

Matrix uniform_matrix(Index rows, Index cols, double bound, Rng& rng) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(-bound, bound);
  return m;
}

DenseLinear init_dense(Index out, Index in, Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  return {Tensor(uniform_matrix(out, in, bound, rng), true),
          Tensor(Matrix::Zero(1, out), true)};
}

Tensor copy_tensor(const Tensor& t) { return Tensor(t.value(), t.requires_grad()); }

DenseLinear copy_dense(const DenseLinear& d) {
  return {copy_tensor(d.weight), copy_tensor(d.bias)};
}

Weight copy_weight(const Weight& w) {
  if (const auto* t = std::get_if<Tensor>(&w)) return copy_tensor(*t);
  return FrozenQuantized(std::get<FrozenQuantized>(w).codes);
}

PointwiseLinear copy_linear(const PointwiseLinear& l) {
  if (const auto* d = std::get_if<DenseLinear>(&l)) return copy_dense(*d);
  const auto& q = std::get<QuantizedLinear>(l);
  QuantizedLinear out(q.base(), q.bias().value(), q.lora_a().value(),
                      q.lora_b().value(), q.lora_alpha());
  out.lora_a().set_requires_grad(q.lora_a().requires_grad());
  out.lora_b().set_requires_grad(q.lora_b().requires_grad());
  return out;
}

// One serializable item of an encoder.
struct Item {
  std::string name;
  const Tensor* tensor = nullptr;
  const QuantizedTensor* quantized = nullptr;

  bool trainable() const { return tensor && tensor->requires_grad(); }
  Index numel() const { return tensor ? tensor->numel() : quantized->numel(); }
};

void visit_items(const Encoder& enc, const std::function<void(const Item&)>& fn) {
  auto weight = [&](const std::string& name, const Weight& w) {
    if (const auto* t = std::get_if<Tensor>(&w)) {
      fn({name, t, nullptr});
    } else {
      fn({name, nullptr, &std::get<FrozenQuantized>(w).codes});
    }
  };
  auto pointwise = [&](const std::string& prefix, const PointwiseLinear& l) {
    if (const auto* d = std::get_if<DenseLinear>(&l)) {
      fn({prefix + ".weight", &d->weight, nullptr});
      fn({prefix + ".bias", &d->bias, nullptr});
    } else {
      const auto& q = std::get<QuantizedLinear>(l);
      fn({prefix + ".weight", nullptr, &q.base()});
      fn({prefix + ".bias", &q.bias(), nullptr});
      fn({prefix + ".lora_A", &q.lora_a(), nullptr});
      fn({prefix + ".lora_B", &q.lora_b(), nullptr});
    }
  };
  weight("input.weight", enc.input_weight);
  fn({"input.bias", &enc.input_bias, nullptr});
  for (std::size_t i = 0; i < enc.blocks.size(); ++i) {
    const std::string prefix = "block" + std::to_string(i);
    weight(prefix + ".conv", enc.blocks[i].conv);
    pointwise(prefix + ".fc1", enc.blocks[i].fc1);
    pointwise(prefix + ".fc2", enc.blocks[i].fc2);
  }
  fn({"head.weight", &enc.head.weight, nullptr});
  fn({"head.bias", &enc.head.bias, nullptr});
}

CheckpointEntry to_entry(const Item& item) {
  if (item.tensor) return {item.name, item.tensor->value()};
  return {item.name, *item.quantized};
}

}  // namespace

bool Encoder::adapter_phase() const {
  return std::holds_alternative<FrozenQuantized>(input_weight);
}

LatentProjection LatentProjection::init(int d_teacher, int d_student, std::uint64_t seed) {
  Rng rng(mix_seed(seed, 0x50524f4aULL));
  const double bound = 1.0 / std::sqrt(static_cast<double>(d_student));
  return {Tensor(uniform_matrix(d_teacher, d_student, bound, rng), true)};
}

Tensor LatentProjection::apply(Graph& g, const Tensor& student_latents) const {
  return matmul(g, student_latents, transpose(g, weight));
}

Matrix normalize_features(const Matrix& frames) {
  if (frames.rows() == 0) return frames;
  const Eigen::RowVectorXd mean = frames.colwise().mean();
  Matrix centered = frames.rowwise() - mean;
  // Variance floor of 1 (log units²) keeps near-constant bins from blowing up.
  const Eigen::RowVectorXd scale =
      ((centered.colwise().squaredNorm() / static_cast<double>(frames.rows())).array() +
       kVarianceFloor)
          .sqrt();
  return centered.array().rowwise() / scale.array();
}

Encoder init_encoder(const EncoderConfig& cfg, std::uint64_t seed) {
  if (cfg.n_blocks < 0 || cfg.d_model < 1 || cfg.vocab_size < 2 || cfg.feature_dim < 1) {
    throw ConfigError("encoder config has non-positive dimensions");
  }
  if (cfg.conv_kernel < 1 || cfg.conv_kernel % 2 == 0) {
    throw ConfigError("encoder conv kernel must be odd");
  }
  Rng rng(seed);
  Encoder enc;
  enc.config = cfg;
  DenseLinear input = init_dense(cfg.d_model, cfg.feature_dim, rng);
  enc.input_weight = input.weight;
  enc.input_bias = input.bias;
  const double conv_bound = 1.0 / std::sqrt(static_cast<double>(cfg.conv_kernel));
  for (int i = 0; i < cfg.n_blocks; ++i) {
    EncoderBlock block;
    block.conv = Tensor(uniform_matrix(cfg.conv_kernel, cfg.d_model, conv_bound, rng), true);
    block.fc1 = init_dense(2 * cfg.d_model, cfg.d_model, rng);
    block.fc2 = init_dense(cfg.d_model, 2 * cfg.d_model, rng);
    enc.blocks.push_back(std::move(block));
  }
  enc.head = init_dense(cfg.vocab_size, cfg.d_model, rng);
  return enc;
}

EncoderOutput encoder_forward(Graph& g, const Encoder& enc, const FeatureSequence& feats) {
  if (feats.frames.cols() != enc.config.feature_dim) {
    throw ShapeError("encoder: features have " + std::to_string(feats.frames.cols()) +
                     " bins, encoder expects " + std::to_string(enc.config.feature_dim));
  }
  const Tensor x = Tensor::constant(normalize_features(feats.frames));
  Tensor h = add_bias(g, matmul(g, x, transpose(g, weight_tensor(enc.input_weight))),
                      enc.input_bias);
  for (const EncoderBlock& block : enc.blocks) {
    const Tensor mixed = temporal_conv(g, h, weight_tensor(block.conv));
    const Tensor hidden = tanh(g, linear(g, block.fc1, mixed));
    h = add(g, h, linear(g, block.fc2, hidden));
  }
  Tensor logits = linear(g, enc.head, h);
  return {logits, h};
}

Encoder freeze_and_quantize(const Encoder& base, const AdapterConfig& adapter,
                            std::uint64_t seed) {
  if (adapter.rank <= 0) throw ContractError("freeze_and_quantize: rank must be positive");
  if (base.adapter_phase()) {
    throw ContractError("freeze_and_quantize: encoder is already quantized");
  }
  Rng rng(mix_seed(seed, 0x4c4f5241ULL));
  auto quantize_weight = [&](const Weight& w) -> Weight {
    return FrozenQuantized(quantize(std::get<Tensor>(w).value(), adapter.block_size,
                                    adapter.codebook));
  };
  auto adapt = [&](const PointwiseLinear& l) -> PointwiseLinear {
    const auto& d = std::get<DenseLinear>(l);
    return QuantizedLinear::from_dense(d.weight.value(), d.bias.value(), adapter.rank,
                                       adapter.lora_alpha, adapter.block_size,
                                       adapter.codebook, rng);
  };

  Encoder out;
  out.config = base.config;
  out.input_weight = quantize_weight(base.input_weight);
  out.input_bias = Tensor::constant(base.input_bias.value());
  for (const EncoderBlock& block : base.blocks) {
    EncoderBlock b;
    b.conv = quantize_weight(block.conv);
    b.fc1 = adapt(block.fc1);
    b.fc2 = adapt(block.fc2);
    out.blocks.push_back(std::move(b));
  }
  out.head = {Tensor(base.head.weight.value(), true), Tensor(base.head.bias.value(), true)};
  return out;
}

Encoder clone(const Encoder& enc) {
  Encoder out;
  out.config = enc.config;
  out.input_weight = copy_weight(enc.input_weight);
  out.input_bias = copy_tensor(enc.input_bias);
  for (const EncoderBlock& block : enc.blocks) {
    out.blocks.push_back({copy_weight(block.conv), copy_linear(block.fc1), copy_linear(block.fc2)});
  }
  out.head = copy_dense(enc.head);
  return out;
}

void set_trainable(Encoder& enc, bool on) {
  if (enc.adapter_phase()) {
    throw ContractError("set_trainable: adapter-phase encoders have a fixed trainable set");
  }
  visit_items(enc, [on](const Item& item) {
    if (item.tensor) const_cast<Tensor*>(item.tensor)->set_requires_grad(on);
  });
}

std::vector<NamedTensor> trainable_parameters(const Encoder& enc) {
  std::vector<NamedTensor> out;
  visit_items(enc, [&out](const Item& item) {
    if (item.trainable()) out.push_back({item.name, *item.tensor});
  });
  return out;
}

std::vector<ParamInfo> parameter_inventory(const Encoder& enc) {
  std::vector<ParamInfo> out;
  visit_items(enc, [&out](const Item& item) {
    out.push_back({item.name, item.numel(), item.trainable()});
  });
  return out;
}

std::uint64_t frozen_checksum(const Encoder& enc) {
  Checkpoint frozen;
  visit_items(enc, [&frozen](const Item& item) {
    if (!item.trainable()) frozen.entries.push_back(to_entry(item));
  });
  return fnv1a(encode_checkpoint(frozen));
}

Checkpoint to_checkpoint(const Encoder& enc, const LatentProjection* projection,
                         const std::map<std::string, double>& meta) {
  Checkpoint ckpt;
  ckpt.flags = enc.adapter_phase() ? kFlagAdapterPhase : 0;
  visit_items(enc, [&ckpt](const Item& item) { ckpt.entries.push_back(to_entry(item)); });
  if (projection) ckpt.entries.push_back({"proj.P", projection->weight.value()});
  std::map<std::string, double> all_meta = meta;
  for (const EncoderBlock& block : enc.blocks) {
    if (const auto* q = std::get_if<QuantizedLinear>(&block.fc1)) {
      all_meta["lora_alpha"] = q->lora_alpha();
    }
  }
  for (const auto& [key, value] : all_meta) {
    ckpt.entries.push_back({"meta." + key, Matrix::Constant(1, 1, value)});
  }
  return ckpt;
}

ModelBundle from_checkpoint(const Checkpoint& ckpt) {
  auto malformed = [](const std::string& what) -> CheckpointError {
    return CheckpointError(CheckpointErrc::kMalformed, "checkpoint: " + what);
  };
  auto plain = [&](const std::string& name) -> const Matrix& {
    const auto& e = ckpt.at(name);
    if (e.quantized()) throw malformed("'" + name + "' should be a plain tensor");
    return std::get<Matrix>(e.data);
  };
  const bool adapter = (ckpt.flags & kFlagAdapterPhase) != 0;

  ModelBundle bundle;
  for (const auto& e : ckpt.entries) {
    if (e.name.rfind("meta.", 0) == 0) bundle.meta[e.name.substr(5)] = plain(e.name)(0, 0);
  }
  auto weight = [&](const std::string& name) -> Weight {
    const auto& e = ckpt.at(name);
    if (adapter != e.quantized()) throw malformed("'" + name + "' has the wrong kind for this phase");
    if (adapter) return FrozenQuantized(std::get<QuantizedTensor>(e.data));
    return Tensor(std::get<Matrix>(e.data), true);
  };
  auto pointwise = [&](const std::string& prefix) -> PointwiseLinear {
    if (!adapter) {
      return DenseLinear{Tensor(plain(prefix + ".weight"), true),
                         Tensor(plain(prefix + ".bias"), true)};
    }
    const auto& base = ckpt.at(prefix + ".weight");
    if (!base.quantized()) throw malformed("'" + prefix + ".weight' should be quantized");
    if (!bundle.meta.count("lora_alpha")) throw malformed("missing meta.lora_alpha");
    return QuantizedLinear(std::get<QuantizedTensor>(base.data), plain(prefix + ".bias"),
                           plain(prefix + ".lora_A"), plain(prefix + ".lora_B"),
                           bundle.meta.at("lora_alpha"));
  };

  Encoder& enc = bundle.encoder;
  enc.input_weight = weight("input.weight");
  enc.input_bias = adapter ? Tensor::constant(plain("input.bias"))
                           : Tensor(plain("input.bias"), true);
  int n_blocks = 0;
  while (ckpt.find("block" + std::to_string(n_blocks) + ".conv")) ++n_blocks;
  for (int i = 0; i < n_blocks; ++i) {
    const std::string prefix = "block" + std::to_string(i);
    enc.blocks.push_back({weight(prefix + ".conv"), pointwise(prefix + ".fc1"),
                          pointwise(prefix + ".fc2")});
  }
  enc.head = {Tensor(plain("head.weight"), true), Tensor(plain("head.bias"), true)};

  const Tensor& in_w = weight_tensor(enc.input_weight);
  enc.config.n_blocks = n_blocks;
  enc.config.d_model = static_cast<int>(in_w.rows());
  enc.config.feature_dim = static_cast<int>(in_w.cols());
  enc.config.vocab_size = static_cast<int>(enc.head.weight.rows());
  enc.config.conv_kernel =
      n_blocks > 0 ? static_cast<int>(weight_tensor(enc.blocks[0].conv).rows()) : 5;
  if (enc.head.weight.cols() != enc.config.d_model ||
      enc.input_bias.cols() != enc.config.d_model) {
    throw malformed("inconsistent model dimensions");
  }
  if (const auto* p = ckpt.find("proj.P")) {
    bundle.projection = LatentProjection{Tensor(plain(p->name), true)};
  }
  return bundle;
}

}  // namespace dqlora
