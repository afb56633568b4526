// SPDX-License-Identifier: Apache-2.0
//
// "DQCK" checkpoint container: an ordered list of named tensors, each either
// plain float64 or 4-bit quantized. All integers and reals little-endian.
//
//   "DQCK" u16 version u16 flags u32 count
//   per tensor: u16 name_len, name, u8 kind, u8 rank, rank × u32 dims
//     kind 0: numel × f64
//     kind 1: u32 block_size, u32 n_blocks, n_blocks × f64 scales,
//             ceil(numel/2) packed code bytes, 16 × f64 codebook levels
#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <variant>
#include <vector>

#include "dqlora/errors.hpp"
#include "dqlora/quant.hpp"

namespace dqlora {

inline constexpr std::uint16_t kCheckpointVersion = 1;

enum class CheckpointErrc {
  kBadMagic = 1,
  kVersionMismatch = 2,
  kTruncated = 3,
  kMalformed = 4,
};

class CheckpointError : public DataError {
 public:
  CheckpointError(CheckpointErrc code, const std::string& what)
      : DataError(what), code_(code) {}
  CheckpointErrc code() const { return code_; }

 private:
  CheckpointErrc code_;
};

struct CheckpointEntry {
  std::string name;
  std::variant<Matrix, QuantizedTensor> data;

  bool quantized() const { return std::holds_alternative<QuantizedTensor>(data); }
  Index numel() const;
};

struct Checkpoint {
  std::uint16_t flags = 0;
  std::vector<CheckpointEntry> entries;

  const CheckpointEntry* find(const std::string& name) const;
  const CheckpointEntry& at(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint read_checkpoint(const std::filesystem::path& path);

}  // namespace dqlora
