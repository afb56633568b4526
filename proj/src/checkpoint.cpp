// SPDX-License-Identifier: Apache-2.0
#include "dqlora/checkpoint.hpp"

#include "dqlora/binary_io.hpp"

namespace dqlora {

namespace {

constexpr char kMagic[] = "DQCK";

[[noreturn]] void malformed(const std::string& what) {
  throw CheckpointError(CheckpointErrc::kMalformed, "checkpoint: " + what);
}

void write_dims(ByteWriter& w, Index rows, Index cols) {
  w.u8(2);
  w.u32(static_cast<std::uint32_t>(rows));
  w.u32(static_cast<std::uint32_t>(cols));
}

}  // namespace

Index CheckpointEntry::numel() const {
  return std::visit([](const auto& d) -> Index { return d.rows() * d.cols(); }, data);
}

const CheckpointEntry* Checkpoint::find(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return &e;
  }
  return nullptr;
}

const CheckpointEntry& Checkpoint::at(const std::string& name) const {
  const CheckpointEntry* e = find(name);
  if (!e) malformed("missing tensor '" + name + "'");
  return *e;
}

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
  ByteWriter w;
  w.text(std::string_view(kMagic, 4));
  w.u16(kCheckpointVersion);
  w.u16(ckpt.flags);
  w.u32(static_cast<std::uint32_t>(ckpt.entries.size()));
  for (const CheckpointEntry& e : ckpt.entries) {
    w.u16(static_cast<std::uint16_t>(e.name.size()));
    w.text(e.name);
    if (const auto* m = std::get_if<Matrix>(&e.data)) {
      w.u8(0);
      write_dims(w, m->rows(), m->cols());
      for (Index i = 0; i < m->size(); ++i) w.f64(m->data()[i]);
    } else {
      const auto& q = std::get<QuantizedTensor>(e.data);
      w.u8(1);
      write_dims(w, q.rows(), q.cols());
      w.u32(static_cast<std::uint32_t>(q.block_size()));
      w.u32(static_cast<std::uint32_t>(q.n_blocks()));
      for (double s : q.scales()) w.f64(s);
      w.bytes(q.packed_codes());
      for (double level : q.codebook().levels()) w.f64(level);
    }
  }
  return w.take();
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  try {
    if (r.remaining() < 4 || r.text(4) != std::string_view(kMagic, 4)) {
      throw CheckpointError(CheckpointErrc::kBadMagic, "checkpoint: bad magic (expected DQCK)");
    }
    const std::uint16_t version = r.u16();
    if (version != kCheckpointVersion) {
      throw CheckpointError(CheckpointErrc::kVersionMismatch,
                            "checkpoint: unsupported version " + std::to_string(version));
    }
    Checkpoint ckpt;
    ckpt.flags = r.u16();
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
      CheckpointEntry e;
      e.name = r.text(r.u16());
      const std::uint8_t kind = r.u8();
      const std::uint8_t rank = r.u8();
      if (rank < 1 || rank > 2) malformed("tensor '" + e.name + "' has rank " + std::to_string(rank));
      Index rows = r.u32();
      Index cols = rank == 2 ? static_cast<Index>(r.u32()) : 1;
      if (rank == 1) std::swap(rows, cols);  // vectors load as 1×n rows
      const Index numel = rows * cols;
      if (kind == 0) {
        if (static_cast<Index>(r.remaining() / 8) < numel) {
          throw TruncatedInput("checkpoint: truncated tensor '" + e.name + "'");
        }
        Matrix m(rows, cols);
        for (Index k = 0; k < numel; ++k) m.data()[k] = r.f64();
        e.data = std::move(m);
      } else if (kind == 1) {
        const std::uint32_t block_size = r.u32();
        const std::uint32_t n_blocks = r.u32();
        if (block_size == 0 || n_blocks != (numel + block_size - 1) / block_size) {
          malformed("tensor '" + e.name + "' has inconsistent block geometry");
        }
        if (r.remaining() / 8 < n_blocks) {
          throw TruncatedInput("checkpoint: truncated scales of '" + e.name + "'");
        }
        std::vector<double> scales(n_blocks);
        for (double& s : scales) s = r.f64();
        auto codes = r.bytes(static_cast<std::size_t>(packed_size(numel)));
        std::array<double, Codebook::kLevels> levels{};
        for (double& level : levels) level = r.f64();
        try {
          e.data = QuantizedTensor(rows, cols, static_cast<int>(block_size), std::move(scales),
                                   std::vector<std::uint8_t>(codes.begin(), codes.end()),
                                   Codebook::from_levels(levels));
        } catch (const ContractError& err) {
          malformed("tensor '" + e.name + "': " + err.what());
        }
      } else {
        malformed("tensor '" + e.name + "' has unknown kind " + std::to_string(kind));
      }
      ckpt.entries.push_back(std::move(e));
    }
    if (!r.at_end()) malformed("trailing bytes after last tensor");
    return ckpt;
  } catch (const TruncatedInput& e) {
    throw CheckpointError(CheckpointErrc::kTruncated, e.what());
  }
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
  write_file(path, encode_checkpoint(ckpt));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) {
    throw DataError("checkpoint not found: " + path.string());
  }
  return decode_checkpoint(read_file(path));
}

}  // namespace dqlora
