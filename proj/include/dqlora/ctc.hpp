// SPDX-License-Identifier: Apache-2.0
//
// Connectionist Temporal Classification: loss and gradient by log-domain
// forward-backward, a brute-force path-enumeration oracle, greedy decoding.
#pragma once

#include <cstdint>
#include <limits>
#include <string>
#include <vector>

#include "dqlora/errors.hpp"
#include "dqlora/tensor.hpp"

namespace dqlora {

inline constexpr int kBlank = 0;

/// Token ids 1..V-1; blank (0) never appears.
using Transcript = std::vector<int>;

/// Printable glyphs for token ids; id 0 is the blank.
struct Vocabulary {
  int size = 9;
  std::string glyph(int id) const;
  std::string render(const Transcript& y) const;
};

/// Checks token range and blank absence; throws ContractError.
void validate_transcript(const Transcript& y, Index vocab_size);

/// Minimum frames needed: U plus one separating blank per adjacent repeat.
Index min_frames(const Transcript& y);
bool ctc_feasible(const Transcript& y, Index frames);

struct CtcResult {
  double loss = 0.0;
  /// d loss / d log_probs, same shape as the input.
  Matrix grad;
};

/// Loss and gradient for one utterance. Rows of log_probs must be
/// normalized log-distributions (within 1e-6).
CtcResult ctc_forward_backward(const Matrix& log_probs, const Transcript& y);

/// Scalar loss tensor with its gradient registered on `g`.
Tensor ctc_loss(Graph& g, const Tensor& log_probs, const Transcript& y);

/// Collapse a frame-level label path: merge repeats, then drop blanks.
template <typename Range>
Transcript collapse_path(const Range& path) {
  Transcript out;
  int prev = -1;
  for (int label : path) {
    if (label != prev && label != kBlank) out.push_back(label);
    prev = label;
  }
  return out;
}

/// −log Σ over every V^T frame path that collapses to y. Reference only.
template <typename Derived>
double ctc_oracle(const Eigen::MatrixBase<Derived>& log_probs,
                  const Transcript& y) {
  const Index T = log_probs.rows();
  const Index V = log_probs.cols();
  double n_paths = 1.0;
  for (Index t = 0; t < T; ++t) n_paths *= static_cast<double>(V);
  if (n_paths > 1e6) throw ContractError("ctc_oracle: V^T exceeds 1e6");

  std::vector<int> path(static_cast<std::size_t>(T), 0);
  double total = -std::numeric_limits<double>::infinity();
  while (true) {
    if (collapse_path(path) == y) {
      double lp = 0.0;
      for (Index t = 0; t < T; ++t) lp += log_probs(t, path[static_cast<std::size_t>(t)]);
      total = log_sum_exp(total, lp);
    }
    Index t = T - 1;
    while (t >= 0 && ++path[static_cast<std::size_t>(t)] == V) {
      path[static_cast<std::size_t>(t)] = 0;
      --t;
    }
    if (t < 0) break;
  }
  if (total == -std::numeric_limits<double>::infinity()) {
    throw InfeasibleError("ctc_oracle: no path collapses to the target");
  }
  return -total;
}

/// Per-frame argmax (ties to the lowest id), then collapse.
template <typename Derived>
Transcript greedy_decode(const Eigen::MatrixBase<Derived>& log_probs) {
  std::vector<int> path(static_cast<std::size_t>(log_probs.rows()));
  for (Index t = 0; t < log_probs.rows(); ++t) {
    Index best = 0;
    for (Index v = 1; v < log_probs.cols(); ++v) {
      if (log_probs(t, v) > log_probs(t, best)) best = v;
    }
    path[static_cast<std::size_t>(t)] = static_cast<int>(best);
  }
  return collapse_path(path);
}

}  // namespace dqlora
