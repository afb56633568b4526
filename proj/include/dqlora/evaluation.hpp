// SPDX-License-Identifier: Apache-2.0
//
// Recognition metrics, timing, parameter-memory accounting, and the
// comparison report. Tokens of the synthetic language play the role of words,
// so "WER" here is a token error rate.
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "dqlora/checkpoint.hpp"
#include "dqlora/ctc.hpp"
#include "dqlora/models.hpp"
#include "dqlora/signal.hpp"

namespace dqlora {

/// Levenshtein distance with unit substitution, insertion, deletion costs.
Index edit_distance(const Transcript& ref, const Transcript& hyp);

/// edit_distance / |ref|; may exceed 1. Throws ContractError on empty ref.
double wer(const Transcript& ref, const Transcript& hyp);

struct ErrorTally {
  Index errors = 0;
  Index ref_tokens = 0;
  double rate() const {
    return ref_tokens == 0 ? 0.0 : static_cast<double>(errors) / static_cast<double>(ref_tokens);
  }
};

/// Greedy CTC transcript of one feature sequence.
Transcript recognize(const Encoder& enc, const FeatureSequence& feats);

/// Features of an utterance: clean, or mixed at `snr_db` with its own noise seed.
FeatureSequence utterance_features(const Utterance& u, std::optional<double> snr_db);

/// Corpus-level token error rate: Σ edits / Σ reference tokens.
ErrorTally evaluate_ter(const Encoder& enc, std::span<const Utterance* const> utterances,
                        std::optional<double> snr_db);

/// processing time / audio time. Throws DataError on zero audio.
double real_time_factor(double processing_seconds, double audio_seconds);

/// Median over repetitions of (featurize + forward + decode time) / audio
/// time. One untimed warm-up pass runs first. Needs at least 10 waveforms.
double measure_rtf(const Encoder& enc, std::span<const Waveform> audio, int repetitions);

struct MemoryReport {
  std::uint64_t plain_bytes = 0;
  std::uint64_t quantized_bytes = 0;
  std::uint64_t total_bytes() const { return plain_bytes + quantized_bytes; }
  double megabytes() const { return static_cast<double>(total_bytes()) / 1e6; }
};

/// Plain tensors cost 8 bytes per element; quantized tensors cost packed
/// codes + 8 bytes per block scale + 128 bytes of codebook. "meta.*"
/// entries are bookkeeping and excluded.
MemoryReport param_memory_report(const Checkpoint& ckpt);

/// Best-effort peak resident set of this process in MB; nullopt if the
/// platform does not expose it.
std::optional<double> process_peak_rss_mb();

struct ReportRow {
  std::string model;
  std::string params;  // "Params (M)" cell, kept textual ("~50", "0.0131")
  double wer_clean = 0.0;
  double wer_noisy = 0.0;
  double rtf = 0.0;
  double memory_mb = 0.0;
};

/// Formats a parameter count in millions for the Params column.
std::string format_params_millions(Index params);

/// Fixed-width table: Model | Params (M) | WER (Clean) | WER (Noisy) | RTF | Memory (MB).
/// WER cells are percentages with two decimals.
std::string emit_report(std::span<const ReportRow> rows);
std::vector<ReportRow> parse_report(const std::string& text);

using Metrics = std::vector<std::pair<std::string, std::string>>;

/// "key<TAB>value" lines.
std::string format_metrics(const Metrics& metrics);
Metrics parse_metrics(const std::string& text);

}  // namespace dqlora
