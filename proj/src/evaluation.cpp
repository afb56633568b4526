// SPDX-License-Identifier: Apache-2.0
#include "dqlora/evaluation.hpp"

#include <sys/resource.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <sstream>

#include "dqlora/errors.hpp"

namespace dqlora {

namespace {

std::string trim(const std::string& s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string::npos) return "";
  return s.substr(first, s.find_last_not_of(" \t\r") - first + 1);
}

std::string fmt(const char* pattern, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, pattern, v);
  return buf;
}

std::string percent(double fraction) { return fmt("%.2f", 100.0 * fraction) + "%"; }

double parse_percent(const std::string& cell) {
  std::string s = trim(cell);
  if (s.empty() || s.back() != '%') throw DataError("report: expected a percentage, got '" + s + "'");
  s.pop_back();
  return std::stod(s) / 100.0;
}

}  // namespace

Index edit_distance(const Transcript& ref, const Transcript& hyp) {
  std::vector<Index> prev(hyp.size() + 1), cur(hyp.size() + 1);
  for (std::size_t j = 0; j <= hyp.size(); ++j) prev[j] = static_cast<Index>(j);
  for (std::size_t i = 1; i <= ref.size(); ++i) {
    cur[0] = static_cast<Index>(i);
    for (std::size_t j = 1; j <= hyp.size(); ++j) {
      const Index sub = prev[j - 1] + (ref[i - 1] == hyp[j - 1] ? 0 : 1);
      cur[j] = std::min({sub, prev[j] + 1, cur[j - 1] + 1});
    }
    std::swap(prev, cur);
  }
  return prev[hyp.size()];
}

double wer(const Transcript& ref, const Transcript& hyp) {
  if (ref.empty()) throw ContractError("wer: empty reference");
  return static_cast<double>(edit_distance(ref, hyp)) / static_cast<double>(ref.size());
}

Transcript recognize(const Encoder& enc, const FeatureSequence& feats) {
  Graph g;
  const EncoderOutput out = encoder_forward(g, enc, feats);
  return greedy_decode(out.logits.value());
}

FeatureSequence utterance_features(const Utterance& u, std::optional<double> snr_db) {
  if (!snr_db) return featurize(u.clean);
  return featurize(mix_at_snr(u.clean, NoiseSpec{*snr_db}, u.noise_seed));
}

ErrorTally evaluate_ter(const Encoder& enc, std::span<const Utterance* const> utterances,
                        std::optional<double> snr_db) {
  ErrorTally tally;
  for (const Utterance* u : utterances) {
    const Transcript hyp = recognize(enc, utterance_features(*u, snr_db));
    tally.errors += edit_distance(u->y, hyp);
    tally.ref_tokens += static_cast<Index>(u->y.size());
  }
  return tally;
}

double real_time_factor(double processing_seconds, double audio_seconds) {
  if (!(audio_seconds > 0.0)) throw DataError("real_time_factor: zero audio duration");
  return processing_seconds / audio_seconds;
}

double measure_rtf(const Encoder& enc, std::span<const Waveform> audio, int repetitions) {
  if (audio.size() < 10) throw ContractError("measure_rtf: need at least 10 utterances");
  if (repetitions < 1) throw ContractError("measure_rtf: repetitions must be >= 1");
  double audio_seconds = 0.0;
  for (const Waveform& w : audio) audio_seconds += w.seconds();
  if (!(audio_seconds > 0.0)) throw DataError("measure_rtf: zero audio duration");

  std::size_t sink = 0;
  auto pass = [&] {
    for (const Waveform& w : audio) sink += recognize(enc, featurize(w)).size();
  };
  pass();  // warm-up
  std::vector<double> ratios;
  for (int r = 0; r < repetitions; ++r) {
    const auto start = std::chrono::steady_clock::now();
    pass();
    const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
    ratios.push_back(real_time_factor(std::max(elapsed.count(), 1e-9), audio_seconds));
  }
  std::sort(ratios.begin(), ratios.end());
  const std::size_t mid = ratios.size() / 2;
  const double median = ratios.size() % 2 ? ratios[mid] : 0.5 * (ratios[mid - 1] + ratios[mid]);
  return sink == static_cast<std::size_t>(-1) ? 0.0 : median;
}

MemoryReport param_memory_report(const Checkpoint& ckpt) {
  MemoryReport report;
  for (const CheckpointEntry& e : ckpt.entries) {
    if (e.name.rfind("meta.", 0) == 0) continue;
    if (const auto* q = std::get_if<QuantizedTensor>(&e.data)) {
      report.quantized_bytes += static_cast<std::uint64_t>(packed_size(q->numel())) +
                                8u * static_cast<std::uint64_t>(q->n_blocks()) +
                                8u * Codebook::kLevels;
    } else {
      report.plain_bytes += 8u * static_cast<std::uint64_t>(e.numel());
    }
  }
  return report;
}

std::optional<double> process_peak_rss_mb() {
  rusage usage{};
  if (getrusage(RUSAGE_SELF, &usage) != 0) return std::nullopt;
  return static_cast<double>(usage.ru_maxrss) * 1024.0 / 1e6;  // ru_maxrss is KiB on Linux
}

std::string format_params_millions(Index params) {
  return fmt("%.4g", static_cast<double>(params) / 1e6);
}

std::string emit_report(std::span<const ReportRow> rows) {
  const std::vector<std::string> header = {"Model", "Params (M)", "WER (Clean)",
                                           "WER (Noisy)", "RTF", "Memory (MB)"};
  std::vector<std::vector<std::string>> cells;
  for (const ReportRow& r : rows) {
    if (r.model.find('|') != std::string::npos) throw ContractError("report: model name contains '|'");
    cells.push_back({r.model, r.params, percent(r.wer_clean), percent(r.wer_noisy),
                     fmt("%.3g", r.rtf), fmt("%.5g", r.memory_mb)});
  }
  std::vector<std::size_t> width(header.size());
  for (std::size_t c = 0; c < header.size(); ++c) {
    width[c] = header[c].size();
    for (const auto& row : cells) width[c] = std::max(width[c], row[c].size());
  }
  auto line = [&](const std::vector<std::string>& row) {
    std::string out;
    for (std::size_t c = 0; c < row.size(); ++c) {
      const std::string pad(width[c] - row[c].size(), ' ');
      if (c > 0) out += " | ";
      out += c == 0 ? row[c] + pad : pad + row[c];
    }
    return out + "\n";
  };
  std::string out = "# BASELINE COMPARISON (WER columns: token error rate)\n";
  out += line(header);
  for (std::size_t c = 0; c < width.size(); ++c) {
    if (c > 0) out += "-+-";
    out += std::string(width[c], '-');
  }
  out += "\n";
  for (const auto& row : cells) out += line(row);
  return out;
}

std::vector<ReportRow> parse_report(const std::string& text) {
  std::vector<ReportRow> rows;
  std::istringstream in(text);
  std::string line;
  bool seen_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (line.find_first_not_of("-+ ") == std::string::npos) continue;
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, '|')) cells.push_back(trim(cell));
    if (cells.size() != 6) throw DataError("report: expected 6 columns in '" + line + "'");
    if (!seen_header) {
      if (cells[0] != "Model") throw DataError("report: missing header row");
      seen_header = true;
      continue;
    }
    rows.push_back({cells[0], cells[1], parse_percent(cells[2]), parse_percent(cells[3]),
                    std::stod(cells[4]), std::stod(cells[5])});
  }
  return rows;
}

std::string format_metrics(const Metrics& metrics) {
  std::string out;
  for (const auto& [key, value] : metrics) out += key + "\t" + value + "\n";
  return out;
}

Metrics parse_metrics(const std::string& text) {
  Metrics out;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw DataError("metrics: missing TAB in '" + line + "'");
    out.emplace_back(line.substr(0, tab), line.substr(tab + 1));
  }
  return out;
}

}  // namespace dqlora
