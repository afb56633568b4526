// SPDX-License-Identifier: Apache-2.0
//
// Synthetic tone-language speech, additive noise at a target SNR, and the
// log band-energy frontend shared by every encoder.
//
// Token k (1..8) is a sine at 400 + 250·k Hz. An utterance is one window of
// silence, the token tones back to back, and one window of silence.
#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "dqlora/ctc.hpp"
#include "dqlora/tensor.hpp"

namespace dqlora {

inline constexpr int kSampleRate = 8000;
inline constexpr int kWindow = 200;
inline constexpr int kHop = 80;
inline constexpr int kFeatureBins = 16;
inline constexpr int kFadeSamples = 40;
inline constexpr int kNumTokens = 8;
inline constexpr double kToneAmplitude = 0.8;
inline constexpr int kMinTokenFrames = 8;
inline constexpr int kMaxTokenFrames = 16;
inline constexpr double kEnergyFloor = 1e-6;

double token_frequency(int token);
/// Centre frequency of feature bin b: 250·(b+1) Hz.
double bin_frequency(int bin);

struct Waveform {
  Vector samples;
  int sample_rate = kSampleRate;

  Index size() const { return samples.size(); }
  double seconds() const {
    return static_cast<double>(samples.size()) / sample_rate;
  }
  double power() const;
};

enum class Split : std::uint8_t { kTrain = 0, kValidation = 1, kTest = 2 };

struct Utterance {
  std::uint32_t id = 0;
  Transcript y;
  Waveform clean;
  std::uint64_t noise_seed = 0;
  Split split = Split::kTrain;
};

enum class NoiseKind { kWhiteGaussian };

struct NoiseSpec {
  double snr_db = 5.0;
  NoiseKind kind = NoiseKind::kWhiteGaussian;
};

/// Log band energies, one row per frame, kFeatureBins columns.
struct FeatureSequence {
  Matrix frames;
  Index length() const { return frames.rows(); }
};

Waveform synthesize_utterance(const Transcript& y, std::uint64_t seed);

/// g = sqrt(P_clean / (P_noise · 10^(snr_db/10))).
double noise_gain(double clean_power, double noise_power, double snr_db);

/// clean + g·n for seeded unit-variance noise n, g chosen so the empirical
/// SNR equals spec.snr_db. `gain_out` receives g when non-null.
Waveform mix_at_snr(const Waveform& clean, const NoiseSpec& spec,
                    std::uint64_t seed, double* gain_out = nullptr);

/// 10·log10(Σ clean² / Σ (noisy − clean)²).
double measured_snr_db(const Waveform& clean, const Waveform& noisy);

/// 1 + floor((len − window) / hop); zero when shorter than one window.
Index frame_count(Index samples);

FeatureSequence featurize(const Waveform& w);

// ---- corpus ----------------------------------------------------------------

struct CorpusConfig {
  std::uint32_t n_train = 300;
  std::uint32_t n_val = 100;
  std::uint32_t n_test = 624;
  std::uint64_t seed = 20240501;
  int min_tokens = 3;
  int max_tokens = 8;
};

struct Corpus {
  std::vector<Utterance> utterances;

  std::array<std::uint32_t, 3> counts() const;
  std::vector<const Utterance*> split(Split s) const;
};

/// Deterministic in the config; each utterance draws from its own stream
/// derived from (seed, id). Samples are rounded to float32 on creation so
/// the in-memory corpus matches what the file stores.
Corpus generate_corpus(const CorpusConfig& cfg);

std::vector<std::uint8_t> encode_corpus(const Corpus& corpus);
Corpus decode_corpus(std::span<const std::uint8_t> bytes);

void write_corpus(const std::filesystem::path& path, const Corpus& corpus);
Corpus read_corpus(const std::filesystem::path& path);

/// generate_corpus + write_corpus.
Corpus build_corpus(const CorpusConfig& cfg, const std::filesystem::path& path);

}  // namespace dqlora
