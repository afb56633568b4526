// SPDX-License-Identifier: Apache-2.0
#include "dqlora/signal.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>

#include "dqlora/binary_io.hpp"
#include "dqlora/errors.hpp"
#include "dqlora/rng.hpp"

namespace dqlora {

namespace {

constexpr char kCorpusMagic[] = "DQL1";

struct FrontendTables {
  Vector window;  // Hann, kWindow taps
  Matrix cos_t;   // kWindow × kFeatureBins
  Matrix sin_t;
};

const FrontendTables& frontend_tables() {
  static const FrontendTables tables = [] {
    FrontendTables t;
    t.window.resize(kWindow);
    for (int n = 0; n < kWindow; ++n) {
      t.window[n] = 0.5 - 0.5 * std::cos(2.0 * std::numbers::pi * n / (kWindow - 1));
    }
    t.cos_t.resize(kWindow, kFeatureBins);
    t.sin_t.resize(kWindow, kFeatureBins);
    for (int n = 0; n < kWindow; ++n) {
      for (int b = 0; b < kFeatureBins; ++b) {
        const double phase = 2.0 * std::numbers::pi * bin_frequency(b) * n / kSampleRate;
        t.cos_t(n, b) = std::cos(phase);
        t.sin_t(n, b) = std::sin(phase);
      }
    }
    return t;
  }();
  return tables;
}

}  // namespace

double token_frequency(int token) { return 400.0 + 250.0 * token; }
double bin_frequency(int bin) { return 250.0 * (bin + 1); }

double Waveform::power() const {
  return samples.size() == 0 ? 0.0 : samples.squaredNorm() / samples.size();
}

Waveform synthesize_utterance(const Transcript& y, std::uint64_t seed) {
  for (int token : y) {
    if (token < 1 || token > kNumTokens) {
      throw ContractError("synthesize_utterance: token " + std::to_string(token) +
                          " outside 1.." + std::to_string(kNumTokens));
    }
  }
  Rng rng(seed);
  std::vector<Index> lengths;
  Index total = 2 * kWindow;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const Index n = static_cast<Index>(rng.uniform_int(kMinTokenFrames, kMaxTokenFrames)) * kHop;
    lengths.push_back(n);
    total += n;
  }

  Waveform w;
  w.samples = Vector::Zero(total);
  Index offset = kWindow;
  for (std::size_t i = 0; i < y.size(); ++i) {
    const Index n = lengths[i];
    const double omega = 2.0 * std::numbers::pi * token_frequency(y[i]) / kSampleRate;
    for (Index k = 0; k < n; ++k) {
      const double fade = std::min({1.0, static_cast<double>(k + 1) / kFadeSamples,
                                    static_cast<double>(n - k) / kFadeSamples});
      w.samples[offset + k] = kToneAmplitude * fade * std::sin(omega * static_cast<double>(k));
    }
    offset += n;
  }
  return w;
}

double noise_gain(double clean_power, double noise_power, double snr_db) {
  return std::sqrt(clean_power / (noise_power * std::pow(10.0, snr_db / 10.0)));
}

Waveform mix_at_snr(const Waveform& clean, const NoiseSpec& spec,
                    std::uint64_t seed, double* gain_out) {
  const double p_clean = clean.power();
  if (!(p_clean > 0.0)) throw DataError("mix_at_snr: clean signal is silent");
  Rng rng(seed);
  Vector noise(clean.size());
  for (Index i = 0; i < noise.size(); ++i) noise[i] = rng.normal();
  const double p_noise = noise.squaredNorm() / static_cast<double>(noise.size());
  const double gain = noise_gain(p_clean, p_noise, spec.snr_db);
  if (gain_out) *gain_out = gain;
  Waveform out;
  out.sample_rate = clean.sample_rate;
  out.samples = clean.samples + gain * noise;
  if (!out.samples.allFinite()) throw NumericError("mix_at_snr: non-finite result");
  return out;
}

double measured_snr_db(const Waveform& clean, const Waveform& noisy) {
  const double signal = clean.samples.squaredNorm();
  const double noise = (noisy.samples - clean.samples).squaredNorm();
  return 10.0 * std::log10(signal / noise);
}

Index frame_count(Index samples) {
  if (samples < kWindow) return 0;
  return 1 + (samples - kWindow) / kHop;
}

FeatureSequence featurize(const Waveform& w) {
  const Index T = frame_count(w.size());
  if (T == 0) {
    throw DataError("featurize: waveform of " + std::to_string(w.size()) +
                    " samples is shorter than one window");
  }
  const FrontendTables& tables = frontend_tables();
  Matrix frames(T, kWindow);
  for (Index t = 0; t < T; ++t) {
    frames.row(t) = w.samples.segment(t * kHop, kWindow).cwiseProduct(tables.window).transpose();
  }
  const Matrix re = frames * tables.cos_t;
  const Matrix im = frames * tables.sin_t;
  FeatureSequence f;
  f.frames = (re.array().square() + im.array().square() + kEnergyFloor).log().matrix();
  return f;
}

// ---- corpus ----------------------------------------------------------------

std::array<std::uint32_t, 3> Corpus::counts() const {
  std::array<std::uint32_t, 3> c{0, 0, 0};
  for (const Utterance& u : utterances) ++c[static_cast<std::size_t>(u.split)];
  return c;
}

std::vector<const Utterance*> Corpus::split(Split s) const {
  std::vector<const Utterance*> out;
  for (const Utterance& u : utterances) {
    if (u.split == s) out.push_back(&u);
  }
  return out;
}

Corpus generate_corpus(const CorpusConfig& cfg) {
  if (cfg.n_train == 0 || cfg.n_val == 0 || cfg.n_test == 0) {
    throw ConfigError("corpus split counts must all be positive");
  }
  if (cfg.min_tokens < 1 || cfg.max_tokens < cfg.min_tokens) {
    throw ConfigError("corpus token-length range is empty");
  }
  Corpus corpus;
  const std::array<std::uint32_t, 3> counts{cfg.n_train, cfg.n_val, cfg.n_test};
  std::uint32_t id = 0;
  for (std::size_t s = 0; s < counts.size(); ++s) {
    for (std::uint32_t i = 0; i < counts[s]; ++i, ++id) {
      Rng rng(mix_seed(cfg.seed, id));
      Utterance u;
      u.id = id;
      u.split = static_cast<Split>(s);
      const int length = rng.uniform_int(cfg.min_tokens, cfg.max_tokens);
      for (int k = 0; k < length; ++k) u.y.push_back(rng.uniform_int(1, kNumTokens));
      const std::uint64_t synth_seed = rng.next_u64();
      u.noise_seed = rng.next_u64();
      u.clean = synthesize_utterance(u.y, synth_seed);
      u.clean.samples = u.clean.samples.cast<float>().cast<double>();
      const Index frames = frame_count(u.clean.size());
      if (frames < 2 * static_cast<Index>(u.y.size()) + 1) {
        throw DataError("generated utterance " + std::to_string(id) +
                        " has too few frames for its transcript");
      }
      corpus.utterances.push_back(std::move(u));
    }
  }
  return corpus;
}

std::vector<std::uint8_t> encode_corpus(const Corpus& corpus) {
  ByteWriter w;
  w.text(std::string_view(kCorpusMagic, 4));
  for (std::uint32_t c : corpus.counts()) w.u32(c);
  // Split order: train, validation, test.
  for (Split s : {Split::kTrain, Split::kValidation, Split::kTest}) {
    for (const Utterance* u : corpus.split(s)) {
      w.u32(u->id);
      w.u8(static_cast<std::uint8_t>(u->split));
      w.u32(static_cast<std::uint32_t>(u->y.size()));
      for (int token : u->y) w.u8(static_cast<std::uint8_t>(token));
      w.u64(u->noise_seed);
      w.u32(static_cast<std::uint32_t>(u->clean.size()));
      for (Index i = 0; i < u->clean.size(); ++i) w.f32(static_cast<float>(u->clean.samples[i]));
    }
  }
  return w.take();
}

Corpus decode_corpus(std::span<const std::uint8_t> bytes) {
  ByteReader r(bytes);
  try {
    if (r.text(4) != std::string_view(kCorpusMagic, 4)) {
      throw DataError("corpus: bad magic (expected DQL1)");
    }
    std::array<std::uint32_t, 3> counts{r.u32(), r.u32(), r.u32()};
    Corpus corpus;
    for (std::size_t s = 0; s < counts.size(); ++s) {
      for (std::uint32_t i = 0; i < counts[s]; ++i) {
        Utterance u;
        u.id = r.u32();
        const std::uint8_t tag = r.u8();
        if (tag != s) throw DataError("corpus: utterance " + std::to_string(u.id) + " out of split order");
        u.split = static_cast<Split>(tag);
        const std::uint32_t length = r.u32();
        for (std::uint32_t k = 0; k < length; ++k) u.y.push_back(r.u8());
        validate_transcript(u.y, kNumTokens + 1);
        u.noise_seed = r.u64();
        const std::uint32_t n = r.u32();
        if (r.remaining() / 4 < n) throw TruncatedInput("corpus: truncated samples");
        u.clean.samples.resize(n);
        for (std::uint32_t k = 0; k < n; ++k) u.clean.samples[k] = r.f32();
        if (!u.clean.samples.allFinite()) throw DataError("corpus: non-finite sample");
        corpus.utterances.push_back(std::move(u));
      }
    }
    if (!r.at_end()) throw DataError("corpus: trailing bytes after last utterance");
    return corpus;
  } catch (const ContractError& e) {
    throw DataError(std::string("corpus: ") + e.what());
  }
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
  const auto bytes = encode_corpus(corpus);
  write_file(path, bytes);
}

Corpus read_corpus(const std::filesystem::path& path) {
  return decode_corpus(read_file(path));
}

Corpus build_corpus(const CorpusConfig& cfg, const std::filesystem::path& path) {
  Corpus corpus = generate_corpus(cfg);
  write_corpus(path, corpus);
  return corpus;
}

}  // namespace dqlora
