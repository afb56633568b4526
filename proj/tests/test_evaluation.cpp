#include <doctest.h>

#include <functional>
#include <map>

#include "dqlora/errors.hpp"
#include "dqlora/evaluation.hpp"
#include "dqlora/rng.hpp"

using namespace dqlora;

namespace {

// Memoized recursion over suffixes; deliberately not the library's table.
Index reference_distance(const Transcript& a, const Transcript& b) {
  std::map<std::pair<std::size_t, std::size_t>, Index> memo;
  std::function<Index(std::size_t, std::size_t)> d = [&](std::size_t i, std::size_t j) -> Index {
    if (i == a.size()) return static_cast<Index>(b.size() - j);
    if (j == b.size()) return static_cast<Index>(a.size() - i);
    const auto key = std::make_pair(i, j);
    if (auto it = memo.find(key); it != memo.end()) return it->second;
    const Index best = std::min({d(i + 1, j) + 1, d(i, j + 1) + 1, d(i + 1, j + 1) + (a[i] != b[j])});
    memo[key] = best;
    return best;
  };
  return d(0, 0);
}

Transcript random_transcript(Rng& rng, int max_len) {
  Transcript t(static_cast<std::size_t>(rng.uniform_int(0, max_len)));
  for (int& v : t) v = static_cast<int>(rng.uniform_int(1, 4));
  return t;
}

}  // namespace

TEST_CASE("wer worked values") {
  CHECK(wer({1, 2, 3}, {1, 3}) == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  CHECK(wer({1, 2, 3}, {}) == 1.0);
  CHECK(wer({1, 2, 3}, {1, 2, 3}) == 0.0);
  CHECK(wer({1}, {2, 2, 2}) == 3.0);
  CHECK(edit_distance({}, {}) == 0);
  CHECK_THROWS_AS(wer({}, {1}), ContractError);
}

TEST_CASE("edit distance agrees with the reference on random pairs") {
  Rng rng(99);
  for (int rep = 0; rep < 1000; ++rep) {
    const Transcript a = random_transcript(rng, 10);
    const Transcript b = random_transcript(rng, 10);
    const Transcript c = random_transcript(rng, 10);
    const Index ab = edit_distance(a, b);
    CHECK(ab == reference_distance(a, b));
    CHECK(ab == edit_distance(b, a));
    CHECK(edit_distance(a, c) <= ab + edit_distance(b, c));
    CHECK(ab >= static_cast<Index>(std::max(a.size(), b.size()) - std::min(a.size(), b.size())));
  }
}

TEST_CASE("parameter memory accounting") {
  Checkpoint ckpt;
  ckpt.entries.push_back({"plain", Matrix::Zero(10, 100)});
  CHECK(param_memory_report(ckpt).total_bytes() == 8000);

  Rng rng(1);
  Matrix w(64, 64);
  for (Index i = 0; i < w.size(); ++i) w.data()[i] = rng.uniform(-1, 1);
  Checkpoint q;
  q.entries.push_back({"q", quantize(w, 64, Codebook::linear_symmetric())});
  q.entries.push_back({"meta.val_ter", Matrix::Constant(1, 1, 0.5)});
  const MemoryReport r = param_memory_report(q);
  // 2048 packed bytes + 64 scales · 8 + 16 levels · 8.
  CHECK(r.quantized_bytes == 2688);
  CHECK(r.plain_bytes == 0);
  CHECK(r.megabytes() == doctest::Approx(0.002688));
}

TEST_CASE("report renders the published row verbatim") {
  const ReportRow row{"DQLoRA", "~50", 0.1545, 0.8374, 0.005, 3875.8};
  const std::string text = emit_report(std::span(&row, 1));
  CHECK(text.find("15.45%") != std::string::npos);
  CHECK(text.find("83.74%") != std::string::npos);
  CHECK(text.find(" 0.005 ") != std::string::npos);
  CHECK(text.find("3875.8\n") != std::string::npos);
  const std::string expected =
      "# BASELINE COMPARISON (WER columns: token error rate)\n"
      "Model  | Params (M) | WER (Clean) | WER (Noisy) |   RTF | Memory (MB)\n"
      "-------+------------+-------------+-------------+-------+------------\n"
      "DQLoRA |        ~50 |      15.45% |      83.74% | 0.005 |      3875.8\n";
  CHECK(text == expected);

  const auto back = parse_report(text);
  REQUIRE(back.size() == 1);
  CHECK(back[0].model == "DQLoRA");
  CHECK(back[0].params == "~50");
  CHECK(back[0].wer_clean == doctest::Approx(0.1545));
  CHECK(back[0].wer_noisy == doctest::Approx(0.8374));
  CHECK(back[0].rtf == 0.005);
  CHECK(back[0].memory_mb == 3875.8);
  CHECK(emit_report(back) == text);

  const ReportRow bad{"a|b", "1", 0, 0, 0, 0};
  CHECK_THROWS_AS(emit_report(std::span(&bad, 1)), ContractError);
  CHECK(format_params_millions(13131) == "0.01313");
  CHECK(format_params_millions(50'000'000) == "50");
}

TEST_CASE("metrics files") {
  const Metrics m = {{"wer_clean[teacher]", "0.01"}, {"rtf[teacher]", "0.002"}};
  const std::string text = format_metrics(m);
  CHECK(text == "wer_clean[teacher]\t0.01\nrtf[teacher]\t0.002\n");
  CHECK(parse_metrics(text) == m);
  CHECK_THROWS_AS(parse_metrics("no tab here\n"), DataError);
}

TEST_CASE("real-time factor") {
  CHECK(real_time_factor(0.005, 1.0) == doctest::Approx(0.005).epsilon(1e-15));
  CHECK(real_time_factor(2.5, 2.5) == 1.0);
  CHECK_THROWS_AS(real_time_factor(1.0, 0.0), DataError);
}

TEST_CASE("recognition and timing") {
  CorpusConfig cc;
  cc.n_train = 1;
  cc.n_val = 1;
  cc.n_test = 10;
  const Corpus corpus = generate_corpus(cc);
  const Encoder enc = init_encoder(EncoderConfig::student(), 1);
  const auto test = corpus.split(Split::kTest);

  const ErrorTally clean = evaluate_ter(enc, test, std::nullopt);
  CHECK(clean.ref_tokens > 0);
  CHECK(clean.rate() >= 0.0);
  CHECK(evaluate_ter(enc, test, 5.0).errors == evaluate_ter(enc, test, 5.0).errors);
  CHECK(utterance_features(*test[0], 5.0).frames == utterance_features(*test[0], 5.0).frames);
  CHECK(utterance_features(*test[0], 5.0).frames != utterance_features(*test[0], std::nullopt).frames);

  std::vector<Waveform> audio;
  for (const Utterance* u : test) audio.push_back(u->clean);
  const double rtf = measure_rtf(enc, audio, 2);
  CHECK(rtf > 0.0);
  CHECK(rtf < 1.0);
  CHECK_THROWS_AS(measure_rtf(enc, std::span(audio).first(9), 1), ContractError);
}
