// End-to-end acceptance run. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails.
//
//   acceptance [criterion ...]     (default: all)
#include <CLI11.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <set>
#include <sstream>

#include "dqlora/binary_io.hpp"
#include "dqlora/checkpoint.hpp"
#include "dqlora/config.hpp"
#include "dqlora/cli.hpp"
#include "dqlora/ctc.hpp"
#include "dqlora/evaluation.hpp"
#include "dqlora/losses.hpp"
#include "dqlora/models.hpp"
#include "dqlora/quant.hpp"
#include "dqlora/signal.hpp"
#include "dqlora/training.hpp"
#include "support.hpp"

using namespace dqlora;
using dqlora::testing::all_transcripts;
using dqlora::testing::gradient_error;
using dqlora::testing::random_matrix;
namespace fs = std::filesystem;

namespace {

// Pinned tolerances.
constexpr double kCtcTol = 1e-9;
constexpr double kConservationTol = 1e-9;
constexpr double kGradTol = 1e-6;
constexpr double kGradStep = 1e-5;
constexpr int kGradInstances = 20;
constexpr double kWorkedBlockTol = 1e-6;
constexpr double kBudget = 0.10;
constexpr double kTeacherCleanTer = 0.10;
constexpr double kCoalUnitTol = 1e-12;
constexpr double kSnrTol = 1e-6;
constexpr double kGainTol = 1e-9;
constexpr int kSeeds = 5;

struct Outcome {
  bool pass = false;
  std::string detail;
};

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// ---- 1, 2 -----------------------------------------------------------------

Outcome ctc_oracle_equivalence() {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(1001);
  double worst = 0.0;
  long compared = 0;
  for (int V = 2; V <= 4; ++V) {
    const auto ys = all_transcripts(V, 3);
    for (Index T = 1; T <= 6; ++T) {
      for (int draw = 0; draw < 100; ++draw) {
        const Matrix lp = log_softmax_rows(random_matrix(T, V, rng, -3, 3));
        for (const auto& y : ys) {
          if (!ctc_feasible(y, T)) continue;
          worst = std::max(worst, std::abs(ctc_forward_backward(lp, y).loss - ctc_oracle(lp, y)));
          ++compared;
        }
      }
    }
  }
  const double secs = seconds_since(t0);
  return {worst <= kCtcTol && secs < 60.0,
          std::to_string(compared) + " pairs, max |diff| " + fmt("%.2e", worst) + ", " + fmt("%.1f", secs) + " s"};
}

Outcome ctc_conservation() {
  Rng rng(1002);
  double worst = 0.0;
  for (int V = 2; V <= 3; ++V) {
    for (Index T = 1; T <= 4; ++T) {
      for (int draw = 0; draw < 20; ++draw) {
        const Matrix lp = log_softmax_rows(random_matrix(T, V, rng, -3, 3));
        double mass = 0.0;
        for (const auto& y : all_transcripts(V, static_cast<int>(T))) {
          if (ctc_feasible(y, T)) mass += std::exp(-ctc_forward_backward(lp, y).loss);
        }
        worst = std::max(worst, std::abs(mass - 1.0));
      }
    }
  }
  return {worst <= kConservationTol, "max |sum - 1| " + fmt("%.2e", worst)};
}

// ---- 3 --------------------------------------------------------------------

Outcome gradient_suite() {
  Rng rng(1003);
  std::map<std::string, double> worst;
  auto record = [&](const std::string& name, double e) { worst[name] = std::max(worst[name], e); };
  auto check = [&](const std::string& name, const std::vector<Tensor>& leaves,
                   const std::function<Tensor(Graph&)>& loss) {
    record(name, gradient_error(leaves, loss, kGradStep));
  };

  for (int i = 0; i < kGradInstances; ++i) {
    const Index T = 4 + i % 3;
    const int V = 5;
    Tensor logits(random_matrix(T, V, rng), true);
    Tensor other(random_matrix(T, V, rng), true);
    const Transcript y = {1 + i % 4, 1 + (i + 1) % 4};
    check("ctc", {logits}, [&](Graph& g) { return ctc_loss(g, log_softmax(g, logits), y); });
    const KlDirection dir = i % 2 ? KlDirection::kTeacherStudent : KlDirection::kStudentTeacher;
    const double tau = 1.0 + 0.5 * (i % 3);
    check("kl", {logits}, [&](Graph& g) { return kl_distill(g, logits, Tensor::constant(other.value()), tau, dir); });

    Tensor hs(random_matrix(T, 3, rng), true);
    const Tensor ht = Tensor::constant(random_matrix(T, 3, rng));
    for (CoalescenceMode mode : {CoalescenceMode::kMean, CoalescenceMode::kWeightedSum}) {
      const CoalescenceConfig cfg{0.1 * i, mode, i % 3 == 0};
      check(mode == CoalescenceMode::kMean ? "coalescence(mean)" : "coalescence(weighted_sum)", {hs},
            [&](Graph& g) {
              return coalescence_loss(g, {hs, LatentRole::kStudent}, {ht, LatentRole::kTeacher}, cfg);
            });
    }
    const LossWeights w{rng.uniform(0, 2), rng.uniform(0, 1), tau};
    const CoalescenceConfig wcfg{0.1, CoalescenceMode::kWeightedSum, false};
    Tensor p(random_matrix(3, 3, rng), true);
    check("total", {logits, hs, p}, [&](Graph& g) {
      const Tensor lp = log_softmax(g, logits);
      return combine_losses(g, ctc_loss(g, lp, y), kl_distill(g, logits, Tensor::constant(other.value()), tau),
                            coalescence_loss(g, {matmul(g, hs, transpose(g, p)), LatentRole::kStudent},
                                             {ht, LatentRole::kTeacher}, wcfg),
                            w);
    });

    // Encoder layers one at a time.
    Tensor x(random_matrix(T, 6, rng), true);
    Tensor W(random_matrix(4, 6, rng), true);
    Tensor b(random_matrix(1, 4, rng), true);
    check("layer:affine", {x, W, b}, [&](Graph& g) {
      return sum(g, tanh(g, add_bias(g, matmul(g, x, transpose(g, W)), b)));
    });
    Tensor h(random_matrix(T, 4, rng), true);
    Tensor k(random_matrix(3, 4, rng), true);
    check("layer:temporal_conv", {h, k}, [&](Graph& g) { return sum(g, tanh(g, temporal_conv(g, h, k))); });
    check("layer:tanh", {h}, [&](Graph& g) { return squared_norm(g, tanh(g, h)); });
    check("layer:log_softmax", {h}, [&](Graph& g) { return sum(g, mul(g, log_softmax(g, h), h)); });
    QuantizedLinear q = QuantizedLinear::from_dense(random_matrix(4, 6, rng), random_matrix(1, 4, rng), 1, 2.0,
                                                    8, Codebook::linear_symmetric(), rng);
    Tensor qa = q.lora_a();
    Tensor qb = q.lora_b();
    qb.mutable_value() = random_matrix(qb.rows(), qb.cols(), rng, -0.5, 0.5);
    check("layer:quantized_lora", {x, qa, qb}, [&](Graph& g) { return sum(g, tanh(g, q.forward(g, x))); });

    const Encoder enc = init_encoder({2, 4, 3, kNumTokens + 1, kFeatureBins}, 2000 + static_cast<std::uint64_t>(i));
    std::vector<Tensor> leaves;
    for (const NamedTensor& np : trainable_parameters(enc)) leaves.push_back(np.tensor);
    const FeatureSequence f{random_matrix(T + 2, kFeatureBins, rng, -14, 2)};
    check("layer:encoder", leaves, [&](Graph& g) {
      return ctc_loss(g, log_softmax(g, encoder_forward(g, enc, f).logits), y);
    });
  }
  double overall = 0.0;
  std::string detail;
  for (const auto& [name, e] : worst) {
    overall = std::max(overall, e);
    detail += name + "=" + fmt("%.1e", e) + " ";
  }
  return {overall <= kGradTol, std::to_string(kGradInstances) + " instances each; " + detail};
}

// ---- 4, 6, 9, 10, 12 -----------------------------------------------------

Outcome quant_round_trip() {
  Rng rng(1004);
  bool ok = true;
  double worst_ratio = 0.0;
  for (int i = 0; i < 10000; ++i) {
    const Codebook cb = i % 2 ? Codebook::normal_quantile() : Codebook::linear_symmetric();
    const Matrix x = random_matrix(1, 64, rng, -3, 3);
    const QuantizedTensor q = quantize(x, 64, cb);
    const double bound = q.scales()[0] * cb.max_gap() / 2.0;
    const double err = (dequantize(q) - x).cwiseAbs().maxCoeff();
    ok = ok && err <= bound * (1.0 + 1e-12);
    worst_ratio = std::max(worst_ratio, err / bound);
  }
  Matrix w(1, 4);
  w << 1.0, -2.0, 0.5, 0.25;
  const Matrix d = dequantize(quantize(w, 4, Codebook::linear_symmetric()));
  const double expected[] = {1.142857, -2.0, 0.571429, 0.285714};
  double worked = 0.0;
  for (int i = 0; i < 4; ++i) worked = std::max(worked, std::abs(d(0, i) - expected[i]));
  return {ok && worked <= kWorkedBlockTol,
          "10000 blocks, max err/bound " + fmt("%.4f", worst_ratio) + "; worked block max dev " + fmt("%.1e", worked)};
}

Outcome trainable_budget() {
  const Encoder q = freeze_and_quantize(init_encoder(EncoderConfig::student(), 1), AdapterConfig{}, 1);
  const auto inv = parameter_inventory(q);
  Index trainable = 0, total = 0;
  for (const ParamInfo& p : inv) {
    total += p.numel;
    if (p.trainable) trainable += p.numel;
  }
  const double f = trainable_fraction(inv);
  return {f < kBudget, std::to_string(trainable) + "/" + std::to_string(total) + " = " + fmt("%.4f", f)};
}

Outcome coalescence_units() {
  Graph g;
  const Tensor same = Tensor::constant(Matrix::Constant(2, 3, 0.7));
  const CoalescenceConfig ws{std::log(2.0), CoalescenceMode::kWeightedSum, false};
  const double zero = coalescence_loss(g, {same}, {same, LatentRole::kTeacher}, ws).item();
  const double v = coalescence_loss(g, {Tensor::constant(Matrix::Ones(2, 1))},
                                    {Tensor::constant(Matrix::Zero(2, 1)), LatentRole::kTeacher}, ws)
                       .item();
  return {zero == 0.0 && std::abs(v - 0.75) <= kCoalUnitTol,
          "identical -> " + fmt("%g", zero) + ", unit case -> " + fmt("%.17g", v)};
}

Index dp_reference(const Transcript& a, const Transcript& b) {
  std::vector<std::vector<Index>> d(a.size() + 1, std::vector<Index>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) d[i][0] = static_cast<Index>(i);
  for (std::size_t j = 0; j <= b.size(); ++j) d[0][j] = static_cast<Index>(j);
  for (std::size_t i = 1; i <= a.size(); ++i) {
    for (std::size_t j = 1; j <= b.size(); ++j) {
      d[i][j] = std::min({d[i - 1][j] + 1, d[i][j - 1] + 1, d[i - 1][j - 1] + (a[i - 1] != b[j - 1])});
    }
  }
  return d[a.size()][b.size()];
}

Outcome wer_oracle() {
  Rng rng(1010);
  int agree = 0;
  for (int i = 0; i < 1000; ++i) {
    Transcript a(static_cast<std::size_t>(rng.uniform_int(1, 12)));
    Transcript b(static_cast<std::size_t>(rng.uniform_int(0, 12)));
    for (int& v : a) v = static_cast<int>(rng.uniform_int(1, kNumTokens));
    for (int& v : b) v = static_cast<int>(rng.uniform_int(1, kNumTokens));
    const double ref = static_cast<double>(dp_reference(a, b)) / static_cast<double>(a.size());
    agree += wer(a, b) == ref;
  }
  const ReportRow row{"DQLoRA (Ours)", "~50", 0.1545, 0.8374, 0.005, 3875.8};
  const std::string text = emit_report(std::span(&row, 1));
  const std::string last = text.substr(text.rfind('\n', text.size() - 2) + 1);
  std::string cells;
  std::istringstream in(last);
  std::string cell;
  std::vector<std::string> parts;
  while (std::getline(in, cell, '|')) {
    cell.erase(0, cell.find_first_not_of(' '));
    cell.erase(cell.find_last_not_of(" \n") + 1);
    parts.push_back(cell);
  }
  if (parts.size() == 6) cells = parts[2] + " / " + parts[3] + " / " + parts[4] + " / " + parts[5];
  return {agree == 1000 && cells == "15.45% / 83.74% / 0.005 / 3875.8",
          std::to_string(agree) + "/1000 exact; row renders \"" + cells + "\""};
}

Outcome snr_mixing(const Corpus& corpus) {
  double worst = 0.0;
  for (const Utterance& u : corpus.utterances) {
    worst = std::max(worst, std::abs(measured_snr_db(u.clean, mix_at_snr(u.clean, {5.0}, u.noise_seed)) - 5.0));
  }
  const double gain = noise_gain(0.42, 0.42, 5.0);
  const double gain_err = std::abs(gain - std::pow(10.0, -0.25));
  return {worst <= kSnrTol && gain_err <= kGainTol,
          std::to_string(corpus.utterances.size()) + " utterances, max |SNR - 5| " + fmt("%.2e", worst) +
              " dB; gain " + fmt("%.12f", gain)};
}

// ---- 5, 7, 8: the seeded pipeline ----------------------------------------

struct SeedRun {
  double teacher_clean = 0.0;
  double ter_l0 = 0.0;
  double ter_l1 = 0.0;
  double early_mu0 = 0.0;
  double early_mu = 0.0;
  StageResult distill;
  fs::path dir;
};

SeedRun run_seed(const Corpus& corpus, std::uint64_t seed, const fs::path& root) {
  SeedRun r;
  r.dir = root / ("seed" + std::to_string(seed));
  auto cfg = [&](Stage stage, const std::string& sub) {
    Config conf;
    conf.set("stage", stage_name(stage));
    conf.set("seed", std::to_string(seed));
    TrainConfig c = TrainConfig::from_config(conf);
    c.out_dir = r.dir / sub;
    c.teacher_checkpoint = r.dir / "teacher.dqck";
    c.student_checkpoint = r.dir / "student_base.dqck";
    return c;
  };
  run_stage(cfg(Stage::kTeacher, ""), &corpus);
  run_stage(cfg(Stage::kStudentBase, ""), &corpus);
  TrainConfig l0 = cfg(Stage::kDistill, "lambda0");
  l0.weights.lambda = 0.0;
  run_stage(l0, &corpus);
  TrainConfig l1 = cfg(Stage::kDistill, "lambda1");
  l1.weights.lambda = 1.0;
  r.distill = run_stage(l1, &corpus);
  TrainConfig co = cfg(Stage::kDistill, "coalesce");
  co.weights.mu = 0.1;
  co.coalescence.alpha = 0.1;
  run_stage(co, &corpus);

  const auto test = corpus.split(Split::kTest);
  const auto val = corpus.split(Split::kValidation);
  const Encoder teacher = from_checkpoint(read_checkpoint(r.dir / "teacher.dqck")).encoder;
  const ModelBundle b0 = from_checkpoint(read_checkpoint(r.dir / "lambda0" / "distill.dqck"));
  const ModelBundle b1 = from_checkpoint(read_checkpoint(r.dir / "lambda1" / "distill.dqck"));
  const ModelBundle bc = from_checkpoint(read_checkpoint(r.dir / "coalesce" / "distill.dqck"));
  r.teacher_clean = evaluate_ter(teacher, test, std::nullopt).rate();
  r.ter_l0 = evaluate_ter(b0.encoder, test, 5.0).rate();
  r.ter_l1 = evaluate_ter(b1.encoder, test, 5.0).rate();
  r.early_mu0 = early_latent_distance(teacher, b1.encoder, *b1.projection, val, 5.0);
  r.early_mu = early_latent_distance(teacher, bc.encoder, *bc.projection, val, 5.0);
  return r;
}

Outcome freeze_contract(const SeedRun& r) {
  const ModelBundle b = from_checkpoint(read_checkpoint(r.dir / "lambda1" / "distill.dqck"));
  const Encoder base = from_checkpoint(read_checkpoint(r.dir / "student_base.dqck")).encoder;
  const std::uint64_t fresh = frozen_checksum(freeze_and_quantize(base, AdapterConfig{}, 0));
  int changed = 0;
  for (const NamedTensor& p : trainable_parameters(b.encoder)) {
    if (p.name.ends_with("lora_B") && !p.tensor.value().isZero(0)) ++changed;
  }
  const StageResult& d = r.distill;
  const bool teacher_ok = d.teacher_bytes_before == d.teacher_bytes_after;
  const bool frozen_ok = d.frozen_before == d.frozen_after && frozen_checksum(b.encoder) == fresh;
  return {teacher_ok && frozen_ok && changed >= 1,
          std::string("teacher file ") + (teacher_ok ? "unchanged" : "CHANGED") + ", frozen base " +
              (frozen_ok ? "unchanged" : "CHANGED") + ", " + std::to_string(changed) + " lora_B tensors moved"};
}

// ---- 11 --------------------------------------------------------------------

std::string strip_timing(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::string line, out;
  const bool is_log = p.extension() == ".log";
  const bool is_metrics = p.filename() == "metrics.tsv";
  while (std::getline(in, line)) {
    if (is_metrics && (line.rfind("rtf", 0) == 0 || line.rfind("peak_rss_mb", 0) == 0)) continue;
    if (is_log) line = line.substr(0, line.rfind('\t'));  // last column is wall time
    out += line + "\n";
  }
  return out;
}

bool cli_chain(const fs::path& dir) {
  fs::remove_all(dir);
  fs::create_directories(dir);
  const std::string corpus = (dir / "corpus.dql").string();
  {
    std::ofstream cfg(dir / "chain.cfg");
    cfg << "corpus = " << corpus << "\ncorpus.n_train = 40\ncorpus.n_val = 10\ncorpus.n_test = 20\n"
        << "epochs = 2\nout = " << dir.string() << "\neval.rtf_utterances = 10\neval.rtf_repetitions = 1\n";
  }
  const std::string cfg = (dir / "chain.cfg").string();
  std::ostringstream sink;
  const std::vector<std::vector<std::string>> steps = {
      {"datagen", "--config", cfg},
      {"train", "--config", cfg, "--stage", "teacher", "--seed", "3"},
      {"train", "--config", cfg, "--stage", "student_base", "--seed", "3"},
      {"train", "--config", cfg, "--stage", "distill", "--seed", "3", "--mu", "0.1", "--alpha", "0.1"},
      {"evaluate", "--config", cfg, "--seed", "3"},
  };
  for (const auto& s : steps) {
    if (run_cli(s, sink, sink) != kExitOk) return false;
  }
  return true;
}

Outcome determinism(const fs::path& root) {
  const fs::path a = root / "chain_a";
  const fs::path b = root / "chain_b";
  if (!cli_chain(a) || !cli_chain(b)) return {false, "CLI chain failed"};
  int compared = 0;
  std::string diff;
  for (const auto& entry : fs::directory_iterator(a)) {
    const fs::path name = entry.path().filename();
    if (name == "chain.cfg") continue;
    const std::string ext = name.extension().string();
    bool same;
    if (ext == ".log" || name == "metrics.tsv") {
      same = strip_timing(a / name) == strip_timing(b / name);
    } else if (name == "report.txt") {
      continue;  // carries RTF; its other fields are in metrics.tsv
    } else {
      same = read_file(a / name) == read_file(b / name);
    }
    ++compared;
    if (!same) diff += " " + name.string();
  }
  return {diff.empty() && compared >= 8,
          std::to_string(compared) + " files compared" + (diff.empty() ? "" : ", differ:" + diff)};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"acceptance criteria"};
  std::vector<int> only;
  std::string work = (fs::temp_directory_path() / "dqlora_acceptance").string();
  app.add_option("criteria", only, "criterion numbers to run (default: all)")->check(CLI::Range(1, 12));
  app.add_option("--work", work, "scratch directory");
  CLI11_PARSE(app, argc, argv);
  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int c) { return selected.empty() || selected.count(c) > 0; };

  int failures = 0;
  auto report = [&](int id, const std::string& title, const Outcome& o) {
    std::cout << "criterion " << id << ": " << (o.pass ? "PASS" : "FAIL") << "  " << title << " (" << o.detail
              << ")" << std::endl;
    failures += !o.pass;
  };

  if (wanted(1)) report(1, "CTC oracle equivalence", ctc_oracle_equivalence());
  if (wanted(2)) report(2, "CTC total probability", ctc_conservation());
  if (wanted(3)) report(3, "gradient suite", gradient_suite());
  if (wanted(4)) report(4, "quantization round trip", quant_round_trip());

  const bool pipeline = wanted(5) || wanted(7) || wanted(8);
  std::optional<Corpus> corpus;
  if (pipeline || wanted(12)) corpus = generate_corpus(CorpusConfig{});

  std::vector<SeedRun> runs;
  if (pipeline) {
    const fs::path root = fs::path(work) / "pipeline";
    fs::remove_all(root);
    const int n = wanted(7) || wanted(8) ? kSeeds : 1;
    for (int s = 1; s <= n; ++s) {
      const auto t0 = std::chrono::steady_clock::now();
      runs.push_back(run_seed(*corpus, static_cast<std::uint64_t>(s), root));
      const SeedRun& r = runs.back();
      std::cerr << "  seed " << s << ": teacher clean " << fmt("%.4f", r.teacher_clean) << ", noisy lambda=0 "
                << fmt("%.4f", r.ter_l0) << ", lambda=1 " << fmt("%.4f", r.ter_l1) << ", early distance mu=0 "
                << fmt("%.4f", r.early_mu0) << ", mu=0.1 " << fmt("%.4f", r.early_mu) << " ("
                << fmt("%.0f", seconds_since(t0)) << " s)" << std::endl;
    }
  }

  if (wanted(5)) report(5, "freeze contract", freeze_contract(runs.front()));
  if (wanted(6)) report(6, "trainable budget", trainable_budget());
  if (wanted(7)) {
    std::vector<double> l0, l1, teacher;
    for (const SeedRun& r : runs) {
      l0.push_back(r.ter_l0);
      l1.push_back(r.ter_l1);
      teacher.push_back(r.teacher_clean);
    }
    const double worst_teacher = *std::max_element(teacher.begin(), teacher.end());
    const bool pass = median(l1) <= median(l0) && worst_teacher <= kTeacherCleanTer;
    report(7, "distillation A/B at 5 dB",
           {pass, "median noisy TER lambda=1 " + fmt("%.4f", median(l1)) + " vs lambda=0 " + fmt("%.4f", median(l0)) +
                      "; worst teacher clean TER " + fmt("%.4f", worst_teacher)});
  }
  if (wanted(8)) {
    std::vector<double> mu0, mu;
    for (const SeedRun& r : runs) {
      mu0.push_back(r.early_mu0);
      mu.push_back(r.early_mu);
    }
    report(8, "coalescence aligns early latents",
           {median(mu) < median(mu0),
            "median early distance mu=0.1 " + fmt("%.4f", median(mu)) + " vs mu=0 " + fmt("%.4f", median(mu0))});
  }
  if (wanted(9)) report(9, "coalescence unit values", coalescence_units());
  if (wanted(10)) report(10, "WER oracle and report row", wer_oracle());
  if (wanted(11)) report(11, "determinism of the CLI chain", determinism(fs::path(work)));
  if (wanted(12)) report(12, "SNR mixing", snr_mixing(*corpus));

  return failures == 0 ? 0 : 1;
}
