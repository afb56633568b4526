// SPDX-License-Identifier: Apache-2.0
#include "dqlora/training.hpp"

#include <chrono>
#include <cstdio>
#include <sstream>

#include "dqlora/binary_io.hpp"
#include "dqlora/ctc.hpp"
#include "dqlora/errors.hpp"
#include "dqlora/evaluation.hpp"
#include "dqlora/rng.hpp"

namespace dqlora {

namespace {

constexpr std::uint64_t kTeacherInitTag = 1;
constexpr std::uint64_t kStudentInitTag = 2;
constexpr std::uint64_t kAdapterInitTag = 3;
constexpr std::uint64_t kProjectionInitTag = 4;
constexpr std::uint64_t kShuffleTag = 0x5348554646ULL;

std::uint64_t stage_tag(Stage s) { return static_cast<std::uint64_t>(s) + 1; }

// Noise for training draws a fresh realization every epoch; validation and
// test use the utterance's stored seed.
std::uint64_t training_noise_seed(const Utterance& u, std::uint64_t seed, int epoch) {
  return mix_seed(mix_seed(u.noise_seed, seed), static_cast<std::uint64_t>(epoch));
}

Encoder load_encoder(const std::filesystem::path& path, const char* role) {
  if (!std::filesystem::exists(path)) {
    throw DataError(std::string("distill stage needs the ") + role + " checkpoint, missing: " +
                    path.string());
  }
  ModelBundle b = from_checkpoint(read_checkpoint(path));
  if (b.encoder.adapter_phase()) {
    throw DataError(std::string(role) + " checkpoint " + path.string() +
                    " is an adapter-phase model");
  }
  return std::move(b.encoder);
}

void zero_grads(std::span<const NamedTensor> params) {
  for (const NamedTensor& p : params) p.tensor.grad_buffer().setZero();
}

// Fisher-Yates with the library Rng so orders do not depend on the STL.
void shuffle(std::vector<std::size_t>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform_int(0, static_cast<long long>(i - 1)));
    std::swap(order[i - 1], order[j]);
  }
}

std::string fmt17(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

}  // namespace

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::kTeacher: return "teacher";
    case Stage::kStudentBase: return "student_base";
    case Stage::kDistill: return "distill";
  }
  return "?";
}

Stage parse_stage(const std::string& name) {
  if (name == "teacher") return Stage::kTeacher;
  if (name == "student_base") return Stage::kStudentBase;
  if (name == "distill") return Stage::kDistill;
  throw ConfigError("unknown stage '" + name + "'");
}

void adam_step(std::span<const NamedTensor> params, AdamState& state, const AdamConfig& cfg) {
  if (state.m.empty()) {
    for (const NamedTensor& p : params) {
      state.m.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
      state.v.push_back(Matrix::Zero(p.tensor.rows(), p.tensor.cols()));
    }
  }
  if (state.m.size() != params.size()) {
    throw ContractError("adam_step: state holds " + std::to_string(state.m.size()) +
                        " moments for " + std::to_string(params.size()) + " parameters");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i].tensor.grad();
    if (g.rows() != state.m[i].rows() || g.cols() != state.m[i].cols()) {
      throw ShapeError("adam_step: shape changed for " + params[i].name);
    }
    if (!g.allFinite()) throw NumericError("non-finite gradient for parameter " + params[i].name);
  }
  ++state.step;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(state.step));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(state.step));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& g = params[i].tensor.grad();
    state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
    state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g.cwiseProduct(g);
    Tensor param = params[i].tensor;
    Matrix& w = param.mutable_value();
    w.array() -= cfg.lr * (state.m[i].array() / c1) /
                 ((state.v[i].array() / c2).sqrt() + cfg.eps);
  }
}

TrainConfig TrainConfig::from_config(const Config& c) {
  TrainConfig t;
  t.stage = parse_stage(c.get("stage"));
  const std::string name = stage_name(t.stage);
  const long long epochs = c.get_int("epochs") > 0 ? c.get_int("epochs") : c.get_int("epochs." + name);
  if (epochs < 1) throw ConfigError("epochs must be positive");
  t.epochs = static_cast<int>(epochs);
  if (c.get_int("batch_size") < 1) throw ConfigError("batch_size must be positive");
  t.batch_size = static_cast<int>(c.get_int("batch_size"));
  t.adam = {c.get_real("lr." + name), c.get_real("adam.beta1"), c.get_real("adam.beta2"),
            c.get_real("adam.eps")};
  t.weights = {c.get_real("lambda"), c.get_real("mu"), c.get_real("tau")};
  if (!(t.weights.temperature > 0.0)) throw ConfigError("tau must be positive");
  t.coalescence.alpha = c.get_real("alpha");
  t.coalescence.mode =
      c.get("coal_mode") == "mean" ? CoalescenceMode::kMean : CoalescenceMode::kWeightedSum;
  t.coalescence.normalize = c.get_bool("coal_normalize");
  t.kl_direction = c.get("kl_direction") == "teacher_student" ? KlDirection::kTeacherStudent
                                                              : KlDirection::kStudentTeacher;
  t.teacher_sees_clean = c.get("teacher_input") == "clean";
  t.seed = static_cast<std::uint64_t>(c.get_int("seed"));
  t.snr_db = c.get_real("snr_db");
  t.corpus_path = c.get("corpus");
  t.out_dir = c.get("out");
  t.teacher_checkpoint = c.get("teacher_checkpoint");
  t.student_checkpoint = c.get("student_checkpoint");

  const int kernel = static_cast<int>(c.get_int("model.conv_kernel"));
  if (kernel < 1 || kernel % 2 == 0) throw ConfigError("model.conv_kernel must be odd and positive");
  auto model = [&](const std::string& prefix) {
    EncoderConfig m;
    m.n_blocks = static_cast<int>(c.get_int(prefix + ".blocks"));
    m.d_model = static_cast<int>(c.get_int(prefix + ".d_model"));
    m.conv_kernel = kernel;
    if (m.n_blocks < 0 || m.d_model < 1) throw ConfigError(prefix + ": bad model size");
    return m;
  };
  t.teacher_model = model("teacher");
  t.student_model = model("student");
  t.adapter.rank = static_cast<int>(c.get_int("lora.rank"));
  t.adapter.lora_alpha = c.get_real("lora.alpha");
  t.adapter.block_size = static_cast<int>(c.get_int("quant.block_size"));
  if (t.adapter.rank < 1) throw ConfigError("lora.rank must be positive");
  if (t.adapter.block_size < 1) throw ConfigError("quant.block_size must be positive");
  t.adapter.codebook = c.get("quant.codebook") == "normal" ? Codebook::normal_quantile()
                                                           : Codebook::linear_symmetric();
  return t;
}

std::filesystem::path TrainConfig::teacher_path() const {
  return teacher_checkpoint.empty() ? out_dir / "teacher.dqck" : teacher_checkpoint;
}

std::filesystem::path TrainConfig::student_path() const {
  return student_checkpoint.empty() ? out_dir / "student_base.dqck" : student_checkpoint;
}

std::filesystem::path TrainConfig::checkpoint_path() const {
  return out_dir / (stage_name(stage) + ".dqck");
}

std::filesystem::path TrainConfig::log_path() const {
  return out_dir / (stage_name(stage) + ".log");
}

std::string TrainLog::format() const {
  std::string out;
  for (const EpochRecord& r : records) {
    out += std::to_string(r.epoch) + "\t" + fmt17(r.mean.l_ctc) + "\t" + fmt17(r.mean.l_distill) +
           "\t" + fmt17(r.mean.l_coal) + "\t" + fmt17(r.mean.l_total) + "\t" + fmt17(r.val_ter) +
           "\t" + fmt17(r.seconds) + "\n";
  }
  return out;
}

TrainLog TrainLog::parse(const std::string& text) {
  TrainLog log;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream fields(line);
    EpochRecord r;
    char tab = 0;
    fields >> r.epoch;
    for (double* v : {&r.mean.l_ctc, &r.mean.l_distill, &r.mean.l_coal, &r.mean.l_total,
                      &r.val_ter, &r.seconds}) {
      fields.get(tab);
      if (tab != '\t' || !(fields >> *v)) throw DataError("train log: malformed line '" + line + "'");
    }
    log.records.push_back(r);
  }
  return log;
}

StageResult run_stage(const TrainConfig& cfg, const Corpus* corpus) {
  Corpus loaded;
  if (!corpus) {
    if (!std::filesystem::exists(cfg.corpus_path)) {
      throw DataError("corpus not found: " + cfg.corpus_path.string());
    }
    loaded = read_corpus(cfg.corpus_path);
    corpus = &loaded;
  }
  const std::vector<const Utterance*> train = corpus->split(Split::kTrain);
  const std::vector<const Utterance*> val = corpus->split(Split::kValidation);
  if (train.empty() || val.empty()) throw DataError("corpus needs training and validation utterances");

  const bool distill = cfg.stage == Stage::kDistill;
  StageResult result;

  // Models.
  Encoder model;
  Encoder teacher;
  std::optional<LatentProjection> projection;
  std::uint64_t teacher_file_hash = 0;
  if (cfg.stage == Stage::kTeacher) {
    model = init_encoder(cfg.teacher_model, mix_seed(cfg.seed, kTeacherInitTag));
  } else if (cfg.stage == Stage::kStudentBase) {
    model = init_encoder(cfg.student_model, mix_seed(cfg.seed, kStudentInitTag));
  } else {
    teacher = load_encoder(cfg.teacher_path(), "teacher");
    const Encoder base = load_encoder(cfg.student_path(), "student base");
    teacher_file_hash = fnv1a(read_file(cfg.teacher_path()));
    set_trainable(teacher, false);
    model = freeze_and_quantize(base, cfg.adapter, mix_seed(cfg.seed, kAdapterInitTag));
    projection = LatentProjection::init(teacher.config.d_model, model.config.d_model,
                                        mix_seed(cfg.seed, kProjectionInitTag));
    result.teacher_bytes_before = teacher_file_hash;
    result.frozen_before = frozen_checksum(model);
  }

  std::vector<NamedTensor> params = trainable_parameters(model);
  if (projection) params.push_back({"proj.P", projection->weight});
  AdamState adam;

  // Clean features never change; precompute them once.
  std::vector<FeatureSequence> clean_train;
  for (const Utterance* u : train) clean_train.push_back(featurize(u->clean));

  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < train.size(); ++i) {
    if (ctc_feasible(train[i]->y, clean_train[i].length())) {
      order.push_back(i);
    } else {
      ++result.skipped_utterances;
      result.warnings.push_back("skipping infeasible utterance " + std::to_string(train[i]->id));
    }
  }
  if (order.empty()) throw DataError("no feasible training utterances");

  Rng shuffle_rng(mix_seed(mix_seed(cfg.seed, kShuffleTag), stage_tag(cfg.stage)));
  const std::optional<double> val_snr = distill ? std::optional<double>(cfg.snr_db) : std::nullopt;
  const LossWeights stage_weights = distill ? cfg.weights : LossWeights{0.0, 0.0, 1.0};

  std::optional<Checkpoint> best;
  long batch_id = 0;
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    const auto start = std::chrono::steady_clock::now();
    shuffle(order, shuffle_rng);
    double sum_ctc = 0.0, sum_kl = 0.0, sum_coal = 0.0;

    for (std::size_t b0 = 0; b0 < order.size(); b0 += static_cast<std::size_t>(cfg.batch_size)) {
      const std::size_t b1 = std::min(order.size(), b0 + static_cast<std::size_t>(cfg.batch_size));
      const double inv_batch = 1.0 / static_cast<double>(b1 - b0);
      ++batch_id;
      zero_grads(params);
      try {
        for (std::size_t k = b0; k < b1; ++k) {
          const std::size_t idx = order[k];
          const Utterance& u = *train[idx];
          Graph g;
          if (!distill) {
            const EncoderOutput out = encoder_forward(g, model, clean_train[idx]);
            const Tensor l_ctc = ctc_loss(g, log_softmax(g, out.logits), u.y);
            sum_ctc += l_ctc.item();
            g.backward(scale(g, l_ctc, inv_batch));
            continue;
          }
          const FeatureSequence noisy = featurize(
              mix_at_snr(u.clean, NoiseSpec{cfg.snr_db}, training_noise_seed(u, cfg.seed, epoch)));
          Graph frozen;
          const EncoderOutput t_out =
              encoder_forward(frozen, teacher, cfg.teacher_sees_clean ? clean_train[idx] : noisy);
          const EncoderOutput s_out = encoder_forward(g, model, noisy);
          const Tensor l_ctc = ctc_loss(g, log_softmax(g, s_out.logits), u.y);
          const Tensor l_kl =
              kl_distill(g, s_out.logits, t_out.logits, cfg.weights.temperature, cfg.kl_direction);
          const Tensor l_coal =
              coalescence_loss(g, {projection->apply(g, s_out.latents), LatentRole::kStudent},
                               {t_out.latents, LatentRole::kTeacher}, cfg.coalescence);
          LossBreakdown parts;
          const Tensor total = combine_losses(g, l_ctc, l_kl, l_coal, cfg.weights, &parts);
          sum_ctc += parts.l_ctc;
          sum_kl += parts.l_distill;
          sum_coal += parts.l_coal;
          g.backward(scale(g, total, inv_batch));
        }
        adam_step(params, adam, cfg.adam);
      } catch (const NumericError& e) {
        throw NumericError("divergence in " + stage_name(cfg.stage) + " epoch " +
                           std::to_string(epoch) + " batch " + std::to_string(batch_id) + ": " +
                           e.what());
      }
    }

    const double n = static_cast<double>(order.size());
    EpochRecord rec;
    rec.epoch = epoch;
    rec.mean = total_loss(sum_ctc / n, sum_kl / n, sum_coal / n, stage_weights);
    rec.val_ter = evaluate_ter(model, val, val_snr).rate();
    rec.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    result.log.records.push_back(rec);

    if (!best || rec.val_ter <= result.best_val_ter) {
      result.best_val_ter = rec.val_ter;
      result.best_epoch = epoch;
      std::map<std::string, double> meta = {{"best_epoch", static_cast<double>(epoch)}, {"val_ter", rec.val_ter}};
      if (distill) {
        meta["lambda"] = cfg.weights.lambda;
        meta["mu"] = cfg.weights.mu;
        meta["alpha"] = cfg.coalescence.alpha;
        meta["tau"] = cfg.weights.temperature;
        meta["snr_db"] = cfg.snr_db;
      }
      best = to_checkpoint(model, projection ? &*projection : nullptr, meta);
    }
  }
  if (distill) result.frozen_after = frozen_checksum(model);

  std::filesystem::create_directories(cfg.out_dir);
  result.checkpoint = cfg.checkpoint_path();
  write_checkpoint(result.checkpoint, *best);
  const std::string log_text = result.log.format();
  write_file(cfg.log_path(), std::span(reinterpret_cast<const std::uint8_t*>(log_text.data()),
                                       log_text.size()));
  if (distill) result.teacher_bytes_after = fnv1a(read_file(cfg.teacher_path()));
  return result;
}

double early_latent_distance(const Encoder& teacher, const Encoder& student,
                             const LatentProjection& projection,
                             std::span<const Utterance* const> utterances, double snr_db) {
  if (utterances.empty()) throw ContractError("early_latent_distance: no utterances");
  double total = 0.0;
  for (const Utterance* u : utterances) {
    const FeatureSequence feats = utterance_features(*u, snr_db);
    Graph g;
    const Matrix ht = encoder_forward(g, teacher, feats).latents.value();
    const Matrix hs = encoder_forward(g, student, feats).latents.value() *
                      projection.weight.value().transpose();
    const Index early = std::max<Index>(1, ht.rows() / 2);
    total += (hs.topRows(early) - ht.topRows(early)).rowwise().squaredNorm().mean();
  }
  return total / static_cast<double>(utterances.size());
}

}  // namespace dqlora
