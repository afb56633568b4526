// SPDX-License-Identifier: Apache-2.0
//
// The three training stages:
//   teacher       CTC on clean features, plain encoder
//   student_base  CTC on clean features, plain (smaller) encoder
//   distill       student base quantized and frozen, adapters + head trained
//                 on noisy features with CTC + λ·KL + μ·coalescence
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "dqlora/config.hpp"
#include "dqlora/losses.hpp"
#include "dqlora/models.hpp"
#include "dqlora/signal.hpp"

namespace dqlora {

enum class Stage { kTeacher, kStudentBase, kDistill };

std::string stage_name(Stage s);
Stage parse_stage(const std::string& name);

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Moments are allocated lazily on the first step, one pair per parameter.
struct AdamState {
  std::vector<Matrix> m;
  std::vector<Matrix> v;
  long step = 0;
};

/// One bias-corrected Adam update from the gradients currently held by
/// `params`. Throws NumericError naming the parameter on a non-finite grad.
void adam_step(std::span<const NamedTensor> params, AdamState& state, const AdamConfig& cfg);

struct TrainConfig {
  Stage stage = Stage::kTeacher;
  int epochs = 30;
  int batch_size = 8;
  AdamConfig adam;
  LossWeights weights;
  CoalescenceConfig coalescence;
  KlDirection kl_direction = KlDirection::kStudentTeacher;
  bool teacher_sees_clean = false;
  std::uint64_t seed = 1;
  double snr_db = 5.0;

  std::filesystem::path corpus_path = "corpus.dql";
  std::filesystem::path out_dir = "run";
  std::filesystem::path teacher_checkpoint;  // empty: <out>/teacher.dqck
  std::filesystem::path student_checkpoint;  // empty: <out>/student_base.dqck

  EncoderConfig teacher_model = EncoderConfig::teacher();
  EncoderConfig student_model = EncoderConfig::student();
  AdapterConfig adapter;

  static TrainConfig from_config(const Config& c);

  std::filesystem::path teacher_path() const;
  std::filesystem::path student_path() const;
  std::filesystem::path checkpoint_path() const;  // <out>/<stage>.dqck
  std::filesystem::path log_path() const;         // <out>/<stage>.log
};

struct EpochRecord {
  int epoch = 0;
  LossBreakdown mean;
  double val_ter = 0.0;
  double seconds = 0.0;
};

struct TrainLog {
  std::vector<EpochRecord> records;

  /// epoch, l_ctc, l_distill, l_coal, l_total, val_ter, seconds (TAB separated).
  std::string format() const;
  static TrainLog parse(const std::string& text);
};

struct StageResult {
  std::filesystem::path checkpoint;
  TrainLog log;
  int best_epoch = 0;
  double best_val_ter = 0.0;
  Index skipped_utterances = 0;
  std::vector<std::string> warnings;
  // distill only
  std::uint64_t teacher_bytes_before = 0;
  std::uint64_t teacher_bytes_after = 0;
  std::uint64_t frozen_before = 0;
  std::uint64_t frozen_after = 0;
};

/// Runs one stage and writes its checkpoint (best validation epoch) and log.
/// `corpus` may be supplied to skip reading cfg.corpus_path.
StageResult run_stage(const TrainConfig& cfg, const Corpus* corpus = nullptr);

/// Mean over utterances of (1/|early|) Σ_{t ≤ T/2} ‖P·h_t^S − h_t^T‖², both
/// models fed the same noisy features.
double early_latent_distance(const Encoder& teacher, const Encoder& student,
                             const LatentProjection& projection,
                             std::span<const Utterance* const> utterances, double snr_db);

}  // namespace dqlora
