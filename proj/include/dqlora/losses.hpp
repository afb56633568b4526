// SPDX-License-Identifier: Apache-2.0
//
// Joint training objective:
//   L_total = L_ctc + lambda·L_distill + mu·L_coal
// where L_distill is a frame-wise KL between student and teacher output
// distributions and L_coal pulls the student latent trajectory onto the
// teacher's, optionally weighting early frames by exp(-alpha·t).
#pragma once

#include "dqlora/tensor.hpp"

namespace dqlora {

struct LossWeights {
  double lambda = 1.0;       // KL distillation weight
  double mu = 0.0;           // coalescence weight; 0 disables the term
  double temperature = 1.0;  // softmax temperature for both distributions
};

enum class KlDirection {
  kStudentTeacher,  // KL(p_student ‖ p_teacher)
  kTeacherStudent,  // KL(p_teacher ‖ p_student)
};

enum class CoalescenceMode {
  kMean,         // (1/T) Σ_t ‖h_t^S − h_t^T‖²
  kWeightedSum,  // Σ_t exp(−alpha·t) ‖h_t^S − h_t^T‖², t = 1..T
};

struct CoalescenceConfig {
  double alpha = 0.0;
  CoalescenceMode mode = CoalescenceMode::kWeightedSum;
  /// Divide the weighted sum by Σ_t w(t). Ignored in mean mode.
  bool normalize = false;
};

enum class LatentRole { kTeacher, kStudent };

/// Time-indexed hidden vectors, one row per frame.
struct LatentTrajectory {
  Tensor h;
  LatentRole role = LatentRole::kStudent;
};

struct LossBreakdown {
  double l_ctc = 0.0;
  double l_distill = 0.0;
  double l_coal = 0.0;
  double lambda = 0.0;
  double mu = 0.0;
  double l_total = 0.0;
};

/// τ² · mean over frames of KL between softmax(s_t/τ) and softmax(t_t/τ).
/// Gradients reach the student logits only.
Tensor kl_distill(Graph& g, const Tensor& student_logits,
                  const Tensor& teacher_logits, double temperature,
                  KlDirection direction = KlDirection::kStudentTeacher);

/// Per-frame weights used by coalescence_loss for a trajectory of T frames.
Vector coalescence_weights(Index frames, const CoalescenceConfig& cfg);

/// The teacher trajectory is treated as a constant.
Tensor coalescence_loss(Graph& g, const LatentTrajectory& student,
                        const LatentTrajectory& teacher,
                        const CoalescenceConfig& cfg);

LossBreakdown total_loss(double l_ctc, double l_distill, double l_coal,
                         const LossWeights& w);

/// Graph form of total_loss; `breakdown` receives the same numbers.
Tensor combine_losses(Graph& g, const Tensor& l_ctc, const Tensor& l_distill,
                      const Tensor& l_coal, const LossWeights& w,
                      LossBreakdown* breakdown = nullptr);

}  // namespace dqlora
