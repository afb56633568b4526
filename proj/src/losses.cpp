// SPDX-License-Identifier: Apache-2.0
#include "dqlora/losses.hpp"

#include <cmath>
#include <string>

#include "dqlora/errors.hpp"

namespace dqlora {

Tensor kl_distill(Graph& g, const Tensor& student_logits,
                  const Tensor& teacher_logits, double temperature,
                  KlDirection direction) {
  if (student_logits.rows() != teacher_logits.rows() ||
      student_logits.cols() != teacher_logits.cols()) {
    throw ShapeError("kl_distill: student and teacher logits differ in shape");
  }
  if (!(temperature > 0.0)) throw ContractError("kl_distill: temperature <= 0");
  const Index T = student_logits.rows();
  if (T == 0) throw ShapeError("kl_distill: no frames");

  const Matrix log_s = log_softmax_rows(student_logits.value() / temperature);
  const Matrix log_t = log_softmax_rows(teacher_logits.value() / temperature);
  const Matrix p_s = log_s.array().exp().matrix();
  const Matrix p_t = log_t.array().exp().matrix();

  // Per-frame KL and its gradient w.r.t. the tempered student logits z = s/τ.
  Vector frame_kl(T);
  Matrix dz(T, student_logits.cols());
  if (direction == KlDirection::kStudentTeacher) {
    const Matrix log_ratio = log_s - log_t;
    frame_kl = p_s.cwiseProduct(log_ratio).rowwise().sum();
    // ∂/∂z_i Σ p(log p − log q) = p_i (log p_i − log q_i − KL)
    dz = p_s.cwiseProduct(log_ratio - frame_kl.replicate(1, log_s.cols()));
  } else {
    frame_kl = p_t.cwiseProduct(log_t - log_s).rowwise().sum();
    dz = p_s - p_t;
  }

  const double factor = temperature * temperature / static_cast<double>(T);
  Matrix value = Matrix::Constant(1, 1, factor * frame_kl.sum());
  require_finite(value, "kl_distill");
  Tensor out(std::move(value), student_logits.requires_grad());
  if (out.requires_grad()) {
    // dz/ds = 1/τ
    Matrix ds = dz * (factor / temperature);
    g.record(out, [s = student_logits, ds = std::move(ds)](const Matrix& go) mutable {
      s.grad_buffer() += go(0, 0) * ds;
    });
  }
  return out;
}

Vector coalescence_weights(Index frames, const CoalescenceConfig& cfg) {
  if (frames < 1) throw ShapeError("coalescence: empty trajectory");
  if (cfg.mode == CoalescenceMode::kMean) {
    return Vector::Constant(frames, 1.0 / static_cast<double>(frames));
  }
  if (!(cfg.alpha >= 0.0)) throw ContractError("coalescence: alpha < 0");
  Vector w(frames);
  for (Index t = 0; t < frames; ++t) {
    w[t] = std::exp(-cfg.alpha * static_cast<double>(t + 1));
  }
  if (cfg.normalize) w /= w.sum();
  return w;
}

Tensor coalescence_loss(Graph& g, const LatentTrajectory& student,
                        const LatentTrajectory& teacher,
                        const CoalescenceConfig& cfg) {
  if (student.h.rows() != teacher.h.rows() ||
      student.h.cols() != teacher.h.cols()) {
    throw ShapeError("coalescence: trajectories differ in shape [" +
                     std::to_string(student.h.rows()) + "x" +
                     std::to_string(student.h.cols()) + "] vs [" +
                     std::to_string(teacher.h.rows()) + "x" +
                     std::to_string(teacher.h.cols()) + "]");
  }
  const Tensor target = Tensor::constant(teacher.h.value());
  return weighted_row_sq_norm(g, sub(g, student.h, target),
                              coalescence_weights(student.h.rows(), cfg));
}

LossBreakdown total_loss(double l_ctc, double l_distill, double l_coal,
                         const LossWeights& w) {
  if (!std::isfinite(l_ctc) || !std::isfinite(l_distill) ||
      !std::isfinite(l_coal)) {
    throw NumericError("total_loss: non-finite component");
  }
  LossBreakdown b;
  b.l_ctc = l_ctc;
  b.l_distill = l_distill;
  b.l_coal = l_coal;
  b.lambda = w.lambda;
  b.mu = w.mu;
  b.l_total = l_ctc + w.lambda * l_distill + w.mu * l_coal;
  return b;
}

Tensor combine_losses(Graph& g, const Tensor& l_ctc, const Tensor& l_distill,
                      const Tensor& l_coal, const LossWeights& w,
                      LossBreakdown* breakdown) {
  const LossBreakdown b =
      total_loss(l_ctc.item(), l_distill.item(), l_coal.item(), w);
  Tensor total = add(g, add(g, l_ctc, scale(g, l_distill, w.lambda)),
                     scale(g, l_coal, w.mu));
  if (breakdown) *breakdown = b;
  return total;
}

}  // namespace dqlora
