// SPDX-License-Identifier: Apache-2.0
#include "dqlora/ctc.hpp"

#include <cmath>

namespace dqlora {

namespace {

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

}  // namespace

std::string Vocabulary::glyph(int id) const {
  if (id == kBlank) return "-";
  return std::string(1, static_cast<char>('a' + id - 1));
}

std::string Vocabulary::render(const Transcript& y) const {
  std::string s;
  for (int id : y) s += glyph(id);
  return s;
}

void validate_transcript(const Transcript& y, Index vocab_size) {
  for (int id : y) {
    if (id == kBlank) throw ContractError("transcript contains the blank id");
    if (id < 1 || id >= vocab_size) {
      throw ContractError("transcript token " + std::to_string(id) +
                          " outside 1.." + std::to_string(vocab_size - 1));
    }
  }
}

Index min_frames(const Transcript& y) {
  Index n = static_cast<Index>(y.size());
  for (std::size_t i = 1; i < y.size(); ++i) {
    if (y[i] == y[i - 1]) ++n;
  }
  return n;
}

bool ctc_feasible(const Transcript& y, Index frames) {
  return frames >= min_frames(y);
}

CtcResult ctc_forward_backward(const Matrix& log_probs, const Transcript& y) {
  const Index T = log_probs.rows();
  const Index V = log_probs.cols();
  if (T < 1 || V < 2) throw ShapeError("ctc: need at least 1 frame and 2 labels");
  validate_transcript(y, V);
  if (!log_probs.allFinite()) throw NumericError("ctc: non-finite log-probs");
  for (Index t = 0; t < T; ++t) {
    const double m = log_probs.row(t).maxCoeff();
    const double lse = m + std::log((log_probs.row(t).array() - m).exp().sum());
    if (std::abs(lse) > 1e-6) {
      throw ContractError("ctc: row " + std::to_string(t) +
                          " is not a normalized log-distribution");
    }
  }
  if (!ctc_feasible(y, T)) {
    throw InfeasibleError("ctc: target of length " + std::to_string(y.size()) +
                          " needs " + std::to_string(min_frames(y)) +
                          " frames, got " + std::to_string(T));
  }

  // Blank-extended target: blank, y1, blank, y2, ..., blank.
  const Index S = 2 * static_cast<Index>(y.size()) + 1;
  std::vector<int> ext(static_cast<std::size_t>(S), kBlank);
  for (std::size_t u = 0; u < y.size(); ++u) ext[2 * u + 1] = y[u];
  auto label = [&](Index s) { return ext[static_cast<std::size_t>(s)]; };
  // A skip from s-2 into s is allowed onto a label that differs from s-2.
  auto can_skip = [&](Index s) {
    return s >= 2 && label(s) != kBlank && label(s) != label(s - 2);
  };

  // alpha includes the emission at t; beta covers frames after t only.
  Matrix alpha = Matrix::Constant(T, S, kNegInf);
  Matrix beta = Matrix::Constant(T, S, kNegInf);

  alpha(0, 0) = log_probs(0, label(0));
  if (S > 1) alpha(0, 1) = log_probs(0, label(1));
  for (Index t = 1; t < T; ++t) {
    for (Index s = 0; s < S; ++s) {
      double acc = alpha(t - 1, s);
      if (s >= 1) acc = log_sum_exp(acc, alpha(t - 1, s - 1));
      if (can_skip(s)) acc = log_sum_exp(acc, alpha(t - 1, s - 2));
      if (acc != kNegInf) alpha(t, s) = acc + log_probs(t, label(s));
    }
  }

  beta(T - 1, S - 1) = 0.0;
  if (S > 1) beta(T - 1, S - 2) = 0.0;
  for (Index t = T - 2; t >= 0; --t) {
    for (Index s = 0; s < S; ++s) {
      double acc = beta(t + 1, s) + log_probs(t + 1, label(s));
      if (s + 1 < S) {
        acc = log_sum_exp(acc, beta(t + 1, s + 1) + log_probs(t + 1, label(s + 1)));
      }
      if (s + 2 < S && can_skip(s + 2)) {
        acc = log_sum_exp(acc, beta(t + 1, s + 2) + log_probs(t + 1, label(s + 2)));
      }
      beta(t, s) = acc;
    }
  }

  double log_likelihood = alpha(T - 1, S - 1);
  if (S > 1) log_likelihood = log_sum_exp(log_likelihood, alpha(T - 1, S - 2));
  if (log_likelihood == kNegInf) {
    throw InfeasibleError("ctc: target has zero probability");
  }

  CtcResult result;
  result.loss = -log_likelihood;
  result.grad = Matrix::Zero(T, V);
  for (Index t = 0; t < T; ++t) {
    for (Index s = 0; s < S; ++s) {
      const double occ = alpha(t, s) + beta(t, s);
      if (occ == kNegInf) continue;
      result.grad(t, label(s)) -= std::exp(occ - log_likelihood);
    }
  }
  return result;
}

Tensor ctc_loss(Graph& g, const Tensor& log_probs, const Transcript& y) {
  CtcResult r = ctc_forward_backward(log_probs.value(), y);
  Tensor out = Tensor::scalar(r.loss, log_probs.requires_grad());
  if (out.requires_grad()) {
    g.record(out, [log_probs, grad = std::move(r.grad)](const Matrix& go) mutable {
      log_probs.grad_buffer() += go(0, 0) * grad;
    });
  }
  return out;
}

}  // namespace dqlora
