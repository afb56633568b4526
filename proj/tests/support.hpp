// Helpers shared by the unit tests and the acceptance binary.
#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "dqlora/rng.hpp"
#include "dqlora/tensor.hpp"

namespace dqlora::testing {

inline Matrix random_matrix(Index rows, Index cols, Rng& rng, double lo = -2.0, double hi = 2.0) {
  Matrix m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = rng.uniform(lo, hi);
  return m;
}

inline Tensor leaf(Index rows, Index cols, Rng& rng, double lo = -2.0, double hi = 2.0) {
  return Tensor(random_matrix(rows, cols, rng, lo, hi), true);
}

// Max |analytic - central difference| over every element of every leaf.
inline double gradient_error(const std::vector<Tensor>& leaves,
                             const std::function<Tensor(Graph&)>& loss, double h = 1e-5) {
  for (Tensor t : leaves) t.zero_grad();
  {
    Graph g;
    g.backward(loss(g));
  }
  double worst = 0.0;
  for (Tensor t : leaves) {
    const Matrix analytic = t.grad();
    for (Index i = 0; i < t.numel(); ++i) {
      double& x = t.mutable_value().data()[i];
      const double saved = x;
      x = saved + h;
      Graph gp;
      const double up = loss(gp).item();
      x = saved - h;
      Graph gm;
      const double down = loss(gm).item();
      x = saved;
      worst = std::max(worst, std::abs(analytic.data()[i] - (up - down) / (2.0 * h)));
    }
  }
  return worst;
}

// −log Σ over all V^T label paths that collapse to y. Independent of the
// library's enumerator: plain probability-space accumulation.
inline double brute_force_ctc(const Matrix& log_probs, const std::vector<int>& y) {
  const Index T = log_probs.rows();
  const Index V = log_probs.cols();
  std::vector<Index> path(static_cast<std::size_t>(T), 0);
  double total = 0.0;
  while (true) {
    std::vector<int> collapsed;
    Index prev = -1;
    double p = 1.0;
    for (Index t = 0; t < T; ++t) {
      const Index s = path[static_cast<std::size_t>(t)];
      p *= std::exp(log_probs(t, s));
      if (s != prev && s != 0) collapsed.push_back(static_cast<int>(s));
      prev = s;
    }
    if (collapsed == y) total += p;
    Index k = 0;
    while (k < T && ++path[static_cast<std::size_t>(k)] == V) path[static_cast<std::size_t>(k++)] = 0;
    if (k == T) break;
  }
  return -std::log(total);
}

// Every transcript over tokens 1..V-1 with length ≤ max_len.
inline std::vector<std::vector<int>> all_transcripts(int V, int max_len) {
  std::vector<std::vector<int>> out = {{}};
  std::vector<std::vector<int>> frontier = {{}};
  for (int len = 1; len <= max_len; ++len) {
    std::vector<std::vector<int>> next;
    for (const auto& p : frontier) {
      for (int v = 1; v < V; ++v) {
        auto q = p;
        q.push_back(v);
        next.push_back(q);
      }
    }
    out.insert(out.end(), next.begin(), next.end());
    frontier = std::move(next);
  }
  return out;
}

}  // namespace dqlora::testing
