#pragma once

// Classification metrics on plain buffers, no tape involvement. AUC is the
// Mann-Whitney statistic computed from tie-averaged ranks; multiclass is the
// macro average of one-vs-rest AUCs over classes that have both a positive
// and a negative example.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include "fb/errors.hpp"
#include "fb/tensor.hpp"

namespace fb {

template <typename S>
double accuracy(const Tensor<S>& logits, const std::vector<index_t>& labels) {
  if (logits.rank() != 2) throw ShapeError("accuracy: logits must be [N, K]");
  const index_t N = logits.shape()[0], K = logits.shape()[1];
  if (static_cast<index_t>(labels.size()) != N) {
    throw ShapeError("accuracy: " + std::to_string(N) + " rows vs " +
                     std::to_string(labels.size()) + " labels");
  }
  if (N == 0) throw Error("accuracy: empty batch");
  index_t hits = 0;
  const S* p = logits.data();
  for (index_t i = 0; i < N; ++i, p += K) {
    index_t best = 0;
    for (index_t k = 1; k < K; ++k) {
      if (p[k] > p[best]) best = k;
    }
    if (best == labels[static_cast<std::size_t>(i)]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(N);
}

// scores[i] is the positive-class score of sample i. Requires at least one
// positive and one negative.
inline double auc_binary(const std::vector<double>& scores,
                         const std::vector<std::uint8_t>& positive) {
  const std::size_t n = scores.size();
  if (positive.size() != n) throw ShapeError("auc: scores and labels differ in length");
  std::size_t n_pos = 0;
  for (std::uint8_t b : positive) n_pos += b ? 1 : 0;
  const std::size_t n_neg = n - n_pos;
  if (n_pos == 0 || n_neg == 0) throw Error("auc: only one class present");

  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Tied scores share the average of the 1-based ranks they span.
  double pos_rank_sum = 0.0;
  std::size_t i = 0;
  while (i < n) {
    std::size_t j = i;
    while (j < n && scores[order[j]] == scores[order[i]]) ++j;
    const double rank = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (positive[order[k]]) pos_rank_sum += rank;
    }
    i = j;
  }
  const double p = static_cast<double>(n_pos);
  return (pos_rank_sum - p * (p + 1.0) / 2.0) / (p * static_cast<double>(n_neg));
}

struct AucReport {
  double value = 0.0;                            // binary auc, or macro average
  std::vector<std::optional<double>> per_class;  // one-vs-rest; empty optional = class skipped
};

// Per-class scores, row-major [N, K]. Binary reports the class-1 AUC;
// multiclass reports the macro average of one-vs-rest AUCs over classes
// that appear in the labels.
inline AucReport auc_scores(const std::vector<double>& scores, index_t n, index_t k,
                            const std::vector<index_t>& labels) {
  if (k < 2) throw ShapeError("auc: need at least 2 classes");
  if (static_cast<index_t>(scores.size()) != n * k) {
    throw ShapeError("auc: " + std::to_string(scores.size()) + " scores for " + std::to_string(n) +
                     "x" + std::to_string(k));
  }
  if (static_cast<index_t>(labels.size()) != n) {
    throw ShapeError("auc: " + std::to_string(n) + " rows vs " + std::to_string(labels.size()) +
                     " labels");
  }
  std::vector<index_t> counts(static_cast<std::size_t>(k), 0);
  for (index_t lab : labels) {
    if (lab < 0 || lab >= k) throw Error("auc: label " + std::to_string(lab) + " out of range");
    ++counts[static_cast<std::size_t>(lab)];
  }

  AucReport rep;
  rep.per_class.resize(static_cast<std::size_t>(k));
  std::vector<double> col(static_cast<std::size_t>(n));
  std::vector<std::uint8_t> pos(static_cast<std::size_t>(n));
  for (index_t c = 0; c < k; ++c) {
    if (counts[static_cast<std::size_t>(c)] == 0 || counts[static_cast<std::size_t>(c)] == n) {
      continue;  // one-vs-rest undefined without both sides
    }
    for (index_t r = 0; r < n; ++r) {
      col[static_cast<std::size_t>(r)] = scores[static_cast<std::size_t>(r * k + c)];
      pos[static_cast<std::size_t>(r)] = labels[static_cast<std::size_t>(r)] == c ? 1 : 0;
    }
    rep.per_class[static_cast<std::size_t>(c)] = auc_binary(col, pos);
  }

  if (k == 2) {
    if (!rep.per_class[1].has_value()) throw Error("auc: only one class present");
    rep.value = *rep.per_class[1];
    return rep;
  }
  double sum = 0.0;
  int engaged = 0;
  for (const auto& v : rep.per_class) {
    if (v.has_value()) {
      sum += *v;
      ++engaged;
    }
  }
  if (engaged == 0) throw Error("auc: only one class present");
  rep.value = sum / engaged;
  return rep;
}

// Softmax probabilities drive the ranking.
template <typename S>
AucReport auc_from_logits(const Tensor<S>& logits, const std::vector<index_t>& labels) {
  if (logits.rank() != 2 || logits.shape()[1] < 2) throw ShapeError("auc: logits must be [N, K>=2]");
  const index_t N = logits.shape()[0], K = logits.shape()[1];
  std::vector<double> probs(static_cast<std::size_t>(N * K));
  const S* src = logits.data();
  for (index_t r = 0; r < N; ++r) {
    double mx = -std::numeric_limits<double>::infinity();
    for (index_t k = 0; k < K; ++k) mx = std::max(mx, static_cast<double>(src[r * K + k]));
    double denom = 0.0;
    for (index_t k = 0; k < K; ++k) {
      const double e = std::exp(static_cast<double>(src[r * K + k]) - mx);
      probs[static_cast<std::size_t>(r * K + k)] = e;
      denom += e;
    }
    for (index_t k = 0; k < K; ++k) probs[static_cast<std::size_t>(r * K + k)] /= denom;
  }
  return auc_scores(probs, N, K, labels);
}

}  // namespace fb
