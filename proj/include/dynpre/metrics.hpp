#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <vector>

namespace dynpre {

/// ROC AUC in Mann-Whitney form: P(random positive outranks random negative), ties count 1/2.
/// Midranks over sorted scores; the U statistic is kept as an exact doubled integer.
inline double auc(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size()) throw std::invalid_argument("auc: scores and labels differ in length");
  std::int64_t n_pos = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw std::invalid_argument("auc: labels must be 0 or 1");
    n_pos += y;
  }
  const std::int64_t n_neg = static_cast<std::int64_t>(labels.size()) - n_pos;
  if (n_pos == 0 || n_neg == 0) throw std::invalid_argument("auc: both classes must be present");

  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  // Sum of doubled midranks (1-based) over positives.
  std::int64_t rank_sum_x2 = 0;
  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i + 1;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const auto midrank_x2 = static_cast<std::int64_t>(i + 1 + j);  // (i+1) + j = 2 * mean rank
    for (std::size_t k = i; k < j; ++k)
      if (labels[order[k]] == 1) rank_sum_x2 += midrank_x2;
    i = j;
  }
  const std::int64_t u_x2 = rank_sum_x2 - n_pos * (n_pos + 1);
  return static_cast<double>(u_x2) / static_cast<double>(2 * n_pos * n_neg);
}

/// Fraction of items where (score > 0) matches label == 1.
inline double accuracy(const std::vector<double>& scores, const std::vector<int>& labels) {
  if (scores.size() != labels.size() || scores.empty()) throw std::invalid_argument("accuracy: bad input");
  std::size_t hits = 0;
  for (std::size_t i = 0; i < scores.size(); ++i) hits += (scores[i] > 0.0) == (labels[i] == 1) ? 1 : 0;
  return static_cast<double>(hits) / static_cast<double>(scores.size());
}

/// Linear-interpolation quantile (q in [0,1]) of an unsorted sample.
inline double quantile(std::vector<double> values, double q) {
  if (values.empty()) throw std::invalid_argument("quantile: empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const auto hi = std::min(lo + 1, values.size() - 1);
  const double frac = pos - static_cast<double>(lo);
  return values[lo] + (values[hi] - values[lo]) * frac;
}

inline double median(std::vector<double> values) { return quantile(std::move(values), 0.5); }

}  // namespace dynpre
