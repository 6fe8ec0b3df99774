#pragma once

#include "htlgmm/glm.hpp"

namespace htlgmm {

/// 1 - SSE/SST with SST about the mean of y.
inline double r_squared(const Vec& pred, const Vec& y) {
  detail::require_dim(pred.size(), y.size(), "predictions");
  detail::require(y.size() >= 1, Errc::InvalidArgument, "empty outcome");
  const double sse = (y - pred).squaredNorm();
  const double sst = (y.array() - y.mean()).matrix().squaredNorm();
  if (sst <= 0.0) return sse == 0.0 ? 1.0 : -std::numeric_limits<double>::infinity();
  return 1.0 - sse / sst;
}

inline double mean_squared_error(const Vec& pred, const Vec& y) {
  detail::require_dim(pred.size(), y.size(), "predictions");
  return (y - pred).squaredNorm() / static_cast<double>(y.size());
}

/// Mann-Whitney AUC with average ranks for tied scores.
inline double auc(const Vec& score, const Vec& y) {
  detail::require_dim(score.size(), y.size(), "scores");
  const Index n = y.size();
  std::vector<Index> order(static_cast<std::size_t>(n));
  for (Index i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;
  std::sort(order.begin(), order.end(), [&](Index a, Index b) { return score(a) < score(b); });

  double rank_sum = 0.0;
  double n1 = 0.0;
  for (Index i = 0; i < n; ++i) n1 += y(i) == 1.0 ? 1.0 : 0.0;
  const double n0 = static_cast<double>(n) - n1;
  if (n1 == 0.0 || n0 == 0.0) throw Error(Errc::SingleClass, "AUC needs both outcome classes");

  std::size_t i = 0;
  while (i < order.size()) {
    std::size_t j = i;
    while (j + 1 < order.size() && score(order[j + 1]) == score(order[i])) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + j) + 1.0;
    for (std::size_t k = i; k <= j; ++k)
      if (y(order[k]) == 1.0) rank_sum += avg_rank;
    i = j + 1;
  }
  return (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n0);
}

/// R^2 on the linear predictor for linear models, AUC for logistic.
inline double eval_metric(const Vec& eta, const Vec& y, const GlmFamily& family) {
  return family.kind == FamilyKind::Linear ? r_squared(eta, y) : auc(eta, y);
}

}  // namespace htlgmm
