#pragma once

#include <boost/math/distributions/chi_squared.hpp>
#include <boost/math/distributions/normal.hpp>

#include "htlgmm/pseudo.hpp"

namespace htlgmm {

/// Wald summaries for the selected coefficients. `sigma_hat` is the
/// covariance of sqrt(n)(beta_hat - beta*) restricted to `support`.
struct InferenceReport {
  IndexList support;
  Vec estimate;
  Vec se;
  Vec ci_lower;
  Vec ci_upper;
  Vec p_values;
  Vec q_values;  ///< BH-adjusted over the tested coordinates, NaN elsewhere
  std::vector<bool> rejected;
  Mat sigma_hat;
  double n = 0.0;
  double level = 0.95;
};

struct BhResult {
  Vec q_values;
  IndexList rejected;  ///< positions into the input vector, ascending
};

/// Step-up Benjamini-Hochberg adjustment.
inline BhResult bh_adjust(const Vec& p, double q_level) {
  detail::require(q_level > 0.0 && q_level < 1.0, Errc::InvalidArgument,
                  "BH level must lie in (0,1)");
  const Index m = p.size();
  for (Index i = 0; i < m; ++i)
    if (!(p(i) >= 0.0 && p(i) <= 1.0))
      throw Error(Errc::InvalidPValue, "p-value outside [0,1] at position " + std::to_string(i));
  BhResult r;
  r.q_values = Vec(m);
  if (m == 0) return r;
  std::vector<Index> order(static_cast<std::size_t>(m));
  for (Index i = 0; i < m; ++i) order[static_cast<std::size_t>(i)] = i;
  std::stable_sort(order.begin(), order.end(), [&](Index a, Index b) { return p(a) < p(b); });
  double running = 1.0;
  for (Index k = m; k >= 1; --k) {
    const Index idx = order[static_cast<std::size_t>(k - 1)];
    running = std::min(running, p(idx) * static_cast<double>(m) / static_cast<double>(k));
    r.q_values(idx) = running;
  }
  for (Index i = 0; i < m; ++i)
    if (r.q_values(i) <= q_level) r.rejected.push_back(i);
  return r;
}

inline double normal_quantile(double prob) {
  return boost::math::quantile(boost::math::normal_distribution<double>(), prob);
}

inline double two_sided_p(double z) { return std::erfc(std::abs(z) / std::sqrt(2.0)); }

inline double chi_squared_upper(double stat, double df) {
  if (!(stat > 0.0)) return 1.0;
  return boost::math::cdf(boost::math::complement(boost::math::chi_squared_distribution<double>(df), stat));
}

namespace detail {

inline void check_support(const IndexList& support, Index p) {
  if (support.empty()) throw Error(Errc::EmptySupport, "no coefficient selected");
  for (Index j : support) require(j >= 0 && j < p, Errc::InvalidArgument, "support index out of range");
}

inline Mat inverse_bread(const Mat& b) {
  Eigen::ColPivHouseholderQR<Mat> qr(b);
  qr.setThreshold(1e-10);
  if (qr.rank() < b.cols()) throw Error(Errc::SingularBread, "selected-block bread is singular");
  return qr.inverse();
}

}  // namespace detail

/// B^{-1} M B^{-1} with B = (J^T C J)_S and M = (J^T C V C J)_S, J the moment
/// Jacobian at beta_hat. This is n times the pseudo-design form
/// [(X_ps^T X_ps)_S]^{-1}(X_ps^T C^{1/2} V C^{1/2} X_ps)_S[(X_ps^T X_ps)_S]^{-1},
/// so se_j = sqrt(Sigma_jj / n).
inline Mat sandwich_sigma(const Dataset& d, const GlmFamily& family, const Vec& beta_hat,
                          const IndexList& support, const ThetaTilde& theta,
                          const WeightMatrix& weight, const VarianceBlocks& blocks) {
  detail::check_support(support, d.part.p_x());
  const MomentEval ev = eval_jacobians(d, family, beta_hat, theta.stacked());
  detail::require_dim(weight.c.rows(), ev.jac_beta.rows(), "weight matrix");
  detail::require_dim(blocks.assembled.rows(), ev.jac_beta.rows(), "variance matrix");
  Mat js(ev.jac_beta.rows(), static_cast<Index>(support.size()));
  for (std::size_t k = 0; k < support.size(); ++k) js.col(static_cast<Index>(k)) = ev.jac_beta.col(support[k]);
  const Mat cj = weight.c * js;
  const Mat bread = detail::symmetrize(js.transpose() * cj);
  const Mat meat = detail::symmetrize(cj.transpose() * blocks.assembled * cj);
  const Mat bi = detail::inverse_bread(bread);
  return detail::symmetrize(bi * meat * bi);
}

/// Robust covariance of sqrt(n)(beta_S - beta*_S) for a GLM refitted or
/// evaluated on the selected columns only: n H^{-1} M H^{-1}.
inline Mat glm_sandwich_sigma(const Mat& x, const Vec& y, const GlmFamily& family,
                              const Vec& beta_hat, const IndexList& support) {
  detail::check_support(support, x.cols());
  Mat xs(x.rows(), static_cast<Index>(support.size()));
  Vec bs(static_cast<Index>(support.size()));
  for (std::size_t k = 0; k < support.size(); ++k) {
    xs.col(static_cast<Index>(k)) = x.col(support[k]);
    bs(static_cast<Index>(k)) = beta_hat(support[k]);
  }
  const ScoreSandwich sw = score_sandwich(xs, y, family, bs);
  const Mat hi = detail::inverse_bread(detail::symmetrize(sw.bread));
  return detail::symmetrize(hi * sw.meat * hi) * static_cast<double>(x.rows());
}

/// Wald CIs and two-sided p-values for beta_hat restricted to `support`.
/// BH runs over the positions listed in `tested` (all positions if empty).
inline InferenceReport wald_inference(const Vec& beta_hat, const IndexList& support,
                                      const Mat& sigma_hat, double n, double level,
                                      double fdr_level = 0.05, const IndexList& tested = {}) {
  detail::require(level > 0.0 && level < 1.0, Errc::InvalidArgument, "level must lie in (0,1)");
  detail::require(n > 0.0, Errc::InvalidArgument, "n must be positive");
  const Index s = static_cast<Index>(support.size());
  detail::require_dim(sigma_hat.rows(), s, "sigma_hat");
  InferenceReport r;
  r.support = support;
  r.n = n;
  r.level = level;
  r.sigma_hat = detail::symmetrize(sigma_hat);
  r.estimate = Vec(s);
  r.se = Vec(s);
  r.ci_lower = Vec(s);
  r.ci_upper = Vec(s);
  r.p_values = Vec(s);
  r.q_values = Vec::Constant(s, std::numeric_limits<double>::quiet_NaN());
  r.rejected.assign(static_cast<std::size_t>(s), false);
  const double zq = normal_quantile(1.0 - (1.0 - level) / 2.0);
  for (Index k = 0; k < s; ++k) {
    const double b = beta_hat(support[static_cast<std::size_t>(k)]);
    const double se = std::sqrt(std::max(0.0, r.sigma_hat(k, k)) / n);
    r.estimate(k) = b;
    r.se(k) = se;
    r.ci_lower(k) = b - zq * se;
    r.ci_upper(k) = b + zq * se;
    if (b == 0.0) r.p_values(k) = 1.0;
    else if (se == 0.0) r.p_values(k) = 0.0;
    else r.p_values(k) = two_sided_p(b / se);
  }
  IndexList pos = tested;
  if (pos.empty())
    for (Index k = 0; k < s; ++k) pos.push_back(k);
  const BhResult bh = bh_adjust(detail::take(r.p_values, pos), fdr_level);
  for (std::size_t i = 0; i < pos.size(); ++i) r.q_values(pos[i]) = bh.q_values(static_cast<Index>(i));
  for (Index i : bh.rejected) r.rejected[static_cast<std::size_t>(pos[static_cast<std::size_t>(i)])] = true;
  return r;
}

}  // namespace htlgmm
