#pragma once

#include "htlgmm/glm.hpp"
#include "htlgmm/solver.hpp"

namespace htlgmm {

/// Penalized likelihood on the original data, used for the main-study-only
/// baselines and the initial estimator. The objective is on the sum scale:
///   -loglik(beta) + P(beta)     (linear: (1/2)||y - X beta||^2 + P(beta)).
struct GlmPathOptions {
  int n_lambda = 100;
  double lambda_min_ratio = 0.0;  ///< 0 picks 1e-3 (n < p) or 1e-4 (n >= p)
  /// linear only: if positive, stop on the max coefficient change instead
  double tol = 0.0;
  /// inner and outer loops stop once max_j (x_j^T W x_j) d_j^2 falls below
  /// irls_thresh times the null deviance
  double irls_thresh = 1e-7;
  long max_sweeps = 100000;
  int max_irls = 50;
  /// Stop the path once the fraction of null deviance explained exceeds
  /// max_dev_ratio, or improves by less than min_dev_change (relative)
  /// between grid points; later grid points carry the last solution.
  double max_dev_ratio = 0.999;
  double min_dev_change = 1e-5;
};

struct GlmPath {
  std::vector<double> lambdas;
  std::vector<Vec> betas;
  std::vector<bool> converged;
  Index n_solved = 0;
};

inline double default_lambda_min_ratio(Index n, Index p) { return n < p ? 1e-3 : 1e-4; }

namespace detail {

/// Unpenalized fit over coordinates with zero penalty factor.
inline Vec glm_null_fit(const Mat& x, const Vec& y, const GlmFamily& family, const Vec& f) {
  IndexList u;
  for (Index j = 0; j < x.cols(); ++j)
    if (f(j) == 0.0) u.push_back(j);
  Vec beta = Vec::Zero(x.cols());
  if (u.empty()) return beta;
  Mat xu(x.rows(), static_cast<Index>(u.size()));
  for (std::size_t k = 0; k < u.size(); ++k) xu.col(static_cast<Index>(k)) = x.col(u[k]);
  const GlmFit fit = fit_glm(xu, y, family);
  for (std::size_t k = 0; k < u.size(); ++k) beta(u[k]) = fit.theta(static_cast<Index>(k));
  return beta;
}

/// Weighted least-squares coordinate descent on the working residual r,
/// updating beta and r in place (w must be positive). The change of a
/// coordinate is measured as |d_j| (weighted = false) or x_j^T W x_j d_j^2
/// (weighted = true). Returns false if max_sweeps is hit.
inline bool weighted_cd(const Mat& x, const Vec& w, const Vec& xwx, const Vec& f, double a,
                        double lambda, Vec& beta, Vec& r, double tol, long max_sweeps,
                        bool weighted = false) {
  const Index p = x.cols();
  std::vector<char> active(static_cast<std::size_t>(p), 0);
  Vec wr = w.cwiseProduct(r);  // only W r is needed inside the loop
  auto update = [&](Index j) {
    if (xwx(j) <= 0.0 || std::isinf(f(j))) return 0.0;
    const double old = beta(j);
    const double grad = x.col(j).dot(wr);
    const double zj = grad + xwx(j) * old;
    const double updated = soft_threshold(zj, lambda * f(j) * a) / (xwx(j) + lambda * f(j) * (1.0 - a));
    const double delta = updated - old;
    if (delta != 0.0) {
      beta(j) = updated;
      wr.noalias() -= delta * x.col(j).cwiseProduct(w);
    }
    return weighted ? xwx(j) * delta * delta : std::abs(delta);
  };

  bool done = false;
  long sweeps = 0;
  while (sweeps < max_sweeps && !done) {
    // full sweep, then iterate on the active set until it settles
    double full_change = 0.0;
    for (Index j = 0; j < p; ++j) {
      full_change = std::max(full_change, update(j));
      if (beta(j) != 0.0) active[static_cast<std::size_t>(j)] = 1;
    }
    ++sweeps;
    if (full_change < tol) {
      done = true;
      break;
    }
    while (sweeps < max_sweeps) {
      double change = 0.0;
      for (Index j = 0; j < p; ++j)
        if (active[static_cast<std::size_t>(j)]) change = std::max(change, update(j));
      ++sweeps;
      if (change < tol) break;
    }
  }
  r = wr.cwiseQuotient(w);
  return done;
}

inline double glm_loss(const Vec& y, const Vec& eta, const GlmFamily& family) {
  return family.kind == FamilyKind::Linear ? 0.5 * (y - eta).squaredNorm()
                                           : -family.log_likelihood(y, eta);
}

}  // namespace detail

/// Largest useful lambda: the gradient bound at the unpenalized null fit.
inline double glm_lambda_max(const Mat& x, const Vec& y, const GlmFamily& family,
                             const PenaltySpec& pen) {
  const Vec f = pen.factors(x.cols());
  const double a = std::max(pen.l1_share(), 1e-3);
  const Vec beta = detail::glm_null_fit(x, y, family, f);
  const Vec g = x.transpose() * (y - family.mu(x * beta));
  double lm = 0.0;
  for (Index j = 0; j < x.cols(); ++j)
    if (f(j) > 0.0 && std::isfinite(f(j))) lm = std::max(lm, std::abs(g(j)) / (f(j) * a));
  return lm;
}

/// Warm-started path. Logistic uses IRLS outer iterations around weighted
/// coordinate descent; each outer step is accepted only if the penalized
/// objective does not increase (step halving otherwise).
inline GlmPath penalized_glm_path(const Mat& x, const Vec& y, const GlmFamily& family,
                                  const PenaltySpec& pen, const std::vector<double>& lambdas,
                                  const GlmPathOptions& opt = {}) {
  detail::require_dim(y.size(), x.rows(), "outcome length");
  detail::require(x.allFinite(), Errc::NonFiniteInput, "design has non-finite entries");
  family.validate_outcome(y);
  const Index n = x.rows(), p = x.cols();
  const Vec f = pen.factors(p);
  const double a = pen.l1_share();
  const bool linear = family.kind == FamilyKind::Linear;

  GlmPath path;
  path.lambdas = lambdas;
  Vec beta = detail::glm_null_fit(x, y, family, f);
  const double null_dev = family.deviance(y, x * beta);
  const double shr = opt.irls_thresh * std::max(null_dev, 1e-300);
  double prev_ratio = 0.0;
  bool stopped = false;

  Vec w = Vec::Ones(n);
  const Mat x2 = x.cwiseAbs2();
  Vec xwx = x2.colwise().sum().transpose();
  Vec eta = x * beta;
  bool left_null = false;

  for (double lam : lambdas) {
    if (stopped) {
      path.betas.push_back(beta);
      path.converged.push_back(true);
      continue;
    }
    // still at the null fit and inside the subgradient bound: nothing to do
    // (avoids rounding noise at lambda_max)
    if (!left_null) {
      bool at_null = true;
      const Vec g0 = x.transpose() * (y - family.mu(eta));
      for (Index j = 0; j < p && at_null; ++j)
        if (f(j) > 0.0 && (beta(j) != 0.0 || (std::isfinite(f(j)) &&
                                               std::abs(g0(j)) > lam * f(j) * a * (1.0 + 1e-9))))
          at_null = false;
      if (at_null) {
        path.betas.push_back(beta);
        path.converged.push_back(true);
        ++path.n_solved;
        continue;
      }
      left_null = true;
    }
    bool ok = true;
    if (linear) {
      Vec r = y - eta;
      ok = opt.tol > 0.0 ? detail::weighted_cd(x, w, xwx, f, a, lam, beta, r, opt.tol, opt.max_sweeps)
                         : detail::weighted_cd(x, w, xwx, f, a, lam, beta, r, shr, opt.max_sweeps, true);
      eta = y - r;
    } else {
      double obj = detail::glm_loss(y, eta, family) + detail::penalty_value(f, a, lam, beta);
      ok = false;
      for (int it = 0; it < opt.max_irls; ++it) {
        const Vec mu = family.mu(eta);
        const Vec wt = family.mu_prime(eta).cwiseMax(1e-5);
        const Vec r0 = (y - mu).cwiseQuotient(wt);
        Vec r = r0;
        xwx.noalias() = x2.transpose() * wt;
        Vec cand = beta;
        const bool cd_ok =
            detail::weighted_cd(x, wt, xwx, f, a, lam, cand, r, shr, opt.max_sweeps, true);
        // x cand = (eta + r0) - r, the working response minus the final residual
        const Vec d_eta = r0 - r;
        double t = 1.0;
        Vec eta_c = eta + d_eta;
        double cand_obj = detail::glm_loss(y, eta_c, family) + detail::penalty_value(f, a, lam, cand);
        for (int k = 0; k < 30 && cand_obj > obj + 1e-12 * std::abs(obj); ++k) {
          t *= 0.5;
          eta_c = eta + t * d_eta;
          cand_obj = detail::glm_loss(y, eta_c, family) +
                     detail::penalty_value(f, a, lam, beta + t * (cand - beta));
        }
        if (t < 1.0) cand = beta + t * (cand - beta);
        const double change = (cand - beta).cwiseAbs2().cwiseProduct(xwx).maxCoeff();
        beta = cand;
        eta = eta_c;
        obj = cand_obj;
        if (change < shr && cd_ok) {
          ok = true;
          break;
        }
      }
      eta = x * beta;  // clear drift from the incremental updates
    }
    path.betas.push_back(beta);
    path.converged.push_back(ok);
    ++path.n_solved;
    if (null_dev > 0.0) {
      const double ratio = 1.0 - family.deviance(y, eta) / null_dev;
      if (opt.max_dev_ratio < 1.0 && ratio > opt.max_dev_ratio) stopped = true;
      if (path.n_solved > 1 && ratio - prev_ratio < opt.min_dev_change * ratio) stopped = true;
      prev_ratio = ratio;
    }
  }
  return path;
}

inline GlmPath penalized_glm_path(const Mat& x, const Vec& y, const GlmFamily& family,
                                  const PenaltySpec& pen, const GlmPathOptions& opt = {}) {
  const double ratio = opt.lambda_min_ratio > 0.0 ? opt.lambda_min_ratio
                                                   : default_lambda_min_ratio(x.rows(), x.cols());
  return penalized_glm_path(x, y, family, pen,
                            log_grid(glm_lambda_max(x, y, family, pen), ratio, opt.n_lambda), opt);
}

}  // namespace htlgmm
