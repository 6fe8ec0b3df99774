#pragma once

#include "htlgmm/common.hpp"

namespace htlgmm {

enum class PenaltyKind { Lasso, AdaptiveLasso, Ridge, ElasticNet };

inline const char* penalty_name(PenaltyKind k) {
  switch (k) {
    case PenaltyKind::Lasso: return "lasso";
    case PenaltyKind::AdaptiveLasso: return "adaptive_lasso";
    case PenaltyKind::Ridge: return "ridge";
    case PenaltyKind::ElasticNet: return "elastic_net";
  }
  return "?";
}

/// P(beta) = lambda * sum_j f_j [ a |beta_j| + (1 - a)/2 beta_j^2 ]
/// with a the l1 share and f_j the per-coefficient factor (0 for unpenalized
/// coordinates, the adaptive weight for adaptive Lasso, +inf pins beta_j = 0).
struct PenaltySpec {
  PenaltyKind kind = PenaltyKind::Lasso;
  double mix = 1.0;
  Vec weights;
  double gamma = 1.0;
  IndexList unpenalized;

  double l1_share() const {
    switch (kind) {
      case PenaltyKind::Lasso:
      case PenaltyKind::AdaptiveLasso: return 1.0;
      case PenaltyKind::Ridge: return 0.0;
      case PenaltyKind::ElasticNet: return mix;
    }
    return 1.0;
  }

  Vec factors(Index p) const {
    Vec f = Vec::Ones(p);
    if (kind == PenaltyKind::AdaptiveLasso) {
      detail::require(weights.size() == p, Errc::DimensionMismatch,
                      "adaptive Lasso needs one weight per coefficient");
      for (Index j = 0; j < p; ++j) {
        detail::require(weights(j) >= 0.0 && !std::isnan(weights(j)), Errc::InvalidArgument,
                        "adaptive weights must be >= 0");
      }
      f = weights;
    } else if (weights.size() == p) {
      f = weights;
    }
    for (Index j : unpenalized) {
      detail::require(j >= 0 && j < p, Errc::InvalidArgument, "unpenalized index out of range");
      f(j) = 0.0;
    }
    return f;
  }

  void validate() const {
    detail::require(mix >= 0.0 && mix <= 1.0, Errc::InvalidArgument, "mix must lie in [0,1]");
    detail::require(gamma > 0.0, Errc::NonPositiveGamma, "gamma must be positive");
  }
};

/// (1/2) beta^T G beta - c^T beta, the Gram form of (1/2)||y - X beta||^2.
struct QuadraticForm {
  Mat gram;
  Vec linear;

  static QuadraticForm from_design(const Mat& x, const Vec& y) {
    detail::require_dim(y.size(), x.rows(), "response length");
    detail::require(x.allFinite() && y.allFinite(), Errc::NonFiniteInput,
                    "least-squares problem has non-finite entries");
    QuadraticForm q;
    q.gram = Mat::Zero(x.cols(), x.cols());
    q.gram.selfadjointView<Eigen::Lower>().rankUpdate(x.transpose());
    q.gram = q.gram.selfadjointView<Eigen::Lower>();
    q.linear = x.transpose() * y;
    return q;
  }

  Index size() const { return linear.size(); }

  double value(const Vec& beta) const { return 0.5 * beta.dot(gram * beta) - linear.dot(beta); }
};

struct CdOptions {
  double tol = 1e-8;  ///< max coefficient change between sweeps
  long max_sweeps = 100000;
};

struct CdResult {
  Vec beta;
  bool converged = false;  ///< false means MaxSweepsExceeded; beta is the last iterate
  long sweeps = 0;
};

namespace detail {

inline double soft_threshold(double z, double t) {
  if (z > t) return z - t;
  if (z < -t) return z + t;
  return 0.0;
}

inline double penalty_value(const Vec& f, double a, double lambda, const Vec& beta) {
  double s = 0.0;
  for (Index j = 0; j < beta.size(); ++j) {
    if (f(j) == 0.0 || beta(j) == 0.0) continue;
    s += f(j) * (a * std::abs(beta(j)) + 0.5 * (1.0 - a) * beta(j) * beta(j));
  }
  return lambda * s;
}

}  // namespace detail

inline double penalized_objective(const QuadraticForm& q, const PenaltySpec& pen, double lambda,
                                  const Vec& beta) {
  return q.value(beta) + detail::penalty_value(pen.factors(q.size()), pen.l1_share(), lambda, beta);
}

/// Cyclic coordinate descent with soft thresholding. Coordinates with zero
/// curvature or an infinite factor are held at zero.
///
/// Between full sweeps the solver works on the support of the current
/// iterate. If a few cycles over the support do not settle it, it solves the
/// stationarity equations with the signs held fixed and moves toward that
/// solution until the first coefficient would change sign (the objective
/// decreases along the segment). When the support Gram is numerically
/// singular it keeps cycling instead. Convergence is
/// only declared on a full sweep; each support step or cycle counts as one
/// sweep toward max_sweeps.
inline CdResult coordinate_descent(const QuadraticForm& q, const PenaltySpec& pen, double lambda,
                                   const Vec& beta_init, const CdOptions& opt = {}) {
  const Index p = q.size();
  detail::require(lambda >= 0.0, Errc::InvalidArgument, "lambda must be >= 0");
  detail::require(q.gram.allFinite() && q.linear.allFinite(), Errc::NonFiniteInput,
                  "quadratic form has non-finite entries");
  const Vec f = pen.factors(p);
  const double a = pen.l1_share();

  CdResult res;
  res.beta = beta_init.size() == p ? beta_init : Vec::Zero(p);
  std::vector<Index> live;
  for (Index j = 0; j < p; ++j) {
    if (std::isinf(f(j)) || q.gram(j, j) <= 0.0) res.beta(j) = 0.0;
    else live.push_back(j);
  }
  Vec grad = q.linear - q.gram * res.beta;
  auto update = [&](Index j) {
    const double gjj = q.gram(j, j);
    const double old = res.beta(j);
    const double zj = grad(j) + gjj * old;
    const double updated =
        detail::soft_threshold(zj, lambda * f(j) * a) / (gjj + lambda * f(j) * (1.0 - a));
    const double delta = updated - old;
    if (delta != 0.0) {
      res.beta(j) = updated;
      grad.noalias() -= q.gram.col(j) * delta;
    }
    return std::abs(delta);
  };

  // One step toward the fixed-sign solution on `active`; returns false when
  // the support system is unusable. `reached` reports a full step.
  std::vector<Index> active;
  auto support_step = [&](bool& reached) {
    const Index k = static_cast<Index>(active.size());
    Mat g(k, k);
    Vec rhs(k);
    for (Index r = 0; r < k; ++r) {
      const Index j = active[static_cast<std::size_t>(r)];
      const double sgn = res.beta(j) > 0 ? 1.0 : -1.0;
      rhs(r) = q.linear(j) - lambda * f(j) * a * sgn;
      for (Index c = 0; c < k; ++c) g(r, c) = q.gram(j, active[static_cast<std::size_t>(c)]);
      g(r, r) += lambda * f(j) * (1.0 - a);
    }
    const Eigen::LLT<Mat> llt(g);
    if (llt.info() != Eigen::Success) return false;
    const Vec d = llt.matrixLLT().diagonal().cwiseAbs2();
    if (d.minCoeff() <= 1e-12 * d.maxCoeff()) return false;
    const Vec target = llt.solve(rhs);
    if (!target.allFinite()) return false;
    double t = 1.0;
    Index hit = -1;
    for (Index r = 0; r < k; ++r) {
      const Index j = active[static_cast<std::size_t>(r)];
      const double b = res.beta(j);
      if (f(j) * a > 0.0 && target(r) * b <= 0.0) {
        const double tj = b / (b - target(r));
        if (tj < t) {
          t = tj;
          hit = j;
        }
      }
    }
    for (Index r = 0; r < k; ++r) {
      const Index j = active[static_cast<std::size_t>(r)];
      res.beta(j) += t * (target(r) - res.beta(j));
    }
    if (hit >= 0) res.beta(hit) = 0.0;
    grad = q.linear - q.gram * res.beta;
    reached = hit < 0;
    return true;
  };

  res.sweeps = 0;
  while (res.sweeps < opt.max_sweeps) {
    ++res.sweeps;
    double max_change = 0.0;
    for (Index j : live) max_change = std::max(max_change, update(j));
    if (max_change < opt.tol) {
      res.converged = true;
      break;
    }
    bool use_steps = true;
    int cycles = 0;
    while (res.sweeps < opt.max_sweeps) {
      active.clear();
      for (Index j : live)
        if (res.beta(j) != 0.0) active.push_back(j);
      if (active.empty()) break;
      ++res.sweeps;
      // a few plain cycles first; they are cheaper than a factorization when
      // the support problem is well conditioned
      bool reached = false;
      if (use_steps && ++cycles > 8) {
        if (support_step(reached)) {
          if (reached) break;
          continue;
        }
        use_steps = false;
      }
      double inner = 0.0;
      for (Index j : active) inner = std::max(inner, update(j));
      if (inner < opt.tol) break;
    }
  }
  return res;
}

inline CdResult coordinate_descent(const Mat& x_ps, const Vec& y_ps, const PenaltySpec& pen,
                                   double lambda, const Vec& beta_init, const CdOptions& opt = {}) {
  return coordinate_descent(QuadraticForm::from_design(x_ps, y_ps), pen, lambda, beta_init, opt);
}

struct KktReport {
  bool ok = true;
  double max_violation = 0.0;
  double tolerance = 0.0;
};

/// Independent certificate: stationarity for active coordinates and the
/// subgradient bound for zero coordinates, at tol = rel_tol * ||c||_inf.
inline KktReport check_kkt(const QuadraticForm& q, const PenaltySpec& pen, double lambda,
                           const Vec& beta, double rel_tol = 1e-7) {
  const Index p = q.size();
  const Vec f = pen.factors(p);
  const double a = pen.l1_share();
  const Vec g = q.linear - q.gram * beta;
  KktReport r;
  r.tolerance = rel_tol * std::max(q.linear.cwiseAbs().maxCoeff(), 1e-300);
  for (Index j = 0; j < p; ++j) {
    double v = 0.0;
    if (std::isinf(f(j)) || q.gram(j, j) <= 0.0) {
      v = beta(j) == 0.0 ? 0.0 : std::numeric_limits<double>::infinity();
    } else if (beta(j) != 0.0) {
      const double sgn = beta(j) > 0 ? 1.0 : -1.0;
      v = std::abs(g(j) - lambda * f(j) * (a * sgn + (1.0 - a) * beta(j)));
    } else {
      v = std::max(0.0, std::abs(g(j)) - lambda * f(j) * a);
    }
    r.max_violation = std::max(r.max_violation, v);
  }
  r.ok = r.max_violation <= r.tolerance;
  return r;
}

/// Minimizer over unpenalized coordinates with the penalized ones held at 0.
inline Vec null_solution(const QuadraticForm& q, const Vec& f) {
  const Index p = q.size();
  IndexList u;
  for (Index j = 0; j < p; ++j)
    if (f(j) == 0.0 && q.gram(j, j) > 0.0) u.push_back(j);
  Vec beta = Vec::Zero(p);
  if (u.empty()) return beta;
  const Mat guu = detail::take_block(q.gram, u);
  const Vec cu = detail::take(q.linear, u);
  const Vec bu = guu.completeOrthogonalDecomposition().solve(cu);
  for (std::size_t k = 0; k < u.size(); ++k) beta(u[k]) = bu(static_cast<Index>(k));
  return beta;
}

/// Smallest lambda at which every penalized coefficient is zero.
inline double lambda_max(const QuadraticForm& q, const PenaltySpec& pen) {
  const Vec f = pen.factors(q.size());
  const double a = std::max(pen.l1_share(), 1e-3);
  const Vec g = q.linear - q.gram * null_solution(q, f);
  double lm = 0.0;
  for (Index j = 0; j < q.size(); ++j)
    if (f(j) > 0.0 && std::isfinite(f(j)) && q.gram(j, j) > 0.0)
      lm = std::max(lm, std::abs(g(j)) / (f(j) * a));
  return lm;
}

inline std::vector<double> log_grid(double hi, double ratio, int n) {
  detail::require(n >= 2, Errc::InvalidArgument, "lambda grid needs at least 2 points");
  detail::require(ratio > 0.0 && ratio < 1.0, Errc::InvalidArgument,
                  "lambda_min_ratio must lie in (0,1)");
  if (!(hi > 0.0)) hi = 1e-12;
  std::vector<double> g(static_cast<std::size_t>(n));
  const double step = std::log(ratio) / (n - 1);
  for (int k = 0; k < n; ++k) g[static_cast<std::size_t>(k)] = hi * std::exp(step * k);
  g.front() = hi;
  return g;
}

struct SolvePath {
  std::vector<double> lambdas;
  std::vector<Vec> betas;
  std::vector<bool> kkt_ok;
  std::vector<long> n_iter;
  std::vector<bool> converged;
};

/// Warm-started path over a caller-supplied descending grid.
inline SolvePath lambda_path(const QuadraticForm& q, const PenaltySpec& pen,
                             const std::vector<double>& lambdas, const CdOptions& opt = {}) {
  SolvePath path;
  path.lambdas = lambdas;
  Vec beta = null_solution(q, pen.factors(q.size()));
  for (double lam : lambdas) {
    CdResult r = coordinate_descent(q, pen, lam, beta, opt);
    KktReport k = check_kkt(q, pen, lam, r.beta);
    // tighten once if the change criterion stopped short of the certificate
    if (!k.ok && r.converged) {
      CdOptions tight = opt;
      tight.tol = opt.tol * 1e-3;
      r = coordinate_descent(q, pen, lam, r.beta, tight);
      k = check_kkt(q, pen, lam, r.beta);
    }
    beta = r.beta;
    path.betas.push_back(r.beta);
    path.kkt_ok.push_back(k.ok);
    path.n_iter.push_back(r.sweeps);
    path.converged.push_back(r.converged);
  }
  return path;
}

inline SolvePath lambda_path(const QuadraticForm& q, const PenaltySpec& pen, int n_lambda,
                             double lambda_min_ratio, const CdOptions& opt = {}) {
  return lambda_path(q, pen, log_grid(lambda_max(q, pen), lambda_min_ratio, n_lambda), opt);
}

enum class PilotKind { Glm, Ridge };

/// w_j = |pilot_j|^-gamma. A zero GLM pilot excludes the coefficient (+inf);
/// ridge pilots are floored at 1e-12.
inline Vec adaptive_weights(const Vec& pilot, double gamma, PilotKind kind) {
  if (!(gamma > 0.0)) throw Error(Errc::NonPositiveGamma, "gamma must be positive");
  Vec w(pilot.size());
  for (Index j = 0; j < pilot.size(); ++j) {
    double a = std::abs(pilot(j));
    if (a == 0.0 && kind == PilotKind::Glm) {
      w(j) = std::numeric_limits<double>::infinity();
      continue;
    }
    a = std::max(a, 1e-12);
    w(j) = std::pow(a, -gamma);
  }
  return w;
}

}  // namespace htlgmm
