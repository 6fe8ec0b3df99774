#pragma once

#include "htlgmm/weighting.hpp"

namespace htlgmm {

/// Least-squares surrogate of the GMM quadratic form:
///   (n/2) U^T C U  ~=  (1/2) || y_ps - x_ps beta ||^2 + objective_offset
/// exact for the linear family, tangent at the expansion point otherwise.
struct PseudoProblem {
  Mat x_ps;  ///< (p_X + p_Z) x p_X
  Vec y_ps;
  double objective_offset = 0.0;
  Vec expansion_point;
};

struct PseudoOptions {
  /// Test hook used by the self-check negative control: negates the
  /// calibration rows of U_n when forming y_ps.
  bool flip_calibration_sign = false;
};

/// Moments and Jacobian at the expansion point; they do not depend on the
/// weight, so one expansion serves every weight candidate.
struct Expansion {
  Mat jac_beta;
  Vec u;
  Vec point;
  Index n = 0;
};

inline Expansion expand(const Dataset& d, const GlmFamily& family, const Vec& beta0,
                        const ThetaTilde& theta, const PseudoOptions& opt = {}) {
  detail::require_dim(theta.theta_a.size(), d.part.p_a, "theta_A");
  detail::require_dim(theta.theta_z_ext.size(), d.part.p_z, "theta_Z");
  detail::require(beta0.allFinite(), Errc::NonFiniteInput, "expansion point is not finite");
  MomentEval ev = eval_jacobians(d, family, beta0, theta.stacked());
  Expansion e;
  e.jac_beta = std::move(ev.jac_beta);
  e.u = std::move(ev.u_stacked);
  if (opt.flip_calibration_sign) e.u.tail(d.part.p_z) *= -1.0;
  e.point = beta0;
  e.n = d.n();
  return e;
}

inline PseudoProblem build_pseudo(const Expansion& e, const WeightMatrix& weight) {
  detail::require_dim(weight.c_half.rows(), e.u.size(), "weight matrix");
  const double root_n = std::sqrt(static_cast<double>(e.n));
  PseudoProblem p;
  p.x_ps = root_n * weight.c_half * e.jac_beta;
  p.y_ps = root_n * weight.c_half * (e.jac_beta * e.point - e.u);
  p.expansion_point = e.point;
  const double exact = 0.5 * static_cast<double>(e.n) * e.u.dot(weight.c * e.u);
  p.objective_offset = exact - 0.5 * (p.y_ps - p.x_ps * e.point).squaredNorm();
  return p;
}

inline PseudoProblem build_pseudo(const Dataset& d, const GlmFamily& family, const Vec& beta0,
                                  const ThetaTilde& theta, const WeightMatrix& weight,
                                  const PseudoOptions& opt = {}) {
  detail::require_dim(weight.c_half.rows(), d.part.p_x() + d.part.p_z, "weight matrix");
  return build_pseudo(expand(d, family, beta0, theta, opt), weight);
}

/// (n/2) U_n^T C_n U_n, penalty excluded.
inline double gmm_objective(const Dataset& d, const GlmFamily& family, const Vec& beta,
                            const ThetaTilde& theta, const WeightMatrix& weight) {
  const Vec u = eval_u(d, family, beta, theta);
  detail::require_dim(weight.c.rows(), u.size(), "weight matrix");
  return 0.5 * static_cast<double>(d.n()) * u.dot(weight.c * u);
}

/// (1/2) beta^T x_ps^T x_ps beta - beta^T x_ps^T y_ps
inline double pseudo_ls_objective(const PseudoProblem& p, const Vec& beta) {
  const Vec xb = p.x_ps * beta;
  return 0.5 * xb.squaredNorm() - xb.dot(p.y_ps);
}

}  // namespace htlgmm
