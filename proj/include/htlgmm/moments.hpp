#pragma once

#include "htlgmm/glm.hpp"

namespace htlgmm {

/// Plug-in reduced-model coefficients: theta_A from the main study, theta_Z
/// from the external study. Stacked order is [theta_A; theta_Z].
struct ThetaTilde {
  Vec theta_a;
  Vec theta_z_ext;

  Vec stacked() const {
    Vec t(theta_a.size() + theta_z_ext.size());
    t << theta_a, theta_z_ext;
    return t;
  }
  Index size() const { return theta_a.size() + theta_z_ext.size(); }
};

/// Summary statistics of the external reduced model. `cov_raw` is the
/// covariance of the estimator itself (what regression software reports);
/// the root-n(ext) scaled variance is n_ext * cov_raw.
struct ExternalSummary {
  Vec theta_z;
  Mat cov_raw;
  double n_ext = 1.0;

  Mat v_scaled() const { return n_ext * cov_raw; }

  void validate() const {
    detail::require_dim(cov_raw.rows(), theta_z.size(), "external covariance rows");
    detail::require_dim(cov_raw.cols(), theta_z.size(), "external covariance cols");
    detail::require(theta_z.allFinite() && cov_raw.allFinite(), Errc::NonFiniteInput,
                    "external summary has non-finite entries");
    detail::require(n_ext >= 1.0, Errc::InvalidArgument, "n_ext must be >= 1");
    const double scale = std::max(1.0, cov_raw.cwiseAbs().maxCoeff());
    if ((cov_raw - cov_raw.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
      throw Error(Errc::NotSymmetric, "external covariance is not symmetric");
    if (cov_raw.size() > 0) {
      Eigen::SelfAdjointEigenSolver<Mat> es(detail::symmetrize(cov_raw));
      if (es.eigenvalues().minCoeff() < -1e-10 * scale)
        throw Error(Errc::NotPositiveDefinite, "external covariance is not PSD");
    }
  }
};

struct MomentEval {
  Vec u1;
  Vec u2;
  Vec u_stacked;
  Mat jac_beta;     ///< d U_n / d beta, (p_X + p_Z) x p_X
  Mat gamma_z_xr;   ///< (1/n) Z^T D_R X_R
  Mat gamma_xr_xr;  ///< (1/n) X_R^T D_R X_R
};

namespace detail {

inline void check_beta(const Dataset& d, const Vec& beta) {
  require_dim(beta.size(), d.part.p_x(), "beta");
  require(beta.allFinite(), Errc::NonFiniteInput, "beta has non-finite entries");
}

inline void check_theta(const Dataset& d, const Vec& theta) {
  require_dim(theta.size(), d.part.p_r(), "theta");
}

}  // namespace detail

/// (1/n) sum {mu(x_i^T beta) - y_i} x_i
inline Vec eval_u1(const Dataset& d, const GlmFamily& family, const Vec& beta) {
  detail::check_beta(d, beta);
  const Vec r = family.mu(d.x * beta) - d.y;
  return d.x.transpose() * r / static_cast<double>(d.n());
}

/// (1/n) sum {mu(x_i^T beta) - mu(x_Ri^T theta)} z_i
inline Vec eval_u2(const Dataset& d, const GlmFamily& family, const Vec& beta,
                   const ThetaTilde& theta) {
  detail::check_beta(d, beta);
  detail::require_dim(theta.theta_a.size(), d.part.p_a, "theta_A");
  detail::require_dim(theta.theta_z_ext.size(), d.part.p_z, "theta_Z");
  const Vec r = family.mu(d.x * beta) - family.mu(d.xr() * theta.stacked());
  return d.z().transpose() * r / static_cast<double>(d.n());
}

/// (1/n) sum {mu(a_i^T theta_A + z_i^T theta_Z) - y_i} [a_i; z_i]
inline Vec eval_u3(const Dataset& d, const GlmFamily& family, const Vec& theta) {
  detail::check_theta(d, theta);
  const Vec r = family.mu(d.xr() * theta) - d.y;
  return d.xr().transpose() * r / static_cast<double>(d.n());
}

inline Vec eval_u(const Dataset& d, const GlmFamily& family, const Vec& beta,
                  const ThetaTilde& theta) {
  Vec u(d.part.p_x() + d.part.p_z);
  u << eval_u1(d, family, beta), eval_u2(d, family, beta, theta);
  return u;
}

/// Stacked moments, d U_n / d beta at `beta`, and the Gamma blocks evaluated
/// with D_R = diag{mu'(X_R theta)}.
inline MomentEval eval_jacobians(const Dataset& d, const GlmFamily& family, const Vec& beta,
                                 const Vec& theta) {
  detail::check_beta(d, beta);
  detail::check_theta(d, theta);
  const double inv_n = 1.0 / static_cast<double>(d.n());
  const Index px = d.part.p_x(), pz = d.part.p_z;

  const Vec eta = d.x * beta;
  const Vec eta_r = d.xr() * theta;
  const Vec mu = family.mu(eta);
  const Vec mu_r = family.mu(eta_r);

  MomentEval m;
  m.u1 = d.x.transpose() * (mu - d.y) * inv_n;
  m.u2 = d.z().transpose() * (mu - mu_r) * inv_n;
  m.u_stacked.resize(px + pz);
  m.u_stacked << m.u1, m.u2;

  const Mat dx = family.mu_prime(eta).asDiagonal() * d.x;
  m.jac_beta.resize(px + pz, px);
  m.jac_beta.topRows(px) = d.x.transpose() * dx * inv_n;
  m.jac_beta.bottomRows(pz) = d.z().transpose() * dx * inv_n;
  m.jac_beta.topRows(px) = detail::symmetrize(m.jac_beta.topRows(px));

  const Mat dxr = family.mu_prime(eta_r).asDiagonal() * d.xr();
  m.gamma_xr_xr = detail::symmetrize(d.xr().transpose() * dxr * inv_n);
  m.gamma_z_xr = d.z().transpose() * dxr * inv_n;
  return m;
}

}  // namespace htlgmm
