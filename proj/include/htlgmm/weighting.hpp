#pragma once

#include <optional>

#include "htlgmm/moments.hpp"

namespace htlgmm {

/// Plug-in estimate of the asymptotic variance of sqrt(n) U_n(beta, theta~),
/// accounting for the estimation of theta_A (main study) and theta_Z
/// (external study). Every block is kept so callers can audit the assembly.
struct VarianceBlocks {
  Mat v11;
  Mat v12;
  Mat v22;
  Mat assembled;

  Mat v_xz;
  Mat v_x_xr;
  Mat v_zz;
  Mat v_z_xr;
  Mat gamma_xr_xr;
  Mat gamma_z_xr;
  Mat gamma_xr_a;  ///< first p_A columns of gamma_xr_xr^{-1}
  Mat v_theta_a;
  Mat v_theta_z_ext;
  double ratio = 0.0;          ///< n_ext / n
  double inverse_ratio = 0.0;  ///< multiplier actually applied to v_theta_z_ext
};

struct VarianceOptions {
  /// Replaces 1/ratio; 0 reproduces the n_ext -> infinity limit.
  std::optional<double> inverse_ratio_override;
};

namespace detail {

/// A^T diag(wt) B / n, using a symmetric rank update when A and B coincide.
inline Mat weighted_cross(const Mat& a, const Vec& wt, const Mat& b, double inv_n) {
  return a.transpose() * (wt.asDiagonal() * b) * inv_n;
}

inline Mat weighted_gram(const Mat& a, const Vec& wt_sqrt_signed, double inv_n) {
  // wt_sqrt_signed holds r_i; result is sum r_i^2 a_i a_i^T / n
  const Mat ar = wt_sqrt_signed.asDiagonal() * a;
  Mat g = Mat::Zero(a.cols(), a.cols());
  g.selfadjointView<Eigen::Lower>().rankUpdate(ar.transpose(), inv_n);
  return g.selfadjointView<Eigen::Lower>();
}

inline Mat inverse_checked(const Mat& m, Errc code, const char* what) {
  if (m.cols() == 0) return Mat(0, 0);
  Eigen::ColPivHouseholderQR<Mat> qr(m);
  qr.setThreshold(1e-10);
  if (qr.rank() < m.cols()) throw Error(code, std::string(what) + " is singular");
  return qr.inverse();
}

}  // namespace detail

inline VarianceBlocks estimate_variance(const Dataset& d, const GlmFamily& family,
                                        const Vec& beta0, const ThetaTilde& theta,
                                        const ExternalSummary& external, const Mat& v_theta_a,
                                        const VarianceOptions& opt = {}) {
  detail::check_beta(d, beta0);
  const Index pa = d.part.p_a, pz = d.part.p_z, px = d.part.p_x();
  detail::require_dim(theta.theta_a.size(), pa, "theta_A");
  detail::require_dim(theta.theta_z_ext.size(), pz, "theta_Z");
  detail::require_dim(external.theta_z.size(), pz, "external theta_Z");
  detail::require_dim(v_theta_a.rows(), pa, "V_theta_A rows");
  detail::require_dim(v_theta_a.cols(), pa, "V_theta_A cols");

  const double n = static_cast<double>(d.n());
  const double inv_n = 1.0 / n;
  const Mat x = d.x;
  const Mat z = d.z();
  const Mat xr = d.xr();

  const Vec mu = family.mu(x * beta0);
  const Vec mu_r = family.mu(xr * theta.stacked());
  const Vec r1 = mu - d.y;    // U1 residual
  const Vec r2 = mu - mu_r;   // U2 residual
  const Vec r3 = mu_r - d.y;  // U3 residual

  VarianceBlocks b;
  b.v11 = detail::weighted_gram(x, r1, inv_n);
  b.v_xz = detail::weighted_cross(x, r1.cwiseProduct(r2), z, inv_n);
  b.v_zz = detail::weighted_gram(z, r2, inv_n);
  b.v_x_xr = detail::weighted_cross(x, r1.cwiseProduct(r3), xr, inv_n);
  b.v_z_xr = detail::weighted_cross(z, r2.cwiseProduct(r3), xr, inv_n);

  const Vec dr = family.mu_prime(xr * theta.stacked());
  b.gamma_xr_xr = detail::symmetrize(detail::weighted_cross(xr, dr, xr, inv_n));
  b.gamma_z_xr = detail::weighted_cross(z, dr, xr, inv_n);
  const Mat gamma_inv = detail::inverse_checked(b.gamma_xr_xr, Errc::SingularGamma, "Gamma_{xR,xR}");
  b.gamma_xr_a = gamma_inv.leftCols(pa);
  const Mat gamma_a_z = b.gamma_z_xr.leftCols(pa).transpose();

  b.ratio = external.n_ext / n;
  b.inverse_ratio = opt.inverse_ratio_override.value_or(1.0 / b.ratio);
  b.v_theta_a = v_theta_a;
  b.v_theta_z_ext = external.v_scaled();

  const Mat correction = b.gamma_xr_a * gamma_a_z;  // p_R x p_Z
  b.v12 = b.v_xz + b.v_x_xr * correction;

  Mat theta_cov = Mat::Zero(pa + pz, pa + pz);
  theta_cov.topLeftCorner(pa, pa) = v_theta_a;
  theta_cov.bottomRightCorner(pz, pz) = b.inverse_ratio * b.v_theta_z_ext;
  const Mat cross = b.v_z_xr * correction;
  b.v22 = b.v_zz + b.gamma_z_xr * theta_cov * b.gamma_z_xr.transpose() + cross +
          cross.transpose();
  b.v22 = detail::symmetrize(b.v22);

  b.assembled.resize(px + pz, px + pz);
  b.assembled.topLeftCorner(px, px) = b.v11;
  b.assembled.topRightCorner(px, pz) = b.v12;
  b.assembled.bottomLeftCorner(pz, px) = b.v12.transpose();
  b.assembled.bottomRightCorner(pz, pz) = b.v22;
  b.assembled = detail::symmetrize(b.assembled);
  return b;
}

enum class WeightMode { Unweighted, OrdinaryOptimal, VariationalRidge, VariationalMS };

inline const char* weight_mode_name(WeightMode m) {
  switch (m) {
    case WeightMode::Unweighted: return "unweighted";
    case WeightMode::OrdinaryOptimal: return "owgmm";
    case WeightMode::VariationalRidge: return "ridge";
    case WeightMode::VariationalMS: return "ms";
  }
  return "?";
}

struct WeightSpec {
  WeightMode mode = WeightMode::VariationalMS;
  double alpha = 0.0;
};

struct WeightMatrix {
  Mat c;
  Mat c_half;
  double min_eigenvalue = 0.0;   ///< of V + alpha K after flooring
  double condition_number = 1.0;

  static WeightMatrix identity(Index m) {
    return WeightMatrix{Mat::Identity(m, m), Mat::Identity(m, m), 1.0, 1.0};
  }
};

/// Symmetric PSD square root; negative eigenvalues are clamped to zero.
inline Mat matrix_sqrt_psd(const Mat& m) {
  detail::require(m.rows() == m.cols(), Errc::DimensionMismatch, "matrix_sqrt_psd needs a square matrix");
  if (m.size() == 0) return m;
  const double scale = std::max(1.0, m.cwiseAbs().maxCoeff());
  if ((m - m.transpose()).cwiseAbs().maxCoeff() > 1e-8 * scale)
    throw Error(Errc::NotSymmetric, "matrix_sqrt_psd: input is not symmetric");
  Eigen::SelfAdjointEigenSolver<Mat> es(detail::symmetrize(m));
  const Vec root = es.eigenvalues().cwiseMax(0.0).cwiseSqrt();
  return detail::symmetrize(es.eigenvectors() * root.asDiagonal() * es.eigenvectors().transpose());
}

/// C_n = (V + alpha K)^{-1}, K = blockdiag(K11, 0), with eigenvalues floored at
/// 1e-10 * lambda_max before inversion.
inline WeightMatrix build_weight(const VarianceBlocks& b, const WeightSpec& spec) {
  const Index m = b.assembled.rows();
  if (spec.mode == WeightMode::Unweighted) return WeightMatrix::identity(m);
  detail::require(spec.alpha >= 0.0, Errc::InvalidArgument, "alpha must be >= 0");

  Mat target = b.assembled;
  const Index px = b.v11.rows();
  if (spec.mode == WeightMode::VariationalRidge)
    target.topLeftCorner(px, px).diagonal().array() += spec.alpha;
  else if (spec.mode == WeightMode::VariationalMS)
    target.topLeftCorner(px, px) += spec.alpha * b.v11;

  Eigen::SelfAdjointEigenSolver<Mat> es(detail::symmetrize(target));
  const Vec ev = es.eigenvalues();
  const double lmax = ev.maxCoeff();
  if (!(lmax > 0.0) || !std::isfinite(lmax))
    throw Error(Errc::NotPositiveDefinite, "V + alpha K has no positive eigenvalue");
  const double floor = 1e-10 * lmax;
  const Vec clamped = ev.cwiseMax(floor);
  const Mat& q = es.eigenvectors();

  WeightMatrix w;
  w.c = detail::symmetrize(q * clamped.cwiseInverse().asDiagonal() * q.transpose());
  w.c_half = detail::symmetrize(q * clamped.cwiseSqrt().cwiseInverse().asDiagonal() * q.transpose());
  w.min_eigenvalue = clamped.minCoeff();
  w.condition_number = lmax / w.min_eigenvalue;
  return w;
}

/// Default alpha multipliers; ridge kernels are rescaled by trace(V11)/p_X so
/// the grid is unit-free, the multiplicative-shrinkage kernel already is.
inline std::vector<double> default_alpha_multipliers() { return {0.0, 0.25, 0.5, 1.0, 2.0, 4.0}; }

inline std::vector<double> alpha_grid(const VarianceBlocks& b, WeightMode mode,
                                      const std::vector<double>& multipliers =
                                          default_alpha_multipliers()) {
  if (mode == WeightMode::Unweighted || mode == WeightMode::OrdinaryOptimal) return {0.0};
  double scale = 1.0;
  if (mode == WeightMode::VariationalRidge && b.v11.rows() > 0)
    scale = b.v11.trace() / static_cast<double>(b.v11.rows());
  std::vector<double> g;
  g.reserve(multipliers.size());
  for (double m : multipliers) g.push_back(m * scale);
  return g;
}

}  // namespace htlgmm
