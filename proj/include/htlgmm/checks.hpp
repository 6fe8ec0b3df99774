#pragma once

#include "htlgmm/driver.hpp"

namespace htlgmm {

struct CheckResult {
  std::string name;
  bool passed = false;
  double value = 0.0;      ///< measured error
  double tolerance = 0.0;
  std::string detail;
};

struct CheckOptions {
  /// Negative control: negate the calibration rows when forming y_ps. Only
  /// the exactness check is expected to notice.
  bool inject_fault = false;
};

namespace detail {

/// Linear instance with p_X = 12 and p_Z = 4 plus a variational weight.
struct CheckInstance {
  Dataset d;
  ThetaTilde theta;
  WeightMatrix w;
};

inline CheckInstance check_instance(std::uint64_t seed, Index n = 200) {
  const Partition part{0, 4, 8};
  auto rng = make_rng(seed, 11);
  const Mat x = standard_normal(n, part.p_x(), rng);
  const Mat xe = standard_normal(10 * n, part.p_x(), rng);
  Vec beta = Vec::Zero(part.p_x());
  for (Index j = 0; j < part.p_x(); j += 2) beta(j) = 0.5;
  std::normal_distribution<double> nd;
  Vec y = x * beta, ye = xe * beta;
  for (Index i = 0; i < y.size(); ++i) y(i) += nd(rng);
  for (Index i = 0; i < ye.size(); ++i) ye(i) += nd(rng);
  const GlmFamily fam = linear_family();
  CheckInstance c{Dataset(y, x, part), {}, {}};
  const ReducedFit ext_fit = fit_reduced_main(Dataset(ye, xe, part), fam);
  const ExternalSummary ext{ext_fit.theta_z(), ext_fit.cov_z(), static_cast<double>(ye.size())};
  const ReducedFit r = fit_reduced_main(c.d, fam);
  c.theta = ThetaTilde{r.theta_a(), ext.theta_z};
  const Vec beta0 = fit_glm(x, y, fam).theta;
  const VarianceBlocks b = estimate_variance(c.d, fam, beta0, c.theta, ext, r.cov_a() * static_cast<double>(n));
  c.w = build_weight(b, WeightSpec{WeightMode::VariationalMS, 0.5});
  return c;
}

}  // namespace detail

/// Largest relative spread, over random beta pairs, of
///   (1/2)||y_ps - x_ps beta||^2 - (n/2) U_n(beta)^T C U_n(beta)
/// which must be constant in beta for the linear family.
inline double pseudo_exactness_gap(std::uint64_t seed, int pairs = 10, bool inject_fault = false) {
  const detail::CheckInstance c = detail::check_instance(seed);
  const GlmFamily fam = linear_family();
  const double n = static_cast<double>(c.d.n());
  const Index p = c.d.part.p_x();
  auto rng = make_rng(seed, 12);
  const Vec b0 = standard_normal(p, 1, rng).col(0);
  const PseudoProblem ps =
      build_pseudo(expand(c.d, fam, b0, c.theta, PseudoOptions{inject_fault}), c.w);
  auto parts = [&](const Vec& beta) {
    const double ls = 0.5 * (ps.y_ps - ps.x_ps * beta).squaredNorm();
    const Vec u = eval_u(c.d, fam, beta, c.theta);
    return std::pair{ls, 0.5 * n * u.dot(c.w.c * u)};
  };
  double worst = 0.0;
  for (int k = 0; k < pairs; ++k) {
    const Vec b1 = standard_normal(p, 1, rng).col(0);
    const Vec b2 = standard_normal(p, 1, rng).col(0);
    const auto [l1, g1] = parts(b1);
    const auto [l2, g2] = parts(b2);
    const double scale = std::max({std::abs(l1), std::abs(g1), std::abs(l2), std::abs(g2), 1e-300});
    worst = std::max(worst, std::abs((l1 - g1) - (l2 - g2)) / scale);
  }
  return worst;
}

inline std::vector<CheckResult> run_checks(const CheckOptions& opt = {}) {
  std::vector<CheckResult> out;

  {
    CheckResult r{"pseudo_exactness", false, 0.0, 1e-8, "linear family, 5 instances x 10 beta pairs"};
    for (std::uint64_t s = 1; s <= 5; ++s)
      r.value = std::max(r.value, pseudo_exactness_gap(s, 10, opt.inject_fault));
    r.passed = r.value <= r.tolerance;
    out.push_back(r);
  }

  {
    CheckResult r{"kkt_certificate", true, 0.0, 0.0, "Lasso path on a pseudo problem, 30 lambdas"};
    const detail::CheckInstance c = detail::check_instance(7);
    const PseudoProblem ps = build_pseudo(c.d, linear_family(), Vec::Zero(c.d.part.p_x()), c.theta, c.w);
    const QuadraticForm q = QuadraticForm::from_design(ps.x_ps, ps.y_ps);
    const PenaltySpec pen;
    const SolvePath path = lambda_path(q, pen, 30, 1e-3);
    for (std::size_t l = 0; l < path.lambdas.size(); ++l) {
      const KktReport k = check_kkt(q, pen, path.lambdas[l], path.betas[l]);
      r.value = std::max(r.value, k.max_violation / std::max(k.tolerance, 1e-300));
      r.passed = r.passed && k.ok;
    }
    r.tolerance = 1.0;  // violation as a multiple of the certificate tolerance
    out.push_back(r);
  }

  {
    CheckResult r{"matrix_root", false, 0.0, 1e-10, "seeded 5x5 PSD, relative Frobenius error"};
    auto rng = make_rng(3, 13);
    const Mat a = standard_normal(5, 5, rng);
    const Mat m = a * a.transpose();
    const Mat h = matrix_sqrt_psd(m);
    r.value = (h * h - m).norm() / m.norm();
    r.passed = r.value <= r.tolerance;
    out.push_back(r);
  }

  {
    CheckResult r{"bh_hand_case", false, 0.0, 1e-15, "p = (0.01, 0.04, 0.03, 0.005) at q = 0.05"};
    const BhResult bh = bh_adjust(Vec{{0.01, 0.04, 0.03, 0.005}}, 0.05);
    const Vec expect{{0.02, 0.04, 0.04, 0.02}};
    r.value = (bh.q_values - expect).cwiseAbs().maxCoeff();
    r.passed = r.value <= r.tolerance && bh.rejected == IndexList{0, 1, 2, 3};
    out.push_back(r);
  }

  {
    CheckResult r{"transportability_null", false, 0.0, 1e-12, "external equal to the main reduced fit"};
    const detail::CheckInstance c = detail::check_instance(9);
    const ReducedFit f = fit_reduced_main(c.d, linear_family());
    const TransportabilityResult t =
        transportability_check(f, ExternalSummary{f.theta_z(), f.cov_z(), 1000.0});
    r.value = t.statistic;
    r.passed = t.statistic <= r.tolerance && t.p_value == 1.0;
    out.push_back(r);
  }
  return out;
}

inline bool all_passed(const std::vector<CheckResult>& r) {
  return std::all_of(r.begin(), r.end(), [](const CheckResult& c) { return c.passed; });
}

}  // namespace htlgmm
