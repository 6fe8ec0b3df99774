#pragma once

#include "htlgmm/common.hpp"

namespace htlgmm {

enum class FamilyKind { Linear, Logistic };

inline const char* family_name(FamilyKind k) {
  return k == FamilyKind::Linear ? "linear" : "logistic";
}

/// Canonical-link exponential family. Only the cumulant derivatives ever enter
/// the estimating equations, so the base measure is not represented.
struct GlmFamily {
  FamilyKind kind = FamilyKind::Linear;

  static double expit(double s) {
    if (s >= 0) return 1.0 / (1.0 + std::exp(-s));
    const double e = std::exp(s);
    return e / (1.0 + e);
  }

  double mu(double s) const { return kind == FamilyKind::Linear ? s : expit(s); }

  double mu_prime(double s) const {
    if (kind == FamilyKind::Linear) return 1.0;
    const double p = expit(s);
    return p * (1.0 - p);
  }

  double psi(double s) const {
    if (kind == FamilyKind::Linear) return 0.5 * s * s;
    return s > 0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
  }

  Vec mu(const Vec& eta) const { return eta.unaryExpr([this](double s) { return mu(s); }); }
  Vec mu_prime(const Vec& eta) const {
    return eta.unaryExpr([this](double s) { return mu_prime(s); });
  }

  /// sum_i { y_i eta_i - psi(eta_i) }
  double log_likelihood(const Vec& y, const Vec& eta) const {
    double ll = 0.0;
    for (Index i = 0; i < y.size(); ++i) ll += y(i) * eta(i) - psi(eta(i));
    return ll;
  }

  /// Deviance of the fit relative to the saturated model.
  double deviance(const Vec& y, const Vec& eta) const {
    double d = 0.0;
    if (kind == FamilyKind::Linear) {
      d = (y - eta).squaredNorm();
    } else {
      for (Index i = 0; i < y.size(); ++i) d += 2.0 * (psi(eta(i)) - y(i) * eta(i));
    }
    return d;
  }

  void validate_outcome(const Vec& y) const {
    detail::require(y.allFinite(), Errc::NonFiniteInput, "outcome has non-finite entries");
    if (kind == FamilyKind::Logistic) {
      for (Index i = 0; i < y.size(); ++i)
        if (y(i) != 0.0 && y(i) != 1.0)
          throw Error(Errc::InvalidOutcome,
                      "logistic outcome must be 0/1 (row " + std::to_string(i) + ")");
    }
  }
};

inline GlmFamily linear_family() { return GlmFamily{FamilyKind::Linear}; }
inline GlmFamily logistic_family() { return GlmFamily{FamilyKind::Logistic}; }

/// Column counts of the [A | Z | W] blocks. Columns of Dataset::x are always
/// stored in this canonical order.
struct Partition {
  Index p_a = 0;
  Index p_z = 0;
  Index p_w = 0;

  Index p_x() const { return p_a + p_z + p_w; }
  Index p_r() const { return p_a + p_z; }
  bool operator==(const Partition&) const = default;
};

/// Main-study data: outcome and covariates with columns ordered [A | Z | W].
struct Dataset {
  Vec y;
  Mat x;
  Partition part;

  Dataset() = default;
  Dataset(Vec y_, Mat x_, Partition p) : y(std::move(y_)), x(std::move(x_)), part(p) {
    validate();
  }

  /// Builds a canonical dataset from arbitrary column index sets.
  static Dataset from_columns(const Vec& y, const Mat& x, const IndexList& a, const IndexList& z,
                              const IndexList& w) {
    std::vector<int> seen(static_cast<std::size_t>(x.cols()), 0);
    IndexList order;
    for (const auto* block : {&a, &z, &w}) {
      for (Index j : *block) {
        if (j < 0 || j >= x.cols())
          throw Error(Errc::InvalidArgument, "partition index out of range");
        if (seen[static_cast<std::size_t>(j)]++)
          throw Error(Errc::InvalidArgument, "partition index sets overlap");
        order.push_back(j);
      }
    }
    if (static_cast<Index>(order.size()) != x.cols())
      throw Error(Errc::InvalidArgument, "partition does not cover every column");
    Mat xc(x.rows(), x.cols());
    for (std::size_t k = 0; k < order.size(); ++k) xc.col(static_cast<Index>(k)) = x.col(order[k]);
    return Dataset(y, std::move(xc),
                   Partition{static_cast<Index>(a.size()), static_cast<Index>(z.size()),
                             static_cast<Index>(w.size())});
  }

  void validate() const {
    detail::require(y.size() >= 1, Errc::InvalidArgument, "dataset needs n >= 1");
    detail::require_dim(x.rows(), y.size(), "design rows");
    detail::require_dim(x.cols(), part.p_x(), "design columns vs partition");
    detail::require(x.allFinite() && y.allFinite(), Errc::NonFiniteInput,
                    "dataset has non-finite entries");
  }

  Index n() const { return y.size(); }
  auto a() const { return x.leftCols(part.p_a); }
  auto z() const { return x.middleCols(part.p_a, part.p_z); }
  auto w() const { return x.rightCols(part.p_w); }
  auto xr() const { return x.leftCols(part.p_r()); }

  Dataset subset(const IndexList& rows) const {
    Dataset d;
    d.y = detail::take(y, rows);
    d.x = detail::take_rows(x, rows);
    d.part = part;
    return d;
  }
};

struct GlmFit {
  Vec theta;
  Mat cov_model;     ///< inverse observed information (linear: scaled by sigma^2)
  Mat cov_sandwich;  ///< H^-1 M H^-1, the robust covariance of theta
  bool converged = false;
  int iterations = 0;
  double log_likelihood = 0.0;
  std::vector<double> log_likelihood_trace;  ///< after each accepted IRLS step
};

struct GlmOptions {
  int max_iter = 100;
  double coef_tol = 1e-8;   ///< relative coefficient change
  double score_tol = 1e-6;  ///< max-norm of the mean score
  int max_halvings = 30;
};

namespace detail {

inline void check_full_rank(const Mat& gram) {
  if (gram.cols() == 0) return;
  Eigen::ColPivHouseholderQR<Mat> qr(gram);
  qr.setThreshold(1e-10);
  if (qr.rank() < gram.cols())
    throw Error(Errc::SingularDesign, "design is rank deficient (rank " +
                                          std::to_string(qr.rank()) + " < " +
                                          std::to_string(gram.cols()) + ")");
}

}  // namespace detail

/// Bread and meat of the score sandwich at an arbitrary coefficient vector:
/// H = sum mu'(eta) x x^T, M = sum (mu(eta) - y)^2 x x^T.
struct ScoreSandwich {
  Mat bread;
  Mat meat;
  Mat covariance() const {
    Eigen::LDLT<Mat> ldlt(bread);
    Mat hinv = ldlt.solve(Mat::Identity(bread.rows(), bread.cols()));
    return detail::symmetrize(hinv * meat * hinv);
  }
};

template <typename Design>
ScoreSandwich score_sandwich(const Design& x, const Vec& y, const GlmFamily& family,
                             const Vec& theta) {
  const Vec eta = x * theta;
  Vec w = family.mu_prime(eta);
  Vec r = family.mu(eta) - y;
  ScoreSandwich s;
  s.bread = x.transpose() * w.asDiagonal() * x;
  s.meat = x.transpose() * r.cwiseAbs2().asDiagonal() * x;
  return s;
}

/// Unpenalized maximum likelihood. Linear: one least-squares solve. Logistic:
/// IRLS with step halving whenever the log-likelihood would decrease.
template <typename Design>
GlmFit fit_glm(const Design& x_in, const Vec& y, const GlmFamily& family,
               const GlmOptions& opt = {}) {
  const Mat x = x_in;
  const Index n = x.rows(), p = x.cols();
  detail::require_dim(y.size(), n, "outcome length");
  detail::require(x.allFinite(), Errc::NonFiniteInput, "design has non-finite entries");
  family.validate_outcome(y);

  GlmFit fit;
  fit.theta = Vec::Zero(p);
  if (p == 0) {
    fit.cov_model = fit.cov_sandwich = Mat(0, 0);
    fit.converged = true;
    fit.log_likelihood = family.log_likelihood(y, Vec::Zero(n));
    return fit;
  }
  const Mat gram = x.transpose() * x;
  detail::check_full_rank(gram);

  if (family.kind == FamilyKind::Linear) {
    Eigen::LDLT<Mat> ldlt(gram);
    fit.theta = ldlt.solve(x.transpose() * y);
    // one refinement step for accuracy on ill-conditioned problems
    fit.theta += ldlt.solve(x.transpose() * (y - x * fit.theta));
    fit.iterations = 1;
    fit.converged = true;
  } else {
    Vec eta = Vec::Zero(n);
    double ll = family.log_likelihood(y, eta);
    for (int it = 1; it <= opt.max_iter; ++it) {
      fit.iterations = it;
      const Vec w = family.mu_prime(eta);
      const Vec score = x.transpose() * (y - family.mu(eta));
      const Mat h = x.transpose() * w.asDiagonal() * x;
      Eigen::LDLT<Mat> ldlt(h);
      Vec step = ldlt.solve(score);
      if (!step.allFinite()) break;

      double t = 1.0;
      Vec cand = fit.theta + step;
      Vec cand_eta = x * cand;
      double cand_ll = family.log_likelihood(y, cand_eta);
      for (int k = 0; k < opt.max_halvings && !(cand_ll >= ll - 1e-12 * std::abs(ll)); ++k) {
        t *= 0.5;
        cand = fit.theta + t * step;
        cand_eta = x * cand;
        cand_ll = family.log_likelihood(y, cand_eta);
      }
      // measured on the full Newton step: under separation halving can make
      // the accepted step tiny while the optimum still sits at infinity
      const double change = step.cwiseAbs().maxCoeff() /
                            std::max(1.0, fit.theta.cwiseAbs().maxCoeff());
      fit.theta = cand;
      eta = cand_eta;
      ll = cand_ll;
      fit.log_likelihood_trace.push_back(ll);
      const double score_norm =
          (x.transpose() * (family.mu(eta) - y)).cwiseAbs().maxCoeff() / static_cast<double>(n);
      if (change < opt.coef_tol && score_norm <= opt.score_tol) {
        fit.converged = true;
        break;
      }
      if (!fit.theta.allFinite()) break;
    }
    if (!fit.converged)
      throw Error(Errc::NonConvergence, "IRLS did not converge in " +
                                            std::to_string(opt.max_iter) +
                                            " iterations (possible separation)");
  }

  const Vec eta = x * fit.theta;
  fit.log_likelihood = family.log_likelihood(y, eta);
  const ScoreSandwich sw = score_sandwich(x, y, family, fit.theta);
  Eigen::LDLT<Mat> ldlt(sw.bread);
  Mat hinv = ldlt.solve(Mat::Identity(p, p));
  hinv = detail::symmetrize(hinv);
  if (family.kind == FamilyKind::Linear) {
    const double dof = std::max<double>(1.0, static_cast<double>(n - p));
    fit.cov_model = hinv * ((y - eta).squaredNorm() / dof);
  } else {
    fit.cov_model = hinv;
  }
  fit.cov_sandwich = detail::symmetrize(hinv * sw.meat * hinv);
  return fit;
}

/// Reduced model [A | Z] fitted on the main study.
struct ReducedFit {
  GlmFit fit;
  Index p_a = 0;

  Vec theta_a() const { return fit.theta.head(p_a); }
  Vec theta_z() const { return fit.theta.tail(fit.theta.size() - p_a); }
  Mat cov_a() const { return fit.cov_sandwich.topLeftCorner(p_a, p_a); }
  Mat cov_z() const {
    const Index pz = fit.theta.size() - p_a;
    return fit.cov_sandwich.bottomRightCorner(pz, pz);
  }
};

inline ReducedFit fit_reduced_main(const Dataset& data, const GlmFamily& family,
                                   const GlmOptions& opt = {}) {
  ReducedFit r;
  r.p_a = data.part.p_a;
  r.fit = fit_glm(data.xr(), data.y, family, opt);
  return r;
}

}  // namespace htlgmm
