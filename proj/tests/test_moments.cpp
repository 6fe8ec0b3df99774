#include "test_support.hpp"

using namespace htlgmm;
using namespace htlgmm::testing;

namespace {

// Row-by-row accumulation, no vectorized Eigen expressions.
Vec naive_u1(const Dataset& d, const GlmFamily& f, const Vec& beta) {
  Vec u = Vec::Zero(d.part.p_x());
  for (Index i = 0; i < d.n(); ++i) {
    double eta = 0;
    for (Index j = 0; j < d.part.p_x(); ++j) eta += d.x(i, j) * beta(j);
    const double r = f.mu(eta) - d.y(i);
    for (Index j = 0; j < d.part.p_x(); ++j) u(j) += r * d.x(i, j);
  }
  return u / static_cast<double>(d.n());
}

Vec naive_u2(const Dataset& d, const GlmFamily& f, const Vec& beta, const Vec& theta) {
  Vec u = Vec::Zero(d.part.p_z);
  for (Index i = 0; i < d.n(); ++i) {
    double eta = 0, eta_r = 0;
    for (Index j = 0; j < d.part.p_x(); ++j) eta += d.x(i, j) * beta(j);
    for (Index j = 0; j < d.part.p_r(); ++j) eta_r += d.x(i, j) * theta(j);
    const double r = f.mu(eta) - f.mu(eta_r);
    for (Index j = 0; j < d.part.p_z; ++j) u(j) += r * d.x(i, d.part.p_a + j);
  }
  return u / static_cast<double>(d.n());
}

Vec naive_u3(const Dataset& d, const GlmFamily& f, const Vec& theta) {
  Vec u = Vec::Zero(d.part.p_r());
  for (Index i = 0; i < d.n(); ++i) {
    double eta_r = 0;
    for (Index j = 0; j < d.part.p_r(); ++j) eta_r += d.x(i, j) * theta(j);
    const double r = f.mu(eta_r) - d.y(i);
    for (Index j = 0; j < d.part.p_r(); ++j) u(j) += r * d.x(i, j);
  }
  return u / static_cast<double>(d.n());
}

Dataset centered(Dataset d) {
  for (Index j = 0; j < d.x.cols(); ++j) d.x.col(j).array() -= d.x.col(j).mean();
  d.y.array() -= d.y.mean();
  return d;
}

ThetaTilde split(const Vec& t, Index pa) { return ThetaTilde{t.head(pa), t.tail(t.size() - pa)}; }

}  // namespace

TEST(EvalU1, LinearAtZeroIsMinusCrossProduct) {
  const Dataset d = centered(random_dataset(80, Partition{0, 2, 3}, FamilyKind::Linear, 1));
  const Vec u = eval_u1(d, linear_family(), Vec::Zero(5));
  EXPECT_LE((u + d.x.transpose() * d.y / 80.0).cwiseAbs().maxCoeff(), 1e-14);
}

TEST(EvalU1, VanishesAtUnpenalizedFit) {
  const Dataset d = random_dataset(300, Partition{1, 2, 2}, FamilyKind::Logistic, 2);
  const GlmFit f = fit_glm(d.x, d.y, logistic_family());
  EXPECT_LE(eval_u1(d, logistic_family(), f.theta).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EvalU1, MatchesRowwiseOracle) {
  const Dataset d = random_dataset(50, Partition{1, 1, 2}, FamilyKind::Logistic, 3);
  const Vec beta{{0.1, -0.4, 0.9, 0.3}};
  EXPECT_LE((eval_u1(d, logistic_family(), beta) - naive_u1(d, logistic_family(), beta))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(EvalU2, ZeroWhenPredictorsCoincide) {
  const Dataset d = random_dataset(60, Partition{1, 2, 3}, FamilyKind::Logistic, 4);
  const Vec theta{{0.3, -0.2, 0.5}};
  Vec beta = Vec::Zero(6);
  beta.head(3) = theta;
  const Vec u = eval_u2(d, logistic_family(), beta, split(theta, 1));
  EXPECT_EQ(u.cwiseAbs().maxCoeff(), 0.0);
}

TEST(EvalU2, LinearMatrixIdentity) {
  const Dataset d = random_dataset(70, Partition{1, 2, 2}, FamilyKind::Linear, 5);
  const Vec beta{{0.2, 0.1, -0.3, 0.4, 0.0}};
  const Vec theta{{0.5, -0.1, 0.2}};
  const Vec expected = (d.z().transpose() * d.x * beta - d.z().transpose() * d.xr() * theta) / 70.0;
  EXPECT_LE((eval_u2(d, linear_family(), beta, split(theta, 1)) - expected).cwiseAbs().maxCoeff(),
            1e-12);
}

TEST(EvalU2, MatchesRowwiseOracle) {
  const Dataset d = random_dataset(50, Partition{1, 2, 1}, FamilyKind::Logistic, 6);
  const Vec beta{{0.1, -0.4, 0.9, 0.3}};
  const Vec theta{{-0.2, 0.4, 0.6}};
  EXPECT_LE((eval_u2(d, logistic_family(), beta, split(theta, 1)) -
             naive_u2(d, logistic_family(), beta, theta))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(EvalU2, CalibrationMomentHasMeanZeroAtTruth) {
  // independent covariates: the reduced-model truth equals beta*_{A,Z}
  const Vec beta{{0.5, -0.3, 0.4, 0.2}};
  const double n = 100000;
  for (std::uint64_t s = 0; s < 100; ++s) {
    const Mat x = random_design(100000, 4, 700 + s);
    const Vec y = simulate_outcome(x, beta, FamilyKind::Linear, 900 + s);
    const Dataset d(y, x, Partition{0, 2, 2});
    const Vec u = eval_u2(d, linear_family(), beta, ThetaTilde{Vec(0), beta.head(2)});
    EXPECT_LE(u.norm(), 5.0 / std::sqrt(n)) << "seed " << s;
  }
}

TEST(EvalU3, VanishesAtReducedFit) {
  const Dataset d = random_dataset(250, Partition{1, 3, 2}, FamilyKind::Logistic, 7);
  const ReducedFit r = fit_reduced_main(d, logistic_family());
  EXPECT_LE(eval_u3(d, logistic_family(), r.fit.theta).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(EvalU3, LinearAtZeroAndOracle) {
  const Dataset d = centered(random_dataset(40, Partition{0, 3, 1}, FamilyKind::Linear, 8));
  EXPECT_LE((eval_u3(d, linear_family(), Vec::Zero(3)) + d.xr().transpose() * d.y / 40.0)
                .cwiseAbs()
                .maxCoeff(),
            1e-14);
  const Dataset dl = random_dataset(50, Partition{1, 2, 1}, FamilyKind::Logistic, 9);
  const Vec theta{{-0.2, 0.4, 0.6}};
  EXPECT_LE((eval_u3(dl, logistic_family(), theta) - naive_u3(dl, logistic_family(), theta))
                .cwiseAbs()
                .maxCoeff(),
            1e-12);
}

TEST(EvalU, RejectsWrongDimensions) {
  const Dataset d = random_dataset(20, Partition{1, 1, 1}, FamilyKind::Linear, 10);
  try {
    eval_u1(d, linear_family(), Vec::Zero(2));
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::DimensionMismatch);
  }
  EXPECT_THROW(eval_u3(d, linear_family(), Vec::Zero(3)), Error);
}

TEST(EvalJacobians, LinearJacobianIsConstant) {
  const Dataset d = random_dataset(60, Partition{1, 2, 3}, FamilyKind::Linear, 11);
  const Vec theta = Vec::Zero(3);
  const MomentEval a = eval_jacobians(d, linear_family(), Vec::Constant(6, 0.3), theta);
  const MomentEval b = eval_jacobians(d, linear_family(), Vec::LinSpaced(6, -1, 1), theta);
  Mat expected(8, 6);
  expected << d.x.transpose() * d.x / 60.0, d.z().transpose() * d.x / 60.0;
  EXPECT_LE((a.jac_beta - expected).cwiseAbs().maxCoeff(), 1e-13);
  EXPECT_LE((a.jac_beta - b.jac_beta).cwiseAbs().maxCoeff(), 1e-13);
}

TEST(EvalJacobians, MatchesCentralDifferences) {
  const Dataset d = random_dataset(120, Partition{1, 2, 3}, FamilyKind::Logistic, 12);
  const GlmFamily f = logistic_family();
  const Vec beta{{-0.3, 0.4, -0.2, 0.1, 0.5, -0.6}};
  const Vec theta{{-0.1, 0.3, 0.2}};
  const ThetaTilde tt = split(theta, 1);
  const MomentEval m = eval_jacobians(d, f, beta, theta);
  const double h = 1e-6;
  for (Index j = 0; j < 6; ++j) {
    Vec bp = beta, bm = beta;
    bp(j) += h;
    bm(j) -= h;
    const Vec fd = (eval_u(d, f, bp, tt) - eval_u(d, f, bm, tt)) / (2 * h);
    const double scale = std::max(1e-3, m.jac_beta.col(j).cwiseAbs().maxCoeff());
    EXPECT_LE((fd - m.jac_beta.col(j)).cwiseAbs().maxCoeff() / scale, 1e-5) << "column " << j;
  }
}

TEST(EvalJacobians, EmptyDesignBlock) {
  const Dataset d = random_dataset(50, Partition{0, 2, 2}, FamilyKind::Logistic, 13);
  const MomentEval m = eval_jacobians(d, logistic_family(), Vec::Zero(4), Vec::Zero(2));
  EXPECT_EQ(m.gamma_xr_xr.rows(), 2);
  const Mat expected = d.z().transpose() * d.z() * 0.25 / 50.0;
  EXPECT_LE((m.gamma_xr_xr - expected).cwiseAbs().maxCoeff(), 1e-14);
  Eigen::ColPivHouseholderQR<Mat> qr(m.gamma_xr_xr);
  EXPECT_EQ(qr.inverse().leftCols(0).cols(), 0);
}

TEST(EvalJacobians, StackingAndSymmetry) {
  const Dataset d = random_dataset(90, Partition{1, 3, 2}, FamilyKind::Logistic, 14);
  const Vec beta = Vec::LinSpaced(6, -0.5, 0.5);
  const Vec theta = Vec::LinSpaced(4, 0.2, -0.2);
  const MomentEval m = eval_jacobians(d, logistic_family(), beta, theta);
  EXPECT_EQ(m.u_stacked.head(6), m.u1);
  EXPECT_EQ(m.u_stacked.tail(3), m.u2);
  EXPECT_LE((m.gamma_xr_xr - m.gamma_xr_xr.transpose()).cwiseAbs().maxCoeff(), 0.0);
  Eigen::SelfAdjointEigenSolver<Mat> es(m.gamma_xr_xr);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-12);
}

TEST(EvalU, LinearMomentsAreAffine) {
  const Dataset d = random_dataset(60, Partition{1, 2, 2}, FamilyKind::Linear, 15);
  const ThetaTilde tt{Vec{{0.1}}, Vec{{0.2, -0.3}}};
  const Vec b1 = Vec::LinSpaced(5, -1, 1), b2 = Vec::LinSpaced(5, 2, -0.5);
  const Vec lhs = eval_u(d, linear_family(), b1, tt) + eval_u(d, linear_family(), b2, tt) -
                  2.0 * eval_u(d, linear_family(), (b1 + b2) / 2.0, tt);
  EXPECT_LE(lhs.cwiseAbs().maxCoeff(), 1e-12);
}
