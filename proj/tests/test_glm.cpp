#include "test_support.hpp"

using namespace htlgmm;
using namespace htlgmm::testing;

namespace {

// Plain Newton-Raphson on the logistic log-likelihood with explicit row sums
// and a closed-form 2x2 inverse.
Vec newton_oracle_2d(const Mat& x, const Vec& y) {
  double b0 = 0.0, b1 = 0.0;
  for (int it = 0; it < 200; ++it) {
    double g0 = 0, g1 = 0, h00 = 0, h01 = 0, h11 = 0;
    for (Index i = 0; i < x.rows(); ++i) {
      const double eta = b0 * x(i, 0) + b1 * x(i, 1);
      const double p = 1.0 / (1.0 + std::exp(-eta));
      g0 += (y(i) - p) * x(i, 0);
      g1 += (y(i) - p) * x(i, 1);
      const double w = p * (1.0 - p);
      h00 += w * x(i, 0) * x(i, 0);
      h01 += w * x(i, 0) * x(i, 1);
      h11 += w * x(i, 1) * x(i, 1);
    }
    const double det = h00 * h11 - h01 * h01;
    const double d0 = (h11 * g0 - h01 * g1) / det;
    const double d1 = (-h01 * g0 + h00 * g1) / det;
    b0 += d0;
    b1 += d1;
    if (std::abs(d0) + std::abs(d1) < 1e-15) break;
  }
  return Vec{{b0, b1}};
}

}  // namespace

TEST(GlmFamily, LinearMeanAndDerivative) {
  const GlmFamily f = linear_family();
  for (double s : {-3.0, 0.0, 2.5}) {
    EXPECT_DOUBLE_EQ(f.mu(s), s);
    EXPECT_DOUBLE_EQ(f.mu_prime(s), 1.0);
  }
}

TEST(GlmFamily, LogisticMeanAndDerivative) {
  const GlmFamily f = logistic_family();
  for (double s : {-30.0, -2.0, 0.0, 1.0, 40.0}) {
    const double p = f.mu(s);
    EXPECT_GT(p, 0.0 - 1e-300);
    EXPECT_LE(p, 1.0);
    EXPECT_NEAR(f.mu_prime(s), p * (1.0 - p), 1e-15);
    EXPECT_LE(f.mu_prime(s), 0.25);
    // mu is the derivative of psi
    const double h = 1e-5;
    EXPECT_NEAR((f.psi(s + h) - f.psi(s - h)) / (2 * h), p, 1e-8);
  }
  EXPECT_DOUBLE_EQ(f.mu_prime(0.0), 0.25);
}

TEST(FitGlm, LinearTwoPointMean) {
  const Mat x = Mat::Ones(2, 1);
  const Vec y{{2.0, 4.0}};
  const GlmFit fit = fit_glm(x, y, linear_family());
  EXPECT_NEAR(fit.theta(0), 3.0, 1e-12);
  EXPECT_TRUE(fit.converged);
}

TEST(FitGlm, LogisticInterceptOnly) {
  Vec y = Vec::Zero(50);
  for (int i = 0; i < 10; ++i) y(i) = 1.0;
  const GlmFit fit = fit_glm(Mat::Ones(50, 1), y, logistic_family());
  EXPECT_NEAR(fit.theta(0), std::log(0.2 / 0.8), 1e-8);
  EXPECT_NEAR(fit.theta(0), -1.3863, 1e-4);
}

TEST(FitGlm, LogisticMatchesNewtonOracle) {
  const Mat x = random_design(200, 2, 11, true);
  const Vec y = simulate_outcome(x, Vec{{-0.3, 0.8}}, FamilyKind::Logistic, 12);
  const GlmFit fit = fit_glm(x, y, logistic_family());
  const Vec oracle = newton_oracle_2d(x, y);
  EXPECT_NEAR(fit.theta(0), oracle(0), 1e-8);
  EXPECT_NEAR(fit.theta(1), oracle(1), 1e-8);
}

TEST(FitGlm, ScoreBoundAndMonotoneLikelihood) {
  const Mat x = random_design(400, 5, 21, true);
  const Vec y = simulate_outcome(x, Vec{{0.2, 1.0, -1.0, 0.5, 0.0}}, FamilyKind::Logistic, 22);
  const GlmFit fit = fit_glm(x, y, logistic_family());
  ASSERT_TRUE(fit.converged);
  const Vec score = x.transpose() * (logistic_family().mu(x * fit.theta) - y);
  EXPECT_LE(score.cwiseAbs().maxCoeff(), 1e-6 * 400);
  for (std::size_t k = 1; k < fit.log_likelihood_trace.size(); ++k)
    EXPECT_GE(fit.log_likelihood_trace[k], fit.log_likelihood_trace[k - 1] - 1e-9);
}

TEST(FitGlm, SandwichMatchesRowwiseRecomputation) {
  const Mat x = random_design(300, 3, 31, true);
  const Vec y = simulate_outcome(x, Vec{{-0.5, 0.7, 0.3}}, FamilyKind::Logistic, 32);
  const GlmFit fit = fit_glm(x, y, logistic_family());
  const double n = 300;
  Mat gamma = Mat::Zero(3, 3), v = Mat::Zero(3, 3);
  for (Index i = 0; i < x.rows(); ++i) {
    const double p = GlmFamily::expit(x.row(i).dot(fit.theta));
    const Vec xi = x.row(i).transpose();
    gamma += p * (1 - p) * xi * xi.transpose() / n;
    v += (p - y(i)) * (p - y(i)) * xi * xi.transpose() / n;
  }
  const Mat gi = gamma.inverse();
  const Mat expected = gi * v * gi.transpose() / n;
  EXPECT_LE((fit.cov_sandwich - expected).norm(), 1e-10 * expected.norm());
  EXPECT_LE((fit.cov_sandwich - fit.cov_sandwich.transpose()).cwiseAbs().maxCoeff(), 1e-12);
  Eigen::SelfAdjointEigenSolver<Mat> es(fit.cov_sandwich);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10);
}

TEST(FitGlm, RejectsRankDeficientDesign) {
  Mat x = random_design(50, 3, 41);
  x.col(2) = 2.0 * x.col(1);
  const Vec y = simulate_outcome(x.leftCols(2), Vec{{1.0, 1.0}}, FamilyKind::Linear, 42);
  try {
    fit_glm(x, y, linear_family());
    FAIL() << "expected SingularDesign";
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingularDesign);
  }
}

TEST(FitGlm, RejectsNonBinaryOutcome) {
  const Mat x = Mat::Ones(3, 1);
  try {
    fit_glm(x, Vec{{0.0, 1.0, 2.0}}, logistic_family());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::InvalidOutcome);
  }
}

TEST(FitGlm, SeparationIsNonConvergence) {
  Mat x(6, 2);
  x << 1, -3, 1, -2, 1, -1, 1, 1, 1, 2, 1, 3;
  const Vec y{{0, 0, 0, 1, 1, 1}};
  try {
    fit_glm(x, y, logistic_family());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonConvergence);
  }
}

TEST(FitReducedMain, EmptyDesignBlock) {
  const Dataset d = random_dataset(100, Partition{0, 2, 3}, FamilyKind::Linear, 51);
  const ReducedFit r = fit_reduced_main(d, linear_family());
  EXPECT_EQ(r.theta_a().size(), 0);
  EXPECT_EQ(r.theta_z().size(), 2);
  EXPECT_EQ(r.cov_a().rows(), 0);
}

TEST(FitReducedMain, LinearEqualsNormalEquations) {
  const Dataset d = random_dataset(150, Partition{1, 3, 2}, FamilyKind::Linear, 52);
  const ReducedFit r = fit_reduced_main(d, linear_family());
  const Mat xr = d.xr();
  const Vec ne = (xr.transpose() * xr).inverse() * (xr.transpose() * d.y);
  EXPECT_LE((r.fit.theta - ne).cwiseAbs().maxCoeff(), 1e-10);
}

TEST(FitReducedMain, SandwichCalibrationOverReplicates) {
  // reduced model is the data-generating model; 200 replicates at n = 1e5
  const Vec truth{{-1.0, 0.5, -0.25}};
  int inside = 0, total = 0;
  for (std::uint64_t r = 0; r < 200; ++r) {
    const Mat x = random_design(100000, 3, 1000 + r, true);
    const Vec y = simulate_outcome(x, truth, FamilyKind::Logistic, 5000 + r);
    const Dataset d(y, x, Partition{1, 2, 0});
    const ReducedFit f = fit_reduced_main(d, logistic_family());
    for (Index j = 0; j < 3; ++j) {
      ++total;
      if (std::abs(f.fit.theta(j) - truth(j)) <= 3.0 * std::sqrt(f.fit.cov_sandwich(j, j))) ++inside;
    }
  }
  EXPECT_GE(static_cast<double>(inside) / total, 0.99);
}

TEST(Dataset, FromColumnsReordersToCanonical) {
  Mat x(2, 3);
  x << 1, 2, 3, 4, 5, 6;
  const Dataset d = Dataset::from_columns(Vec{{0.0, 1.0}}, x, {2}, {0}, {1});
  EXPECT_EQ(d.part, (Partition{1, 1, 1}));
  EXPECT_EQ(d.x(0, 0), 3);
  EXPECT_EQ(d.x(0, 1), 1);
  EXPECT_EQ(d.x(0, 2), 2);
  EXPECT_THROW(Dataset::from_columns(Vec{{0.0, 1.0}}, x, {0}, {0}, {1, 2}), Error);
  EXPECT_THROW(Dataset::from_columns(Vec{{0.0, 1.0}}, x, {0}, {1}, {}), Error);
}

TEST(Dataset, RejectsNonFinite) {
  Mat x = Mat::Ones(2, 1);
  x(1, 0) = std::numeric_limits<double>::quiet_NaN();
  try {
    Dataset d(Vec{{0.0, 1.0}}, x, Partition{0, 1, 0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NonFiniteInput);
  }
}
