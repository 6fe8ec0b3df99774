#include "test_support.hpp"

using namespace htlgmm;
using namespace htlgmm::testing;

namespace {

Mat random_pd(Index m, std::uint64_t seed) {
  const Mat g = random_design(m + 3, m, seed);
  return g.transpose() * g / static_cast<double>(m) + 0.05 * Mat::Identity(m, m);
}

struct Fixture {
  Dataset d;
  GlmFamily fam;
  ThetaTilde theta;
  ExternalSummary ext;
  Mat v_theta_a;
  Vec beta0;
};

Fixture make_fixture(Partition part, FamilyKind kind, std::uint64_t seed, Index n = 400) {
  Fixture f{random_dataset(n, part, kind, seed), GlmFamily{kind}, {}, {}, {}, {}};
  const Dataset ext_data = random_dataset(4 * n, part, kind, seed + 1);
  f.ext = external_from(ext_data, f.fam, static_cast<double>(4 * n));
  const ReducedFit r = fit_reduced_main(f.d, f.fam);
  f.theta = ThetaTilde{r.theta_a(), f.ext.theta_z};
  f.v_theta_a = r.cov_a() * static_cast<double>(n);
  f.beta0 = n > part.p_x() ? fit_glm(f.d.x, f.d.y, f.fam).theta : Vec(Vec::Zero(part.p_x()));
  return f;
}

VarianceBlocks blocks_of(const Fixture& f, const VarianceOptions& opt = {}) {
  return estimate_variance(f.d, f.fam, f.beta0, f.theta, f.ext, f.v_theta_a, opt);
}

Mat ar_cov(Index p, double rho) {
  Mat s(p, p);
  for (Index i = 0; i < p; ++i)
    for (Index j = 0; j < p; ++j) s(i, j) = std::pow(rho, std::abs(static_cast<double>(i - j)));
  return s;
}

}  // namespace

TEST(EstimateVariance, AssembledIsSymmetricPsd) {
  const Fixture f = make_fixture(Partition{1, 2, 3}, FamilyKind::Logistic, 1);
  const VarianceBlocks b = blocks_of(f);
  EXPECT_EQ(b.assembled.rows(), 8);
  EXPECT_LE((b.assembled - b.assembled.transpose()).cwiseAbs().maxCoeff(), 1e-10);
  Eigen::SelfAdjointEigenSolver<Mat> es(b.assembled);
  EXPECT_GE(es.eigenvalues().minCoeff(), -1e-10 * es.eigenvalues().maxCoeff());
}

TEST(EstimateVariance, V11IsEmpiricalSecondMoment) {
  const Fixture f = make_fixture(Partition{1, 2, 2}, FamilyKind::Logistic, 2);
  const VarianceBlocks b = blocks_of(f);
  Mat v = Mat::Zero(5, 5);
  for (Index i = 0; i < f.d.n(); ++i) {
    const Vec xi = f.d.x.row(i).transpose();
    const double r = GlmFamily::expit(xi.dot(f.beta0)) - f.d.y(i);
    v += r * r * xi * xi.transpose();
  }
  v /= static_cast<double>(f.d.n());
  EXPECT_LE((b.v11 - v).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(EstimateVariance, EmptyDesignBlockDropsCorrection) {
  const Fixture f = make_fixture(Partition{0, 2, 3}, FamilyKind::Linear, 3);
  const VarianceBlocks b = blocks_of(f);
  EXPECT_EQ(b.gamma_xr_a.cols(), 0);
  EXPECT_LE((b.v12 - b.v_xz).cwiseAbs().maxCoeff(), 0.0);
}

TEST(EstimateVariance, InfiniteExternalSizeDropsExternalTerm) {
  const Fixture f = make_fixture(Partition{1, 2, 2}, FamilyKind::Logistic, 4);
  VarianceOptions opt;
  opt.inverse_ratio_override = 0.0;
  const VarianceBlocks b = blocks_of(f, opt);
  Fixture g = f;
  g.ext.cov_raw.setZero();
  const VarianceBlocks c = blocks_of(g);
  EXPECT_EQ(b.v22, c.v22);
  const VarianceBlocks full = blocks_of(f);
  EXPECT_GT((full.v22 - b.v22).trace(), 0.0);
}

TEST(EstimateVariance, RowOrderInvariance) {
  const Fixture f = make_fixture(Partition{1, 2, 3}, FamilyKind::Logistic, 5);
  IndexList perm(static_cast<std::size_t>(f.d.n()));
  std::iota(perm.begin(), perm.end(), Index{0});
  std::mt19937_64 rng(9);
  std::shuffle(perm.begin(), perm.end(), rng);
  Fixture g = f;
  g.d = f.d.subset(perm);
  const Mat a = blocks_of(f).assembled, b = blocks_of(g).assembled;
  EXPECT_LE((a - b).cwiseAbs().maxCoeff(), 1e-12 * a.cwiseAbs().maxCoeff());
}

TEST(EstimateVariance, SingularGammaIsReported) {
  Fixture f = make_fixture(Partition{1, 2, 2}, FamilyKind::Linear, 6);
  f.d.x.col(2) = f.d.x.col(1);
  try {
    blocks_of(f);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::SingularGamma);
  }
}

TEST(EstimateVariance, MatchesReplicateCovariance) {
  // Linear truth with Z and W correlated, so the reduced model is misspecified.
  const Partition part{1, 2, 2};
  const Index n = 2000, n_ext = 20000, m = 7;
  const int reps = 2000;
  const Mat sigma = ar_cov(5, 0.5);
  const Mat chol = Eigen::LLT<Mat>(sigma).matrixL();
  const Vec beta{{0.5, 0.4, -0.3, 0.3, 0.2}};
  const GlmFamily fam = linear_family();

  Mat scores(reps, m);
  Mat v_mean = Mat::Zero(m, m);
  for (int r = 0; r < reps; ++r) {
    auto rng = make_rng(4242, 1, static_cast<std::uint64_t>(r));
    const Mat x = standard_normal(n, 5, rng) * chol.transpose();
    const Mat xe = standard_normal(n_ext, 5, rng) * chol.transpose();
    std::normal_distribution<double> nd;
    Vec y = x * beta, ye = xe * beta;
    for (Index i = 0; i < n; ++i) y(i) += nd(rng);
    for (Index i = 0; i < n_ext; ++i) ye(i) += nd(rng);
    const Dataset d(y, x, part);
    const ReducedFit ef = fit_reduced_main(Dataset(ye, xe, part), fam);
    const ExternalSummary ext{ef.theta_z(), ef.cov_z(), static_cast<double>(n_ext)};
    const ReducedFit rf = fit_reduced_main(d, fam);
    const ThetaTilde tt{rf.theta_a(), ext.theta_z};
    scores.row(r) = std::sqrt(static_cast<double>(n)) * eval_u(d, fam, beta, tt).transpose();
    v_mean += estimate_variance(d, fam, beta, tt, ext, rf.cov_a() * static_cast<double>(n))
                  .assembled;
  }
  v_mean /= reps;
  const Mat centered = scores.rowwise() - scores.colwise().mean();
  for (Index j = 0; j < m; ++j)
    for (Index k = 0; k <= j; ++k) {
      const Vec prod = centered.col(j).cwiseProduct(centered.col(k));
      const double emp = prod.mean();
      const double mc_se =
          std::sqrt((prod.array() - emp).square().sum() / (reps - 1.0) / reps);
      EXPECT_LE(std::abs(emp - v_mean(j, k)), 3.0 * mc_se) << "entry " << j << "," << k;
    }
}

TEST(EstimateVariance, FluctuationShrinksAtRootNRate) {
  // quadrupling n halves the sampling SD of every entry
  const Partition part{1, 1, 1};
  const Vec beta{{0.4, -0.3, 0.3}};
  const GlmFamily fam = linear_family();
  auto entries = [&](Index n, std::uint64_t seed) {
    const Mat x = random_design(n, 3, seed);
    const Dataset d(simulate_outcome(x, beta, FamilyKind::Linear, seed + 1), x, part);
    const ExternalSummary ext{Vec{{-0.3}}, Mat::Constant(1, 1, 1.0 / (10.0 * n)), 10.0 * n};
    const VarianceBlocks b =
        estimate_variance(d, fam, beta, ThetaTilde{Vec{{0.4}}, Vec{{-0.3}}}, ext, Mat::Ones(1, 1));
    return Vec(b.assembled.reshaped());
  };
  const int reps = 300;
  Mat small(reps, 16), large(reps, 16);
  for (int r = 0; r < reps; ++r) {
    small.row(r) = entries(500, 10000 + 2 * r).transpose();
    large.row(r) = entries(2000, 50000 + 2 * r).transpose();
  }
  auto sd = [](const Mat& a) {
    const Mat c = a.rowwise() - a.colwise().mean();
    return Vec((c.cwiseAbs2().colwise().sum() / (a.rows() - 1.0)).cwiseSqrt().transpose());
  };
  const Vec s1 = sd(small), s2 = sd(large);
  for (Index k = 0; k < 16; ++k) {
    if (s1(k) < 1e-12) continue;
    EXPECT_NEAR(s2(k) / s1(k), 0.5, 0.15) << "entry " << k;
  }
}

TEST(BuildWeight, UnweightedIsIdentity) {
  const Fixture f = make_fixture(Partition{1, 2, 2}, FamilyKind::Linear, 7);
  const WeightMatrix w = build_weight(blocks_of(f), WeightSpec{WeightMode::Unweighted, 3.0});
  EXPECT_EQ(w.c, Mat::Identity(7, 7));
  EXPECT_EQ(w.c_half, Mat::Identity(7, 7));
}

TEST(BuildWeight, RidgeShrinksPrimaryBlock) {
  const Fixture f = make_fixture(Partition{1, 2, 3}, FamilyKind::Logistic, 8);
  const VarianceBlocks b = blocks_of(f);
  double prev = std::numeric_limits<double>::infinity();
  for (double a : {0.01, 0.1, 1.0, 10.0}) {
    const WeightMatrix w = build_weight(b, WeightSpec{WeightMode::VariationalRidge, a});
    Eigen::SelfAdjointEigenSolver<Mat> es(w.c.topLeftCorner(6, 6));
    const double norm = es.eigenvalues().cwiseAbs().maxCoeff();
    EXPECT_LT(norm, prev) << "alpha " << a;
    prev = norm;
  }
}

TEST(BuildWeight, SquareRootReconstructs) {
  VarianceBlocks b;
  b.assembled = random_pd(6, 9);
  b.v11 = b.assembled.topLeftCorner(4, 4);
  for (WeightMode mode : {WeightMode::OrdinaryOptimal, WeightMode::VariationalRidge,
                          WeightMode::VariationalMS}) {
    const WeightMatrix w = build_weight(b, WeightSpec{mode, 0.5});
    EXPECT_LE((w.c_half * w.c_half - w.c).norm() / w.c.norm(), 1e-10);
    EXPECT_EQ(w.c, w.c.transpose());
    EXPECT_GT(w.min_eigenvalue, 0.0);
  }
}

TEST(BuildWeight, MsAtZeroEqualsOrdinaryOptimal) {
  const Fixture f = make_fixture(Partition{1, 2, 3}, FamilyKind::Logistic, 10);
  const VarianceBlocks b = blocks_of(f);
  const WeightMatrix ms = build_weight(b, WeightSpec{WeightMode::VariationalMS, 0.0});
  const WeightMatrix ow = build_weight(b, WeightSpec{WeightMode::OrdinaryOptimal, 0.0});
  EXPECT_EQ(ms.c, ow.c);
  const Mat inv = b.assembled.inverse();
  EXPECT_LE((ow.c - inv).norm() / inv.norm(), 1e-8);
}

TEST(BuildWeight, RankDeficientVarianceIsFloored) {
  // n smaller than the moment dimension
  const Fixture f = make_fixture(Partition{1, 2, 12}, FamilyKind::Linear, 11, 12);
  const VarianceBlocks b = blocks_of(f);
  const WeightMatrix w = build_weight(b, WeightSpec{WeightMode::OrdinaryOptimal, 0.0});
  EXPECT_TRUE(w.c.allFinite());
  EXPECT_GT(w.min_eigenvalue, 0.0);
  EXPECT_NEAR(w.condition_number, 1e10, 1e-2 * 1e10);
}

TEST(BuildWeight, ZeroVarianceIsNotPositiveDefinite) {
  VarianceBlocks b;
  b.assembled = Mat::Zero(3, 3);
  b.v11 = Mat::Zero(2, 2);
  try {
    build_weight(b, WeightSpec{WeightMode::OrdinaryOptimal, 0.0});
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotPositiveDefinite);
  }
  EXPECT_THROW(build_weight(b, WeightSpec{WeightMode::VariationalMS, -1.0}), Error);
}

TEST(MatrixSqrtPsd, KnownCases) {
  EXPECT_LE((matrix_sqrt_psd(Mat::Identity(3, 3)) - Mat::Identity(3, 3)).norm(), 1e-15);
  const Mat d = Vec{{4.0, 9.0}}.asDiagonal();
  const Mat r = matrix_sqrt_psd(d);
  EXPECT_NEAR(r(0, 0), 2.0, 1e-14);
  EXPECT_NEAR(r(1, 1), 3.0, 1e-14);
  EXPECT_NEAR(r(0, 1), 0.0, 1e-14);
  const Mat m = random_pd(5, 12);
  const Mat s = matrix_sqrt_psd(m);
  EXPECT_LE((s * s - m).norm() / m.norm(), 1e-10);
}

TEST(MatrixSqrtPsd, RejectsAsymmetricInput) {
  Mat m = Mat::Identity(2, 2);
  m(0, 1) = 0.5;
  try {
    matrix_sqrt_psd(m);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), Errc::NotSymmetric);
  }
}

TEST(AlphaGrid, RidgeScalesByMeanVariance) {
  VarianceBlocks b;
  b.v11 = Vec{{2.0, 4.0}}.asDiagonal();
  const auto ridge = alpha_grid(b, WeightMode::VariationalRidge);
  const auto ms = alpha_grid(b, WeightMode::VariationalMS);
  ASSERT_EQ(ridge.size(), 6u);
  EXPECT_DOUBLE_EQ(ridge[3], 3.0);
  EXPECT_DOUBLE_EQ(ms[3], 1.0);
  EXPECT_EQ(alpha_grid(b, WeightMode::OrdinaryOptimal), std::vector<double>{0.0});
}
