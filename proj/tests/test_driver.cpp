#include "test_support.hpp"

using namespace htlgmm;
using namespace htlgmm::testing;

namespace {

FitConfig small_config(FamilyKind kind) {
  FitConfig cfg;
  cfg.family = kind == FamilyKind::Linear ? linear_family() : logistic_family();
  cfg.cv_folds = 5;
  cfg.n_lambda = 30;
  cfg.init_n_lambda = 30;
  return cfg;
}

struct Problem {
  Dataset d;
  ExternalSummary ext;
};

Problem linear_problem(std::uint64_t seed, Index n = 300) {
  const Partition part{0, 3, 5};
  Problem p{random_dataset(n, part, FamilyKind::Linear, seed),
            external_from(random_dataset(5000, part, FamilyKind::Linear, seed + 1000),
                          linear_family(), 5000)};
  return p;
}

void expect_same(const FitReport& a, const FitReport& b) {
  EXPECT_EQ(a.beta, b.beta);
  EXPECT_EQ(a.support, b.support);
  EXPECT_EQ(a.lambda, b.lambda);
  EXPECT_EQ(a.alpha, b.alpha);
  ASSERT_EQ(a.cv.fold_metric.size(), b.cv.fold_metric.size());
  for (std::size_t k = 0; k < a.cv.fold_metric.size(); ++k)
    EXPECT_EQ(a.cv.fold_metric[k], b.cv.fold_metric[k]);
}

template <class F>
Error capture(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e;
  }
  ADD_FAILURE() << "no error raised";
  return Error(Errc::InvalidArgument, "none");
}

}  // namespace

TEST(Ablation, InverseHessianWeightReproducesMainLasso) {
  const Index n = 200, p = 8;
  const Mat x = random_design(n, p, 21);
  Vec beta = Vec::Zero(p);
  beta.head(3) = Vec{{1.0, -0.7, 0.4}};
  const Vec y = simulate_outcome(x, beta, FamilyKind::Linear, 22);
  const Dataset d(y, x, Partition{0, 0, p});
  const GlmFamily fam = linear_family();

  const Mat c = (x.transpose() * x / static_cast<double>(n)).inverse();
  WeightMatrix w;
  w.c = c;
  w.c_half = matrix_sqrt_psd(c);
  const PseudoProblem ps = build_pseudo(expand(d, fam, Vec::Zero(p), ThetaTilde{Vec(0), Vec(0)}), w);
  const QuadraticForm q = QuadraticForm::from_design(ps.x_ps, ps.y_ps);

  const PenaltySpec pen;
  const auto grid = log_grid(lambda_max(q, pen), 0.01, 20);
  const SolvePath pseudo = lambda_path(q, pen, grid, CdOptions{1e-12, 100000});
  GlmPathOptions gopt;
  gopt.max_dev_ratio = 1.0;
  gopt.min_dev_change = 0.0;
  gopt.tol = 1e-12;
  const GlmPath direct = penalized_glm_path(x, y, fam, pen, grid, gopt);
  ASSERT_EQ(direct.betas.size(), grid.size());
  for (std::size_t l = 0; l < grid.size(); ++l)
    EXPECT_LE((pseudo.betas[l] - direct.betas[l]).cwiseAbs().maxCoeff(), 1e-6) << "lambda " << l;
}

TEST(Fit, DeterministicAcrossRunsAndThreads) {
  const Problem pb = linear_problem(30);
  FitConfig cfg = small_config(FamilyKind::Linear);
  const FitReport a = fit(pb.d, pb.ext, cfg);
  const FitReport b = fit(pb.d, pb.ext, cfg);
  expect_same(a, b);
  cfg.threads = 2;
  expect_same(a, fit(pb.d, pb.ext, cfg));
}

TEST(Fit, DiagnosticsAndSupport) {
  const Problem pb = linear_problem(31);
  FitConfig cfg = small_config(FamilyKind::Linear);
  const FitReport r = fit(pb.d, pb.ext, cfg);
  EXPECT_EQ(r.method, "htlgmm-ms");
  EXPECT_EQ(r.diagnostics.expansions, 1);
  EXPECT_EQ(r.diagnostics.pseudo_builds, 6);
  EXPECT_TRUE(r.diagnostics.kkt_ok) << r.diagnostics.kkt_violation;
  EXPECT_TRUE(r.diagnostics.cd_converged);
  IndexList nz;
  for (Index j = 0; j < r.beta.size(); ++j)
    if (r.beta(j) != 0.0) nz.push_back(j);
  EXPECT_EQ(r.support, nz);
  EXPECT_EQ(r.cv.alphas.size(), 6u);
  EXPECT_FALSE(r.inference.has_value());

  cfg.one_step_iters = 2;
  const FitReport two = fit(pb.d, pb.ext, cfg);
  EXPECT_EQ(two.diagnostics.expansions, 2);
  EXPECT_EQ(two.diagnostics.pseudo_builds, 7);
  // the linear moments are exact quadratics, so re-expanding moves nothing
  EXPECT_LE((two.beta - r.beta).cwiseAbs().maxCoeff(), 1e-6);
}

TEST(Fit, LogisticWithInference) {
  const Partition part{1, 3, 6};
  const Dataset d = random_dataset(400, part, FamilyKind::Logistic, 32, 0.6);
  const ExternalSummary ext =
      external_from(random_dataset(5000, part, FamilyKind::Logistic, 33, 0.6), logistic_family(), 5000);
  FitConfig cfg = small_config(FamilyKind::Logistic);
  cfg.penalty.kind = PenaltyKind::AdaptiveLasso;
  cfg.pilot = PilotKind::Glm;
  cfg.infer = true;
  const FitReport r = fit(d, ext, cfg);
  EXPECT_TRUE(r.diagnostics.kkt_ok) << r.diagnostics.kkt_violation;
  ASSERT_TRUE(r.inference.has_value());
  const InferenceReport& inf = *r.inference;
  EXPECT_EQ(inf.se.size(), static_cast<Index>(inf.support.size()));
  for (Index k = 0; k < inf.se.size(); ++k) {
    EXPECT_GT(inf.se(k), 0.0);
    EXPECT_LE(inf.ci_lower(k), inf.ci_upper(k));
  }
  EXPECT_EQ(inf.support.front(), 0);  // intercept always carried
  EXPECT_EQ(r.beta.size(), part.p_x());
  const Vec pred = r.predict(d.x);
  EXPECT_TRUE(pred.allFinite());
}

TEST(Fit, MainOnlySharesPreparation) {
  const Problem pb = linear_problem(34);
  FitConfig cfg = small_config(FamilyKind::Linear);
  const Prepared pr = prepare(pb.d, pb.ext, cfg);
  const FitReport m = fit_main_only(pr, cfg);
  EXPECT_EQ(m.method, "main-lasso");
  EXPECT_EQ(m.lambda, pr.init_cv.report.chosen_lambda);
  const FitReport h = fit(pr, cfg);
  expect_same(h, fit(pb.d, pb.ext, cfg));
}

TEST(Fit, ExternalInformationHelpsZ) {
  // a large, accurate external study should pull the Z block closer to the truth
  const Partition part{0, 3, 5};
  Vec truth(8);
  for (Index j = 0; j < 8; ++j) truth(j) = j % 2 == 0 ? 0.4 : -0.2;
  double err_h = 0.0, err_m = 0.0;
  FitConfig cfg = small_config(FamilyKind::Linear);
  for (std::uint64_t s = 0; s < 10; ++s) {
    const Dataset d = random_dataset(150, part, FamilyKind::Linear, 500 + s);
    const ExternalSummary ext =
        external_from(random_dataset(20000, part, FamilyKind::Linear, 600 + s), linear_family(), 20000);
    const Prepared pr = prepare(d, ext, cfg);
    err_h += (fit(pr, cfg).beta - truth).squaredNorm();
    err_m += (fit_main_only(pr, cfg).beta - truth).squaredNorm();
  }
  EXPECT_LT(err_h, err_m);
}

TEST(Transportability, ExactExternalGivesZero) {
  const Problem pb = linear_problem(40);
  const ReducedFit r = fit_reduced_main(pb.d, linear_family());
  const ExternalSummary ext{r.theta_z(), r.cov_z(), 300.0};
  const TransportabilityResult t = transportability_check(r, ext);
  EXPECT_EQ(t.df, 3);
  EXPECT_NEAR(t.statistic, 0.0, 1e-20);
  EXPECT_DOUBLE_EQ(t.p_value, 1.0);
}

TEST(Transportability, NullCalibrationAndPower) {
  const Partition part{0, 2, 2};
  const GlmFamily fam = linear_family();
  std::vector<double> p_null;
  int rejected = 0;
  const int reps = 500;
  for (int r = 0; r < reps; ++r) {
    const auto s = static_cast<std::uint64_t>(r);
    const Dataset d = random_dataset(2000, part, FamilyKind::Linear, 7000 + s);
    const ExternalSummary ext =
        external_from(random_dataset(4000, part, FamilyKind::Linear, 9000 + s), fam, 4000);
    const ReducedFit main = fit_reduced_main(d, fam);
    p_null.push_back(transportability_check(main, ext).p_value);
    if (r < 200) {
      ExternalSummary shifted = ext;
      shifted.theta_z(0) += 5.0 * std::sqrt(main.cov_z()(0, 0) + ext.cov_raw(0, 0));
      rejected += transportability_check(main, shifted).p_value < 0.05;
    }
  }
  std::sort(p_null.begin(), p_null.end());
  double ks = 0.0;
  for (int i = 0; i < reps; ++i) {
    const double u = p_null[static_cast<std::size_t>(i)];
    ks = std::max({ks, std::abs(u - i / static_cast<double>(reps)),
                   std::abs(u - (i + 1) / static_cast<double>(reps))});
  }
  EXPECT_LT(ks, 0.08);
  EXPECT_GE(rejected, 190);
}

TEST(Transportability, SingularCombinedCovariance) {
  const Problem pb = linear_problem(41);
  ReducedFit r = fit_reduced_main(pb.d, linear_family());
  ExternalSummary ext{r.theta_z(), Mat::Zero(3, 3), 100.0};
  r.fit.cov_sandwich.setZero();
  EXPECT_EQ(capture([&] { transportability_check(r, ext); }).code(),
            Errc::SingularCombinedCovariance);
}

TEST(Errors, IncompatibleExternalIsAValidationError) {
  Problem pb = linear_problem(42);
  pb.ext.theta_z = Vec::Zero(2);
  pb.ext.cov_raw = Mat::Identity(2, 2);
  const Error e = capture([&] { fit(pb.d, pb.ext, small_config(FamilyKind::Linear)); });
  EXPECT_EQ(e.code(), Errc::IncompatibleExternal);
  EXPECT_EQ(e.step(), "validation");
}

TEST(Errors, ConfigRules) {
  const Problem pb = linear_problem(43);
  FitConfig cfg = small_config(FamilyKind::Linear);
  cfg.infer = true;
  EXPECT_EQ(capture([&] { fit(pb.d, pb.ext, cfg); }).code(), Errc::ConfigError);
  cfg.infer = false;
  cfg.penalty.kind = PenaltyKind::Ridge;
  EXPECT_EQ(capture([&] { fit(pb.d, pb.ext, cfg); }).code(), Errc::ConfigError);
  cfg.penalty.kind = PenaltyKind::Lasso;
  cfg.cv_folds = 1;
  EXPECT_EQ(capture([&] { cfg.validate(); }).code(), Errc::ConfigError);
}

TEST(Errors, StepLabels) {
  Problem pb = linear_problem(44);
  pb.d.y(3) = std::numeric_limits<double>::quiet_NaN();
  EXPECT_EQ(capture([&] { fit(pb.d, pb.ext, small_config(FamilyKind::Linear)); }).step(),
            "validation");

  // a fold without one of the classes surfaces from cross-validation
  const Partition part{1, 1, 2};
  Dataset d = random_dataset(60, part, FamilyKind::Logistic, 45);
  d.y.setZero();
  d.y(0) = 1.0;
  d.y(1) = 1.0;
  const ExternalSummary ext{Vec::Zero(1), Mat::Identity(1, 1), 100.0};
  FitConfig cfg = small_config(FamilyKind::Logistic);
  const Error e = capture([&] { fit(d, ext, cfg); });
  EXPECT_FALSE(e.step().empty());
  EXPECT_NE(e.step(), "validation");
}
