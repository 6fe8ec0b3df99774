#pragma once

#include "htlgmm/cv.hpp"
#include "htlgmm/inference.hpp"

namespace htlgmm {

struct FitConfig {
  GlmFamily family;
  PenaltySpec penalty;  ///< Lasso or AdaptiveLasso; block A is always unpenalized
  PilotKind pilot = PilotKind::Ridge;
  WeightSpec weight;
  /// alpha candidates as multiples of the kernel scale; empty uses weight.alpha
  std::vector<double> alpha_multipliers = default_alpha_multipliers();
  int cv_folds = 10;
  int n_lambda = 100;
  double lambda_min_ratio = 0.0;  ///< 0 picks the n-vs-p default
  int init_n_lambda = 100;
  int one_step_iters = 1;
  bool refresh_weight = false;  ///< re-estimate V at each re-expansion
  bool honest_cv = true;        ///< rebuild beta0, theta_A, V and C_n inside every fold
  bool standardize = true;
  bool infer = false;
  double ci_level = 0.95;
  double fdr_level = 0.05;
  std::uint64_t seed = 1;
  unsigned threads = 1;
  VarianceOptions variance;
  CdOptions cd;

  void validate() const {
    auto need = [](bool c, const std::string& m) {
      if (!c) throw Error(Errc::ConfigError, m);
    };
    need(penalty.kind == PenaltyKind::Lasso || penalty.kind == PenaltyKind::AdaptiveLasso,
         "penalty must be lasso or adaptive_lasso");
    need(!infer || penalty.kind == PenaltyKind::AdaptiveLasso,
         "inference requires the adaptive Lasso penalty");
    need(penalty.gamma > 0.0, "gamma must be positive");
    need(cv_folds >= 2, "cv_folds must be >= 2");
    need(n_lambda >= 2 && init_n_lambda >= 2, "lambda grids need at least 2 points");
    need(one_step_iters >= 1, "one_step_iters must be >= 1");
    need(ci_level > 0.0 && ci_level < 1.0, "ci_level must lie in (0,1)");
    need(fdr_level > 0.0 && fdr_level < 1.0, "fdr_level must lie in (0,1)");
    need(weight.alpha >= 0.0, "alpha must be >= 0");
    for (double m : alpha_multipliers) need(m >= 0.0, "alpha multipliers must be >= 0");
  }
};

/// Column centering/scaling applied before fitting. Z and W are scaled to unit
/// (population) SD; the linear family additionally centers y and every column.
struct Standardizer {
  Vec center;
  Vec scale;
  double y_center = 0.0;

  static Standardizer fit(const Dataset& d, const GlmFamily& family, bool enabled) {
    Standardizer s;
    const Index p = d.part.p_x();
    s.center = Vec::Zero(p);
    s.scale = Vec::Ones(p);
    if (!enabled) return s;
    const double n = static_cast<double>(d.n());
    const bool linear = family.kind == FamilyKind::Linear;
    for (Index j = 0; j < p; ++j) {
      const double mean = d.x.col(j).mean();
      if (linear) s.center(j) = mean;
      if (j >= d.part.p_a) {
        const double sd = std::sqrt((d.x.col(j).array() - mean).square().sum() / n);
        if (sd > 0.0) s.scale(j) = sd;
      }
    }
    if (linear) s.y_center = d.y.mean();
    return s;
  }

  Dataset apply(const Dataset& d) const {
    Dataset out = d;
    for (Index j = 0; j < d.x.cols(); ++j)
      out.x.col(j) = (d.x.col(j).array() - center(j)) / scale(j);
    out.y = d.y.array() - y_center;
    return out;
  }

  ExternalSummary apply(const ExternalSummary& e, Index p_a) const {
    const Vec s = scale.segment(p_a, e.theta_z.size());
    ExternalSummary out = e;
    out.theta_z = e.theta_z.cwiseProduct(s);
    out.cov_raw = s.asDiagonal() * e.cov_raw * s.asDiagonal();
    return out;
  }

  Vec unscale(const Vec& beta) const { return beta.cwiseQuotient(scale); }

  Mat unscale(const Mat& sigma, const IndexList& support) const {
    const Vec inv = detail::take(scale, support).cwiseInverse();
    return inv.asDiagonal() * sigma * inv.asDiagonal();
  }

  /// Intercept restoring predictions on the original scale.
  double offset(const Vec& beta_original) const {
    return y_center - center.dot(beta_original);
  }
};

struct TransportabilityResult {
  double statistic = 0.0;
  double p_value = 1.0;
  Index df = 0;
};

/// Wald test of theta_Z(main) = theta_Z(external) using the raw-scale
/// covariances of both estimators. Never blocks fitting.
inline TransportabilityResult transportability_check(const ReducedFit& main_fit,
                                                     const ExternalSummary& external) {
  TransportabilityResult r;
  const Vec d = main_fit.theta_z() - external.theta_z;
  r.df = d.size();
  if (r.df == 0) return r;
  const Mat combined = detail::symmetrize(main_fit.cov_z() + external.cov_raw);
  Eigen::ColPivHouseholderQR<Mat> qr(combined);
  qr.setThreshold(1e-10);
  if (qr.rank() < combined.cols())
    throw Error(Errc::SingularCombinedCovariance, "combined covariance of theta_Z is singular");
  r.statistic = std::max(0.0, d.dot(qr.solve(d)));
  r.p_value = chi_squared_upper(r.statistic, static_cast<double>(r.df));
  return r;
}

inline TransportabilityResult transportability_check(const Dataset& d, const GlmFamily& family,
                                                     const ExternalSummary& external) {
  detail::require_dim(external.theta_z.size(), d.part.p_z, "external theta_Z");
  return transportability_check(fit_reduced_main(d, family), external);
}

/// Initial estimator and plug-ins on one data split.
struct InitState {
  Vec beta0;
  ReducedFit reduced;
  ThetaTilde theta;
  Mat v_theta_a;
  VarianceBlocks blocks;
};

struct FoldState {
  IndexList train;
  IndexList held;
  InitState init;
};

/// Everything that does not depend on the weight kernel or the final penalty:
/// standardized data, the main-study Lasso-CV initial estimator, theta~, V,
/// and (for honest CV) the same quantities on every training split. Shared by
/// the weighting variants and the main-only baseline.
struct Prepared {
  GlmFamily family;
  Standardizer standardizer;
  Dataset data;  ///< standardized
  ExternalSummary external;
  InitState init;
  GlmCvResult init_cv;
  std::vector<FoldState> folds;
  TransportabilityResult transport;
  std::optional<Vec> pilot;  ///< adaptive-Lasso pilot on the standardized scale
  PilotKind pilot_kind = PilotKind::Ridge;
  int variance_builds = 0;
};

namespace detail {

inline IndexList range(Index from, Index to) {
  IndexList r;
  for (Index j = from; j < to; ++j) r.push_back(j);
  return r;
}

inline PenaltySpec init_penalty(const Dataset& d) {
  PenaltySpec p;
  p.kind = PenaltyKind::Lasso;
  p.unpenalized = range(0, d.part.p_a);
  return p;
}

inline GlmPathOptions init_path_options(const FitConfig& cfg) {
  GlmPathOptions o;
  o.n_lambda = cfg.init_n_lambda;
  o.lambda_min_ratio = cfg.lambda_min_ratio;
  return o;
}

inline InitState make_init(const Dataset& d, const ExternalSummary& ext, const GlmFamily& family,
                           Vec beta0, const VarianceOptions& vopt) {
  InitState s;
  s.beta0 = std::move(beta0);
  s.reduced = fit_reduced_main(d, family);
  s.theta = ThetaTilde{s.reduced.theta_a(), ext.theta_z};
  s.v_theta_a = s.reduced.cov_a() * static_cast<double>(d.n());
  s.blocks = estimate_variance(d, family, s.beta0, s.theta, ext, s.v_theta_a, vopt);
  return s;
}

template <typename F>
auto labelled(const char* step, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw e.with_step(step);
  }
}

}  // namespace detail

inline Vec compute_pilot(const Dataset& d, const GlmFamily& family, PilotKind kind,
                         const FitConfig& cfg) {
  if (kind == PilotKind::Glm) return fit_glm(d.x, d.y, family).theta;
  PenaltySpec ridge;
  ridge.kind = PenaltyKind::Ridge;
  ridge.unpenalized = detail::range(0, d.part.p_a);
  GlmCvOptions o;
  o.folds = cfg.cv_folds;
  o.seed = cfg.seed ^ 0x5a5a;
  o.path = detail::init_path_options(cfg);
  o.path.max_dev_ratio = 1.0;
  o.threads = cfg.threads;
  return cv_penalized_glm(d.x, d.y, family, ridge, o).beta;
}

inline Prepared prepare(const Dataset& raw, const ExternalSummary& ext_raw, const FitConfig& cfg) {
  cfg.validate();
  Prepared pr;
  pr.family = cfg.family;
  detail::labelled("validation", [&] {
    raw.validate();
    cfg.family.validate_outcome(raw.y);
    if (ext_raw.theta_z.size() != raw.part.p_z)
      throw Error(Errc::IncompatibleExternal,
                  "external summary has " + std::to_string(ext_raw.theta_z.size()) +
                      " Z coefficients, main study has " + std::to_string(raw.part.p_z));
    ext_raw.validate();
    return 0;
  });
  pr.standardizer = Standardizer::fit(raw, cfg.family, cfg.standardize);
  pr.data = pr.standardizer.apply(raw);
  pr.external = pr.standardizer.apply(ext_raw, raw.part.p_a);
  const Dataset& d = pr.data;
  const bool logistic = cfg.family.kind == FamilyKind::Logistic;

  detail::labelled("initialization", [&] {
    GlmCvOptions o;
    o.folds = cfg.cv_folds;
    o.seed = cfg.seed;
    o.path = detail::init_path_options(cfg);
    o.threads = cfg.threads;
    pr.init_cv = cv_penalized_glm(d.x, d.y, cfg.family, detail::init_penalty(d), o);
    return 0;
  });
  detail::labelled("weighting", [&] {
    pr.init = detail::make_init(d, pr.external, cfg.family, pr.init_cv.beta, cfg.variance);
    pr.variance_builds = 1;
    pr.transport = transportability_check(pr.init.reduced, pr.external);
    return 0;
  });
  if (cfg.penalty.kind == PenaltyKind::AdaptiveLasso) {
    pr.pilot_kind = cfg.pilot;
    pr.pilot = detail::labelled("initialization",
                                [&] { return compute_pilot(d, cfg.family, cfg.pilot, cfg); });
  }

  const auto held = make_folds(d.y, cfg.cv_folds, cfg.seed ^ 0xc0ffee, logistic);
  pr.folds.resize(held.size());
  const std::size_t l0 = pr.init_cv.report.chosen_lambda_index;
  const std::vector<double> init_grid(pr.init_cv.path.lambdas.begin(),
                                      pr.init_cv.path.lambdas.begin() + static_cast<long>(l0) + 1);
  detail::labelled("cross-validation", [&] {
    parallel_for(held.size(), cfg.threads, [&](std::size_t k) {
      FoldState& fs = pr.folds[k];
      fs.held = held[k];
      fs.train = complement(held[k], d.n());
      if (logistic) {
        check_fold_classes(d.y, fs.held);
        check_fold_classes(d.y, fs.train);
      }
      if (!cfg.honest_cv) return;
      const Dataset tr = d.subset(fs.train);
      const GlmPath p = penalized_glm_path(tr.x, tr.y, cfg.family, detail::init_penalty(tr),
                                           init_grid, detail::init_path_options(cfg));
      fs.init = detail::make_init(tr, pr.external, cfg.family, p.betas.back(), cfg.variance);
    });
    return 0;
  });
  if (cfg.honest_cv) pr.variance_builds += static_cast<int>(held.size());
  return pr;
}

struct FitDiagnostics {
  TransportabilityResult transport;
  double weight_condition = 1.0;
  double weight_min_eigenvalue = 0.0;
  bool kkt_ok = true;
  double kkt_violation = 0.0;
  bool cd_converged = true;
  bool init_converged = true;
  double init_lambda = 0.0;
  int expansions = 0;      ///< quadratic expansions behind the final estimate
  int pseudo_builds = 0;   ///< full-data pseudo problems constructed
  int variance_builds = 0;
};

struct FitReport {
  FamilyKind family = FamilyKind::Linear;
  Partition part;
  std::string method;
  Vec beta;       ///< original scale
  Vec beta_init;  ///< original scale
  double intercept_offset = 0.0;
  IndexList support;
  double lambda = 0.0;
  double alpha = 0.0;
  CvReport cv;
  std::optional<InferenceReport> inference;
  FitDiagnostics diagnostics;

  Vec predict(const Mat& x) const { return (x * beta).array() + intercept_offset; }
};

namespace detail {

inline PenaltySpec final_penalty(const Prepared& pr, const FitConfig& cfg) {
  PenaltySpec pen = cfg.penalty;
  pen.unpenalized = range(0, pr.data.part.p_a);
  if (pen.kind == PenaltyKind::AdaptiveLasso) {
    require(pr.pilot.has_value(), Errc::ConfigError, "adaptive Lasso needs a pilot estimate");
    pen.weights = adaptive_weights(*pr.pilot, pen.gamma, pr.pilot_kind);
    for (Index j = 0; j < pr.data.part.p_a; ++j) pen.weights(j) = 0.0;
  }
  return pen;
}

inline std::vector<double> alpha_values(const VarianceBlocks& b, const FitConfig& cfg) {
  const WeightMode m = cfg.weight.mode;
  if (m == WeightMode::Unweighted || m == WeightMode::OrdinaryOptimal) return {0.0};
  if (cfg.alpha_multipliers.empty()) return {cfg.weight.alpha};
  return alpha_grid(b, m, cfg.alpha_multipliers);
}

inline double ratio_for(const FitConfig& cfg, const Dataset& d) {
  return cfg.lambda_min_ratio > 0.0 ? cfg.lambda_min_ratio
                                    : default_lambda_min_ratio(d.n(), d.part.p_x());
}

inline IndexList nonzero(const Vec& b) {
  IndexList s;
  for (Index j = 0; j < b.size(); ++j)
    if (b(j) != 0.0) s.push_back(j);
  return s;
}

inline IndexList with_block_a(const Vec& b, Index p_a) {
  IndexList s = range(0, p_a);
  for (Index j = p_a; j < b.size(); ++j)
    if (b(j) != 0.0) s.push_back(j);
  return s;
}

}  // namespace detail

/// Steps 2-5 of the one-step penalized GMM on a prepared problem.
inline FitReport fit(const Prepared& pr, const FitConfig& cfg) {
  cfg.validate();
  const Dataset& d = pr.data;
  const GlmFamily& fam = cfg.family;
  const PenaltySpec pen = detail::labelled("initialization", [&] { return detail::final_penalty(pr, cfg); });
  const double ratio = detail::ratio_for(cfg, d);

  FitReport rep;
  rep.family = fam.kind;
  rep.part = d.part;
  rep.method = std::string("htlgmm-") + weight_mode_name(cfg.weight.mode);
  rep.diagnostics.transport = pr.transport;
  rep.diagnostics.init_lambda = pr.init_cv.report.chosen_lambda;
  rep.diagnostics.init_converged =
      pr.init_cv.path.converged[pr.init_cv.report.chosen_lambda_index];
  rep.diagnostics.variance_builds = pr.variance_builds;

  const std::vector<double> alphas = detail::alpha_values(pr.init.blocks, cfg);
  const std::size_t na = alphas.size();
  std::vector<WeightMatrix> weights(na);
  std::vector<QuadraticForm> forms(na);
  std::vector<SolvePath> paths(na);
  detail::labelled("weighting", [&] {
    for (std::size_t a = 0; a < na; ++a)
      weights[a] = build_weight(pr.init.blocks, WeightSpec{cfg.weight.mode, alphas[a]});
    return 0;
  });
  detail::labelled("pseudo", [&] {
    const Expansion ex = expand(d, fam, pr.init.beta0, pr.init.theta);
    for (std::size_t a = 0; a < na; ++a) {
      const PseudoProblem ps = build_pseudo(ex, weights[a]);
      forms[a] = QuadraticForm::from_design(ps.x_ps, ps.y_ps);
      ++rep.diagnostics.pseudo_builds;
    }
    return 0;
  });
  detail::labelled("solve", [&] {
    for (std::size_t a = 0; a < na; ++a)
      paths[a] = lambda_path(forms[a], pen, log_grid(lambda_max(forms[a], pen), ratio, cfg.n_lambda),
                             cfg.cd);
    return 0;
  });

  // joint (lambda, alpha) cross-validation
  CvReport& cv = rep.cv;
  cv.criterion = default_criterion(fam);
  cv.alphas = alphas;
  for (const auto& p : paths) cv.lambda_grid.push_back(p.lambdas);
  const std::size_t nk = pr.folds.size();
  const Index nl = static_cast<Index>(cfg.n_lambda);
  cv.fold_metric.assign(na, Mat(static_cast<Index>(nk), nl));
  detail::labelled("cross-validation", [&] {
    parallel_for(nk, cfg.threads, [&](std::size_t k) {
      const FoldState& fs = pr.folds[k];
      const Dataset tr = d.subset(fs.train);
      const Mat xh = detail::take_rows(d.x, fs.held);
      const Vec yh = detail::take(d.y, fs.held);
      const InitState& init = cfg.honest_cv ? fs.init : pr.init;
      const std::vector<double> fold_alphas =
          cfg.honest_cv ? detail::alpha_values(init.blocks, cfg) : alphas;
      const Expansion ex = expand(tr, fam, init.beta0, init.theta);
      for (std::size_t a = 0; a < na; ++a) {
        const WeightMatrix w = cfg.honest_cv
                                   ? build_weight(init.blocks, WeightSpec{cfg.weight.mode, fold_alphas[a]})
                                   : weights[a];
        const PseudoProblem ps = build_pseudo(ex, w);
        const SolvePath p = lambda_path(QuadraticForm::from_design(ps.x_ps, ps.y_ps), pen,
                                        cv.lambda_grid[a], cfg.cd);
        for (Index l = 0; l < nl; ++l)
          cv.fold_metric[a](static_cast<Index>(k), l) =
              score_fold(xh * p.betas[static_cast<std::size_t>(l)], yh, cv.criterion);
      }
    });
    return 0;
  });
  for (std::size_t a = 0; a < na; ++a)
    cv.mean_metric.push_back(cv.fold_metric[a].colwise().mean().transpose());
  cv.select();

  const std::size_t ai = cv.chosen_alpha_index, li = cv.chosen_lambda_index;
  Vec beta = paths[ai].betas[li];
  rep.lambda = cv.chosen_lambda;
  rep.alpha = cv.chosen_alpha;
  rep.diagnostics.cd_converged = paths[ai].converged[li];
  rep.diagnostics.expansions = 1;
  WeightMatrix chosen = weights[ai];
  QuadraticForm form = forms[ai];

  detail::labelled("solve", [&] {
    for (int it = 2; it <= cfg.one_step_iters; ++it) {
      if (cfg.refresh_weight) {
        const VarianceBlocks b =
            estimate_variance(d, fam, beta, pr.init.theta, pr.external, pr.init.v_theta_a, cfg.variance);
        ++rep.diagnostics.variance_builds;
        chosen = build_weight(b, WeightSpec{cfg.weight.mode, rep.alpha});
      }
      const PseudoProblem ps = build_pseudo(d, fam, beta, pr.init.theta, chosen);
      ++rep.diagnostics.pseudo_builds;
      ++rep.diagnostics.expansions;
      form = QuadraticForm::from_design(ps.x_ps, ps.y_ps);
      const CdResult r = coordinate_descent(form, pen, rep.lambda, beta, cfg.cd);
      beta = r.beta;
      rep.diagnostics.cd_converged = r.converged;
    }
    return 0;
  });
  const KktReport kkt = check_kkt(form, pen, rep.lambda, beta);
  rep.diagnostics.kkt_ok = kkt.ok;
  rep.diagnostics.kkt_violation = kkt.max_violation;
  rep.diagnostics.weight_condition = chosen.condition_number;
  rep.diagnostics.weight_min_eigenvalue = chosen.min_eigenvalue;

  const Standardizer& st = pr.standardizer;
  rep.beta = st.unscale(beta);
  rep.beta_init = st.unscale(pr.init.beta0);
  rep.intercept_offset = fam.kind == FamilyKind::Linear ? st.offset(rep.beta) : 0.0;
  rep.support = detail::nonzero(rep.beta);

  if (cfg.infer) {
    rep.inference = detail::labelled("inference", [&] {
      const IndexList s = detail::with_block_a(beta, d.part.p_a);
      const VarianceBlocks b =
          estimate_variance(d, fam, beta, pr.init.theta, pr.external, pr.init.v_theta_a, cfg.variance);
      ++rep.diagnostics.variance_builds;
      const Mat sigma = sandwich_sigma(d, fam, beta, s, pr.init.theta, chosen, b);
      IndexList tested;
      for (std::size_t k = 0; k < s.size(); ++k)
        if (s[k] >= d.part.p_a) tested.push_back(static_cast<Index>(k));
      return wald_inference(rep.beta, s, st.unscale(sigma, s), static_cast<double>(d.n()),
                            cfg.ci_level, cfg.fdr_level, tested);
    });
  }
  return rep;
}

inline FitReport fit(const Dataset& raw, const ExternalSummary& external, const FitConfig& cfg) {
  return fit(prepare(raw, external, cfg), cfg);
}

/// Main-study-only penalized GLM on the same standardized data, folds and
/// pilot as the prepared problem. Lasso reuses the initial estimator.
inline FitReport fit_main_only(const Prepared& pr, const FitConfig& cfg) {
  cfg.validate();
  const Dataset& d = pr.data;
  const GlmFamily& fam = cfg.family;
  FitReport rep;
  rep.family = fam.kind;
  rep.part = d.part;
  rep.method = std::string("main-") + penalty_name(cfg.penalty.kind);
  rep.diagnostics.transport = pr.transport;

  Vec beta;
  if (cfg.penalty.kind == PenaltyKind::Lasso) {
    rep.cv = pr.init_cv.report;
    beta = pr.init_cv.beta;
    rep.diagnostics.cd_converged = pr.init_cv.path.converged[rep.cv.chosen_lambda_index];
  } else {
    const PenaltySpec pen = detail::final_penalty(pr, cfg);
    GlmCvOptions o;
    o.folds = cfg.cv_folds;
    o.seed = cfg.seed;
    o.path = detail::init_path_options(cfg);
    o.path.n_lambda = cfg.n_lambda;
    o.threads = cfg.threads;
    const GlmCvResult r =
        detail::labelled("solve", [&] { return cv_penalized_glm(d.x, d.y, fam, pen, o); });
    rep.cv = r.report;
    beta = r.beta;
    rep.diagnostics.cd_converged = r.path.converged[rep.cv.chosen_lambda_index];
  }
  rep.lambda = rep.cv.chosen_lambda;
  const Standardizer& st = pr.standardizer;
  rep.beta = st.unscale(beta);
  rep.beta_init = st.unscale(pr.init.beta0);
  rep.intercept_offset = fam.kind == FamilyKind::Linear ? st.offset(rep.beta) : 0.0;
  rep.support = detail::nonzero(rep.beta);

  if (cfg.infer) {
    rep.inference = detail::labelled("inference", [&] {
      const IndexList s = detail::with_block_a(beta, d.part.p_a);
      const Mat sigma = glm_sandwich_sigma(d.x, d.y, fam, beta, s);
      IndexList tested;
      for (std::size_t k = 0; k < s.size(); ++k)
        if (s[k] >= d.part.p_a) tested.push_back(static_cast<Index>(k));
      return wald_inference(rep.beta, s, st.unscale(sigma, s), static_cast<double>(d.n()),
                            cfg.ci_level, cfg.fdr_level, tested);
    });
  }
  return rep;
}

}  // namespace htlgmm
