#pragma once

#include <chrono>
#include <map>
#include <numbers>

#include "htlgmm/driver.hpp"

namespace htlgmm {

struct SimConfig {
  std::string preset = "custom";
  FamilyKind family = FamilyKind::Logistic;
  Index p_z = 10;
  Index p_w = 150;
  std::vector<Index> n_values{500};
  double ext_ratio = 10.0;
  Index block_size = 10;
  double within_rho = 0.5;
  Index cross_pairs = 10;
  double cross_rho = 0.3;
  Index n_nonnull_z = 10;
  Index n_nonnull_w = 15;
  double target_r2 = 0.343;
  double target_auc = 0.754;
  double prevalence = 0.2;
  std::uint64_t seed = 20240601;
  int n_replicates = 100;
  Index test_size = 100000;
  std::vector<std::string> methods{"htlgmm-ms", "htlgmm-ridge", "htlgmm-owgmm", "main",
                                   "external"};
  bool inference_arm = false;
  PenaltyKind penalty = PenaltyKind::Lasso;
  double gamma = 1.0;
  PilotKind pilot = PilotKind::Ridge;
  int cv_folds = 10;
  int n_lambda = 100;
  bool honest_cv = true;
  unsigned threads = 1;

  Index p_cov() const { return p_z + p_w; }

  void validate() const {
    auto need = [](bool c, const std::string& m) {
      if (!c) throw Error(Errc::ConfigError, m);
    };
    need(n_replicates >= 1, "n_replicates must be >= 1");
    need(!n_values.empty(), "n_values must not be empty");
    for (Index n : n_values) need(n >= cv_folds && n >= 2, "every n must be >= cv_folds");
    need(block_size >= 1, "block_size must be >= 1");
    need(p_z % block_size == 0 && p_w % block_size == 0, "p_z and p_w must be multiples of block_size");
    need(n_nonnull_z <= p_z && n_nonnull_w <= p_w, "more non-null effects than variables");
    need(cross_pairs <= std::min(n_nonnull_z, n_nonnull_w), "too many cross pairs");
    need(std::abs(within_rho) < 1.0 && std::abs(cross_rho) < 1.0, "correlations must lie in (-1,1)");
    need(ext_ratio > 0.0, "ext_ratio must be positive");
    need(test_size >= 2, "test_size must be >= 2");
    need(target_r2 > 0.0 && target_r2 < 1.0, "target_r2 must lie in (0,1)");
    need(target_auc > 0.5 && target_auc < 1.0, "target_auc must lie in (0.5,1)");
    need(prevalence > 0.0 && prevalence < 1.0, "prevalence must lie in (0,1)");
    need(!inference_arm || penalty == PenaltyKind::AdaptiveLasso,
         "the inference arm needs the adaptive Lasso penalty");
    need(!methods.empty(), "no methods selected");
    for (const auto& m : methods)
      need(m == "htlgmm-ms" || m == "htlgmm-ridge" || m == "htlgmm-owgmm" || m == "main" ||
               m == "external",
           "unknown method '" + m + "'");
  }
};

/// Named configurations: fig1-{linear,logistic}-pz{10,40}-pw{150,1500} and
/// fig2-logistic-pz40-pw150 (adaptive Lasso with inference).
inline SimConfig sim_preset(const std::string& name) {
  SimConfig c;
  c.preset = name;
  auto fail = [&] { throw Error(Errc::ConfigError, "unknown preset '" + name + "'"); };
  if (name.rfind("fig1-", 0) == 0) {
    const std::string rest = name.substr(5);
    const auto d1 = rest.find('-');
    if (d1 == std::string::npos) fail();
    const std::string fam = rest.substr(0, d1);
    if (fam == "linear") c.family = FamilyKind::Linear;
    else if (fam == "logistic") c.family = FamilyKind::Logistic;
    else fail();
    const std::string dims = rest.substr(d1 + 1);
    if (dims == "pz10-pw150") c.p_z = 10, c.p_w = 150;
    else if (dims == "pz40-pw150") c.p_z = 40, c.p_w = 150;
    else if (dims == "pz10-pw1500") c.p_z = 10, c.p_w = 1500;
    else if (dims == "pz40-pw1500") c.p_z = 40, c.p_w = 1500;
    else fail();
    c.n_values = {300, 500, 1000, 2000};
    return c;
  }
  if (name == "fig2-logistic-pz40-pw150") {
    c.family = FamilyKind::Logistic;
    c.p_z = 40;
    c.p_w = 150;
    c.n_values = {1000, 3000, 9000};
    c.methods = {"htlgmm-ms", "main"};
    c.inference_arm = true;
    c.penalty = PenaltyKind::AdaptiveLasso;
    c.pilot = PilotKind::Glm;
    return c;
  }
  fail();
  return c;
}

struct CovarianceResult {
  Mat sigma;
  Mat factor;            ///< lower Cholesky factor, sigma = L L^T
  double repair = 0.0;   ///< Frobenius norm of the PD projection, 0 if none
  IndexList nonnull_z;   ///< covariate indices (Z block first, then W)
  IndexList nonnull_w;
  std::vector<std::pair<Index, Index>> pairs;
};

namespace detail {

/// `count` picks spread over blocks: an even share each, remainder to blocks
/// 0, 2, 4, ... then 1, 3, ...; one per block when count < number of blocks.
inline IndexList place_in_blocks(Index p, Index block, Index count, std::mt19937_64& rng) {
  const Index nb = p / block;
  std::vector<Index> per(static_cast<std::size_t>(nb), 0);
  if (count <= nb) {
    for (Index b = 0; b < count; ++b) per[static_cast<std::size_t>(b)] = 1;
  } else {
    const Index base = count / nb;
    Index extra = count % nb;
    for (auto& v : per) v = base;
    for (Index start : {Index{0}, Index{1}})
      for (Index b = start; b < nb && extra > 0; b += 2, --extra) ++per[static_cast<std::size_t>(b)];
  }
  IndexList out;
  for (Index b = 0; b < nb; ++b) {
    IndexList slots;
    for (Index k = 0; k < block; ++k) slots.push_back(b * block + k);
    std::shuffle(slots.begin(), slots.end(), rng);
    const Index take = std::min(per[static_cast<std::size_t>(b)], block);
    for (Index k = 0; k < take; ++k) out.push_back(slots[static_cast<std::size_t>(k)]);
  }
  std::sort(out.begin(), out.end());
  return out;
}

}  // namespace detail

/// Block AR(1) covariance over [Z | W] with designated cross pairs.
inline CovarianceResult build_covariance(const SimConfig& cfg) {
  cfg.validate();
  CovarianceResult r;
  const Index pz = cfg.p_z, p = cfg.p_cov();
  auto rng = make_rng(cfg.seed, 1);
  r.nonnull_z = detail::place_in_blocks(pz, cfg.block_size, cfg.n_nonnull_z, rng);
  for (Index j : detail::place_in_blocks(cfg.p_w, cfg.block_size, cfg.n_nonnull_w, rng))
    r.nonnull_w.push_back(pz + j);

  r.sigma = Mat::Zero(p, p);
  for (Index i = 0; i < p; ++i) {
    for (Index j = 0; j < p; ++j) {
      const bool same_part = (i < pz) == (j < pz);
      const Index oi = i < pz ? i : i - pz, oj = j < pz ? j : j - pz;
      if (same_part && oi / cfg.block_size == oj / cfg.block_size)
        r.sigma(i, j) = std::pow(cfg.within_rho, static_cast<double>(std::abs(oi - oj)));
    }
  }
  for (Index k = 0; k < cfg.cross_pairs; ++k) {
    const Index a = r.nonnull_z[static_cast<std::size_t>(k)];
    const Index b = r.nonnull_w[static_cast<std::size_t>(k)];
    const double v = cfg.cross_rho * std::sqrt(r.sigma(a, a) * r.sigma(b, b));
    r.sigma(a, b) = r.sigma(b, a) = v;
    r.pairs.emplace_back(a, b);
  }

  Eigen::SelfAdjointEigenSolver<Mat> es(r.sigma);
  if (es.eigenvalues().minCoeff() <= 1e-8) {
    const Vec clipped = es.eigenvalues().cwiseMax(1e-8);
    const Mat repaired =
        detail::symmetrize(es.eigenvectors() * clipped.asDiagonal() * es.eigenvectors().transpose());
    r.repair = (repaired - r.sigma).norm();
    r.sigma = repaired;
  }
  Eigen::LLT<Mat> llt(r.sigma);
  if (llt.info() != Eigen::Success)
    throw Error(Errc::NotPositiveDefinite, "covariance is not positive definite after repair");
  r.factor = llt.matrixL();
  return r;
}

struct SimTruth {
  CovarianceResult cov;
  Vec beta;               ///< over [Z | W]
  double intercept = 0.0; ///< logistic only
  double sigma_eps = 0.0; ///< linear only
  double magnitude = 0.0; ///< common |beta_j| of the non-null effects
  double population_metric = 0.0;
  double population_prevalence = 0.0;
};

namespace detail {

/// Prevalence and AUC of a logistic model whose linear predictor is
/// N(b0, s^2), by trapezoid quadrature on a fine grid.
struct LogisticMoments {
  double prevalence;
  double auc;
};

inline LogisticMoments logistic_moments(double b0, double s) {
  if (s <= 0.0) return {GlmFamily::expit(b0), 0.5};
  const int m = 8001;
  const double lim = 9.0;
  const double h = 2.0 * lim / (m - 1);
  std::vector<double> f1(m), f0(m);
  double prev = 0.0;
  for (int i = 0; i < m; ++i) {
    const double u = -lim + h * i;
    const double phi = std::exp(-0.5 * u * u) / std::sqrt(2.0 * std::numbers::pi);
    const double pi = GlmFamily::expit(b0 + s * u);
    const double wq = (i == 0 || i == m - 1) ? 0.5 : 1.0;
    f1[static_cast<std::size_t>(i)] = pi * phi;
    f0[static_cast<std::size_t>(i)] = (1.0 - pi) * phi;
    prev += wq * h * pi * phi;
  }
  // AUC = P(eta_case > eta_control) = int f1(u) F0(u) du / (P (1 - P))
  double cum0 = 0.0, num = 0.0;
  for (int i = 0; i < m; ++i) {
    const auto k = static_cast<std::size_t>(i);
    const double c0 = cum0 + (i > 0 ? 0.5 * h * (f0[k - 1] + f0[k]) : 0.0);
    const double wq = (i == 0 || i == m - 1) ? 0.5 : 1.0;
    num += wq * h * f1[k] * c0;
    cum0 = c0;
  }
  return {prev, num / (prev * (1.0 - prev))};
}

inline double intercept_for_prevalence(double s, double target) {
  double lo = -40.0, hi = 40.0;
  for (int it = 0; it < 200; ++it) {
    const double mid = 0.5 * (lo + hi);
    (logistic_moments(mid, s).prevalence < target ? lo : hi) = mid;
    if (hi - lo < 1e-12) break;
  }
  return 0.5 * (lo + hi);
}

}  // namespace detail

/// Common-magnitude, alternating-sign effects scaled to the target R^2
/// (linear, sigma_eps = 1) or AUC at the target prevalence (logistic).
inline SimTruth calibrate_effects(const SimConfig& cfg, const CovarianceResult& cov) {
  SimTruth t;
  t.cov = cov;
  const Index p = cfg.p_cov();
  Vec u = Vec::Zero(p);
  IndexList all = cov.nonnull_z;
  all.insert(all.end(), cov.nonnull_w.begin(), cov.nonnull_w.end());
  for (std::size_t k = 0; k < all.size(); ++k) u(all[k]) = (k % 2 == 0) ? 1.0 : -1.0;
  const double q = u.dot(cov.sigma * u);
  if (!(q > 0.0)) throw Error(Errc::CalibrationFailure, "no non-null effects to calibrate");

  if (cfg.family == FamilyKind::Linear) {
    t.sigma_eps = 1.0;
    const double s2 = cfg.target_r2 / (1.0 - cfg.target_r2);
    t.magnitude = std::sqrt(s2 / q);
    t.beta = t.magnitude * u;
    t.population_metric = s2 / (s2 + 1.0);
    return t;
  }
  auto auc_at = [&](double s) {
    const double b0 = detail::intercept_for_prevalence(s, cfg.prevalence);
    return detail::logistic_moments(b0, s).auc;
  };
  double lo = 0.0, hi = 1.0;
  while (auc_at(hi) < cfg.target_auc) {
    hi *= 2.0;
    if (hi > 64.0) throw Error(Errc::CalibrationFailure, "AUC bracket not found");
  }
  for (int it = 0; it < 100 && hi - lo > 1e-10; ++it) {
    const double mid = 0.5 * (lo + hi);
    (auc_at(mid) < cfg.target_auc ? lo : hi) = mid;
  }
  const double s = 0.5 * (lo + hi);
  t.intercept = detail::intercept_for_prevalence(s, cfg.prevalence);
  t.magnitude = s / std::sqrt(q);
  t.beta = t.magnitude * u;
  const auto m = detail::logistic_moments(t.intercept, s);
  t.population_metric = m.auc;
  t.population_prevalence = m.prevalence;
  return t;
}

struct StudyDraw {
  Mat x;  ///< n x (p_Z + p_W)
  Vec y;
  Vec eta;
};

inline StudyDraw draw_study(const SimConfig& cfg, const SimTruth& t, Index n, std::mt19937_64& rng) {
  StudyDraw s;
  s.x = standard_normal(n, cfg.p_cov(), rng) * t.cov.factor.transpose();
  s.eta = (s.x * t.beta).array() + t.intercept;
  s.y.resize(n);
  if (cfg.family == FamilyKind::Linear) {
    std::normal_distribution<double> nd(0.0, t.sigma_eps);
    for (Index i = 0; i < n; ++i) s.y(i) = s.eta(i) + nd(rng);
  } else {
    std::uniform_real_distribution<double> ud(0.0, 1.0);
    for (Index i = 0; i < n; ++i) s.y(i) = ud(rng) < GlmFamily::expit(s.eta(i)) ? 1.0 : 0.0;
  }
  return s;
}

/// Main-study dataset; logistic designs carry an intercept as block A.
inline Dataset to_dataset(const SimConfig& cfg, const StudyDraw& s) {
  if (cfg.family == FamilyKind::Linear) return Dataset(s.y, s.x, Partition{0, cfg.p_z, cfg.p_w});
  Mat x(s.x.rows(), s.x.cols() + 1);
  x << Vec::Ones(s.x.rows()), s.x;
  return Dataset(s.y, std::move(x), Partition{1, cfg.p_z, cfg.p_w});
}

struct ExternalFit {
  ExternalSummary summary;
  double intercept = 0.0;
};

/// Reduced model on the external study: [1, Z] (logistic) or Z (linear).
inline ExternalFit fit_external(const SimConfig& cfg, const StudyDraw& ext) {
  const GlmFamily fam{cfg.family};
  const Mat z = ext.x.leftCols(cfg.p_z);
  ExternalFit e;
  e.summary.n_ext = static_cast<double>(ext.x.rows());
  if (cfg.family == FamilyKind::Linear) {
    const GlmFit f = fit_glm(z, ext.y, fam);
    e.summary.theta_z = f.theta;
    e.summary.cov_raw = f.cov_sandwich;
  } else {
    Mat xr(z.rows(), z.cols() + 1);
    xr << Vec::Ones(z.rows()), z;
    const GlmFit f = fit_glm(xr, ext.y, fam);
    e.intercept = f.theta(0);
    e.summary.theta_z = f.theta.tail(cfg.p_z);
    e.summary.cov_raw = f.cov_sandwich.bottomRightCorner(cfg.p_z, cfg.p_z);
  }
  return e;
}

/// Shared test set, stored in single precision to bound memory.
struct TestSet {
  Eigen::MatrixXf x;
  Vec y;
  Vec eta_true;
  double true_metric = 0.0;
  double prevalence = 0.0;

  Vec linear_predictor(const Vec& beta_cov, double intercept) const {
    Vec eta(x.rows());
    const Index chunk = 8192;
    for (Index s = 0; s < x.rows(); s += chunk) {
      const Index len = std::min(chunk, x.rows() - s);
      eta.segment(s, len) = x.middleRows(s, len).cast<double>() * beta_cov;
    }
    return eta.array() + intercept;
  }
};

inline TestSet make_test_set(const SimConfig& cfg, const SimTruth& t) {
  auto rng = make_rng(cfg.seed, 2);
  TestSet ts;
  ts.x.resize(cfg.test_size, cfg.p_cov());
  ts.y.resize(cfg.test_size);
  ts.eta_true.resize(cfg.test_size);
  const Index chunk = 8192;
  for (Index s = 0; s < cfg.test_size; s += chunk) {
    const Index len = std::min(chunk, cfg.test_size - s);
    const StudyDraw d = draw_study(cfg, t, len, rng);
    ts.x.middleRows(s, len) = d.x.cast<float>();
    ts.y.segment(s, len) = d.y;
    ts.eta_true.segment(s, len) = d.eta;
  }
  ts.true_metric = eval_metric(ts.eta_true, ts.y, GlmFamily{cfg.family});
  ts.prevalence = ts.y.mean();
  return ts;
}

struct ReplicateRecord {
  std::string method;
  Index n = 0;
  int replicate = 0;
  bool ok = false;
  std::string error;
  double metric = std::numeric_limits<double>::quiet_NaN();
  double lambda = std::numeric_limits<double>::quiet_NaN();
  double alpha = std::numeric_limits<double>::quiet_NaN();
  Index n_selected = 0;
  bool has_inference = false;
  double fdr = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double power_z = std::numeric_limits<double>::quiet_NaN();
  double power_w = std::numeric_limits<double>::quiet_NaN();
};

struct MethodSummary {
  std::string method;
  Index n = 0;
  int n_ok = 0;
  int n_failed = 0;
  double mean = 0.0;
  double sd = 0.0;
  double band_lower = 0.0;
  double band_upper = 0.0;
  bool has_inference = false;
  double fdr = std::numeric_limits<double>::quiet_NaN();
  double coverage = std::numeric_limits<double>::quiet_NaN();
  double power_z = std::numeric_limits<double>::quiet_NaN();
  double power_w = std::numeric_limits<double>::quiet_NaN();
};

struct SimReport {
  SimConfig config;
  double magnitude = 0.0;
  double intercept = 0.0;
  double sigma_eps = 0.0;
  double covariance_repair = 0.0;
  double population_metric = 0.0;
  double true_test_metric = 0.0;
  double test_prevalence = 0.0;
  std::vector<ReplicateRecord> records;
  std::vector<MethodSummary> summaries;
};

struct InferenceMetrics {
  double fdr;
  double coverage;
  double power_z;
  double power_w;
};

/// Rejections are BH discoveries among selected Z/W coordinates; unselected
/// non-null coordinates count as not covered.
inline InferenceMetrics inference_metrics(const InferenceReport& inf, const Vec& beta_star_x,
                                          const Partition& part) {
  InferenceMetrics m{};
  std::map<Index, std::size_t> pos;
  for (std::size_t k = 0; k < inf.support.size(); ++k) pos[inf.support[k]] = k;
  Index rejected = 0, false_rej = 0, covered = 0, nonnull = 0, hit_z = 0, nz = 0, hit_w = 0, nw = 0;
  for (Index j = part.p_a; j < part.p_x(); ++j) {
    const bool is_nonnull = beta_star_x(j) != 0.0;
    const auto it = pos.find(j);
    const bool rej = it != pos.end() && inf.rejected[it->second];
    if (rej) {
      ++rejected;
      if (!is_nonnull) ++false_rej;
    }
    if (!is_nonnull) continue;
    ++nonnull;
    if (it != pos.end()) {
      const auto k = static_cast<Index>(it->second);
      if (inf.ci_lower(k) <= beta_star_x(j) && beta_star_x(j) <= inf.ci_upper(k)) ++covered;
    }
    const bool in_z = j < part.p_r();
    (in_z ? nz : nw) += 1;
    if (rej) (in_z ? hit_z : hit_w) += 1;
  }
  m.fdr = static_cast<double>(false_rej) / static_cast<double>(std::max<Index>(1, rejected));
  m.coverage = nonnull ? static_cast<double>(covered) / static_cast<double>(nonnull) : 0.0;
  m.power_z = nz ? static_cast<double>(hit_z) / static_cast<double>(nz) : 0.0;
  m.power_w = nw ? static_cast<double>(hit_w) / static_cast<double>(nw) : 0.0;
  return m;
}

namespace detail {

inline std::uint64_t mix_seed(std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  std::uint64_t z = a * 0x9E3779B97F4A7C15ull ^ (b + 0x632BE59BD9B4E019ull) * 0xBF58476D1CE4E5B9ull ^
                    (c + 0x94D049BB133111EBull);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
  return z ^ (z >> 31);
}

inline FitConfig method_config(const SimConfig& cfg, std::uint64_t seed) {
  FitConfig f;
  f.family = GlmFamily{cfg.family};
  f.penalty.kind = cfg.penalty;
  f.penalty.gamma = cfg.gamma;
  f.pilot = cfg.pilot;
  f.cv_folds = cfg.cv_folds;
  f.n_lambda = cfg.n_lambda;
  f.init_n_lambda = cfg.n_lambda;
  f.honest_cv = cfg.honest_cv;
  f.infer = cfg.inference_arm;
  f.seed = seed;
  f.threads = 1;
  return f;
}

inline double mean_of(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return v.empty() ? std::numeric_limits<double>::quiet_NaN() : s / static_cast<double>(v.size());
}

}  // namespace detail

/// Runs one replicate for every method at main-study size n.
inline std::vector<ReplicateRecord> run_replicate(const SimConfig& cfg, const SimTruth& truth,
                                                  const TestSet& test, std::size_t n_index,
                                                  int replicate) {
  const Index n = cfg.n_values[n_index];
  auto rng = make_rng(cfg.seed, 100 + n_index, static_cast<std::uint64_t>(replicate));
  const StudyDraw main = draw_study(cfg, truth, n, rng);
  const auto n_ext = static_cast<Index>(std::llround(cfg.ext_ratio * static_cast<double>(n)));
  const StudyDraw ext = draw_study(cfg, truth, n_ext, rng);
  const Dataset data = to_dataset(cfg, main);
  const GlmFamily fam{cfg.family};
  const Index p_a = data.part.p_a;
  Vec beta_star_x = Vec::Zero(data.part.p_x());
  beta_star_x.tail(cfg.p_cov()) = truth.beta;
  if (p_a == 1) beta_star_x(0) = truth.intercept;

  FitConfig base = detail::method_config(
      cfg, detail::mix_seed(cfg.seed, n_index, static_cast<std::uint64_t>(replicate)));

  std::vector<ReplicateRecord> out;
  auto record = [&](const std::string& m) -> ReplicateRecord& {
    out.push_back(ReplicateRecord{});
    out.back().method = m;
    out.back().n = n;
    out.back().replicate = replicate;
    return out.back();
  };
  auto score = [&](ReplicateRecord& r, const FitReport& rep) {
    const Vec b = rep.beta.tail(cfg.p_cov());
    const double b0 = p_a == 1 ? rep.beta(0) : rep.intercept_offset;
    r.metric = eval_metric(test.linear_predictor(b, b0), test.y, fam);
    r.lambda = rep.lambda;
    r.alpha = rep.alpha;
    r.n_selected = static_cast<Index>(rep.support.size()) - p_a;
    r.ok = true;
    if (rep.inference) {
      const InferenceMetrics im = inference_metrics(*rep.inference, beta_star_x, rep.part);
      r.has_inference = true;
      r.fdr = im.fdr;
      r.coverage = im.coverage;
      r.power_z = im.power_z;
      r.power_w = im.power_w;
    }
  };

  std::optional<ExternalFit> ext_fit;
  std::string ext_error;
  try {
    ext_fit = fit_external(cfg, ext);
  } catch (const Error& e) {
    ext_error = std::string("external: ") + e.what();
  }

  std::optional<Prepared> prepared;
  std::string prep_error;
  const bool needs_prepare = std::any_of(cfg.methods.begin(), cfg.methods.end(),
                                         [](const std::string& m) { return m != "external"; });
  if (needs_prepare && ext_fit) {
    try {
      prepared = prepare(data, ext_fit->summary, base);
    } catch (const Error& e) {
      prep_error = (e.step().empty() ? "" : e.step() + ": ") + e.what();
    }
  }

  for (const auto& m : cfg.methods) {
    ReplicateRecord& r = record(m);
    try {
      if (m == "external") {
        if (!ext_fit) throw Error(Errc::NonConvergence, ext_error);
        const Vec zeros = Vec::Zero(cfg.p_w);
        Vec b(cfg.p_cov());
        b << ext_fit->summary.theta_z, zeros;
        const double b0 = cfg.family == FamilyKind::Logistic ? ext_fit->intercept : 0.0;
        r.metric = eval_metric(test.linear_predictor(b, b0), test.y, fam);
        r.n_selected = cfg.p_z;
        r.ok = true;
        continue;
      }
      if (!prepared) throw Error(Errc::NonConvergence, ext_fit ? prep_error : ext_error);
      FitConfig fc = base;
      if (m == "main") {
        score(r, fit_main_only(*prepared, fc));
        continue;
      }
      fc.weight.mode = m == "htlgmm-ms"      ? WeightMode::VariationalMS
                       : m == "htlgmm-ridge" ? WeightMode::VariationalRidge
                                             : WeightMode::OrdinaryOptimal;
      score(r, fit(*prepared, fc));
    } catch (const Error& e) {
      r.ok = false;
      r.error = (e.step().empty() ? "" : e.step() + ": ") + e.what();
    }
  }
  return out;
}

inline std::vector<MethodSummary> summarize(const SimConfig& cfg,
                                            const std::vector<ReplicateRecord>& records) {
  std::vector<MethodSummary> out;
  for (Index n : cfg.n_values) {
    for (const auto& m : cfg.methods) {
      MethodSummary s;
      s.method = m;
      s.n = n;
      std::vector<double> v, fdr, cov, pz, pw;
      for (const auto& r : records) {
        if (r.n != n || r.method != m) continue;
        if (!r.ok) {
          ++s.n_failed;
          continue;
        }
        ++s.n_ok;
        v.push_back(r.metric);
        if (r.has_inference) {
          fdr.push_back(r.fdr);
          cov.push_back(r.coverage);
          pz.push_back(r.power_z);
          pw.push_back(r.power_w);
        }
      }
      s.mean = detail::mean_of(v);
      double ss = 0.0;
      for (double x : v) ss += (x - s.mean) * (x - s.mean);
      s.sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
      const double half = v.empty() ? 0.0 : 1.96 * s.sd / std::sqrt(static_cast<double>(v.size()));
      s.band_lower = s.mean - half;
      s.band_upper = s.mean + half;
      if (!fdr.empty()) {
        s.has_inference = true;
        s.fdr = detail::mean_of(fdr);
        s.coverage = detail::mean_of(cov);
        s.power_z = detail::mean_of(pz);
        s.power_w = detail::mean_of(pw);
      }
      out.push_back(s);
    }
  }
  return out;
}

/// Full study: truth and test set fixed by the study seed, replicates run
/// concurrently with independent streams keyed by (seed, n, replicate).
inline SimReport run_study(const SimConfig& cfg) {
  cfg.validate();
  SimReport rep;
  rep.config = cfg;
  const CovarianceResult cov = build_covariance(cfg);
  const SimTruth truth = calibrate_effects(cfg, cov);
  const TestSet test = make_test_set(cfg, truth);
  rep.magnitude = truth.magnitude;
  rep.intercept = truth.intercept;
  rep.sigma_eps = truth.sigma_eps;
  rep.covariance_repair = cov.repair;
  rep.population_metric = truth.population_metric;
  rep.true_test_metric = test.true_metric;
  rep.test_prevalence = test.prevalence;

  const std::size_t nn = cfg.n_values.size();
  const auto nr = static_cast<std::size_t>(cfg.n_replicates);
  std::vector<std::vector<ReplicateRecord>> slots(nn * nr);
  parallel_for(slots.size(), cfg.threads, [&](std::size_t k) {
    slots[k] = run_replicate(cfg, truth, test, k / nr, static_cast<int>(k % nr));
  });
  for (auto& s : slots)
    for (auto& r : s) rep.records.push_back(std::move(r));
  rep.summaries = summarize(cfg, rep.records);
  return rep;
}

}  // namespace htlgmm
