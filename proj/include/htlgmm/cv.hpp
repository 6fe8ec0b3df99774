#pragma once

#include "htlgmm/metrics.hpp"
#include "htlgmm/penalized_glm.hpp"

namespace htlgmm {

enum class CvCriterion { R2, AUC, MSE };

inline const char* criterion_name(CvCriterion c) {
  switch (c) {
    case CvCriterion::R2: return "r2";
    case CvCriterion::AUC: return "auc";
    case CvCriterion::MSE: return "mse";
  }
  return "?";
}

inline CvCriterion default_criterion(const GlmFamily& family) {
  return family.kind == FamilyKind::Linear ? CvCriterion::R2 : CvCriterion::AUC;
}

inline double score_fold(const Vec& eta, const Vec& y, CvCriterion c) {
  switch (c) {
    case CvCriterion::R2: return r_squared(eta, y);
    case CvCriterion::AUC: return auc(eta, y);
    case CvCriterion::MSE: return mean_squared_error(eta, y);
  }
  return 0.0;
}

/// One lambda grid and one K x |grid| metric table per alpha value. MSE is
/// minimized, the other criteria maximized; ties go to the larger lambda and
/// then to the earlier alpha.
struct CvReport {
  CvCriterion criterion = CvCriterion::R2;
  std::vector<double> alphas{0.0};
  std::vector<std::vector<double>> lambda_grid;
  std::vector<Mat> fold_metric;
  std::vector<Vec> mean_metric;
  std::size_t chosen_alpha_index = 0;
  std::size_t chosen_lambda_index = 0;
  double chosen_lambda = 0.0;
  double chosen_alpha = 0.0;

  void select() {
    const bool minimize = criterion == CvCriterion::MSE;
    double best = minimize ? std::numeric_limits<double>::infinity()
                           : -std::numeric_limits<double>::infinity();
    bool found = false;
    for (std::size_t a = 0; a < mean_metric.size(); ++a) {
      for (Index l = 0; l < mean_metric[a].size(); ++l) {
        const double v = mean_metric[a](l);
        if (std::isnan(v)) continue;
        const bool better = !found || (minimize ? v < best - 1e-12 : v > best + 1e-12);
        if (better) {
          best = v;
          found = true;
          chosen_alpha_index = a;
          chosen_lambda_index = static_cast<std::size_t>(l);
        }
      }
    }
    detail::require(found, Errc::NonConvergence, "cross-validation produced no finite metric");
    chosen_alpha = alphas[chosen_alpha_index];
    chosen_lambda = lambda_grid[chosen_alpha_index][chosen_lambda_index];
  }
};

/// Held-out index sets. Logistic outcomes are stratified by class so every
/// fold sees both labels whenever the class counts allow it.
inline std::vector<IndexList> make_folds(const Vec& y, int k, std::uint64_t seed, bool stratify) {
  const Index n = y.size();
  detail::require(k >= 2, Errc::InvalidArgument, "need at least 2 folds");
  detail::require(n >= k, Errc::FoldTooSmall, "fewer rows than folds");
  auto rng = make_rng(seed, 0x0f01d5);
  std::vector<IndexList> groups;
  if (stratify) {
    groups.resize(2);
    for (Index i = 0; i < n; ++i) groups[y(i) == 1.0 ? 1 : 0].push_back(i);
  } else {
    groups.resize(1);
    for (Index i = 0; i < n; ++i) groups[0].push_back(i);
  }
  std::vector<IndexList> folds(static_cast<std::size_t>(k));
  std::size_t next = 0;
  for (auto& g : groups) {
    std::shuffle(g.begin(), g.end(), rng);
    for (Index i : g) {
      folds[next % folds.size()].push_back(i);
      ++next;
    }
  }
  for (auto& f : folds) std::sort(f.begin(), f.end());
  return folds;
}

inline IndexList complement(const IndexList& held, Index n) {
  std::vector<char> mark(static_cast<std::size_t>(n), 0);
  for (Index i : held) mark[static_cast<std::size_t>(i)] = 1;
  IndexList out;
  out.reserve(static_cast<std::size_t>(n) - held.size());
  for (Index i = 0; i < n; ++i)
    if (!mark[static_cast<std::size_t>(i)]) out.push_back(i);
  return out;
}

inline void check_fold_classes(const Vec& y, const IndexList& rows) {
  bool has0 = false, has1 = false;
  for (Index i : rows) (y(i) == 1.0 ? has1 : has0) = true;
  if (!(has0 && has1)) throw Error(Errc::FoldTooSmall, "a fold lacks one of the outcome classes");
}

struct GlmCvResult {
  CvReport report;
  GlmPath path;  ///< full-data path on report.lambda_grid[0]
  Vec beta;      ///< full-data solution at the chosen lambda
};

struct GlmCvOptions {
  int folds = 10;
  std::uint64_t seed = 1;
  std::optional<CvCriterion> criterion;
  GlmPathOptions path;
  unsigned threads = 1;
};

/// K-fold CV of a penalized GLM on a common lambda grid from the full data.
inline GlmCvResult cv_penalized_glm(const Mat& x, const Vec& y, const GlmFamily& family,
                                    const PenaltySpec& pen, const GlmCvOptions& opt = {}) {
  const Index n = x.rows();
  const bool logistic = family.kind == FamilyKind::Logistic;
  GlmCvResult res;
  res.report.criterion = opt.criterion.value_or(default_criterion(family));
  res.path = penalized_glm_path(x, y, family, pen, opt.path);
  res.report.lambda_grid = {res.path.lambdas};

  const auto folds = make_folds(y, opt.folds, opt.seed, logistic);
  const Index nl = static_cast<Index>(res.path.lambdas.size());
  Mat table(opt.folds, nl);
  parallel_for(folds.size(), opt.threads, [&](std::size_t k) {
    const IndexList train = complement(folds[k], n);
    if (logistic) {
      check_fold_classes(y, folds[k]);
      check_fold_classes(y, train);
    }
    const Mat xt = detail::take_rows(x, train);
    const Vec yt = detail::take(y, train);
    const GlmPath fp = penalized_glm_path(xt, yt, family, pen, res.path.lambdas, opt.path);
    const Mat xh = detail::take_rows(x, folds[k]);
    const Vec yh = detail::take(y, folds[k]);
    for (Index l = 0; l < nl; ++l)
      table(static_cast<Index>(k), l) =
          score_fold(xh * fp.betas[static_cast<std::size_t>(l)], yh, res.report.criterion);
  });
  res.report.fold_metric = {table};
  res.report.mean_metric = {table.colwise().mean().transpose()};
  res.report.select();
  res.beta = res.path.betas[res.report.chosen_lambda_index];
  return res;
}

}  // namespace htlgmm
