#pragma once

#include <charconv>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include <json.hpp>

#include "htlgmm/driver.hpp"
#include "htlgmm/simulation.hpp"

namespace htlgmm {

using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "1.0.0";

// ---------------------------------------------------------------- numbers

/// Shortest decimal that reads back to the same double.
inline std::string format_double(double v) {
  if (std::isnan(v)) return "nan";
  if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
  char buf[64];
  const auto res = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, res.ptr);
}

namespace detail {

inline std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

inline std::vector<std::string> split(std::string_view s, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  for (;;) {
    const auto pos = s.find(sep, start);
    out.push_back(trim(s.substr(start, pos == std::string_view::npos ? pos : pos - start)));
    if (pos == std::string_view::npos) break;
    start = pos + 1;
  }
  return out;
}

inline bool parse_number(const std::string& s, double& out) {
  if (s.empty()) return false;
  const char* b = s.data();
  if (*b == '+') ++b;
  const auto res = std::from_chars(b, s.data() + s.size(), out);
  return res.ec == std::errc() && res.ptr == s.data() + s.size() && std::isfinite(out);
}

inline std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw Error(Errc::ConfigError, "cannot open '" + p.string() + "'");
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw Error(Errc::ConfigError, "cannot write '" + p.string() + "'");
  out << text;
}

}  // namespace detail

// ---------------------------------------------------------------- CSV

/// Numeric table with a header row.
struct Table {
  std::vector<std::string> names;
  Mat values;

  Index column(const std::string& name) const {
    for (std::size_t j = 0; j < names.size(); ++j)
      if (names[j] == name) return static_cast<Index>(j);
    return -1;
  }
};

/// Comma-separated, header required, every cell a finite number. Quoting is
/// not supported; empty cells are missing values and rejected.
inline Table parse_csv(const std::string& text, const std::string& source = "input") {
  auto fail = [&](std::size_t line, std::size_t col, const std::string& what) {
    throw Error(Errc::ParseError, source + ": line " + std::to_string(line) + ", column " +
                                      std::to_string(col) + ": " + what);
  };
  Table t;
  std::vector<std::vector<double>> rows;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (lineno == 1 && line.rfind("\xEF\xBB\xBF", 0) == 0) line.erase(0, 3);
    if (detail::trim(line).empty()) continue;
    auto cells = detail::split(line, ',');
    if (t.names.empty()) {
      for (std::size_t j = 0; j < cells.size(); ++j) {
        if (cells[j].empty()) fail(lineno, j + 1, "empty column name");
        if (std::find(t.names.begin(), t.names.end(), cells[j]) != t.names.end())
          fail(lineno, j + 1, "duplicate column name '" + cells[j] + "'");
        t.names.push_back(cells[j]);
      }
      continue;
    }
    if (cells.size() != t.names.size())
      fail(lineno, std::min(cells.size(), t.names.size()) + 1,
           "expected " + std::to_string(t.names.size()) + " fields, found " +
               std::to_string(cells.size()));
    std::vector<double> row(cells.size());
    for (std::size_t j = 0; j < cells.size(); ++j) {
      if (cells[j].empty()) fail(lineno, j + 1, "missing value");
      if (!detail::parse_number(cells[j], row[j]))
        fail(lineno, j + 1, "'" + cells[j] + "' is not a finite number");
    }
    rows.push_back(std::move(row));
  }
  if (t.names.empty()) fail(1, 1, "missing header row");
  if (rows.empty()) fail(lineno + 1, 1, "no data rows");
  t.values.resize(static_cast<Index>(rows.size()), static_cast<Index>(t.names.size()));
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t j = 0; j < rows[i].size(); ++j)
      t.values(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
  return t;
}

inline Table read_csv(const std::filesystem::path& p) {
  return parse_csv(detail::read_file(p), p.filename().string());
}

// ---------------------------------------------------------------- config

/// Flat `key = value` lines; `#` starts a comment. Keys are dotted, e.g.
/// `fit.cv_folds`. Order is kept so later entries override earlier ones.
using Settings = std::vector<std::pair<std::string, std::string>>;

inline std::pair<std::string, std::string> parse_assignment(const std::string& s,
                                                            const std::string& where) {
  const auto eq = s.find('=');
  if (eq == std::string::npos)
    throw Error(Errc::ParseError, where + ": expected key = value, got '" + s + "'");
  std::string key = detail::trim(std::string_view(s).substr(0, eq));
  std::string value = detail::trim(std::string_view(s).substr(eq + 1));
  if (key.empty()) throw Error(Errc::ParseError, where + ": empty key");
  return {std::move(key), std::move(value)};
}

inline Settings parse_settings(const std::string& text, const std::string& source = "config") {
  Settings out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto hash = line.find('#');
    if (hash != std::string::npos) line.resize(hash);
    if (detail::trim(line).empty()) continue;
    out.push_back(parse_assignment(line, source + ": line " + std::to_string(lineno)));
  }
  return out;
}

namespace detail {

inline Error bad_value(const std::string& key, const std::string& value) {
  return Error(Errc::ConfigError, "invalid value '" + value + "' for " + key);
}

inline double to_double(const std::string& key, const std::string& v) {
  double x = 0.0;
  if (!parse_number(v, x)) throw bad_value(key, v);
  return x;
}

inline long long to_int(const std::string& key, const std::string& v) {
  long long x = 0;
  const auto res = std::from_chars(v.data(), v.data() + v.size(), x);
  if (v.empty() || res.ec != std::errc() || res.ptr != v.data() + v.size()) throw bad_value(key, v);
  return x;
}

inline bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw bad_value(key, v);
}

inline std::vector<std::string> to_list(const std::string& v) {
  std::vector<std::string> out;
  if (trim(v).empty()) return out;
  for (auto& s : split(v, ',')) out.push_back(std::move(s));
  return out;
}

}  // namespace detail

inline FamilyKind parse_family(const std::string& v) {
  if (v == "linear") return FamilyKind::Linear;
  if (v == "logistic") return FamilyKind::Logistic;
  throw detail::bad_value("family", v);
}

inline PenaltyKind parse_penalty(const std::string& v) {
  if (v == "lasso") return PenaltyKind::Lasso;
  if (v == "adaptive_lasso") return PenaltyKind::AdaptiveLasso;
  if (v == "ridge") return PenaltyKind::Ridge;
  if (v == "elastic_net") return PenaltyKind::ElasticNet;
  throw detail::bad_value("penalty", v);
}

inline WeightMode parse_weight_mode(const std::string& v) {
  for (WeightMode m : {WeightMode::Unweighted, WeightMode::OrdinaryOptimal,
                       WeightMode::VariationalRidge, WeightMode::VariationalMS})
    if (v == weight_mode_name(m)) return m;
  throw detail::bad_value("weight", v);
}

inline PilotKind parse_pilot(const std::string& v) {
  if (v == "ridge") return PilotKind::Ridge;
  if (v == "glm") return PilotKind::Glm;
  throw detail::bad_value("pilot", v);
}

inline const char* pilot_name(PilotKind k) { return k == PilotKind::Glm ? "glm" : "ridge"; }

/// Everything `fit` needs beyond the two input files.
struct FitSpec {
  std::string outcome = "y";
  std::vector<std::string> a, z, w;
  std::optional<bool> intercept;  ///< unset: logistic adds one, linear does not
  FitConfig fit;
};

inline void apply_setting(FitSpec& s, const std::string& key, const std::string& v) {
  using namespace detail;
  FitConfig& f = s.fit;
  if (key == "seed") f.seed = static_cast<std::uint64_t>(to_int(key, v));
  else if (key == "threads") f.threads = static_cast<unsigned>(std::max(1LL, to_int(key, v)));
  else if (key == "family") f.family = GlmFamily{parse_family(v)};
  else if (key == "data.outcome") s.outcome = v;
  else if (key == "data.a") s.a = to_list(v);
  else if (key == "data.z") s.z = to_list(v);
  else if (key == "data.w") s.w = to_list(v);
  else if (key == "data.intercept") s.intercept = to_bool(key, v);
  else if (key == "fit.penalty") f.penalty.kind = parse_penalty(v);
  else if (key == "fit.gamma") f.penalty.gamma = to_double(key, v);
  else if (key == "fit.pilot") f.pilot = parse_pilot(v);
  else if (key == "fit.weight") f.weight.mode = parse_weight_mode(v);
  else if (key == "fit.alpha") f.weight.alpha = to_double(key, v);
  else if (key == "fit.alpha_multipliers") {
    f.alpha_multipliers.clear();
    for (const auto& x : to_list(v)) f.alpha_multipliers.push_back(to_double(key, x));
  }
  else if (key == "fit.cv_folds") f.cv_folds = static_cast<int>(to_int(key, v));
  else if (key == "fit.n_lambda") f.n_lambda = static_cast<int>(to_int(key, v));
  else if (key == "fit.lambda_min_ratio") f.lambda_min_ratio = to_double(key, v);
  else if (key == "fit.init_n_lambda") f.init_n_lambda = static_cast<int>(to_int(key, v));
  else if (key == "fit.one_step_iters") f.one_step_iters = static_cast<int>(to_int(key, v));
  else if (key == "fit.refresh_weight") f.refresh_weight = to_bool(key, v);
  else if (key == "fit.honest_cv") f.honest_cv = to_bool(key, v);
  else if (key == "fit.standardize") f.standardize = to_bool(key, v);
  else if (key == "fit.infer") f.infer = to_bool(key, v);
  else if (key == "fit.ci_level") f.ci_level = to_double(key, v);
  else if (key == "fit.fdr_level") f.fdr_level = to_double(key, v);
  else throw Error(Errc::ConfigError, "unknown fit setting '" + key + "'");
}

inline FitSpec make_fit_spec(const Settings& settings) {
  FitSpec s;
  for (const auto& [k, v] : settings) apply_setting(s, k, v);
  s.fit.validate();
  return s;
}

/// `sim.preset` is applied first wherever it appears; other keys override it
/// in order.
inline void apply_setting(SimConfig& c, const std::string& key, const std::string& v) {
  using namespace detail;
  auto idx = [&] { return static_cast<Index>(to_int(key, v)); };
  if (key == "seed") c.seed = static_cast<std::uint64_t>(to_int(key, v));
  else if (key == "threads") c.threads = static_cast<unsigned>(std::max(1LL, to_int(key, v)));
  else if (key == "sim.preset") c = sim_preset(v);
  else if (key == "family" || key == "sim.family") c.family = parse_family(v);
  else if (key == "sim.p_z") c.p_z = idx();
  else if (key == "sim.p_w") c.p_w = idx();
  else if (key == "sim.n_values") {
    c.n_values.clear();
    for (const auto& x : to_list(v)) c.n_values.push_back(static_cast<Index>(to_int(key, x)));
  }
  else if (key == "sim.ext_ratio") c.ext_ratio = to_double(key, v);
  else if (key == "sim.block_size") c.block_size = idx();
  else if (key == "sim.within_rho") c.within_rho = to_double(key, v);
  else if (key == "sim.cross_pairs") c.cross_pairs = idx();
  else if (key == "sim.cross_rho") c.cross_rho = to_double(key, v);
  else if (key == "sim.n_nonnull_z") c.n_nonnull_z = idx();
  else if (key == "sim.n_nonnull_w") c.n_nonnull_w = idx();
  else if (key == "sim.target_r2") c.target_r2 = to_double(key, v);
  else if (key == "sim.target_auc") c.target_auc = to_double(key, v);
  else if (key == "sim.prevalence") c.prevalence = to_double(key, v);
  else if (key == "sim.n_replicates") c.n_replicates = static_cast<int>(to_int(key, v));
  else if (key == "sim.test_size") c.test_size = idx();
  else if (key == "sim.methods") c.methods = to_list(v);
  else if (key == "sim.inference_arm") c.inference_arm = to_bool(key, v);
  else if (key == "sim.penalty") c.penalty = parse_penalty(v);
  else if (key == "sim.gamma") c.gamma = to_double(key, v);
  else if (key == "sim.pilot") c.pilot = parse_pilot(v);
  else if (key == "sim.cv_folds") c.cv_folds = static_cast<int>(to_int(key, v));
  else if (key == "sim.n_lambda") c.n_lambda = static_cast<int>(to_int(key, v));
  else if (key == "sim.honest_cv") c.honest_cv = to_bool(key, v);
  else throw Error(Errc::ConfigError, "unknown simulate setting '" + key + "'");
}

inline SimConfig make_sim_config(const Settings& settings) {
  SimConfig c;
  for (const auto& [k, v] : settings)
    if (k == "sim.preset") apply_setting(c, k, v);
  for (const auto& [k, v] : settings)
    if (k != "sim.preset") apply_setting(c, k, v);
  c.validate();
  return c;
}

// ---------------------------------------------------------------- data

struct NamedDataset {
  Dataset data;
  std::vector<std::string> names;  ///< canonical [A | Z | W] order
};

inline constexpr const char* kInterceptName = "(intercept)";

inline NamedDataset load_dataset(const Table& t, const FitSpec& spec) {
  auto col = [&](const std::string& name) {
    const Index j = t.column(name);
    if (j < 0) throw Error(Errc::SchemaMismatch, "column '" + name + "' is not in the data");
    return j;
  };
  const Vec y = t.values.col(col(spec.outcome));
  const bool icpt = spec.intercept.value_or(spec.fit.family.kind == FamilyKind::Logistic);
  NamedDataset out;
  std::vector<Index> cols;
  std::set<std::string> used{spec.outcome};
  for (const auto* block : {&spec.a, &spec.z, &spec.w}) {
    for (const auto& name : *block) {
      if (!used.insert(name).second)
        throw Error(Errc::SchemaMismatch, "column '" + name + "' is listed twice");
      cols.push_back(col(name));
    }
  }
  Mat x(t.values.rows(), static_cast<Index>(cols.size()) + (icpt ? 1 : 0));
  Index k = 0;
  if (icpt) {
    x.col(k++).setOnes();
    out.names.push_back(kInterceptName);
  }
  for (std::size_t j = 0; j < cols.size(); ++j) {
    x.col(k++) = t.values.col(cols[j]);
  }
  for (const auto* block : {&spec.a, &spec.z, &spec.w})
    out.names.insert(out.names.end(), block->begin(), block->end());
  const Partition part{static_cast<Index>(spec.a.size()) + (icpt ? 1 : 0),
                       static_cast<Index>(spec.z.size()), static_cast<Index>(spec.w.size())};
  out.data = Dataset(y, std::move(x), part);
  return out;
}

/// External document:
///   {"family": "...", "n_ext": N, "coefficients": {"z1": b1, ...},
///    "covariance": [[...], ...]}
/// The covariance is that of the published estimates, in the order the
/// coefficients are listed; a flat row-major array is also accepted. The
/// names must be a permutation of the Z columns.
inline ExternalSummary parse_external(const Json& j, const std::vector<std::string>& z_names,
                                      FamilyKind family) {
  auto need = [&](const char* key) -> const Json& {
    if (!j.is_object() || !j.contains(key))
      throw Error(Errc::SchemaMismatch, std::string("external summary lacks '") + key + "'");
    return j.at(key);
  };
  try {
    const std::string fam = need("family").get<std::string>();
    if (fam != family_name(family))
      throw Error(Errc::SchemaMismatch, "external family '" + fam + "' does not match '" +
                                            family_name(family) + "'");
    const Json& n_ext = need("n_ext");
    if (!n_ext.is_number_integer() || n_ext.get<long long>() < 1)
      throw Error(Errc::SchemaMismatch, "n_ext must be a positive integer");
    const Json& coef = need("coefficients");
    if (!coef.is_object()) throw Error(Errc::SchemaMismatch, "coefficients must be an object");
    std::vector<std::string> names;
    std::vector<double> values;
    for (const auto& [name, v] : coef.items()) {
      if (std::find(z_names.begin(), z_names.end(), name) == z_names.end())
        throw Error(Errc::SchemaMismatch, "external coefficient '" + name + "' is not a Z column");
      names.push_back(name);
      values.push_back(v.get<double>());
    }
    for (const auto& zn : z_names)
      if (std::find(names.begin(), names.end(), zn) == names.end())
        throw Error(Errc::SchemaMismatch, "Z column '" + zn + "' has no external coefficient");
    const auto p = static_cast<Index>(names.size());
    const Json& cj = need("covariance");
    Mat cov(p, p);
    if (cj.is_array() && cj.size() == names.size() * names.size() &&
        (p == 0 || !cj.front().is_array())) {
      for (Index i = 0; i < p * p; ++i) cov(i / p, i % p) = cj.at(static_cast<std::size_t>(i)).get<double>();
    } else if (cj.is_array() && cj.size() == names.size()) {
      for (Index r = 0; r < p; ++r) {
        const Json& row = cj.at(static_cast<std::size_t>(r));
        if (!row.is_array() || row.size() != names.size())
          throw Error(Errc::SchemaMismatch, "covariance row " + std::to_string(r) + " has the wrong length");
        for (Index c = 0; c < p; ++c) cov(r, c) = row.at(static_cast<std::size_t>(c)).get<double>();
      }
    } else {
      throw Error(Errc::SchemaMismatch, "covariance must be " + std::to_string(p) + " x " +
                                            std::to_string(p));
    }
    // reorder into data Z order
    IndexList order;
    for (const auto& zn : z_names)
      order.push_back(std::find(names.begin(), names.end(), zn) - names.begin());
    ExternalSummary e;
    e.theta_z.resize(p);
    for (Index k = 0; k < p; ++k) e.theta_z(k) = values[static_cast<std::size_t>(order[static_cast<std::size_t>(k)])];
    e.cov_raw = detail::take_block(cov, order);
    e.n_ext = static_cast<double>(n_ext.get<long long>());
    e.validate();
    return e;
  } catch (const Json::exception& ex) {
    throw Error(Errc::SchemaMismatch, std::string("external summary: ") + ex.what());
  }
}

inline Json parse_json(const std::string& text, const std::string& source) {
  try {
    return Json::parse(text);
  } catch (const Json::parse_error& ex) {
    throw Error(Errc::ParseError, source + ": " + ex.what());
  }
}

// ---------------------------------------------------------------- JSON

namespace detail {

inline Json num(double v) { return std::isfinite(v) ? Json(v) : Json(nullptr); }

inline double get_num(const Json& j) {
  return j.is_null() ? std::numeric_limits<double>::quiet_NaN() : j.get<double>();
}

inline Json vec_json(const Vec& v) {
  Json a = Json::array();
  for (Index i = 0; i < v.size(); ++i) a.push_back(num(v(i)));
  return a;
}

inline Vec json_vec(const Json& j) {
  Vec v(static_cast<Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) v(static_cast<Index>(i)) = get_num(j[i]);
  return v;
}

inline Json mat_json(const Mat& m) {
  Json a = Json::array();
  for (Index r = 0; r < m.rows(); ++r) a.push_back(vec_json(m.row(r).transpose()));
  return a;
}

inline Mat json_mat(const Json& j, Index cols_if_empty = 0) {
  const auto rows = static_cast<Index>(j.size());
  const Index cols = rows ? static_cast<Index>(j[0].size()) : cols_if_empty;
  Mat m(rows, cols);
  for (Index r = 0; r < rows; ++r) m.row(r) = json_vec(j[static_cast<std::size_t>(r)]).transpose();
  return m;
}

inline Json index_json(const IndexList& v) {
  Json a = Json::array();
  for (Index i : v) a.push_back(i);
  return a;
}

inline IndexList json_index(const Json& j) {
  IndexList v;
  for (const auto& x : j) v.push_back(x.get<Index>());
  return v;
}

inline Json doubles_json(const std::vector<double>& v) {
  Json a = Json::array();
  for (double x : v) a.push_back(num(x));
  return a;
}

inline std::vector<double> json_doubles(const Json& j) {
  std::vector<double> v;
  for (const auto& x : j) v.push_back(get_num(x));
  return v;
}

inline CvCriterion parse_criterion(const std::string& s) {
  for (CvCriterion c : {CvCriterion::R2, CvCriterion::AUC, CvCriterion::MSE})
    if (s == criterion_name(c)) return c;
  throw Error(Errc::SchemaMismatch, "unknown CV criterion '" + s + "'");
}

inline Json cv_json(const CvReport& cv) {
  Json j;
  j["criterion"] = criterion_name(cv.criterion);
  j["alphas"] = doubles_json(cv.alphas);
  j["chosen_alpha_index"] = cv.chosen_alpha_index;
  j["chosen_lambda_index"] = cv.chosen_lambda_index;
  j["chosen_alpha"] = num(cv.chosen_alpha);
  j["chosen_lambda"] = num(cv.chosen_lambda);
  Json grids = Json::array(), means = Json::array(), folds = Json::array();
  for (const auto& g : cv.lambda_grid) grids.push_back(doubles_json(g));
  for (const auto& m : cv.mean_metric) means.push_back(vec_json(m));
  for (const auto& f : cv.fold_metric) folds.push_back(mat_json(f));
  j["lambda_grid"] = grids;
  j["mean_metric"] = means;
  j["fold_metric"] = folds;
  return j;
}

inline CvReport json_cv(const Json& j) {
  CvReport cv;
  cv.criterion = parse_criterion(j.at("criterion").get<std::string>());
  cv.alphas = json_doubles(j.at("alphas"));
  cv.chosen_alpha_index = j.at("chosen_alpha_index").get<std::size_t>();
  cv.chosen_lambda_index = j.at("chosen_lambda_index").get<std::size_t>();
  cv.chosen_alpha = get_num(j.at("chosen_alpha"));
  cv.chosen_lambda = get_num(j.at("chosen_lambda"));
  for (const auto& g : j.at("lambda_grid")) cv.lambda_grid.push_back(json_doubles(g));
  for (const auto& m : j.at("mean_metric")) cv.mean_metric.push_back(json_vec(m));
  for (const auto& f : j.at("fold_metric")) cv.fold_metric.push_back(json_mat(f));
  return cv;
}

}  // namespace detail

/// FitReport with the column names it refers to.
struct FitDocument {
  std::vector<std::string> names;
  FitReport report;
};

inline Json to_json(const FitDocument& doc) {
  using namespace detail;
  const FitReport& r = doc.report;
  require_dim(static_cast<Index>(doc.names.size()), r.beta.size(), "coefficient names");
  Json j;
  j["family"] = family_name(r.family);
  j["method"] = r.method;
  j["partition"] = {{"p_a", r.part.p_a}, {"p_z", r.part.p_z}, {"p_w", r.part.p_w}};
  Json coefs = Json::array();
  for (Index k = 0; k < r.beta.size(); ++k) {
    const auto ks = static_cast<std::size_t>(k);
    coefs.push_back({{"name", doc.names[ks]},
                     {"estimate", num(r.beta(k))},
                     {"initial", num(r.beta_init(k))},
                     {"selected", std::find(r.support.begin(), r.support.end(), k) != r.support.end()}});
  }
  j["coefficients"] = coefs;
  j["intercept_offset"] = num(r.intercept_offset);
  j["tuning"] = {{"lambda", num(r.lambda)}, {"alpha", num(r.alpha)}, {"cv", cv_json(r.cv)}};
  const FitDiagnostics& d = r.diagnostics;
  j["diagnostics"] = {
      {"transportability",
       {{"statistic", num(d.transport.statistic)}, {"p_value", num(d.transport.p_value)}, {"df", d.transport.df}}},
      {"weight_condition", num(d.weight_condition)},
      {"weight_min_eigenvalue", num(d.weight_min_eigenvalue)},
      {"kkt_ok", d.kkt_ok},
      {"kkt_violation", num(d.kkt_violation)},
      {"cd_converged", d.cd_converged},
      {"init_converged", d.init_converged},
      {"init_lambda", num(d.init_lambda)},
      {"expansions", d.expansions},
      {"pseudo_builds", d.pseudo_builds},
      {"variance_builds", d.variance_builds}};
  if (r.inference) {
    const InferenceReport& inf = *r.inference;
    Json rows = Json::array();
    for (std::size_t k = 0; k < inf.support.size(); ++k) {
      const auto i = static_cast<Index>(k);
      rows.push_back({{"name", doc.names[static_cast<std::size_t>(inf.support[k])]},
                      {"index", inf.support[k]},
                      {"estimate", num(inf.estimate(i))},
                      {"se", num(inf.se(i))},
                      {"ci_lower", num(inf.ci_lower(i))},
                      {"ci_upper", num(inf.ci_upper(i))},
                      {"p_value", num(inf.p_values(i))},
                      {"q_value", num(inf.q_values(i))},
                      {"rejected", static_cast<bool>(inf.rejected[k])}});
    }
    j["inference"] = {{"level", num(inf.level)}, {"n", num(inf.n)}, {"coefficients", rows},
                      {"sigma_hat", mat_json(inf.sigma_hat)}};
  } else {
    j["inference"] = nullptr;
  }
  return j;
}

inline FitDocument fit_document_from_json(const Json& j) {
  using namespace detail;
  try {
    FitDocument doc;
    FitReport& r = doc.report;
    r.family = parse_family(j.at("family").get<std::string>());
    r.method = j.at("method").get<std::string>();
    const Json& p = j.at("partition");
    r.part = Partition{p.at("p_a").get<Index>(), p.at("p_z").get<Index>(), p.at("p_w").get<Index>()};
    const Json& coefs = j.at("coefficients");
    r.beta.resize(static_cast<Index>(coefs.size()));
    r.beta_init.resize(r.beta.size());
    for (std::size_t k = 0; k < coefs.size(); ++k) {
      const auto i = static_cast<Index>(k);
      doc.names.push_back(coefs[k].at("name").get<std::string>());
      r.beta(i) = get_num(coefs[k].at("estimate"));
      r.beta_init(i) = get_num(coefs[k].at("initial"));
      if (coefs[k].at("selected").get<bool>()) r.support.push_back(i);
    }
    r.intercept_offset = get_num(j.at("intercept_offset"));
    const Json& t = j.at("tuning");
    r.lambda = get_num(t.at("lambda"));
    r.alpha = get_num(t.at("alpha"));
    r.cv = json_cv(t.at("cv"));
    const Json& d = j.at("diagnostics");
    FitDiagnostics& g = r.diagnostics;
    const Json& tr = d.at("transportability");
    g.transport = TransportabilityResult{get_num(tr.at("statistic")), get_num(tr.at("p_value")),
                                         tr.at("df").get<Index>()};
    g.weight_condition = get_num(d.at("weight_condition"));
    g.weight_min_eigenvalue = get_num(d.at("weight_min_eigenvalue"));
    g.kkt_ok = d.at("kkt_ok").get<bool>();
    g.kkt_violation = get_num(d.at("kkt_violation"));
    g.cd_converged = d.at("cd_converged").get<bool>();
    g.init_converged = d.at("init_converged").get<bool>();
    g.init_lambda = get_num(d.at("init_lambda"));
    g.expansions = d.at("expansions").get<int>();
    g.pseudo_builds = d.at("pseudo_builds").get<int>();
    g.variance_builds = d.at("variance_builds").get<int>();
    const Json& inf = j.at("inference");
    if (!inf.is_null()) {
      InferenceReport ir;
      ir.level = get_num(inf.at("level"));
      ir.n = get_num(inf.at("n"));
      const Json& rows = inf.at("coefficients");
      const auto m = static_cast<Index>(rows.size());
      ir.estimate.resize(m);
      ir.se.resize(m);
      ir.ci_lower.resize(m);
      ir.ci_upper.resize(m);
      ir.p_values.resize(m);
      ir.q_values.resize(m);
      for (std::size_t k = 0; k < rows.size(); ++k) {
        const auto i = static_cast<Index>(k);
        ir.support.push_back(rows[k].at("index").get<Index>());
        ir.estimate(i) = get_num(rows[k].at("estimate"));
        ir.se(i) = get_num(rows[k].at("se"));
        ir.ci_lower(i) = get_num(rows[k].at("ci_lower"));
        ir.ci_upper(i) = get_num(rows[k].at("ci_upper"));
        ir.p_values(i) = get_num(rows[k].at("p_value"));
        ir.q_values(i) = get_num(rows[k].at("q_value"));
        ir.rejected.push_back(rows[k].at("rejected").get<bool>());
      }
      ir.sigma_hat = json_mat(inf.at("sigma_hat"));
      r.inference = std::move(ir);
    }
    return doc;
  } catch (const Json::exception& ex) {
    throw Error(Errc::SchemaMismatch, std::string("fit report: ") + ex.what());
  }
}

inline Json to_json(const SimConfig& c) {
  Json n_values = Json::array();
  for (Index n : c.n_values) n_values.push_back(n);
  return {{"preset", c.preset},
          {"family", family_name(c.family)},
          {"p_z", c.p_z},
          {"p_w", c.p_w},
          {"n_values", n_values},
          {"ext_ratio", c.ext_ratio},
          {"block_size", c.block_size},
          {"within_rho", c.within_rho},
          {"cross_pairs", c.cross_pairs},
          {"cross_rho", c.cross_rho},
          {"n_nonnull_z", c.n_nonnull_z},
          {"n_nonnull_w", c.n_nonnull_w},
          {"target_r2", c.target_r2},
          {"target_auc", c.target_auc},
          {"prevalence", c.prevalence},
          {"seed", c.seed},
          {"n_replicates", c.n_replicates},
          {"test_size", c.test_size},
          {"methods", c.methods},
          {"inference_arm", c.inference_arm},
          {"penalty", penalty_name(c.penalty)},
          {"gamma", c.gamma},
          {"pilot", pilot_name(c.pilot)},
          {"cv_folds", c.cv_folds},
          {"n_lambda", c.n_lambda},
          {"honest_cv", c.honest_cv}};
}

inline SimConfig sim_config_from_json(const Json& j) {
  SimConfig c;
  c.preset = j.at("preset").get<std::string>();
  c.family = parse_family(j.at("family").get<std::string>());
  c.p_z = j.at("p_z").get<Index>();
  c.p_w = j.at("p_w").get<Index>();
  c.n_values = j.at("n_values").get<std::vector<Index>>();
  c.ext_ratio = j.at("ext_ratio").get<double>();
  c.block_size = j.at("block_size").get<Index>();
  c.within_rho = j.at("within_rho").get<double>();
  c.cross_pairs = j.at("cross_pairs").get<Index>();
  c.cross_rho = j.at("cross_rho").get<double>();
  c.n_nonnull_z = j.at("n_nonnull_z").get<Index>();
  c.n_nonnull_w = j.at("n_nonnull_w").get<Index>();
  c.target_r2 = j.at("target_r2").get<double>();
  c.target_auc = j.at("target_auc").get<double>();
  c.prevalence = j.at("prevalence").get<double>();
  c.seed = j.at("seed").get<std::uint64_t>();
  c.n_replicates = j.at("n_replicates").get<int>();
  c.test_size = j.at("test_size").get<Index>();
  c.methods = j.at("methods").get<std::vector<std::string>>();
  c.inference_arm = j.at("inference_arm").get<bool>();
  c.penalty = parse_penalty(j.at("penalty").get<std::string>());
  c.gamma = j.at("gamma").get<double>();
  c.pilot = parse_pilot(j.at("pilot").get<std::string>());
  c.cv_folds = j.at("cv_folds").get<int>();
  c.n_lambda = j.at("n_lambda").get<int>();
  c.honest_cv = j.at("honest_cv").get<bool>();
  return c;
}

/// Thread count is an execution detail, not part of the study, so it is not
/// serialized.
inline Json to_json(const SimReport& r) {
  using detail::num;
  Json j;
  j["config"] = to_json(r.config);
  j["truth"] = {{"magnitude", num(r.magnitude)},
                {"intercept", num(r.intercept)},
                {"sigma_eps", num(r.sigma_eps)},
                {"covariance_repair", num(r.covariance_repair)},
                {"population_metric", num(r.population_metric)},
                {"true_test_metric", num(r.true_test_metric)},
                {"test_prevalence", num(r.test_prevalence)}};
  Json sums = Json::array();
  for (const auto& s : r.summaries)
    sums.push_back({{"method", s.method},
                    {"n", s.n},
                    {"n_ok", s.n_ok},
                    {"n_failed", s.n_failed},
                    {"mean", num(s.mean)},
                    {"sd", num(s.sd)},
                    {"band_lower", num(s.band_lower)},
                    {"band_upper", num(s.band_upper)},
                    {"has_inference", s.has_inference},
                    {"fdr", num(s.fdr)},
                    {"coverage", num(s.coverage)},
                    {"power_z", num(s.power_z)},
                    {"power_w", num(s.power_w)}});
  j["summaries"] = sums;
  Json recs = Json::array();
  for (const auto& x : r.records)
    recs.push_back({{"method", x.method},
                    {"n", x.n},
                    {"replicate", x.replicate},
                    {"ok", x.ok},
                    {"error", x.error},
                    {"metric", num(x.metric)},
                    {"lambda", num(x.lambda)},
                    {"alpha", num(x.alpha)},
                    {"n_selected", x.n_selected},
                    {"has_inference", x.has_inference},
                    {"fdr", num(x.fdr)},
                    {"coverage", num(x.coverage)},
                    {"power_z", num(x.power_z)},
                    {"power_w", num(x.power_w)}});
  j["records"] = recs;
  return j;
}

inline SimReport sim_report_from_json(const Json& j) {
  using detail::get_num;
  try {
    SimReport r;
    r.config = sim_config_from_json(j.at("config"));
    const Json& t = j.at("truth");
    r.magnitude = get_num(t.at("magnitude"));
    r.intercept = get_num(t.at("intercept"));
    r.sigma_eps = get_num(t.at("sigma_eps"));
    r.covariance_repair = get_num(t.at("covariance_repair"));
    r.population_metric = get_num(t.at("population_metric"));
    r.true_test_metric = get_num(t.at("true_test_metric"));
    r.test_prevalence = get_num(t.at("test_prevalence"));
    for (const auto& s : j.at("summaries")) {
      MethodSummary m;
      m.method = s.at("method").get<std::string>();
      m.n = s.at("n").get<Index>();
      m.n_ok = s.at("n_ok").get<int>();
      m.n_failed = s.at("n_failed").get<int>();
      m.mean = get_num(s.at("mean"));
      m.sd = get_num(s.at("sd"));
      m.band_lower = get_num(s.at("band_lower"));
      m.band_upper = get_num(s.at("band_upper"));
      m.has_inference = s.at("has_inference").get<bool>();
      m.fdr = get_num(s.at("fdr"));
      m.coverage = get_num(s.at("coverage"));
      m.power_z = get_num(s.at("power_z"));
      m.power_w = get_num(s.at("power_w"));
      r.summaries.push_back(std::move(m));
    }
    for (const auto& x : j.at("records")) {
      ReplicateRecord rec;
      rec.method = x.at("method").get<std::string>();
      rec.n = x.at("n").get<Index>();
      rec.replicate = x.at("replicate").get<int>();
      rec.ok = x.at("ok").get<bool>();
      rec.error = x.at("error").get<std::string>();
      rec.metric = get_num(x.at("metric"));
      rec.lambda = get_num(x.at("lambda"));
      rec.alpha = get_num(x.at("alpha"));
      rec.n_selected = x.at("n_selected").get<Index>();
      rec.has_inference = x.at("has_inference").get<bool>();
      rec.fdr = get_num(x.at("fdr"));
      rec.coverage = get_num(x.at("coverage"));
      rec.power_z = get_num(x.at("power_z"));
      rec.power_w = get_num(x.at("power_w"));
      r.records.push_back(std::move(rec));
    }
    return r;
  } catch (const Json::exception& ex) {
    throw Error(Errc::SchemaMismatch, std::string("simulation report: ") + ex.what());
  }
}

inline std::string dump(const Json& j) { return j.dump(2) + "\n"; }

// ---------------------------------------------------------------- tables

/// metrics.csv: one row per n, one mean-metric column per method, then the
/// band limits. inference.csv: FDR, coverage and power per (n, method) for
/// methods that report inference. replicates.csv: every replicate record.
struct SimTables {
  std::string metrics;
  std::string inference;
  std::string replicates;
};

inline SimTables sim_tables(const SimReport& r) {
  const SimConfig& c = r.config;
  auto find = [&](Index n, const std::string& m) -> const MethodSummary* {
    for (const auto& s : r.summaries)
      if (s.n == n && s.method == m) return &s;
    return nullptr;
  };
  std::ostringstream m;
  m << "n";
  for (const auto& name : c.methods) m << ',' << name;
  for (const auto& name : c.methods) m << ',' << name << "_lower," << name << "_upper";
  m << '\n';
  for (Index n : c.n_values) {
    m << n;
    for (const auto& name : c.methods) {
      const auto* s = find(n, name);
      m << ',' << format_double(s ? s->mean : std::numeric_limits<double>::quiet_NaN());
    }
    for (const auto& name : c.methods) {
      const auto* s = find(n, name);
      m << ',' << format_double(s ? s->band_lower : std::numeric_limits<double>::quiet_NaN()) << ','
        << format_double(s ? s->band_upper : std::numeric_limits<double>::quiet_NaN());
    }
    m << '\n';
  }

  std::ostringstream inf;
  inf << "n,method,n_ok,fdr,coverage,power_z,power_w\n";
  for (const auto& s : r.summaries) {
    if (!s.has_inference) continue;
    inf << s.n << ',' << s.method << ',' << s.n_ok << ',' << format_double(s.fdr) << ','
        << format_double(s.coverage) << ',' << format_double(s.power_z) << ','
        << format_double(s.power_w) << '\n';
  }

  std::ostringstream rep;
  rep << "n,replicate,method,ok,metric,lambda,alpha,n_selected,fdr,coverage,power_z,power_w\n";
  for (const auto& x : r.records)
    rep << x.n << ',' << x.replicate << ',' << x.method << ',' << (x.ok ? 1 : 0) << ','
        << format_double(x.metric) << ',' << format_double(x.lambda) << ','
        << format_double(x.alpha) << ',' << x.n_selected << ',' << format_double(x.fdr) << ','
        << format_double(x.coverage) << ',' << format_double(x.power_z) << ','
        << format_double(x.power_w) << '\n';
  return SimTables{m.str(), inf.str(), rep.str()};
}

}  // namespace htlgmm
