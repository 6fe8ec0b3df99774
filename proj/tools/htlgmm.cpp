// htlgmm command-line tool: fit, simulate, check.

#include <chrono>
#include <cstdlib>
#include <iostream>

#include <CLI11.hpp>

#include "htlgmm/checks.hpp"
#include "htlgmm/htlgmm.hpp"
#include "htlgmm/io.hpp"

namespace fs = std::filesystem;
using namespace htlgmm;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitNumeric = 3;
constexpr int kExitChecks = 4;

int exit_code(Errc c) {
  switch (c) {
    case Errc::ConfigError:
    case Errc::ParseError:
    case Errc::SchemaMismatch:
    case Errc::IncompatibleExternal:
    case Errc::InvalidArgument:
    case Errc::DimensionMismatch:
    case Errc::NonFiniteInput:
    case Errc::InvalidOutcome:
    case Errc::FoldTooSmall:
    case Errc::SingleClass:
      return kExitConfig;
    default:
      return kExitNumeric;
  }
}

void report_error(const Error& e) {
  Json j;
  j["error"] = {{"code", errc_name(e.code())}, {"step", e.step()}, {"message", e.what()}};
  std::cerr << j.dump() << '\n';
}

void require_file(const std::string& path, const char* what) {
  if (!fs::is_regular_file(path))
    throw Error(Errc::ConfigError, std::string(what) + " '" + path + "' does not exist");
}

void require_parent(const std::string& path) {
  const fs::path parent = fs::absolute(path).parent_path();
  if (!fs::is_directory(parent))
    throw Error(Errc::ConfigError, "output directory '" + parent.string() + "' does not exist");
}

/// Config file, then the thread variable, then command-line flags.
struct Layers {
  std::string config;
  std::vector<std::string> sets;
  Settings flags;

  Settings build() const {
    Settings s;
    s.emplace_back("threads", std::to_string(default_threads()));
    if (!config.empty()) {
      const Settings file = parse_settings(detail::read_file(config), fs::path(config).filename().string());
      s.insert(s.end(), file.begin(), file.end());
    }
    if (const char* env = std::getenv("HTLGMM_THREADS"); env && *env) s.emplace_back("threads", env);
    for (const auto& kv : sets) s.push_back(parse_assignment(kv, "--set"));
    s.insert(s.end(), flags.begin(), flags.end());
    return s;
  }
};

int cmd_fit(const std::string& data_path, const std::string& ext_path, const std::string& out,
            const Layers& layers) {
  require_file(data_path, "data file");
  require_file(ext_path, "external summary");
  if (!layers.config.empty()) require_file(layers.config, "config file");
  require_parent(out);
  const FitSpec spec = make_fit_spec(layers.build());
  const Table table = read_csv(data_path);
  const NamedDataset nd = load_dataset(table, spec);
  const Json ej = parse_json(detail::read_file(ext_path), fs::path(ext_path).filename().string());
  const std::vector<std::string> z_names(spec.z.begin(), spec.z.end());
  const ExternalSummary ext = parse_external(ej, z_names, spec.fit.family.kind);
  const FitReport rep = fit(nd.data, ext, spec.fit);
  detail::write_file(out, dump(to_json(FitDocument{nd.names, rep})));
  return kExitOk;
}

int cmd_simulate(const std::string& out_dir, const Layers& layers, const std::string& argv_line) {
  if (!layers.config.empty()) require_file(layers.config, "config file");
  const SimConfig cfg = make_sim_config(layers.build());
  if (fs::exists(out_dir) && !fs::is_directory(out_dir))
    throw Error(Errc::ConfigError, "output path '" + out_dir + "' is not a directory");
  fs::create_directories(out_dir);

  const auto start = std::chrono::steady_clock::now();
  const SimReport rep = run_study(cfg);
  const double wall =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();

  const fs::path dir(out_dir);
  const SimTables t = sim_tables(rep);
  detail::write_file(dir / "metrics.csv", t.metrics);
  detail::write_file(dir / "inference.csv", t.inference);
  detail::write_file(dir / "replicates.csv", t.replicates);
  detail::write_file(dir / "report.json", dump(to_json(rep)));

  Json m;
  m["tool"] = "htlgmm";
  m["command"] = argv_line;
  m["config"] = to_json(cfg);
  m["seed"] = cfg.seed;
  m["threads"] = cfg.threads;
  m["versions"] = {{"htlgmm", kVersion},
                   {"eigen", std::to_string(EIGEN_WORLD_VERSION) + "." + std::to_string(EIGEN_MAJOR_VERSION) +
                                 "." + std::to_string(EIGEN_MINOR_VERSION)},
                   {"compiler", __VERSION__}};
  m["wall_time_seconds"] = wall;
  detail::write_file(dir / "manifest.json", dump(m));

  for (const auto& s : rep.summaries)
    std::cout << s.method << " n=" << s.n << " mean=" << format_double(s.mean) << " ok=" << s.n_ok
              << " failed=" << s.n_failed << '\n';
  return kExitOk;
}

int cmd_check(const std::string& out, bool inject_fault) {
  if (!out.empty()) require_parent(out);
  const std::vector<CheckResult> res = run_checks(CheckOptions{inject_fault});
  Json arr = Json::array();
  for (const auto& c : res) {
    std::cout << (c.passed ? "PASS " : "FAIL ") << c.name << " value=" << format_double(c.value)
              << " tol=" << format_double(c.tolerance) << '\n';
    arr.push_back({{"name", c.name},
                   {"passed", c.passed},
                   {"value", detail::num(c.value)},
                   {"tolerance", detail::num(c.tolerance)},
                   {"detail", c.detail}});
  }
  const bool ok = all_passed(res);
  if (!out.empty()) detail::write_file(out, dump(Json{{"passed", ok}, {"checks", arr}}));
  return ok ? kExitOk : kExitChecks;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"HTL-GMM: penalized GMM fits that borrow external reduced-model summaries"};
  app.require_subcommand(1, 1);
  app.set_version_flag("--version", kVersion);

  Layers layers;
  std::string data_path, ext_path, out, preset, n_values;
  std::optional<std::uint64_t> seed;
  std::optional<unsigned> threads;
  std::optional<int> replicates;
  bool inject_fault = false;

  auto common = [&](CLI::App* sub) {
    sub->add_option("--config", layers.config, "flat key = value config file");
    sub->add_option("--seed", seed, "random seed");
    sub->add_option("--threads", threads, "worker threads (default: HTLGMM_THREADS or all cores)")
        ->check(CLI::PositiveNumber);
    sub->add_option("--set", layers.sets, "override a config key, e.g. --set fit.cv_folds=5");
  };

  CLI::App* fit_cmd = app.add_subcommand("fit", "fit a main study with an external summary");
  fit_cmd->add_option("--data", data_path, "main-study CSV with header")->required();
  fit_cmd->add_option("--external", ext_path, "external summary JSON")->required();
  fit_cmd->add_option("--out", out, "report JSON path")->required();
  common(fit_cmd);

  CLI::App* sim_cmd = app.add_subcommand("simulate", "run a simulation study");
  sim_cmd->add_option("--out", out, "output directory")->required();
  sim_cmd->add_option("--preset", preset, "named configuration, e.g. fig1-logistic-pz10-pw150");
  sim_cmd->add_option("--replicates", replicates, "replicates per sample size");
  sim_cmd->add_option("--n", n_values, "comma-separated main-study sizes");
  common(sim_cmd);

  CLI::App* check_cmd = app.add_subcommand("check", "run the built-in verification suite");
  check_cmd->add_option("--out", out, "results JSON path");
  check_cmd->add_flag("--inject-fault", inject_fault)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? kExitOk : kExitConfig;
  }

  std::string argv_line;
  for (int i = 0; i < argc; ++i) argv_line += (i ? " " : "") + std::string(argv[i]);
  if (!preset.empty()) layers.flags.emplace_back("sim.preset", preset);
  if (replicates) layers.flags.emplace_back("sim.n_replicates", std::to_string(*replicates));
  if (!n_values.empty()) layers.flags.emplace_back("sim.n_values", n_values);
  if (seed) layers.flags.emplace_back("seed", std::to_string(*seed));
  if (threads) layers.flags.emplace_back("threads", std::to_string(*threads));

  try {
    if (fit_cmd->parsed()) return cmd_fit(data_path, ext_path, out, layers);
    if (sim_cmd->parsed()) return cmd_simulate(out, layers, argv_line);
    return cmd_check(out, inject_fault);
  } catch (const Error& e) {
    report_error(e);
    return exit_code(e.code());
  } catch (const fs::filesystem_error& e) {
    report_error(Error(Errc::ConfigError, e.what()));
    return kExitConfig;
  }
}
