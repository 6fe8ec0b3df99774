// Minimal library usage: simulate a main study and a larger external study,
// summarize the external one, and fit with and without the summary.

#include <iostream>

#include "htlgmm/htlgmm.hpp"

using namespace htlgmm;

int main() {
  SimConfig sim = sim_preset("fig1-linear-pz10-pw150");
  sim.test_size = 20000;
  const SimTruth truth = calibrate_effects(sim, build_covariance(sim));

  auto rng = make_rng(sim.seed, 1000);
  const StudyDraw main_study = draw_study(sim, truth, 300, rng);
  const StudyDraw ext_study = draw_study(sim, truth, 3000, rng);
  const Dataset data = to_dataset(sim, main_study);
  const ExternalSummary ext = fit_external(sim, ext_study).summary;

  FitConfig cfg;
  cfg.family = linear_family();
  cfg.seed = 42;
  const Prepared pr = prepare(data, ext, cfg);
  const FitReport htl = fit(pr, cfg);
  const FitReport main_only = fit_main_only(pr, cfg);

  const TestSet test = make_test_set(sim, truth);
  auto test_r2 = [&](const FitReport& r) {
    return eval_metric(test.linear_predictor(r.beta, r.intercept_offset), test.y, cfg.family);
  };
  std::cout << "transportability p-value: " << htl.diagnostics.transport.p_value << '\n'
            << "selected (htlgmm / main): " << htl.support.size() << " / " << main_only.support.size() << '\n'
            << "test R^2 (htlgmm / main / truth): " << test_r2(htl) << " / " << test_r2(main_only) << " / "
            << test.true_metric << '\n';
  return 0;
}
