#include <catch2/catch.hpp>

#include <cmath>
#include <sstream>

#include "gammtk/rng.hpp"
#include "gammtk/sim.hpp"

using namespace gammtk;

TEST_CASE("sampled follow-up never exceeds the design maximum") {
  auto truth = builtin_truth("hippocampus_like");
  SamplingProtocol protocol;
  protocol.n_participants = 10000;
  protocol.seed = 31;
  auto data = sample_dataset(truth, protocol);

  std::vector<int> m_counts(4, 0);
  double max_follow_up = 0.0;
  for (int g = 0; g < data.n_participants(); ++g) {
    const auto& rows = data.participant_rows[g];
    m_counts[rows.size()] += 1;
    for (int r : rows) max_follow_up = std::max(max_follow_up, data.time_since_baseline[r]);
  }
  CHECK(max_follow_up <= 12.0);  // (3 - 1) * 6 years
  for (int i = 0; i < data.n_rows(); ++i) {
    CHECK(data.age[i] >= 4.0);
    CHECK(data.age[i] <= 102.0);
  }
  // timepoint counts 1, 2, 3 with equal probability
  for (int m = 1; m <= 3; ++m) {
    const double freq = static_cast<double>(m_counts[m]) / protocol.n_participants;
    CHECK(freq == Approx(1.0 / 3.0).margin(0.02));
  }
}

TEST_CASE("noise-free sampling lies exactly on the curve") {
  auto truth = builtin_truth("cortex_like");
  SamplingProtocol protocol;
  protocol.n_participants = 200;
  protocol.sigma_b_fraction = 0.0;
  protocol.sigma_fraction = 0.0;
  protocol.seed = 5;
  auto data = sample_dataset(truth, protocol);
  for (int i = 0; i < data.n_rows(); ++i)
    CHECK(data.outcome[i] == Approx(truth.curve(data.age[i])).margin(1e-9));
}

TEST_CASE("built-in truths are finite and continuous over the age range") {
  auto truths = builtin_truths();
  REQUIRE(truths.size() >= 3);
  for (const auto& t : truths) {
    double prev = t.curve(4.0);
    const double scale = t.curve_range();
    for (double a = 4.0; a <= 90.0 + 1e-9; a += 0.1) {
      const double v = t.curve(a);
      REQUIRE(std::isfinite(v));
      CHECK(std::abs(v - prev) < 0.05 * scale);  // no jumps at 0.1-year resolution
      prev = v;
    }
  }
}

TEST_CASE("offset regime shifts cohorts uniformly; interaction regime does not") {
  auto base = builtin_truth("cerebral_wm_like");
  auto offset = with_regime(base, CohortRegime::offset);
  auto interaction = with_regime(base, CohortRegime::interaction);

  const double c1 = 1940.0, c2 = 1970.0;
  const double diff_young = offset.value(10.0, c1) - offset.value(10.0, c2);
  bool interaction_varies = false;
  for (double a = 5.0; a <= 90.0; a += 5.0) {
    const double d = offset.value(a, c1) - offset.value(a, c2);
    CHECK(d == Approx(diff_young).margin(1e-9));
    const double di = interaction.value(a, c1) - interaction.value(a, c2);
    if (std::abs(di - (interaction.value(5.0, c1) - interaction.value(5.0, c2))) > 1e-6)
      interaction_varies = true;
  }
  CHECK(interaction_varies);
  // no cohort effect at all in the base regime
  CHECK(base.value(50.0, c1) == base.value(50.0, c2));
}

TEST_CASE("mse decomposition identity") {
  auto d1 = decompose_mse({1.0, 3.0}, 2.0);
  CHECK(d1.bias == 0.0);
  CHECK(d1.variance == 1.0);
  CHECK(d1.rmse == 1.0);

  auto d2 = decompose_mse({3.0, 3.0}, 2.0);
  CHECK(d2.bias == 1.0);
  CHECK(d2.variance == 0.0);
  CHECK(d2.rmse == 1.0);

  // direct mean-squared-error oracle
  Rng rng(17);
  std::vector<double> est(50);
  for (auto& e : est) e = rng.normal(1.0, 2.0);
  const double truth = 0.7;
  auto d3 = decompose_mse(est, truth);
  double mse = 0.0;
  for (double e : est) mse += (e - truth) * (e - truth);
  mse /= est.size();
  CHECK(d3.rmse * d3.rmse == Approx(mse).epsilon(1e-12));

  CHECK_THROWS_AS(decompose_mse({1.0}, 0.0), SpecError);
}

TEST_CASE("experiment reports are reproducible and worker-count independent") {
  ExperimentConfig config;
  config.truths = {with_regime(builtin_truth("hippocampus_like"), CohortRegime::none)};
  config.protocol.n_participants = 60;
  config.protocol.seed = 99;
  config.variants = {"1b", "3a"};
  config.n_replicates = 4;
  config.baseline_ages = {10.0, 60.0};
  config.horizon_years = 6;
  config.k_age = 8;
  config.k_cohort = 4;

  config.jobs = 1;
  auto r1 = run_experiment(config);
  config.jobs = 2;
  auto r2 = run_experiment(config);

  REQUIRE(r1.cells.size() == r2.cells.size());
  REQUIRE(!r1.cells.empty());
  for (std::size_t i = 0; i < r1.cells.size(); ++i) {
    CHECK(r1.cells[i].rmse == r2.cells[i].rmse);
    CHECK(r1.cells[i].bias == r2.cells[i].bias);
    CHECK(r1.cells[i].variance == r2.cells[i].variance);
  }

  // per-cell identity rmse^2 = bias^2 + variance
  for (const auto& c : r1.cells) {
    const double lhs = c.rmse * c.rmse;
    const double rhs = c.bias * c.bias + c.variance;
    CHECK(lhs == Approx(rhs).epsilon(1e-10));
  }

  // aggregation from cells matches the report averages
  auto agg = aggregate_cells(r1.cells);
  REQUIRE(agg.size() == r1.averages.size());
  for (std::size_t i = 0; i < agg.size(); ++i) {
    CHECK(agg[i].variant == r1.averages[i].variant);
    CHECK(agg[i].rmse == Approx(r1.averages[i].rmse).epsilon(1e-12));
    CHECK(agg[i].bias == Approx(r1.averages[i].bias).epsilon(1e-12));
    CHECK(agg[i].variance == Approx(r1.averages[i].variance).epsilon(1e-12));
  }
}

TEST_CASE("fit failures are recorded and excluded, never silently dropped") {
  // every scan on the same date: the age-cohort variants cannot be identified
  ExperimentConfig config;
  config.truths = {with_regime(builtin_truth("hippocampus_like"), CohortRegime::none)};
  config.protocol.n_participants = 50;
  config.protocol.max_timepoints = 1;
  config.protocol.baseline_date_lo = 2005.0;
  config.protocol.baseline_date_hi = 2005.0;
  config.protocol.seed = 7;
  config.variants = {"1b", "3a"};
  config.n_replicates = 3;
  config.baseline_ages = {35.0};
  config.horizon_years = 4;
  config.k_age = 8;
  config.jobs = 1;

  auto report = run_experiment(config);
  CHECK(report.fit_failures.at("3a") == 3);
  CHECK(report.fit_failures.at("1b") == 0);
  for (const auto& c : report.cells) CHECK(c.variant == "1b");
  for (const auto& a : report.averages) CHECK(a.variant == "1b");
}

TEST_CASE("cells CSV round-trips") {
  ExperimentCell c;
  c.truth_name = "hippocampus_like";
  c.regime = CohortRegime::interaction;
  c.variant = "3b";
  c.baseline_age = 35.0;
  c.t = 7.0;
  c.rmse = 12.345678901234567;
  c.bias = -1.5;
  c.variance = 150.12345;
  c.n_used = 98;
  std::ostringstream out;
  write_cells_csv(out, {c});
  std::istringstream in(out.str());
  auto back = read_cells_csv(in);
  REQUIRE(back.size() == 1);
  CHECK(back[0].truth_name == c.truth_name);
  CHECK(back[0].regime == c.regime);
  CHECK(back[0].variant == c.variant);
  CHECK(back[0].baseline_age == c.baseline_age);
  CHECK(back[0].t == c.t);
  CHECK(back[0].rmse == c.rmse);
  CHECK(back[0].bias == c.bias);
  CHECK(back[0].variance == c.variance);
  CHECK(back[0].n_used == c.n_used);
}

TEST_CASE("experiment presets") {
  auto desk = experiment_preset("desk");
  CHECK(desk.protocol.n_participants == 250);
  CHECK(desk.n_replicates == 100);
  auto paper = experiment_preset("paper");
  CHECK(paper.protocol.n_participants == 1000);
  CHECK(paper.n_replicates == 1000);
  auto fixed = experiment_preset("desk_identical_dates");
  CHECK(fixed.protocol.baseline_date_lo == fixed.protocol.baseline_date_hi);
  CHECK_THROWS_AS(experiment_preset("galaxy"), ConfigError);
}

TEST_CASE("identical seeds give bit-identical datasets") {
  auto truth = with_regime(builtin_truth("cortex_like"), CohortRegime::interaction);
  SamplingProtocol protocol;
  protocol.n_participants = 150;
  protocol.seed = 12345;
  auto d1 = sample_dataset(truth, protocol);
  auto d2 = sample_dataset(truth, protocol);
  REQUIRE(d1.n_rows() == d2.n_rows());
  for (int i = 0; i < d1.n_rows(); ++i) {
    CHECK(d1.age[i] == d2.age[i]);
    CHECK(d1.outcome[i] == d2.outcome[i]);
  }
}
