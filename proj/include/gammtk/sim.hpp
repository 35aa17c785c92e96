#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <istream>
#include <map>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include "gammtk/csv.hpp"
#include "gammtk/dataset.hpp"
#include "gammtk/inference.hpp"
#include "gammtk/model.hpp"
#include "gammtk/rng.hpp"

namespace gammtk {

enum class CohortRegime { none, offset, interaction };

inline std::string cohort_regime_name(CohortRegime r) {
  switch (r) {
    case CohortRegime::none: return "none";
    case CohortRegime::offset: return "offset";
    case CohortRegime::interaction: return "interaction";
  }
  return "?";
}

inline CohortRegime cohort_regime_from_name(const std::string& name) {
  if (name == "none") return CohortRegime::none;
  if (name == "offset") return CohortRegime::offset;
  if (name == "interaction") return CohortRegime::interaction;
  throw ConfigError("unknown cohort regime '" + name + "' (none | offset | interaction)");
}

// True data-generating curve plus a cohort-effect regime.  The outcome surface
// is value(age, birth_date) = curve(age) + cohort_effect(age, birth_date).
struct GroundTruth {
  std::string name;
  std::function<double(double)> curve;
  CohortRegime regime = CohortRegime::none;
  // offset: slope per birth year.  interaction: slope per birth year at old
  // age, faded in by a smooth ramp that is zero before mid-life.
  double cohort_slope_per_year = 0.0;
  double reference_birth_date = 1958.0;
  double age_lo = 4.0, age_hi = 90.0;

  // smooth ramp: 0 below age 45, 1 at age 90, quadratic-smoothed hinge
  static double age_ramp(double age) {
    const double a0 = 45.0, a1 = 90.0;
    const double u = (age - a0) / (a1 - a0);
    if (u <= 0.0) return 0.0;
    if (u >= 1.0) return 1.0;
    return u * u * (3.0 - 2.0 * u);
  }

  double cohort_effect(double age, double birth_date) const {
    const double dc = birth_date - reference_birth_date;
    switch (regime) {
      case CohortRegime::none: return 0.0;
      case CohortRegime::offset: return cohort_slope_per_year * dc;
      case CohortRegime::interaction: return cohort_slope_per_year * age_ramp(age) * dc;
    }
    return 0.0;
  }

  double value(double age, double birth_date) const {
    return curve(age) + cohort_effect(age, birth_date);
  }

  // change after t years of aging for a participant from the given cohort
  double longitudinal_truth(double baseline_age, double t, double birth_date) const {
    return value(baseline_age + t, birth_date) - value(baseline_age, birth_date);
  }

  // age differences at calendar date d (cohort varies along the age axis)
  double cross_sectional_truth(double age, double date) const {
    return value(age, date - age);
  }

  // SD of the curve over a dense age grid; the seed-independent scale used
  // for noise magnitudes
  double curve_sd() const {
    const int n = 1721;  // 0.05-year grid over [4, 90]
    double mean = 0.0;
    std::vector<double> values(n);
    for (int i = 0; i < n; ++i) {
      const double a = age_lo + (age_hi - age_lo) * i / (n - 1);
      values[i] = curve(a);
      mean += values[i];
    }
    mean /= n;
    double ss = 0.0;
    for (double v : values) ss += (v - mean) * (v - mean);
    return std::sqrt(ss / (n - 1));
  }

  double curve_range() const {
    double lo = 1e300, hi = -1e300;
    for (int i = 0; i < 1721; ++i) {
      const double a = age_lo + (age_hi - age_lo) * i / 1720.0;
      lo = std::min(lo, curve(a));
      hi = std::max(hi, curve(a));
    }
    return hi - lo;
  }
};

// Synthetic stand-in lifespan curves with the characteristic regional shapes:
// fast early growth with slow late decline, a mid-life peak, and an early peak
// followed by steady decline.
// Feature scales stay well above the ~4.5-year knot spacing of a k = 20
// basis on [4, 90], like curves that were themselves estimated from data.
inline std::vector<GroundTruth> builtin_truths() {
  std::vector<GroundTruth> out;
  {
    GroundTruth t;
    t.name = "hippocampus_like";  // steep growth, young-adult peak, slow decline
    t.curve = [](double a) {
      return 3500.0 + 4500.0 * (1.0 - std::exp(-a / 8.0)) -
             1100.0 / (1.0 + std::exp(-(a - 55.0) / 12.0));
    };
    out.push_back(std::move(t));
  }
  {
    GroundTruth t;
    t.name = "cerebral_wm_like";  // childhood growth, inverted U peaking mid-life
    t.curve = [](double a) {
      const double z = (a - 47.0) / 28.0;
      return 450000.0 * std::exp(-0.5 * z * z) * (1.0 - 0.45 * std::exp(-a / 8.0));
    };
    out.push_back(std::move(t));
  }
  {
    GroundTruth t;
    t.name = "cortex_like";  // early peak, then steady decline
    t.curve = [](double a) {
      return 300000.0 + 240000.0 * (1.0 - std::exp(-a / 5.0)) - 2300.0 * a;
    };
    out.push_back(std::move(t));
  }
  return out;
}

inline GroundTruth builtin_truth(const std::string& name) {
  for (auto& t : builtin_truths())
    if (t.name == name) return t;
  throw ConfigError("unknown built-in truth '" + name + "'");
}

// Applies a cohort regime; the default magnitude is 0.5% of the curve range
// per birth year.
inline GroundTruth with_regime(GroundTruth truth, CohortRegime regime,
                               std::optional<double> slope_per_year = {}) {
  truth.regime = regime;
  if (regime == CohortRegime::none) {
    truth.cohort_slope_per_year = 0.0;
  } else {
    truth.cohort_slope_per_year = slope_per_year.value_or(0.005 * truth.curve_range());
  }
  return truth;
}

struct SamplingProtocol {
  int n_participants = 1000;
  int max_timepoints = 3;                       // uniform over {1..max}
  double interval_lo = 1.0, interval_hi = 6.0;  // years between visits
  double baseline_age_lo = 4.0, baseline_age_hi = 90.0;
  double baseline_date_lo = 2000.0, baseline_date_hi = 2010.0;  // equal = identical dates
  double sigma_b_fraction = 0.5;
  double sigma_fraction = 0.2;
  std::uint64_t seed = 1;

  void validate() const {
    if (n_participants < 1) throw ConfigError("need at least one participant");
    if (interval_hi < interval_lo || baseline_age_hi < baseline_age_lo ||
        baseline_date_hi < baseline_date_lo)
      throw ConfigError("sampling protocol ranges must be ordered");
    if (sigma_b_fraction < 0.0 || sigma_fraction < 0.0)
      throw ConfigError("noise fractions must be non-negative");
  }
};

// Draws one longitudinal dataset: per participant, a timepoint count with
// equal probabilities, a uniform baseline age and date, uniform inter-visit
// gaps, plus a participant intercept and residual noise scaled to the curve SD.
inline LongitudinalDataset sample_dataset(const GroundTruth& truth,
                                          const SamplingProtocol& protocol) {
  protocol.validate();
  const double sd = truth.curve_sd();
  const double sigma_b = protocol.sigma_b_fraction * sd;
  const double sigma = protocol.sigma_fraction * sd;

  Rng rng(protocol.seed);
  std::vector<ObservationRow> rows;
  rows.reserve(protocol.n_participants * 2);
  char id[16];
  for (int i = 0; i < protocol.n_participants; ++i) {
    const int m = 1 + static_cast<int>(rng.uniform_int(protocol.max_timepoints));
    const double a1 = rng.uniform(protocol.baseline_age_lo, protocol.baseline_age_hi);
    const double d1 = protocol.baseline_date_lo == protocol.baseline_date_hi
                          ? protocol.baseline_date_lo
                          : rng.uniform(protocol.baseline_date_lo, protocol.baseline_date_hi);
    const double b = sigma_b > 0.0 ? rng.normal(0.0, sigma_b) : 0.0;
    const double birth = d1 - a1;
    std::snprintf(id, sizeof(id), "p%06d", i);
    double t = 0.0;
    for (int j = 0; j < m; ++j) {
      if (j > 0) t += rng.uniform(protocol.interval_lo, protocol.interval_hi);
      ObservationRow row;
      row.participant_id = id;
      row.age = a1 + t;
      row.measurement_date = d1 + t;
      const double eps = sigma > 0.0 ? rng.normal(0.0, sigma) : 0.0;
      row.outcome = truth.value(row.age, birth) + b + eps;
      rows.push_back(std::move(row));
    }
  }
  return dataset_from_rows(rows, "outcome");
}

struct MseDecomposition {
  double rmse = 0.0;
  double bias = 0.0;
  double variance = 0.0;
};

// bias = mean(est) - truth, variance = population variance of est;
// rmse^2 = bias^2 + variance holds exactly by construction.
inline MseDecomposition decompose_mse(const std::vector<double>& estimates, double truth) {
  if (estimates.size() < 2) throw SpecError("need at least two replicates");
  const int n = static_cast<int>(estimates.size());
  double mean = 0.0;
  for (double e : estimates) mean += e;
  mean /= n;
  double var = 0.0;
  for (double e : estimates) var += (e - mean) * (e - mean);
  var /= n;
  MseDecomposition out;
  out.bias = mean - truth;
  out.variance = var;
  out.rmse = std::sqrt(out.bias * out.bias + out.variance);
  return out;
}

struct ExperimentCell {
  std::string truth_name;
  CohortRegime regime = CohortRegime::none;
  std::string variant;
  double baseline_age = 0.0;
  double t = 0.0;
  double rmse = 0.0, bias = 0.0, variance = 0.0;
  int n_used = 0;
};

struct VariantAverage {
  std::string truth_name;
  CohortRegime regime = CohortRegime::none;
  std::string variant;
  double rmse = 0.0, bias = 0.0, variance = 0.0;  // square roots of averages
};

struct ExperimentReport {
  std::vector<ExperimentCell> cells;
  std::vector<VariantAverage> averages;
  std::map<std::string, int> fit_failures;  // per variant
  int n_replicates = 0;
  std::uint64_t master_seed = 0;
  std::string preset;

  // per-cell cross-sectional accuracy (optional section)
  std::vector<ExperimentCell> cross_sectional_cells;
  std::vector<VariantAverage> cross_sectional_averages;
};

struct ExperimentConfig {
  std::vector<GroundTruth> truths;
  SamplingProtocol protocol;
  std::vector<std::string> variants = {"1a", "1b", "2a", "2b", "3a", "3b"};
  int n_replicates = 100;
  std::vector<double> baseline_ages = {10.0, 35.0, 60.0};
  int horizon_years = 12;
  int k_age = 20, k_time = 5, k_cohort = 5;
  bool cross_sectional_section = false;
  std::vector<double> cross_sectional_ages = {10, 20, 30, 40, 50, 60, 70, 80};
  int jobs = 0;  // 0: hardware concurrency

  // Longitudinal effects are evaluated for a typical study participant of
  // each baseline age: birth cohort = evaluation_date - baseline_age.  A
  // single cohort across all baselines would sit far outside the observed
  // cohort range at the young and old baselines.
  double evaluation_date() const {
    return 0.5 * (protocol.baseline_date_lo + protocol.baseline_date_hi);
  }
};

namespace detail {

struct ReplicateEstimates {
  // [variant][baseline * horizon + (t-1)] and [variant][cs age index]
  std::vector<std::vector<double>> longitudinal;
  std::vector<std::vector<double>> cross_sectional;
  std::vector<bool> ok;
};

}  // namespace detail

// Monte Carlo comparison of the model variants.  Replicate r draws its
// dataset with seed derive_seed(master_seed, r), fits every variant, and
// evaluates longitudinal effects at each baseline age for t = 1..horizon at
// the truth's reference cohort.  Replicates run in parallel; results are
// independent of worker count.
inline ExperimentReport run_experiment(const ExperimentConfig& config) {
  const auto& variants = config.variants;
  const int n_var = static_cast<int>(variants.size());
  const int n_base = static_cast<int>(config.baseline_ages.size());
  const int horizon = config.horizon_years;
  const int n_cs = static_cast<int>(config.cross_sectional_ages.size());
  const double mid_date = config.evaluation_date();

  ExperimentReport report;
  report.n_replicates = config.n_replicates;
  report.master_seed = config.protocol.seed;
  for (const auto& v : variants) report.fit_failures[v] = 0;

  for (const auto& truth : config.truths) {
    std::vector<detail::ReplicateEstimates> reps(config.n_replicates);
    detail::parallel_for(config.n_replicates, config.jobs, [&](int r) {
      auto& rep = reps[r];
      rep.longitudinal.assign(n_var, std::vector<double>(n_base * horizon, 0.0));
      rep.cross_sectional.assign(n_var, std::vector<double>(n_cs, 0.0));
      rep.ok.assign(n_var, false);

      SamplingProtocol protocol = config.protocol;
      protocol.seed = derive_seed(config.protocol.seed, static_cast<std::uint64_t>(r));
      LongitudinalDataset data = sample_dataset(truth, protocol);

      for (int v = 0; v < n_var; ++v) {
        try {
          ModelSpec spec = canonical_spec(variants[v], "outcome", config.k_age, config.k_time,
                                          config.k_cohort);
          FittedModel model = fit_model(data, spec);
          for (int b = 0; b < n_base; ++b) {
            const double cohort = mid_date - config.baseline_ages[b];
            EffectCurve curve = longitudinal_effect(model, variants[v],
                                                    config.baseline_ages[b], cohort,
                                                    horizon, 1.0);
            for (int t = 1; t <= horizon; ++t)
              rep.longitudinal[v][b * horizon + (t - 1)] = curve.estimate[t];
          }
          if (config.cross_sectional_section) {
            Vector ages(n_cs);
            for (int i = 0; i < n_cs; ++i) ages[i] = config.cross_sectional_ages[i];
            EffectCurve cs = cross_sectional_effect(model, variants[v], mid_date, ages);
            // centered: the level is absorbed by the intercept
            const double mean = cs.estimate.mean();
            for (int i = 0; i < n_cs; ++i) rep.cross_sectional[v][i] = cs.estimate[i] - mean;
          }
          rep.ok[v] = true;
        } catch (const Error&) {
          rep.ok[v] = false;
        }
      }
    });

    for (int v = 0; v < n_var; ++v) {
      int failures = 0;
      for (const auto& rep : reps)
        if (!rep.ok[v]) ++failures;
      report.fit_failures[variants[v]] += failures;

      double mse_sum = 0.0, bias2_sum = 0.0, var_sum = 0.0;
      int cells_added = 0;
      for (int b = 0; b < n_base; ++b) {
        for (int t = 1; t <= horizon; ++t) {
          std::vector<double> estimates;
          estimates.reserve(reps.size());
          for (const auto& rep : reps)
            if (rep.ok[v]) estimates.push_back(rep.longitudinal[v][b * horizon + (t - 1)]);
          if (static_cast<int>(estimates.size()) < 2) continue;
          const double truth_value = truth.longitudinal_truth(
              config.baseline_ages[b], t, mid_date - config.baseline_ages[b]);
          MseDecomposition d = decompose_mse(estimates, truth_value);
          ExperimentCell cell;
          cell.truth_name = truth.name;
          cell.regime = truth.regime;
          cell.variant = variants[v];
          cell.baseline_age = config.baseline_ages[b];
          cell.t = t;
          cell.rmse = d.rmse;
          cell.bias = d.bias;
          cell.variance = d.variance;
          cell.n_used = static_cast<int>(estimates.size());
          report.cells.push_back(cell);
          mse_sum += d.rmse * d.rmse;
          bias2_sum += d.bias * d.bias;
          var_sum += d.variance;
          ++cells_added;
        }
      }
      if (cells_added > 0) {
        VariantAverage avg;
        avg.truth_name = truth.name;
        avg.regime = truth.regime;
        avg.variant = variants[v];
        avg.rmse = std::sqrt(mse_sum / cells_added);
        avg.bias = std::sqrt(bias2_sum / cells_added);
        avg.variance = std::sqrt(var_sum / cells_added);
        report.averages.push_back(avg);
      }

      if (config.cross_sectional_section) {
        double cs_mse = 0.0, cs_bias2 = 0.0, cs_var = 0.0;
        std::vector<double> truth_centered(n_cs);
        double tmean = 0.0;
        for (int i = 0; i < n_cs; ++i) {
          truth_centered[i] =
              truth.cross_sectional_truth(config.cross_sectional_ages[i], mid_date);
          tmean += truth_centered[i];
        }
        tmean /= n_cs;
        for (int i = 0; i < n_cs; ++i) {
          std::vector<double> estimates;
          for (const auto& rep : reps)
            if (rep.ok[v]) estimates.push_back(rep.cross_sectional[v][i]);
          if (static_cast<int>(estimates.size()) < 2) continue;
          MseDecomposition d = decompose_mse(estimates, truth_centered[i] - tmean);
          ExperimentCell cell;
          cell.truth_name = truth.name;
          cell.regime = truth.regime;
          cell.variant = variants[v];
          cell.baseline_age = config.cross_sectional_ages[i];
          cell.t = 0.0;
          cell.rmse = d.rmse;
          cell.bias = d.bias;
          cell.variance = d.variance;
          cell.n_used = static_cast<int>(estimates.size());
          report.cross_sectional_cells.push_back(cell);
          cs_mse += d.rmse * d.rmse;
          cs_bias2 += d.bias * d.bias;
          cs_var += d.variance;
        }
        VariantAverage cs_avg;
        cs_avg.truth_name = truth.name;
        cs_avg.regime = truth.regime;
        cs_avg.variant = variants[v];
        cs_avg.rmse = std::sqrt(cs_mse / n_cs);
        cs_avg.bias = std::sqrt(cs_bias2 / n_cs);
        cs_avg.variance = std::sqrt(cs_var / n_cs);
        report.cross_sectional_averages.push_back(cs_avg);
      }
    }
  }
  return report;
}

inline void write_cells_csv(std::ostream& out, const std::vector<ExperimentCell>& cells) {
  write_csv_row(out, {"region", "regime", "variant", "baseline_age", "t", "rmse", "bias",
                      "variance", "n_used"});
  for (const auto& c : cells)
    write_csv_row(out, {c.truth_name, cohort_regime_name(c.regime), c.variant,
                        format_full(c.baseline_age), format_full(c.t), format_full(c.rmse),
                        format_full(c.bias), format_full(c.variance),
                        std::to_string(c.n_used)});
}

inline std::vector<ExperimentCell> read_cells_csv(std::istream& in) {
  CsvTable table = read_csv(in);
  auto col = [&](const std::string& name) {
    const int j = table.column_index(name);
    if (j < 0) throw SchemaError("cells CSV is missing column '" + name + "'");
    return j;
  };
  const int j_region = col("region"), j_regime = col("regime"), j_variant = col("variant");
  const int j_base = col("baseline_age"), j_t = col("t"), j_rmse = col("rmse");
  const int j_bias = col("bias"), j_var = col("variance"), j_used = col("n_used");
  std::vector<ExperimentCell> cells;
  for (const auto& row : table.rows) {
    ExperimentCell c;
    c.truth_name = row[j_region];
    c.regime = cohort_regime_from_name(row[j_regime]);
    c.variant = row[j_variant];
    if (!parse_double(row[j_base], c.baseline_age) || !parse_double(row[j_t], c.t) ||
        !parse_double(row[j_rmse], c.rmse) || !parse_double(row[j_bias], c.bias) ||
        !parse_double(row[j_var], c.variance))
      throw ParseError("malformed numeric field in cells CSV");
    c.n_used = std::stoi(row[j_used]);
    cells.push_back(std::move(c));
  }
  return cells;
}

inline void write_averages_csv(std::ostream& out, const std::vector<VariantAverage>& averages) {
  write_csv_row(out, {"region", "regime", "variant", "rmse", "bias", "variance"});
  for (const auto& a : averages)
    write_csv_row(out, {a.truth_name, cohort_regime_name(a.regime), a.variant,
                        format_full(a.rmse), format_full(a.bias), format_full(a.variance)});
}

// Re-aggregates per-cell results into the averaged table (square roots of the
// mean squared error, squared bias, and variance over baseline ages and times).
inline std::vector<VariantAverage> aggregate_cells(const std::vector<ExperimentCell>& cells) {
  std::vector<VariantAverage> out;
  std::map<std::string, std::size_t> index;
  std::vector<int> counts;
  for (const auto& c : cells) {
    const std::string key =
        c.truth_name + "\x1f" + cohort_regime_name(c.regime) + "\x1f" + c.variant;
    auto [it, inserted] = index.emplace(key, out.size());
    if (inserted) {
      VariantAverage a;
      a.truth_name = c.truth_name;
      a.regime = c.regime;
      a.variant = c.variant;
      out.push_back(a);
      counts.push_back(0);
    }
    VariantAverage& a = out[it->second];
    a.rmse += c.rmse * c.rmse;
    a.bias += c.bias * c.bias;
    a.variance += c.variance;
    counts[it->second] += 1;
  }
  for (std::size_t i = 0; i < out.size(); ++i) {
    out[i].rmse = std::sqrt(out[i].rmse / counts[i]);
    out[i].bias = std::sqrt(out[i].bias / counts[i]);
    out[i].variance = std::sqrt(out[i].variance / counts[i]);
  }
  return out;
}

struct ExperimentPreset {
  SamplingProtocol protocol;
  int n_replicates = 100;
  std::string name;
};

// desk: n = 250, 100 replicates.  paper: n = 1000, 1000 replicates.
// *_identical_dates: every baseline measurement on the same date.
inline ExperimentPreset experiment_preset(const std::string& name) {
  ExperimentPreset preset;
  preset.name = name;
  if (name == "desk" || name == "desk_identical_dates") {
    preset.protocol.n_participants = 250;
    preset.n_replicates = 100;
  } else if (name == "paper" || name == "paper_identical_dates") {
    preset.protocol.n_participants = 1000;
    preset.n_replicates = 1000;
  } else {
    throw ConfigError("unknown preset '" + name +
                      "' (desk, desk_identical_dates, paper, paper_identical_dates)");
  }
  if (name.ends_with("identical_dates")) {
    preset.protocol.baseline_date_lo = 2005.0;
    preset.protocol.baseline_date_hi = 2005.0;
  }
  return preset;
}

}  // namespace gammtk
