// Command-line toolkit for additive mixed-model estimation of lifespan
// trajectories: fitting, prediction, effect extraction, posterior sampling,
// and Monte Carlo model-comparison experiments.

#include <array>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "gammtk/dataset.hpp"
#include "gammtk/inference.hpp"
#include "gammtk/model.hpp"
#include "gammtk/serialize.hpp"
#include "gammtk/sim.hpp"

namespace fs = std::filesystem;
using namespace gammtk;

namespace {

// Tracks files written by one command so that a failure leaves no partial
// outputs behind.
class OutputGuard {
 public:
  explicit OutputGuard(const std::string& dir) : dir_(dir) {
    if (dir_.empty()) throw ConfigError("--out directory is required");
    std::error_code ec;
    fs::create_directories(dir_, ec);
    if (ec) throw IoError("cannot create output directory '" + dir_ + "'");
  }

  std::string path(const std::string& name) {
    std::string p = (fs::path(dir_) / name).string();
    written_.push_back(p);
    return p;
  }

  std::ofstream open(const std::string& name) {
    std::ofstream out(path(name));
    if (!out) throw IoError("cannot open '" + written_.back() + "' for writing");
    return out;
  }

  void commit() { committed_ = true; }

  ~OutputGuard() {
    if (committed_) return;
    for (const auto& p : written_) {
      std::error_code ec;
      fs::remove(p, ec);
    }
  }

 private:
  std::string dir_;
  std::vector<std::string> written_;
  bool committed_ = false;
};

struct SchemaFlags {
  std::string id_col = "id";
  std::string age_col = "age";
  std::string date_col = "date";
  std::string outcome_col = "outcome";
  std::vector<std::string> covariates;
  std::vector<std::string> ordered;
  std::vector<std::string> standardize;

  void add_to(CLI::App* cmd) {
    cmd->add_option("--id-col", id_col, "participant id column");
    cmd->add_option("--age-col", age_col, "age column (years)");
    cmd->add_option("--date-col", date_col, "measurement date column (decimal years or ISO)");
    cmd->add_option("--outcome-col", outcome_col, "outcome column");
    cmd->add_option("--covariates", covariates,
                    "covariate columns (default: all remaining columns)")
        ->delimiter(',');
    cmd->add_option("--ordered", ordered, "factors to treat as ordered")->delimiter(',');
    cmd->add_option("--standardize", standardize,
                    "numeric covariates to scale to zero mean, unit variance")
        ->delimiter(',');
  }

  LongitudinalDataset load(const std::string& path) const {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open data file '" + path + "'");
    Schema schema;
    schema.participant = id_col;
    schema.age = age_col;
    schema.date = date_col;
    schema.outcome = outcome_col;
    schema.covariates = covariates;
    schema.ordered_factors = ordered;
    LongitudinalDataset ds = load_dataset(in, schema);
    for (const auto& name : standardize) ds = standardize_covariate(ds, name);
    return ds;
  }
};

std::string fmt4(double v) { return format_short(v, 4); }

void print_fit_summary(std::ostream& out, const FittedModel& model) {
  const RemlFit& fit = model.fit;
  const double z = normal_quantile(0.975);
  out << "Additive mixed model (" << (model.spec.variant.empty() ? "custom" : model.spec.variant)
      << "), outcome '" << model.outcome_name << "'\n";
  out << "  rows: " << model.n_training_rows << ", participants: " << model.n_participants
      << ", coefficients: " << fit.n_cols << "\n";
  out << "  REML criterion: " << fmt4(fit.reml_criterion)
      << ", total edf: " << fmt4(fit.edf_total) << "\n\n";

  out << "Parametric coefficients:\n";
  out << "  term                estimate   std.error  t          p          95% CI\n";
  for (const auto& term : model.terms) {
    if (term.penalty_block >= 0) continue;
    if (term.spec.kind != TermSpec::Kind::parametric &&
        term.spec.kind != TermSpec::Kind::ordered_factor_main && !term.intercept)
      continue;
    for (int j = 0; j < term.cols; ++j) {
      std::string name = term.label;
      if (!term.factor_levels.empty()) name += "." + term.factor_levels[j + 1];
      const double est = fit.beta[term.col_start + j];
      const double se = std::sqrt(fit.covariance(term.col_start + j, term.col_start + j));
      const double t = se > 0.0 ? est / se : 0.0;
      const double p = f_upper_tail(t * t, 1.0, std::max(1.0, fit.residual_df()));
      char line[256];
      std::snprintf(line, sizeof(line), "  %-18s  %-9s  %-9s  %-9s  %-9s  [%s, %s]\n",
                    name.c_str(), fmt4(est).c_str(), fmt4(se).c_str(), fmt4(t).c_str(),
                    fmt4(p).c_str(), fmt4(est - z * se).c_str(), fmt4(est + z * se).c_str());
      out << line;
    }
  }

  bool any_smooth = false;
  for (const auto& term : model.terms)
    if (term.penalty_block >= 0) any_smooth = true;
  if (any_smooth) {
    out << "\nSmooth terms:\n";
    out << "  term                      edf      ref.df   F        p-value\n";
    for (const auto& term : model.terms) {
      if (term.penalty_block < 0) continue;
      WaldTestResult w = wald_term_test(model, term.label);
      char line[256];
      std::snprintf(line, sizeof(line), "  %-24s  %-7s  %-7s  %-7s  %s\n", term.label.c_str(),
                    fmt4(fit.edf_per_block[term.penalty_block]).c_str(), fmt4(w.rank).c_str(),
                    fmt4(w.statistic).c_str(), fmt4(w.p_value).c_str());
      out << line;
    }
  }

  out << "\nVariance components:\n";
  out << "  group         name          std.dev\n";
  const auto& vc = fit.variance_components;
  if (vc.has_random_intercept)
    out << "  participant   (Intercept)   " << fmt4(vc.sigma_b)
        << (fit.convergence.sigma_b_pinned ? "   (pinned: one row per participant)" : "")
        << "\n";
  for (std::size_t i = 0; i < vc.term_labels.size(); ++i)
    out << "  " << vc.term_labels[i] << "   sigma_lambda   " << fmt4(vc.sigma_lambda[i])
        << "   (lambda = " << fmt4(vc.lambda[i]) << ")\n";
  out << "  residual                    " << fmt4(vc.sigma) << "\n";
}

void write_fit_tables(OutputGuard& guard, const FittedModel& model) {
  const RemlFit& fit = model.fit;
  const double z = normal_quantile(0.975);
  {
    auto out = guard.open("parametric_table.csv");
    write_csv_row(out, {"term", "estimate", "se", "t", "p", "conf_low", "conf_high"});
    for (const auto& term : model.terms) {
      if (term.penalty_block >= 0) continue;
      if (term.spec.kind != TermSpec::Kind::parametric &&
          term.spec.kind != TermSpec::Kind::ordered_factor_main && !term.intercept)
        continue;
      for (int j = 0; j < term.cols; ++j) {
        std::string name = term.label;
        if (!term.factor_levels.empty()) name += "." + term.factor_levels[j + 1];
        const double est = fit.beta[term.col_start + j];
        const double se = std::sqrt(fit.covariance(term.col_start + j, term.col_start + j));
        const double t = se > 0.0 ? est / se : 0.0;
        const double p = f_upper_tail(t * t, 1.0, std::max(1.0, fit.residual_df()));
        write_csv_row(out, {name, format_full(est), format_full(se), format_full(t),
                            format_full(p), format_full(est - z * se),
                            format_full(est + z * se)});
      }
    }
  }
  {
    auto out = guard.open("smooth_table.csv");
    write_csv_row(out, {"term", "edf", "ref_df", "statistic", "p_value"});
    for (const auto& term : model.terms) {
      if (term.penalty_block < 0) continue;
      WaldTestResult w = wald_term_test(model, term.label);
      write_csv_row(out, {term.label, format_full(fit.edf_per_block[term.penalty_block]),
                          format_full(w.rank), format_full(w.statistic),
                          format_full(w.p_value)});
    }
  }
  {
    auto out = guard.open("variance_components.csv");
    write_csv_row(out, {"group", "name", "std_dev", "lambda"});
    const auto& vc = fit.variance_components;
    if (vc.has_random_intercept)
      write_csv_row(out, {"participant", "(Intercept)", format_full(vc.sigma_b), ""});
    for (std::size_t i = 0; i < vc.term_labels.size(); ++i)
      write_csv_row(out, {vc.term_labels[i], "sigma_lambda", format_full(vc.sigma_lambda[i]),
                          format_full(vc.lambda[i])});
    write_csv_row(out, {"residual", "", format_full(vc.sigma), ""});
  }
}

GridTable reference_grid_for(const FittedModel& model, const std::string& grid_var,
                             const Vector& values,
                             const std::vector<std::pair<std::string, std::string>>& pins) {
  const int n = static_cast<int>(values.size());
  GridTable grid;
  grid.set(grid_var, values);
  auto pin_value = [&](const std::string& name) -> std::optional<std::string> {
    for (const auto& [k, v] : pins)
      if (k == name) return v;
    return std::nullopt;
  };
  auto add = [&](const std::string& name) {
    if (name.empty() || grid.has(name)) return;
    if (auto pinned = pin_value(name)) {
      if (model.categorical_references.count(name)) {
        grid.set(name, std::vector<std::string>(n, *pinned));
      } else {
        double v;
        if (!parse_double(*pinned, v))
          throw ConfigError("--pin " + name + "=" + *pinned + ": not a number");
        grid.set(name, Vector::Constant(n, v));
      }
      return;
    }
    if (name == "time") {
      grid.set(name, Vector::Zero(n));
    } else if (auto it = model.numeric_references.find(name);
               it != model.numeric_references.end()) {
      grid.set(name, Vector::Constant(n, it->second));
    } else if (auto ct = model.categorical_references.find(name);
               ct != model.categorical_references.end()) {
      grid.set(name, std::vector<std::string>(n, ct->second));
    } else {
      throw ConfigError("no reference value known for model variable '" + name + "'");
    }
  };
  for (const auto& t : model.spec.terms) {
    if (t.kind == TermSpec::Kind::random_intercept) continue;
    add(t.var1);
    if (!t.var2.empty()) add(t.var2);
  }
  return grid;
}

std::vector<std::pair<std::string, std::string>> parse_pins(const std::vector<std::string>& raw) {
  std::vector<std::pair<std::string, std::string>> pins;
  for (const auto& p : raw) {
    const auto eq = p.find('=');
    if (eq == std::string::npos) throw ConfigError("--pin expects name=value, got '" + p + "'");
    pins.emplace_back(p.substr(0, eq), p.substr(eq + 1));
  }
  return pins;
}

std::string default_grid_var(const FittedModel& model) {
  for (const auto& t : model.spec.terms) {
    if (t.kind == TermSpec::Kind::smooth || t.kind == TermSpec::Kind::tensor_full ||
        t.kind == TermSpec::Kind::tensor_interaction)
      return t.var1;
  }
  for (const auto& t : model.spec.terms)
    if (!t.var1.empty() && t.kind != TermSpec::Kind::random_intercept) return t.var1;
  throw ConfigError("model has no variables to build a grid over");
}

Vector make_grid_values(const FittedModel& model, const std::string& var, double lo, double hi,
                        double step) {
  if (std::isnan(lo) || std::isnan(hi)) {
    auto it = model.variable_ranges.find(var);
    if (it == model.variable_ranges.end())
      throw ConfigError("no training range for '" + var + "'; pass --grid-min/--grid-max");
    if (std::isnan(lo)) lo = it->second.first;
    if (std::isnan(hi)) hi = it->second.second;
  }
  if (!(step > 0.0)) throw ConfigError("--grid-step must be positive");
  if (hi < lo) throw ConfigError("--grid-max must be at least --grid-min");
  const int n = static_cast<int>(std::floor((hi - lo) / step + 1e-9)) + 1;
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = lo + i * step;
  return v;
}

int run_cli(int argc, char** argv) {
  CLI::App app{"additive mixed-model toolkit for lifespan trajectory estimation"};
  app.require_subcommand(1);
  // key = value file under a [command] section; given before the command,
  // command-line flags win on conflict
  app.set_config("--config", "", "configuration file ([command] section, key = value lines)");

  // ---- fit ----
  auto* fit_cmd = app.add_subcommand("fit", "estimate a model by REML and save it");
  std::string fit_data, fit_spec_path, fit_variant, fit_out;
  int k_age = 20, k_time = 5, k_cohort = 5;
  SchemaFlags fit_schema;
  fit_cmd->add_option("--data", fit_data, "input CSV")->required();
  fit_cmd->add_option("--spec", fit_spec_path, "model spec file");
  fit_cmd->add_option("--variant", fit_variant, "canonical model variant (1a..3b)");
  fit_cmd->add_option("--out", fit_out, "output directory")->required();
  fit_cmd->add_option("--k-age", k_age, "spline count for age terms");
  fit_cmd->add_option("--k-time", k_time, "spline count for the time margin");
  fit_cmd->add_option("--k-cohort", k_cohort, "spline count for cohort terms");
  fit_schema.add_to(fit_cmd);

  // ---- predict ----
  auto* predict_cmd = app.add_subcommand("predict", "evaluate a fitted model on a grid");
  std::string pr_model, pr_out, pr_grid_var;
  double pr_lo = NAN, pr_hi = NAN, pr_step = 0.1, pr_level = 0.95;
  std::vector<std::string> pr_pins;
  predict_cmd->add_option("--model", pr_model, "fitted model file")->required();
  predict_cmd->add_option("--out", pr_out, "output directory")->required();
  predict_cmd->add_option("--grid-var", pr_grid_var, "variable to vary (default: first smooth)");
  predict_cmd->add_option("--grid-min", pr_lo, "grid start (default: training minimum)");
  predict_cmd->add_option("--grid-max", pr_hi, "grid end (default: training maximum)");
  predict_cmd->add_option("--grid-step", pr_step, "grid spacing in years");
  predict_cmd->add_option("--level", pr_level, "confidence level");
  predict_cmd->add_option("--pin", pr_pins, "fix a model variable, name=value")->take_all();

  // ---- effects ----
  auto* effects_cmd =
      app.add_subcommand("effects", "cross-sectional and longitudinal effect curves");
  std::string ef_model, ef_out;
  double ef_date = NAN, ef_horizon = 15.0, ef_step = 0.1, ef_level = 0.95, ef_cohort = NAN;
  std::vector<double> ef_baselines = {10.0, 30.0, 50.0, 70.0};
  double ef_lo = NAN, ef_hi = NAN;
  effects_cmd->add_option("--model", ef_model, "fitted model file")->required();
  effects_cmd->add_option("--out", ef_out, "output directory")->required();
  effects_cmd->add_option("--date", ef_date, "calendar date for the cross-sectional curve");
  effects_cmd->add_option("--baselines", ef_baselines, "baseline ages for longitudinal curves")
      ->delimiter(',');
  effects_cmd->add_option("--horizon", ef_horizon, "years ahead of baseline");
  effects_cmd->add_option("--grid-step", ef_step, "grid spacing in years");
  effects_cmd->add_option("--grid-min", ef_lo, "cross-sectional age grid start");
  effects_cmd->add_option("--grid-max", ef_hi, "cross-sectional age grid end");
  effects_cmd->add_option("--level", ef_level, "confidence level");
  effects_cmd->add_option("--cohort", ef_cohort,
                          "birth cohort for longitudinal curves (default: date - baseline)");

  // ---- sample ----
  auto* sample_cmd =
      app.add_subcommand("sample", "posterior curve bands and age-at-maximum interval");
  std::string sa_model, sa_out, sa_grid_var;
  double sa_lo = NAN, sa_hi = NAN, sa_step = 0.1, sa_level = 0.95;
  int sa_draws = 20000;
  std::uint64_t sa_seed = 1;
  int sa_jobs = 0;
  std::vector<std::string> sa_pins;
  sample_cmd->add_option("--model", sa_model, "fitted model file")->required();
  sample_cmd->add_option("--out", sa_out, "output directory")->required();
  sample_cmd->add_option("--grid-var", sa_grid_var, "variable to vary (default: first smooth)");
  sample_cmd->add_option("--grid-min", sa_lo, "grid start");
  sample_cmd->add_option("--grid-max", sa_hi, "grid end");
  sample_cmd->add_option("--grid-step", sa_step, "grid spacing");
  sample_cmd->add_option("--level", sa_level, "interval level");
  sample_cmd->add_option("--draws", sa_draws, "posterior draws");
  sample_cmd->add_option("--seed", sa_seed, "random seed");
  sample_cmd->add_option("--jobs", sa_jobs, "worker threads (0: all cores)");
  sample_cmd->add_option("--pin", sa_pins, "fix a model variable, name=value")->take_all();

  // ---- simulate ----
  auto* simulate_cmd =
      app.add_subcommand("simulate", "Monte Carlo comparison of the model variants");
  std::string si_out, si_preset = "desk";
  std::vector<std::string> si_truths = {"hippocampus_like", "cerebral_wm_like", "cortex_like"};
  std::vector<std::string> si_regimes = {"none", "offset", "interaction"};
  std::vector<std::string> si_variants = {"1a", "1b", "2a", "2b", "3a", "3b"};
  std::vector<double> si_baselines = {10.0, 35.0, 60.0};
  int si_participants = -1, si_replicates = -1, si_horizon = 12, si_jobs = 0;
  std::uint64_t si_seed = 1;
  bool si_cross = false;
  int si_k_age = 20, si_k_time = 5, si_k_cohort = 5;
  simulate_cmd->add_option("--out", si_out, "output directory")->required();
  simulate_cmd->add_option("--preset", si_preset,
                           "desk | desk_identical_dates | paper | paper_identical_dates");
  simulate_cmd->add_option("--truths", si_truths, "built-in ground-truth curves")->delimiter(',');
  simulate_cmd->add_option("--regimes", si_regimes, "cohort regimes to simulate")->delimiter(',');
  simulate_cmd->add_option("--variants", si_variants, "model variants to fit")->delimiter(',');
  simulate_cmd->add_option("--baselines", si_baselines, "baseline ages evaluated")->delimiter(',');
  simulate_cmd->add_option("--participants", si_participants, "override preset sample size");
  simulate_cmd->add_option("--replicates", si_replicates, "override preset replicate count");
  simulate_cmd->add_option("--horizon", si_horizon, "longitudinal horizon in years");
  simulate_cmd->add_option("--seed", si_seed, "master seed");
  simulate_cmd->add_option("--jobs", si_jobs, "worker threads (0: all cores)");
  simulate_cmd->add_flag("--cross-sectional", si_cross,
                         "also evaluate cross-sectional accuracy at the mid-study date");
  simulate_cmd->add_option("--k-age", si_k_age, "spline count for age terms");
  simulate_cmd->add_option("--k-time", si_k_time, "spline count for the time margin");
  simulate_cmd->add_option("--k-cohort", si_k_cohort, "spline count for cohort terms");

  // ---- report ----
  auto* report_cmd = app.add_subcommand("report", "re-aggregate per-cell experiment results");
  std::string re_cells, re_out;
  report_cmd->add_option("--cells", re_cells, "cells.csv from a simulate run")->required();
  report_cmd->add_option("--out", re_out, "output directory")->required();

  // ---- check ----
  auto* check_cmd = app.add_subcommand("check", "basis dimension diagnostics for smooth terms");
  std::string ch_model, ch_data, ch_out;
  int ch_perms = 200;
  std::uint64_t ch_seed = 1;
  SchemaFlags ch_schema;
  check_cmd->add_option("--model", ch_model, "fitted model file")->required();
  check_cmd->add_option("--data", ch_data, "training data CSV")->required();
  check_cmd->add_option("--out", ch_out, "output directory (optional)");
  check_cmd->add_option("--permutations", ch_perms, "permutation count");
  check_cmd->add_option("--seed", ch_seed, "random seed");
  ch_schema.add_to(check_cmd);

  for (auto* cmd : app.get_subcommands({})) cmd->configurable(true);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  if (fit_cmd->parsed()) {
    OutputGuard guard(fit_out);
    LongitudinalDataset data = fit_schema.load(fit_data);
    ModelSpec spec;
    if (!fit_spec_path.empty()) {
      std::ifstream in(fit_spec_path);
      if (!in) throw IoError("cannot open spec file '" + fit_spec_path + "'");
      std::stringstream buffer;
      buffer << in.rdbuf();
      spec = spec_from_text(buffer.str());
      if (spec.outcome == "outcome" && fit_schema.outcome_col != "outcome")
        spec.outcome = fit_schema.outcome_col;
    } else if (!fit_variant.empty()) {
      std::vector<std::string> covs;
      for (const auto& name : data.covariate_names) covs.push_back(name);
      spec = canonical_spec(fit_variant, fit_schema.outcome_col, k_age, k_time, k_cohort, covs);
    } else {
      throw ConfigError("fit needs either --variant or --spec");
    }
    FittedModel model = fit_model(data, spec);
    save_model_file(guard.path("model.json"), model);
    write_fit_tables(guard, model);
    print_fit_summary(std::cout, model);
    guard.commit();
    return 0;
  }

  if (predict_cmd->parsed()) {
    OutputGuard guard(pr_out);
    FittedModel model = load_model_file(pr_model);
    const std::string var = pr_grid_var.empty() ? default_grid_var(model) : pr_grid_var;
    Vector values = make_grid_values(model, var, pr_lo, pr_hi, pr_step);
    GridTable grid = reference_grid_for(model, var, values, parse_pins(pr_pins));
    Prediction pred = predict(model, grid);
    const double z = normal_quantile(0.5 + pr_level / 2.0);
    auto out = guard.open("predictions.csv");
    write_csv_row(out, {var, "estimate", "se", "lower", "upper", "extrapolated"});
    for (int i = 0; i < values.size(); ++i)
      write_csv_row(out, {format_full(values[i]), format_full(pred.estimate[i]),
                          format_full(pred.se[i]),
                          format_full(pred.estimate[i] - z * pred.se[i]),
                          format_full(pred.estimate[i] + z * pred.se[i]),
                          pred.extrapolated[i] ? "1" : "0"});
    for (const auto& w : pred.warnings) std::cerr << "warning: " << w << "\n";
    guard.commit();
    return 0;
  }

  if (effects_cmd->parsed()) {
    OutputGuard guard(ef_out);
    FittedModel model = load_model_file(ef_model);
    const std::string variant = model.spec.variant;
    if (variant.empty())
      throw ConfigError("effects needs a model fitted with a canonical --variant");
    const bool needs_date = variant[0] == '3';
    if (needs_date && std::isnan(ef_date))
      throw ConfigError("variant " + variant + " needs --date for effect curves");

    {
      double lo = ef_lo, hi = ef_hi;
      const std::string age_var = variant[0] == '2' ? "baseline_age" : "age";
      if (std::isnan(lo)) lo = model.variable_ranges.at(age_var).first;
      if (std::isnan(hi)) hi = model.variable_ranges.at(age_var).second;
      const int n = static_cast<int>(std::floor((hi - lo) / ef_step + 1e-9)) + 1;
      Vector ages(n);
      for (int i = 0; i < n; ++i) ages[i] = lo + i * ef_step;
      EffectCurve cross = cross_sectional_effect(
          model, variant, needs_date ? std::optional<double>(ef_date) : std::nullopt, ages);
      auto out = guard.open("cross_sectional.csv");
      write_effect_csv(out, cross, ef_level, "age");
    }
    {
      auto out = guard.open("longitudinal.csv");
      const double z = normal_quantile(0.5 + ef_level / 2.0);
      write_csv_row(out, {"baseline_age", "t", "estimate", "se", "lower", "upper"});
      for (double baseline : ef_baselines) {
        std::optional<double> cohort;
        if (variant[0] == '3')
          cohort = std::isnan(ef_cohort) ? ef_date - baseline : ef_cohort;
        EffectCurve lon =
            longitudinal_effect(model, variant, baseline, cohort, ef_horizon, ef_step);
        for (int i = 0; i < lon.abscissa.size(); ++i) {
          const double e = lon.estimate[i], s = lon.pointwise_se[i];
          write_csv_row(out, {format_full(baseline), format_full(lon.abscissa[i]),
                              format_full(e), format_full(s), format_full(e - z * s),
                              format_full(e + z * s)});
        }
      }
    }
    guard.commit();
    return 0;
  }

  if (sample_cmd->parsed()) {
    OutputGuard guard(sa_out);
    FittedModel model = load_model_file(sa_model);
    const std::string var = sa_grid_var.empty() ? default_grid_var(model) : sa_grid_var;
    Vector values = make_grid_values(model, var, sa_lo, sa_hi, sa_step);
    GridTable grid = reference_grid_for(model, var, values, parse_pins(sa_pins));
    PosteriorCurveSample sample =
        sample_posterior_curves(model, grid, values, sa_draws, sa_seed, sa_jobs);
    IntervalEstimate pw = pointwise_band(sample, sa_level);
    IntervalEstimate sim = simultaneous_band(sample, sa_level);
    {
      auto out = guard.open("bands.csv");
      write_csv_row(out, {var, "estimate", "lower", "upper", "kind"});
      for (int i = 0; i < values.size(); ++i)
        write_csv_row(out, {format_full(values[i]), format_full(sample.estimate[i]),
                            format_full(pw.lower[i]), format_full(pw.upper[i]), "pointwise"});
      for (int i = 0; i < values.size(); ++i)
        write_csv_row(out, {format_full(values[i]), format_full(sample.estimate[i]),
                            format_full(sim.lower[i]), format_full(sim.upper[i]),
                            "simultaneous"});
    }
    {
      AgeAtMaxResult amax = age_at_max_distribution(sample, sa_level);
      auto out = guard.open("age_at_max.csv");
      write_csv_row(out, {"posterior_mean", "hdi_lower", "hdi_upper", "level", "draws"});
      write_csv_row(out, {format_full(amax.posterior_mean), format_full(amax.interval.lower[0]),
                          format_full(amax.interval.upper[0]), format_full(sa_level),
                          std::to_string(sa_draws)});
    }
    guard.commit();
    return 0;
  }

  if (simulate_cmd->parsed()) {
    OutputGuard guard(si_out);
    ExperimentPreset preset = experiment_preset(si_preset);
    ExperimentConfig config;
    config.protocol = preset.protocol;
    config.n_replicates = preset.n_replicates;
    if (si_participants > 0) config.protocol.n_participants = si_participants;
    if (si_replicates > 0) config.n_replicates = si_replicates;
    config.protocol.seed = si_seed;
    config.variants = si_variants;
    config.baseline_ages = si_baselines;
    config.horizon_years = si_horizon;
    config.k_age = si_k_age;
    config.k_time = si_k_time;
    config.k_cohort = si_k_cohort;
    config.cross_sectional_section = si_cross;
    config.jobs = si_jobs;
    for (const auto& truth_name : si_truths)
      for (const auto& regime : si_regimes)
        config.truths.push_back(
            with_regime(builtin_truth(truth_name), cohort_regime_from_name(regime)));

    ExperimentReport report = run_experiment(config);
    report.preset = si_preset;
    {
      auto out = guard.open("cells.csv");
      write_cells_csv(out, report.cells);
    }
    {
      auto out = guard.open("averages.csv");
      write_averages_csv(out, report.averages);
    }
    if (si_cross) {
      auto out = guard.open("cross_sectional_cells.csv");
      write_cells_csv(out, report.cross_sectional_cells);
      auto out2 = guard.open("cross_sectional_averages.csv");
      write_averages_csv(out2, report.cross_sectional_averages);
    }
    {
      nlohmann::json meta;
      meta["master_seed"] = report.master_seed;
      meta["preset"] = report.preset;
      meta["replicates"] = report.n_replicates;
      meta["participants"] = config.protocol.n_participants;
      meta["variants"] = config.variants;
      meta["truths"] = si_truths;
      meta["regimes"] = si_regimes;
      meta["fit_failures"] = report.fit_failures;
      auto out = guard.open("meta.json");
      out << meta.dump(1) << "\n";
    }
    guard.commit();
    return 0;
  }

  if (report_cmd->parsed()) {
    OutputGuard guard(re_out);
    std::ifstream in(re_cells);
    if (!in) throw IoError("cannot open cells file '" + re_cells + "'");
    auto cells = read_cells_csv(in);
    auto averages = aggregate_cells(cells);
    {
      auto out = guard.open("averages.csv");
      write_averages_csv(out, averages);
    }
    std::cout << "region, regime, variant, rmse, bias, variance\n";
    for (const auto& a : averages)
      std::cout << a.truth_name << ", " << cohort_regime_name(a.regime) << ", " << a.variant
                << ", " << fmt4(a.rmse) << ", " << fmt4(a.bias) << ", " << fmt4(a.variance)
                << "\n";
    guard.commit();
    return 0;
  }

  if (check_cmd->parsed()) {
    FittedModel model = load_model_file(ch_model);
    LongitudinalDataset data = ch_schema.load(ch_data);
    std::vector<std::array<std::string, 5>> rows;
    for (const auto& term : model.terms) {
      if (term.spec.kind != TermSpec::Kind::smooth) continue;
      auto check = basis_dimension_check(model, data, term.label, ch_perms, ch_seed);
      rows.push_back({term.label, format_full(check.k_prime), format_full(check.edf),
                      format_full(check.k_index), format_full(check.p_value)});
    }
    if (rows.empty()) throw ConfigError("model has no univariate smooth terms to check");
    std::cout << "term              k'      edf     k-index  p-value\n";
    for (const auto& r : rows) {
      char line[256];
      std::snprintf(line, sizeof(line), "%-16s  %-6s  %-6s  %-7s  %s\n", r[0].c_str(),
                    fmt4(std::stod(r[1])).c_str(), fmt4(std::stod(r[2])).c_str(),
                    fmt4(std::stod(r[3])).c_str(), fmt4(std::stod(r[4])).c_str());
      std::cout << line;
    }
    if (!ch_out.empty()) {
      OutputGuard guard(ch_out);
      auto out = guard.open("basis_check.csv");
      write_csv_row(out, {"term", "k_prime", "edf", "k_index", "p_value"});
      for (const auto& r : rows) write_csv_row(out, {r[0], r[1], r[2], r[3], r[4]});
      guard.commit();
    }
    return 0;
  }

  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  try {
    return run_cli(argc, argv);
  } catch (const Error& e) {
    nlohmann::json err;
    err["error"]["kind"] = e.kind_name();
    err["error"]["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  } catch (const std::exception& e) {
    nlohmann::json err;
    err["error"]["kind"] = "internal";
    err["error"]["message"] = e.what();
    std::cerr << err.dump() << "\n";
    return 1;
  }
}
