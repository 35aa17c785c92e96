#pragma once

#include <fstream>
#include <string>

#include <json.hpp>

#include "gammtk/model.hpp"

namespace gammtk {

namespace detail {

using nlohmann::json;

inline json matrix_to_json(const Matrix& m) {
  json rows = json::array();
  for (int i = 0; i < m.rows(); ++i) {
    json row = json::array();
    for (int j = 0; j < m.cols(); ++j) row.push_back(m(i, j));
    rows.push_back(std::move(row));
  }
  return rows;
}

inline Matrix matrix_from_json(const json& j) {
  if (j.empty()) return Matrix(0, 0);
  Matrix m(j.size(), j[0].size());
  for (std::size_t i = 0; i < j.size(); ++i)
    for (std::size_t k = 0; k < j[i].size(); ++k) m(i, k) = j[i][k].get<double>();
  return m;
}

inline json vector_to_json(const Vector& v) {
  json out = json::array();
  for (int i = 0; i < v.size(); ++i) out.push_back(v[i]);
  return out;
}

inline Vector vector_from_json(const json& j) {
  Vector v(j.size());
  for (std::size_t i = 0; i < j.size(); ++i) v[i] = j[i].get<double>();
  return v;
}

inline json term_info_to_json(const TermInfo& t) {
  json j;
  j["kind"] = term_kind_name(t.spec.kind);
  j["var1"] = t.spec.var1;
  j["var2"] = t.spec.var2;
  j["k1"] = t.spec.k1;
  j["k2"] = t.spec.k2;
  j["label"] = t.label;
  j["col_start"] = t.col_start;
  j["cols"] = t.cols;
  j["penalty_block"] = t.penalty_block;
  j["knots1"] = vector_to_json(t.knots1);
  j["knots2"] = vector_to_json(t.knots2);
  j["constraint"] = matrix_to_json(t.constraint);
  j["margin_constraint1"] = matrix_to_json(t.margin_constraint1);
  j["margin_constraint2"] = matrix_to_json(t.margin_constraint2);
  j["null_space_dim"] = t.null_space_dim;
  j["factor_levels"] = t.factor_levels;
  j["factor_level"] = t.factor_level;
  j["by_offset"] = t.by_offset;
  j["intercept"] = t.intercept;
  return j;
}

inline TermSpec::Kind term_kind_from_name(const std::string& name) {
  for (auto kind : {TermSpec::Kind::smooth, TermSpec::Kind::varying_coefficient,
                    TermSpec::Kind::tensor_full, TermSpec::Kind::tensor_interaction,
                    TermSpec::Kind::factor_smooth, TermSpec::Kind::parametric,
                    TermSpec::Kind::ordered_factor_main, TermSpec::Kind::random_intercept})
    if (term_kind_name(kind) == name) return kind;
  throw ParseError("unknown term kind '" + name + "' in model file");
}

inline TermInfo term_info_from_json(const json& j) {
  TermInfo t;
  t.spec.kind = term_kind_from_name(j.at("kind").get<std::string>());
  t.spec.var1 = j.at("var1").get<std::string>();
  t.spec.var2 = j.at("var2").get<std::string>();
  t.spec.k1 = j.at("k1").get<int>();
  t.spec.k2 = j.at("k2").get<int>();
  t.label = j.at("label").get<std::string>();
  t.col_start = j.at("col_start").get<int>();
  t.cols = j.at("cols").get<int>();
  t.penalty_block = j.at("penalty_block").get<int>();
  t.knots1 = vector_from_json(j.at("knots1"));
  t.knots2 = vector_from_json(j.at("knots2"));
  t.constraint = matrix_from_json(j.at("constraint"));
  t.margin_constraint1 = matrix_from_json(j.at("margin_constraint1"));
  t.margin_constraint2 = matrix_from_json(j.at("margin_constraint2"));
  t.null_space_dim = j.at("null_space_dim").get<int>();
  t.factor_levels = j.at("factor_levels").get<std::vector<std::string>>();
  t.factor_level = j.at("factor_level").get<int>();
  t.by_offset = j.at("by_offset").get<double>();
  t.intercept = j.at("intercept").get<bool>();
  return t;
}

}  // namespace detail

inline constexpr int kModelFormatVersion = 1;

inline void save_model(std::ostream& out, const FittedModel& model) {
  using nlohmann::json;
  json j;
  j["format_version"] = kModelFormatVersion;
  j["spec_text"] = spec_to_text(model.spec);
  j["spec_hash"] = model.spec_hash;
  j["outcome"] = model.outcome_name;
  j["n_training_rows"] = model.n_training_rows;
  j["n_participants"] = model.n_participants;

  json terms = json::array();
  for (const auto& t : model.terms) terms.push_back(detail::term_info_to_json(t));
  j["terms"] = std::move(terms);

  const RemlFit& f = model.fit;
  json fit;
  fit["beta"] = detail::vector_to_json(f.beta);
  fit["covariance"] = detail::matrix_to_json(f.covariance);
  fit["edf_per_block"] = f.edf_per_block;
  fit["edf_parametric"] = f.edf_parametric;
  fit["edf_random_intercept"] = f.edf_random_intercept;
  fit["edf_total"] = f.edf_total;
  fit["reml_criterion"] = f.reml_criterion;
  fit["n_obs"] = f.n_obs;
  fit["n_cols"] = f.n_cols;
  fit["random_intercepts"] = detail::vector_to_json(f.random_intercepts);
  json vc;
  vc["sigma_b"] = f.variance_components.sigma_b;
  vc["sigma"] = f.variance_components.sigma;
  vc["term_labels"] = f.variance_components.term_labels;
  vc["sigma_lambda"] = f.variance_components.sigma_lambda;
  vc["lambda"] = f.variance_components.lambda;
  vc["has_random_intercept"] = f.variance_components.has_random_intercept;
  fit["variance_components"] = std::move(vc);
  json conv;
  conv["iterations"] = f.convergence.iterations;
  conv["gradient_norm"] = f.convergence.gradient_norm;
  conv["converged"] = f.convergence.converged;
  conv["best_restart"] = f.convergence.best_restart;
  conv["sigma_b_pinned"] = f.convergence.sigma_b_pinned;
  fit["convergence"] = std::move(conv);
  j["fit"] = std::move(fit);

  json ranges;
  for (const auto& [name, r] : model.variable_ranges) ranges[name] = {r.first, r.second};
  j["variable_ranges"] = std::move(ranges);
  j["numeric_references"] = model.numeric_references;
  j["categorical_references"] = model.categorical_references;

  out << j.dump(1) << "\n";
}

inline FittedModel load_model(std::istream& in) {
  using nlohmann::json;
  json j;
  try {
    in >> j;
  } catch (const std::exception& e) {
    throw ParseError(std::string("cannot parse model file: ") + e.what());
  }
  if (!j.contains("format_version") || j["format_version"].get<int>() != kModelFormatVersion)
    throw ParseError("unsupported model file version");

  FittedModel model;
  model.spec = spec_from_text(j.at("spec_text").get<std::string>());
  model.spec_hash = j.at("spec_hash").get<std::uint64_t>();
  model.outcome_name = j.at("outcome").get<std::string>();
  model.n_training_rows = j.at("n_training_rows").get<int>();
  model.n_participants = j.at("n_participants").get<int>();
  for (const auto& t : j.at("terms")) model.terms.push_back(detail::term_info_from_json(t));

  const json& fit = j.at("fit");
  RemlFit& f = model.fit;
  f.beta = detail::vector_from_json(fit.at("beta"));
  f.covariance = detail::matrix_from_json(fit.at("covariance"));
  f.edf_per_block = fit.at("edf_per_block").get<std::vector<double>>();
  f.edf_parametric = fit.at("edf_parametric").get<double>();
  f.edf_random_intercept = fit.at("edf_random_intercept").get<double>();
  f.edf_total = fit.at("edf_total").get<double>();
  f.reml_criterion = fit.at("reml_criterion").get<double>();
  f.n_obs = fit.at("n_obs").get<int>();
  f.n_cols = fit.at("n_cols").get<int>();
  f.random_intercepts = detail::vector_from_json(fit.at("random_intercepts"));
  const json& vc = fit.at("variance_components");
  f.variance_components.sigma_b = vc.at("sigma_b").get<double>();
  f.variance_components.sigma = vc.at("sigma").get<double>();
  f.variance_components.term_labels = vc.at("term_labels").get<std::vector<std::string>>();
  f.variance_components.sigma_lambda = vc.at("sigma_lambda").get<std::vector<double>>();
  f.variance_components.lambda = vc.at("lambda").get<std::vector<double>>();
  f.variance_components.has_random_intercept = vc.at("has_random_intercept").get<bool>();
  const json& conv = fit.at("convergence");
  f.convergence.iterations = conv.at("iterations").get<int>();
  f.convergence.gradient_norm = conv.at("gradient_norm").get<double>();
  f.convergence.converged = conv.at("converged").get<bool>();
  f.convergence.best_restart = conv.at("best_restart").get<int>();
  f.convergence.sigma_b_pinned = conv.at("sigma_b_pinned").get<bool>();

  for (const auto& [name, r] : j.at("variable_ranges").items())
    model.variable_ranges[name] = {r[0].get<double>(), r[1].get<double>()};
  model.numeric_references =
      j.at("numeric_references").get<std::map<std::string, double>>();
  model.categorical_references =
      j.at("categorical_references").get<std::map<std::string, std::string>>();
  return model;
}

inline void save_model_file(const std::string& path, const FittedModel& model) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  save_model(out, model);
}

inline FittedModel load_model_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open model file '" + path + "'");
  return load_model(in);
}

}  // namespace gammtk
