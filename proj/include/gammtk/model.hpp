#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <vector>

#include "gammtk/basis.hpp"
#include "gammtk/csv.hpp"
#include "gammtk/dataset.hpp"
#include "gammtk/dist.hpp"
#include "gammtk/mixed.hpp"

namespace gammtk {

struct TermSpec {
  enum class Kind {
    smooth,              // s(var1, k1)
    varying_coefficient, // s(var1, by = var2, k1); no centering, spans the main effect of var2
    tensor_full,         // t2-style product smooth of (var1, var2)
    tensor_interaction,  // ti-style product smooth with main effects removed
    factor_smooth,       // difference smooths of var1 per level of ordered factor var2
    parametric,          // linear term (dummy-coded when categorical)
    ordered_factor_main, // dummy main effects of an ordered factor
    random_intercept     // participant-level intercept
  };
  Kind kind = Kind::parametric;
  std::string var1;
  std::string var2;
  int k1 = 0;
  int k2 = 0;

  bool operator==(const TermSpec&) const = default;
};

inline std::string term_kind_name(TermSpec::Kind k) {
  switch (k) {
    case TermSpec::Kind::smooth: return "smooth";
    case TermSpec::Kind::varying_coefficient: return "varying_coefficient";
    case TermSpec::Kind::tensor_full: return "tensor_full";
    case TermSpec::Kind::tensor_interaction: return "tensor_interaction";
    case TermSpec::Kind::factor_smooth: return "factor_smooth";
    case TermSpec::Kind::parametric: return "parametric";
    case TermSpec::Kind::ordered_factor_main: return "ordered_factor_main";
    case TermSpec::Kind::random_intercept: return "random_intercept";
  }
  return "?";
}

struct ModelSpec {
  std::vector<TermSpec> terms;
  std::string outcome = "outcome";
  bool baseline_only = false;  // restrict to rows with time == 0
  std::string variant;         // canonical tag (1a..3b) when applicable

  void validate() const {
    int ri = 0;
    for (const auto& t : terms)
      if (t.kind == TermSpec::Kind::random_intercept) ++ri;
    if (ri > 1) throw SpecError("at most one random intercept is allowed");
    for (const auto& t : terms) {
      if (t.kind == TermSpec::Kind::factor_smooth) {
        bool has_main = false;
        for (const auto& u : terms)
          if (u.kind == TermSpec::Kind::ordered_factor_main && u.var1 == t.var2) has_main = true;
        if (!has_main)
          throw SpecError("factor_smooth(" + t.var1 + ", by=" + t.var2 +
                          ") needs a matching ordered_factor_main(" + t.var2 +
                          ") for the level offsets");
      }
    }
  }
};

// ---- model specification text format (key = value lines) ----

inline std::string term_to_text(const TermSpec& t) {
  std::ostringstream out;
  switch (t.kind) {
    case TermSpec::Kind::smooth:
      out << "smooth(" << t.var1 << ", k=" << t.k1 << ")";
      break;
    case TermSpec::Kind::varying_coefficient:
      out << "varying_coefficient(" << t.var1 << ", by=" << t.var2 << ", k=" << t.k1 << ")";
      break;
    case TermSpec::Kind::tensor_full:
      out << "tensor_full(" << t.var1 << ", " << t.var2 << ", k1=" << t.k1 << ", k2=" << t.k2
          << ")";
      break;
    case TermSpec::Kind::tensor_interaction:
      out << "tensor_interaction(" << t.var1 << ", " << t.var2 << ", k1=" << t.k1
          << ", k2=" << t.k2 << ")";
      break;
    case TermSpec::Kind::factor_smooth:
      out << "factor_smooth(" << t.var1 << ", by=" << t.var2 << ", k=" << t.k1 << ")";
      break;
    case TermSpec::Kind::parametric:
      out << "parametric(" << t.var1 << ")";
      break;
    case TermSpec::Kind::ordered_factor_main:
      out << "ordered_factor_main(" << t.var1 << ")";
      break;
    case TermSpec::Kind::random_intercept:
      out << "random_intercept(" << t.var1 << ")";
      break;
  }
  return out.str();
}

inline std::string spec_to_text(const ModelSpec& spec) {
  std::ostringstream out;
  out << "outcome = " << spec.outcome << "\n";
  if (!spec.variant.empty()) out << "variant = " << spec.variant << "\n";
  if (spec.baseline_only) out << "baseline_only = true\n";
  for (const auto& t : spec.terms) out << "term = " << term_to_text(t) << "\n";
  return out.str();
}

namespace detail {

inline std::string trim(const std::string& s) {
  const auto a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  const auto b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

inline TermSpec parse_term_text(const std::string& text) {
  const auto open = text.find('(');
  const auto close = text.rfind(')');
  if (open == std::string::npos || close == std::string::npos || close < open)
    throw ParseError("malformed term '" + text + "'");
  const std::string name = trim(text.substr(0, open));
  std::vector<std::string> args;
  {
    std::string inner = text.substr(open + 1, close - open - 1);
    std::istringstream in(inner);
    std::string piece;
    while (std::getline(in, piece, ',')) args.push_back(trim(piece));
  }
  auto keyed = [&](const std::string& key) -> std::optional<std::string> {
    for (const auto& a : args) {
      const auto eq = a.find('=');
      if (eq != std::string::npos && trim(a.substr(0, eq)) == key)
        return trim(a.substr(eq + 1));
    }
    return std::nullopt;
  };
  auto positional = [&](std::size_t i) -> std::string {
    std::size_t count = 0;
    for (const auto& a : args) {
      if (a.find('=') != std::string::npos) continue;
      if (count == i) return a;
      ++count;
    }
    throw ParseError("term '" + text + "': missing argument " + std::to_string(i + 1));
  };
  auto int_arg = [&](const std::string& key, int fallback) {
    auto v = keyed(key);
    if (!v) return fallback;
    try {
      return std::stoi(*v);
    } catch (...) {
      throw ParseError("term '" + text + "': bad integer for " + key);
    }
  };

  TermSpec t;
  if (name == "smooth") {
    t.kind = TermSpec::Kind::smooth;
    t.var1 = positional(0);
    t.k1 = int_arg("k", 10);
  } else if (name == "varying_coefficient") {
    t.kind = TermSpec::Kind::varying_coefficient;
    t.var1 = positional(0);
    auto by = keyed("by");
    if (!by) throw ParseError("varying_coefficient needs by=<variable>");
    t.var2 = *by;
    t.k1 = int_arg("k", 10);
  } else if (name == "tensor_full" || name == "tensor_interaction") {
    t.kind = name == "tensor_full" ? TermSpec::Kind::tensor_full
                                   : TermSpec::Kind::tensor_interaction;
    t.var1 = positional(0);
    t.var2 = positional(1);
    t.k1 = int_arg("k1", 10);
    t.k2 = int_arg("k2", 10);
  } else if (name == "factor_smooth") {
    t.kind = TermSpec::Kind::factor_smooth;
    t.var1 = positional(0);
    auto by = keyed("by");
    if (!by) throw ParseError("factor_smooth needs by=<ordered factor>");
    t.var2 = *by;
    t.k1 = int_arg("k", 10);
  } else if (name == "parametric") {
    t.kind = TermSpec::Kind::parametric;
    t.var1 = positional(0);
  } else if (name == "ordered_factor_main") {
    t.kind = TermSpec::Kind::ordered_factor_main;
    t.var1 = positional(0);
  } else if (name == "random_intercept") {
    t.kind = TermSpec::Kind::random_intercept;
    t.var1 = positional(0);
  } else {
    throw ParseError("unknown term type '" + name + "'");
  }
  return t;
}

}  // namespace detail

inline ModelSpec spec_from_text(const std::string& text) {
  ModelSpec spec;
  std::istringstream in(text);
  std::string line;
  while (std::getline(in, line)) {
    const auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    line = detail::trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ParseError("expected key = value, got '" + line + "'");
    const std::string key = detail::trim(line.substr(0, eq));
    const std::string value = detail::trim(line.substr(eq + 1));
    if (key == "outcome") {
      spec.outcome = value;
    } else if (key == "variant") {
      spec.variant = value;
    } else if (key == "baseline_only") {
      spec.baseline_only = (value == "true" || value == "1");
    } else if (key == "term") {
      spec.terms.push_back(detail::parse_term_text(value));
    } else {
      throw ParseError("unknown model spec key '" + key + "'");
    }
  }
  spec.validate();
  return spec;
}

// The six canonical model families:
//   1a  smooth(age), first timepoint only, no random intercept
//   1b  smooth(age) + random intercept
//   2a  smooth(baseline_age) + varying_coefficient(baseline_age, by=time) + RI
//   2b  tensor_full(baseline_age, time) + RI
//   3a  smooth(age) + parametric(birth_date) + RI
//   3b  smooth(age) + varying_coefficient(age, by=birth_date) + RI
inline ModelSpec canonical_spec(const std::string& variant, const std::string& outcome,
                                int k_age = 20, int k_time = 5, int k_cohort = 5,
                                const std::vector<std::string>& covariates = {}) {
  ModelSpec spec;
  spec.outcome = outcome;
  spec.variant = variant;
  auto smooth = [&](const std::string& var, int k) {
    TermSpec t;
    t.kind = TermSpec::Kind::smooth;
    t.var1 = var;
    t.k1 = k;
    return t;
  };
  TermSpec ri;
  ri.kind = TermSpec::Kind::random_intercept;
  ri.var1 = "participant";

  if (variant == "1a") {
    spec.terms.push_back(smooth("age", k_age));
    spec.baseline_only = true;
  } else if (variant == "1b") {
    spec.terms.push_back(smooth("age", k_age));
    spec.terms.push_back(ri);
  } else if (variant == "2a") {
    spec.terms.push_back(smooth("baseline_age", k_age));
    TermSpec vc;
    vc.kind = TermSpec::Kind::varying_coefficient;
    vc.var1 = "baseline_age";
    vc.var2 = "time";
    vc.k1 = k_age;
    spec.terms.push_back(vc);
    spec.terms.push_back(ri);
  } else if (variant == "2b") {
    TermSpec te;
    te.kind = TermSpec::Kind::tensor_full;
    te.var1 = "baseline_age";
    te.var2 = "time";
    te.k1 = k_age;
    te.k2 = k_time;
    spec.terms.push_back(te);
    spec.terms.push_back(ri);
  } else if (variant == "3a") {
    spec.terms.push_back(smooth("age", k_age));
    TermSpec cohort;
    cohort.kind = TermSpec::Kind::parametric;
    cohort.var1 = "birth_date";
    spec.terms.push_back(cohort);
    spec.terms.push_back(ri);
  } else if (variant == "3b") {
    spec.terms.push_back(smooth("age", k_age));
    TermSpec vc;
    vc.kind = TermSpec::Kind::varying_coefficient;
    vc.var1 = "age";
    vc.var2 = "birth_date";
    vc.k1 = k_cohort;
    spec.terms.push_back(vc);
    spec.terms.push_back(ri);
  } else {
    throw SpecError("unknown model variant '" + variant + "' (expected 1a, 1b, 2a, 2b, 3a, 3b)");
  }
  for (const auto& cov : covariates) {
    TermSpec t;
    t.kind = TermSpec::Kind::parametric;
    t.var1 = cov;
    spec.terms.push_back(t);
  }
  spec.validate();
  return spec;
}

// Everything needed to rebuild one term's design columns on new data.
struct TermInfo {
  TermSpec spec;
  std::string label;
  int col_start = 0;
  int cols = 0;
  int penalty_block = -1;  // index into the fitted penalty blocks, -1 if unpenalized
  Vector knots1, knots2;
  Matrix constraint;           // overall reparameterization (empty if none)
  Matrix margin_constraint1;   // tensor_interaction margins
  Matrix margin_constraint2;
  int null_space_dim = 0;
  std::vector<std::string> factor_levels;  // categorical terms
  int factor_level = -1;                   // difference-smooth level (1-based)
  double by_offset = 0.0;  // varying coefficient: 'by' variable centered here
  bool intercept = false;
};

struct GridTable {
  std::vector<std::string> names;
  std::map<std::string, Vector> numeric;
  std::map<std::string, std::vector<std::string>> categorical;

  int rows() const {
    if (!numeric.empty()) return static_cast<int>(numeric.begin()->second.size());
    if (!categorical.empty()) return static_cast<int>(categorical.begin()->second.size());
    return 0;
  }
  void set(const std::string& name, Vector v) {
    if (!numeric.count(name) && !categorical.count(name)) names.push_back(name);
    numeric[name] = std::move(v);
  }
  void set(const std::string& name, std::vector<std::string> v) {
    if (!numeric.count(name) && !categorical.count(name)) names.push_back(name);
    categorical[name] = std::move(v);
  }
  bool has(const std::string& name) const {
    return numeric.count(name) > 0 || categorical.count(name) > 0;
  }
};

struct FittedModel {
  ModelSpec spec;
  std::string outcome_name;
  std::vector<TermInfo> terms;  // includes the intercept as terms[0]
  RemlFit fit;
  std::map<std::string, std::pair<double, double>> variable_ranges;
  std::map<std::string, double> numeric_references;       // training means
  std::map<std::string, std::string> categorical_references;  // first level
  int n_training_rows = 0;
  int n_participants = 0;
  std::uint64_t spec_hash = 0;

  bool has_random_intercept() const {
    return fit.variance_components.has_random_intercept;
  }
  const TermInfo* find_term(const std::string& label) const {
    for (const auto& t : terms)
      if (t.label == label) return &t;
    return nullptr;
  }
};

struct AssembledModel {
  Matrix design;
  Vector y;
  std::vector<PenaltyTerm> penalties;
  std::optional<std::vector<int>> grouping;
  int n_groups = 0;
  std::vector<TermInfo> terms;
  LongitudinalDataset data;  // rows actually used (baseline subset for 1a)
};

namespace detail {

inline std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

struct ColumnSource {
  const LongitudinalDataset* data = nullptr;
  const GridTable* grid = nullptr;

  int rows() const {
    return data ? data->n_rows() : grid->rows();
  }
  Vector numeric(const std::string& name) const {
    if (data) return data->column(name);
    auto it = grid->numeric.find(name);
    if (it == grid->numeric.end())
      throw ConfigError("grid is missing the model variable '" + name + "'");
    return it->second;
  }
  // categorical values as level codes resolved against the stored levels
  Vector codes(const std::string& name, const std::vector<std::string>& levels) const {
    if (data) {
      const Column& col = data->covariate(name);
      if (!levels.empty() && col.levels != levels)
        throw ConfigError("levels of factor '" + name +
                          "' do not match the ones the model was fitted with");
      return col.values;
    }
    auto it = grid->categorical.find(name);
    if (it == grid->categorical.end())
      throw ConfigError("grid is missing the factor '" + name + "'");
    Vector out(it->second.size());
    for (std::size_t i = 0; i < it->second.size(); ++i) {
      auto pos = std::find(levels.begin(), levels.end(), it->second[i]);
      if (pos == levels.end())
        throw ConfigError("level '" + it->second[i] + "' of '" + name +
                          "' was not present in the training data");
      out[static_cast<int>(i)] = static_cast<double>(pos - levels.begin());
    }
    return out;
  }
};

// Rebuilds the design columns of one term; the single construction path used
// for both fitting and prediction.
inline Matrix term_design(const TermInfo& info, const ColumnSource& src) {
  const int n = src.rows();
  switch (info.spec.kind) {
    case TermSpec::Kind::smooth: {
      CrSpline spline(info.knots1);
      Matrix d = spline.design(src.numeric(info.spec.var1));
      return d * info.constraint;
    }
    case TermSpec::Kind::varying_coefficient: {
      CrSpline spline(info.knots1);
      Matrix d = spline.design(src.numeric(info.spec.var1));
      Vector z = src.numeric(info.spec.var2).array() - info.by_offset;
      return d.array().colwise() * z.array();
    }
    case TermSpec::Kind::tensor_full: {
      CrSpline sx(info.knots1), sy(info.knots2);
      Matrix dx = sx.design(src.numeric(info.spec.var1));
      Matrix dy = sy.design(src.numeric(info.spec.var2));
      return row_products(dx, dy) * info.constraint;
    }
    case TermSpec::Kind::tensor_interaction: {
      CrSpline sx(info.knots1), sy(info.knots2);
      Matrix dx = sx.design(src.numeric(info.spec.var1)) * info.margin_constraint1;
      Matrix dy = sy.design(src.numeric(info.spec.var2)) * info.margin_constraint2;
      return row_products(dx, dy);
    }
    case TermSpec::Kind::factor_smooth: {
      CrSpline spline(info.knots1);
      Matrix d = spline.design(src.numeric(info.spec.var1)) * info.constraint;
      Vector codes = src.codes(info.spec.var2, info.factor_levels);
      Vector indicator(n);
      for (int i = 0; i < n; ++i)
        indicator[i] = (static_cast<int>(codes[i]) == info.factor_level) ? 1.0 : 0.0;
      return d.array().colwise() * indicator.array();
    }
    case TermSpec::Kind::parametric:
    case TermSpec::Kind::ordered_factor_main: {
      if (info.factor_levels.empty()) {
        Matrix d(n, 1);
        d.col(0) = src.numeric(info.spec.var1);
        return d;
      }
      Vector codes = src.codes(info.spec.var1, info.factor_levels);
      const int levels = static_cast<int>(info.factor_levels.size());
      Matrix d = Matrix::Zero(n, levels - 1);
      for (int i = 0; i < n; ++i) {
        const int c = static_cast<int>(codes[i]);
        if (c > 0) d(i, c - 1) = 1.0;
      }
      return d;
    }
    case TermSpec::Kind::random_intercept:
      return Matrix::Zero(n, 0);
  }
  throw SpecError("unhandled term kind");
}

}  // namespace detail

inline AssembledModel assemble(const ModelSpec& spec, const LongitudinalDataset& dataset) {
  spec.validate();
  if (!dataset.has_column(spec.outcome))
    throw SchemaError("outcome column '" + spec.outcome + "' not found");

  AssembledModel out;
  if (spec.baseline_only) {
    std::vector<int> rows;
    for (int i = 0; i < dataset.n_rows(); ++i)
      if (dataset.time_since_baseline[i] == 0.0) rows.push_back(i);
    out.data = dataset.subset(rows);
  } else {
    out.data = dataset;
  }
  const LongitudinalDataset& ds = out.data;
  const int n = ds.n_rows();

  detail::ColumnSource src{&ds, nullptr};
  std::vector<Matrix> columns;
  int col_at = 0;
  bool want_ri = false;

  // intercept first
  {
    TermInfo info;
    info.spec.kind = TermSpec::Kind::parametric;
    info.spec.var1 = "";
    info.label = "(Intercept)";
    info.col_start = 0;
    info.cols = 1;
    info.intercept = true;
    out.terms.push_back(info);
    columns.push_back(Matrix::Ones(n, 1));
    col_at = 1;
  }

  auto check_column = [&](const std::string& name, bool need_numeric) {
    if (!ds.has_column(name)) throw SchemaError("model variable '" + name + "' not found");
    if (need_numeric && ds.is_categorical(name))
      throw SpecError("model variable '" + name + "' must be numeric here");
  };

  for (const auto& t : spec.terms) {
    switch (t.kind) {
      case TermSpec::Kind::smooth: {
        check_column(t.var1, true);
        auto built = build_cr_basis(ds.column(t.var1), t.k1, {}, "s(" + t.var1 + ")");
        auto constrained = apply_sum_to_zero_constraint(built.block);
        TermInfo info;
        info.spec = t;
        info.label = "s(" + t.var1 + ")";
        info.col_start = col_at;
        info.cols = constrained.cols();
        info.knots1 = built.knots.knots;
        info.constraint = constrained.constraint_transform;
        info.null_space_dim = constrained.null_space_dim;
        info.penalty_block = static_cast<int>(out.penalties.size());
        PenaltyTerm pen;
        pen.col_start = col_at;
        pen.cols = constrained.cols();
        pen.matrices = {constrained.penalty()};
        pen.label = info.label;
        pen.lambda_labels = {info.label};
        out.penalties.push_back(std::move(pen));
        out.terms.push_back(std::move(info));
        columns.push_back(constrained.design);
        col_at += constrained.cols();
        break;
      }
      case TermSpec::Kind::varying_coefficient: {
        check_column(t.var1, true);
        check_column(t.var2, true);
        auto built = build_cr_basis(ds.column(t.var1), t.k1);
        TermInfo info;
        info.spec = t;
        info.label = "s(" + t.var1 + "):" + t.var2;
        info.col_start = col_at;
        info.cols = built.block.cols();
        info.knots1 = built.knots.knots;
        info.null_space_dim = built.block.null_space_dim;
        // center the interacting variable; the raw-scale columns of a
        // calendar-year cohort would be near-collinear with the main smooth
        info.by_offset = ds.column(t.var2).mean();
        info.penalty_block = static_cast<int>(out.penalties.size());
        PenaltyTerm pen;
        pen.col_start = col_at;
        pen.cols = built.block.cols();
        pen.matrices = {built.block.penalty()};
        pen.label = info.label;
        pen.lambda_labels = {info.label};
        out.penalties.push_back(std::move(pen));
        columns.push_back(detail::term_design(info, src));
        out.terms.push_back(std::move(info));
        col_at += built.block.cols();
        break;
      }
      case TermSpec::Kind::tensor_full:
      case TermSpec::Kind::tensor_interaction: {
        check_column(t.var1, true);
        check_column(t.var2, true);
        auto bx = build_cr_basis(ds.column(t.var1), t.k1);
        auto by = build_cr_basis(ds.column(t.var2), t.k2);
        const bool full = t.kind == TermSpec::Kind::tensor_full;
        TermInfo info;
        info.spec = t;
        info.label = (full ? "t2(" : "ti(") + t.var1 + "," + t.var2 + ")";
        info.col_start = col_at;
        info.knots1 = bx.knots.knots;
        info.knots2 = by.knots.knots;
        BasisBlock tensor;
        if (full) {
          tensor = tensor_product(bx.block, by.block, TensorMode::full);
          tensor = apply_sum_to_zero_constraint(tensor);
          info.constraint = tensor.constraint_transform;
        } else {
          auto cx = apply_sum_to_zero_constraint(bx.block);
          auto cy = apply_sum_to_zero_constraint(by.block);
          info.margin_constraint1 = cx.constraint_transform;
          info.margin_constraint2 = cy.constraint_transform;
          tensor = tensor_product(bx.block, by.block, TensorMode::interaction);
        }
        info.cols = tensor.cols();
        info.null_space_dim = tensor.null_space_dim;
        info.penalty_block = static_cast<int>(out.penalties.size());
        PenaltyTerm pen;
        pen.col_start = col_at;
        pen.cols = tensor.cols();
        pen.matrices = tensor.penalties;
        pen.label = info.label;
        pen.lambda_labels = {info.label + "[" + t.var1 + "]", info.label + "[" + t.var2 + "]"};
        out.penalties.push_back(std::move(pen));
        columns.push_back(tensor.design);
        out.terms.push_back(std::move(info));
        col_at += tensor.cols();
        break;
      }
      case TermSpec::Kind::factor_smooth: {
        check_column(t.var1, true);
        if (!ds.is_categorical(t.var2))
          throw SpecError("factor_smooth: '" + t.var2 + "' is not a factor");
        const Column& factor = ds.covariate(t.var2);
        if (!factor.ordered)
          throw SpecError("factor_smooth: '" + t.var2 +
                          "' must be an ordered factor; mark it ordered first");
        auto built = build_cr_basis(ds.column(t.var1), t.k1);
        auto constrained = apply_sum_to_zero_constraint(built.block);
        for (int level = 1; level < factor.n_levels(); ++level) {
          TermInfo info;
          info.spec = t;
          info.label = "s(" + t.var1 + "):" + t.var2 + factor.levels[level];
          info.col_start = col_at;
          info.cols = constrained.cols();
          info.knots1 = built.knots.knots;
          info.constraint = constrained.constraint_transform;
          info.null_space_dim = constrained.null_space_dim;
          info.factor_levels = factor.levels;
          info.factor_level = level;
          info.penalty_block = static_cast<int>(out.penalties.size());
          PenaltyTerm pen;
          pen.col_start = col_at;
          pen.cols = constrained.cols();
          pen.matrices = {constrained.penalty()};
          pen.label = info.label;
          pen.lambda_labels = {info.label};
          out.penalties.push_back(std::move(pen));
          columns.push_back(detail::term_design(info, src));
          out.terms.push_back(std::move(info));
          col_at += constrained.cols();
        }
        break;
      }
      case TermSpec::Kind::parametric:
      case TermSpec::Kind::ordered_factor_main: {
        if (!ds.has_column(t.var1))
          throw SchemaError("model variable '" + t.var1 + "' not found");
        TermInfo info;
        info.spec = t;
        if (ds.is_categorical(t.var1)) {
          const Column& col = ds.covariate(t.var1);
          if (t.kind == TermSpec::Kind::ordered_factor_main && !col.ordered)
            throw SpecError("ordered_factor_main: '" + t.var1 + "' is not ordered");
          info.factor_levels = col.levels;
          info.cols = col.n_levels() - 1;
          info.label = t.var1;
        } else {
          if (t.kind == TermSpec::Kind::ordered_factor_main)
            throw SpecError("ordered_factor_main: '" + t.var1 + "' is not a factor");
          info.cols = 1;
          info.label = t.var1;
        }
        if (info.cols == 0) break;  // single-level factor contributes nothing
        info.col_start = col_at;
        columns.push_back(detail::term_design(info, src));
        out.terms.push_back(std::move(info));
        col_at += columns.back().cols();
        break;
      }
      case TermSpec::Kind::random_intercept:
        want_ri = true;
        break;
    }
  }

  out.design.resize(n, col_at);
  for (std::size_t i = 0, at = 0; i < columns.size(); ++i) {
    out.design.middleCols(at, columns[i].cols()) = columns[i];
    at += columns[i].cols();
  }
  out.y = ds.column(spec.outcome);
  if (want_ri) {
    out.grouping = ds.group_of_row;
    out.n_groups = ds.n_participants();
  }
  return out;
}

inline FittedModel fit_model(const LongitudinalDataset& dataset, const ModelSpec& spec,
                             const RemlOptions& options = {}) {
  AssembledModel assembled = assemble(spec, dataset);
  RemlData data;
  data.design = std::move(assembled.design);
  data.y = std::move(assembled.y);
  data.penalties = assembled.penalties;
  data.grouping = assembled.grouping;
  data.n_groups = assembled.n_groups;

  FittedModel out;
  out.fit = fit_reml(data, options);
  out.spec = spec;
  out.outcome_name = spec.outcome;
  out.terms = std::move(assembled.terms);
  out.n_training_rows = assembled.data.n_rows();
  out.n_participants = assembled.data.n_participants();
  out.spec_hash = detail::fnv1a(spec_to_text(spec));

  auto note_range = [&](const std::string& name) {
    if (name.empty() || out.variable_ranges.count(name)) return;
    if (!assembled.data.has_column(name) || assembled.data.is_categorical(name)) return;
    const Vector& v = assembled.data.column(name);
    out.variable_ranges[name] = {v.minCoeff(), v.maxCoeff()};
    out.numeric_references[name] = v.mean();
  };
  for (const auto& t : spec.terms) {
    if (t.kind == TermSpec::Kind::random_intercept) continue;
    note_range(t.var1);
    if (!t.var2.empty()) note_range(t.var2);
  }
  for (const auto& name : assembled.data.covariate_names) {
    const Column& col = assembled.data.covariates.at(name);
    if (col.is_categorical())
      out.categorical_references[name] = col.levels.front();
    else
      out.numeric_references[name] = col.values.mean();
  }
  return out;
}

struct Prediction {
  Vector estimate;
  Vector se;
  std::vector<bool> extrapolated;  // per grid row
  std::vector<std::string> warnings;
};

namespace detail {

// sqrt of the quadratic form row_i' C row_i, clamped at zero
inline double row_se(const Matrix& design, int i, const Matrix& cov) {
  const double q = (design.row(i) * cov).dot(design.row(i));
  return std::sqrt(std::max(0.0, q));
}

inline Matrix build_design(const FittedModel& model, const GridTable& grid,
                           const std::vector<bool>* term_mask = nullptr) {
  const int n = grid.rows();
  Matrix design = Matrix::Zero(n, model.fit.n_cols);
  ColumnSource src{nullptr, &grid};
  for (std::size_t i = 0; i < model.terms.size(); ++i) {
    if (term_mask && !(*term_mask)[i]) continue;
    const TermInfo& info = model.terms[i];
    if (info.intercept) {
      design.col(0).setOnes();
      continue;
    }
    design.middleCols(info.col_start, info.cols) = term_design(info, src);
  }
  return design;
}

}  // namespace detail

// Population-level prediction: excludes the random intercept.
inline Prediction predict(const FittedModel& model, const GridTable& grid) {
  Matrix design = detail::build_design(model, grid);
  Prediction out;
  out.estimate = design * model.fit.beta;
  out.se.resize(design.rows());
  for (int i = 0; i < design.rows(); ++i)
    out.se[i] = detail::row_se(design, i, model.fit.covariance);
  out.extrapolated.assign(design.rows(), false);
  std::vector<std::string> flagged;
  for (const auto& [name, range] : model.variable_ranges) {
    auto it = grid.numeric.find(name);
    if (it == grid.numeric.end()) continue;
    bool var_flagged = false;
    for (int i = 0; i < it->second.size(); ++i) {
      if (it->second[i] < range.first || it->second[i] > range.second) {
        out.extrapolated[i] = true;
        var_flagged = true;
      }
    }
    if (var_flagged) flagged.push_back(name);
  }
  for (const auto& name : flagged)
    out.warnings.push_back("grid extends beyond the training range of '" + name + "'");
  return out;
}

struct EffectCurve {
  Vector abscissa;
  Vector estimate;
  Vector pointwise_se;
};

inline void write_effect_csv(std::ostream& out, const EffectCurve& curve, double level = 0.95,
                             const std::string& abscissa_name = "abscissa") {
  const double z = normal_quantile(0.5 + level / 2.0);
  write_csv_row(out, {abscissa_name, "estimate", "se", "lower", "upper"});
  for (int i = 0; i < curve.abscissa.size(); ++i) {
    const double e = curve.estimate[i], s = curve.pointwise_se[i];
    write_csv_row(out, {format_full(curve.abscissa[i]), format_full(e), format_full(s),
                        format_full(e - z * s), format_full(e + z * s)});
  }
}

namespace detail {

inline char variant_family(const std::string& variant) {
  if (variant.empty()) throw ConfigError("effect extraction needs a canonical model variant");
  const char f = variant[0];
  if (f != '1' && f != '2' && f != '3')
    throw ConfigError("unknown model variant '" + variant + "'");
  return f;
}

// reference values for every model variable except the ones the caller pins
inline GridTable reference_grid(const FittedModel& model, int rows,
                                const std::vector<std::string>& skip) {
  GridTable grid;
  auto skipped = [&](const std::string& name) {
    return std::find(skip.begin(), skip.end(), name) != skip.end();
  };
  auto add = [&](const std::string& name) {
    if (name.empty() || grid.has(name) || skipped(name)) return;
    if (auto it = model.numeric_references.find(name); it != model.numeric_references.end())
      grid.set(name, Vector::Constant(rows, it->second));
    else if (auto ct = model.categorical_references.find(name);
             ct != model.categorical_references.end())
      grid.set(name, std::vector<std::string>(rows, ct->second));
    else
      grid.set(name, Vector::Constant(rows, 0.0));  // derived variables pinned by caller
  };
  for (const auto& t : model.spec.terms) {
    if (t.kind == TermSpec::Kind::random_intercept) continue;
    add(t.var1);
    if (!t.var2.empty()) add(t.var2);
  }
  return grid;
}

}  // namespace detail

// Expected outcome change after t years for a participant with the given
// baseline age (and birth cohort, for the age-cohort family), anchored at
// exactly zero for t = 0.
inline EffectCurve longitudinal_effect(const FittedModel& model, const std::string& variant,
                                       double baseline_age, std::optional<double> cohort,
                                       double horizon, double step = 0.1) {
  if (!(horizon > 0.0)) throw ConfigError("horizon must be positive");
  const char family = detail::variant_family(variant);
  if (family == '3' && !cohort)
    throw ConfigError("variant " + variant + " needs a birth cohort for longitudinal effects");

  const int n = static_cast<int>(std::floor(horizon / step + 1e-9)) + 1;
  Vector t_grid(n);
  for (int i = 0; i < n; ++i) t_grid[i] = i * step;

  GridTable at_t, at_zero;
  if (family == '2') {
    at_t = detail::reference_grid(model, n, {"baseline_age", "time"});
    at_t.set("baseline_age", Vector::Constant(n, baseline_age));
    at_t.set("time", t_grid);
    at_zero = at_t;
    at_zero.set("time", Vector::Zero(n));
  } else {
    std::vector<std::string> pinned = {"age"};
    if (family == '3') pinned.push_back("birth_date");
    at_t = detail::reference_grid(model, n, pinned);
    Vector ages = t_grid.array() + baseline_age;
    at_t.set("age", ages);
    if (family == '3') at_t.set("birth_date", Vector::Constant(n, *cohort));
    at_zero = at_t;
    at_zero.set("age", Vector::Constant(n, baseline_age));
  }

  Matrix d_t = detail::build_design(model, at_t);
  Matrix d_0 = detail::build_design(model, at_zero);
  Matrix contrast = d_t - d_0;
  EffectCurve curve;
  curve.abscissa = t_grid;
  curve.estimate = contrast * model.fit.beta;
  curve.pointwise_se.resize(n);
  for (int i = 0; i < n; ++i)
    curve.pointwise_se[i] = detail::row_se(contrast, i, model.fit.covariance);
  return curve;
}

// Age differences across participants at a fixed calendar date: the summed
// contribution of the age and cohort terms (covariates and intercept excluded).
inline EffectCurve cross_sectional_effect(const FittedModel& model, const std::string& variant,
                                          std::optional<double> date, const Vector& age_grid) {
  const char family = detail::variant_family(variant);
  if (family == '3' && !date)
    throw ConfigError("variant " + variant + " needs a calendar date for cross-sectional effects");
  const int n = static_cast<int>(age_grid.size());

  GridTable grid;
  if (family == '2') {
    grid = detail::reference_grid(model, n, {"baseline_age", "time"});
    grid.set("baseline_age", age_grid);
    grid.set("time", Vector::Zero(n));
  } else {
    std::vector<std::string> pinned = {"age"};
    if (family == '3') pinned.push_back("birth_date");
    grid = detail::reference_grid(model, n, pinned);
    grid.set("age", age_grid);
    if (family == '3') {
      Vector cohorts = Vector::Constant(n, *date) - age_grid;
      grid.set("birth_date", cohorts);
    }
  }

  // age and cohort terms only
  const std::vector<std::string> core = {"age", "baseline_age", "time", "birth_date"};
  std::vector<bool> mask(model.terms.size(), false);
  for (std::size_t i = 0; i < model.terms.size(); ++i) {
    const TermInfo& info = model.terms[i];
    if (info.intercept) continue;
    auto is_core = [&](const std::string& v) {
      return v.empty() || std::find(core.begin(), core.end(), v) != core.end();
    };
    if (!info.spec.var1.empty() && is_core(info.spec.var1) && is_core(info.spec.var2))
      mask[i] = true;
  }

  Matrix design = detail::build_design(model, grid, &mask);
  EffectCurve curve;
  curve.abscissa = age_grid;
  curve.estimate = design * model.fit.beta;
  curve.pointwise_se.resize(n);
  for (int i = 0; i < n; ++i)
    curve.pointwise_se[i] = detail::row_se(design, i, model.fit.covariance);
  return curve;
}

}  // namespace gammtk
