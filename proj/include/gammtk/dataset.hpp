#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <istream>
#include <map>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "gammtk/csv.hpp"
#include "gammtk/errors.hpp"

namespace gammtk {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;

// Days from 1970-01-01 for a proleptic Gregorian calendar date.
inline std::int64_t days_from_civil(int y, int m, int d) {
  y -= m <= 2;
  const std::int64_t era = (y >= 0 ? y : y - 399) / 400;
  const unsigned yoe = static_cast<unsigned>(y - era * 400);
  const unsigned doy = (153u * (m + (m > 2 ? -3 : 9)) + 2u) / 5u + d - 1;
  const unsigned doe = yoe * 365 + yoe / 4 - yoe / 100 + doy;
  return era * 146097 + static_cast<std::int64_t>(doe) - 719468;
}

// Dates are stored as decimal calendar years.  ISO-8601 inputs are converted
// by day count / 365.25 from 1970-01-01; plain numbers are taken as decimal
// years directly.  Only differences of dates and ages enter any model, so the
// origin choice is immaterial.
inline bool parse_date(const std::string& s, double& out) {
  if (parse_double(s, out)) return true;
  if (s.size() == 10 && s[4] == '-' && s[7] == '-') {
    int y = 0, m = 0, d = 0;
    try {
      y = std::stoi(s.substr(0, 4));
      m = std::stoi(s.substr(5, 2));
      d = std::stoi(s.substr(8, 2));
    } catch (...) {
      return false;
    }
    if (m < 1 || m > 12 || d < 1 || d > 31) return false;
    out = 1970.0 + static_cast<double>(days_from_civil(y, m, d)) / 365.25;
    return true;
  }
  return false;
}

struct Column {
  enum class Type { numeric, categorical };
  Type type = Type::numeric;
  Vector values;                    // numeric values, or level codes as doubles
  std::vector<std::string> levels;  // categorical only, sorted lexicographically
  bool ordered = false;

  bool is_categorical() const { return type == Type::categorical; }
  int n_levels() const { return static_cast<int>(levels.size()); }
};

struct ObservationRow {
  std::string participant_id;
  double age = 0.0;
  double measurement_date = 0.0;
  double outcome = 0.0;
  std::map<std::string, double> numeric_covariates;
  std::map<std::string, std::string> categorical_covariates;
};

struct Schema {
  std::string participant = "id";
  std::string age = "age";
  std::string date = "date";
  std::string outcome = "outcome";
  // empty: every remaining column becomes a covariate
  std::vector<std::string> covariates;
  std::vector<std::string> ordered_factors;
};

struct StandardizationInfo {
  double mean = 0.0;
  double sd = 1.0;
};

class LongitudinalDataset {
 public:
  std::vector<std::string> participant_id;  // per row
  Vector age, measurement_date, outcome;
  Vector baseline_age, time_since_baseline, birth_date;
  std::string outcome_name = "outcome";

  std::vector<std::string> covariate_names;  // deterministic order
  std::map<std::string, Column> covariates;

  std::vector<std::string> participants;              // first-appearance order
  std::vector<std::vector<int>> participant_rows;     // row indices per participant
  std::vector<int> group_of_row;                      // participant index per row
  std::map<std::string, StandardizationInfo> standardization;

  int n_rows() const { return static_cast<int>(age.size()); }
  int n_participants() const { return static_cast<int>(participants.size()); }
  std::vector<int> timepoints_per_participant() const {
    std::vector<int> m(participants.size());
    for (std::size_t i = 0; i < participant_rows.size(); ++i)
      m[i] = static_cast<int>(participant_rows[i].size());
    return m;
  }

  bool has_column(const std::string& name) const {
    if (name == "age" || name == "baseline_age" || name == "time" ||
        name == "birth_date" || name == outcome_name)
      return true;
    return covariates.count(name) > 0;
  }

  // Resolves derived variables, the outcome, and covariates by name.
  const Vector& column(const std::string& name) const {
    if (name == "age") return age;
    if (name == "baseline_age") return baseline_age;
    if (name == "time") return time_since_baseline;
    if (name == "birth_date") return birth_date;
    if (name == outcome_name) return outcome;
    auto it = covariates.find(name);
    if (it == covariates.end()) throw SchemaError("unknown column '" + name + "'");
    return it->second.values;
  }

  bool is_categorical(const std::string& name) const {
    auto it = covariates.find(name);
    return it != covariates.end() && it->second.is_categorical();
  }

  const Column& covariate(const std::string& name) const {
    auto it = covariates.find(name);
    if (it == covariates.end()) throw SchemaError("unknown covariate '" + name + "'");
    return it->second;
  }

  void set_ordered(const std::string& name) {
    auto it = covariates.find(name);
    if (it == covariates.end()) throw SchemaError("unknown covariate '" + name + "'");
    if (!it->second.is_categorical())
      throw SpecError("covariate '" + name + "' is numeric; only factors can be ordered");
    it->second.ordered = true;
  }

  // Keeps the given rows (in order) and rebuilds the participant grouping.
  LongitudinalDataset subset(const std::vector<int>& rows) const;
};

namespace detail {

inline void finalize_dataset(LongitudinalDataset& ds) {
  const int n = ds.n_rows();
  ds.baseline_age.resize(n);
  ds.time_since_baseline.resize(n);
  ds.birth_date.resize(n);
  ds.group_of_row.assign(n, -1);
  for (std::size_t g = 0; g < ds.participant_rows.size(); ++g) {
    auto& rows = ds.participant_rows[g];
    std::stable_sort(rows.begin(), rows.end(),
                     [&](int a, int b) { return ds.age[a] < ds.age[b]; });
    const int first = rows.front();
    const double a1 = ds.age[first];
    const double c1 = ds.measurement_date[first] - ds.age[first];
    for (int r : rows) {
      ds.group_of_row[r] = static_cast<int>(g);
      ds.baseline_age[r] = a1;
      const double t = ds.age[r] - a1;
      if (t < 0.0 || !std::isfinite(t))
        throw ConsistencyError("participant '" + ds.participants[g] +
                               "': negative time since baseline after sorting");
      ds.time_since_baseline[r] = t;
      const double c = ds.measurement_date[r] - ds.age[r];
      if (std::abs(c - c1) > 1e-6)
        throw ConsistencyError("participant '" + ds.participants[g] +
                               "': birth date differs by more than 1e-6 years across rows (" +
                               format_full(c1) + " vs " + format_full(c) + ")");
      ds.birth_date[r] = c;
    }
  }
}

inline void check_row(const std::string& id, double age, double date, double outcome,
                      std::size_t row_no) {
  if (!(age > 0.0) || !std::isfinite(age))
    throw ParseError("row " + std::to_string(row_no) + " (participant '" + id +
                     "'): age must be finite and positive");
  if (!std::isfinite(date))
    throw ParseError("row " + std::to_string(row_no) + ": measurement date must be finite");
  if (!std::isfinite(outcome))
    throw ParseError("row " + std::to_string(row_no) + ": outcome must be finite");
}

}  // namespace detail

inline LongitudinalDataset LongitudinalDataset::subset(const std::vector<int>& rows) const {
  LongitudinalDataset out;
  const int n = static_cast<int>(rows.size());
  out.outcome_name = outcome_name;
  out.age.resize(n);
  out.measurement_date.resize(n);
  out.outcome.resize(n);
  out.participant_id.resize(n);
  for (int i = 0; i < n; ++i) {
    out.age[i] = age[rows[i]];
    out.measurement_date[i] = measurement_date[rows[i]];
    out.outcome[i] = outcome[rows[i]];
    out.participant_id[i] = participant_id[rows[i]];
  }
  out.covariate_names = covariate_names;
  for (const auto& name : covariate_names) {
    const Column& src = covariates.at(name);
    Column col = src;
    col.values.resize(n);
    for (int i = 0; i < n; ++i) col.values[i] = src.values[rows[i]];
    out.covariates[name] = std::move(col);
  }
  std::unordered_map<std::string, int> index;
  for (int i = 0; i < n; ++i) {
    auto [it, inserted] = index.emplace(out.participant_id[i],
                                        static_cast<int>(out.participants.size()));
    if (inserted) {
      out.participants.push_back(out.participant_id[i]);
      out.participant_rows.emplace_back();
    }
    out.participant_rows[it->second].push_back(i);
  }
  out.standardization = standardization;
  detail::finalize_dataset(out);
  return out;
}

inline LongitudinalDataset dataset_from_rows(const std::vector<ObservationRow>& rows,
                                             const std::string& outcome_name = "outcome") {
  LongitudinalDataset ds;
  const int n = static_cast<int>(rows.size());
  ds.outcome_name = outcome_name;
  ds.age.resize(n);
  ds.measurement_date.resize(n);
  ds.outcome.resize(n);
  ds.participant_id.resize(n);

  std::map<std::string, bool> cov_is_cat;
  for (const auto& r : rows) {
    for (const auto& [k, v] : r.numeric_covariates) { (void)v; cov_is_cat[k] = false; }
    for (const auto& [k, v] : r.categorical_covariates) { (void)v; cov_is_cat[k] = true; }
  }

  std::unordered_map<std::string, int> index;
  for (int i = 0; i < n; ++i) {
    const auto& r = rows[i];
    detail::check_row(r.participant_id, r.age, r.measurement_date, r.outcome, i + 2);
    ds.age[i] = r.age;
    ds.measurement_date[i] = r.measurement_date;
    ds.outcome[i] = r.outcome;
    ds.participant_id[i] = r.participant_id;
    auto [it, inserted] =
        index.emplace(r.participant_id, static_cast<int>(ds.participants.size()));
    if (inserted) {
      ds.participants.push_back(r.participant_id);
      ds.participant_rows.emplace_back();
    }
    ds.participant_rows[it->second].push_back(i);
  }

  for (const auto& [name, is_cat] : cov_is_cat) {
    Column col;
    ds.covariate_names.push_back(name);
    if (is_cat) {
      col.type = Column::Type::categorical;
      std::vector<std::string> labels(n);
      for (int i = 0; i < n; ++i) {
        auto it = rows[i].categorical_covariates.find(name);
        if (it == rows[i].categorical_covariates.end())
          throw SchemaError("covariate '" + name + "' missing on row " + std::to_string(i + 2));
        labels[i] = it->second;
      }
      col.levels = labels;
      std::sort(col.levels.begin(), col.levels.end());
      col.levels.erase(std::unique(col.levels.begin(), col.levels.end()), col.levels.end());
      col.values.resize(n);
      for (int i = 0; i < n; ++i) {
        auto pos = std::lower_bound(col.levels.begin(), col.levels.end(), labels[i]);
        col.values[i] = static_cast<double>(pos - col.levels.begin());
      }
    } else {
      col.values.resize(n);
      for (int i = 0; i < n; ++i) {
        auto it = rows[i].numeric_covariates.find(name);
        if (it == rows[i].numeric_covariates.end())
          throw SchemaError("covariate '" + name + "' missing on row " + std::to_string(i + 2));
        col.values[i] = it->second;
      }
    }
    ds.covariates[name] = std::move(col);
  }

  detail::finalize_dataset(ds);
  return ds;
}

inline LongitudinalDataset load_dataset(std::istream& in, const Schema& schema) {
  CsvTable table = read_csv(in);

  auto require = [&](const std::string& name) {
    int j = table.column_index(name);
    if (j < 0) throw SchemaError("required column '" + name + "' not found in header");
    return j;
  };
  const int j_id = require(schema.participant);
  const int j_age = require(schema.age);
  const int j_date = require(schema.date);
  const int j_out = require(schema.outcome);

  std::vector<std::string> cov_names = schema.covariates;
  if (cov_names.empty()) {
    for (const auto& h : table.header)
      if (h != schema.participant && h != schema.age && h != schema.date && h != schema.outcome)
        cov_names.push_back(h);
  }
  std::vector<int> cov_idx;
  for (const auto& name : cov_names) cov_idx.push_back(require(name));

  // numeric unless any value fails to parse
  std::vector<bool> cov_numeric(cov_names.size(), true);
  for (const auto& row : table.rows) {
    for (std::size_t c = 0; c < cov_idx.size(); ++c) {
      double v;
      if (cov_numeric[c] && !parse_double(row[cov_idx[c]], v)) cov_numeric[c] = false;
    }
  }

  std::vector<ObservationRow> rows;
  rows.reserve(table.rows.size());
  std::size_t row_no = 1;
  for (const auto& raw : table.rows) {
    ++row_no;
    ObservationRow r;
    r.participant_id = raw[j_id];
    if (r.participant_id.empty())
      throw ParseError("row " + std::to_string(row_no) + ": empty participant id");
    if (!parse_double(raw[j_age], r.age))
      throw ParseError("row " + std::to_string(row_no) + ": cannot parse age '" +
                       raw[j_age] + "'");
    if (!parse_date(raw[j_date], r.measurement_date))
      throw ParseError("row " + std::to_string(row_no) + ": cannot parse date '" +
                       raw[j_date] + "' (expect decimal years or YYYY-MM-DD)");
    if (!parse_double(raw[j_out], r.outcome))
      throw ParseError("row " + std::to_string(row_no) + ": cannot parse outcome '" +
                       raw[j_out] + "'");
    detail::check_row(r.participant_id, r.age, r.measurement_date, r.outcome, row_no);
    for (std::size_t c = 0; c < cov_names.size(); ++c) {
      if (cov_numeric[c]) {
        double v;
        parse_double(raw[cov_idx[c]], v);
        r.numeric_covariates[cov_names[c]] = v;
      } else {
        r.categorical_covariates[cov_names[c]] = raw[cov_idx[c]];
      }
    }
    rows.push_back(std::move(r));
  }

  LongitudinalDataset ds = dataset_from_rows(rows, schema.outcome);
  for (const auto& name : schema.ordered_factors) ds.set_ordered(name);
  return ds;
}

inline void write_dataset(std::ostream& out, const LongitudinalDataset& ds) {
  std::vector<std::string> header = {"id", "age", "date", ds.outcome_name};
  for (const auto& name : ds.covariate_names) header.push_back(name);
  write_csv_row(out, header);
  for (int i = 0; i < ds.n_rows(); ++i) {
    std::vector<std::string> row = {ds.participant_id[i], format_full(ds.age[i]),
                                    format_full(ds.measurement_date[i]),
                                    format_full(ds.outcome[i])};
    for (const auto& name : ds.covariate_names) {
      const Column& col = ds.covariates.at(name);
      if (col.is_categorical())
        row.push_back(col.levels[static_cast<int>(col.values[i])]);
      else
        row.push_back(format_full(col.values[i]));
    }
    write_csv_row(out, row);
  }
}

// Rescales a numeric covariate to zero mean and unit (n-1) standard deviation.
// The original mean/SD are retained for back-transformation of coefficients.
inline LongitudinalDataset standardize_covariate(const LongitudinalDataset& input,
                                                 const std::string& name) {
  auto it = input.covariates.find(name);
  if (it == input.covariates.end()) throw SchemaError("unknown covariate '" + name + "'");
  if (it->second.is_categorical())
    throw SpecError("covariate '" + name + "' is categorical; cannot standardize");
  const Vector& v = it->second.values;
  const int n = static_cast<int>(v.size());
  if (n < 2) throw DegenerateError("covariate '" + name + "': need at least 2 rows");
  const double mean = v.mean();
  const double ss = (v.array() - mean).square().sum();
  const double sd = std::sqrt(ss / (n - 1));
  if (!(sd > 0.0))
    throw DegenerateError("covariate '" + name + "' has zero variance; cannot standardize");
  LongitudinalDataset out = input;
  out.covariates[name].values = (v.array() - mean) / sd;
  out.standardization[name] = {mean, sd};
  return out;
}

}  // namespace gammtk
