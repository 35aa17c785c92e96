#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "gammtk/dist.hpp"
#include "gammtk/model.hpp"
#include "gammtk/rng.hpp"

namespace gammtk {

struct PosteriorCurveSample {
  Matrix draws;  // n_draws x grid points
  Vector grid;
  std::uint64_t seed = 0;
  Vector estimate;  // point prediction on the same grid
  Vector se;
};

struct IntervalEstimate {
  enum class Kind { pointwise, simultaneous, hdi };
  Vector lower, upper;  // per grid point (single entry for scalar intervals)
  double level = 0.95;
  Kind kind = Kind::pointwise;
  double multiplier = 0.0;  // critical value used for band kinds
};

namespace detail {

// Pivoted Cholesky-style factor of a symmetric PSD matrix, with one ridge
// retry: covariance matrices arriving here can be numerically semi-definite
// after constraint reparameterizations.
inline Matrix psd_factor(const Matrix& cov) {
  auto attempt = [](const Matrix& m, Matrix& out) {
    Eigen::LDLT<Matrix> ldlt(m);
    if (ldlt.info() != Eigen::Success) return false;
    Vector d = ldlt.vectorD();
    const double scale = std::max(d.cwiseAbs().maxCoeff(), 1e-300);
    for (int i = 0; i < d.size(); ++i) {
      if (d[i] < -1e-8 * scale) return false;
      d[i] = std::sqrt(std::max(d[i], 0.0));
    }
    Matrix l = ldlt.matrixL();
    out = ldlt.transpositionsP().transpose() * (l * d.asDiagonal());
    return true;
  };
  Matrix factor;
  if (attempt(cov, factor)) return factor;
  const double ridge = 1e-10 * cov.trace() / cov.rows();
  Matrix ridged = cov + ridge * Matrix::Identity(cov.rows(), cov.cols());
  if (attempt(ridged, factor)) return factor;
  throw NumericError("posterior covariance factorization failed even after ridge retry");
}

template <typename Fn>
inline void parallel_for(int n, int jobs, Fn&& fn) {
  if (jobs <= 0) jobs = static_cast<int>(std::thread::hardware_concurrency());
  jobs = std::max(1, std::min(jobs, n));
  if (jobs == 1) {
    for (int i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<int> next{0};
  std::vector<std::thread> workers;
  workers.reserve(jobs);
  for (int w = 0; w < jobs; ++w)
    workers.emplace_back([&] {
      for (int i = next.fetch_add(1); i < n; i = next.fetch_add(1)) fn(i);
    });
  for (auto& t : workers) t.join();
}

}  // namespace detail

// Draws coefficient vectors from N(beta_hat, cov) and evaluates the predicted
// curve on the grid.  Each draw uses its own substream derived from
// (seed, draw index), so results do not depend on how draws are partitioned
// across workers.
inline PosteriorCurveSample sample_posterior_curves(const FittedModel& model,
                                                    const GridTable& grid,
                                                    const Vector& abscissa, int n_draws,
                                                    std::uint64_t seed, int jobs = 1) {
  if (n_draws < 1) throw SpecError("need at least one posterior draw");
  Matrix design = detail::build_design(model, grid);
  const int p = static_cast<int>(design.cols());
  Matrix factor = detail::psd_factor(model.fit.covariance);
  Matrix projected = design * factor;  // grid x p

  PosteriorCurveSample out;
  out.grid = abscissa;
  out.seed = seed;
  out.estimate = design * model.fit.beta;
  out.se.resize(design.rows());
  for (int i = 0; i < design.rows(); ++i)
    out.se[i] = detail::row_se(design, i, model.fit.covariance);
  out.draws.resize(n_draws, design.rows());
  detail::parallel_for(n_draws, jobs, [&](int d) {
    Rng rng(derive_seed(seed, static_cast<std::uint64_t>(d)));
    Vector eps(p);
    for (int i = 0; i < p; ++i) eps[i] = rng.normal();
    out.draws.row(d) = (out.estimate + projected * eps).transpose();
  });
  return out;
}

inline IntervalEstimate pointwise_band(const Vector& estimate, const Vector& se, double level) {
  if (!(level > 0.0 && level < 1.0)) throw SpecError("level must be inside (0, 1)");
  const double z = normal_quantile(0.5 + level / 2.0);
  IntervalEstimate out;
  out.kind = IntervalEstimate::Kind::pointwise;
  out.level = level;
  out.multiplier = z;
  out.lower = estimate - z * se;
  out.upper = estimate + z * se;
  return out;
}

inline IntervalEstimate pointwise_band(const PosteriorCurveSample& sample, double level) {
  return pointwise_band(sample.estimate, sample.se, level);
}

// Simulation-based simultaneous band: the critical value is the level-quantile
// of the maximum standardized deviation over the grid, never below the
// pointwise multiplier.
inline IntervalEstimate simultaneous_band(const PosteriorCurveSample& sample, double level) {
  if (!(level > 0.0 && level < 1.0)) throw SpecError("level must be inside (0, 1)");
  const int n_draws = static_cast<int>(sample.draws.rows());
  const int g = static_cast<int>(sample.draws.cols());
  std::vector<double> max_dev(n_draws, 0.0);
  for (int d = 0; d < n_draws; ++d) {
    double m = 0.0;
    for (int j = 0; j < g; ++j) {
      if (sample.se[j] <= 0.0) continue;
      m = std::max(m, std::abs(sample.draws(d, j) - sample.estimate[j]) / sample.se[j]);
    }
    max_dev[d] = m;
  }
  std::sort(max_dev.begin(), max_dev.end());
  const int idx = std::min(n_draws - 1,
                           static_cast<int>(std::ceil(level * n_draws)) - 1);
  const double z = normal_quantile(0.5 + level / 2.0);
  const double crit = std::max(max_dev[std::max(idx, 0)], z);

  IntervalEstimate out;
  out.kind = IntervalEstimate::Kind::simultaneous;
  out.level = level;
  out.multiplier = crit;
  out.lower = sample.estimate - crit * sample.se;
  out.upper = sample.estimate + crit * sample.se;
  return out;
}

inline IntervalEstimate simultaneous_band(const FittedModel& model, const GridTable& grid,
                                          const Vector& abscissa, double level,
                                          int n_draws = 10000, std::uint64_t seed = 1,
                                          int jobs = 1) {
  return simultaneous_band(sample_posterior_curves(model, grid, abscissa, n_draws, seed, jobs),
                           level);
}

// Shortest interval containing `level` posterior mass of an empirical sample.
// Exact for unimodal samples; multimodal samples get the shortest single
// window, which may overstate one mode.
inline IntervalEstimate hdi(std::vector<double> sample, double level = 0.95) {
  if (sample.empty()) throw SpecError("empty sample for HDI");
  if (!(level > 0.0 && level < 1.0)) throw SpecError("level must be inside (0, 1)");
  std::sort(sample.begin(), sample.end());
  const int n = static_cast<int>(sample.size());
  const int window = std::min(n, std::max(1, static_cast<int>(std::ceil(level * n))));
  int best = 0;
  double best_width = sample[window - 1] - sample[0];
  for (int i = 1; i + window <= n; ++i) {
    const double width = sample[i + window - 1] - sample[i];
    if (width < best_width) {
      best_width = width;
      best = i;
    }
  }
  IntervalEstimate out;
  out.kind = IntervalEstimate::Kind::hdi;
  out.level = level;
  out.lower = Vector::Constant(1, sample[best]);
  out.upper = Vector::Constant(1, sample[best + window - 1]);
  return out;
}

struct AgeAtMaxResult {
  std::vector<double> ages;  // argmax per posterior draw
  IntervalEstimate interval;
  double posterior_mean = 0.0;
};

// Location of the curve maximum per posterior draw; ties go to the youngest
// age on the grid.
inline AgeAtMaxResult age_at_max_distribution(const PosteriorCurveSample& sample,
                                              double level = 0.95) {
  const int n_draws = static_cast<int>(sample.draws.rows());
  const int g = static_cast<int>(sample.draws.cols());
  if (g == 0) throw SpecError("empty grid");
  AgeAtMaxResult out;
  out.ages.resize(n_draws);
  for (int d = 0; d < n_draws; ++d) {
    int arg = 0;
    double best = sample.draws(d, 0);
    for (int j = 1; j < g; ++j) {
      if (sample.draws(d, j) > best) {
        best = sample.draws(d, j);
        arg = j;
      }
    }
    out.ages[d] = sample.grid[arg];
  }
  out.interval = hdi(out.ages, level);
  double sum = 0.0;
  for (double a : out.ages) sum += a;
  out.posterior_mean = sum / n_draws;
  return out;
}

struct WaldTestResult {
  double statistic = 0.0;  // F-scale statistic
  double rank = 0.0;       // reference degrees of freedom
  double residual_df = 0.0;
  double p_value = 1.0;
};

// Wald approximation for a whole term: quadratic form in the term's posterior
// precision with pseudo-inverse rank set by the rounded edf, referred to an
// F distribution on (rank, residual df).
inline WaldTestResult wald_term_test(const FittedModel& model, const std::string& term_label) {
  const TermInfo* term = model.find_term(term_label);
  if (!term) throw SpecError("unknown term '" + term_label + "'");
  const Vector beta = model.fit.beta.segment(term->col_start, term->cols);
  const Matrix cov =
      model.fit.covariance.block(term->col_start, term->col_start, term->cols, term->cols);

  double edf = term->cols;
  if (term->penalty_block >= 0) edf = model.fit.edf_per_block[term->penalty_block];
  int rank = std::clamp(static_cast<int>(std::lround(edf)), 1, term->cols);

  Eigen::SelfAdjointEigenSolver<Matrix> es(cov);
  const Vector& ev = es.eigenvalues();
  double quad = 0.0;
  for (int i = 0; i < rank; ++i) {
    const int idx = term->cols - 1 - i;  // largest eigenvalues first
    if (ev[idx] <= 0.0) continue;
    const double proj = es.eigenvectors().col(idx).dot(beta);
    quad += proj * proj / ev[idx];
  }

  WaldTestResult out;
  out.rank = rank;
  out.residual_df = std::max(1.0, model.fit.residual_df());
  out.statistic = quad / rank;
  out.p_value = f_upper_tail(out.statistic, out.rank, out.residual_df);
  return out;
}

struct BasisDimensionCheck {
  double k_prime = 0.0;  // free coefficients of the term
  double edf = 0.0;
  double k_index = 0.0;
  double p_value = 1.0;
};

namespace detail {

inline double difference_variance_ratio(const Vector& residuals_in_order) {
  const int n = static_cast<int>(residuals_in_order.size());
  double diff2 = 0.0;
  for (int i = 0; i + 1 < n; ++i) {
    const double d = residuals_in_order[i + 1] - residuals_in_order[i];
    diff2 += d * d;
  }
  const double mean = residuals_in_order.mean();
  const double var = (residuals_in_order.array() - mean).square().sum() / n;
  return (diff2 / (2.0 * (n - 1))) / std::max(var, 1e-300);
}

}  // namespace detail

struct KIndexPermutation {
  double k_index = 0.0;
  double p_value = 1.0;
};

// k-index of residuals in covariate order: the variance estimated from first
// differences relative to the overall residual variance (~1 for white noise,
// below 1 when neighboring residuals share unmodeled signal).  The p-value
// comes from permuting the residual order.
inline KIndexPermutation k_index_permutation_test(const Vector& residuals_in_order,
                                                  int n_permutations, std::uint64_t seed) {
  KIndexPermutation out;
  out.k_index = detail::difference_variance_ratio(residuals_in_order);
  Rng rng(derive_seed(seed, 0x6b636865636bULL));
  int leq = 0;
  Vector shuffled = residuals_in_order;
  for (int p = 0; p < n_permutations; ++p) {
    for (int i = static_cast<int>(shuffled.size()) - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
      std::swap(shuffled[i], shuffled[j]);
    }
    if (detail::difference_variance_ratio(shuffled) <= out.k_index) ++leq;
  }
  out.p_value = (1.0 + leq) / (n_permutations + 1.0);
  return out;
}

// Residual-based check that the basis dimension k is large enough: residuals
// ordered by the covariate should look like white noise.  A small k-index with
// a small permutation p-value, together with edf close to k', signals that
// more splines are required.
inline BasisDimensionCheck basis_dimension_check(const FittedModel& model,
                                                 const LongitudinalDataset& dataset,
                                                 const std::string& term_label,
                                                 int n_permutations = 200,
                                                 std::uint64_t seed = 1) {
  const TermInfo* term = model.find_term(term_label);
  if (!term) throw SpecError("unknown term '" + term_label + "'");
  if (term->spec.kind != TermSpec::Kind::smooth)
    throw SpecError("basis dimension check applies to univariate smooth terms");

  // within-person residuals: remove the predicted random intercepts too
  const LongitudinalDataset* ds = &dataset;
  LongitudinalDataset baseline;
  if (model.spec.baseline_only) {
    std::vector<int> rows;
    for (int i = 0; i < dataset.n_rows(); ++i)
      if (dataset.time_since_baseline[i] == 0.0) rows.push_back(i);
    baseline = dataset.subset(rows);
    ds = &baseline;
  }
  detail::ColumnSource src{ds, nullptr};
  Matrix design = Matrix::Zero(ds->n_rows(), model.fit.n_cols);
  for (const auto& info : model.terms) {
    if (info.intercept) {
      design.col(0).setOnes();
      continue;
    }
    design.middleCols(info.col_start, info.cols) = detail::term_design(info, src);
  }
  Vector residuals = ds->column(model.outcome_name) - design * model.fit.beta;
  if (model.fit.random_intercepts.size() > 0) {
    for (int i = 0; i < ds->n_rows(); ++i)
      residuals[i] -= model.fit.random_intercepts[ds->group_of_row[i]];
  }

  const Vector& x = ds->column(term->spec.var1);
  std::vector<int> order(ds->n_rows());
  for (int i = 0; i < ds->n_rows(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return x[a] < x[b]; });
  Vector ordered(ds->n_rows());
  for (int i = 0; i < ds->n_rows(); ++i) ordered[i] = residuals[order[i]];

  BasisDimensionCheck out;
  out.k_prime = term->cols;
  out.edf = term->penalty_block >= 0 ? model.fit.edf_per_block[term->penalty_block]
                                     : static_cast<double>(term->cols);
  KIndexPermutation perm = k_index_permutation_test(ordered, n_permutations, seed);
  out.k_index = perm.k_index;
  out.p_value = perm.p_value;
  return out;
}

}  // namespace gammtk
