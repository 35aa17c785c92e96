#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gammtk/dataset.hpp"
#include "gammtk/errors.hpp"

namespace gammtk {

struct KnotVector {
  Vector knots;  // strictly increasing, length >= 3

  double a() const { return knots[0]; }
  double b() const { return knots[knots.size() - 1]; }
  int size() const { return static_cast<int>(knots.size()); }

  void validate() const {
    if (knots.size() < 3) throw SpecError("knot vector needs at least 3 knots");
    for (int j = 1; j < knots.size(); ++j)
      if (!(knots[j] > knots[j - 1]))
        throw SpecError("knot vector must be strictly increasing");
  }
};

// Design columns for one model term together with its penalty structure.
// Univariate smooths carry a single penalty matrix; tensor-product smooths
// carry one per margin, each with its own smoothing parameter.
struct BasisBlock {
  Matrix design;
  std::vector<Matrix> penalties;
  Matrix constraint_transform;  // raw-coefficient basis -> current columns; empty if none
  int null_space_dim = 0;
  std::string term_label;

  int cols() const { return static_cast<int>(design.cols()); }
  int rows() const { return static_cast<int>(design.rows()); }

  const Matrix& penalty() const {
    if (penalties.size() != 1)
      throw SpecError("term '" + term_label + "' does not have a single penalty matrix");
    return penalties[0];
  }

  // Sum of the penalty matrices; the combined wiggliness metric of the term.
  Matrix combined_penalty() const {
    Matrix s = penalties.at(0);
    for (std::size_t k = 1; k < penalties.size(); ++k) s += penalties[k];
    return s;
  }
};

namespace detail {

inline int count_null_dim(const Matrix& penalty, double rel_tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(penalty);
  const Vector& ev = es.eigenvalues();
  const double max_ev = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
  if (max_ev <= 0.0) return static_cast<int>(penalty.rows());
  int n = 0;
  for (int i = 0; i < ev.size(); ++i)
    if (ev[i] <= rel_tol * max_ev) ++n;
  return n;
}

inline void validate_penalty(const Matrix& s, const std::string& label) {
  if ((s - s.transpose()).cwiseAbs().maxCoeff() > 1e-12 * std::max(1.0, s.cwiseAbs().maxCoeff()))
    throw NumericError("penalty for '" + label + "' is not symmetric");
  Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
  const double max_ev = es.eigenvalues().maxCoeff();
  if (es.eigenvalues().minCoeff() < -1e-10 * std::max(max_ev, 1.0))
    throw NumericError("penalty for '" + label + "' has a negative eigenvalue");
}

}  // namespace detail

// Natural cubic spline in value parameterization: coefficient j is the value
// of the function at knot j.  Evaluation outside the knot range extends
// linearly, matching the natural boundary conditions.
class CrSpline {
 public:
  explicit CrSpline(const Vector& knots) : knots_(knots) {
    KnotVector{knots}.validate();
    const int k = static_cast<int>(knots.size());
    Vector h(k - 1);
    for (int j = 0; j < k - 1; ++j) h[j] = knots[j + 1] - knots[j];

    // D (k-2 x k): second differences; B (k-2 x k-2): Gram matrix of the
    // piecewise-linear hat functions carrying the second derivatives.
    Matrix d = Matrix::Zero(k - 2, k);
    Matrix b = Matrix::Zero(k - 2, k - 2);
    for (int i = 0; i < k - 2; ++i) {
      d(i, i) = 1.0 / h[i];
      d(i, i + 1) = -1.0 / h[i] - 1.0 / h[i + 1];
      d(i, i + 2) = 1.0 / h[i + 1];
      b(i, i) = (h[i] + h[i + 1]) / 3.0;
      if (i + 1 < k - 2) {
        b(i, i + 1) = h[i + 1] / 6.0;
        b(i + 1, i) = h[i + 1] / 6.0;
      }
    }
    Matrix binv_d = b.ldlt().solve(d);
    second_deriv_map_ = Matrix::Zero(k, k);
    second_deriv_map_.middleRows(1, k - 2) = binv_d;  // natural: f'' = 0 at ends
    penalty_ = d.transpose() * binv_d;
    penalty_ = 0.5 * (penalty_ + penalty_.transpose());
    h_ = h;
  }

  const Vector& knots() const { return knots_; }
  int size() const { return static_cast<int>(knots_.size()); }

  // beta' S beta equals the integral of the squared second derivative of the
  // interpolating natural cubic spline over [knots.front(), knots.back()].
  const Matrix& penalty() const { return penalty_; }

  Eigen::RowVectorXd row(double x) const {
    const int k = size();
    if (x < knots_[0]) return row_at(knots_[0], 0) + (x - knots_[0]) * deriv_row_at(knots_[0], 0);
    if (x > knots_[k - 1])
      return row_at(knots_[k - 1], k - 2) + (x - knots_[k - 1]) * deriv_row_at(knots_[k - 1], k - 2);
    return row_at(x, interval_of(x));
  }

  Eigen::RowVectorXd deriv_row(double x) const {
    const int k = size();
    if (x < knots_[0]) return deriv_row_at(knots_[0], 0);
    if (x > knots_[k - 1]) return deriv_row_at(knots_[k - 1], k - 2);
    return deriv_row_at(x, interval_of(x));
  }

  Matrix design(const Vector& x) const {
    Matrix out(x.size(), size());
    for (int i = 0; i < x.size(); ++i) out.row(i) = row(x[i]);
    return out;
  }

 private:
  int interval_of(double x) const {
    const int k = size();
    int j = static_cast<int>(std::upper_bound(knots_.data(), knots_.data() + k, x) -
                             knots_.data()) - 1;
    return std::clamp(j, 0, k - 2);
  }

  Eigen::RowVectorXd row_at(double x, int j) const {
    const double h = h_[j];
    const double xm = knots_[j + 1] - x;
    const double xp = x - knots_[j];
    const double am = xm / h;
    const double ap = xp / h;
    const double cm = (xm * xm * xm / h - h * xm) / 6.0;
    const double cp = (xp * xp * xp / h - h * xp) / 6.0;
    Eigen::RowVectorXd r = cm * second_deriv_map_.row(j) + cp * second_deriv_map_.row(j + 1);
    r[j] += am;
    r[j + 1] += ap;
    return r;
  }

  Eigen::RowVectorXd deriv_row_at(double x, int j) const {
    const double h = h_[j];
    const double xm = knots_[j + 1] - x;
    const double xp = x - knots_[j];
    const double dcm = (-3.0 * xm * xm / h + h) / 6.0;
    const double dcp = (3.0 * xp * xp / h - h) / 6.0;
    Eigen::RowVectorXd r = dcm * second_deriv_map_.row(j) + dcp * second_deriv_map_.row(j + 1);
    r[j] += -1.0 / h;
    r[j + 1] += 1.0 / h;
    return r;
  }

  Vector knots_;
  Vector h_;
  Matrix second_deriv_map_;
  Matrix penalty_;
};

// Knot placement: quantiles of the observed values with endpoints at min/max
// (or at the requested range).  Falls back to evenly spaced order statistics
// of the distinct values if quantiles collide.
inline Vector place_knots(const Vector& x, int k, std::optional<std::pair<double, double>> range = {}) {
  if (k < 3) throw SpecError("need at least 3 knots (k >= 3)");
  std::vector<double> sorted(x.data(), x.data() + x.size());
  std::sort(sorted.begin(), sorted.end());
  std::vector<double> uniq = sorted;
  uniq.erase(std::unique(uniq.begin(), uniq.end()), uniq.end());
  if (static_cast<int>(uniq.size()) < k)
    throw RankError("cannot place " + std::to_string(k) + " knots: only " +
                    std::to_string(uniq.size()) + " distinct values");

  auto quantile = [&](double p) {
    const double pos = p * (sorted.size() - 1);
    const std::size_t lo = static_cast<std::size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    if (lo + 1 >= sorted.size()) return sorted.back();
    return sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac;
  };

  Vector knots(k);
  for (int j = 0; j < k; ++j) knots[j] = quantile(static_cast<double>(j) / (k - 1));
  if (range) {
    knots[0] = range->first;
    knots[k - 1] = range->second;
  }
  bool strict = true;
  for (int j = 1; j < k; ++j)
    if (!(knots[j] > knots[j - 1])) strict = false;
  if (!strict) {
    for (int j = 0; j < k; ++j) {
      const double pos = static_cast<double>(j) * (uniq.size() - 1) / (k - 1);
      knots[j] = uniq[static_cast<std::size_t>(std::lround(pos))];
    }
    for (int j = 1; j < k; ++j)
      if (!(knots[j] > knots[j - 1]))
        throw RankError("could not place strictly increasing knots");
  }
  return knots;
}

struct CrBasisResult {
  BasisBlock block;
  KnotVector knots;
};

inline CrBasisResult build_cr_basis(const Vector& x, int k,
                                    std::optional<std::pair<double, double>> range = {},
                                    const std::string& label = "s") {
  Vector knots = place_knots(x, k, range);
  CrSpline spline(knots);
  BasisBlock block;
  block.design = spline.design(x);
  block.penalties = {spline.penalty()};
  block.null_space_dim = 2;  // constant + linear
  block.term_label = label;
  return {std::move(block), KnotVector{knots}};
}

// Centers the term: every design column sums to zero over the sample, at the
// cost of one degree of freedom.  The transform is stored so that the same
// reparameterization can be applied to prediction designs.
inline BasisBlock apply_sum_to_zero_constraint(const BasisBlock& block) {
  const int p = block.cols();
  if (p < 2) throw SpecError("cannot constrain a single-column block");
  Vector c = block.design.colwise().sum().transpose();
  Eigen::HouseholderQR<Matrix> qr(c);
  Matrix q = qr.householderQ();
  Matrix z = q.rightCols(p - 1);

  BasisBlock out;
  out.design = block.design * z;
  for (const auto& s : block.penalties) {
    Matrix sc = z.transpose() * s * z;
    out.penalties.push_back(0.5 * (sc + sc.transpose()));
  }
  if (block.constraint_transform.size() > 0)
    out.constraint_transform = block.constraint_transform * z;
  else
    out.constraint_transform = z;
  out.null_space_dim = detail::count_null_dim(out.combined_penalty());
  out.term_label = block.term_label;
  return out;
}

// Multiplies each design column elementwise by z: the block then represents
// f(x) * z with the smoothness penalty still acting on f.
inline BasisBlock varying_coefficient(const BasisBlock& block, const Vector& z) {
  if (z.size() != block.design.rows())
    throw SpecError("varying_coefficient: length of 'by' variable (" +
                    std::to_string(z.size()) + ") does not match design rows (" +
                    std::to_string(block.design.rows()) + ")");
  BasisBlock out = block;
  out.design = block.design.array().colwise() * z.array();
  return out;
}

enum class TensorMode { full, interaction };

namespace detail {

inline Matrix kron(const Matrix& a, const Matrix& b) {
  Matrix out(a.rows() * b.rows(), a.cols() * b.cols());
  for (int i = 0; i < a.rows(); ++i)
    for (int j = 0; j < a.cols(); ++j)
      out.block(i * b.rows(), j * b.cols(), b.rows(), b.cols()) = a(i, j) * b;
  return out;
}

inline Matrix row_products(const Matrix& x, const Matrix& y) {
  Matrix out(x.rows(), x.cols() * y.cols());
  for (int i = 0; i < x.cols(); ++i)
    for (int j = 0; j < y.cols(); ++j)
      out.col(i * y.cols() + j) = x.col(i).cwiseProduct(y.col(j));
  return out;
}

}  // namespace detail

// Bivariate smooth from products of two marginal bases.
//   full:        all k_x * k_y products of the raw margins; the caller
//                typically applies one overall sum-to-zero constraint.
//   interaction: margins are centered first, so the span excludes additive
//                functions f(x) + g(y); suitable alongside main-effect smooths.
// Both modes carry one penalty per margin (S_x (x) I and I (x) S_y), each with
// its own smoothing parameter.
inline BasisBlock tensor_product(const BasisBlock& block_x, const BasisBlock& block_y,
                                 TensorMode mode) {
  if (block_x.rows() != block_y.rows())
    throw SpecError("tensor_product: margins have different row counts");

  const BasisBlock* bx = &block_x;
  const BasisBlock* by = &block_y;
  BasisBlock cx, cy;
  if (mode == TensorMode::interaction) {
    cx = apply_sum_to_zero_constraint(block_x);
    cy = apply_sum_to_zero_constraint(block_y);
    bx = &cx;
    by = &cy;
  }

  const int kx = bx->cols();
  const int ky = by->cols();
  BasisBlock out;
  out.design = detail::row_products(bx->design, by->design);
  out.penalties = {detail::kron(bx->penalty(), Matrix::Identity(ky, ky)),
                   detail::kron(Matrix::Identity(kx, kx), by->penalty())};
  out.null_space_dim = detail::count_null_dim(out.combined_penalty());
  out.term_label = block_x.term_label + ":" + block_y.term_label;
  return out;
}

struct FactorSmoothResult {
  std::vector<BasisBlock> difference_blocks;  // level l+1 minus level 1, l = 1..L-1
  Matrix offset_columns;                      // dummy main effects, levels 2..L
  std::vector<std::string> offset_labels;
};

// One difference smooth per non-baseline level of an ordered factor.  The
// difference smooths are centered, so the factor's main-effect offsets must
// enter the model as the parametric columns returned alongside.
inline FactorSmoothResult factor_difference_smooths(const BasisBlock& block,
                                                    const Column& factor,
                                                    const std::string& factor_name) {
  if (!factor.is_categorical())
    throw SpecError("factor smooth: '" + factor_name + "' is not a factor");
  if (!factor.ordered)
    throw SpecError("factor smooth: '" + factor_name +
                    "' must be an ordered factor; mark it ordered first");
  if (factor.values.size() != block.design.rows())
    throw SpecError("factor smooth: factor length does not match design rows");

  const int n = block.rows();
  const int levels = factor.n_levels();
  FactorSmoothResult out;
  if (levels <= 1) {
    out.offset_columns = Matrix::Zero(n, 0);
    return out;
  }

  BasisBlock centered = apply_sum_to_zero_constraint(block);
  out.offset_columns = Matrix::Zero(n, levels - 1);
  for (int l = 1; l < levels; ++l) {
    Vector indicator(n);
    for (int i = 0; i < n; ++i)
      indicator[i] = (static_cast<int>(factor.values[i]) == l) ? 1.0 : 0.0;
    BasisBlock diff = centered;
    diff.design = centered.design.array().colwise() * indicator.array();
    diff.term_label = block.term_label + ":" + factor_name + factor.levels[l];
    out.difference_blocks.push_back(std::move(diff));
    out.offset_columns.col(l - 1) = indicator;
    out.offset_labels.push_back(factor_name + factor.levels[l]);
  }
  return out;
}

}  // namespace gammtk
