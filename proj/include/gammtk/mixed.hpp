#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "gammtk/basis.hpp"
#include "gammtk/errors.hpp"

namespace gammtk {

// Reparameterization of a penalized block into unpenalized (null-space) and
// whitened penalized (range-space) directions.
struct MixedDecomposition {
  Matrix fixed_columns;   // design restricted to the penalty null space
  Matrix random_columns;  // whitened range space; implied penalty is identity
  Matrix back_transform;  // maps (fixed, random) coefficients to original ones
  int null_space_dim = 0;
};

inline MixedDecomposition decompose_penalty(const Matrix& design, const Matrix& penalty,
                                            double rel_tol = 1e-10) {
  Eigen::SelfAdjointEigenSolver<Matrix> es(penalty);
  if (es.info() != Eigen::Success) throw NumericError("penalty eigendecomposition failed");
  const Vector& ev = es.eigenvalues();
  const double max_ev = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
  if (ev.minCoeff() < -1e-10 * std::max(max_ev, 1.0))
    throw NumericError("penalty has a negative eigenvalue beyond tolerance");

  const int p = static_cast<int>(penalty.rows());
  int null_dim = 0;
  for (int i = 0; i < p; ++i)
    if (ev[i] <= rel_tol * max_ev) ++null_dim;
  if (max_ev == 0.0) null_dim = p;

  // eigenvalues ascending: null space first
  Matrix n_basis = es.eigenvectors().leftCols(null_dim);
  Matrix r_basis = es.eigenvectors().rightCols(p - null_dim);
  Vector scale(p - null_dim);
  for (int i = 0; i < p - null_dim; ++i) scale[i] = 1.0 / std::sqrt(ev[null_dim + i]);
  Matrix r_whitened = r_basis * scale.asDiagonal();

  MixedDecomposition out;
  out.fixed_columns = design * n_basis;
  out.random_columns = design * r_whitened;
  out.back_transform.resize(p, p);
  out.back_transform << n_basis, r_whitened;
  out.null_space_dim = null_dim;
  return out;
}

inline MixedDecomposition decompose_penalty(const BasisBlock& block) {
  return decompose_penalty(block.design, block.combined_penalty());
}

inline double smoothing_parameter_from_variances(double sigma, double sigma_lambda) {
  if (sigma_lambda < 0.0) throw SpecError("sigma_lambda must be non-negative");
  if (sigma_lambda == 0.0) return std::numeric_limits<double>::infinity();
  return (sigma * sigma) / (sigma_lambda * sigma_lambda);
}

// One penalized column block of the model design.  matrices.size() == 1 for
// univariate smooths, == 2 for tensor-product smooths (one per margin); each
// matrix gets its own smoothing parameter.
struct PenaltyTerm {
  int col_start = 0;
  int cols = 0;
  std::vector<Matrix> matrices;
  std::vector<std::string> lambda_labels;
  std::string label;
};

struct RemlData {
  Matrix design;
  Vector y;
  std::vector<PenaltyTerm> penalties;
  std::optional<std::vector<int>> grouping;  // participant index per row
  int n_groups = 0;
};

struct RemlOptions {
  int max_iterations = 200;
  double gradient_tol = 1e-6;
  double relative_tol = 1e-10;
  std::vector<double> lambda_start_factors = {0.1, 10.0, 1000.0};
  double max_step = 5.0;  // largest line-search move per log-parameter
};

struct ConvergenceReport {
  int iterations = 0;
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  int best_restart = -1;
  bool sigma_b_pinned = false;
  std::vector<double> criterion_trace;  // accepted criterion values, best restart
};

struct VarianceComponents {
  double sigma_b = 0.0;
  double sigma = 0.0;
  std::vector<std::string> term_labels;
  std::vector<double> sigma_lambda;
  std::vector<double> lambda;
  bool has_random_intercept = false;
};

struct RemlFit {
  Vector beta;
  Matrix covariance;  // posterior covariance of the coefficients
  VarianceComponents variance_components;
  std::vector<double> edf_per_block;
  double edf_parametric = 0.0;
  double edf_random_intercept = 0.0;
  double edf_total = 0.0;
  double reml_criterion = 0.0;  // -2 * restricted log-likelihood
  ConvergenceReport convergence;
  Vector random_intercepts;  // predicted group effects (empty without grouping)
  int n_obs = 0;
  int n_cols = 0;

  double residual_df() const { return n_obs - edf_total; }
};

// Restricted-likelihood criterion for a penalized Gaussian additive model with
// an optional participant random intercept.  The random intercept is
// marginalized analytically, so per-evaluation cost is governed by the number
// of smooth coefficients, not the number of participants.
//
// Internally the design columns are scaled to unit norm; that is a pure
// reparameterization (same lambdas, same fit) but it keeps the penalized
// normal equations well conditioned whatever the raw column magnitudes are.
//
// Parameter vector rho: (log lambda_1..L [, log sigma_b^2], log sigma^2).
class RemlProblem {
 public:
  explicit RemlProblem(const RemlData& data) : data_(&data) {
    const int n = static_cast<int>(data.design.rows());
    const int p = static_cast<int>(data.design.cols());
    n_ = n;
    p_ = p;
    if (n <= p)
      throw SpecError("need more rows (" + std::to_string(n) + ") than columns (" +
                      std::to_string(p) + ")");

    col_scale_.resize(p);
    for (int j = 0; j < p; ++j) {
      const double norm = data.design.col(j).norm();
      col_scale_[j] = norm > 0.0 ? norm : 1.0;
    }
    Matrix design = data.design * col_scale_.cwiseInverse().asDiagonal();

    xtx_ = design.transpose() * design;
    xty_ = design.transpose() * data.y;
    yty_ = data.y.squaredNorm();

    has_ri_ = data.grouping.has_value();
    if (has_ri_) {
      g_ = data.n_groups;
      const auto& grp = *data.grouping;
      if (static_cast<int>(grp.size()) != n)
        throw SpecError("grouping must cover all rows");
      m_counts_ = Vector::Zero(g_);
      group_x_sums_ = Matrix::Zero(p, g_);
      group_y_sums_ = Vector::Zero(g_);
      for (int i = 0; i < n; ++i) {
        const int gidx = grp[i];
        if (gidx < 0 || gidx >= g_) throw SpecError("grouping index out of range");
        m_counts_[gidx] += 1.0;
        group_x_sums_.col(gidx) += design.row(i).transpose();
        group_y_sums_[gidx] += data.y[i];
      }
      for (int i = 0; i < g_; ++i)
        if (m_counts_[i] == 0.0) throw SpecError("grouping has an empty group");
    }

    total_rank_ = 0;
    for (const auto& term : data.penalties) {
      BlockInfo info;
      info.col_start = term.col_start;
      info.cols = term.cols;
      // penalties expressed in the scaled coordinates (beta_scaled = D beta)
      Vector inv_scale = col_scale_.segment(term.col_start, term.cols).cwiseInverse();
      for (const auto& s : term.matrices)
        scaled_matrices_.push_back(inv_scale.asDiagonal() * s * inv_scale.asDiagonal());
      const std::size_t first = scaled_matrices_.size() - term.matrices.size();

      Matrix combined = scaled_matrices_[first];
      for (std::size_t k = 1; k < term.matrices.size(); ++k)
        combined += scaled_matrices_[first + k];
      Eigen::SelfAdjointEigenSolver<Matrix> es(combined);
      const Vector& ev = es.eigenvalues();
      const double max_ev = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
      int rank = 0;
      for (int i = 0; i < ev.size(); ++i)
        if (ev[i] > 1e-10 * max_ev && max_ev > 0.0) ++rank;
      info.rank = rank;
      if (term.matrices.size() == 1) {
        info.single = true;
        double logdet = 0.0;
        for (int i = 0; i < ev.size(); ++i)
          if (ev[i] > 1e-10 * max_ev) logdet += std::log(ev[i]);
        info.logdet_plus = logdet;
      } else {
        info.single = false;
        info.range_basis = es.eigenvectors().rightCols(rank);
        for (std::size_t k = 0; k < term.matrices.size(); ++k)
          info.range_penalties.push_back(info.range_basis.transpose() *
                                         scaled_matrices_[first + k] * info.range_basis);
      }
      total_rank_ += rank;
      blocks_.push_back(std::move(info));
      for (std::size_t k = 0; k < term.matrices.size(); ++k)
        flat_block_.push_back(static_cast<int>(blocks_.size()) - 1);
    }
    for (const auto& s : scaled_matrices_) flat_matrices_.push_back(&s);
    n_lambda_ = static_cast<int>(flat_matrices_.size());
    null_dim_total_ = p - total_rank_;
  }

  int n_lambda() const { return n_lambda_; }
  bool has_random_intercept() const { return has_ri_; }
  int n_params() const { return n_lambda_ + (has_ri_ ? 2 : 1); }
  int n_obs() const { return n_; }
  int n_cols() const { return p_; }
  int total_null_dim() const { return null_dim_total_; }

  // natural magnitude of the k-th smoothing parameter: the ratio of the data
  // cross-product scale to the penalty scale in the equilibrated coordinates
  double lambda_scale(int k) const {
    const BlockInfo& info = blocks_[flat_block_[k]];
    const double tr_s = flat_matrices_[k]->trace();
    return tr_s > 0.0 ? std::max(static_cast<double>(info.cols) / tr_s, 1e-12) : 1.0;
  }

  double value(const Vector& rho) const {
    Workspace w;
    return evaluate(rho, w, false, nullptr);
  }

  double value_and_gradient(const Vector& rho, Vector& grad) const {
    Workspace w;
    grad.resize(n_params());
    return evaluate(rho, w, true, &grad);
  }

  // Coefficients, covariance, and degrees of freedom at the given parameters.
  void extract(const Vector& rho, RemlFit& fit) const {
    Workspace w;
    Vector grad(n_params());
    const double v = evaluate(rho, w, true, &grad);
    if (!std::isfinite(v)) throw NumericError("criterion not finite at the reported optimum");

    const double sigma2 = std::exp(rho[n_params() - 1]);
    fit.n_obs = n_;
    fit.n_cols = p_;
    fit.reml_criterion = v;
    // back to the unscaled coefficient parameterization
    Vector inv_scale = col_scale_.cwiseInverse();
    fit.beta = inv_scale.asDiagonal() * w.beta;
    fit.covariance = sigma2 * w.llt.solve(Matrix::Identity(p_, p_));
    fit.covariance = inv_scale.asDiagonal() * fit.covariance * inv_scale.asDiagonal();
    fit.covariance = 0.5 * (fit.covariance + fit.covariance.transpose());

    // per-block effective degrees of freedom: p_b - tr((A^-1)_bb S_b(lambda))
    fit.edf_per_block.assign(blocks_.size(), 0.0);
    double edf_smooth_loss = 0.0;
    int flat = 0;
    std::vector<double> lambda(n_lambda_);
    for (int k = 0; k < n_lambda_; ++k) lambda[k] = std::exp(rho[k]);
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& info = blocks_[b];
      Matrix ainv_bb = w.ainv_blocks[b];
      Matrix s_block = Matrix::Zero(info.cols, info.cols);
      for (std::size_t k = 0; k < term_matrix_count(b); ++k) {
        s_block += lambda[flat + static_cast<int>(k)] * *flat_matrices_[flat + static_cast<int>(k)];
      }
      const double tr = (ainv_bb.array() * s_block.array()).sum();
      fit.edf_per_block[b] = info.cols - tr;
      edf_smooth_loss += tr;
      flat += static_cast<int>(term_matrix_count(b));
    }
    int penalized_cols = 0;
    for (const auto& info : blocks_) penalized_cols += info.cols;
    fit.edf_parametric = p_ - penalized_cols;
    fit.edf_total = p_ - edf_smooth_loss;

    fit.variance_components.sigma = std::sqrt(sigma2);
    fit.variance_components.has_random_intercept = has_ri_;
    fit.variance_components.term_labels.clear();
    fit.variance_components.lambda.clear();
    fit.variance_components.sigma_lambda.clear();
    flat = 0;
    for (const auto& term : data_->penalties) {
      for (std::size_t k = 0; k < term.matrices.size(); ++k) {
        fit.variance_components.term_labels.push_back(
            k < term.lambda_labels.size() ? term.lambda_labels[k] : term.label);
        fit.variance_components.lambda.push_back(lambda[flat]);
        fit.variance_components.sigma_lambda.push_back(std::sqrt(sigma2 / lambda[flat]));
        ++flat;
      }
    }

    if (has_ri_) {
      const double sigma_b2 = std::exp(rho[n_lambda_]);
      const double theta = sigma2 / sigma_b2;
      fit.variance_components.sigma_b = std::sqrt(sigma_b2);
      // BLUPs: group residual sums shrunk by theta
      fit.random_intercepts.resize(g_);
      double inv_sum = 0.0;
      for (int i = 0; i < g_; ++i) {
        const double rsum = group_y_sums_[i] - group_x_sums_.col(i).dot(w.beta);
        fit.random_intercepts[i] = rsum / (theta + m_counts_[i]);
        inv_sum += 1.0 / (theta + m_counts_[i]);
      }
      fit.edf_random_intercept = g_ - theta * inv_sum - theta * w.ri_quad;
      fit.edf_total += fit.edf_random_intercept;
    } else {
      fit.random_intercepts.resize(0);
    }
  }

 private:
  struct BlockInfo {
    int col_start = 0;
    int cols = 0;
    int rank = 0;
    bool single = true;
    double logdet_plus = 0.0;    // single-matrix blocks
    Matrix range_basis;          // multi-matrix blocks
    std::vector<Matrix> range_penalties;
  };

  struct Workspace {
    Vector beta;
    Eigen::LLT<Matrix> llt;
    std::vector<Matrix> ainv_blocks;  // (A^-1)_bb per block (gradient paths only)
    double ri_quad = 0.0;             // sum_i u_i' A^-1 u_i at the evaluation point
  };

  std::size_t term_matrix_count(std::size_t b) const {
    return data_->penalties[b].matrices.size();
  }

  double evaluate(const Vector& rho, Workspace& w, bool need_grad, Vector* grad) const {
    const double inf = std::numeric_limits<double>::infinity();
    const double sigma2 = std::exp(rho[n_params() - 1]);
    double theta = 0.0;
    if (has_ri_) theta = sigma2 / std::exp(rho[n_lambda_]);
    std::vector<double> lambda(n_lambda_);
    for (int k = 0; k < n_lambda_; ++k) lambda[k] = std::exp(rho[k]);

    // cross-products with the random intercept marginalized out
    Matrix xtwx;
    Vector xtwy;
    double ytwy;
    Vector wvec;
    double logdet_v = 0.0;
    if (has_ri_) {
      wvec = (m_counts_.array() + theta).inverse();
      Matrix scaled = group_x_sums_ * wvec.asDiagonal();
      xtwx = xtx_ - scaled * group_x_sums_.transpose();
      xtwy = xty_ - scaled * group_y_sums_;
      ytwy = yty_ - (wvec.array() * group_y_sums_.array().square()).sum();
      for (int i = 0; i < g_; ++i) logdet_v += std::log1p(m_counts_[i] / theta);
    } else {
      xtwx = xtx_;
      xtwy = xty_;
      ytwy = yty_;
    }

    Matrix a = xtwx;
    int flat = 0;
    for (const auto& info : blocks_) {
      for (std::size_t k = 0; k < term_matrix_count(block_index(info)); ++k) {
        a.block(info.col_start, info.col_start, info.cols, info.cols) +=
            lambda[flat] * *flat_matrices_[flat];
        ++flat;
      }
    }

    w.llt.compute(a);
    if (w.llt.info() != Eigen::Success) return inf;
    double logdet_a = 0.0;
    double min_l = std::numeric_limits<double>::infinity(), max_l = 0.0;
    for (int i = 0; i < p_; ++i) {
      const double d = w.llt.matrixLLT()(i, i);
      if (!(d > 0.0)) return inf;
      logdet_a += 2.0 * std::log(d);
      min_l = std::min(min_l, d);
      max_l = std::max(max_l, d);
    }
    // condition guard: beyond this the factorization carries no information
    if ((max_l / min_l) * (max_l / min_l) > 1e13) return inf;

    w.beta = w.llt.solve(xtwy);
    const double dp = ytwy - w.beta.dot(xtwy);
    if (!std::isfinite(dp) || dp <= 0.0) return inf;

    // log pseudo-determinant of the total penalty
    double logdet_s = 0.0;
    flat = 0;
    std::vector<Eigen::LLT<Matrix>> range_llts;
    for (const auto& info : blocks_) {
      const std::size_t nmat = term_matrix_count(block_index(info));
      if (info.single) {
        logdet_s += info.rank * std::log(lambda[flat]) + info.logdet_plus;
      } else {
        Matrix m = Matrix::Zero(info.rank, info.rank);
        for (std::size_t k = 0; k < nmat; ++k)
          m += lambda[flat + static_cast<int>(k)] * info.range_penalties[k];
        Eigen::LLT<Matrix> mllt(m);
        if (mllt.info() != Eigen::Success) return inf;
        for (int i = 0; i < info.rank; ++i) {
          const double d = mllt.matrixLLT()(i, i);
          if (!(d > 0.0)) return inf;
          logdet_s += 2.0 * std::log(d);
        }
        if (need_grad) range_llts.push_back(std::move(mllt));
      }
      flat += static_cast<int>(nmat);
    }

    const double v = (n_ - null_dim_total_) * std::log(2.0 * M_PI * sigma2) + logdet_v -
                     logdet_s + logdet_a + dp / sigma2;
    if (!std::isfinite(v)) return inf;
    if (!need_grad) return v;

    // gradient
    w.ainv_blocks.resize(blocks_.size());
    std::size_t range_idx = 0;
    flat = 0;
    for (std::size_t b = 0; b < blocks_.size(); ++b) {
      const auto& info = blocks_[b];
      Matrix e = Matrix::Zero(p_, info.cols);
      e.block(info.col_start, 0, info.cols, info.cols).setIdentity();
      Matrix y_b = w.llt.solve(e);
      w.ainv_blocks[b] = y_b.middleRows(info.col_start, info.cols);

      const std::size_t nmat = term_matrix_count(b);
      for (std::size_t k = 0; k < nmat; ++k) {
        const Matrix& s_k = *flat_matrices_[flat];
        const double tr_ainv_s = (w.ainv_blocks[b].array() * s_k.array()).sum();
        const Vector beta_b = w.beta.segment(info.col_start, info.cols);
        const double quad = beta_b.dot(s_k * beta_b);
        double tr_pinv_s_scaled;  // lambda_k * tr(S_lambda^+ S_k)
        if (info.single) {
          tr_pinv_s_scaled = info.rank;
        } else {
          tr_pinv_s_scaled =
              lambda[flat] *
              range_llts[range_idx].solve(info.range_penalties[k]).trace();
        }
        (*grad)[flat] = lambda[flat] * (tr_ainv_s + quad / sigma2) - tr_pinv_s_scaled;
        ++flat;
      }
      if (!info.single) ++range_idx;
    }

    if (has_ri_) {
      double t1 = 0.0;
      for (int i = 0; i < g_; ++i) t1 += m_counts_[i] / (theta * (theta + m_counts_[i]));
      Matrix u = group_x_sums_ * wvec.asDiagonal();
      Matrix au = w.llt.solve(u);
      const double t2 = (u.array() * au.array()).sum();
      w.ri_quad = t2;
      double t3 = 0.0;
      for (int i = 0; i < g_; ++i) {
        const double rsum = group_y_sums_[i] - group_x_sums_.col(i).dot(w.beta);
        t3 += rsum * rsum * wvec[i] * wvec[i];
      }
      const double dv_dtheta = -t1 + t2 + t3 / sigma2;
      (*grad)[n_lambda_] = -theta * dv_dtheta;
      (*grad)[n_lambda_ + 1] = (n_ - null_dim_total_) - dp / sigma2 + theta * dv_dtheta;
    } else {
      (*grad)[n_lambda_] = (n_ - null_dim_total_) - dp / sigma2;
    }
    return v;
  }

  // blocks_ are stored in the same order as data_->penalties
  std::size_t block_index(const BlockInfo& info) const {
    return static_cast<std::size_t>(&info - blocks_.data());
  }

  const RemlData* data_;
  int n_ = 0, p_ = 0, g_ = 0;
  bool has_ri_ = false;
  int n_lambda_ = 0;
  int total_rank_ = 0;
  int null_dim_total_ = 0;
  Vector col_scale_;
  Matrix xtx_;
  Vector xty_;
  double yty_ = 0.0;
  Vector m_counts_;
  Matrix group_x_sums_;
  Vector group_y_sums_;
  std::vector<BlockInfo> blocks_;
  std::vector<Matrix> scaled_matrices_;
  std::vector<const Matrix*> flat_matrices_;
  std::vector<int> flat_block_;
};

namespace detail {

// Unpenalized directions of the model: parametric columns plus each penalty
// block's null space.  A rank deficiency here means some fixed-effect
// direction is not identified (e.g. age and birth date perfectly collinear
// when all measurement dates coincide).
inline void check_fixed_part_rank(const RemlData& data) {
  const int p = static_cast<int>(data.design.cols());
  std::vector<bool> penalized(p, false);
  std::vector<Matrix> null_bases;
  int fixed_cols = 0;
  for (const auto& term : data.penalties) {
    for (int j = term.col_start; j < term.col_start + term.cols; ++j) penalized[j] = true;
    Matrix combined = term.matrices.at(0);
    for (std::size_t k = 1; k < term.matrices.size(); ++k) combined += term.matrices[k];
    Eigen::SelfAdjointEigenSolver<Matrix> es(combined);
    const Vector& ev = es.eigenvalues();
    const double max_ev = std::max(ev.cwiseAbs().maxCoeff(), 0.0);
    int null_dim = 0;
    for (int i = 0; i < ev.size(); ++i)
      if (max_ev == 0.0 || ev[i] <= 1e-10 * max_ev) ++null_dim;
    Matrix nb = es.eigenvectors().leftCols(null_dim);
    null_bases.push_back(data.design.middleCols(term.col_start, term.cols) * nb);
    fixed_cols += null_dim;
  }
  for (int j = 0; j < p; ++j)
    if (!penalized[j]) ++fixed_cols;
  if (fixed_cols == 0) return;

  Matrix f(data.design.rows(), fixed_cols);
  int at = 0;
  for (int j = 0; j < p; ++j)
    if (!penalized[j]) f.col(at++) = data.design.col(j);
  for (const auto& nb : null_bases) {
    f.middleCols(at, nb.cols()) = nb;
    at += static_cast<int>(nb.cols());
  }
  Eigen::ColPivHouseholderQR<Matrix> qr(f);
  qr.setThreshold(1e-9);
  if (qr.rank() < fixed_cols)
    throw IdentifiabilityError(
        "unpenalized model directions are collinear (rank " + std::to_string(qr.rank()) +
        " < " + std::to_string(fixed_cols) +
        "); with equal measurement dates, age and birth date cannot be separated");
}

struct BfgsResult {
  Vector rho;
  double value = std::numeric_limits<double>::infinity();
  int iterations = 0;
  double gradient_norm = std::numeric_limits<double>::quiet_NaN();
  bool converged = false;
  std::vector<double> trace;
};

// BFGS with per-parameter box bounds.  The bounds keep smoothing parameters
// inside the numerically meaningful range; the criterion is flat to machine
// precision beyond them, so a bound-constrained optimum is the lambda -> inf
// (or sigma_b -> 0) limit.
inline BfgsResult minimize_bfgs(const RemlProblem& problem, Vector rho, const Vector& lower,
                                const Vector& upper, const RemlOptions& options) {
  const int d = static_cast<int>(rho.size());
  auto clamp = [&](Vector v) {
    for (int i = 0; i < v.size(); ++i) v[i] = std::clamp(v[i], lower[i], upper[i]);
    return v;
  };
  const double bound_eps = 1e-12;
  auto project_outward = [&](Vector v, const Vector& at) {
    // zero the components that point out of the box
    for (int i = 0; i < v.size(); ++i) {
      if (at[i] <= lower[i] + bound_eps && v[i] < 0.0) v[i] = 0.0;
      if (at[i] >= upper[i] - bound_eps && v[i] > 0.0) v[i] = 0.0;
    }
    return v;
  };
  rho = clamp(rho);

  BfgsResult res;
  Vector grad(d), grad_new(d);
  double v = problem.value_and_gradient(rho, grad);
  if (!std::isfinite(v)) return res;
  res.trace.push_back(v);
  Matrix h = Matrix::Identity(d, d);

  auto active_set = [&](const Vector& at) {
    std::uint64_t mask = 0;
    for (int i = 0; i < at.size(); ++i) {
      if (at[i] <= lower[i] + bound_eps) mask |= (1ULL << (2 * i));
      if (at[i] >= upper[i] - bound_eps) mask |= (1ULL << (2 * i + 1));
    }
    return mask;
  };
  std::uint64_t active = active_set(rho);

  // Armijo backtracking; returns the accepted point or nothing
  auto line_search = [&](const Vector& dir, double slope, Vector& rho_out, double& v_out) {
    double alpha =
        std::min(1.0, options.max_step / std::max(dir.cwiseAbs().maxCoeff(), 1e-12));
    while (alpha >= 1e-14) {
      rho_out = clamp(rho + alpha * dir);
      v_out = problem.value(rho_out);
      if (std::isfinite(v_out) && v_out <= v + 1e-4 * alpha * slope) return true;
      alpha *= 0.5;
    }
    return false;
  };

  for (int iter = 0; iter < options.max_iterations; ++iter) {
    res.iterations = iter + 1;

    Vector pg = project_outward(-grad, rho);
    if (pg.cwiseAbs().maxCoeff() < options.gradient_tol) {
      res.converged = true;
      break;
    }

    Vector dir = project_outward(-(h * grad), rho);
    double slope = dir.dot(grad);
    if (!(slope < 0.0)) {
      h.setIdentity();
      dir = pg;
      slope = dir.dot(grad);
      if (!(slope < 0.0)) {
        res.converged = true;  // no feasible descent direction
        break;
      }
    }
    Vector rho_new;
    double v_new;
    bool accepted = line_search(dir, slope, rho_new, v_new);
    if (!accepted && dir != pg) {
      // quasi-Newton curvature may be stale near an active bound
      h.setIdentity();
      dir = pg;
      slope = dir.dot(grad);
      accepted = slope < 0.0 && line_search(dir, slope, rho_new, v_new);
    }
    if (!accepted) {
      // stalled: converged if the criterion is flat along the steepest direction
      Vector probe = clamp(rho + (1e-6 / std::max(pg.cwiseAbs().maxCoeff(), 1e-12)) * pg);
      const double v_probe = problem.value(probe);
      res.converged = std::isfinite(v_probe) &&
                      std::abs(v_probe - v) <= 1e-9 * std::max(1.0, std::abs(v));
      break;
    }
    v_new = problem.value_and_gradient(rho_new, grad_new);
    res.trace.push_back(v_new);

    const std::uint64_t active_new = active_set(rho_new);
    if (active_new != active) {
      h.setIdentity();  // curvature across a bound activation is meaningless
      active = active_new;
    } else {
      Vector s = rho_new - rho;
      Vector yv = grad_new - grad;
      const double sy = s.dot(yv);
      if (sy > 1e-10 * s.norm() * yv.norm()) {
        // BFGS update of the inverse Hessian
        Vector hy = h * yv;
        const double yhy = yv.dot(hy);
        h += ((sy + yhy) / (sy * sy)) * (s * s.transpose());
        Matrix cross = hy * s.transpose();
        h -= (cross + cross.transpose()) / sy;
      }
    }

    const bool small_change =
        std::abs(v - v_new) <= options.relative_tol * std::max(1.0, std::abs(v));
    rho = rho_new;
    v = v_new;
    grad = grad_new;
    if (small_change || project_outward(-grad, rho).cwiseAbs().maxCoeff() < options.gradient_tol) {
      res.converged = true;
      break;
    }
  }
  res.rho = rho;
  res.value = v;
  res.gradient_norm = grad.cwiseAbs().maxCoeff();
  return res;
}

// Exact flat direction of the criterion when every participant has a single
// observation: only sigma^2 + sigma_b^2 is identified.  Curvature along that
// direction distinguishes the degenerate case from a healthy one.
inline double flat_direction_curvature(const RemlProblem& problem, const Vector& rho0) {
  const int np = problem.n_params();
  const int nl = problem.n_lambda();
  const double sb2 = std::exp(rho0[nl]);
  const double s2 = std::exp(rho0[np - 1]);
  const double tau = sb2 + s2;
  const double u0 = s2 / tau;
  auto shifted = [&](double delta) {
    Vector rho = rho0;
    const double sb2_d = std::exp(delta) * sb2;
    const double s2_d = tau - sb2_d;
    if (s2_d <= 0.0) return std::numeric_limits<double>::quiet_NaN();
    const double u_d = s2_d / tau;
    rho[nl] = std::log(sb2_d);
    rho[np - 1] = std::log(s2_d);
    for (int k = 0; k < nl; ++k) rho[k] += std::log(u_d / u0);
    return problem.value(rho);
  };
  const double v0 = problem.value(rho0);
  const double vp = shifted(0.5);
  const double vm = shifted(-0.5);
  if (!std::isfinite(v0) || !std::isfinite(vp) || !std::isfinite(vm))
    return std::numeric_limits<double>::infinity();
  return (vp - 2.0 * v0 + vm) / 0.25;
}

}  // namespace detail

inline RemlFit fit_reml(const RemlData& data, const RemlOptions& options = {}) {
  detail::check_fixed_part_rank(data);

  const int n = static_cast<int>(data.design.rows());
  const double var_y =
      (data.y.array() - data.y.mean()).square().sum() / std::max(1, n - 1);

  // Degenerate grouping: one observation per participant everywhere leaves
  // sigma_b unidentified; detect by curvature along the exact flat direction
  // and pin sigma_b to zero.
  if (data.grouping.has_value()) {
    bool all_single = true;
    std::vector<int> counts(data.n_groups, 0);
    for (int gidx : *data.grouping) counts[gidx]++;
    for (int c : counts)
      if (c > 1) all_single = false;
    if (all_single) {
      RemlProblem problem(data);
      Vector rho0(problem.n_params());
      for (int k = 0; k < problem.n_lambda(); ++k) rho0[k] = 0.0;
      rho0[problem.n_lambda()] = std::log(std::max(0.5 * var_y, 1e-300));
      rho0[problem.n_params() - 1] = std::log(std::max(0.5 * var_y, 1e-300));
      if (detail::flat_direction_curvature(problem, rho0) < 1e-8) {
        RemlData reduced = data;
        reduced.grouping.reset();
        reduced.n_groups = 0;
        RemlFit fit = fit_reml(reduced, options);
        fit.convergence.sigma_b_pinned = true;
        fit.variance_components.sigma_b = 0.0;
        fit.variance_components.has_random_intercept = true;
        return fit;
      }
    }
  }

  RemlProblem problem(data);
  const int np = problem.n_params();
  const int nl = problem.n_lambda();

  // no smoothing parameters and no random intercept: plain regression
  if (np == 1) {
    Vector rho(1);
    Eigen::LLT<Matrix> llt(data.design.transpose() * data.design);
    if (llt.info() != Eigen::Success)
      throw NumericError("normal equations not positive definite");
    Vector beta = llt.solve(data.design.transpose() * data.y);
    const double rss = (data.y - data.design * beta).squaredNorm();
    const int p = static_cast<int>(data.design.cols());
    rho[0] = std::log(rss / std::max(1, n - p));
    RemlFit fit;
    problem.extract(rho, fit);
    fit.convergence.converged = true;
    fit.convergence.iterations = 0;
    fit.convergence.gradient_norm = 0.0;
    return fit;
  }

  // deterministic starting smoothing parameters, scaled so the penalty and
  // the data cross-product start at comparable magnitude
  std::vector<double> base_lambda(nl);
  for (int k = 0; k < nl; ++k) base_lambda[k] = problem.lambda_scale(k);

  // box bounds centered on each parameter's natural scale; the criterion is
  // numerically flat outside lambda ~ base * e^{+-18}
  Vector lower(np), upper(np);
  for (int k = 0; k < nl; ++k) {
    lower[k] = std::log(base_lambda[k]) - 18.0;
    upper[k] = std::log(base_lambda[k]) + 18.0;
  }
  const double log_vy = std::log(std::max(var_y, 1e-300));
  for (int k = nl; k < np; ++k) {
    lower[k] = log_vy - 18.0;
    upper[k] = log_vy + 18.0;
  }

  detail::BfgsResult best;
  int best_restart = -1;
  std::string restart_trace;
  for (std::size_t r = 0; r < options.lambda_start_factors.size(); ++r) {
    Vector rho0(np);
    for (int k = 0; k < nl; ++k)
      rho0[k] = std::log(base_lambda[k] * options.lambda_start_factors[r]);
    if (problem.has_random_intercept()) {
      rho0[nl] = std::log(std::max(0.25 * var_y, 1e-300));
      rho0[np - 1] = std::log(std::max(0.5 * var_y, 1e-300));
    } else {
      rho0[np - 1] = std::log(std::max(0.5 * var_y, 1e-300));
    }
    detail::BfgsResult res = detail::minimize_bfgs(problem, rho0, lower, upper, options);
    char note[128];
    std::snprintf(note, sizeof(note), " [restart %zu: %d iterations, criterion %.6g, |grad| %.3g]",
                  r, res.iterations, res.value, res.gradient_norm);
    restart_trace += note;
    if (res.converged && res.value < best.value) {
      best = res;
      best_restart = static_cast<int>(r);
    }
  }
  if (best_restart < 0)
    throw ConvergenceError("REML optimization did not converge from any starting point (max " +
                           std::to_string(options.max_iterations) + " iterations):" +
                           restart_trace);

  RemlFit fit;
  problem.extract(best.rho, fit);
  fit.convergence.iterations = best.iterations;
  fit.convergence.gradient_norm = best.gradient_norm;
  fit.convergence.converged = true;
  fit.convergence.best_restart = best_restart;
  fit.convergence.criterion_trace = best.trace;
  return fit;
}

// Penalized fit with the smoothing parameters held fixed.  Solved through the
// square-root (augmented least squares) formulation, which stays accurate for
// extreme smoothing parameters where the normal equations lose half the
// available digits.
inline RemlFit fit_fixed_lambda(const RemlData& data, const std::vector<double>& lambdas) {
  if (data.grouping.has_value())
    throw SpecError("fit_fixed_lambda does not support a random intercept");
  const int n = static_cast<int>(data.design.rows());
  const int p = static_cast<int>(data.design.cols());
  if (n <= p) throw SpecError("need more rows than columns");

  std::size_t expected = 0;
  for (const auto& term : data.penalties) expected += term.matrices.size();
  if (lambdas.size() != expected)
    throw SpecError("expected " + std::to_string(expected) + " smoothing parameters");

  // rows of C: sqrt(lambda_k) * S_k^(1/2), embedded per block
  std::vector<Matrix> roots;
  int root_rows = 0;
  int flat = 0;
  for (const auto& term : data.penalties) {
    for (const auto& s : term.matrices) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(s);
      const Vector& ev = es.eigenvalues();
      const double max_ev = std::max(ev.maxCoeff(), 0.0);
      int rank = 0;
      for (int i = 0; i < ev.size(); ++i)
        if (ev[i] > 1e-14 * max_ev && max_ev > 0.0) ++rank;
      Matrix c(rank, term.cols);
      for (int i = 0; i < rank; ++i)
        c.row(i) = std::sqrt(lambdas[flat] * ev[ev.size() - rank + i]) *
                   es.eigenvectors().col(ev.size() - rank + i).transpose();
      roots.push_back(std::move(c));
      root_rows += rank;
      ++flat;
    }
  }

  Matrix augmented = Matrix::Zero(n + root_rows, p);
  augmented.topRows(n) = data.design;
  Vector rhs = Vector::Zero(n + root_rows);
  rhs.head(n) = data.y;
  {
    int at = n;
    flat = 0;
    for (const auto& term : data.penalties) {
      for (std::size_t k = 0; k < term.matrices.size(); ++k) {
        const Matrix& c = roots[flat];
        augmented.block(at, term.col_start, c.rows(), term.cols) = c;
        at += static_cast<int>(c.rows());
        ++flat;
      }
    }
  }

  Eigen::ColPivHouseholderQR<Matrix> qr(augmented);
  if (qr.rank() < p)
    throw NumericError("penalized least squares system is rank deficient");
  Vector beta = qr.solve(rhs);

  RemlFit fit;
  fit.n_obs = n;
  fit.n_cols = p;
  fit.beta = beta;

  // A^-1 from the R factor (A = X'X + S_lambda)
  Matrix r_upper = qr.matrixR().topRows(p).template triangularView<Eigen::Upper>();
  Matrix rinv = r_upper.template triangularView<Eigen::Upper>().solve(Matrix::Identity(p, p));
  Matrix ainv = qr.colsPermutation() * (rinv * rinv.transpose()) *
                qr.colsPermutation().transpose();

  fit.edf_per_block.assign(data.penalties.size(), 0.0);
  double edf_loss = 0.0;
  flat = 0;
  int penalized_cols = 0;
  for (std::size_t b = 0; b < data.penalties.size(); ++b) {
    const auto& term = data.penalties[b];
    penalized_cols += term.cols;
    Matrix s_block = Matrix::Zero(term.cols, term.cols);
    for (const auto& s : term.matrices) s_block += lambdas[flat++] * s;
    const double tr =
        (ainv.block(term.col_start, term.col_start, term.cols, term.cols).array() *
         s_block.array()).sum();
    fit.edf_per_block[b] = term.cols - tr;
    edf_loss += tr;
  }
  fit.edf_parametric = p - penalized_cols;
  fit.edf_total = p - edf_loss;

  const double rss = (data.y - data.design * beta).squaredNorm();
  const double sigma2 = rss / std::max(1.0, n - fit.edf_total);
  fit.covariance = sigma2 * ainv;
  fit.covariance = 0.5 * (fit.covariance + fit.covariance.transpose());
  fit.variance_components.sigma = std::sqrt(sigma2);
  flat = 0;
  for (const auto& term : data.penalties) {
    for (std::size_t k = 0; k < term.matrices.size(); ++k) {
      fit.variance_components.term_labels.push_back(
          k < term.lambda_labels.size() ? term.lambda_labels[k] : term.label);
      fit.variance_components.lambda.push_back(lambdas[flat]);
      fit.variance_components.sigma_lambda.push_back(
          lambdas[flat] > 0.0 ? std::sqrt(sigma2 / lambdas[flat])
                              : std::numeric_limits<double>::infinity());
      ++flat;
    }
  }
  fit.convergence.converged = true;
  return fit;
}

}  // namespace gammtk
