#include <catch2/catch.hpp>

#include "gammtk/basis.hpp"
#include "gammtk/mixed.hpp"
#include "gammtk/rng.hpp"
#include "oracle_helpers.hpp"

using namespace gammtk;
using oracle::quadrature_penalty;

namespace {

Vector linspace(double a, double b, int n) {
  Vector v(n);
  for (int i = 0; i < n; ++i) v[i] = a + (b - a) * i / (n - 1);
  return v;
}

}  // namespace

TEST_CASE("value parameterization: basis row at a knot picks out that knot") {
  Vector knots(3);
  knots << 0.0, 0.5, 1.0;
  CrSpline spline(knots);
  Eigen::RowVectorXd r = spline.row(0.5);
  CHECK(r[0] == Approx(0.0).margin(1e-14));
  CHECK(r[1] == Approx(1.0).margin(1e-14));
  CHECK(r[2] == Approx(0.0).margin(1e-14));
}

TEST_CASE("constant and linear functions are unpenalized") {
  Vector knots(6);
  knots << 0.0, 0.3, 0.45, 0.7, 0.8, 1.0;
  CrSpline spline(knots);
  Vector ones = Vector::Ones(6);
  CHECK(std::abs(ones.dot(spline.penalty() * ones)) < 1e-12);
  Vector lin = knots;  // f(x) = x
  CHECK(std::abs(lin.dot(spline.penalty() * lin)) < 1e-10);
}

TEST_CASE("penalty equals quadrature of squared second derivative") {
  Rng rng(101);
  Vector knots = linspace(0.0, 1.0, 8);
  CrSpline spline(knots);
  for (int rep = 0; rep < 20; ++rep) {
    Vector beta(8);
    for (int i = 0; i < 8; ++i) beta[i] = rng.normal();
    const double exact = beta.dot(spline.penalty() * beta);
    const double quad = quadrature_penalty(spline, beta);
    CHECK(std::abs(exact - quad) <= 1e-6 * std::max(1e-30, std::abs(quad)));
  }
}

TEST_CASE("spline interpolates the coefficients and extends linearly") {
  Rng rng(5);
  Vector knots = linspace(-1.0, 2.0, 7);
  CrSpline spline(knots);
  Vector beta(7);
  for (int i = 0; i < 7; ++i) beta[i] = rng.normal();
  for (int i = 0; i < 7; ++i) CHECK(spline.row(knots[i]).dot(beta) == Approx(beta[i]).margin(1e-11));
  // beyond the boundary the natural spline is linear
  const double fb = spline.row(2.0).dot(beta);
  const double db = spline.deriv_row(2.0).dot(beta);
  CHECK(spline.row(2.7).dot(beta) == Approx(fb + 0.7 * db).margin(1e-10));
  const double fa = spline.row(-1.0).dot(beta);
  const double da = spline.deriv_row(-1.0).dot(beta);
  CHECK(spline.row(-1.5).dot(beta) == Approx(fa - 0.5 * da).margin(1e-10));
}

TEST_CASE("build_cr_basis validates its inputs") {
  Rng rng(9);
  Vector x(50);
  for (int i = 0; i < 50; ++i) x[i] = rng.uniform(0.0, 1.0);
  CHECK_THROWS_AS(build_cr_basis(x, 2), SpecError);
  Vector tied(10);
  for (int i = 0; i < 10; ++i) tied[i] = (i % 3) * 1.0;
  CHECK_THROWS_AS(build_cr_basis(tied, 5), RankError);
  auto res = build_cr_basis(x, 10);
  CHECK(res.block.cols() == 10);
  CHECK(res.block.null_space_dim == 2);
  CHECK(res.knots.a() == Approx(x.minCoeff()));
  CHECK(res.knots.b() == Approx(x.maxCoeff()));
}

TEST_CASE("sum-to-zero constraint centers columns and drops one df") {
  Rng rng(21);
  Vector x(400);
  for (int i = 0; i < 400; ++i) x[i] = rng.uniform(4.0, 90.0);
  auto res = build_cr_basis(x, 20);
  auto constrained = apply_sum_to_zero_constraint(res.block);
  CHECK(constrained.cols() == 19);
  Vector sums = constrained.design.colwise().sum();
  for (int j = 0; j < sums.size(); ++j) CHECK(std::abs(sums[j]) < 1e-10);
  CHECK(constrained.null_space_dim == 1);
}

TEST_CASE("constraint preserves the fitted function (refit oracle)") {
  Rng rng(22);
  const int n = 150;
  Vector x(n), y(n), ones = Vector::Ones(n);
  for (int i = 0; i < n; ++i) {
    x[i] = rng.uniform(0.0, 1.0);
    y[i] = std::sin(4.0 * x[i]) + rng.normal(0.0, 0.3);
  }
  auto res = build_cr_basis(x, 12);
  auto constrained = apply_sum_to_zero_constraint(res.block);

  Vector fit_raw = res.block.design *
                   res.block.design.colPivHouseholderQr().solve(y);
  Matrix with_intercept(n, constrained.cols() + 1);
  with_intercept << ones, constrained.design;
  Vector fit_con = with_intercept * with_intercept.colPivHouseholderQr().solve(y);
  CHECK((fit_raw - fit_con).cwiseAbs().maxCoeff() < 1e-8);

  // constant target: the intercept absorbs everything
  Vector constant = Vector::Constant(n, 3.25);
  Vector fit_raw_c = res.block.design *
                     res.block.design.colPivHouseholderQr().solve(constant);
  Vector fit_con_c = with_intercept * with_intercept.colPivHouseholderQr().solve(constant);
  CHECK((fit_raw_c - fit_con_c).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("varying coefficient multiplies columns by the interacting variable") {
  Rng rng(31);
  Vector x(80), z(80);
  for (int i = 0; i < 80; ++i) {
    x[i] = rng.uniform(0.0, 1.0);
    z[i] = rng.normal();
  }
  auto res = build_cr_basis(x, 6);
  auto vc_zero = varying_coefficient(res.block, Vector::Zero(80));
  CHECK(vc_zero.design.cwiseAbs().maxCoeff() == 0.0);
  auto vc_one = varying_coefficient(res.block, Vector::Ones(80));
  CHECK((vc_one.design - res.block.design).cwiseAbs().maxCoeff() == 0.0);
  CHECK((vc_one.penalty() - res.block.penalty()).cwiseAbs().maxCoeff() == 0.0);
  Vector bad(3);
  CHECK_THROWS_AS(varying_coefficient(res.block, bad), SpecError);
}

TEST_CASE("varying coefficient recovers a straight-line coefficient function") {
  Rng rng(33);
  const int n = 2000;
  const double sigma = 0.1;
  Vector a(n), z(n), y(n);
  for (int i = 0; i < n; ++i) {
    a[i] = rng.uniform(0.0, 1.0);
    z[i] = rng.normal();
    y[i] = a[i] * z[i] + rng.normal(0.0, sigma);  // beta(a) = a
  }
  auto basis = build_cr_basis(a, 5);
  auto vc = varying_coefficient(basis.block, z);

  RemlData data;
  data.design.resize(n, 1 + vc.cols());
  data.design.col(0).setOnes();
  data.design.rightCols(vc.cols()) = vc.design;
  data.y = y;
  PenaltyTerm term;
  term.col_start = 1;
  term.cols = vc.cols();
  term.matrices = {vc.penalty()};
  term.label = "vc";
  data.penalties = {term};
  RemlFit fit = fit_reml(data);

  CrSpline spline(basis.knots.knots);
  double max_err = 0.0;
  for (double g = 0.0; g <= 1.0; g += 0.02) {
    const double est = spline.row(g).dot(fit.beta.tail(vc.cols()));
    max_err = std::max(max_err, std::abs(est - g));
  }
  CHECK(max_err < 3.0 * sigma / std::sqrt(static_cast<double>(n)));
}

TEST_CASE("full tensor product: dimensions, penalties, constant direction") {
  Rng rng(41);
  const int n = 300;
  Vector x(n), t(n);
  for (int i = 0; i < n; ++i) {
    x[i] = rng.uniform(4.0, 90.0);
    t[i] = rng.uniform(0.0, 11.0);
  }
  auto bx = build_cr_basis(x, 20);
  auto bt = build_cr_basis(t, 5);
  auto tensor = tensor_product(bx.block, bt.block, TensorMode::full);
  CHECK(tensor.cols() == 100);
  REQUIRE(tensor.penalties.size() == 2);

  // coefficient direction 1 (x) 1 evaluates to the all-ones column
  Vector ones_coef = Vector::Ones(100);
  Vector col = tensor.design * ones_coef;
  CHECK((col - Vector::Ones(n)).cwiseAbs().maxCoeff() < 1e-10);

  auto constrained = apply_sum_to_zero_constraint(tensor);
  CHECK(constrained.cols() == 99);
  CHECK(constrained.null_space_dim == 3);

  Vector bad(3);
  auto too_few = build_cr_basis(x.head(100), 4);
  CHECK_THROWS_AS(tensor_product(bx.block, too_few.block, TensorMode::full), SpecError);
}

TEST_CASE("interaction tensor annihilates additive functions") {
  // Cartesian grid so marginal centering is exact per margin
  const int nx = 24, ny = 15;
  Vector gx = linspace(0.0, 1.0, nx), gy = linspace(0.0, 1.0, ny);
  const int n = nx * ny;
  Vector x(n), yv(n), additive(n);
  int at = 0;
  for (int i = 0; i < nx; ++i)
    for (int j = 0; j < ny; ++j) {
      x[at] = gx[i];
      yv[at] = gy[j];
      additive[at] = std::sin(3.0 * gx[i]) + std::exp(gy[j]);
      ++at;
    }
  auto bx = build_cr_basis(x, 7);
  auto by = build_cr_basis(yv, 6);
  auto ti = tensor_product(bx.block, by.block, TensorMode::interaction);
  CHECK(ti.cols() == 30);  // (7-1) * (6-1)
  CHECK(ti.null_space_dim == 1);

  Eigen::ColPivHouseholderQR<Matrix> qr(ti.design);
  Vector proj = ti.design * qr.solve(additive);
  CHECK(proj.norm() < 1e-8 * additive.norm());
}

TEST_CASE("factor difference smooths: one block per non-baseline level") {
  Rng rng(51);
  const int n = 120;
  Vector x(n);
  Column factor;
  factor.type = Column::Type::categorical;
  factor.levels = {"0", "1", "2"};
  factor.ordered = true;
  factor.values.resize(n);
  for (int i = 0; i < n; ++i) {
    x[i] = rng.uniform(0.0, 1.0);
    factor.values[i] = static_cast<double>(rng.uniform_int(3));
  }
  auto basis = build_cr_basis(x, 8);
  auto fs = factor_difference_smooths(basis.block, factor, "allele");
  REQUIRE(fs.difference_blocks.size() == 2);
  CHECK(fs.offset_columns.cols() == 2);
  CHECK(fs.offset_labels == std::vector<std::string>{"allele1", "allele2"});

  for (const auto& block : fs.difference_blocks)
    for (int i = 0; i < n; ++i)
      if (static_cast<int>(factor.values[i]) == 0)
        CHECK(block.design.row(i).cwiseAbs().maxCoeff() == 0.0);

  // all rows at the baseline level: every difference block is zero
  Column base_only = factor;
  base_only.values.setZero();
  auto fs0 = factor_difference_smooths(basis.block, base_only, "allele");
  for (const auto& block : fs0.difference_blocks)
    CHECK(block.design.cwiseAbs().maxCoeff() == 0.0);

  // single level: nothing to construct
  Column single = factor;
  single.levels = {"0"};
  single.values.setZero();
  auto fs1 = factor_difference_smooths(basis.block, single, "allele");
  CHECK(fs1.difference_blocks.empty());
  CHECK(fs1.offset_columns.cols() == 0);

  Column unordered = factor;
  unordered.ordered = false;
  CHECK_THROWS_AS(factor_difference_smooths(basis.block, unordered, "allele"), SpecError);
  CHECK_THROWS_WITH(factor_difference_smooths(basis.block, unordered, "allele"),
                    Catch::Matchers::Contains("ordered"));
}

TEST_CASE("penalty matrices are symmetric positive semi-definite") {
  Rng rng(61);
  for (int k : {5, 10, 20}) {
    Vector x(300);
    for (int i = 0; i < 300; ++i) x[i] = rng.uniform(0.0, 1.0);
    auto res = build_cr_basis(x, k);
    const Matrix& s = res.block.penalty();
    CHECK((s - s.transpose()).cwiseAbs().maxCoeff() < 1e-12 * s.cwiseAbs().maxCoeff());
    Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
    CHECK(es.eigenvalues().minCoeff() > -1e-10 * es.eigenvalues().maxCoeff());
    int zero_count = 0;
    for (int i = 0; i < k; ++i)
      if (es.eigenvalues()[i] <= 1e-10 * es.eigenvalues().maxCoeff()) ++zero_count;
    CHECK(zero_count == 2);
  }
}
