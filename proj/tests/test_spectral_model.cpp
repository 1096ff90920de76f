#include <doctest.h>

#include <random>

#include "support/problems.hpp"

using namespace multisl;
using fixtures::Matrix;
using fixtures::Vector;

TEST_CASE("grid coordinates are exact multiples of the spacing") {
  const Grid<double> g(2.0, 5);
  CHECK(g.spacing() == 0.5);
  for (Eigen::Index k = 0; k < g.size(); ++k) CHECK(g.x(k) == double(k) * 0.5);
  CHECK_THROWS_AS(Grid<double>(0.0, 5), ValidationError);
  CHECK_THROWS_AS(Grid<double>(1.0, 2), ValidationError);
}

TEST_CASE("simpson weights integrate cubics exactly for odd and even counts") {
  for (Eigen::Index n : {5, 6, 11, 12}) {
    const Grid<double> g(1.5, n);
    const auto w = g.simpson();
    double sum = 0;
    for (Eigen::Index k = 0; k < n; ++k) {
      const double x = g.x(k);
      sum += w(k) * (x * x * x - 2 * x + 1);
    }
    const double exact = std::pow(1.5, 4) / 4 - 1.5 * 1.5 + 1.5;
    CHECK(sum == doctest::Approx(exact).epsilon(1e-13));
  }
}

TEST_CASE("thresholds are folded onto the diagonal") {
  const Grid<double> g(1.0, 4);
  const auto v = PotentialMatrix<double>::sample(g, 2, [](double x) {
    Matrix m = Matrix::Zero(2, 2);
    m(0, 1) = m(1, 0) = x;
    return m;
  }, (Vector(2) << 1, 2).finished());
  CHECK(v[3](0, 0) == 1);
  CHECK(v[3](1, 1) == 2);
  CHECK(v[3](0, 1) == 1);
}

TEST_CASE("potential validation") {
  const Grid<double> g(1.0, 3);
  Matrix asym = Matrix::Zero(2, 2);
  asym(0, 1) = 1;
  CHECK_THROWS_AS(PotentialMatrix<double>(g, {asym, asym, asym}), ValidationError);
  CHECK_THROWS_AS(PotentialMatrix<double>(g, {Matrix::Zero(2, 2)}), DimensionError);
  const Matrix big = Matrix::Identity(2, 2) * 10;
  CHECK_THROWS_AS(PotentialMatrix<double>(g, {Matrix::Zero(2, 2), big, Matrix::Zero(2, 2)}, {}, 1.0), ValidationError);
  CHECK_NOTHROW(PotentialMatrix<double>(g, {Matrix::Zero(2, 2), big, Matrix::Zero(2, 2)}, {}, 100.0));
}

TEST_CASE("interpolation reproduces cubic samples") {
  const Grid<double> g(1.0, 11);
  const auto v = PotentialMatrix<double>::sample(g, 1, [](double x) { return fixtures::scalar(x * x * x - x); });
  for (double x : {0.03, 0.51, 0.97}) CHECK(v.interpolate(x)(0, 0) == doctest::Approx(x * x * x - x).epsilon(1e-13));
}

TEST_CASE("problem sets reject redundant perturbations") {
  const Grid<double> g(1.0, 5);
  const auto v = PotentialMatrix<double>::constant(g, Matrix::Zero(2, 2));
  const BoundarySpec<double> b{Matrix::Identity(2, 2), Matrix::Zero(2, 2)};
  CHECK_THROWS_AS(ProblemSet<double>(v, b, {Matrix::Identity(2, 2), 2 * Matrix::Identity(2, 2)}), ValidationError);
  CHECK_THROWS_AS(ProblemSet<double>(v, b, {2 * Matrix::Identity(2, 2)}), DimensionError);
  Matrix asym = Matrix::Identity(2, 2);
  asym(0, 1) = 0.5;
  CHECK_THROWS_AS(ProblemSet<double>(v, b, {asym, 2 * Matrix::Identity(2, 2)}), ValidationError);
  const ProblemSet<double> ok(v, b, {2 * Matrix::Identity(2, 2), 3 * Matrix::Identity(2, 2)});
  CHECK(ok.difference(1)(0, 0) == 2);
}

TEST_CASE("spectra sets enforce ordering and equal lengths") {
  CHECK_THROWS_AS(SpectraSet<double>({1, 1 + 1e-9}, {}), DegenerateSpectrum);
  CHECK_THROWS_AS(SpectraSet<double>({1, 2}, {{1, 2, 3}}), DimensionError);
  const SpectraSet<double> s({1, 2, 3}, {{1.5, 2.5, 3.5}});
  CHECK(s.truncated(2).perturbed(0).back() == 2.5);
}

TEST_CASE("quadratic form examples") {
  CHECK(quadratic_form(Matrix::Identity(2, 2), (Vector(2) << 3, 4).finished()) == 25);
  CHECK(quadratic_form(Matrix::Zero(2, 2), (Vector(2) << -7, 2).finished()) == 0);
  PerturbationJacobi<double> p{0, 1.0, (Vector(1) << 2).finished()};
  CHECK(quadratic_form(assemble_perturbation(p), (Vector(2) << 1, 1).finished()) == 5);
}

TEST_CASE("assembled perturbation patterns") {
  const PerturbationJacobi<double> j{0, 1.0, (Vector(1) << 0.5).finished()};
  const Matrix a = assemble_perturbation(j);
  CHECK(a == (Matrix(2, 2) << 1, 0.5, 0.5, 0).finished());

  const PerturbationCross<double> c{1, (Vector(3) << 0.1, 0.7, 0.2).finished()};
  const Matrix b = assemble_perturbation(c);
  for (Eigen::Index r = 0; r < 3; ++r)
    for (Eigen::Index k = 0; k < 3; ++k)
      if (r != 1 && k != 1) CHECK(b(r, k) == 0);
  CHECK(b(1, 1) == 0.7);
  CHECK(b(0, 1) == 0.1);

  const PerturbationJacobi<double> one{0, 0.75, Vector(0)};
  CHECK(assemble_perturbation(one) == fixtures::scalar(0.75));
  CHECK_THROWS_AS(assemble_perturbation(PerturbationCross<double>{3, Vector::Zero(3)}), IndexError);
}

TEST_CASE("property: quadratic forms, symmetry and the Jacobi substitution") {
  std::mt19937_64 rng(11);
  std::normal_distribution<double> normal;
  for (int trial = 0; trial < 200; ++trial) {
    const Eigen::Index m = 1 + trial % 6;
    PerturbationJacobi<double> j{trial % m, normal(rng), Vector(m - 1)};
    for (Eigen::Index k = 0; k + 1 < m; ++k) j.off(k) = normal(rng);
    PerturbationCross<double> c{(trial * 7) % m, Vector(m)};
    for (Eigen::Index k = 0; k < m; ++k) c.row(k) = normal(rng);
    Vector v(m);
    for (Eigen::Index k = 0; k < m; ++k) v(k) = normal(rng);

    const Matrix a = assemble_perturbation(j);
    const Matrix b = assemble_perturbation(Perturbation<double>(c));
    CHECK(a == a.transpose());
    CHECK(b == b.transpose());
    CHECK(quadratic_form(a, v) == quadratic_form(a, Vector(-v)));
    CHECK(quadratic_form(b, v) == quadratic_form(b, Vector(-v)));

    // xi_ll omega_1 + 2 sum xi_{k-1,k} omega_k with omega_1 = v_l^2, omega_k = v_{k-1} v_k
    double expanded = j.diagonal * v(j.pivot) * v(j.pivot);
    for (Eigen::Index k = 1; k < m; ++k) expanded += 2 * j.off(k - 1) * v(k - 1) * v(k);
    CHECK(quadratic_form(a, v) == doctest::Approx(expanded).epsilon(1e-12));
  }
}

TEST_CASE("sign normalization makes the first significant component positive") {
  Vector v = (Vector(3) << 1e-12, -2, 1).finished();
  normalize_sign(v);
  CHECK(v(1) == 2);
  CHECK(v(0) == -1e-12);
}

TEST_CASE("tail model prediction uses per-channel levels") {
  TailModel<double> t;
  t.channels = 2;
  t.asymptotic_offset = 0.25;
  t.index_offset = 1;
  CHECK(t.predicted(1) == 0.25);
  CHECK(t.predicted(2) == 0.25);
  CHECK(t.predicted(3) == doctest::Approx(1.25));
  CHECK(t.predicted(6) == doctest::Approx(4.25));
}
