#pragma once

#include <cmath>
#include <numbers>
#include <vector>

#include "fd_oracle.hpp"
#include "multisl/multisl.hpp"

namespace fixtures {

using multisl::BoundarySpec;
using multisl::ChannelMatrix;
using multisl::ChannelVector;
using multisl::Grid;
using multisl::PotentialMatrix;
using multisl::ProblemSet;

using Matrix = ChannelMatrix<double>;
using Vector = ChannelVector<double>;

inline constexpr double kPi = std::numbers::pi;

inline Matrix diag(std::initializer_list<double> d) {
  Vector v(static_cast<Eigen::Index>(d.size()));
  Eigen::Index k = 0;
  for (double x : d) v(k++) = x;
  return v.asDiagonal();
}

inline Matrix scalar(double s) { return Matrix::Constant(1, 1, s); }

// Free M = 1 problem on [0, pi] with one perturbed left boundary h + dh.
inline ProblemSet<double> free_m1(double dh = 1.0, long n_points = 641, double h = 0, double big_h = 0) {
  Grid<double> grid(kPi, n_points);
  return ProblemSet<double>(PotentialMatrix<double>::constant(grid, scalar(0)), BoundarySpec<double>{scalar(h), scalar(big_h)},
                            {scalar(h + dh)});
}

// Coupled-sine preset on [0, pi]: V_12 = c sin x, thresholds (0, t2), Neumann
// ends, h_1 - h = s E_11 and h_2 - h = (s/2)(E_12 + E_21).
inline ProblemSet<double> coupled_m2(double c = 1.0, double t2 = 0.3, double s = 1e-4, long n_points = 641) {
  Grid<double> grid(kPi, n_points);
  const auto pot = PotentialMatrix<double>::sample(grid, 2, [&](double x) {
    Matrix v = Matrix::Zero(2, 2);
    v(0, 1) = v(1, 0) = c * std::sin(x);
    return v;
  }, (Vector(2) << 0, t2).finished());
  Matrix d1 = Matrix::Zero(2, 2), d2 = Matrix::Zero(2, 2);
  d1(0, 0) = s;
  d2(0, 1) = d2(1, 0) = s / 2;
  return ProblemSet<double>(pot, BoundarySpec<double>{Matrix::Zero(2, 2), Matrix::Zero(2, 2)}, {d1, d2});
}

inline std::vector<multisl::PerturbationJacobi<double>> jacobi_identity(double s, Eigen::Index m = 2) {
  std::vector<multisl::PerturbationJacobi<double>> out;
  for (Eigen::Index i = 0; i < m; ++i) {
    multisl::PerturbationJacobi<double> p{0, 0.0, Vector::Zero(m - 1)};
    if (i == 0) p.diagonal = s;
    else p.off(i - 1) = s / 2;
    out.push_back(p);
  }
  return out;
}

inline oracle::FdProblem oracle_coupled_m2(double c = 1.0, double t2 = 0.3, const Matrix& h = Matrix::Zero(2, 2)) {
  oracle::FdProblem p;
  p.a = kPi;
  p.channels = 2;
  p.potential = [c, t2](double x) {
    Eigen::MatrixXd v(2, 2);
    v << 0, c * std::sin(x), c * std::sin(x), t2;
    return v;
  };
  p.h = h;
  p.big_h = Eigen::MatrixXd::Zero(2, 2);
  return p;
}

}  // namespace fixtures
