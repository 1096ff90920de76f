#pragma once

// Brute-force finite-difference reference for the M-channel Robin problem.
// Shares no code with the library: second-order ghost-point discretization,
// Sturm counts from a block LDL^T factorization, bisection, and Richardson
// extrapolation across three grids.

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

namespace oracle {

struct FdProblem {
  double a = 0;
  int channels = 1;
  std::function<Eigen::MatrixXd(double)> potential;  // thresholds included
  Eigen::MatrixXd h;
  Eigen::MatrixXd big_h;
};

// Symmetric block tridiagonal B = W^{-1/2} A W^{-1/2} with W the trapezoid
// mass (1/2 at both ends). Off-diagonal blocks are scalar multiples of I.
class FdOperator {
 public:
  FdOperator(const FdProblem& p, int intervals) : m_(p.channels), n_(intervals + 1), dx_(p.a / intervals) {
    const double inv2 = 1.0 / (dx_ * dx_);
    diag_.resize(n_);
    off_.assign(n_, 0.0);
    for (int k = 0; k < n_; ++k) {
      const Eigen::MatrixXd v = p.potential(k * dx_);
      if (k == 0) {
        diag_[k] = 2.0 * (inv2 * Eigen::MatrixXd::Identity(m_, m_) + p.h / dx_ + 0.5 * v);
      } else if (k == n_ - 1) {
        diag_[k] = 2.0 * (inv2 * Eigen::MatrixXd::Identity(m_, m_) + p.big_h / dx_ + 0.5 * v);
      } else {
        diag_[k] = 2.0 * inv2 * Eigen::MatrixXd::Identity(m_, m_) + v;
      }
    }
    for (int k = 1; k < n_; ++k) {
      const double s = (k == 1 || k == n_ - 1) ? std::sqrt(2.0) : 1.0;
      off_[k] = -inv2 * s;  // block (k, k-1)
    }
  }

  int size() const { return n_; }
  double spacing() const { return dx_; }

  // Number of eigenvalues strictly below sigma.
  int count_below(double sigma) const {
    int negatives = 0;
    Eigen::MatrixXd dinv;
    for (int k = 0; k < n_; ++k) {
      Eigen::MatrixXd d = diag_[k] - sigma * Eigen::MatrixXd::Identity(m_, m_);
      if (k > 0) d -= off_[k] * off_[k] * dinv;
      negatives += ldl_negatives(d, dinv);
    }
    return negatives;
  }

  // k-th eigenvalue (0-based) by bisection.
  double eigenvalue(int k) const {
    double lo = lower_bound();
    double hi = std::max(1.0, std::abs(lo));
    while (count_below(hi) <= k) hi *= 2;
    for (int it = 0; it < 200 && hi - lo > 1e-15 * (1 + std::abs(hi)); ++it) {
      const double mid = 0.5 * (lo + hi);
      if (mid <= lo || mid >= hi) break;
      if (count_below(mid) <= k)
        lo = mid;
      else
        hi = mid;
    }
    return 0.5 * (lo + hi);
  }

  // Value at x = 0 of the eigenfunction for `lambda`, unit norm under the
  // trapezoid rule, first significant component positive.
  Eigen::VectorXd boundary_value(double lambda) const {
    const double shift = lambda + 1e-9 * (1 + std::abs(lambda));
    std::vector<Eigen::VectorXd> y(n_, Eigen::VectorXd::Ones(m_));
    for (int it = 0; it < 4; ++it) {
      y = solve_shifted(shift, y);
      double norm2 = 0;
      for (int k = 0; k < n_; ++k) norm2 += y[k].squaredNorm();
      for (auto& v : y) v /= std::sqrt(norm2);
    }
    // y holds W^{1/2} u; undo the scaling and normalize with trapezoid weights.
    double norm2 = 0;
    for (int k = 0; k < n_; ++k) {
      const double w = (k == 0 || k == n_ - 1) ? 0.5 : 1.0;
      const Eigen::VectorXd u = y[k] / std::sqrt(w);
      norm2 += w * dx_ * u.squaredNorm();
    }
    Eigen::VectorXd g = (y[0] / std::sqrt(0.5)) / std::sqrt(norm2);
    const double scale = g.cwiseAbs().maxCoeff();
    for (int c = 0; c < m_; ++c) {
      if (std::abs(g(c)) > 1e-8 * scale) {
        if (g(c) < 0) g = -g;
        break;
      }
    }
    return g;
  }

 private:
  // Unpivoted LDL^T of a small symmetric block: returns the number of
  // negative pivots and writes the inverse.
  int ldl_negatives(const Eigen::MatrixXd& d, Eigen::MatrixXd& inverse) const {
    Eigen::MatrixXd l = Eigen::MatrixXd::Identity(m_, m_);
    Eigen::VectorXd piv(m_);
    Eigen::MatrixXd work = d;
    int neg = 0;
    for (int j = 0; j < m_; ++j) {
      double p = work(j, j);
      if (p == 0) p = 1e-300;
      piv(j) = p;
      if (p < 0) ++neg;
      for (int i = j + 1; i < m_; ++i) l(i, j) = work(i, j) / p;
      for (int i = j + 1; i < m_; ++i)
        for (int c = j + 1; c < m_; ++c) work(i, c) -= l(i, j) * p * l(c, j);
    }
    const Eigen::MatrixXd linv = l.triangularView<Eigen::UnitLower>().solve(Eigen::MatrixXd::Identity(m_, m_));
    inverse = linv.transpose() * piv.cwiseInverse().asDiagonal() * linv;
    return neg;
  }

  double lower_bound() const {
    double lo = 0;
    for (int k = 0; k < n_; ++k) {
      Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(diag_[k], Eigen::EigenvaluesOnly);
      const double radius = std::abs(off_[k]) + (k + 1 < n_ ? std::abs(off_[k + 1]) : 0.0);
      lo = std::min(lo, es.eigenvalues().minCoeff() - radius);
    }
    return lo - 1;
  }

  // Block Thomas solve of (B - shift I) x = rhs.
  std::vector<Eigen::VectorXd> solve_shifted(double shift, const std::vector<Eigen::VectorXd>& rhs) const {
    std::vector<Eigen::MatrixXd> dinv(n_);
    std::vector<Eigen::VectorXd> z(n_);
    for (int k = 0; k < n_; ++k) {
      Eigen::MatrixXd d = diag_[k] - shift * Eigen::MatrixXd::Identity(m_, m_);
      Eigen::VectorXd r = rhs[k];
      if (k > 0) {
        d -= off_[k] * off_[k] * dinv[k - 1];
        r -= off_[k] * (dinv[k - 1] * z[k - 1]);
      }
      dinv[k] = d.inverse();
      z[k] = r;
    }
    std::vector<Eigen::VectorXd> x(n_);
    x[n_ - 1] = dinv[n_ - 1] * z[n_ - 1];
    for (int k = n_ - 2; k >= 0; --k) x[k] = dinv[k] * (z[k] - off_[k + 1] * x[k + 1]);
    return x;
  }

  int m_;
  int n_;
  double dx_;
  std::vector<Eigen::MatrixXd> diag_;
  std::vector<double> off_;
};

// Three-level Richardson extrapolation assuming an even-power error series.
inline double richardson3(double coarse, double mid, double fine) {
  const double r1 = (4 * mid - coarse) / 3;
  const double r2 = (4 * fine - mid) / 3;
  return (16 * r2 - r1) / 15;
}

inline std::vector<double> eigenvalues(const FdProblem& p, int count, int base_intervals = 2000) {
  std::vector<std::vector<double>> levels;
  for (int f : {1, 2, 4}) {
    FdOperator op(p, base_intervals * f);
    std::vector<double> ev(count);
    for (int k = 0; k < count; ++k) ev[k] = op.eigenvalue(k);
    levels.push_back(ev);
  }
  std::vector<double> out(count);
  for (int k = 0; k < count; ++k) out[k] = richardson3(levels[0][k], levels[1][k], levels[2][k]);
  return out;
}

inline Eigen::VectorXd norming_vector(const FdProblem& p, int k, int base_intervals = 2000) {
  std::vector<Eigen::VectorXd> g;
  for (int f : {1, 2, 4}) {
    FdOperator op(p, base_intervals * f);
    g.push_back(op.boundary_value(op.eigenvalue(k)));
  }
  Eigen::VectorXd out(p.channels);
  for (int c = 0; c < p.channels; ++c) out(c) = richardson3(g[0](c), g[1](c), g[2](c));
  return out;
}

}  // namespace oracle
