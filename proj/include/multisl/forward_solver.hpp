#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <limits>
#include <memory>
#include <numbers>
#include <optional>
#include <sstream>
#include <thread>
#include <utility>
#include <vector>

#include "multisl/errors.hpp"
#include "multisl/quadrature.hpp"
#include "multisl/spectral_model.hpp"

namespace multisl {

/// Value and x-derivative of a matrix solution on every grid point.
template <typename Scalar>
struct BoundarySolutionTrace {
  Scalar lambda{};
  std::vector<ChannelMatrix<Scalar>> values;
  std::vector<ChannelMatrix<Scalar>> derivatives;

  const ChannelMatrix<Scalar>& value_at_end() const { return values.back(); }
  const ChannelMatrix<Scalar>& derivative_at_end() const { return derivatives.back(); }
};

/// Phi(lambda) = phi'(a)^T + phi(a)^T H.
template <typename Scalar>
struct CharacteristicMatrix {
  Scalar lambda{};
  ChannelMatrix<Scalar> phi;
};

struct SolverOptions {
  /// Root refinement stops once the bracket is below root_tolerance * (1 + |lambda|).
  double root_tolerance = 1e-12;
  /// Scan step as a fraction of the local Weyl gap.
  double scan_fraction = 1.0 / 8.0;
  /// Rescans (each with a 4x finer step) allowed after a failed Weyl check.
  int max_refinements = 1;
  /// Worker threads for independent spectra; 0 picks hardware concurrency.
  unsigned threads = 1;
};

namespace detail {

/// Precomputed fourth-order Magnus stepping data for one potential. Each
/// interval stores the eigenbasis of the Gauss-point average of V and the
/// commutator correction exp(-/+ D/2), so a step at any lambda is a
/// diagonal rotation in that basis plus two small matrix products.
template <typename Scalar>
class MagnusPlan {
 public:
  using Matrix = ChannelMatrix<Scalar>;
  using Vector = ChannelVector<Scalar>;

  explicit MagnusPlan(const PotentialMatrix<Scalar>& potential)
      : channels_(potential.channels()), spacing_(potential.grid().spacing()), grid_(potential.grid()) {
    const Scalar h = spacing_;
    const Scalar offset = std::sqrt(Scalar(3)) / 6;
    const Scalar commutator_weight = std::sqrt(Scalar(3)) / 12 * h * h;
    const Eigen::Index intervals = potential.grid().size() - 1;
    intervals_.reserve(static_cast<std::size_t>(intervals));
    for (Eigen::Index j = 0; j < intervals; ++j) {
      const Scalar x0 = potential.grid().x(j);
      const Matrix v1 = potential.interpolate(x0 + h * (Scalar(0.5) - offset));
      const Matrix v2 = potential.interpolate(x0 + h * (Scalar(0.5) + offset));
      Interval iv;
      Eigen::SelfAdjointEigenSolver<Matrix> mid((v1 + v2) / 2);
      iv.basis = mid.eigenvectors();
      iv.levels = mid.eigenvalues();
      const Matrix d = commutator_weight * (v2 - v1);
      iv.corrected = d.cwiseAbs().maxCoeff() > 0;
      if (iv.corrected) {
        Eigen::SelfAdjointEigenSolver<Matrix> ed(d);
        const Vector half = ed.eigenvalues() / 2;
        iv.minus_half = ed.eigenvectors() * half.array().operator-().exp().matrix().asDiagonal() *
                        ed.eigenvectors().transpose();
        iv.plus_half = ed.eigenvectors() * half.array().exp().matrix().asDiagonal() * ed.eigenvectors().transpose();
      }
      intervals_.push_back(std::move(iv));
    }
  }

  Eigen::Index channels() const { return channels_; }
  const Grid<Scalar>& grid() const { return grid_; }

  /// Propagates (Y, Y') from x = 0 to x = a; `visit(k, Y, Y')` sees every grid point.
  template <typename Visitor>
  void propagate(Scalar lambda, Matrix& y, Matrix& dy, Visitor&& visit) const {
    visit(Eigen::Index{0}, y, dy);
    for (std::size_t j = 0; j < intervals_.size(); ++j) {
      step(intervals_[j], lambda, y, dy);
      const Scalar magnitude = std::max(y.cwiseAbs().maxCoeff(), dy.cwiseAbs().maxCoeff());
      if (!(magnitude <= Scalar(1e150))) {
        const double x = static_cast<double>(grid_.x(static_cast<Eigen::Index>(j + 1)));
        std::ostringstream os;
        os << "solution magnitude exceeded 1e150 at x = " << x << " for lambda = " << static_cast<double>(lambda);
        throw IntegrationOverflow(x, os.str());
      }
      visit(static_cast<Eigen::Index>(j + 1), y, dy);
    }
  }

 private:
  struct Interval {
    Matrix basis;
    Vector levels;
    Matrix minus_half;
    Matrix plus_half;
    bool corrected = false;
  };

  void step(const Interval& iv, Scalar lambda, Matrix& y, Matrix& dy) const {
    using std::cos;
    using std::cosh;
    using std::sin;
    using std::sinh;
    using std::sqrt;
    const Scalar h = spacing_;
    if (iv.corrected) {
      y = iv.minus_half * y;
      dy = iv.plus_half * dy;
    }
    Matrix a = iv.basis.transpose() * y;
    Matrix b = iv.basis.transpose() * dy;
    for (Eigen::Index r = 0; r < channels_; ++r) {
      const Scalar w = iv.levels(r) - lambda;
      Scalar c, s, t;
      if (w < 0) {
        const Scalar k = sqrt(-w);
        const Scalar sn = sin(k * h);
        c = cos(k * h);
        s = sn / k;
        t = -k * sn;
      } else if (w > 0) {
        const Scalar k = sqrt(w);
        const Scalar sn = sinh(k * h);
        c = cosh(k * h);
        s = sn / k;
        t = k * sn;
      } else {
        c = 1;
        s = h;
        t = 0;
      }
      for (Eigen::Index col = 0; col < channels_; ++col) {
        const Scalar ar = a(r, col);
        const Scalar br = b(r, col);
        a(r, col) = c * ar + s * br;
        b(r, col) = t * ar + c * br;
      }
    }
    y.noalias() = iv.basis * a;
    dy.noalias() = iv.basis * b;
    if (iv.corrected) {
      y = iv.minus_half * y;
      dy = iv.plus_half * dy;
    }
  }

  Eigen::Index channels_;
  Scalar spacing_;
  Grid<Scalar> grid_;
  std::vector<Interval> intervals_;
};

template <typename Scalar>
BoundarySolutionTrace<Scalar> trace_with(const MagnusPlan<Scalar>& plan, const ChannelMatrix<Scalar>& left_h,
                                         Scalar lambda) {
  const Eigen::Index m = plan.channels();
  BoundarySolutionTrace<Scalar> out;
  out.lambda = lambda;
  out.values.reserve(static_cast<std::size_t>(plan.grid().size()));
  out.derivatives.reserve(static_cast<std::size_t>(plan.grid().size()));
  ChannelMatrix<Scalar> y = ChannelMatrix<Scalar>::Identity(m, m);
  ChannelMatrix<Scalar> dy = left_h;
  plan.propagate(lambda, y, dy, [&](Eigen::Index, const auto& v, const auto& dv) {
    out.values.push_back(v);
    out.derivatives.push_back(dv);
  });
  return out;
}

template <typename Scalar>
std::pair<ChannelMatrix<Scalar>, ChannelMatrix<Scalar>> end_values_with(const MagnusPlan<Scalar>& plan,
                                                                        const ChannelMatrix<Scalar>& left_h,
                                                                        Scalar lambda) {
  const Eigen::Index m = plan.channels();
  ChannelMatrix<Scalar> y = ChannelMatrix<Scalar>::Identity(m, m);
  ChannelMatrix<Scalar> dy = left_h;
  plan.propagate(lambda, y, dy, [](Eigen::Index, const auto&, const auto&) {});
  return {y, dy};
}

template <typename Scalar>
ChannelMatrix<Scalar> characteristic_from_ends(const ChannelMatrix<Scalar>& y, const ChannelMatrix<Scalar>& dy,
                                               const ChannelMatrix<Scalar>& big_h) {
  ChannelMatrix<Scalar> phi = dy.transpose() + y.transpose() * big_h;
  if (!phi.allFinite()) throw NonFiniteMatrix("characteristic matrix has non-finite entries");
  return phi;
}

template <typename Scalar>
int sign_of(Scalar v) {
  return (v > 0) - (v < 0);
}

/// Brent-Dekker root of f on [lo, hi] given opposite-signed end values;
/// stops when the bracket is below tol_rel * (1 + |x|).
template <typename Scalar, typename Fn>
Scalar bracketed_root(Fn&& f, Scalar a, Scalar fa, Scalar b, Scalar fb, Scalar tol_rel) {
  using std::abs;
  if (abs(fa) < abs(fb)) {
    std::swap(a, b);
    std::swap(fa, fb);
  }
  Scalar c = a, fc = fa, d = b - a, e = d;
  for (int it = 0; it < 200; ++it) {
    if (fb == 0) return b;
    if (sign_of(fb) == sign_of(fc)) {
      c = a;
      fc = fa;
      d = e = b - a;
    }
    if (abs(fc) < abs(fb)) {
      a = b;
      b = c;
      c = a;
      fa = fb;
      fb = fc;
      fc = fa;
    }
    const Scalar tol = tol_rel * (1 + abs(b)) / 2;
    const Scalar half = (c - b) / 2;
    if (abs(half) <= tol) return b;
    if (abs(e) >= tol && abs(fa) > abs(fb)) {
      Scalar p, q;
      const Scalar s = fb / fa;
      if (a == c) {
        p = 2 * half * s;
        q = 1 - s;
      } else {
        const Scalar qa = fa / fc, r = fb / fc;
        p = s * (2 * half * qa * (qa - r) - (b - a) * (r - 1));
        q = (qa - 1) * (r - 1) * (s - 1);
      }
      if (p > 0) {
        q = -q;
      } else {
        p = -p;
      }
      if (2 * p < std::min(3 * half * q - abs(tol * q), abs(e * q))) {
        e = d;
        d = p / q;
      } else {
        d = half;
        e = d;
      }
    } else {
      d = half;
      e = d;
    }
    a = b;
    fa = fb;
    b += abs(d) > tol ? d : (half > 0 ? tol : -tol);
    fb = f(b);
  }
  return b;
}

/// Runs `task(k)` for k in [0, count) on up to `threads` workers.
inline void parallel_for(std::size_t count, unsigned threads, const std::function<void(std::size_t)>& task) {
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, count));
  if (threads <= 1) {
    for (std::size_t k = 0; k < count; ++k) task(k);
    return;
  }
  std::vector<std::exception_ptr> errors(count);
  std::vector<std::thread> pool;
  for (unsigned t = 0; t < threads; ++t) {
    pool.emplace_back([&, t] {
      for (std::size_t k = t; k < count; k += threads) {
        try {
          task(k);
        } catch (...) {
          errors[k] = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

}  // namespace detail

/// Matrix solution with phi(0) = I and phi'(0) = left_h, recorded on the
/// potential grid.
template <typename Scalar>
BoundarySolutionTrace<Scalar> integrate_matrix_solution(const PotentialMatrix<Scalar>& potential,
                                                        const ChannelMatrix<Scalar>& left_h, Scalar lambda) {
  detail::require_symmetric(left_h, potential.channels(), "left boundary matrix");
  if (!std::isfinite(static_cast<double>(lambda))) throw ValidationError("lambda must be finite");
  const detail::MagnusPlan<Scalar> plan(potential);
  return detail::trace_with(plan, left_h, lambda);
}

template <typename Scalar>
CharacteristicMatrix<Scalar> characteristic_matrix(const BoundarySolutionTrace<Scalar>& trace,
                                                   const ChannelMatrix<Scalar>& big_h) {
  if (trace.values.empty()) throw ValidationError("empty trace");
  return {trace.lambda, detail::characteristic_from_ends(trace.value_at_end(), trace.derivative_at_end(), big_h)};
}

/// Grid size giving sqrt(lambda_max) * spacing <= 0.5 for the lowest
/// `count` eigenvalues of an M-channel problem (odd, at least 201).
inline long recommended_grid_points(double length, long channels, std::size_t count, double potential_scale = 0) {
  const double levels = std::ceil(double(count) / double(channels)) + 2;
  const double k_max = std::sqrt(std::pow(std::numbers::pi * levels / length, 2) + std::abs(potential_scale));
  long n = static_cast<long>(std::ceil(length * k_max / 0.5)) + 1;
  n = std::max(n, 201L);
  if (n % 2 == 0) ++n;
  return n;
}

template <typename Scalar>
struct EigenvalueSearch {
  std::vector<Scalar> eigenvalues;
  Scalar weyl_estimate{};
  int refinements = 0;
  std::size_t evaluations = 0;
};

/// Terms of the Green identity at a trial (lambda, v).
template <typename Scalar>
struct GreenIdentityTerms {
  Scalar lhs{};              ///< (lambda - lambda_n) * integral f_i . y_n
  Scalar rhs{};              ///< v^T (h_i - h) gamma_n
  Scalar boundary_defect{};  ///< r . y_n(a), r = Phi_i + m_i Phi
  Scalar m{};                ///< m_i(lambda)

  Scalar residual() const {
    using std::abs;
    return abs(lhs - rhs);
  }
};

/// Forward problem for the M+1 boundary value problems of one ProblemSet.
/// Immutable after construction; all members are safe to call concurrently.
template <typename Scalar>
class ForwardSolver {
 public:
  using Matrix = ChannelMatrix<Scalar>;
  using Vector = ChannelVector<Scalar>;

  explicit ForwardSolver(ProblemSet<Scalar> problems, SolverOptions options = {})
      : problems_(std::move(problems)),
        options_(options),
        plan_(std::make_shared<const detail::MagnusPlan<Scalar>>(problems_.potential())) {}

  const ProblemSet<Scalar>& problems() const { return problems_; }
  const SolverOptions& options() const { return options_; }
  Eigen::Index channels() const { return problems_.channels(); }

  BoundarySolutionTrace<Scalar> trace(Which which, Scalar lambda) const {
    return detail::trace_with(*plan_, problems_.left_h(which), lambda);
  }

  CharacteristicMatrix<Scalar> characteristic(Which which, Scalar lambda) const {
    const auto [y, dy] = detail::end_values_with(*plan_, problems_.left_h(which), lambda);
    return {lambda, detail::characteristic_from_ends(y, dy, problems_.base().big_h)};
  }

  Scalar characteristic_det(Which which, Scalar lambda) const { return characteristic(which, lambda).phi.determinant(); }

  /// Rigorous lower bound on the spectrum from min V and the negative parts
  /// of h and H (trace inequality).
  Scalar spectral_lower_bound(Which which) const {
    const auto lowest = [](const Matrix& m) {
      return Eigen::SelfAdjointEigenSolver<Matrix>(m, Eigen::EigenvaluesOnly).eigenvalues().minCoeff();
    };
    const Scalar beta =
        std::max({Scalar(0), -lowest(problems_.left_h(which)), -lowest(problems_.base().big_h)});
    return problems_.potential().min_eigenvalue() - 2 * beta / problems_.length() - 4 * beta * beta;
  }

  /// Weyl-type count of eigenvalues not exceeding lambda.
  Scalar weyl_count(Which which, Scalar lambda) const {
    const Scalar a = problems_.length();
    const Matrix shifted =
        problems_.potential().mean() + (2 / a) * (problems_.left_h(which) + problems_.base().big_h);
    const Vector levels = Eigen::SelfAdjointEigenSolver<Matrix>(shifted, Eigen::EigenvaluesOnly).eigenvalues();
    Scalar n = Scalar(channels()) / 2;
    for (Eigen::Index k = 0; k < levels.size(); ++k)
      n += a / std::numbers::pi_v<Scalar> * std::sqrt(std::max(Scalar(0), lambda - levels(k)));
    return n;
  }

  std::vector<Scalar> locate_eigenvalues(Which which, std::size_t count) const {
    return search_eigenvalues(which, count).eigenvalues;
  }

  /// Lowest `count` zeros of det Phi, with scan diagnostics.
  EigenvalueSearch<Scalar> search_eigenvalues(Which which, std::size_t count) const {
    if (count == 0) throw ValidationError("eigenvalue count must be at least 1");
    EigenvalueSearch<Scalar> result;
    for (int refine = 0;; ++refine) {
      result.eigenvalues = scan(which, count, refine, result.evaluations);
      result.refinements = refine;
      const Scalar lambda_max = result.eigenvalues.back();
      result.weyl_estimate = weyl_count(which, lambda_max);
      using std::abs;
      if (abs(Scalar(count) - result.weyl_estimate) <= Scalar(channels())) break;
      if (refine >= options_.max_refinements) {
        std::ostringstream os;
        os << "found " << count << " eigenvalues up to " << static_cast<double>(lambda_max) << " for "
           << to_string(which) << " but the Weyl estimate is " << static_cast<double>(result.weyl_estimate);
        throw RootCountMismatch(os.str());
      }
    }
    return result;
  }

  /// Spectra of all M+1 problems at depth `count`.
  SpectraSet<Scalar> spectra(std::size_t count) const {
    const std::size_t problems = problems_.perturbation_count() + 1;
    std::vector<std::vector<Scalar>> lists(problems);
    detail::parallel_for(problems, options_.threads, [&](std::size_t k) {
      lists[k] = locate_eigenvalues(k == 0 ? Which::base() : Which::perturbed(k - 1), count);
    });
    std::vector<Scalar> base = std::move(lists.front());
    lists.erase(lists.begin());
    return SpectraSet<Scalar>(std::move(base), std::move(lists));
  }

  /// Smallest singular value of Phi^T(lambda) relative to the boundary data
  /// scale; near zero at an eigenvalue.
  Scalar eigen_residual(Which which, Scalar lambda) const {
    const auto [y, dy] = detail::end_values_with(*plan_, problems_.left_h(which), lambda);
    const Matrix phi = detail::characteristic_from_ends(y, dy, problems_.base().big_h);
    Eigen::JacobiSVD<Matrix> svd(phi);
    return svd.singularValues()(channels() - 1) / boundary_scale(y, dy);
  }

  /// Unit right null vector of Phi^T(lambda_n).
  Vector eigen_direction(Which which, Scalar lambda_n) const {
    const auto [y, dy] = detail::end_values_with(*plan_, problems_.left_h(which), lambda_n);
    const Matrix phi = detail::characteristic_from_ends(y, dy, problems_.base().big_h);
    const Scalar scale = boundary_scale(y, dy);
    Eigen::JacobiSVD<Matrix> svd(phi.transpose(), Eigen::ComputeFullV);
    const auto& sv = svd.singularValues();
    const Eigen::Index m = channels();
    if (sv(m - 1) > Scalar(1e-7) * scale) {
      std::ostringstream os;
      os.precision(17);
      os << "lambda = " << static_cast<double>(lambda_n) << " is not an eigenvalue of " << to_string(which)
         << " (smallest singular value " << static_cast<double>(sv(m - 1) / scale) << " relative)";
      throw ValidationError(os.str());
    }
    if (m >= 2 && sv(m - 2) <= Scalar(1e-6) * scale) {
      std::ostringstream os;
      os << "null space of Phi^T at lambda = " << static_cast<double>(lambda_n) << " is at least two-dimensional";
      throw NullSpaceAmbiguous(os.str());
    }
    Vector dir = svd.matrixV().col(m - 1);
    normalize_sign(dir);
    return dir;
  }

  /// Norming vector gamma with unit L2 eigenfunction phi(x, lambda_n) gamma.
  NormingVector<Scalar> direct_norming_vector(Which which, Scalar lambda_n) const {
    const Vector dir = eigen_direction(which, lambda_n);
    const auto tr = trace(which, lambda_n);
    const VectorX<Scalar> w = problems_.potential().grid().simpson();
    Scalar norm2 = 0;
    for (std::size_t k = 0; k < tr.values.size(); ++k)
      norm2 += w(static_cast<Eigen::Index>(k)) * (tr.values[k] * dir).squaredNorm();
    NormingVector<Scalar> out{lambda_n, dir / std::sqrt(norm2)};
    normalize_sign(out.gamma);
    return out;
  }

  /// Both sides of the Green identity for perturbation i, trial lambda and
  /// vector v, against the base eigenvalue lambda_n. The boundary_defect is
  /// the term at x = a that the identity drops; it vanishes for M = 1.
  GreenIdentityTerms<Scalar> green_identity(std::size_t i, Scalar lambda, Scalar lambda_n, const Vector& v) const {
    using std::abs;
    if (v.size() != channels()) throw DimensionError("trial vector has the wrong length");
    const Which pert = Which::perturbed(i);
    const Matrix diff = problems_.difference(i);
    GreenIdentityTerms<Scalar> out;
    if (v.cwiseAbs().maxCoeff() == 0) return out;

    const auto base_trace = trace(Which::base(), lambda);
    const auto pert_trace = trace(pert, lambda);
    const Matrix& big_h = problems_.base().big_h;
    const Matrix phi_hat = detail::characteristic_from_ends(base_trace.value_at_end(), base_trace.derivative_at_end(), big_h);
    const Matrix phi_hat_i = detail::characteristic_from_ends(pert_trace.value_at_end(), pert_trace.derivative_at_end(), big_h);
    const Vector phi = phi_hat.transpose() * v;
    const Vector phi_i = phi_hat_i.transpose() * v;
    const Scalar denom = phi.squaredNorm();
    const Scalar op_norm = phi_hat.norm();
    if (denom < Scalar(1e-12) * op_norm * op_norm * v.squaredNorm()) {
      std::ostringstream os;
      os << "lambda = " << static_cast<double>(lambda) << " is too close to a base eigenvalue";
      throw NearSingularDenominator(os.str());
    }
    out.m = -phi_i.dot(phi) / denom;

    const NormingVector<Scalar> gn = direct_norming_vector(Which::base(), lambda_n);
    const auto eig_trace = trace(Which::base(), lambda_n);
    const VectorX<Scalar> w = problems_.potential().grid().simpson();
    Scalar integral = 0;
    for (std::size_t k = 0; k < eig_trace.values.size(); ++k) {
      const Vector f = pert_trace.values[k] * v + out.m * (base_trace.values[k] * v);
      const Vector yn = eig_trace.values[k] * gn.gamma;
      integral += w(static_cast<Eigen::Index>(k)) * f.dot(yn);
    }
    out.lhs = (lambda - lambda_n) * integral;
    out.rhs = quadratic_form_pair(diff, v, gn.gamma);
    const Vector r = phi_i + out.m * phi;
    out.boundary_defect = r.dot(eig_trace.value_at_end() * gn.gamma);
    return out;
  }

  Scalar green_identity_residual(std::size_t i, Scalar lambda, Scalar lambda_n, const Vector& v) const {
    return green_identity(i, lambda, lambda_n, v).residual();
  }

  /// lim_{lambda -> lambda_n} (lambda - lambda_n) (Phi_i . Phi) / (Phi . Phi)
  /// with the constant extension gamma_lambda = gamma_{lambda_n}, by
  /// symmetric Richardson extrapolation.
  Scalar spectral_residue(std::size_t i, Scalar lambda_n) const {
    using std::abs;
    const Vector gamma = direct_norming_vector(Which::base(), lambda_n).gamma;
    const Matrix& big_h = problems_.base().big_h;
    const auto sample = [&](Scalar delta) {
      const Scalar at = lambda_n + delta;
      const auto [y, dy] = detail::end_values_with(*plan_, problems_.base().h, at);
      const auto [yi, dyi] = detail::end_values_with(*plan_, problems_.left_h(Which::perturbed(i)), at);
      const Vector phi = detail::characteristic_from_ends(y, dy, big_h).transpose() * gamma;
      const Vector phi_i = detail::characteristic_from_ends(yi, dyi, big_h).transpose() * gamma;
      return delta * phi_i.dot(phi) / phi.squaredNorm();
    };
    const auto symmetric = [&](Scalar delta) { return (sample(delta) + sample(-delta)) / 2; };
    const Scalar d1 = Scalar(1e-3) * (1 + abs(lambda_n));
    const Scalar g1 = symmetric(d1), g2 = symmetric(d1 / 2), g3 = symmetric(d1 / 4);
    const Scalar r1 = (4 * g2 - g1) / 3;
    const Scalar r2 = (4 * g3 - g2) / 3;
    const Scalar scale = std::max({abs(r1), abs(r2), abs(g3)});
    if (abs(r2 - r1) > Scalar(1e-3) * scale) {
      std::ostringstream os;
      os << "residue estimates " << static_cast<double>(r1) << " and " << static_cast<double>(r2) << " disagree";
      throw ExtrapolationDiverged(os.str());
    }
    return (16 * r2 - r1) / 15;
  }

 private:
  template <typename DerivedM>
  static Scalar quadratic_form_pair(const Eigen::MatrixBase<DerivedM>& m, const Vector& u, const Vector& v) {
    return u.dot(m * v);
  }

  Scalar boundary_scale(const Matrix& y, const Matrix& dy) const {
    const Matrix& big_h = problems_.base().big_h;
    return dy.norm() + y.norm() * (1 + big_h.norm());
  }

  std::vector<Scalar> scan(Which which, std::size_t count, int refine, std::size_t& evaluations) const {
    using std::abs;
    const Scalar a = problems_.length();
    const Scalar m = Scalar(channels());
    const Scalar unit = std::numbers::pi_v<Scalar> / a;
    const Scalar refine_factor = std::pow(Scalar(4), Scalar(refine));
    const Scalar tol_rel = Scalar(options_.root_tolerance);

    const auto det = [&](Scalar lambda) {
      ++evaluations;
      return characteristic_det(which, lambda);
    };
    const auto bisect = [&](Scalar lo, Scalar dlo, Scalar hi, Scalar dhi) {
      return detail::bracketed_root(det, lo, dlo, hi, dhi, tol_rel);
    };

    std::vector<Scalar> roots;
    const auto add_root = [&](Scalar r) {
      if (!roots.empty()) {
        const Scalar gap = r - roots.back();
        if (gap <= degeneracy_tolerance(r)) {
          std::ostringstream os;
          os.precision(17);
          os << "eigenvalues " << static_cast<double>(roots.back()) << " and " << static_cast<double>(r) << " of "
             << to_string(which) << " are degenerate";
          throw DegenerateSpectrum(os.str());
        }
      }
      roots.push_back(r);
    };
    const auto step_size = [&]() {
      const Scalar n = Scalar(roots.size());
      return unit * unit * (2 * n + 1) / m * Scalar(options_.scan_fraction) / refine_factor;
    };

    const Scalar start = spectral_lower_bound(which);
    Scalar l0 = start - 1 - abs(start) / 20;
    Scalar d0 = det(l0);
    Scalar l1 = l0, d1 = d0;
    bool have_prev2 = false;
    Scalar lp2 = 0, dp2 = 0;
    while (roots.size() < count) {
      Scalar l2 = l1 + step_size();
      Scalar d2 = det(l2);
      if (d2 == 0) {
        add_root(l2);
        l2 += tol_rel * (1 + abs(l2)) * 4;
        d2 = det(l2);
        have_prev2 = false;
      } else if (detail::sign_of(d1) != 0 && detail::sign_of(d1) != detail::sign_of(d2)) {
        add_root(bisect(l1, d1, l2, d2));
        have_prev2 = false;
      } else if (have_prev2 && detail::sign_of(dp2) == detail::sign_of(d1) && abs(d1) < abs(dp2) && abs(d1) < abs(d2)) {
        for (Scalar r : inspect_dip(which, lp2, dp2, l2, d2, bisect, det)) add_root(r);
        have_prev2 = true;
      } else {
        have_prev2 = true;
      }
      lp2 = l1;
      dp2 = d1;
      l1 = l2;
      d1 = d2;
    }
    std::sort(roots.begin(), roots.end());
    roots.resize(count);
    return roots;
  }

  /// A local minimum of |det| without a sign change: either a hidden pair of
  /// close roots, a degenerate level, or nothing.
  template <typename Bisect, typename Det>
  std::vector<Scalar> inspect_dip(Which which, Scalar lo, Scalar dlo, Scalar hi, Scalar dhi, Bisect&& bisect,
                                  Det&& det) const {
    using std::abs;
    const int sign = detail::sign_of(dlo);
    const Scalar golden = (std::sqrt(Scalar(5)) - 1) / 2;
    Scalar a = lo, b = hi;
    Scalar c = b - golden * (b - a), d = a + golden * (b - a);
    Scalar fc = sign * det(c), fd = sign * det(d);
    const Scalar tol = Scalar(options_.root_tolerance) * (1 + abs(hi));
    for (int it = 0; it < 200 && b - a > tol; ++it) {
      if (fc < 0 || fd < 0) break;
      if (fc < fd) {
        b = d;
        d = c;
        fd = fc;
        c = b - golden * (b - a);
        fc = sign * det(c);
      } else {
        a = c;
        c = d;
        fc = fd;
        d = a + golden * (b - a);
        fd = sign * det(d);
      }
    }
    const Scalar mid = fc < fd ? c : d;
    const Scalar fmid = std::min(fc, fd);
    if (fmid < 0) {
      const Scalar dmid = sign * fmid;
      return {bisect(lo, dlo, mid, dmid), bisect(mid, dmid, hi, dhi)};
    }
    if (channels() >= 2) {
      const auto [y, dy] = detail::end_values_with(*plan_, problems_.left_h(which), mid);
      const Matrix phi = detail::characteristic_from_ends(y, dy, problems_.base().big_h);
      Eigen::JacobiSVD<Matrix> svd(phi);
      const auto& sv = svd.singularValues();
      if (sv(channels() - 2) <= Scalar(1e-6) * boundary_scale(y, dy)) {
        std::ostringstream os;
        os.precision(17);
        os << "determinant of " << to_string(which) << " touches zero without crossing near lambda = "
           << static_cast<double>(mid) << " (multiple eigenvalue)";
        throw DegenerateSpectrum(os.str());
      }
    }
    return {};
  }

  ProblemSet<Scalar> problems_;
  SolverOptions options_;
  std::shared_ptr<const detail::MagnusPlan<Scalar>> plan_;
};

/// det Phi(lambda) for a one-off query.
template <typename Scalar>
Scalar characteristic_det(const ProblemSet<Scalar>& problems, Which which, Scalar lambda) {
  return ForwardSolver<Scalar>(problems).characteristic_det(which, lambda);
}

template <typename Scalar>
std::vector<Scalar> locate_eigenvalues(const ProblemSet<Scalar>& problems, Which which, std::size_t count,
                                       SolverOptions options = {}) {
  return ForwardSolver<Scalar>(problems, options).locate_eigenvalues(which, count);
}

}  // namespace multisl
