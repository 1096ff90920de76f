#pragma once

#include <Eigen/Core>
#include <Eigen/LU>
#include <Eigen/SVD>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "multisl/errors.hpp"
#include "multisl/forward_solver.hpp"
#include "multisl/spectral_model.hpp"

namespace multisl {

/// Q(n, i): the value gamma_n^T (h_i - h) gamma_n forced by the product
/// formula. Rows are 0-based merged eigenvalue indices.
template <typename Scalar>
struct QuadraticFormTargets {
  MatrixX<Scalar> values;
  MatrixX<Scalar> denominators;  ///< truncated product times tail factor

  std::size_t truncation() const { return static_cast<std::size_t>(values.rows()); }
  std::size_t perturbation_count() const { return static_cast<std::size_t>(values.cols()); }
  Scalar operator()(std::size_t n, std::size_t i) const {
    return values(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(i));
  }
};

namespace detail {

template <typename Scalar>
void require_index(std::size_t n, std::size_t i, const SpectraSet<Scalar>& spectra) {
  if (n >= spectra.truncation())
    throw IndexError("eigenvalue index " + std::to_string(n) + " beyond truncation " +
                     std::to_string(spectra.truncation()));
  if (i >= spectra.perturbation_count())
    throw IndexError("perturbation index " + std::to_string(i) + " out of range");
}

/// Levels of complete channel groups used for tail estimation: the last
/// `window` merged indices, aligned to whole levels and split into two equal
/// halves.
inline std::pair<std::size_t, std::size_t> tail_window(std::size_t truncation, std::size_t channels) {
  const std::size_t half_levels = std::max<std::size_t>(1, (5 + channels - 1) / channels);
  const std::size_t end = truncation - truncation % channels;
  const std::size_t width = 2 * half_levels * channels;
  if (end < width) {
    std::ostringstream os;
    os << "truncation " << truncation << " is too short for a " << width << "-entry tail window";
    throw TailUnstable(os.str());
  }
  return {end - width, end};
}

}  // namespace detail

/// Product over mu != n of (lambda_mu - lambda_n) / (lambda_mu^i - lambda_n),
/// accumulated as a log magnitude with a separate sign.
template <typename Scalar>
Scalar truncated_product(std::size_t n, std::size_t i, const SpectraSet<Scalar>& spectra) {
  using std::abs;
  using std::log;
  detail::require_index(n, i, spectra);
  const auto& base = spectra.base();
  const auto& pert = spectra.perturbed(i);
  const Scalar ln = base[n];
  Scalar log_sum = 0;
  int sign = 1;
  for (std::size_t mu = 0; mu < base.size(); ++mu) {
    if (mu == n) continue;
    const Scalar num = base[mu] - ln;
    const Scalar den = pert[mu] - ln;
    if (abs(den) < degeneracy_tolerance(ln)) {
      std::ostringstream os;
      os.precision(17);
      os << "perturbed eigenvalue " << static_cast<double>(pert[mu]) << " (index " << mu + 1 << ", spectrum "
         << i + 1 << ") collides with base eigenvalue " << static_cast<double>(ln) << " (index " << n + 1 << ")";
      throw CrossSpectrumCollision(os.str());
    }
    if ((num < 0) != (den < 0)) sign = -sign;
    log_sum += log(abs(num)) - log(abs(den));
  }
  return sign * std::exp(log_sum);
}

/// Offset between the 1-based level ceil(mu / M) and sqrt(lambda_mu) a / pi,
/// as the median over merged indices [first, last) of the base spectrum
/// (1 for Neumann-like ladders starting at k = 0).
template <typename Scalar>
long infer_index_offset(const std::vector<Scalar>& base, Scalar length, Eigen::Index channels, std::size_t first,
                        std::size_t last) {
  using std::sqrt;
  const auto m = static_cast<std::size_t>(channels);
  if (first >= last || last > base.size()) throw IndexError("index offset window out of range");
  std::vector<long> offsets;
  for (std::size_t mu = first; mu < last; ++mu) {
    const long level = static_cast<long>(mu / m + 1);
    const Scalar k = sqrt(std::max(Scalar(0), base[mu])) * length / std::numbers::pi_v<Scalar>;
    offsets.push_back(level - std::lround(static_cast<double>(k)));
  }
  std::nth_element(offsets.begin(), offsets.begin() + static_cast<std::ptrdiff_t>(offsets.size() / 2), offsets.end());
  return offsets[offsets.size() / 2];
}

template <typename Scalar>
long infer_index_offset(const std::vector<Scalar>& base, Scalar length, Eigen::Index channels) {
  const auto m = static_cast<std::size_t>(channels);
  const std::size_t end = base.size() - base.size() % m;
  const std::size_t width = std::min(end, 10 * m);
  if (width == 0) throw ValidationError("too few eigenvalues to infer the level offset");
  return infer_index_offset(base, length, channels, end - width, end);
}

/// Fits the asymptotic continuation lambda_mu ~ (pi mu_eff / a)^2 + c and the
/// perturbed shifts d_i from the top of the computed spectra.
template <typename Scalar>
TailModel<Scalar> estimate_tail_model(const SpectraSet<Scalar>& spectra, Scalar length, Eigen::Index channels) {
  using std::abs;
  using std::sqrt;
  detail::check_channels(channels);
  if (!(length > 0)) throw ValidationError("interval length must be positive");
  const auto m = static_cast<std::size_t>(channels);
  const auto [first, last] = detail::tail_window(spectra.truncation(), m);
  const auto& base = spectra.base();
  const Scalar pi = std::numbers::pi_v<Scalar>;

  TailModel<Scalar> tail;
  tail.truncation = spectra.truncation();
  tail.interval_length = length;
  tail.channels = channels;

  tail.index_offset = infer_index_offset(base, length, channels, first, last);

  Scalar c = 0;
  for (std::size_t mu = first; mu < last; ++mu) {
    const Scalar k = pi * Scalar(static_cast<long>(mu / m + 1) - tail.index_offset) / length;
    c += base[mu] - k * k;
  }
  tail.asymptotic_offset = c / Scalar(last - first);

  const std::size_t mid = first + (last - first) / 2;
  const Scalar floor_scale = Scalar(1e-6) * (pi / length) * (pi / length);
  for (std::size_t i = 0; i < spectra.perturbation_count(); ++i) {
    const auto& pert = spectra.perturbed(i);
    Scalar lower = 0, upper = 0;
    for (std::size_t mu = first; mu < mid; ++mu) lower += pert[mu] - base[mu];
    for (std::size_t mu = mid; mu < last; ++mu) upper += pert[mu] - base[mu];
    lower /= Scalar(mid - first);
    upper /= Scalar(last - mid);
    const Scalar d = (lower + upper) / 2;
    if (!std::isfinite(static_cast<double>(d)) || abs(upper - lower) > Scalar(0.2) * abs(d) + floor_scale) {
      std::ostringstream os;
      os << "shift estimate for spectrum " << i + 1 << " has not settled: window halves give "
         << static_cast<double>(lower) << " and " << static_cast<double>(upper);
      throw TailUnstable(os.str());
    }
    tail.shift_estimates.push_back(d);
  }
  return tail;
}

/// Estimate of prod_{mu > N} (lambda_mu - lambda_n) / (lambda_mu^i - lambda_n)
/// under the tail model: direct summation up to 100 N plus a closed-form
/// remainder.
template <typename Scalar>
Scalar tail_correction(std::size_t n, std::size_t i, const TailModel<Scalar>& tail, const SpectraSet<Scalar>& spectra) {
  using std::log1p;
  detail::require_index(n, i, spectra);
  if (i >= tail.shift_estimates.size()) throw IndexError("tail model has no shift for perturbation " + std::to_string(i));
  const Scalar d = tail.shift_estimates[i];
  if (!std::isfinite(static_cast<double>(d))) throw TailUnstable("non-finite shift estimate");
  if (d == 0) return 1;
  const Scalar ln = spectra.base()[n];
  const std::size_t start = tail.truncation + 1;
  const std::size_t stop = 100 * tail.truncation;
  Scalar log_sum = 0;
  for (std::size_t mu = start; mu <= stop; ++mu) {
    const Scalar gap = tail.predicted(mu) - ln;
    if (!(gap > 0) || !(gap + d > 0)) {
      std::ostringstream os;
      os << "tail model predicts a level below lambda_n at index " << mu;
      throw TailUnstable(os.str());
    }
    log_sum -= log1p(d / gap);
  }
  const auto m = static_cast<std::size_t>(tail.channels);
  const Scalar level = Scalar(static_cast<long>((stop + m - 1) / m) - tail.index_offset) + Scalar(0.5);
  const Scalar scale = tail.interval_length / std::numbers::pi_v<Scalar>;
  log_sum -= Scalar(tail.channels) * d * scale * scale / level;
  return std::exp(log_sum);
}

template <typename Scalar>
QuadraticFormTargets<Scalar> quadratic_form_targets(const SpectraSet<Scalar>& spectra, const TailModel<Scalar>& tail,
                                                    bool apply_tail = true) {
  const auto n_max = static_cast<Eigen::Index>(spectra.truncation());
  const auto m = static_cast<Eigen::Index>(spectra.perturbation_count());
  QuadraticFormTargets<Scalar> out{MatrixX<Scalar>(n_max, m), MatrixX<Scalar>(n_max, m)};
  for (Eigen::Index n = 0; n < n_max; ++n) {
    for (Eigen::Index i = 0; i < m; ++i) {
      const auto nn = static_cast<std::size_t>(n);
      const auto ii = static_cast<std::size_t>(i);
      const Scalar shift = spectra.perturbed(ii)[nn] - spectra.base()[nn];
      Scalar denom = truncated_product(nn, ii, spectra);
      if (apply_tail) denom *= tail_correction(nn, ii, tail, spectra);
      out.values(n, i) = shift / denom;
      out.denominators(n, i) = denom;
    }
  }
  return out;
}

/// Gamma from the targets of row n, with the linear solve diagnostics.
template <typename Scalar>
struct SchemeSolution {
  ChannelVector<Scalar> gamma;
  ChannelVector<Scalar> unknowns;
  Scalar condition{};
};

namespace detail {

template <typename Scalar>
ChannelVector<Scalar> solve_scheme_system(const ChannelMatrix<Scalar>& a, const ChannelVector<Scalar>& rhs,
                                          Scalar& condition) {
  Eigen::JacobiSVD<ChannelMatrix<Scalar>> svd(a);
  const auto& sv = svd.singularValues();
  const Scalar smax = sv(0), smin = sv(sv.size() - 1);
  condition = smin > 0 ? smax / smin : std::numeric_limits<Scalar>::infinity();
  if (!(condition <= Scalar(1e12))) {
    std::ostringstream os;
    os << "scheme coefficient matrix is singular (condition " << static_cast<double>(condition) << ")";
    throw SingularSystem(os.str());
  }
  return a.partialPivLu().solve(rhs);
}

template <typename Scalar>
ChannelVector<Scalar> target_row(const QuadraticFormTargets<Scalar>& targets, std::size_t n, Eigen::Index m) {
  if (n >= targets.truncation()) throw IndexError("eigenvalue index " + std::to_string(n) + " beyond the targets");
  if (static_cast<Eigen::Index>(targets.perturbation_count()) != m)
    throw DimensionError("targets have " + std::to_string(targets.perturbation_count()) + " columns, expected " +
                         std::to_string(m));
  return targets.values.row(static_cast<Eigen::Index>(n)).transpose();
}

/// Rounding in the eigenvalues, relative size `accuracy`, propagated into
/// unknown `row` of the scheme solution for index n.
template <typename Scalar>
Scalar unknown_noise(const ChannelMatrix<Scalar>& coefficients, Eigen::Index row,
                     const QuadraticFormTargets<Scalar>& targets, std::size_t n, Scalar lambda_n, Scalar accuracy) {
  using std::abs;
  if (!(accuracy > 0) || targets.denominators.size() == 0) return 0;
  const ChannelMatrix<Scalar> inv = coefficients.inverse();
  const auto nn = static_cast<Eigen::Index>(n);
  const Scalar shift_noise = 2 * accuracy * (1 + abs(lambda_n));
  Scalar noise = 0;
  for (Eigen::Index i = 0; i < inv.cols(); ++i) noise += abs(inv(row, i)) * shift_noise / abs(targets.denominators(nn, i));
  return noise;
}

}  // namespace detail

/// Coefficient matrix of the Jacobi linearization: row i is
/// (xi_ll, 2 xi_{0,1}, ..., 2 xi_{M-2,M-1}) of perturbation i.
template <typename Scalar>
ChannelMatrix<Scalar> jacobi_coefficients(const std::vector<PerturbationJacobi<Scalar>>& perts) {
  const auto m = static_cast<Eigen::Index>(perts.size());
  detail::check_channels(m);
  const Eigen::Index pivot = perts.front().pivot;
  ChannelMatrix<Scalar> a(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& p = perts[static_cast<std::size_t>(i)];
    if (p.channels() != m) throw DimensionError("Jacobi perturbation has the wrong channel count");
    if (p.pivot != pivot) throw ValidationError("Jacobi perturbations must share one pivot");
    assemble_perturbation(p);
    a(i, 0) = p.diagonal;
    for (Eigen::Index k = 1; k < m; ++k) a(i, k) = 2 * p.off(k - 1);
  }
  return a;
}

/// Coefficient matrix of the cross linearization: row i is
/// (2 zeta_{l,0}, ..., zeta_{l,l}, ..., 2 zeta_{l,M-1}) of perturbation i.
template <typename Scalar>
ChannelMatrix<Scalar> cross_coefficients(const std::vector<PerturbationCross<Scalar>>& perts) {
  const auto m = static_cast<Eigen::Index>(perts.size());
  detail::check_channels(m);
  const Eigen::Index pivot = perts.front().pivot;
  ChannelMatrix<Scalar> b(m, m);
  for (Eigen::Index i = 0; i < m; ++i) {
    const auto& p = perts[static_cast<std::size_t>(i)];
    if (p.channels() != m) throw DimensionError("cross perturbation has the wrong channel count");
    if (p.pivot != pivot) throw ValidationError("cross perturbations must share one pivot");
    assemble_perturbation(p);
    for (Eigen::Index k = 0; k < m; ++k) b(i, k) = (k == pivot ? 1 : 2) * p.row(k);
  }
  return b;
}

/// Jacobi scheme: omega_0 = gamma_l^2, omega_k = gamma_{k-1} gamma_k, then
/// unfold the chain outwards from the pivot l with gamma_l > 0.
template <typename Scalar>
SchemeSolution<Scalar> solve_jacobi_scheme(const QuadraticFormTargets<Scalar>& targets,
                                           const std::vector<PerturbationJacobi<Scalar>>& perts, std::size_t n,
                                           Scalar pivot_floor = 0) {
  using std::sqrt;
  const ChannelMatrix<Scalar> a = jacobi_coefficients(perts);
  const Eigen::Index m = a.rows();
  SchemeSolution<Scalar> out;
  out.unknowns = detail::solve_scheme_system(a, detail::target_row(targets, n, m), out.condition);
  const ChannelVector<Scalar>& w = out.unknowns;
  if (!(w(0) > pivot_floor)) {
    std::ostringstream os;
    os << "omega_pivot = " << static_cast<double>(w(0)) << " is not positive at index " << n + 1;
    throw NonPositivePivot(os.str());
  }
  const Eigen::Index l = perts.front().pivot;
  ChannelVector<Scalar> g(m);
  g(l) = sqrt(w(0));
  for (Eigen::Index k = l + 1; k < m; ++k) {
    if (g(k - 1) == 0) throw ChainBreak("gamma_" + std::to_string(k - 1) + " vanishes while unfolding");
    g(k) = w(k) / g(k - 1);
  }
  for (Eigen::Index k = l - 1; k >= 0; --k) {
    if (g(k + 1) == 0) throw ChainBreak("gamma_" + std::to_string(k + 1) + " vanishes while unfolding");
    g(k) = w(k + 1) / g(k + 1);
  }
  normalize_sign(g);
  out.gamma = g;
  return out;
}

/// Cross scheme: theta_l = gamma_l^2, theta_k = gamma_l gamma_k.
template <typename Scalar>
SchemeSolution<Scalar> solve_cross_scheme(const QuadraticFormTargets<Scalar>& targets,
                                          const std::vector<PerturbationCross<Scalar>>& perts, std::size_t n,
                                          Scalar pivot_floor = 0) {
  using std::sqrt;
  const ChannelMatrix<Scalar> b = cross_coefficients(perts);
  const Eigen::Index m = b.rows();
  SchemeSolution<Scalar> out;
  out.unknowns = detail::solve_scheme_system(b, detail::target_row(targets, n, m), out.condition);
  const Eigen::Index l = perts.front().pivot;
  const Scalar theta_l = out.unknowns(l);
  if (!(theta_l > pivot_floor)) {
    std::ostringstream os;
    os << "theta_pivot = " << static_cast<double>(theta_l) << " is not positive at index " << n + 1;
    throw NonPositivePivot(os.str());
  }
  const Scalar gl = sqrt(theta_l);
  ChannelVector<Scalar> g = out.unknowns / gl;
  g(l) = gl;
  normalize_sign(g);
  out.gamma = g;
  return out;
}

template <typename Scalar>
struct JacobiScheme {
  std::vector<PerturbationJacobi<Scalar>> perturbations;
};

template <typename Scalar>
struct CrossScheme {
  std::vector<PerturbationCross<Scalar>> perturbations;
};

/// Cross-scheme data used to retry indices where the Jacobi pivot fails.
template <typename Scalar>
struct CrossFallback {
  CrossScheme<Scalar> scheme;
  SpectraSet<Scalar> spectra;
  TailModel<Scalar> tail;
};

/// Condition number of the scheme's coefficient matrix; SingularSystem when
/// it exceeds 1e12.
template <typename Scalar>
Scalar scheme_condition(const JacobiScheme<Scalar>& scheme) {
  Scalar condition{};
  const ChannelMatrix<Scalar> a = jacobi_coefficients(scheme.perturbations);
  detail::solve_scheme_system(a, ChannelVector<Scalar>::Zero(a.rows()).eval(), condition);
  return condition;
}

template <typename Scalar>
Scalar scheme_condition(const CrossScheme<Scalar>& scheme) {
  Scalar condition{};
  const ChannelMatrix<Scalar> b = cross_coefficients(scheme.perturbations);
  detail::solve_scheme_system(b, ChannelVector<Scalar>::Zero(b.rows()).eval(), condition);
  return condition;
}

template <typename Scalar>
struct RecoveredNorming {
  std::size_t index = 0;  ///< 0-based merged eigenvalue index
  NormingVector<Scalar> value;
  bool ok = false;
  bool used_fallback = false;
  Scalar condition{};
  Scalar tail_magnitude{};  ///< max_i |T_i - 1|
  std::optional<ErrorCode> error;
  std::string message;
};

template <typename Scalar>
struct RecoveryOptions {
  bool apply_tail = true;
  /// Relative accuracy of the supplied eigenvalues. A pivot unknown within ten
  /// times the noise this induces is treated as zero.
  Scalar eigenvalue_accuracy = Scalar(1e-12);
  std::optional<CrossFallback<Scalar>> fallback;
};

/// Recovers every gamma_n, n < N, from the spectra alone. A singular scheme
/// throws up front; other failures are recorded per index.
template <typename Scalar, typename Scheme>
std::vector<RecoveredNorming<Scalar>> recover_all(const SpectraSet<Scalar>& spectra, const Scheme& scheme,
                                                  const TailModel<Scalar>& tail,
                                                  const RecoveryOptions<Scalar>& options = {}) {
  const std::size_t n_max = spectra.truncation();
  if (scheme.perturbations.size() != spectra.perturbation_count())
    throw DimensionError("scheme has " + std::to_string(scheme.perturbations.size()) + " perturbations for " +
                         std::to_string(spectra.perturbation_count()) + " perturbed spectra");
  scheme_condition(scheme);
  const QuadraticFormTargets<Scalar> targets = quadratic_form_targets(spectra, tail, options.apply_tail);
  std::optional<QuadraticFormTargets<Scalar>> fallback_targets;

  std::vector<RecoveredNorming<Scalar>> out(n_max);
  for (std::size_t n = 0; n < n_max; ++n) {
    auto& r = out[n];
    r.index = n;
    r.value.lambda = spectra.base()[n];
    if (options.apply_tail) {
      for (std::size_t i = 0; i < spectra.perturbation_count(); ++i) {
        using std::abs;
        r.tail_magnitude = std::max(r.tail_magnitude, abs(tail_correction(n, i, tail, spectra) - 1));
      }
    }
    const auto floor = [&](const QuadraticFormTargets<Scalar>& t, const ChannelMatrix<Scalar>& c, Eigen::Index row) {
      return 10 * detail::unknown_noise(c, row, t, n, r.value.lambda, options.eigenvalue_accuracy);
    };
    try {
      SchemeSolution<Scalar> s;
      if constexpr (std::is_same_v<Scheme, JacobiScheme<Scalar>>) {
        try {
          s = solve_jacobi_scheme(targets, scheme.perturbations, n,
                                  floor(targets, jacobi_coefficients(scheme.perturbations), 0));
        } catch (const NonPositivePivot&) {
          if (!options.fallback) throw;
          const auto& fb = *options.fallback;
          if (fb.spectra.truncation() < n_max) throw;
          if (!fallback_targets)
            fallback_targets = quadratic_form_targets(fb.spectra.truncated(n_max), fb.tail, options.apply_tail);
          s = solve_cross_scheme(*fallback_targets, fb.scheme.perturbations, n,
                                 floor(*fallback_targets,
                                       cross_coefficients(fb.scheme.perturbations), fb.scheme.perturbations.front().pivot));
          r.used_fallback = true;
        }
      } else {
        s = solve_cross_scheme(targets, scheme.perturbations, n,
                               floor(targets, cross_coefficients(scheme.perturbations),
                                     scheme.perturbations.front().pivot));
      }
      r.value.gamma = s.gamma;
      r.condition = s.condition;
      r.ok = true;
    } catch (const Error& e) {
      r.error = e.code();
      r.message = e.what();
    }
  }
  return out;
}

/// Two-spectra formula for one channel: gamma_n^2 = (lambda_n^2 - lambda_n^1) /
/// ((h2 - h1) prod' (lambda_mu^1 - lambda_n^1) / (lambda_mu^2 - lambda_n^1) T).
template <typename Scalar>
std::vector<Scalar> two_spectra_one_channel(const std::vector<Scalar>& spec1, const std::vector<Scalar>& spec2,
                                            Scalar h1, Scalar h2, const TailModel<Scalar>& tail,
                                            bool apply_tail = true) {
  using std::abs;
  using std::log;
  using std::sqrt;
  if (spec1.size() != spec2.size() || spec1.empty()) throw DimensionError("spectra must be non-empty and equal length");
  const Scalar dh = h2 - h1;
  if (!(abs(dh) > 0)) throw NegativeSquare("h2 equals h1; the two-spectra formula is undefined");
  detail::require_strictly_increasing(spec1, "first spectrum");
  detail::require_strictly_increasing(spec2, "second spectrum");
  const SpectraSet<Scalar> set(spec1, {spec2});
  std::vector<Scalar> gammas(spec1.size());
  for (std::size_t n = 0; n < spec1.size(); ++n) {
    const Scalar ln = spec1[n];
    Scalar log_sum = 0;
    bool negative = false;
    for (std::size_t mu = 0; mu < spec1.size(); ++mu) {
      if (mu == n) continue;
      const Scalar num = spec1[mu] - ln;
      const Scalar den = spec2[mu] - ln;
      if (abs(den) < degeneracy_tolerance(ln))
        throw CrossSpectrumCollision("second spectrum collides with lambda_" + std::to_string(n + 1));
      negative ^= ((num < 0) != (den < 0));
      log_sum += log(abs(num) / abs(den));
    }
    Scalar product = std::exp(log_sum);
    if (negative) product = -product;
    if (apply_tail) product *= tail_correction(n, 0, tail, set);
    const Scalar square = (spec2[n] - ln) / (dh * product);
    if (!(square > 0)) {
      std::ostringstream os;
      os << "gamma_" << n + 1 << "^2 = " << static_cast<double>(square) << " is not positive";
      throw NegativeSquare(os.str());
    }
    gammas[n] = sqrt(square);
  }
  return gammas;
}

}  // namespace multisl
