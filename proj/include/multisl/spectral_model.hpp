#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <limits>
#include <numbers>
#include <sstream>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include "multisl/errors.hpp"
#include "multisl/quadrature.hpp"

namespace multisl {

/// Largest channel count supported by the stack-allocated channel types.
inline constexpr int kMaxChannels = 8;

template <typename Scalar>
using ChannelMatrix =
    Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor, kMaxChannels, kMaxChannels>;

template <typename Scalar>
using ChannelVector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1, Eigen::ColMajor, kMaxChannels, 1>;

template <typename Scalar>
using VectorX = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using MatrixX = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Two eigenvalues closer than this are treated as one degenerate level.
template <typename Scalar>
Scalar degeneracy_tolerance(Scalar lambda) {
  using std::abs;
  return Scalar(1e-6) * (1 + abs(lambda));
}

namespace detail {

inline void check_channels(Eigen::Index m) {
  if (m < 1 || m > kMaxChannels) {
    std::ostringstream os;
    os << "channel count " << m << " outside [1, " << kMaxChannels << "]";
    throw DimensionError(os.str());
  }
}

template <typename Derived>
bool is_symmetric(const Eigen::MatrixBase<Derived>& m) {
  using std::abs;
  if (m.rows() != m.cols()) return false;
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = r + 1; c < m.cols(); ++c)
      if (abs(m(r, c) - m(c, r)) > 1e-12 * (1 + abs(m(r, c)))) return false;
  return true;
}

template <typename Derived>
void require_symmetric(const Eigen::MatrixBase<Derived>& m, Eigen::Index channels, const std::string& name) {
  if (m.rows() != channels || m.cols() != channels) {
    std::ostringstream os;
    os << name << " is " << m.rows() << "x" << m.cols() << ", expected " << channels << "x" << channels;
    throw DimensionError(os.str());
  }
  if (!m.allFinite()) throw NonFiniteMatrix(name + " has non-finite entries");
  if (!is_symmetric(m)) throw ValidationError(name + " is not symmetric");
}

}  // namespace detail

/// Uniform grid of `n_points` samples on [0, a], both endpoints included.
template <typename Scalar>
class Grid {
 public:
  Grid(Scalar length, Eigen::Index n_points) : length_(length), n_points_(n_points) {
    if (!(length > 0) || !std::isfinite(static_cast<double>(length)))
      throw ValidationError("grid length must be positive and finite");
    if (n_points < 3) throw ValidationError("grid needs at least 3 points");
  }

  Scalar length() const { return length_; }
  Eigen::Index size() const { return n_points_; }
  Scalar spacing() const { return length_ / Scalar(n_points_ - 1); }
  Scalar x(Eigen::Index k) const { return Scalar(k) * spacing(); }

  VectorX<Scalar> points() const {
    VectorX<Scalar> xs(n_points_);
    for (Eigen::Index k = 0; k < n_points_; ++k) xs(k) = x(k);
    return xs;
  }

  VectorX<Scalar> simpson() const { return simpson_weights<Scalar>(n_points_, spacing()); }

 private:
  Scalar length_;
  Eigen::Index n_points_;
};

/// Real symmetric M x M potential sampled on a grid. Channel thresholds are
/// folded onto the diagonal at construction and are not kept separately.
template <typename Scalar>
class PotentialMatrix {
 public:
  using Matrix = ChannelMatrix<Scalar>;

  PotentialMatrix(Grid<Scalar> grid, std::vector<Matrix> samples, const ChannelVector<Scalar>& thresholds = {},
                  Scalar lipschitz_cap = std::numeric_limits<Scalar>::infinity())
      : grid_(std::move(grid)), samples_(std::move(samples)) {
    if (samples_.empty()) throw DimensionError("potential has no samples");
    channels_ = samples_.front().rows();
    detail::check_channels(channels_);
    if (static_cast<Eigen::Index>(samples_.size()) != grid_.size())
      throw DimensionError("sample count does not match grid size");
    if (thresholds.size() != 0 && thresholds.size() != channels_)
      throw DimensionError("threshold count does not match channel count");
    for (std::size_t k = 0; k < samples_.size(); ++k) {
      detail::require_symmetric(samples_[k], channels_, "potential sample " + std::to_string(k));
      if (thresholds.size() != 0) samples_[k].diagonal() += thresholds;
    }
    const Scalar step = grid_.spacing();
    for (std::size_t k = 1; k < samples_.size(); ++k) {
      const Scalar jump = (samples_[k] - samples_[k - 1]).cwiseAbs().maxCoeff();
      if (jump > lipschitz_cap * step) {
        std::ostringstream os;
        os << "potential jumps by " << jump << " between samples " << k - 1 << " and " << k;
        throw ValidationError(os.str());
      }
    }
  }

  /// Samples `f(x)` (returning an M x M symmetric matrix) on every grid point.
  template <typename Fn>
  static PotentialMatrix sample(const Grid<Scalar>& grid, Eigen::Index channels, Fn&& f,
                                const ChannelVector<Scalar>& thresholds = {},
                                Scalar lipschitz_cap = std::numeric_limits<Scalar>::infinity()) {
    detail::check_channels(channels);
    std::vector<Matrix> samples;
    samples.reserve(static_cast<std::size_t>(grid.size()));
    for (Eigen::Index k = 0; k < grid.size(); ++k) {
      Matrix v = f(grid.x(k));
      samples.push_back(std::move(v));
    }
    return PotentialMatrix(grid, std::move(samples), thresholds, lipschitz_cap);
  }

  static PotentialMatrix constant(const Grid<Scalar>& grid, const Matrix& value) {
    return PotentialMatrix(grid, std::vector<Matrix>(static_cast<std::size_t>(grid.size()), value));
  }

  Eigen::Index channels() const { return channels_; }
  const Grid<Scalar>& grid() const { return grid_; }
  const Matrix& operator[](Eigen::Index k) const { return samples_[static_cast<std::size_t>(k)]; }
  const std::vector<Matrix>& samples() const { return samples_; }

  /// Cubic Lagrange interpolation from the four nearest samples.
  Matrix interpolate(Scalar x) const {
    const Eigen::Index n = grid_.size();
    const Scalar h = grid_.spacing();
    Eigen::Index k = static_cast<Eigen::Index>(std::floor(static_cast<double>(x / h)));
    k = std::clamp<Eigen::Index>(k, 0, n - 2);
    const Eigen::Index width = std::min<Eigen::Index>(4, n);
    const Eigen::Index first = std::clamp<Eigen::Index>(k - 1, 0, n - width);
    Matrix out = Matrix::Zero(channels_, channels_);
    for (Eigen::Index j = first; j < first + width; ++j) {
      Scalar weight = 1;
      for (Eigen::Index l = first; l < first + width; ++l)
        if (l != j) weight *= (x - grid_.x(l)) / (grid_.x(j) - grid_.x(l));
      out += weight * samples_[static_cast<std::size_t>(j)];
    }
    return out;
  }

  /// Interval average (1/a) * integral of V(x) dx.
  Matrix mean() const {
    const VectorX<Scalar> w = grid_.simpson();
    Matrix acc = Matrix::Zero(channels_, channels_);
    for (Eigen::Index k = 0; k < grid_.size(); ++k) acc += w(k) * samples_[static_cast<std::size_t>(k)];
    return acc / grid_.length();
  }

  /// Smallest eigenvalue of V(x) over all samples.
  Scalar min_eigenvalue() const {
    Scalar lo = std::numeric_limits<Scalar>::infinity();
    for (const auto& s : samples_) {
      Eigen::SelfAdjointEigenSolver<Matrix> es(s, Eigen::EigenvaluesOnly);
      lo = std::min(lo, es.eigenvalues().minCoeff());
    }
    return lo;
  }

 private:
  Grid<Scalar> grid_;
  std::vector<Matrix> samples_;
  Eigen::Index channels_ = 0;
};

/// Left and right Robin matrices: y'(0) = h y(0), y'(a) = -H y(a).
template <typename Scalar>
struct BoundarySpec {
  ChannelMatrix<Scalar> h;
  ChannelMatrix<Scalar> big_h;

  void validate(Eigen::Index channels) const {
    detail::require_symmetric(h, channels, "left boundary matrix h");
    detail::require_symmetric(big_h, channels, "right boundary matrix H");
  }
};

/// Selects the base problem or one of the perturbed problems (0-based index).
struct Which {
  static constexpr std::size_t kBase = static_cast<std::size_t>(-1);
  std::size_t index = kBase;

  static constexpr Which base() { return Which{}; }
  static constexpr Which perturbed(std::size_t i) { return Which{i}; }
  constexpr bool is_base() const { return index == kBase; }
  friend constexpr bool operator==(Which, Which) = default;
};

inline std::string to_string(Which w) {
  return w.is_base() ? std::string("base") : "perturbed(" + std::to_string(w.index + 1) + ")";
}

/// One potential, the base boundary pair (h, H) and M perturbed left matrices h_i
/// that share H.
template <typename Scalar>
class ProblemSet {
 public:
  using Matrix = ChannelMatrix<Scalar>;

  ProblemSet(PotentialMatrix<Scalar> potential, BoundarySpec<Scalar> base, std::vector<Matrix> perturbed_h)
      : potential_(std::move(potential)), base_(std::move(base)), perturbed_h_(std::move(perturbed_h)) {
    const Eigen::Index m = potential_.channels();
    base_.validate(m);
    if (static_cast<Eigen::Index>(perturbed_h_.size()) != m) {
      std::ostringstream os;
      os << "expected " << m << " perturbed boundary matrices, got " << perturbed_h_.size();
      throw DimensionError(os.str());
    }
    for (std::size_t i = 0; i < perturbed_h_.size(); ++i) {
      const std::string name = "perturbed boundary matrix h_" + std::to_string(i + 1);
      detail::require_symmetric(perturbed_h_[i], m, name);
      const Scalar diff = (perturbed_h_[i] - base_.h).cwiseAbs().maxCoeff();
      if (!(diff > Scalar(1e-12) * (1 + base_.h.cwiseAbs().maxCoeff())))
        throw ValidationError(name + " equals the base matrix h");
    }
  }

  /// A problem set without perturbed problems (reference operators).
  static ProblemSet single(PotentialMatrix<Scalar> potential, BoundarySpec<Scalar> base) {
    return ProblemSet(std::move(potential), std::move(base), Unchecked{});
  }

  Eigen::Index channels() const { return potential_.channels(); }
  const PotentialMatrix<Scalar>& potential() const { return potential_; }
  const BoundarySpec<Scalar>& base() const { return base_; }
  const std::vector<Matrix>& perturbed_h() const { return perturbed_h_; }
  std::size_t perturbation_count() const { return perturbed_h_.size(); }
  Scalar length() const { return potential_.grid().length(); }

  const Matrix& left_h(Which which) const {
    if (which.is_base()) return base_.h;
    if (which.index >= perturbed_h_.size())
      throw IndexError("perturbation index " + std::to_string(which.index) + " out of range");
    return perturbed_h_[which.index];
  }

  /// h_i - h for perturbation i.
  Matrix difference(std::size_t i) const { return left_h(Which::perturbed(i)) - base_.h; }

 private:
  struct Unchecked {};
  ProblemSet(PotentialMatrix<Scalar> potential, BoundarySpec<Scalar> base, Unchecked)
      : potential_(std::move(potential)), base_(std::move(base)) {
    base_.validate(potential_.channels());
  }

  PotentialMatrix<Scalar> potential_;
  BoundarySpec<Scalar> base_;
  std::vector<Matrix> perturbed_h_;
};

namespace detail {

template <typename Scalar>
void require_strictly_increasing(const std::vector<Scalar>& values, const std::string& name) {
  for (std::size_t k = 1; k < values.size(); ++k) {
    if (!(values[k] - values[k - 1] > degeneracy_tolerance(values[k]))) {
      std::ostringstream os;
      os.precision(17);
      os << name << " entries " << k - 1 << " and " << k << " (" << values[k - 1] << ", " << values[k]
         << ") are not separated by the degeneracy tolerance";
      throw DegenerateSpectrum(os.str());
    }
  }
}

}  // namespace detail

/// The M+1 ordered eigenvalue lists at a common truncation depth N.
template <typename Scalar>
class SpectraSet {
 public:
  SpectraSet(std::vector<Scalar> base, std::vector<std::vector<Scalar>> perturbed)
      : base_(std::move(base)), perturbed_(std::move(perturbed)) {
    if (base_.empty()) throw ValidationError("empty base spectrum");
    detail::require_strictly_increasing(base_, "base spectrum");
    for (std::size_t i = 0; i < perturbed_.size(); ++i) {
      if (perturbed_[i].size() != base_.size())
        throw DimensionError("perturbed spectrum " + std::to_string(i + 1) + " has a different length");
      detail::require_strictly_increasing(perturbed_[i], "perturbed spectrum " + std::to_string(i + 1));
    }
  }

  const std::vector<Scalar>& base() const { return base_; }
  const std::vector<Scalar>& perturbed(std::size_t i) const { return perturbed_.at(i); }
  std::size_t perturbation_count() const { return perturbed_.size(); }
  std::size_t truncation() const { return base_.size(); }

  /// Leading `n` entries of every list.
  SpectraSet truncated(std::size_t n) const {
    if (n == 0 || n > truncation()) throw IndexError("truncation " + std::to_string(n) + " out of range");
    std::vector<Scalar> b(base_.begin(), base_.begin() + static_cast<std::ptrdiff_t>(n));
    std::vector<std::vector<Scalar>> p;
    for (const auto& s : perturbed_) p.emplace_back(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(n));
    return SpectraSet(std::move(b), std::move(p));
  }

 private:
  std::vector<Scalar> base_;
  std::vector<std::vector<Scalar>> perturbed_;
};

/// Flips `v` so that its first non-negligible component is positive.
template <typename Derived>
void normalize_sign(Eigen::MatrixBase<Derived>& v) {
  using std::abs;
  using Scalar = typename Derived::Scalar;
  const Scalar scale = v.cwiseAbs().maxCoeff();
  for (Eigen::Index k = 0; k < v.size(); ++k) {
    if (abs(v(k)) > Scalar(1e-8) * scale) {
      if (v(k) < 0) v = -v;
      return;
    }
  }
}

/// An eigenvalue with its norming vector (value at x = 0 of the unit-norm
/// eigenfunction).
template <typename Scalar>
struct NormingVector {
  Scalar lambda{};
  ChannelVector<Scalar> gamma;
};

/// h_i - h of Jacobi type: one diagonal entry at `pivot`, symmetric
/// off-diagonal couplings off[k] between channels k and k+1.
template <typename Scalar>
struct PerturbationJacobi {
  Eigen::Index pivot = 0;
  Scalar diagonal{};
  ChannelVector<Scalar> off;

  Eigen::Index channels() const { return off.size() + 1; }
};

/// h_i - h supported on row and column `pivot`.
template <typename Scalar>
struct PerturbationCross {
  Eigen::Index pivot = 0;
  ChannelVector<Scalar> row;

  Eigen::Index channels() const { return row.size(); }
};

template <typename Scalar>
using Perturbation = std::variant<PerturbationJacobi<Scalar>, PerturbationCross<Scalar>>;

/// Asymptotic continuation of the spectra beyond the truncation depth. The
/// base eigenvalue at merged 1-based index mu is modelled as
/// (pi * mu_eff / a)^2 + asymptotic_offset, mu_eff = ceil(mu / M) - index_offset,
/// and the perturbed ones as that plus shift_estimates[i].
template <typename Scalar>
struct TailModel {
  std::size_t truncation = 0;
  std::vector<Scalar> shift_estimates;
  Scalar asymptotic_offset{};
  Scalar interval_length = std::numbers::pi_v<Scalar>;
  Eigen::Index channels = 1;
  long index_offset = 0;

  Scalar predicted(std::size_t mu) const {
    const auto m = static_cast<std::size_t>(channels);
    const long level = static_cast<long>((mu + m - 1) / m) - index_offset;
    const Scalar k = std::numbers::pi_v<Scalar> * Scalar(level) / interval_length;
    return k * k + asymptotic_offset;
  }
};

/// v^T m v.
template <typename DerivedM, typename DerivedV>
typename DerivedM::Scalar quadratic_form(const Eigen::MatrixBase<DerivedM>& m, const Eigen::MatrixBase<DerivedV>& v) {
  if (m.rows() != m.cols() || m.cols() != v.size()) {
    std::ostringstream os;
    os << "quadratic form of a " << m.rows() << "x" << m.cols() << " matrix with a " << v.size() << "-vector";
    throw DimensionError(os.str());
  }
  return v.dot(m * v);
}

template <typename Scalar>
ChannelMatrix<Scalar> assemble_perturbation(const PerturbationJacobi<Scalar>& p) {
  const Eigen::Index m = p.channels();
  detail::check_channels(m);
  if (p.pivot < 0 || p.pivot >= m) throw IndexError("Jacobi pivot " + std::to_string(p.pivot) + " out of range");
  if (!p.off.allFinite() || !std::isfinite(static_cast<double>(p.diagonal)))
    throw NonFiniteMatrix("Jacobi perturbation has non-finite entries");
  ChannelMatrix<Scalar> out = ChannelMatrix<Scalar>::Zero(m, m);
  out(p.pivot, p.pivot) = p.diagonal;
  for (Eigen::Index k = 0; k + 1 < m; ++k) {
    out(k, k + 1) = p.off(k);
    out(k + 1, k) = p.off(k);
  }
  return out;
}

template <typename Scalar>
ChannelMatrix<Scalar> assemble_perturbation(const PerturbationCross<Scalar>& p) {
  const Eigen::Index m = p.channels();
  detail::check_channels(m);
  if (p.pivot < 0 || p.pivot >= m) throw IndexError("cross pivot " + std::to_string(p.pivot) + " out of range");
  if (!p.row.allFinite()) throw NonFiniteMatrix("cross perturbation has non-finite entries");
  ChannelMatrix<Scalar> out = ChannelMatrix<Scalar>::Zero(m, m);
  out.row(p.pivot) = p.row.transpose();
  out.col(p.pivot) = p.row;
  return out;
}

template <typename Scalar>
ChannelMatrix<Scalar> assemble_perturbation(const Perturbation<Scalar>& p) {
  return std::visit([](const auto& q) { return assemble_perturbation(q); }, p);
}

}  // namespace multisl
