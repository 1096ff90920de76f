#pragma once

#include <Eigen/Core>
#include <Eigen/Eigenvalues>
#include <Eigen/LU>

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
#include "multisl/quadrature.hpp"
#include "multisl/spectral_model.hpp"

namespace multisl {

/// Spectral data {lambda_n, gamma_n} and the comparison operator it is
/// measured against. The reference shares h and H with the unknown problem.
template <typename Scalar>
struct SpectralData {
  std::vector<NormingVector<Scalar>> entries;
  ProblemSet<Scalar> reference;

  std::size_t truncation() const { return entries.size(); }
};

struct GLOptions {
  /// Every stride-th point of the reference grid is a GL node.
  Eigen::Index stride = 1;
  unsigned threads = 1;
};

namespace detail {

template <typename Scalar>
void require_spectral_data(const SpectralData<Scalar>& data) {
  if (data.entries.empty()) throw ValidationError("spectral data is empty");
  const Eigen::Index m = data.reference.channels();
  std::vector<Scalar> lambdas;
  for (const auto& e : data.entries) {
    if (e.gamma.size() != m) throw DimensionError("norming vector length does not match the reference");
    if (!e.gamma.allFinite() || !std::isfinite(static_cast<double>(e.lambda)))
      throw NonFiniteMatrix("spectral data has non-finite entries");
    lambdas.push_back(e.lambda);
  }
  require_strictly_increasing(lambdas, "spectral data");
}

template <typename Scalar>
Grid<Scalar> gl_grid(const Grid<Scalar>& fine, Eigen::Index stride) {
  if (stride < 1 || (fine.size() - 1) % stride != 0)
    throw ValidationError("GL stride " + std::to_string(stride) + " does not divide the reference grid");
  return Grid<Scalar>(fine.length(), (fine.size() - 1) / stride + 1);
}

}  // namespace detail

/// Forward spectral data of the reference problem at depth `count`.
template <typename Scalar>
std::vector<NormingVector<Scalar>> reference_spectral_data(const ProblemSet<Scalar>& reference, std::size_t count,
                                                           const SolverOptions& options = {}) {
  const ForwardSolver<Scalar> solver(reference, options);
  const auto lambdas = solver.locate_eigenvalues(Which::base(), count);
  std::vector<NormingVector<Scalar>> out(count);
  detail::parallel_for(count, options.threads,
                       [&](std::size_t n) { out[n] = solver.direct_norming_vector(Which::base(), lambdas[n]); });
  return out;
}

/// Input kernel F(x, t) on a GL grid, held as the difference of two Gram
/// products: F = U U^T - U0 U0^T with rows (x_j, alpha) and one column per
/// eigenvalue, u_n(x) = phi0(x, lambda_n) gamma_n.
template <typename Scalar>
class GLKernelField {
 public:
  GLKernelField(const SpectralData<Scalar>& data, const std::vector<NormingVector<Scalar>>& reference_entries,
                const GLOptions& options = {})
      : grid_(detail::gl_grid(data.reference.potential().grid(), options.stride)),
        channels_(data.reference.channels()) {
    detail::require_spectral_data(data);
    if (reference_entries.size() != data.truncation()) {
      std::ostringstream os;
      os << "data truncation " << data.truncation() << " differs from reference truncation "
         << reference_entries.size();
      throw TruncationMismatch(os.str());
    }
    const ForwardSolver<Scalar> solver(data.reference);
    const Eigen::Index rows = grid_.size() * channels_;
    const auto cols = static_cast<Eigen::Index>(data.truncation());
    MatrixX<Scalar> u(rows, cols), u0(rows, cols);
    detail::parallel_for(data.truncation(), options.threads, [&](std::size_t n) {
      fill_column(solver, data.entries[n], options.stride, u.col(static_cast<Eigen::Index>(n)));
      fill_column(solver, reference_entries[n], options.stride, u0.col(static_cast<Eigen::Index>(n)));
    });
    values_ = u * u.transpose();
    values_.noalias() -= u0 * u0.transpose();
  }

  const Grid<Scalar>& grid() const { return grid_; }
  Eigen::Index channels() const { return channels_; }

  /// F(x_j, x_k) as an M x M block.
  ChannelMatrix<Scalar> operator()(Eigen::Index j, Eigen::Index k) const {
    return values_.block(j * channels_, k * channels_, channels_, channels_);
  }

  /// Dense (G M) x (G M) matrix of all blocks.
  const MatrixX<Scalar>& dense() const { return values_; }

 private:
  template <typename Column>
  void fill_column(const ForwardSolver<Scalar>& solver, const NormingVector<Scalar>& entry, Eigen::Index stride,
                   Column&& col) const {
    const auto tr = solver.trace(Which::base(), entry.lambda);
    for (Eigen::Index j = 0; j < grid_.size(); ++j)
      col.segment(j * channels_, channels_) = tr.values[static_cast<std::size_t>(j * stride)] * entry.gamma;
  }

  Grid<Scalar> grid_;
  Eigen::Index channels_;
  MatrixX<Scalar> values_;
};

/// Input kernel at one pair of GL nodes.
template <typename Scalar>
ChannelMatrix<Scalar> input_kernel(const SpectralData<Scalar>& data,
                                   const std::vector<NormingVector<Scalar>>& reference_entries, Scalar x, Scalar t) {
  detail::require_spectral_data(data);
  if (reference_entries.size() != data.truncation()) throw TruncationMismatch("data and reference truncations differ");
  const ForwardSolver<Scalar> solver(data.reference);
  const Eigen::Index m = data.reference.channels();
  ChannelMatrix<Scalar> f = ChannelMatrix<Scalar>::Zero(m, m);
  const auto add = [&](const NormingVector<Scalar>& e, Scalar sign) {
    const auto tr = solver.trace(Which::base(), e.lambda);
    const auto& pot = data.reference.potential();
    const auto at = [&](Scalar y) {
      const Scalar h = pot.grid().spacing();
      const auto k = static_cast<std::size_t>(std::llround(static_cast<double>(y / h)));
      if (k >= tr.values.size() || std::abs(static_cast<double>(Scalar(k) * h - y)) > 1e-9 * static_cast<double>(h))
        throw ValidationError("kernel argument is not a grid point");
      return ChannelVector<Scalar>(tr.values[k] * e.gamma);
    };
    f += sign * at(x) * at(t).transpose();
  };
  for (std::size_t n = 0; n < data.truncation(); ++n) {
    add(data.entries[n], Scalar(1));
    add(reference_entries[n], Scalar(-1));
  }
  return f;
}

/// Solution of one GL row: K(x_j, t_k) for k <= j.
template <typename Scalar>
struct GLRow {
  std::vector<ChannelMatrix<Scalar>> kernel;
  Scalar residual{};
  Scalar inverse_rcond{};
};

/// Nystrom solve of K(x,t) + F(x,t) + int_0^x K(x,s) F(s,t) ds = 0 at x = x_j.
template <typename Scalar>
GLRow<Scalar> solve_gl_row(const GLKernelField<Scalar>& f, Eigen::Index j) {
  if (j < 0 || j >= f.grid().size()) throw IndexError("GL row " + std::to_string(j) + " out of range");
  const Eigen::Index m = f.channels();
  const Eigen::Index size = (j + 1) * m;
  const VectorX<Scalar> w = simpson_weights<Scalar>(j + 1, f.grid().spacing());
  const auto& dense = f.dense();

  MatrixX<Scalar> a = dense.topLeftCorner(size, size);
  for (Eigen::Index l = 0; l <= j; ++l) a.middleCols(l * m, m) *= w(l);
  a.diagonal().array() += 1;
  const MatrixX<Scalar> rhs = -dense.block(0, j * m, size, m);

  Eigen::PartialPivLU<MatrixX<Scalar>> lu(a);
  GLRow<Scalar> out;
  out.inverse_rcond = 1 / lu.rcond();
  if (!(out.inverse_rcond <= Scalar(1e12))) {
    std::ostringstream os;
    os << "GL system at x = " << static_cast<double>(f.grid().x(j)) << " has condition estimate "
       << static_cast<double>(out.inverse_rcond);
    throw IllConditionedGL(os.str());
  }
  const MatrixX<Scalar> kt = lu.solve(rhs);
  const Scalar scale = std::max(rhs.norm(), Scalar(1e-300));
  out.residual = (a * kt - rhs).norm() / std::max(scale, Scalar(1));
  out.kernel.reserve(static_cast<std::size_t>(j + 1));
  for (Eigen::Index k = 0; k <= j; ++k) out.kernel.push_back(kt.middleRows(k * m, m).transpose());
  return out;
}

template <typename Scalar>
struct GLDiagnostics {
  std::size_t truncation = 0;
  Scalar max_residual{};
  Scalar max_inverse_rcond{};
  Scalar max_asymmetry{};  ///< max_x |V - V^T| before symmetrization
  std::vector<Scalar> residuals;
};

template <typename Scalar>
struct Reconstruction {
  PotentialMatrix<Scalar> potential;
  GLDiagnostics<Scalar> diagnostics;
};

/// V = V0 + 2 d/dx K(x, x), second-order differences, then symmetrized.
/// `asymmetry` receives the largest entry of |V - V^T| before symmetrization.
template <typename Scalar>
PotentialMatrix<Scalar> extract_potential(const Grid<Scalar>& grid, const std::vector<ChannelMatrix<Scalar>>& diagonal,
                                          const std::vector<ChannelMatrix<Scalar>>& reference,
                                          Scalar* asymmetry = nullptr) {
  const Eigen::Index g = grid.size();
  if (static_cast<Eigen::Index>(diagonal.size()) != g || static_cast<Eigen::Index>(reference.size()) != g)
    throw DimensionError("kernel diagonal and reference potential must cover the grid");
  const Scalar h = grid.spacing();
  Scalar worst = 0;
  std::vector<ChannelMatrix<Scalar>> samples(static_cast<std::size_t>(g));
  for (Eigen::Index k = 0; k < g; ++k) {
    const auto at = [&](Eigen::Index i) -> const ChannelMatrix<Scalar>& { return diagonal[static_cast<std::size_t>(i)]; };
    ChannelMatrix<Scalar> d;
    if (k == 0) {
      d = (-3 * at(0) + 4 * at(1) - at(2)) / (2 * h);
    } else if (k == g - 1) {
      d = (3 * at(g - 1) - 4 * at(g - 2) + at(g - 3)) / (2 * h);
    } else {
      d = (at(k + 1) - at(k - 1)) / (2 * h);
    }
    ChannelMatrix<Scalar> v = reference[static_cast<std::size_t>(k)] + 2 * d;
    if (!v.allFinite()) throw NonFiniteMatrix("reconstructed potential has non-finite entries");
    worst = std::max(worst, (v - v.transpose()).cwiseAbs().maxCoeff());
    samples[static_cast<std::size_t>(k)] = (v + v.transpose()) / 2;
  }
  if (asymmetry) *asymmetry = worst;
  return PotentialMatrix<Scalar>(grid, std::move(samples));
}

/// Full GL reconstruction against precomputed reference spectral data.
template <typename Scalar>
Reconstruction<Scalar> reconstruct(const SpectralData<Scalar>& data,
                                   const std::vector<NormingVector<Scalar>>& reference_entries,
                                   const GLOptions& options = {}) {
  const GLKernelField<Scalar> field(data, reference_entries, options);
  const Eigen::Index g = field.grid().size();
  std::vector<ChannelMatrix<Scalar>> diagonal(static_cast<std::size_t>(g));
  GLDiagnostics<Scalar> diag;
  diag.truncation = data.truncation();
  diag.residuals.assign(static_cast<std::size_t>(g), Scalar(0));
  std::vector<Scalar> rconds(static_cast<std::size_t>(g), Scalar(0));
  detail::parallel_for(static_cast<std::size_t>(g), options.threads, [&](std::size_t j) {
    auto row = solve_gl_row(field, static_cast<Eigen::Index>(j));
    diagonal[j] = row.kernel.back();
    diag.residuals[j] = row.residual;
    rconds[j] = row.inverse_rcond;
  });
  diag.max_residual = *std::max_element(diag.residuals.begin(), diag.residuals.end());
  diag.max_inverse_rcond = *std::max_element(rconds.begin(), rconds.end());

  std::vector<ChannelMatrix<Scalar>> v0;
  v0.reserve(static_cast<std::size_t>(g));
  const auto& ref = data.reference.potential();
  for (Eigen::Index j = 0; j < g; ++j) v0.push_back(ref[j * options.stride]);
  auto potential = extract_potential(field.grid(), diagonal, v0, &diag.max_asymmetry);
  return {std::move(potential), std::move(diag)};
}

/// Reconstruction with the reference spectral data computed here.
template <typename Scalar>
Reconstruction<Scalar> reconstruct(const SpectralData<Scalar>& data, const GLOptions& options = {}) {
  SolverOptions so;
  so.threads = options.threads;
  return reconstruct(data, reference_spectral_data(data.reference, data.truncation(), so), options);
}

/// Constant comparison potential matching the high-lying part of the data:
/// each eigenvalue in the top window contributes
/// (lambda - (pi k / a)^2) gamma_hat gamma_hat^T per level, and the boundary
/// shift (2/a)(h + H) is removed.
template <typename Scalar>
ChannelMatrix<Scalar> asymptotic_reference_constant(const std::vector<NormingVector<Scalar>>& entries,
                                                    const BoundarySpec<Scalar>& boundary, Scalar length,
                                                    long index_offset, std::size_t window_levels = 5) {
  if (entries.empty()) throw ValidationError("no spectral data for the asymptotic fit");
  const Eigen::Index m = entries.front().gamma.size();
  const auto mm = static_cast<std::size_t>(m);
  const std::size_t end = entries.size() - entries.size() % mm;
  const std::size_t levels = std::min(window_levels, end / mm);
  if (levels == 0) throw ValidationError("too few eigenvalues for the asymptotic fit");
  ChannelMatrix<Scalar> acc = ChannelMatrix<Scalar>::Zero(m, m);
  for (std::size_t mu = end - levels * mm; mu < end; ++mu) {
    const Scalar k = std::numbers::pi_v<Scalar> * Scalar(static_cast<long>(mu / mm + 1) - index_offset) / length;
    const ChannelVector<Scalar> dir = entries[mu].gamma.normalized();
    acc += (entries[mu].lambda - k * k) * dir * dir.transpose();
  }
  acc /= Scalar(levels);
  acc -= (2 / length) * (boundary.h + boundary.big_h);
  return (acc + acc.transpose()) / 2;
}

}  // namespace multisl
