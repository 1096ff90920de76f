#pragma once

#include <Eigen/Core>
#include <cstddef>

namespace multisl {

/// Composite Simpson weights for `count` uniformly spaced samples with the
/// given spacing. An even sample count closes with the 3/8 rule on the last
/// three intervals; two samples fall back to the trapezoid rule.
template <typename Scalar>
Eigen::Matrix<Scalar, Eigen::Dynamic, 1> simpson_weights(Eigen::Index count, Scalar spacing) {
  using Vec = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;
  Vec w = Vec::Zero(count);
  if (count < 2) return w;
  if (count == 2) {
    w.setConstant(spacing / 2);
    return w;
  }
  const Eigen::Index simpson_end = (count % 2 == 1) ? count - 1 : count - 4;
  for (Eigen::Index k = 0; k < simpson_end; k += 2) {
    w(k) += spacing / 3;
    w(k + 1) += 4 * spacing / 3;
    w(k + 2) += spacing / 3;
  }
  if (count % 2 == 0) {
    const Scalar c = 3 * spacing / 8;
    w(count - 4) += c;
    w(count - 3) += 3 * c;
    w(count - 2) += 3 * c;
    w(count - 1) += c;
  }
  return w;
}

}  // namespace multisl
