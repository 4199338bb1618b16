#pragma once

#include <Eigen/Dense>

namespace geohmc {

using Index = Eigen::Index;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic>;

/// Position/momentum pair evolving under the Hamiltonian flow.
template <typename Scalar>
struct PhaseState {
  Vector<Scalar> position;
  Vector<Scalar> momentum;

  bool all_finite() const {
    return position.allFinite() && momentum.allFinite();
  }
};

template <typename Scalar>
Vector<Scalar> make_vector2(Scalar a, Scalar b) {
  Vector<Scalar> v(2);
  v << a, b;
  return v;
}

}  // namespace geohmc
