#pragma once

#include "setseg/common.hpp"

namespace setseg {

struct SymmetricEigen {
  Vector values;           // nonincreasing
  Eigen::MatrixXd vectors; // column j pairs with values[j]; orthonormal
};

/// Eigendecomposition of a real symmetric matrix by Householder reduction to
/// tridiagonal form followed by the implicit-shift QL iteration. Only the
/// lower triangle of `a` is read. Throws NumericalError if QL fails to
/// converge.
SymmetricEigen symmetric_eigen(const Eigen::MatrixXd& a);

}  // namespace setseg
