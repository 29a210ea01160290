#pragma once

#include <Eigen/Dense>

#include <cmath>
#include <complex>
#include <cstddef>
#include <numbers>
#include <string>

#include "sfdit/errors.hpp"

namespace sfdit {

using cdouble = std::complex<double>;

// Row-major storage; std::complex<double> is laid out as interleaved (re, im).
using ComplexMatrix = Eigen::Matrix<cdouble, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using ComplexVector = Eigen::Matrix<cdouble, Eigen::Dynamic, 1>;

inline std::string dims_str(const ComplexMatrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// W[k, l] = exp(-j 2 pi k l / n) / sqrt(n)
inline ComplexMatrix unitary_dft(std::size_t n) {
  if (n == 0) throw DimensionError("unitary_dft: n must be positive");
  ComplexMatrix w(n, n);
  const double s = 1.0 / std::sqrt(static_cast<double>(n));
  for (std::size_t k = 0; k < n; ++k) {
    for (std::size_t l = 0; l < n; ++l) {
      // reduce k*l mod n first so large products keep full phase precision
      const double ph = -2.0 * std::numbers::pi * static_cast<double>((k * l) % n) / static_cast<double>(n);
      w(k, l) = std::polar(s, ph);
    }
  }
  return w;
}

// max |(M M^H - I)_{ij}|
inline double unitarity_error(const ComplexMatrix& m) {
  const ComplexMatrix e = m * m.adjoint() - ComplexMatrix::Identity(m.rows(), m.rows());
  return e.cwiseAbs().maxCoeff();
}

inline double frob2(const ComplexMatrix& m) { return m.squaredNorm(); }

}  // namespace sfdit
