#pragma once

// Spatial <-> angular rotations, complex <-> two-channel image stacking and
// least-squares channel estimates.

#include <cmath>

#include "sfdit/channel.hpp"
#include "sfdit/complex_matrix.hpp"
#include "sfdit/tensor.hpp"

namespace sfdit {

struct DftPair {
  ComplexMatrix u_r;  // n_r x n_r
  ComplexMatrix u_t;  // n_t x n_t

  static DftPair for_geometry(const ArrayGeometry& g) { return {unitary_dft(g.n_r), unitary_dft(g.n_t)}; }
  static DftPair for_shape(std::size_t n_r, std::size_t n_t) { return {unitary_dft(n_r), unitary_dft(n_t)}; }
};

namespace detail {
inline void check_dft_shape(const ComplexMatrix& h, const DftPair& dft, const char* op) {
  if (dft.u_r.rows() != h.rows() || dft.u_r.cols() != h.rows() || dft.u_t.rows() != h.cols() ||
      dft.u_t.cols() != h.cols()) {
    throw DimensionError(std::string(op) + ": channel " + dims_str(h) + " does not match DFT pair " +
                         dims_str(dft.u_r) + " / " + dims_str(dft.u_t));
  }
}
}  // namespace detail

// H_ang = U_r^H H U_t
inline ComplexMatrix to_angular(const ComplexMatrix& h, const DftPair& dft) {
  detail::check_dft_shape(h, dft, "to_angular");
  return dft.u_r.adjoint() * h * dft.u_t;
}

// H = U_r H_ang U_t^H
inline ComplexMatrix from_angular(const ComplexMatrix& h_ang, const DftPair& dft) {
  detail::check_dft_shape(h_ang, dft, "from_angular");
  return dft.u_r * h_ang * dft.u_t.adjoint();
}

// Two-channel real image [2, n_r, n_t]: channel 0 real part, channel 1 imaginary part.
struct CsiImage {
  Tensor<double> data;

  std::size_t n_r() const { return data.dim(1); }
  std::size_t n_t() const { return data.dim(2); }
};

inline CsiImage complex_to_image(const ComplexMatrix& h) {
  const std::size_t r = h.rows(), c = h.cols();
  Tensor<double> x({2, r, c});
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) {
      x[i * c + j] = h(i, j).real();
      x[r * c + i * c + j] = h(i, j).imag();
    }
  return {std::move(x)};
}

inline ComplexMatrix image_to_complex(const CsiImage& img) {
  const Tensor<double>& x = img.data;
  if (x.rank() != 3 || x.dim(0) != 2) throw DimensionError("image_to_complex: expected [2, n_r, n_t], got " + shape_str(x.shape()));
  const std::size_t r = x.dim(1), c = x.dim(2);
  ComplexMatrix h(r, c);
  for (std::size_t i = 0; i < r; ++i)
    for (std::size_t j = 0; j < c; ++j) h(i, j) = cdouble(x[i * c + j], x[r * c + i * c + j]);
  return h;
}

// H_LS = Y P^H
inline ComplexMatrix ls_estimate(const PilotObservation& obs) {
  if (obs.y.cols() != obs.pilot.cols()) {
    throw DimensionError("ls_estimate: observation " + dims_str(obs.y) + " vs pilot " + dims_str(obs.pilot));
  }
  return obs.y * obs.pilot.adjoint();
}

// Per-real-entry noise std of the angular LS image: the complex noise has
// variance sigma^2, i.e. sigma^2/2 per real component.
inline double image_noise_level(double noise_var) { return std::sqrt(noise_var / 2.0); }

struct AngularLs {
  CsiImage image;
  double sigma_t;
};

// Angular-domain LS image and its VE noise level.
inline AngularLs angular_ls(const PilotObservation& obs, const DftPair& dft) {
  return {complex_to_image(to_angular(ls_estimate(obs), dft)), image_noise_level(obs.noise_var)};
}

}  // namespace sfdit
