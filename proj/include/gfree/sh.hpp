#pragma once

// Real spherical harmonics up to degree 2, in the ordering and sign
// convention used by common Gaussian splatting code.

#include "gfree/errors.hpp"

#include <Eigen/Core>

#include <array>
#include <cmath>
#include <span>

namespace gfree {

inline constexpr int kMaxShDegree = 2;
inline constexpr int kShCoeffs = 9;  // (kMaxShDegree + 1)^2

namespace sh_const {
inline constexpr double C0 = 0.28209479177387814;
inline constexpr double C1 = 0.4886025119029199;
inline constexpr std::array<double, 5> C2 = {1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
                                             -1.0925484305920792, 0.5462742152960396};
}  // namespace sh_const

inline constexpr int sh_coeff_count(int degree) { return (degree + 1) * (degree + 1); }

/// Basis values Y_k(d) for k < 9; entries above the requested degree are zero.
template <class T>
std::array<T, kShCoeffs> sh_basis(const Eigen::Matrix<T, 3, 1>& d, int degree) {
  using namespace sh_const;
  std::array<T, kShCoeffs> y;
  y.fill(T(0.0));
  y[0] = T(C0);
  if (degree >= 1) {
    y[1] = -C1 * d.y();
    y[2] = C1 * d.z();
    y[3] = -C1 * d.x();
  }
  if (degree >= 2) {
    const T xx = d.x() * d.x(), yy = d.y() * d.y(), zz = d.z() * d.z();
    y[4] = C2[0] * d.x() * d.y();
    y[5] = C2[1] * d.y() * d.z();
    y[6] = C2[2] * (2.0 * zz - xx - yy);
    y[7] = C2[3] * d.x() * d.z();
    y[8] = C2[4] * (xx - yy);
  }
  return y;
}

/// color = 0.5 + sum_k coeffs[k] * Y_k(view_dir). No clamping here.
inline double eval_sh(std::span<const double> coeffs, const Eigen::Vector3d& view_dir, int degree) {
  if (degree < 0 || degree > kMaxShDegree) throw ValidationError("eval_sh: degree must be in [0, 2]");
  if (std::abs(view_dir.norm() - 1.0) > 1e-6) throw ValidationError("eval_sh: view_dir must be unit length");
  const int n = sh_coeff_count(degree);
  if (static_cast<int>(coeffs.size()) < n) throw ValidationError("eval_sh: too few coefficients");
  const auto y = sh_basis<double>(view_dir, degree);
  double c = 0.5;
  for (int k = 0; k < n; ++k) c += coeffs[k] * y[k];
  return c;
}

}  // namespace gfree
