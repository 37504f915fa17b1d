#pragma once

// Fixed-size 3D kernels: skew maps, the SO(3) exponential and its right
// Jacobian, and the Menger curvature of three points.

#include <Eigen/Dense>
#include <cmath>

#include "tpn/errors.hpp"

namespace tpn {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;

inline constexpr double kSkewTolerance = 1e-9;
inline constexpr double kSmallAngle = 1e-6;
inline constexpr double kCoincidentTolerance = 1e-9;

inline Mat3 hat(const Vec3& w) {
  Mat3 s;
  s << 0.0, -w.z(), w.y(),
       w.z(), 0.0, -w.x(),
       -w.y(), w.x(), 0.0;
  return s;
}

inline Vec3 vee(const Mat3& s) {
  if ((s + s.transpose()).cwiseAbs().maxCoeff() > kSkewTolerance) {
    throw Error(ErrorCode::NotSkew, "vee() argument is not skew-symmetric");
  }
  return {s(2, 1), s(0, 2), s(1, 0)};
}

/// Rodrigues formula. Below kSmallAngle the trigonometric coefficients are
/// replaced by their second-order Taylor expansions.
inline Mat3 so3_exp(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double a, b;
  if (theta < kSmallAngle) {
    a = 1.0 - theta2 / 6.0;
    b = 0.5 - theta2 / 24.0;
  } else {
    a = std::sin(theta) / theta;
    b = (1.0 - std::cos(theta)) / theta2;
  }
  const Mat3 k = hat(w);
  return Mat3::Identity() + a * k + b * k * k;
}

/// Right Jacobian of SO(3): exp(w + d) ~= exp(w) * exp(right_jacobian(w) * d).
inline Mat3 so3_right_jacobian(const Vec3& w) {
  const double theta2 = w.squaredNorm();
  const double theta = std::sqrt(theta2);
  double b, c;
  if (theta < kSmallAngle) {
    b = 0.5 - theta2 / 24.0;
    c = 1.0 / 6.0 - theta2 / 120.0;
  } else {
    b = (1.0 - std::cos(theta)) / theta2;
    c = (theta - std::sin(theta)) / (theta2 * theta);
  }
  const Mat3 k = hat(w);
  return Mat3::Identity() - b * k + c * k * k;
}

/// Largest absolute entry of R^T R - I.
inline double orthonormality_error(const Mat3& r) {
  return (r.transpose() * r - Mat3::Identity()).cwiseAbs().maxCoeff();
}

/// Nearest rotation in the Frobenius sense (polar factor via SVD).
inline Mat3 reorthonormalize(const Mat3& r) {
  Eigen::JacobiSVD<Mat3> svd(r, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Mat3 q = svd.matrixU() * svd.matrixV().transpose();
  if (q.determinant() < 0.0) {
    Mat3 u = svd.matrixU();
    u.col(2) *= -1.0;
    q = u * svd.matrixV().transpose();
  }
  return q;
}

/// Reciprocal circumradius of (p1, p2, p3): 4 * area / product of sides.
/// Zero for collinear points.
inline double menger_curvature(const Vec3& p1, const Vec3& p2, const Vec3& p3) {
  const double a = (p1 - p2).norm();
  const double b = (p2 - p3).norm();
  const double c = (p3 - p1).norm();
  if (a <= kCoincidentTolerance || b <= kCoincidentTolerance || c <= kCoincidentTolerance) {
    throw Error(ErrorCode::DegeneratePoints, "menger_curvature() needs three distinct points");
  }
  // 4 * area == 2 * |(p2 - p1) x (p3 - p1)|
  const double twice_area = (p2 - p1).cross(p3 - p1).norm();
  return 2.0 * twice_area / (a * b * c);
}

inline bool all_finite(const Vec3& v) { return v.allFinite(); }

}  // namespace tpn
