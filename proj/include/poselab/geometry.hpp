#pragma once

#include <array>
#include <cmath>
#include <stdexcept>

namespace poselab {

using Vec3 = std::array<double, 3>;

struct Mat3 {
  // row-major
  std::array<double, 9> m{};

  static Mat3 identity() {
    Mat3 r;
    r.m = {1, 0, 0, 0, 1, 0, 0, 0, 1};
    return r;
  }

  double& operator()(int r, int c) { return m[3 * r + c]; }
  double operator()(int r, int c) const { return m[3 * r + c]; }

  Mat3 transposed() const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) r(i, j) = (*this)(j, i);
    return r;
  }

  Mat3 operator*(const Mat3& o) const {
    Mat3 r;
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        double acc = 0.0;
        for (int k = 0; k < 3; ++k) acc += (*this)(i, k) * o(k, j);
        r(i, j) = acc;
      }
    return r;
  }

  Vec3 operator*(const Vec3& v) const {
    return {m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
            m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
            m[6] * v[0] + m[7] * v[1] + m[8] * v[2]};
  }

  double det() const {
    return m[0] * (m[4] * m[8] - m[5] * m[7]) -
           m[1] * (m[3] * m[8] - m[5] * m[6]) +
           m[2] * (m[3] * m[7] - m[4] * m[6]);
  }

  double trace() const { return m[0] + m[4] + m[8]; }
};

// valid_rotation: R^T R = I within tol and det(R) = +1 within tol
inline bool is_rotation(const Mat3& R, double tol = 1e-9) {
  Mat3 should_be_i = R.transposed() * R;
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < 3; ++j) {
      const double want = i == j ? 1.0 : 0.0;
      if (std::fabs(should_be_i(i, j) - want) > tol) return false;
    }
  return std::fabs(R.det() - 1.0) <= tol;
}

// unit quaternion (x, y, z, w) to rotation matrix
inline Mat3 quat_to_mat(const std::array<double, 4>& q) {
  const double x = q[0], y = q[1], z = q[2], w = q[3];
  Mat3 R;
  R.m = {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
         2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
         2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
  return R;
}

// 9DoF pose: rotation, translation, per-axis positive scales
struct Pose {
  Mat3 R = Mat3::identity();
  Vec3 t{0, 0, 0};
  Vec3 s{1, 1, 1};
};

inline void check_pose(const Pose& p) {
  if (!is_rotation(p.R, 1e-6))
    throw std::invalid_argument("pose: R is not a rotation matrix");
  for (double v : p.s)
    if (!(v > 0.0)) throw std::invalid_argument("pose: nonpositive scale");
}

// x_obs = R (s .* x_canonical) + t
inline Vec3 forward_map(const Vec3& p, const Pose& pose) {
  Vec3 scaled{p[0] * pose.s[0], p[1] * pose.s[1], p[2] * pose.s[2]};
  Vec3 r = pose.R * scaled;
  return {r[0] + pose.t[0], r[1] + pose.t[1], r[2] + pose.t[2]};
}

// inverse of forward_map: canonical (NOCS) coordinates of a scene point
inline Vec3 nocs_of(const Vec3& x, const Pose& pose) {
  for (double v : pose.s)
    if (!(v > 0.0)) throw std::invalid_argument("nocs_of: nonpositive scale");
  Vec3 d{x[0] - pose.t[0], x[1] - pose.t[1], x[2] - pose.t[2]};
  Vec3 r = pose.R.transposed() * d;
  return {r[0] / pose.s[0], r[1] / pose.s[1], r[2] / pose.s[2]};
}

// geodesic rotation distance in degrees
inline double geodesic_deg(const Mat3& Ra, const Mat3& Rb) {
  const double tr = (Ra.transposed() * Rb).trace();
  const double c = std::min(1.0, std::max(-1.0, (tr - 1.0) / 2.0));
  return std::acos(c) * 180.0 / M_PI;
}

}  // namespace poselab
