#pragma once

// Rotation group and pose arithmetic.
//
// Tangent perturbations of a rotation are body-frame (right) increments:
//   R [+] d = R * Exp(d),   Ra [-] Rb = Log(Rb^-1 * Ra).
// Poses perturb position and rotation separately: the tangent of a pose is
// [dp; dtheta] with p [+] dp = p + dp in the world frame.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>

#include "msfo/errors.hpp"

namespace msfo {

using Vec2 = Eigen::Vector2d;
using Vec3 = Eigen::Vector3d;
using Vec6 = Eigen::Matrix<double, 6, 1>;
using Vec9 = Eigen::Matrix<double, 9, 1>;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

/// Angle below which exp/log switch to their Taylor expansions.
inline constexpr double kSmallAngle = 1e-6;
/// Angle below which the SO(3) Jacobians use series coefficients.
inline constexpr double kJacobianSmallAngle = 1e-3;

inline Mat3 skew(const Vec3& v) {
  Mat3 m;
  m << 0.0, -v.z(), v.y(),  //
      v.z(), 0.0, -v.x(),   //
      -v.y(), v.x(), 0.0;
  return m;
}

/// Unit quaternion rotation. The stored quaternion is renormalized on
/// construction and canonicalized to w >= 0 (ties broken on the vector part).
class Rotation {
 public:
  Rotation() : q_(Eigen::Quaterniond::Identity()) {}
  explicit Rotation(const Eigen::Quaterniond& q) : q_(canonical(q)) {}
  Rotation(double w, double x, double y, double z) : Rotation(Eigen::Quaterniond(w, x, y, z)) {}
  explicit Rotation(const Mat3& m) : Rotation(Eigen::Quaterniond(m)) {}

  static Rotation identity() { return Rotation(); }

  const Eigen::Quaterniond& quaternion() const { return q_; }
  Mat3 matrix() const { return q_.toRotationMatrix(); }
  double w() const { return q_.w(); }
  double x() const { return q_.x(); }
  double y() const { return q_.y(); }
  double z() const { return q_.z(); }

  Rotation inverse() const { return Rotation(q_.conjugate()); }

  Rotation operator*(const Rotation& other) const { return Rotation(q_ * other.q_); }
  Vec3 operator*(const Vec3& v) const { return q_ * v; }

 private:
  static Eigen::Quaterniond canonical(Eigen::Quaterniond q) {
    const double n = q.norm();
    if (!(n > 0.0) || !std::isfinite(n)) {
      throw ContractError("rotation: quaternion must be finite and non-zero");
    }
    q.coeffs() /= n;
    bool flip = q.w() < 0.0;
    if (q.w() == 0.0) {
      // w = 0: pick the representative whose first non-zero vector entry is positive.
      for (int i = 0; i < 3; ++i) {
        if (q.vec()[i] != 0.0) {
          flip = q.vec()[i] < 0.0;
          break;
        }
      }
    }
    if (flip) q.coeffs() = -q.coeffs();
    return q;
  }

  Eigen::Quaterniond q_;
};

inline Rotation so3_exp(const Vec3& phi) {
  const double theta = phi.norm();
  if (theta < kSmallAngle) {
    const double t2 = theta * theta;
    const Vec3 v = 0.5 * (1.0 - t2 / 24.0) * phi;
    return Rotation(Eigen::Quaterniond(1.0 - t2 / 8.0, v.x(), v.y(), v.z()));
  }
  const double half = 0.5 * theta;
  const Vec3 v = (std::sin(half) / theta) * phi;
  return Rotation(Eigen::Quaterniond(std::cos(half), v.x(), v.y(), v.z()));
}

/// Principal logarithm, norm in [0, pi].
inline Vec3 so3_log(const Rotation& r) {
  const Eigen::Quaterniond& q = r.quaternion();
  const double w = q.w();  // >= 0 by canonicalization
  const Vec3 v = q.vec();
  const double n = v.norm();
  // angle = 2 atan2(n, w); the series applies while the angle is below threshold
  if (n < 0.5 * kSmallAngle * w) {
    const double n2w2 = (n * n) / (w * w);
    return (2.0 / w) * (1.0 - n2w2 / 3.0) * v;
  }
  const double theta = 2.0 * std::atan2(n, w);
  return (theta / n) * v;
}

inline Rotation boxplus(const Rotation& r, const Vec3& delta) { return r * so3_exp(delta); }

/// Log(Rb^-1 * Ra): the body-frame increment taking Rb to Ra.
inline Vec3 boxminus_rotation(const Rotation& ra, const Rotation& rb) {
  return so3_log(rb.inverse() * ra);
}

/// Right Jacobian of SO(3): Exp(phi + d) ~= Exp(phi) Exp(Jr(phi) d).
inline Mat3 so3_right_jacobian(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 k = skew(phi);
  double a, b;
  if (theta < kJacobianSmallAngle) {
    const double t2 = theta * theta;
    a = 0.5 - t2 / 24.0 + t2 * t2 / 720.0;
    b = 1.0 / 6.0 - t2 / 120.0 + t2 * t2 / 5040.0;
  } else {
    const double t2 = theta * theta;
    a = (1.0 - std::cos(theta)) / t2;
    b = (theta - std::sin(theta)) / (t2 * theta);
  }
  return Mat3::Identity() - a * k + b * k * k;
}

/// Inverse right Jacobian: Log(Exp(phi) Exp(d)) ~= phi + Jr^-1(phi) d.
inline Mat3 so3_right_jacobian_inv(const Vec3& phi) {
  const double theta = phi.norm();
  const Mat3 k = skew(phi);
  double c;
  if (theta < kJacobianSmallAngle) {
    const double t2 = theta * theta;
    c = 1.0 / 12.0 + t2 / 720.0 + t2 * t2 / 30240.0;
  } else {
    c = 1.0 / (theta * theta) - (1.0 + std::cos(theta)) / (2.0 * theta * std::sin(theta));
  }
  return Mat3::Identity() + 0.5 * k + c * k * k;
}

/// Rigid transform [R p; 0 1].
struct Pose {
  Rotation R;
  Vec3 p = Vec3::Zero();

  Pose() = default;
  Pose(const Rotation& rot, const Vec3& pos) : R(rot), p(pos) {}

  static Pose identity() { return Pose(); }

  Pose operator*(const Pose& other) const { return Pose(R * other.R, R * other.p + p); }
  Vec3 operator*(const Vec3& x) const { return R * x + p; }

  Pose inverse() const {
    const Rotation ri = R.inverse();
    return Pose(ri, -(ri * p));
  }

  Mat4 matrix() const {
    Mat4 m = Mat4::Identity();
    m.topLeftCorner<3, 3>() = R.matrix();
    m.topRightCorner<3, 1>() = p;
    return m;
  }
};

/// Tangent layout [dp; dtheta].
inline Pose boxplus(const Pose& x, const Vec6& delta) {
  return Pose(boxplus(x.R, Vec3(delta.tail<3>())), x.p + delta.head<3>());
}

inline Vec6 boxminus(const Pose& a, const Pose& b) {
  Vec6 d;
  d.head<3>() = a.p - b.p;
  d.tail<3>() = boxminus_rotation(a.R, b.R);
  return d;
}

inline Pose boxplus(const Pose& x, const Eigen::VectorXd& delta) {
  if (delta.size() != 6) throw ContractError("boxplus(Pose): tangent must have dimension 6");
  return boxplus(x, Vec6(delta));
}

inline Eigen::VectorXd boxplus(const Eigen::VectorXd& x, const Eigen::VectorXd& delta) {
  if (x.size() != delta.size()) throw ContractError("boxplus(vector): dimension mismatch");
  return x + delta;
}

}  // namespace msfo
