#pragma once

// Lie-group primitives for loop closing.
//
// Pose convention: every stored pose is world-to-camera. An SE3Pose T_cw maps a
// world point into the camera frame, p_c = R * p_w + t. A Sim3 S_cw acts as
// p_c = s * R * p_w + t. Composition follows the operator order of the
// transforms: compose(a, b)(p) == a(b(p)).
//
// The Sim3 tangent is ordered (rho, phi, sigma): translational part, rotation
// vector (radians), log-scale. All Sim3 functions are templated on the scalar
// so the pose-graph residual can be differentiated with dual numbers.

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <cmath>
#include <optional>
#include <stdexcept>

namespace loopclose {

using Vector2 = Eigen::Vector2d;
using Vector3 = Eigen::Vector3d;
using Matrix3 = Eigen::Matrix3d;
using Quaternion = Eigen::Quaterniond;
using Vector7 = Eigen::Matrix<double, 7, 1>;
using Matrix7 = Eigen::Matrix<double, 7, 7>;

template <typename T> using Vec3T = Eigen::Matrix<T, 3, 1>;
template <typename T> using Mat3T = Eigen::Matrix<T, 3, 3>;
template <typename T> using Vec7T = Eigen::Matrix<T, 7, 1>;

// Below this rotation angle (and |sigma|) exp/log switch to Taylor expansions.
inline constexpr double kSmallAngle = 1e-5;
inline constexpr double kDepthEpsilon = 1e-6;
// log() refuses rotations this close to pi.
inline constexpr double kPiBranchTolerance = 1e-6;

/// Plain value of a scalar; dual numbers override this to drop derivatives.
inline double scalar_value(double x) { return x; }

template <typename T> Mat3T<T> hat(const Vec3T<T>& v) {
  Mat3T<T> m;
  m << T(0.0), -v.z(), v.y(),
       v.z(), T(0.0), -v.x(),
       -v.y(), v.x(), T(0.0);
  return m;
}

struct SE3Pose {
  Quaternion rotation = Quaternion::Identity();
  Vector3 translation = Vector3::Zero();

  static SE3Pose identity() { return {}; }

  Vector3 operator*(const Vector3& p) const { return rotation * p + translation; }
  SE3Pose inverse() const;
  Matrix3 rotation_matrix() const { return rotation.toRotationMatrix(); }
  /// Camera centre in world coordinates, for a world-to-camera pose.
  Vector3 center() const { return -(rotation.conjugate() * translation); }
};

SE3Pose compose(const SE3Pose& a, const SE3Pose& b);
inline SE3Pose operator*(const SE3Pose& a, const SE3Pose& b) { return compose(a, b); }

template <typename T> struct Sim3T {
  T scale = T(1.0);
  Eigen::Quaternion<T> rotation = Eigen::Quaternion<T>(T(1.0), T(0.0), T(0.0), T(0.0));
  Vec3T<T> translation = Vec3T<T>(T(0.0), T(0.0), T(0.0));

  static Sim3T identity() { return {}; }

  Vec3T<T> operator*(const Vec3T<T>& p) const { return scale * (rotation * p) + translation; }

  Sim3T inverse() const {
    Sim3T out;
    out.scale = T(1.0) / scale;
    out.rotation = rotation.conjugate();
    out.translation = -(out.scale * (out.rotation * translation));
    return out;
  }

  Vec3T<T> center() const { return inverse().translation; }

  template <typename U> Sim3T<U> cast() const {
    Sim3T<U> out;
    out.scale = U(scale);
    out.rotation = rotation.template cast<U>();
    out.translation = translation.template cast<U>();
    return out;
  }
};

using Sim3 = Sim3T<double>;

template <typename T> Sim3T<T> compose(const Sim3T<T>& a, const Sim3T<T>& b) {
  Sim3T<T> out;
  out.scale = a.scale * b.scale;
  out.rotation = a.rotation * b.rotation;
  out.translation = a.scale * (a.rotation * b.translation) + a.translation;
  return out;
}

template <typename T> Sim3T<T> operator*(const Sim3T<T>& a, const Sim3T<T>& b) {
  return compose(a, b);
}

inline Sim3 to_sim3(const SE3Pose& pose) {
  Sim3 s;
  s.rotation = pose.rotation;
  s.translation = pose.translation;
  return s;
}

/// SE3 recovered from a Sim3 pose: (R, t / s).
inline SE3Pose to_se3(const Sim3& s) {
  SE3Pose pose;
  pose.rotation = s.rotation.normalized();
  pose.translation = s.translation / s.scale;
  return pose;
}

struct Sim3Tangent {
  Vector3 rho = Vector3::Zero();
  Vector3 phi = Vector3::Zero();
  double sigma = 0.0;

  Vector7 vector() const {
    Vector7 v;
    v << rho, phi, sigma;
    return v;
  }
  static Sim3Tangent from_vector(const Vector7& v) {
    return {v.head<3>(), v.segment<3>(3), v(6)};
  }
};

// --- SO3 -----------------------------------------------------------------

template <typename T> Eigen::Quaternion<T> so3_exp(const Vec3T<T>& phi) {
  using std::cos;
  using std::sin;
  using std::sqrt;
  const T theta2 = phi.squaredNorm();
  T w;
  T k;
  if (scalar_value(theta2) < kSmallAngle * kSmallAngle) {
    w = T(1.0) - theta2 / 8.0;
    k = T(0.5) - theta2 / 48.0;
  } else {
    const T theta = sqrt(theta2);
    w = cos(theta / 2.0);
    k = sin(theta / 2.0) / theta;
  }
  Eigen::Quaternion<T> q(w, k * phi.x(), k * phi.y(), k * phi.z());
  return q;
}

template <typename T> Vec3T<T> so3_log(const Eigen::Quaternion<T>& q_in) {
  using std::atan2;
  using std::sqrt;
  Eigen::Quaternion<T> q = q_in;
  if (scalar_value(q.w()) < 0.0) q.coeffs() = -q.coeffs();
  const Vec3T<T> v = q.vec();
  const T n2 = v.squaredNorm();
  const T w = q.w();
  if (scalar_value(n2) < 0.25 * kSmallAngle * kSmallAngle) {
    // theta ~= 2|v|/w; second-order series of 2*atan(n/w)/n.
    return (T(2.0) / w - T(2.0 / 3.0) * n2 / (w * w * w)) * v;
  }
  const T n = sqrt(n2);
  const T theta = T(2.0) * atan2(n, w);
  if (M_PI - scalar_value(theta) < kPiBranchTolerance) {
    throw std::domain_error("so3_log: rotation angle at the pi branch cut");
  }
  return (theta / n) * v;
}

// --- Sim3 exp/log ---------------------------------------------------------

/// The matrix W with exp(rho, phi, sigma).translation = W * rho, i.e.
/// W = integral_0^1 e^(sigma*tau) * exp(tau * hat(phi)) dtau.
template <typename T> Mat3T<T> sim3_w_matrix(const Vec3T<T>& phi, const T& sigma) {
  using std::cos;
  using std::exp;
  using std::sin;
  using std::sqrt;
  const T theta2 = phi.squaredNorm();
  const Mat3T<T> omega = hat<T>(phi);
  const Mat3T<T> omega2 = omega * omega;
  const bool small_theta = scalar_value(theta2) < kSmallAngle * kSmallAngle;
  const bool small_sigma = std::abs(scalar_value(sigma)) < kSmallAngle;
  T a, b, c;
  if (small_theta && small_sigma) {
    const T sigma2 = sigma * sigma;
    a = T(0.5) + sigma / 3.0 + sigma2 / 8.0 - theta2 / 24.0;
    b = T(1.0 / 6.0) + sigma / 8.0 + sigma2 / 20.0 - theta2 / 120.0;
    c = T(1.0) + sigma / 2.0 + sigma2 / 6.0;
  } else if (small_theta) {
    const T s = exp(sigma);
    const T sigma2 = sigma * sigma;
    a = ((sigma - 1.0) * s + 1.0) / sigma2;
    b = ((0.5 * sigma2 - sigma + 1.0) * s - 1.0) / (sigma2 * sigma);
    c = (s - 1.0) / sigma;
  } else {
    const T theta = sqrt(theta2);
    const T s = exp(sigma);
    const T sigma2 = sigma * sigma;
    c = small_sigma ? T(1.0) + sigma / 2.0 + sigma2 / 6.0 : (s - 1.0) / sigma;
    const T ss = s * sin(theta);
    const T sc = s * cos(theta);
    const T denom = theta2 + sigma2;
    a = (ss * sigma + (T(1.0) - sc) * theta) / (theta * denom);
    b = (c - ((sc - 1.0) * sigma + ss * theta) / denom) / theta2;
  }
  return a * omega + b * omega2 + c * Mat3T<T>::Identity();
}

template <typename T> Sim3T<T> sim3_exp(const Vec7T<T>& v) {
  using std::exp;
  const Vec3T<T> rho = v.template head<3>();
  const Vec3T<T> phi = v.template segment<3>(3);
  const T sigma = v(6);
  Sim3T<T> out;
  out.scale = exp(sigma);
  out.rotation = so3_exp<T>(phi);
  out.translation = sim3_w_matrix<T>(phi, sigma) * rho;
  return out;
}

template <typename T> Vec7T<T> sim3_log(const Sim3T<T>& s) {
  using std::log;
  if (!(scalar_value(s.scale) > 0.0)) throw std::domain_error("sim3_log: non-positive scale");
  const Vec3T<T> phi = so3_log<T>(s.rotation);
  const T sigma = log(s.scale);
  const Mat3T<T> w = sim3_w_matrix<T>(phi, sigma);
  const Vec3T<T> rho = w.inverse() * s.translation;
  Vec7T<T> out;
  out << rho, phi, sigma;
  return out;
}

inline Sim3 sim3_exp(const Sim3Tangent& v) { return sim3_exp<double>(v.vector()); }
inline Sim3Tangent sim3_log_tangent(const Sim3& s) {
  return Sim3Tangent::from_vector(sim3_log<double>(s));
}

/// Adjoint of a Sim3 in (rho, phi, sigma) order: S * exp(x) * S^-1 = exp(Adj(S) x).
Matrix7 sim3_adjoint(const Sim3& s);

// --- camera ---------------------------------------------------------------

struct CameraIntrinsics {
  double fx = 500.0;
  double fy = 500.0;
  double cx = 320.0;
  double cy = 240.0;
  int width = 640;
  int height = 480;

  bool valid() const { return fx > 0 && fy > 0 && width > 0 && height > 0; }
  bool in_image(double u, double v) const {
    return u >= 0.0 && u < width && v >= 0.0 && v < height;
  }
};

/// Pinhole projection; nullopt when behind the camera or outside the image.
std::optional<Vector2> project(const CameraIntrinsics& k, const Vector3& p_cam);

/// Pinhole projection ignoring image bounds (depth still checked).
std::optional<Vector2> project_unbounded(const CameraIntrinsics& k, const Vector3& p_cam);

Vector3 unproject(const CameraIntrinsics& k, const Vector2& pixel, double depth);

}  // namespace loopclose
