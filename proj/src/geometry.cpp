#include "loopclose/geometry.hpp"

namespace loopclose {

SE3Pose SE3Pose::inverse() const {
  SE3Pose out;
  out.rotation = rotation.conjugate();
  out.translation = -(out.rotation * translation);
  return out;
}

SE3Pose compose(const SE3Pose& a, const SE3Pose& b) {
  SE3Pose out;
  out.rotation = (a.rotation * b.rotation).normalized();
  out.translation = a.rotation * b.translation + a.translation;
  return out;
}

Matrix7 sim3_adjoint(const Sim3& s) {
  const Matrix3 r = s.rotation.toRotationMatrix();
  Matrix7 adj = Matrix7::Zero();
  adj.block<3, 3>(0, 0) = s.scale * r;
  adj.block<3, 3>(0, 3) = hat<double>(s.translation) * r;
  adj.block<3, 1>(0, 6) = -s.translation;
  adj.block<3, 3>(3, 3) = r;
  adj(6, 6) = 1.0;
  return adj;
}

std::optional<Vector2> project_unbounded(const CameraIntrinsics& k, const Vector3& p_cam) {
  if (p_cam.z() <= kDepthEpsilon) return std::nullopt;
  const double inv_z = 1.0 / p_cam.z();
  return Vector2(k.fx * p_cam.x() * inv_z + k.cx, k.fy * p_cam.y() * inv_z + k.cy);
}

std::optional<Vector2> project(const CameraIntrinsics& k, const Vector3& p_cam) {
  auto px = project_unbounded(k, p_cam);
  if (!px || !k.in_image(px->x(), px->y())) return std::nullopt;
  return px;
}

Vector3 unproject(const CameraIntrinsics& k, const Vector2& pixel, double depth) {
  return Vector3((pixel.x() - k.cx) / k.fx * depth, (pixel.y() - k.cy) / k.fy * depth, depth);
}

}  // namespace loopclose
