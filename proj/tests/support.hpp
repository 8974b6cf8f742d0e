#pragma once

// Random generators and small map scenes shared by the test binaries.

#include "loopclose/geometry.hpp"
#include "loopclose/map.hpp"

#include <unsupported/Eigen/MatrixFunctions>

#include <cmath>
#include <random>

namespace loopclose::testing {

inline Vector3 random_vector(std::mt19937_64& rng, double scale = 1.0) {
  std::uniform_real_distribution<double> u(-scale, scale);
  return Vector3(u(rng), u(rng), u(rng));
}

inline Quaternion random_rotation(std::mt19937_64& rng, double max_angle = M_PI - 0.1) {
  std::uniform_real_distribution<double> u(0.0, max_angle);
  Vector3 axis = random_vector(rng);
  while (axis.norm() < 1e-3) axis = random_vector(rng);
  return Quaternion(Eigen::AngleAxisd(u(rng), axis.normalized()));
}

inline SE3Pose random_se3(std::mt19937_64& rng, double translation = 5.0) {
  SE3Pose p;
  p.rotation = random_rotation(rng);
  p.translation = random_vector(rng, translation);
  return p;
}

inline Sim3 random_sim3(std::mt19937_64& rng, double translation = 5.0) {
  std::uniform_real_distribution<double> log_scale(-1.0, 1.0);
  Sim3 s;
  s.scale = std::exp(log_scale(rng));
  s.rotation = random_rotation(rng);
  s.translation = random_vector(rng, translation);
  return s;
}

/// Homogeneous 4x4 form [sR t; 0 1].
inline Eigen::Matrix4d sim3_matrix(const Sim3& s) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Identity();
  m.topLeftCorner<3, 3>() = s.scale * s.rotation.toRotationMatrix();
  m.topRightCorner<3, 1>() = s.translation;
  return m;
}

/// Lie-algebra element [hat(phi) + sigma I, rho; 0 0].
inline Eigen::Matrix4d sim3_algebra(const Vector7& v) {
  Eigen::Matrix4d m = Eigen::Matrix4d::Zero();
  m.topLeftCorner<3, 3>() = hat<double>(Vector3(v.segment<3>(3))) +
                            v(6) * Matrix3::Identity();
  m.topRightCorner<3, 1>() = v.head<3>();
  return m;
}

inline double sim3_distance(const Sim3& a, const Sim3& b) {
  return (sim3_matrix(a) - sim3_matrix(b)).cwiseAbs().maxCoeff();
}

/// Residual log(S_ij * S_jw * S_iw^-1) through the matrix logarithm.
inline Vector7 oracle_residual(const Sim3& s_ij, const Sim3& s_iw, const Sim3& s_jw) {
  const Eigen::Matrix4d m =
      (sim3_matrix(s_ij) * sim3_matrix(s_jw) * sim3_matrix(s_iw).inverse()).log();
  Vector7 v;
  v.head<3>() = m.topRightCorner<3, 1>();
  v(3) = 0.5 * (m(2, 1) - m(1, 2));
  v(4) = 0.5 * (m(0, 2) - m(2, 0));
  v(5) = 0.5 * (m(1, 0) - m(0, 1));
  v(6) = m.topLeftCorner<3, 3>().trace() / 3.0;
  return v;
}

/// exp(d) * s through the matrix exponential.
inline Sim3 left_perturb(const Sim3& s, const Vector7& d) {
  const Eigen::Matrix4d m = sim3_algebra(d).exp() * sim3_matrix(s);
  Sim3 out;
  out.scale = std::cbrt(m.topLeftCorner<3, 3>().determinant());
  out.rotation = Quaternion(Matrix3(m.topLeftCorner<3, 3>() / out.scale));
  out.translation = m.topRightCorner<3, 1>();
  return out;
}

/// Similarity with moderate scale and rotation, for numerical differentiation.
inline Sim3 bounded_sim3(std::mt19937_64& rng, double translation = 2.0) {
  Sim3 s;
  s.scale = std::exp(std::uniform_real_distribution<double>(-0.3, 0.3)(rng));
  s.rotation = random_rotation(rng, 2.0);
  s.translation = random_vector(rng, translation);
  return s;
}

inline Vector7 random_tangent(std::mt19937_64& rng, double norm) {
  Vector7 v;
  for (int k = 0; k < 7; ++k) v(k) = std::normal_distribution<double>(0.0, 1.0)(rng);
  return v * (norm / v.norm());
}

/// Largest entry-wise deviation of the analytic edge Jacobians from central
/// differences of the oracle residual, relative to the larger of 1 and the
/// largest finite-difference entry.
inline double jacobian_error(const Sim3& m, const Sim3& a, const Sim3& b, const Matrix7& j_i,
                             const Matrix7& j_j, double h = 1e-6) {
  Matrix7 fd_i, fd_j;
  for (int k = 0; k < 7; ++k) {
    Vector7 d = Vector7::Zero();
    d(k) = h;
    fd_i.col(k) = (oracle_residual(m, left_perturb(a, d), b) -
                   oracle_residual(m, left_perturb(a, -d), b)) / (2.0 * h);
    fd_j.col(k) = (oracle_residual(m, a, left_perturb(b, d)) -
                   oracle_residual(m, a, left_perturb(b, -d))) / (2.0 * h);
  }
  const double ei = (j_i - fd_i).cwiseAbs().maxCoeff() / std::max(1.0, fd_i.cwiseAbs().maxCoeff());
  const double ej = (j_j - fd_j).cwiseAbs().maxCoeff() / std::max(1.0, fd_j.cwiseAbs().maxCoeff());
  return std::max(ei, ej);
}

inline Descriptor random_descriptor(std::mt19937_64& rng) {
  Descriptor d;
  for (auto& byte : d) byte = static_cast<std::uint8_t>(rng() & 0xff);
  return d;
}

inline Descriptor flip(Descriptor d, int bits) {
  for (int i = 0; i < bits; ++i) d[(i * 37 % 256) / 8] ^= static_cast<std::uint8_t>(1u << ((i * 37 % 256) % 8));
  return d;
}

}  // namespace loopclose::testing

namespace loopclose::testing {

/// Keyframe with `n` random features spread over the image, no associations.
inline KeyFrame random_keyframe(KeyFrameId id, std::size_t n, std::mt19937_64& rng,
                                const SE3Pose& pose = {}) {
  KeyFrame kf;
  kf.id = id;
  kf.pose = pose;
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (std::size_t i = 0; i < n; ++i) {
    kf.keypoints.push_back({u(rng) * kf.intrinsics.width, u(rng) * kf.intrinsics.height,
                            static_cast<int>(rng() % 8), 0.0});
    kf.descriptors.push_back(random_descriptor(rng));
  }
  kf.associations.assign(n, kNoMapPoint);
  return kf;
}

inline MapPointId new_point(Map& map, std::mt19937_64& rng) {
  MapPoint p;
  p.position = random_vector(rng, 5.0);
  p.descriptor = random_descriptor(rng);
  return map.add_map_point(p);
}

/// Brute-force shared-observation count from keyframe associations alone.
inline int recount(const Map& map, KeyFrameId a, KeyFrameId b) {
  std::set<MapPointId> pa;
  for (MapPointId p : map.keyframe(a).associations) {
    if (p != kNoMapPoint) pa.insert(p);
  }
  int n = 0;
  std::set<MapPointId> seen;
  for (MapPointId p : map.keyframe(b).associations) {
    if (p != kNoMapPoint && pa.count(p) && seen.insert(p).second) ++n;
  }
  return n;
}

}  // namespace loopclose::testing

#include "loopclose/matching.hpp"

namespace loopclose::testing {

struct ProjectionScene {
  KeyFrameSnapshot snapshot;
  Sim3 pose;
  std::vector<PointRecord> points;
};

/// A keyframe with `features` random features and `n_points` map points, about
/// half of them placed on a feature with a perturbed copy of its descriptor.
inline ProjectionScene make_projection_scene(std::uint64_t seed, std::size_t n_points,
                                             std::size_t features = 600) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ProjectionScene scene;
  const SE3Pose pose = random_se3(rng, 3.0);
  KeyFrame kf = random_keyframe(0, features, rng, pose);
  // Clustered duplicates exercise the conflict rules.
  for (std::size_t i = 0; i + 1 < features; i += 17) {
    kf.keypoints[i + 1] = kf.keypoints[i];
    kf.keypoints[i + 1].u += 0.3;
  }
  pack_snapshot(kf, 64, 48, 1, scene.snapshot);
  scene.pose = to_sim3(pose);
  const Sim3 inv = scene.pose.inverse();
  for (std::size_t i = 0; i < n_points; ++i) {
    PointRecord p;
    p.id = static_cast<MapPointId>(i * 3 + 1);
    const double depth = 0.5 + 9.0 * u(rng);
    Vector2 px;
    if (rng() % 2 == 0) {
      const std::size_t f = rng() % features;
      px = Vector2(kf.keypoints[f].u + 2.0 * (u(rng) - 0.5), kf.keypoints[f].v + 2.0 * (u(rng) - 0.5));
      p.descriptor = flip(kf.descriptors[f], static_cast<int>(rng() % 60));
    } else {
      px = Vector2((1.4 * u(rng) - 0.2) * kf.intrinsics.width, (1.4 * u(rng) - 0.2) * kf.intrinsics.height);
      p.descriptor = random_descriptor(rng);
    }
    Vector3 x = unproject(kf.intrinsics, px, depth);
    if (rng() % 20 == 0) x.z() = -x.z();
    p.position = inv * x;
    const Vector3 ray = (p.position - inv.translation).normalized();
    // Mostly facing the camera; some viewed at grazing angles.
    p.normal = (rng() % 8 == 0) ? Vector3(random_vector(rng).normalized()) : ray;
    const double dist = x.norm();
    p.d_max = dist * (0.7 + 1.0 * u(rng));
    p.d_min = p.d_max / std::pow(1.2, 7);
    scene.points.push_back(p);
  }
  return scene;
}

}  // namespace loopclose::testing

#include "loopclose/loop_detect.hpp"

namespace loopclose::testing {

/// Current keyframe whose first `n_points` features are the exact projections
/// of window points placed so that S_cm * T_mw is the true current pose,
/// followed by random distractor features.
struct RefineScene {
  LoopQuery query;
  std::vector<PointRecord> points;
  SE3Pose matched_pose;
  Sim3 s_cm;
};

inline RefineScene make_refine_scene(std::uint64_t seed, std::size_t n_points = 150,
                                     std::size_t distractors = 100) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  RefineScene scene;
  scene.matched_pose = random_se3(rng, 3.0);
  scene.s_cm.scale = 0.8 + 0.4 * u(rng);
  scene.s_cm.rotation = random_rotation(rng, 0.5);
  scene.s_cm.translation = random_vector(rng, 0.5);
  const Sim3 pose = compose(scene.s_cm, to_sim3(scene.matched_pose));
  const Sim3 inv = pose.inverse();
  const Vector3 center = pose.center();

  KeyFrame kf;
  kf.id = 0;
  std::vector<Vector3> feature_points;
  for (std::size_t i = 0; i < n_points; ++i) {
    const Vector2 px(20.0 + u(rng) * (kf.intrinsics.width - 40.0),
                     20.0 + u(rng) * (kf.intrinsics.height - 40.0));
    const Vector3 x = unproject(kf.intrinsics, px, 2.0 + 6.0 * u(rng));
    const int octave = static_cast<int>(rng() % 4);
    kf.keypoints.push_back({px.x(), px.y(), octave, 0.0});
    kf.descriptors.push_back(random_descriptor(rng));
    feature_points.push_back(x);

    PointRecord p;
    p.id = static_cast<MapPointId>(100 + i);
    p.position = inv * x;
    p.normal = (p.position - center).normalized();
    p.d_max = (p.position - center).norm() * std::pow(1.2, octave);
    p.d_min = p.d_max / std::pow(1.2, 7);
    p.descriptor = flip(kf.descriptors.back(), static_cast<int>(rng() % 10));
    scene.points.push_back(p);
  }
  for (std::size_t i = 0; i < distractors; ++i) {
    kf.keypoints.push_back({u(rng) * kf.intrinsics.width, u(rng) * kf.intrinsics.height,
                            static_cast<int>(rng() % 8), 0.0});
    kf.descriptors.push_back(random_descriptor(rng));
    feature_points.push_back(Vector3::Constant(std::numeric_limits<double>::quiet_NaN()));
  }
  kf.associations.assign(kf.keypoints.size(), kNoMapPoint);
  auto snap = std::make_shared<KeyFrameSnapshot>();
  pack_snapshot(kf, 64, 48, 1, *snap);
  scene.query.snapshot = snap;
  scene.query.feature_points = std::move(feature_points);
  return scene;
}

/// Three keyframes facing 120 degrees apart, each seeing `per_keyframe` window
/// points of its own at exact projections.
struct TripleScene {
  std::vector<std::shared_ptr<const KeyFrameSnapshot>> snapshots;
  std::vector<Sim3> poses;
  std::vector<PointRecord> points;
};

inline TripleScene make_triple_scene(std::uint64_t seed, std::size_t per_keyframe = 40) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  TripleScene scene;
  MapPointId next = 0;
  for (int k = 0; k < 3; ++k) {
    SE3Pose pose;
    pose.rotation = Quaternion(Eigen::AngleAxisd(2.0 * M_PI * k / 3.0, Vector3::UnitY()));
    pose.translation = random_vector(rng, 0.2);
    const Sim3 s = to_sim3(pose);
    const Sim3 inv = s.inverse();
    KeyFrame kf = random_keyframe(k, 60, rng, pose);
    for (std::size_t i = 0; i < per_keyframe; ++i) {
      const Vector2 px(10.0 + u(rng) * (kf.intrinsics.width - 20.0),
                       10.0 + u(rng) * (kf.intrinsics.height - 20.0));
      const Vector3 x = unproject(kf.intrinsics, px, 2.0 + 6.0 * u(rng));
      kf.keypoints.push_back({px.x(), px.y(), 0, 0.0});
      kf.descriptors.push_back(random_descriptor(rng));
      PointRecord p;
      p.id = next++;
      p.position = inv * x;
      p.normal = (p.position - s.center()).normalized();
      p.d_max = (p.position - s.center()).norm();
      p.d_min = p.d_max / std::pow(1.2, 7);
      p.descriptor = kf.descriptors.back();
      scene.points.push_back(p);
    }
    kf.associations.assign(kf.keypoints.size(), kNoMapPoint);
    auto snap = std::make_shared<KeyFrameSnapshot>();
    pack_snapshot(kf, 64, 48, 1, *snap);
    scene.snapshots.push_back(snap);
    scene.poses.push_back(s);
  }
  return scene;
}

/// Correspondences a = S * b with both points in front of their cameras; the
/// first `outliers` entries get a random current-side point instead.
inline std::vector<Correspondence> make_correspondences(std::mt19937_64& rng, const Sim3& s_ab,
                                                        std::size_t n, std::size_t outliers = 0) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  const CameraIntrinsics k;
  std::vector<Correspondence> out;
  while (out.size() < n) {
    const Vector2 pb(u(rng) * k.width, u(rng) * k.height);
    Correspondence c;
    c.b = unproject(k, pb, 2.0 + 6.0 * u(rng));
    c.a = s_ab * c.b;
    const auto pa = project(k, c.a);
    if (!pa) continue;
    if (out.size() < outliers) {
      c.a = unproject(k, Vector2(u(rng) * k.width, u(rng) * k.height), 2.0 + 6.0 * u(rng));
      c.pixel_a = *project(k, c.a);
    } else {
      c.pixel_a = *pa;
    }
    c.pixel_b = pb;
    out.push_back(c);
  }
  return out;
}

}  // namespace loopclose::testing

#include "loopclose/pipeline.hpp"

namespace loopclose::testing {

/// Map holding the first `count` keyframes of a world, no loop closing.
inline Map world_map(const SyntheticWorld& world, int count) {
  const Vocabulary vocabulary;
  Map map;
  for (int k = 0; k < count; ++k) map.insert_keyframe(world_keyframe(map, world, k, vocabulary));
  return map;
}

/// Accepted detection whose S_cm is the ground-truth relative motion, so the
/// corrected current pose is the drifted matched pose moved by the true offset.
inline LoopDetection ground_truth_detection(const SyntheticWorld& world, KeyFrameId current,
                                            KeyFrameId matched) {
  LoopDetection d;
  d.current_kf_id = current;
  d.matched_kf_id = matched;
  d.s_cm = to_sim3(compose(world.ground_truth[current], world.ground_truth[matched].inverse()));
  d.accepted = true;
  d.window = {matched};
  return d;
}

}  // namespace loopclose::testing
