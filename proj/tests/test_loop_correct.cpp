#include "loopclose/loop_correct.hpp"

#include "support.hpp"

#include <doctest.h>

using namespace loopclose;
using namespace loopclose::testing;

namespace {

const SyntheticWorld& circle_world() {
  static const SyntheticWorld world = generate_world(SyntheticWorldConfig{});
  return world;
}

double pose_distance(const SE3Pose& a, const SE3Pose& b) {
  return sim3_distance(to_sim3(a), to_sim3(b));
}

// Three keyframes side by side sharing 20 points; keyframe 2 observes a
// duplicate of a point the other two already observe.
struct DuplicateScene {
  Map map;
  MapPointId original = kNoMapPoint;
  MapPointId duplicate = kNoMapPoint;
  std::uint32_t duplicate_feature = 0;
};

DuplicateScene make_duplicate_scene() {
  std::mt19937_64 rng(77);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  DuplicateScene scene;
  std::vector<SE3Pose> poses(3);
  for (int k = 0; k < 3; ++k) poses[k].translation = Vector3(-0.1 * k, 0.0, 0.0);

  std::vector<Vector3> positions;
  std::vector<Descriptor> descriptors;
  std::vector<MapPointId> ids;
  for (int i = 0; i < 21; ++i) {
    const CameraIntrinsics k;
    const Vector3 x = unproject(k, Vector2(60.0 + u(rng) * 520.0, 60.0 + u(rng) * 360.0),
                                3.0 + 3.0 * u(rng));
    MapPoint p;
    p.position = x;
    p.normal = x.normalized();
    p.d_max = x.norm() * 1.1;
    p.d_min = p.d_max / std::pow(1.2, 7);
    p.descriptor = random_descriptor(rng);
    p.reference_keyframe = 0;
    positions.push_back(x);
    descriptors.push_back(p.descriptor);
    ids.push_back(scene.map.add_map_point(p));
  }
  scene.original = ids.back();
  MapPoint dup = scene.map.map_point(scene.original);
  dup.id = kNoMapPoint;
  dup.observations.clear();
  dup.reference_keyframe = 2;
  scene.duplicate = scene.map.add_map_point(dup);

  for (int k = 0; k < 3; ++k) {
    KeyFrame kf;
    kf.id = k;
    kf.pose = poses[k];
    for (std::size_t i = 0; i < positions.size(); ++i) {
      const auto px = project(kf.intrinsics, poses[k] * positions[i]);
      REQUIRE(px);
      kf.keypoints.push_back({px->x(), px->y(), 0, 0.0});
      kf.descriptors.push_back(descriptors[i]);
      const bool last = i + 1 == positions.size();
      kf.associations.push_back(last && k == 2 ? scene.duplicate : ids[i]);
    }
    if (k == 2) scene.duplicate_feature = static_cast<std::uint32_t>(positions.size() - 1);
    scene.map.insert_keyframe(kf);
  }
  return scene;
}

CorrectedPoseSet unchanged_poses(const Map& map, const std::vector<KeyFrameId>& window) {
  CorrectedPoseSet set;
  for (KeyFrameId k : window) {
    const Sim3 s = to_sim3(map.keyframe(k).pose);
    set.poses[k] = {s, s};
  }
  return set;
}

}  // namespace

TEST_CASE("identity correction leaves poses and points in place") {
  const auto& world = circle_world();
  Map map = world_map(world, 40);
  const KeyFrameId current = 39;
  const KeyFrameId matched = 5;
  LoopDetection d;
  d.current_kf_id = current;
  d.matched_kf_id = matched;
  d.accepted = true;
  d.s_cm = to_sim3(compose(map.keyframe(current).pose, map.keyframe(matched).pose.inverse()));

  std::map<KeyFrameId, SE3Pose> before;
  for (const auto& [id, kf] : map.keyframes()) before[id] = kf.pose;
  std::map<MapPointId, Vector3> points;
  for (const auto& [id, p] : map.map_points()) points[id] = p.position;

  const CorrectedPoseSet set = propagate_correction(map, d);
  CHECK(set.poses.size() == correction_window(map, current).size());
  for (const auto& [id, kf] : map.keyframes()) CHECK(pose_distance(kf.pose, before[id]) < 1e-12);
  for (const auto& [id, p] : map.map_points()) CHECK((p.position - points[id]).norm() < 1e-12);
  CHECK(map.loop_edges().count({matched, current}) == 1);
  CHECK(audit(map).ok());
}

TEST_CASE("a pure translation correction preserves relative poses") {
  const auto& world = circle_world();
  Map map = world_map(world, 40);
  const KeyFrameId current = 39;
  const KeyFrameId matched = 3;
  SE3Pose shift;
  shift.translation = Vector3(1.0, 0.0, 0.0);
  // Corrected current pose T_cw * shift^-1: the window moves by +1 m along x.
  const SE3Pose target = compose(map.keyframe(current).pose, shift.inverse());
  LoopDetection d;
  d.current_kf_id = current;
  d.matched_kf_id = matched;
  d.accepted = true;
  d.s_cm = to_sim3(compose(target, map.keyframe(matched).pose.inverse()));

  const auto window = correction_window(map, current);
  REQUIRE(window.size() > 3);
  std::map<KeyFrameId, SE3Pose> before;
  for (KeyFrameId k : window) before[k] = map.keyframe(k).pose;
  std::map<MapPointId, Vector3> points;
  for (MapPointId id : map.points_seen_by(window)) points[id] = map.map_point(id).position;

  const CorrectedPoseSet set = propagate_correction(map, d);
  for (KeyFrameId a : window) {
    CHECK(pose_distance(map.keyframe(a).pose, compose(before[a], shift.inverse())) < 1e-9);
    for (KeyFrameId b : window) {
      const SE3Pose rel_before = compose(before[a], before[b].inverse());
      const SE3Pose rel_after = compose(map.keyframe(a).pose, map.keyframe(b).pose.inverse());
      CHECK(pose_distance(rel_before, rel_after) < 1e-9);
    }
  }
  for (const auto& [id, x] : points) {
    CHECK((map.map_point(id).position - (x + shift.translation)).norm() < 1e-9);
    CHECK(set.anchors.count(id) == 1);
  }
  // Keyframes outside the window stay put.
  CHECK(pose_distance(map.keyframe(0).pose, world.drifted[0]) == 0.0);
}

TEST_CASE("propagate_correction refuses a rejected detection") {
  const auto& world = circle_world();
  Map map = world_map(world, 30);
  LoopDetection d;
  d.current_kf_id = 29;
  d.matched_kf_id = 2;
  CHECK_THROWS_AS(propagate_correction(map, d), std::invalid_argument);
}

TEST_CASE("a constructed duplicate is fused into the more observed point") {
  DuplicateScene scene = make_duplicate_scene();
  REQUIRE(scene.map.map_point(scene.original).observations.size() == 2);
  REQUIRE(scene.map.map_point(scene.duplicate).observations.size() == 1);

  FusionPlan plan;
  {
    ReadPhase phase = scene.map.freeze();
    const Map& frozen = scene.map;
    const std::vector<PointRecord> loop{make_point_record(frozen.map_point(scene.original))};
    plan = plan_fusion(frozen, {2}, loop, unchanged_poses(frozen, {2}));
  }
  REQUIRE(plan.size() == 1);
  CHECK(plan[0] == FusionEntry{2, scene.duplicate_feature, scene.original, scene.duplicate});

  const FusionStats stats = apply_fusion(scene.map, plan);
  CHECK(stats.replaced == 1);
  CHECK(stats.new_associations == 0);
  CHECK(scene.map.resolve(scene.duplicate) == scene.original);
  CHECK(scene.map.keyframe(2).associations[scene.duplicate_feature] == scene.original);
  CHECK(scene.map.map_point(scene.original).observations.size() == 3);
  CHECK(audit(scene.map).ok());
}

TEST_CASE("the same duplicate seen from the other side keeps the survivor") {
  DuplicateScene scene = make_duplicate_scene();
  FusionPlan plan;
  {
    ReadPhase phase = scene.map.freeze();
    const Map& frozen = scene.map;
    // The one-observation point is the loop point; it still loses.
    const std::vector<PointRecord> loop{make_point_record(frozen.map_point(scene.duplicate))};
    plan = plan_fusion(frozen, {0, 1}, loop, unchanged_poses(frozen, {0, 1}));
  }
  REQUIRE(plan.size() == 2);
  for (const auto& e : plan) {
    CHECK(e.survivor == scene.original);
    CHECK(e.replaced == scene.duplicate);
  }
  const FusionStats stats = apply_fusion(scene.map, plan);
  CHECK(stats.replaced == 1);
  CHECK(stats.skipped == 1);
  CHECK(audit(scene.map).ok());
}

TEST_CASE("plan_fusion is identical for every worker count") {
  const auto& world = circle_world();
  Map map = world_map(world, static_cast<int>(world.keyframes.size()));
  REQUIRE_FALSE(world.loop_labels.empty());
  const auto [first, second] = world.loop_labels.front();
  const LoopDetection d = ground_truth_detection(world, second, first);
  const CorrectedPoseSet set = propagate_correction(map, d);

  FusionPlan serial;
  {
    ReadPhase phase = map.freeze();
    const Map& frozen = map;
    std::vector<KeyFrameId> window;
    for (const auto& [k, cp] : set.poses) window.push_back(k);
    std::vector<PointRecord> points;
    const std::vector<KeyFrameId> loop_kfs = loop_window(frozen, second, first);
    for (MapPointId id : frozen.points_seen_by(loop_kfs)) {
      points.push_back(make_point_record(frozen.map_point(id)));
    }
    serial = plan_fusion(frozen, window, points, set, ProjectionSearchParams::fusion(),
                         Executor::serial());
    for (int w : {2, 4, 8}) {
      CAPTURE(w);
      CHECK(plan_fusion(frozen, window, points, set, ProjectionSearchParams::fusion(),
                        Executor::with_workers(w)) == serial);
    }
  }
  REQUIRE_FALSE(serial.empty());
  std::set<std::pair<KeyFrameId, std::uint32_t>> slots;
  for (const auto& e : serial) CHECK(slots.emplace(e.keyframe, e.feature).second);

  const FusionStats stats = apply_fusion(map, serial);
  CHECK(stats.replaced > 0);
  CHECK(stats.replaced + stats.new_associations + stats.skipped == static_cast<int>(serial.size()));
  CHECK(audit(map).ok());
}

TEST_CASE("plan_fusion refuses stale snapshots") {
  DuplicateScene scene = make_duplicate_scene();
  SE3Pose moved = scene.map.keyframe(2).pose;
  moved.translation.x() += 0.5;
  scene.map.set_pose(2, moved);
  const Map& map = scene.map;
  const std::vector<PointRecord> loop{make_point_record(map.map_point(scene.original))};
  CHECK_THROWS(plan_fusion(map, {2}, loop, unchanged_poses(map, {2})));
}
