#include "loopclose/loop_correct.hpp"

#include <algorithm>

namespace loopclose {

std::vector<KeyFrameId> correction_window(const Map& map, KeyFrameId current) {
  std::vector<KeyFrameId> window = map.connected(current);
  window.push_back(current);
  std::sort(window.begin(), window.end());
  return window;
}

CorrectedPoseSet propagate_correction(Map& map, const LoopDetection& detection) {
  if (!detection.accepted) throw std::invalid_argument("propagate_correction: detection not accepted");
  const KeyFrameId current = detection.current_kf_id;
  const Sim3 s_cw_old = to_sim3(map.keyframe(current).pose);
  const Sim3 s_cw = compose(detection.s_cm, to_sim3(map.keyframe(detection.matched_kf_id).pose));
  const Sim3 s_wc_old = s_cw_old.inverse();

  CorrectedPoseSet out;
  const auto window = correction_window(map, current);
  for (KeyFrameId k : window) {
    CorrectedPose cp;
    cp.old_pose = to_sim3(map.keyframe(k).pose);
    cp.corrected = k == current ? s_cw : compose(compose(cp.old_pose, s_wc_old), s_cw);
    out.poses.emplace(k, cp);
  }

  // Each point moves once, with its reference keyframe when that is in the
  // window, else with the lowest-id window keyframe observing it.
  for (MapPointId id : map.points_seen_by(window)) {
    const MapPoint& p = map.map_point(id);
    KeyFrameId anchor = p.reference_keyframe;
    if (!out.contains(anchor)) {
      anchor = kNoKeyFrame;
      for (const auto& [kf, feature] : p.observations) {
        if (out.contains(kf)) {
          anchor = kf;
          break;
        }
      }
    }
    const CorrectedPose& cp = out.poses.at(anchor);
    out.anchors[id] = anchor;
    map.set_point_position(id, cp.corrected.inverse() * (cp.old_pose * p.position));
  }
  for (const auto& [k, cp] : out.poses) map.set_pose(k, to_se3(cp.corrected));
  map.add_loop_edge(detection.matched_kf_id, current);
  return out;
}

FusionPlan plan_fusion(const Map& map, const std::vector<KeyFrameId>& window,
                       std::span<const PointRecord> loop_points,
                       const CorrectedPoseSet& corrected, const ProjectionSearchParams& params,
                       const Executor& exec) {
  params.validate();
  std::vector<KeyFrameId> order = window;
  std::sort(order.begin(), order.end());
  order.erase(std::unique(order.begin(), order.end()), order.end());

  auto batch = run_batch<std::vector<FusionEntry>>(
      order.size(),
      [&](std::size_t i) {
        const KeyFrameId k = order[i];
        const auto snap = map.snapshot(k);
        auto it = corrected.poses.find(k);
        const Sim3 pose = it != corrected.poses.end() ? it->second.corrected : to_sim3(snap->pose);
        // Points this keyframe already observes are not fusion candidates.
        std::vector<PointRecord> fresh;
        fresh.reserve(loop_points.size());
        for (const auto& p : loop_points) {
          if (!map.map_point(p.id).observations.count(k)) fresh.push_back(p);
        }
        std::vector<FusionEntry> partial;
        for (const auto& m :
             projection_search(*snap, pose, fresh, params, Executor::serial())) {
          const MapPointId slot = snap->associations[m.feature_index];
          if (slot == m.map_point_id) continue;
          FusionEntry e{k, m.feature_index, m.map_point_id, kNoMapPoint};
          if (slot != kNoMapPoint) {
            const std::size_t n_loop = map.map_point(m.map_point_id).observations.size();
            const std::size_t n_slot = map.map_point(slot).observations.size();
            const bool loop_wins =
                n_loop > n_slot || (n_loop == n_slot && m.map_point_id < slot);
            e.survivor = loop_wins ? m.map_point_id : slot;
            e.replaced = loop_wins ? slot : m.map_point_id;
          }
          partial.push_back(e);
        }
        std::sort(partial.begin(), partial.end(), [](const FusionEntry& a, const FusionEntry& b) {
          return a.feature < b.feature;
        });
        return partial;
      },
      exec, "plan_fusion");
  if (!batch.ok()) {
    throw std::runtime_error("plan_fusion failed at keyframe index " +
                             std::to_string(batch.error->index) + ": " + batch.error->message);
  }

  FusionPlan plan;
  std::set<std::pair<KeyFrameId, std::uint32_t>> seen;
  for (const auto& partial : batch.output) {
    for (const auto& e : partial) {
      if (seen.emplace(e.keyframe, e.feature).second) plan.push_back(e);
    }
  }
  return plan;
}

FusionStats apply_fusion(Map& map, const FusionPlan& plan) {
  FusionStats stats;
  std::set<KeyFrameId> touched;
  for (const auto& e : plan) {
    if (!map.has_keyframe(e.keyframe) || !map.has_map_point(e.survivor)) {
      ++stats.skipped;
      continue;
    }
    const MapPointId survivor = map.resolve(e.survivor);
    if (e.replaced != kNoMapPoint) {
      const MapPointId victim = map.resolve(e.replaced);
      if (victim == survivor) {
        ++stats.skipped;
        continue;
      }
      for (const auto& [kf, feature] : map.map_point(victim).observations) touched.insert(kf);
      touched.insert(e.keyframe);
      map.replace_map_point(victim, survivor);
      ++stats.replaced;
    } else if (map.add_observation(e.keyframe, e.feature, survivor)) {
      touched.insert(e.keyframe);
      ++stats.new_associations;
    } else {
      ++stats.skipped;
    }
  }
  for (KeyFrameId k : touched) map.update_connections(k);
  stats.touched.assign(touched.begin(), touched.end());
  return stats;
}

}  // namespace loopclose
