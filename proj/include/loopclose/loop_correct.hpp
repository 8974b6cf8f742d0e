#pragma once

// Loop correction: Sim3 propagation through the current keyframe's window,
// planning of duplicate-point fusion (parallel, read-only) and its sequential
// application.

#include "loopclose/loop_detect.hpp"

#include <map>
#include <set>
#include <vector>

namespace loopclose {

struct CorrectedPose {
  Sim3 old_pose;   // scale 1, from the keyframe's SE3 pose before correction
  Sim3 corrected;
};

struct CorrectedPoseSet {
  std::map<KeyFrameId, CorrectedPose> poses;
  // Keyframe each corrected point moved with.
  std::map<MapPointId, KeyFrameId> anchors;

  bool contains(KeyFrameId id) const { return poses.count(id) != 0; }
};

/// Current keyframe plus its connected keyframes, ascending.
std::vector<KeyFrameId> correction_window(const Map& map, KeyFrameId current);

/// Corrects the current window with S_cw = S_cm * T_mw, re-anchors each window
/// point once and writes the poses back as SE3 (R, t / s). Records the loop edge.
CorrectedPoseSet propagate_correction(Map& map, const LoopDetection& detection);

struct FusionEntry {
  KeyFrameId keyframe = kNoKeyFrame;
  std::uint32_t feature = 0;
  MapPointId survivor = kNoMapPoint;
  MapPointId replaced = kNoMapPoint;  // kNoMapPoint: new association

  friend bool operator==(const FusionEntry&, const FusionEntry&) = default;
};

using FusionPlan = std::vector<FusionEntry>;

/// Projects the loop points into every window keyframe under its corrected
/// pose. Data-parallel over keyframes; must run inside a read phase.
FusionPlan plan_fusion(const Map& map, const std::vector<KeyFrameId>& window,
                       std::span<const PointRecord> loop_points,
                       const CorrectedPoseSet& corrected,
                       const ProjectionSearchParams& params = ProjectionSearchParams::fusion(),
                       const Executor& exec = {});

struct FusionStats {
  int replaced = 0;
  int new_associations = 0;
  int skipped = 0;
  std::vector<KeyFrameId> touched;
};

/// Executes the plan in order, following forwarding ids, then refreshes the
/// connections of every keyframe whose observations changed.
FusionStats apply_fusion(Map& map, const FusionPlan& plan);

}  // namespace loopclose
