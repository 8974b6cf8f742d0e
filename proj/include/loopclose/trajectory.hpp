#pragma once

// Trajectory evaluation and TUM-format text I/O.
//
// Trajectories are matched by index. ATE compares camera centres; alignment is
// rigid (SE3, no scale) so that scale errors stay visible.

#include "loopclose/geometry.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace loopclose {

struct AteResult {
  double rmse = 0.0;
  bool aligned = false;
  std::vector<double> errors;  // per-pose translation error, metres
  SE3Pose alignment;           // maps estimated centres onto ground truth
};

/// Rigid least-squares fit R, t with dst ~= R * src + t.
SE3Pose align_rigid(const std::vector<Vector3>& src, const std::vector<Vector3>& dst);

/// Both trajectories are world-to-camera poses. Throws std::invalid_argument
/// on mismatched or empty inputs.
AteResult compute_ate(const std::vector<SE3Pose>& estimated,
                      const std::vector<SE3Pose>& ground_truth, bool align = true);

struct TimedPose {
  double timestamp = 0.0;
  SE3Pose pose;  // world-to-camera
};

/// Lines `timestamp tx ty tz qx qy qz qw` holding the camera-to-world pose.
void write_tum(std::ostream& out, const std::vector<TimedPose>& poses);
std::vector<TimedPose> read_tum(std::istream& in);
void save_tum(const std::string& path, const std::vector<TimedPose>& poses);
std::vector<TimedPose> load_tum(const std::string& path);

/// Poses stamped with their index.
std::vector<TimedPose> stamp_by_index(const std::vector<SE3Pose>& poses);

}  // namespace loopclose
