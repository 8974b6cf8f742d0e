#pragma once

// Synthetic worlds: a ground-truth trajectory with revisits, a dead-reckoned
// (drifted) copy, and the keyframes and map points a tracker would have built
// along the drifted trajectory.
//
// World frame: z up, trajectories in the z = 0 plane. Cameras look to the left
// of the direction of travel (x along the heading, y down, z to the left).
//
// Map points live in the drifted frame. A landmark keeps its map point while
// consecutive keyframes see it from a similar direction; otherwise a new map
// point is created at its position seen from the drifted pose. Revisits
// therefore produce duplicate points that loop fusion has to merge.

#include "loopclose/map.hpp"

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

namespace loopclose {

enum class TrajectoryShape { circle, figure_eight, corridor_return };

const char* to_string(TrajectoryShape shape);
TrajectoryShape parse_shape(const std::string& name);

struct SyntheticWorldConfig {
  TrajectoryShape shape = TrajectoryShape::circle;
  int poses = 100;
  int landmarks = 3000;
  double visibility_radius = 8.0;   // metres
  double sigma_t = 0.01;            // metres per step, per axis
  double sigma_r = 0.5 * M_PI / 180.0;  // radians per step, per axis
  double descriptor_noise = 0.05;   // bit-flip probability per observation
  double pixel_noise = 0.5;         // pixels
  double untracked_fraction = 0.1;  // observations left without an association
  double radius = 10.0;             // circle radius, lobe radius, or half corridor length
  double laps = 1.1;
  double reuse_cosine = 0.55;
  double scale_factor = 1.2;
  int levels = 8;
  std::uint64_t seed = 1;
  CameraIntrinsics intrinsics;

  /// Throws std::invalid_argument on an inconsistent configuration.
  void validate() const;
};

/// Index slack when matching a detected loop pair against the loop labels.
inline constexpr int kLoopWindowSlack = 10;

struct SyntheticWorld {
  SyntheticWorldConfig config;
  std::vector<SE3Pose> ground_truth;  // world-to-camera
  std::vector<SE3Pose> drifted;
  std::vector<Vector3> landmarks;     // ground-truth positions
  std::vector<KeyFrame> keyframes;    // drifted poses; word_ids left empty
  std::vector<MapPoint> map_points;   // no observations; reference_keyframe set
  std::vector<std::int64_t> point_landmark;
  std::vector<std::pair<int, int>> loop_labels;

  /// Whether (i, j) lies within `slack` indices of a labelled loop pair.
  bool near_loop_label(int i, int j, int slack) const;
};

/// Camera-to-world rotation for a camera travelling along `heading` and looking left.
Matrix3 left_looking_rotation(const Vector3& heading);

/// Ground-truth world-to-camera poses for a shape.
std::vector<SE3Pose> ground_truth_trajectory(const SyntheticWorldConfig& config);

/// Dead reckoning: each drifted step is the ground-truth relative motion
/// followed by a random SE3 perturbation.
std::vector<SE3Pose> dead_reckon(const std::vector<SE3Pose>& ground_truth, double sigma_t,
                                 double sigma_r, std::uint64_t seed);

/// Pose pairs closer than 1 m whose index gap exceeds a quarter of the sequence.
std::vector<std::pair<int, int>> loop_labels(const std::vector<SE3Pose>& ground_truth);

SyntheticWorld generate_world(const SyntheticWorldConfig& config);

// --- JSON -----------------------------------------------------------------------------

std::string descriptor_to_hex(const Descriptor& d);
Descriptor descriptor_from_hex(const std::string& hex);

void write_world(std::ostream& out, const SyntheticWorld& world);
SyntheticWorld read_world(std::istream& in);
void save_world(const std::string& path, const SyntheticWorld& world);
SyntheticWorld load_world(const std::string& path);

}  // namespace loopclose
