#pragma once

// Region detection: candidate retrieval, RANSAC Sim3 estimation, refinement
// with the narrow/wide projection searches run as a task pair, and batched
// verification over three keyframes.
//
// S_cm maps points from the matched keyframe's camera frame into the current
// keyframe's camera frame, so the corrected current pose is S_cm * T_mw.

#include "loopclose/map.hpp"
#include "loopclose/matching.hpp"
#include "loopclose/parallel.hpp"

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

namespace loopclose {

// --- Sim3 from 3D-3D correspondences ---------------------------------------------

/// One correspondence between two keyframes: the 3D point in each camera frame
/// and its pixel and octave in each image.
struct Correspondence {
  Vector3 a = Vector3::Zero();
  Vector3 b = Vector3::Zero();
  Vector2 pixel_a = Vector2::Zero();
  Vector2 pixel_b = Vector2::Zero();
  int octave_a = 0;
  int octave_b = 0;
};

/// Closed-form similarity with a_k ~= S * b_k (Horn's quaternion method with
/// the symmetric scale). nullopt for fewer than three points or a degenerate set.
std::optional<Sim3> horn_similarity(std::span<const Vector3> a, std::span<const Vector3> b);

struct RansacConfig {
  int max_iterations = 300;
  double chi2_threshold = 9.21;  // squared pixels at octave 0
  double scale_factor = 1.2;
  int min_inliers = 20;
  std::uint64_t seed = 0x9e3779b97f4a7c15ULL;
};

struct RansacResult {
  Sim3 s_ab;
  std::vector<bool> inliers;
  int inlier_count = 0;
  int iterations = 0;
};

/// True when c's symmetric reprojection error under s_ab is inside the threshold.
bool is_inlier(const Correspondence& c, const Sim3& s_ab, const CameraIntrinsics& ka,
               const CameraIntrinsics& kb, const RansacConfig& config);

/// nullopt when fewer than min_inliers support the best model.
std::optional<RansacResult> estimate_sim3_ransac(const std::vector<Correspondence>& matches,
                                                 const CameraIntrinsics& ka,
                                                 const CameraIntrinsics& kb,
                                                 const RansacConfig& config = {});

// --- refinement -------------------------------------------------------------------

/// Current keyframe as seen by refinement: its snapshot plus the camera-frame
/// position of the map point on each feature (NaN where there is none).
struct LoopQuery {
  std::shared_ptr<const KeyFrameSnapshot> snapshot;
  std::vector<Vector3> feature_points;
};

LoopQuery make_loop_query(const Map& map, KeyFrameId current);

struct RefineConfig {
  ProjectionSearchParams narrow = ProjectionSearchParams::narrow();
  ProjectionSearchParams wide = ProjectionSearchParams::wide();
  double huber_px = 2.45;
  int max_iterations = 10;
  double convergence = 1e-6;
  int divergence_limit = 3;
  int min_matches = 10;
  // Post-filter gates in pixels at octave 0, scaled by scale_factor^octave.
  double narrow_gate = 2.5;
  double wide_gate = 7.5;
};

struct RefineResult {
  bool ok = false;
  std::string diagnostic;
  Sim3 s_cm;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<MatchResult> narrow;
  std::vector<MatchResult> wide;
};

/// Reprojection residual of a window point (world position) in the current
/// image under S_cm * T_mw.
double reprojection_error(const LoopQuery& query, const Sim3& s_cm, const SE3Pose& matched_pose,
                          const PointRecord& point, std::uint32_t feature);

/// Runs the narrow search plus Gauss-Newton (task a) and the wide search (task
/// b) as a pair at S0, then post-filters both match sets under the optimized S*.
RefineResult refine_sim3(const LoopQuery& query, std::span<const PointRecord> window_points,
                         const SE3Pose& matched_pose, const Sim3& s0,
                         const RefineConfig& config = {}, const Executor& exec = {});

// --- verification -----------------------------------------------------------------

struct VerifiedMatch {
  KeyFrameId keyframe = kNoKeyFrame;
  MatchResult match;

  friend bool operator==(const VerifiedMatch&, const VerifiedMatch&) = default;
};

/// Searches the window points in three keyframes with one batched job and
/// merges the per-keyframe results in keyframe order.
std::vector<VerifiedMatch> verify_triple(
    const std::vector<std::shared_ptr<const KeyFrameSnapshot>>& snapshots,
    const std::vector<Sim3>& poses, std::span<const PointRecord> window_points,
    const ProjectionSearchParams& params, const Executor& exec = {});

// --- detection ----------------------------------------------------------------------

struct LoopDetectConfig {
  int candidates = 3;
  int word_max_hamming = 50;
  ProjectionSearchParams ps1 = ProjectionSearchParams::narrow();
  ProjectionSearchParams verify = ProjectionSearchParams::narrow();
  RansacConfig ransac;
  RefineConfig refine;
  int accept_threshold = 100;
};

struct LoopDetection {
  KeyFrameId current_kf_id = kNoKeyFrame;
  KeyFrameId matched_kf_id = kNoKeyFrame;
  Sim3 s_cm;
  int verified_matches = 0;
  bool accepted = false;
  std::vector<KeyFrameId> window;          // matched keyframe and its connected keyframes
  std::vector<KeyFrameId> verify_keyframes;
  std::vector<MatchResult> narrow_matches; // current keyframe, under S*
  std::vector<MatchResult> wide_matches;
  std::map<std::string, double> stage_ms;
  std::vector<std::string> log;            // per-candidate outcome
};

/// Matched keyframe plus its connected keyframes, minus the current keyframe
/// and everything it is covisible with. Ascending ids.
std::vector<KeyFrameId> loop_window(const Map& map, KeyFrameId current, KeyFrameId matched);

/// Current keyframe followed by its two strongest covisible predecessors.
std::vector<KeyFrameId> verification_keyframes(const Map& map, KeyFrameId current);

/// Full region detection for a just-inserted keyframe. Runs inside one frozen
/// read phase; returns the first accepted candidate, or the best rejected one
/// (accepted == false) for diagnostics, or nullopt when nothing got that far.
std::optional<LoopDetection> detect_loop(Map& map, KeyFrameId current, const WordIndex& index,
                                         const Vocabulary& vocabulary,
                                         const LoopDetectConfig& config = {},
                                         const Executor& exec = {});

}  // namespace loopclose
