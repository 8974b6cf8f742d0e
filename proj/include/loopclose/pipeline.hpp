#pragma once

// End-to-end loop closing over a synthetic world, stage timing, run reports
// and the scaling benchmark.
//
// Keyframes enter the map in order. A keyframe's pose is the map pose of its
// predecessor composed with the dead-reckoned step, so corrections made by an
// earlier loop closure carry forward to later keyframes.

#include "loopclose/loop_correct.hpp"
#include "loopclose/loop_detect.hpp"
#include "loopclose/pose_graph.hpp"
#include "loopclose/trajectory.hpp"
#include "loopclose/world.hpp"

#include <iosfwd>
#include <map>
#include <string>
#include <vector>

namespace loopclose {

struct PipelineConfig {
  int workers = default_workers();
  bool detection = true;
  int first_detection = 20;  // keyframes inserted before detection starts
  int cooldown = 10;         // keyframes skipped after an accepted loop
  MapConfig map;
  LoopDetectConfig detect;
  ProjectionSearchParams fusion = ProjectionSearchParams::fusion();
  LmConfig lm;
  std::uint64_t vocabulary_seed = Vocabulary::kDefaultSeed;
};

inline constexpr const char* kStageNames[] = {"region_detection", "loop_fusion",
                                              "graph_optimization", "loop_correction",
                                              "total"};

struct LoopEvent {
  LoopDetection detection;
  FusionStats fusion;
  std::size_t plan_entries = 0;
  std::size_t graph_vertices = 0;
  std::size_t graph_edges = 0;
  double initial_chi2 = 0.0;
  double final_chi2 = 0.0;
  int lm_iterations = 0;
  std::string lm_stop;
  std::map<std::string, double> stage_ms;  // keys from kStageNames
};

struct StageFailure {
  KeyFrameId keyframe = kNoKeyFrame;
  std::string stage;
  std::string message;
};

struct PipelineRun {
  std::vector<SE3Pose> corrected;  // final map pose per keyframe
  std::vector<LoopEvent> loops;
  std::vector<StageFailure> failures;
  std::map<std::string, double> stage_ms;  // summed over loop events
  double detection_ms_all = 0.0;           // detect_loop over every keyframe
  int detection_calls = 0;
  SnapshotCounters snapshots;
  bool audit_ok = true;
};

/// Adds the map points keyframe `k` of the world created and returns the
/// keyframe ready for insertion: words assigned, associations resolved through
/// forwarding ids. With `moved`, the keyframe and its new points are carried
/// from the dead-reckoned frame into the map frame of keyframe k - 1.
KeyFrame world_keyframe(Map& map, const SyntheticWorld& world, int k, const Vocabulary& vocabulary,
                        bool moved = false);

/// Runs the whole pipeline once.
PipelineRun run_once(const SyntheticWorld& world, const PipelineConfig& config = {});

struct StageStats {
  double mean = 0.0;
  double stddev = 0.0;
  std::vector<double> runs;
};

struct StageTimingReport {
  std::map<std::string, StageStats> stages;
  int workers = 1;
  int repeats = 1;
  int host_cores = 1;
};

struct PipelineResult {
  PipelineRun run;  // the first repetition
  StageTimingReport timing;
  AteResult ate_before;
  AteResult ate_after;
  bool repeats_identical = true;
};

/// Runs the pipeline `repeats` times, checks the outputs agree and reports
/// mean and sample standard deviation per stage plus ATE before and after.
PipelineResult run_pipeline(const SyntheticWorld& world, const PipelineConfig& config = {},
                            int repeats = 1);

StageStats summarize(const std::vector<double>& samples);

/// Bit pattern of the trajectory, for exact comparison across schedules.
std::string trajectory_bytes(const std::vector<SE3Pose>& poses);

void write_report(std::ostream& out, const SyntheticWorld& world, const PipelineConfig& config,
                  const PipelineResult& result);

/// Top-down SVG of ground truth, drifted and corrected camera centres.
void write_trajectory_svg(std::ostream& out, const std::vector<SE3Pose>& ground_truth,
                          const std::vector<SE3Pose>& drifted,
                          const std::vector<SE3Pose>& corrected);

// --- scaling benchmark ------------------------------------------------------------------

/// Map with every keyframe of a circle world inserted, plus a pose graph over
/// its spanning tree and connection edges.
struct ScalingWorkload {
  SyntheticWorld world;
  Map map;
  std::vector<KeyFrameId> window;
  std::vector<PointRecord> points;
  CorrectedPoseSet poses;
  PoseGraph graph;
};

ScalingWorkload make_scaling_workload(int poses, int landmarks, std::uint64_t seed = 1);

struct ScalingRow {
  std::string stage;
  int size = 0;
  int workers = 1;
  double ms = 0.0;
  double speedup = 1.0;
  std::size_t work_items = 0;
};

/// Median wall time of fusion planning, pose-graph linearization and a full
/// optimization per (size, workers) cell. Sizes must increase.
std::vector<ScalingRow> bench_scaling(const std::vector<int>& sizes,
                                      const std::vector<int>& workers, int repeats = 3,
                                      int landmarks_per_pose = 30, std::uint64_t seed = 1);

void write_scaling_csv(std::ostream& out, const std::vector<ScalingRow>& rows);

}  // namespace loopclose
