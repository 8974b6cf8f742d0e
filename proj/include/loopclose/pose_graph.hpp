#pragma once

// Essential-graph Sim3 optimization.
//
// Edge residual: e = log(S_ij * S_jw * S_iw^-1), zero when the measurement
// equals S_iw * S_jw^-1. Vertices are updated on the left, S <- exp(d) * S.
// Jacobians come from forward-mode dual numbers; the normal equations are
// accumulated in ascending edge order so results do not depend on the worker
// count.

#include "loopclose/loop_correct.hpp"
#include "loopclose/map.hpp"
#include "loopclose/parallel.hpp"

#include <iosfwd>
#include <string>
#include <vector>

namespace loopclose {

struct PoseGraphVertex {
  KeyFrameId id = kNoKeyFrame;
  Sim3 estimate;
  bool fixed = false;
};

enum class EdgeKind { tree, loop, covisibility };

const char* to_string(EdgeKind kind);

struct PoseGraphEdge {
  std::size_t i = 0;  // vertex indices
  std::size_t j = 0;
  Sim3 measurement;   // S_ij
  EdgeKind kind = EdgeKind::tree;
};

struct PoseGraph {
  std::vector<PoseGraphVertex> vertices;
  std::vector<PoseGraphEdge> edges;

  std::size_t index_of(KeyFrameId id) const;
  /// Throws std::invalid_argument for bad indices, zero scale or a component
  /// without a fixed vertex.
  void validate() const;
};

/// Pairs of keyframes whose connection appeared through loop fusion: for every
/// keyframe of the corrected window, connections present after fusion but not
/// in `before`, excluding the window itself.
std::vector<std::pair<KeyFrameId, KeyFrameId>> loop_connections(
    const Map& map, const std::map<KeyFrameId, std::vector<KeyFrameId>>& before,
    const CorrectedPoseSet& corrected);

/// Vertices for every keyframe (corrected Sim3 where available, else the SE3
/// pose with scale 1; the matched keyframe fixed) and edges: spanning tree,
/// earlier loop edges, the new loop edge, and covisibility pairs with weight at
/// or above the essential threshold. Measurements use pre-correction poses,
/// except the new loop edge (S_cm^-1) and pairs listed in `new_links`, which
/// use the corrected estimates.
PoseGraph build_essential_problem(const Map& map, const CorrectedPoseSet& corrected,
                                  const LoopDetection& detection,
                                  const std::vector<std::pair<KeyFrameId, KeyFrameId>>& new_links = {});

Vector7 edge_residual(const Sim3& s_ij, const Sim3& s_iw, const Sim3& s_jw);

struct EdgeLinearization {
  Vector7 residual = Vector7::Zero();
  Matrix7 j_i = Matrix7::Zero();
  Matrix7 j_j = Matrix7::Zero();
};

EdgeLinearization edge_jacobians(const Sim3& s_ij, const Sim3& s_iw, const Sim3& s_jw);

/// Residuals and Jacobians of every edge, data-parallel over edges.
std::vector<EdgeLinearization> linearize(const PoseGraph& graph, const Executor& exec = {});

double chi2(const PoseGraph& graph, const Executor& exec = {});

enum class LinearSolver { automatic, dense, sparse };

struct LmConfig {
  double lambda0 = 1e-4;
  double lambda_min = 1e-12;
  double lambda_max = 1e8;
  int max_iterations = 50;
  double min_step = 1e-8;
  double min_relative_decrease = 1e-10;
  LinearSolver solver = LinearSolver::automatic;
  std::size_t dense_limit = 2100;  // largest reduced dimension solved densely
};

struct LmIteration {
  int iteration = 0;
  double chi2 = 0.0;      // after the step when accepted, else the unchanged value
  double lambda = 0.0;    // damping used for this step
  double step_norm = 0.0;
  bool accepted = false;
};

struct LmResult {
  PoseGraph graph;
  std::vector<LmIteration> trace;
  double initial_chi2 = 0.0;
  double final_chi2 = 0.0;
  int accepted_steps = 0;
  bool ok = true;
  std::string stop_reason;
};

LmResult optimize(const PoseGraph& graph, const LmConfig& config = {}, const Executor& exec = {});

/// Writes optimized poses as SE3 (R, t / s) and moves every map point once
/// with one keyframe: p' = S_new^-1(S_old(p)). The keyframe is the point's
/// anchor from loop correction when given, else its reference keyframe.
void recover(Map& map, const PoseGraph& before, const PoseGraph& after,
             const std::map<MapPointId, KeyFrameId>& anchors = {});

// --- g2o text -------------------------------------------------------------------------

void write_g2o(std::ostream& out, const PoseGraph& graph);
/// Vertices marked fixed via a "FIX id" line.
PoseGraph read_g2o(std::istream& in);

}  // namespace loopclose
