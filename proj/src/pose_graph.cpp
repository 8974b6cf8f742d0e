#include "loopclose/pose_graph.hpp"

#include "loopclose/autodiff.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Sparse>
#include <Eigen/SparseCholesky>

#include <algorithm>
#include <functional>
#include <iomanip>
#include <istream>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

namespace loopclose {

const char* to_string(EdgeKind kind) {
  switch (kind) {
    case EdgeKind::tree: return "tree";
    case EdgeKind::loop: return "loop";
    case EdgeKind::covisibility: return "covisibility";
  }
  return "unknown";
}

std::size_t PoseGraph::index_of(KeyFrameId id) const {
  for (std::size_t v = 0; v < vertices.size(); ++v) {
    if (vertices[v].id == id) return v;
  }
  throw std::out_of_range("pose graph has no vertex " + std::to_string(id));
}

void PoseGraph::validate() const {
  const std::size_t n = vertices.size();
  std::vector<std::size_t> root(n);
  std::iota(root.begin(), root.end(), 0);
  std::function<std::size_t(std::size_t)> find = [&](std::size_t x) {
    while (root[x] != x) x = root[x] = root[root[x]];
    return x;
  };
  for (const auto& v : vertices) {
    if (!(v.estimate.scale > 0.0)) {
      throw std::invalid_argument("vertex " + std::to_string(v.id) + " has non-positive scale");
    }
  }
  for (const auto& e : edges) {
    if (e.i >= n || e.j >= n || e.i == e.j) throw std::invalid_argument("edge with bad endpoints");
    if (!(e.measurement.scale > 0.0)) throw std::invalid_argument("edge with non-positive scale");
    root[find(e.i)] = find(e.j);
  }
  std::set<std::size_t> anchored;
  for (std::size_t v = 0; v < n; ++v) {
    if (vertices[v].fixed) anchored.insert(find(v));
  }
  for (std::size_t v = 0; v < n; ++v) {
    if (!anchored.count(find(v))) {
      throw std::invalid_argument("vertex " + std::to_string(vertices[v].id) +
                                  " is not connected to a fixed vertex");
    }
  }
}

// --- problem construction -------------------------------------------------------------

std::vector<std::pair<KeyFrameId, KeyFrameId>> loop_connections(
    const Map& map, const std::map<KeyFrameId, std::vector<KeyFrameId>>& before,
    const CorrectedPoseSet& corrected) {
  std::set<std::pair<KeyFrameId, KeyFrameId>> out;
  for (const auto& [k, cp] : corrected.poses) {
    std::set<KeyFrameId> old;
    if (auto it = before.find(k); it != before.end()) old.insert(it->second.begin(), it->second.end());
    for (KeyFrameId o : map.connected(k)) {
      if (old.count(o) || corrected.contains(o)) continue;
      out.emplace(std::min(k, o), std::max(k, o));
    }
  }
  return {out.begin(), out.end()};
}

PoseGraph build_essential_problem(const Map& map, const CorrectedPoseSet& corrected,
                                  const LoopDetection& detection,
                                  const std::vector<std::pair<KeyFrameId, KeyFrameId>>& new_links) {
  PoseGraph graph;
  std::map<KeyFrameId, std::size_t> index;
  std::vector<Sim3> before;
  for (const auto& [id, kf] : map.keyframes()) {
    PoseGraphVertex v;
    v.id = id;
    auto it = corrected.poses.find(id);
    if (it != corrected.poses.end()) {
      v.estimate = it->second.corrected;
      before.push_back(it->second.old_pose);
    } else {
      v.estimate = to_sim3(kf.pose);
      before.push_back(v.estimate);
    }
    v.fixed = id == detection.matched_kf_id;
    index.emplace(id, graph.vertices.size());
    graph.vertices.push_back(v);
  }
  auto relative = [](const Sim3& a, const Sim3& b) { return compose(a, b.inverse()); };
  auto add = [&](KeyFrameId a, KeyFrameId b, const Sim3& measurement, EdgeKind kind) {
    graph.edges.push_back({index.at(a), index.at(b), measurement, kind});
  };

  for (const auto& [id, kf] : map.keyframes()) {
    const KeyFrameId parent = map.parent(id);
    if (parent == kNoKeyFrame) continue;
    add(parent, id, relative(before[index.at(parent)], before[index.at(id)]), EdgeKind::tree);
  }
  const auto new_loop = std::pair(std::min(detection.matched_kf_id, detection.current_kf_id),
                                  std::max(detection.matched_kf_id, detection.current_kf_id));
  for (const auto& [a, b] : map.loop_edges()) {
    if (std::pair(a, b) == new_loop) continue;
    add(a, b, relative(before[index.at(a)], before[index.at(b)]), EdgeKind::loop);
  }
  add(detection.matched_kf_id, detection.current_kf_id, detection.s_cm.inverse(), EdgeKind::loop);

  const std::set<std::pair<KeyFrameId, KeyFrameId>> links(new_links.begin(), new_links.end());
  for (const auto& [a, b] : map.essential_covisibility_edges()) {
    const std::size_t ia = index.at(a);
    const std::size_t ib = index.at(b);
    const Sim3 m = links.count({a, b})
                       ? relative(graph.vertices[ia].estimate, graph.vertices[ib].estimate)
                       : relative(before[ia], before[ib]);
    add(a, b, m, EdgeKind::covisibility);
  }
  graph.validate();
  return graph;
}

// --- residuals and Jacobians --------------------------------------------------------------

Vector7 edge_residual(const Sim3& s_ij, const Sim3& s_iw, const Sim3& s_jw) {
  return sim3_log<double>(compose(compose(s_ij, s_jw), s_iw.inverse()));
}

EdgeLinearization edge_jacobians(const Sim3& s_ij, const Sim3& s_iw, const Sim3& s_jw) {
  EdgeLinearization out;
  Vec7T<Dual7> delta;
  for (int k = 0; k < 7; ++k) delta(k) = Dual7::variable(0.0, k);
  const Sim3T<Dual7> perturb = sim3_exp<Dual7>(delta);
  const Sim3T<Dual7> ij = s_ij.cast<Dual7>();

  const Sim3T<Dual7> i_pert = compose(perturb, s_iw.cast<Dual7>());
  const Vec7T<Dual7> e_i = sim3_log<Dual7>(compose(compose(ij, s_jw.cast<Dual7>()), i_pert.inverse()));
  const Sim3T<Dual7> j_pert = compose(perturb, s_jw.cast<Dual7>());
  const Vec7T<Dual7> e_j = sim3_log<Dual7>(compose(compose(ij, j_pert), s_iw.inverse().cast<Dual7>()));
  for (int r = 0; r < 7; ++r) {
    out.residual(r) = e_i(r).value;
    out.j_i.row(r) = e_i(r).partials.transpose();
    out.j_j.row(r) = e_j(r).partials.transpose();
  }
  return out;
}

std::vector<EdgeLinearization> linearize(const PoseGraph& graph, const Executor& exec) {
  auto batch = run_batch<EdgeLinearization>(
      graph.edges.size(),
      [&](std::size_t k) {
        const auto& e = graph.edges[k];
        return edge_jacobians(e.measurement, graph.vertices[e.i].estimate,
                              graph.vertices[e.j].estimate);
      },
      exec, "pose_graph_linearize");
  if (!batch.ok()) {
    throw std::runtime_error("linearization failed at edge " + std::to_string(batch.error->index) +
                             ": " + batch.error->message);
  }
  return std::move(batch.output);
}

double chi2(const PoseGraph& graph, const Executor& exec) {
  auto batch = run_batch<double>(
      graph.edges.size(),
      [&](std::size_t k) {
        const auto& e = graph.edges[k];
        return edge_residual(e.measurement, graph.vertices[e.i].estimate,
                             graph.vertices[e.j].estimate)
            .squaredNorm();
      },
      exec, "pose_graph_chi2");
  if (!batch.ok()) {
    throw std::runtime_error("residual failed at edge " + std::to_string(batch.error->index) + ": " +
                             batch.error->message);
  }
  double sum = 0.0;
  for (double c : batch.output) sum += c;
  return sum;
}

// --- Levenberg-Marquardt -------------------------------------------------------------------

namespace {

struct NormalEquations {
  std::map<std::pair<int, int>, Matrix7> blocks;  // upper triangle, row block <= column block
  Eigen::VectorXd b;
};

NormalEquations accumulate(const PoseGraph& graph, const std::vector<EdgeLinearization>& lin,
                           const std::vector<int>& free_index, int free_count) {
  NormalEquations ne;
  ne.b = Eigen::VectorXd::Zero(7 * free_count);
  auto add_block = [&](int r, int c, const Matrix7& m) {
    auto [it, inserted] = ne.blocks.try_emplace({r, c}, m);
    if (!inserted) it->second += m;
  };
  for (std::size_t k = 0; k < graph.edges.size(); ++k) {
    const auto& e = graph.edges[k];
    const int fi = free_index[e.i];
    const int fj = free_index[e.j];
    const auto& l = lin[k];
    if (fi >= 0) {
      add_block(fi, fi, l.j_i.transpose() * l.j_i);
      ne.b.segment<7>(7 * fi) += l.j_i.transpose() * l.residual;
    }
    if (fj >= 0) {
      add_block(fj, fj, l.j_j.transpose() * l.j_j);
      ne.b.segment<7>(7 * fj) += l.j_j.transpose() * l.residual;
    }
    if (fi >= 0 && fj >= 0) {
      if (fi < fj) {
        add_block(fi, fj, l.j_i.transpose() * l.j_j);
      } else {
        add_block(fj, fi, l.j_j.transpose() * l.j_i);
      }
    }
  }
  return ne;
}

std::optional<Eigen::VectorXd> solve_damped(const NormalEquations& ne, double lambda, bool dense) {
  const Eigen::Index dim = ne.b.size();
  if (dense) {
    Eigen::MatrixXd h = Eigen::MatrixXd::Zero(dim, dim);
    for (const auto& [rc, m] : ne.blocks) {
      h.block<7, 7>(7 * rc.first, 7 * rc.second) = m;
      if (rc.first != rc.second) h.block<7, 7>(7 * rc.second, 7 * rc.first) = m.transpose();
    }
    h.diagonal() += lambda * h.diagonal();
    Eigen::LDLT<Eigen::MatrixXd> ldlt(h);
    if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) return std::nullopt;
    Eigen::VectorXd x = ldlt.solve(-ne.b);
    if (!x.allFinite()) return std::nullopt;
    return x;
  }
  std::vector<Eigen::Triplet<double>> triplets;
  triplets.reserve(ne.blocks.size() * 49);
  for (const auto& [rc, m] : ne.blocks) {
    for (int r = 0; r < 7; ++r) {
      for (int c = 0; c < 7; ++c) {
        const int row = 7 * rc.first + r;
        const int col = 7 * rc.second + c;
        if (row > col) continue;
        double value = m(r, c);
        if (row == col) value += lambda * value;
        // Stored as the lower triangle of the symmetric matrix.
        triplets.emplace_back(col, row, value);
      }
    }
  }
  Eigen::SparseMatrix<double> h(dim, dim);
  h.setFromTriplets(triplets.begin(), triplets.end());
  Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>, Eigen::Lower> ldlt(h);
  if (ldlt.info() != Eigen::Success || !(ldlt.vectorD().minCoeff() > 0.0)) return std::nullopt;
  Eigen::VectorXd x = ldlt.solve(-ne.b);
  if (ldlt.info() != Eigen::Success || !x.allFinite()) return std::nullopt;
  return x;
}

PoseGraph apply_step(const PoseGraph& graph, const Eigen::VectorXd& step,
                     const std::vector<int>& free_index) {
  PoseGraph out = graph;
  for (std::size_t v = 0; v < out.vertices.size(); ++v) {
    if (free_index[v] < 0) continue;
    const Vector7 d = step.segment<7>(7 * free_index[v]);
    out.vertices[v].estimate = compose(sim3_exp<double>(d), out.vertices[v].estimate);
    out.vertices[v].estimate.rotation.normalize();
  }
  return out;
}

}  // namespace

LmResult optimize(const PoseGraph& graph, const LmConfig& config, const Executor& exec) {
  graph.validate();
  LmResult result;
  result.graph = graph;

  std::vector<int> free_index(graph.vertices.size(), -1);
  int free_count = 0;
  for (std::size_t v = 0; v < graph.vertices.size(); ++v) {
    if (!graph.vertices[v].fixed) free_index[v] = free_count++;
  }
  const std::size_t dim = 7 * static_cast<std::size_t>(free_count);
  const bool dense = config.solver == LinearSolver::dense ||
                     (config.solver == LinearSolver::automatic && dim <= config.dense_limit);

  double current = chi2(result.graph, exec);
  result.initial_chi2 = current;
  result.final_chi2 = current;
  if (free_count == 0) {
    result.stop_reason = "no free vertices";
    return result;
  }

  double lambda = config.lambda0;
  auto lin = linearize(result.graph, exec);
  NormalEquations ne = accumulate(result.graph, lin, free_index, free_count);
  result.stop_reason = "iteration limit";
  for (int iter = 1; iter <= config.max_iterations; ++iter) {
    std::optional<Eigen::VectorXd> step = solve_damped(ne, lambda, dense);
    while (!step) {
      lambda *= 4.0;
      if (lambda > config.lambda_max) {
        result.ok = false;
        result.stop_reason = "LDLT failed with damping up to " + std::to_string(config.lambda_max);
        return result;
      }
      step = solve_damped(ne, lambda, dense);
    }
    LmIteration record;
    record.iteration = iter;
    record.lambda = lambda;
    record.step_norm = step->norm();
    const bool tiny = record.step_norm < config.min_step;
    PoseGraph candidate = apply_step(result.graph, *step, free_index);
    const double next = chi2(candidate, exec);
    if (next < current) {
      const double relative = (current - next) / current;
      result.graph = std::move(candidate);
      current = next;
      record.accepted = true;
      record.chi2 = next;
      ++result.accepted_steps;
      lambda = std::max(lambda / 2.0, config.lambda_min);
      result.trace.push_back(record);
      if (tiny) {
        result.stop_reason = "step below threshold";
        break;
      }
      if (relative < config.min_relative_decrease || current == 0.0) {
        result.stop_reason = "relative decrease below threshold";
        break;
      }
      lin = linearize(result.graph, exec);
      ne = accumulate(result.graph, lin, free_index, free_count);
    } else {
      record.chi2 = current;
      result.trace.push_back(record);
      if (tiny) {
        result.stop_reason = "step below threshold";
        break;
      }
      lambda *= 4.0;
      if (lambda > config.lambda_max) {
        result.stop_reason = "damping limit reached";
        break;
      }
    }
  }
  result.final_chi2 = current;
  return result;
}

void recover(Map& map, const PoseGraph& before, const PoseGraph& after,
             const std::map<MapPointId, KeyFrameId>& anchors) {
  if (before.vertices.size() != after.vertices.size()) {
    throw std::invalid_argument("recover: graphs differ in size");
  }
  std::map<KeyFrameId, std::size_t> index;
  for (std::size_t v = 0; v < before.vertices.size(); ++v) {
    if (before.vertices[v].id != after.vertices[v].id) {
      throw std::invalid_argument("recover: vertex order differs");
    }
    index.emplace(before.vertices[v].id, v);
  }
  std::vector<std::pair<MapPointId, Vector3>> moved;
  for (const auto& [id, p] : map.map_points()) {
    if (p.replaced()) continue;
    KeyFrameId anchor = p.reference_keyframe;
    if (auto a = anchors.find(id); a != anchors.end()) anchor = a->second;
    auto it = index.find(anchor);
    if (it == index.end()) continue;
    const Sim3& s_old = before.vertices[it->second].estimate;
    const Sim3& s_new = after.vertices[it->second].estimate;
    moved.emplace_back(id, s_new.inverse() * (s_old * p.position));
  }
  for (const auto& [id, position] : moved) map.set_point_position(id, position);
  for (const auto& v : after.vertices) {
    if (map.has_keyframe(v.id)) map.set_pose(v.id, to_se3(v.estimate));
  }
}

// --- g2o text -----------------------------------------------------------------------------

namespace {

void write_sim3(std::ostream& out, const Sim3& s) {
  out << s.scale << ' ' << s.rotation.x() << ' ' << s.rotation.y() << ' ' << s.rotation.z() << ' '
      << s.rotation.w() << ' ' << s.translation.x() << ' ' << s.translation.y() << ' '
      << s.translation.z();
}

Sim3 read_sim3(std::istream& in) {
  Sim3 s;
  double qx, qy, qz, qw;
  in >> s.scale >> qx >> qy >> qz >> qw >> s.translation.x() >> s.translation.y() >>
      s.translation.z();
  s.rotation = Quaternion(qw, qx, qy, qz).normalized();
  return s;
}

}  // namespace

void write_g2o(std::ostream& out, const PoseGraph& graph) {
  const auto precision = out.precision(17);
  for (const auto& v : graph.vertices) {
    out << "VERTEX_SIM3:EXPMAP " << v.id << ' ';
    write_sim3(out, v.estimate);
    out << '\n';
  }
  for (const auto& v : graph.vertices) {
    if (v.fixed) out << "FIX " << v.id << '\n';
  }
  for (const auto& e : graph.edges) {
    out << "EDGE_SIM3 " << graph.vertices[e.i].id << ' ' << graph.vertices[e.j].id << ' ';
    write_sim3(out, e.measurement);
    for (int r = 0; r < 7; ++r) {
      for (int c = r; c < 7; ++c) out << ' ' << (r == c ? 1 : 0);
    }
    out << '\n';
  }
  out.precision(precision);
}

PoseGraph read_g2o(std::istream& in) {
  PoseGraph graph;
  std::map<KeyFrameId, std::size_t> index;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::istringstream ls(line);
    std::string tag;
    if (!(ls >> tag) || tag[0] == '#') continue;
    if (tag == "VERTEX_SIM3:EXPMAP") {
      PoseGraphVertex v;
      ls >> v.id;
      v.estimate = read_sim3(ls);
      if (!ls) throw std::runtime_error("g2o line " + std::to_string(line_no) + ": bad vertex");
      index[v.id] = graph.vertices.size();
      graph.vertices.push_back(v);
    } else if (tag == "FIX") {
      KeyFrameId id;
      ls >> id;
      graph.vertices.at(index.at(id)).fixed = true;
    } else if (tag == "EDGE_SIM3") {
      KeyFrameId a, b;
      ls >> a >> b;
      PoseGraphEdge e;
      e.measurement = read_sim3(ls);
      double info;
      for (int k = 0; k < 28; ++k) ls >> info;
      if (!ls || !index.count(a) || !index.count(b)) {
        throw std::runtime_error("g2o line " + std::to_string(line_no) + ": bad edge");
      }
      e.i = index.at(a);
      e.j = index.at(b);
      graph.edges.push_back(e);
    } else {
      throw std::runtime_error("g2o line " + std::to_string(line_no) + ": unknown tag " + tag);
    }
  }
  return graph;
}

}  // namespace loopclose
