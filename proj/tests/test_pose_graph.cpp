#include "loopclose/pose_graph.hpp"

#include "support.hpp"

#include <doctest.h>

#include <sstream>

using namespace loopclose;
using namespace loopclose::testing;

namespace {

struct GraphWithTruth {
  PoseGraph graph;
  std::vector<Sim3> truth;
};

// A ring of `n` poses with odometry and chord edges, consistent with the truth;
// estimates start perturbed and vertex 0 is fixed at its true value.
GraphWithTruth random_graph(std::uint64_t seed, std::size_t n, double noise) {
  std::mt19937_64 rng(seed);
  GraphWithTruth g;
  for (std::size_t i = 0; i < n; ++i) {
    g.truth.push_back(bounded_sim3(rng, 5.0));
    PoseGraphVertex v;
    v.id = static_cast<KeyFrameId>(i * 2 + 1);
    v.fixed = i == 0;
    v.estimate = i == 0 ? g.truth[i] : compose(sim3_exp<double>(random_tangent(rng, noise)), g.truth[i]);
    g.graph.vertices.push_back(v);
  }
  auto add = [&](std::size_t i, std::size_t j, EdgeKind kind) {
    g.graph.edges.push_back({i, j, compose(g.truth[i], g.truth[j].inverse()), kind});
  };
  for (std::size_t i = 0; i + 1 < n; ++i) add(i, i + 1, EdgeKind::tree);
  add(n - 1, 0, EdgeKind::loop);
  for (std::size_t i = 0; i + 3 < n; i += 2) add(i, i + 3, EdgeKind::covisibility);
  return g;
}

double max_vertex_error(const PoseGraph& graph, const std::vector<Sim3>& truth) {
  double worst = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    worst = std::max(worst, sim3_distance(graph.vertices[i].estimate, truth[i]));
  }
  return worst;
}

}  // namespace

TEST_CASE("edge residual vanishes for a consistent measurement") {
  std::mt19937_64 rng(1);
  for (int t = 0; t < 50; ++t) {
    const Sim3 a = random_sim3(rng);
    const Sim3 b = random_sim3(rng);
    CHECK(edge_residual(compose(a, b.inverse()), a, b).norm() < 1e-10);
  }
}

TEST_CASE("edge residual agrees with the matrix logarithm") {
  std::mt19937_64 rng(2);
  for (int t = 0; t < 50; ++t) {
    const Sim3 a = bounded_sim3(rng);
    const Sim3 b = bounded_sim3(rng);
    const Sim3 m = compose(sim3_exp<double>(random_tangent(rng, 0.5)), compose(a, b.inverse()));
    CHECK((edge_residual(m, a, b) - oracle_residual(m, a, b)).norm() < 1e-9);
  }
}

TEST_CASE("a small left perturbation shows up first order in the residual") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 20; ++t) {
    const Sim3 a = random_sim3(rng);
    const Sim3 b = random_sim3(rng);
    const Sim3 m = compose(a, b.inverse());
    const Vector7 d = random_tangent(rng, 1e-6);
    const Vector7 e = edge_residual(m, left_perturb(a, d), b);
    CHECK(e.norm() == doctest::Approx(1e-6).epsilon(0.01));
    CHECK((e + d).norm() < 1e-8);
  }
}

TEST_CASE("edge Jacobians match central differences of the oracle") {
  std::mt19937_64 rng(4);
  for (int t = 0; t < 30; ++t) {
    const Sim3 a = bounded_sim3(rng);
    const Sim3 b = bounded_sim3(rng);
    const Sim3 m = compose(sim3_exp<double>(random_tangent(rng, 0.3)), compose(a, b.inverse()));
    const EdgeLinearization lin = edge_jacobians(m, a, b);
    CHECK((lin.residual - oracle_residual(m, a, b)).norm() < 1e-9);
    CHECK(jacobian_error(m, a, b, lin.j_i, lin.j_j) < 1e-6);
  }
}

TEST_CASE("linearize and chi2 do not depend on the worker count") {
  const auto g = random_graph(5, 40, 0.2);
  const auto serial = linearize(g.graph, Executor::serial());
  const double c1 = chi2(g.graph, Executor::serial());
  double sum = 0.0;
  for (const auto& l : serial) sum += l.residual.squaredNorm();
  CHECK(c1 == doctest::Approx(sum).epsilon(1e-12));
  for (int w : {2, 4, 8}) {
    const auto par = linearize(g.graph, Executor::with_workers(w));
    REQUIRE(par.size() == serial.size());
    for (std::size_t e = 0; e < par.size(); ++e) {
      CHECK(par[e].residual == serial[e].residual);
      CHECK(par[e].j_i == serial[e].j_i);
      CHECK(par[e].j_j == serial[e].j_j);
    }
    CHECK(chi2(g.graph, Executor::with_workers(w)) == c1);
  }
}

TEST_CASE("a single free vertex is solved exactly") {
  std::mt19937_64 rng(6);
  PoseGraph g;
  const Sim3 fixed = bounded_sim3(rng);
  const Sim3 s_ij = bounded_sim3(rng);
  g.vertices.push_back({0, fixed, true});
  g.vertices.push_back({1, Sim3{}, false});
  g.edges.push_back({0, 1, s_ij, EdgeKind::loop});
  const LmResult r = optimize(g);
  REQUIRE(r.ok);
  CHECK(r.final_chi2 < 1e-9);
  CHECK(sim3_distance(r.graph.vertices[1].estimate, compose(s_ij.inverse(), fixed)) < 1e-6);
  CHECK(sim3_distance(r.graph.vertices[0].estimate, fixed) == 0.0);
}

TEST_CASE("Levenberg-Marquardt recovers a consistent graph") {
  for (std::uint64_t seed = 10; seed < 15; ++seed) {
    CAPTURE(seed);
    const auto g = random_graph(seed, 30, 0.3);
    const LmResult r = optimize(g.graph);
    REQUIRE(r.ok);
    CHECK(r.initial_chi2 > 1e-2);
    CHECK(r.final_chi2 < 1e-12);
    CHECK(max_vertex_error(r.graph, g.truth) < 1e-6);

    double previous = r.initial_chi2;
    for (const auto& it : r.trace) {
      if (!it.accepted) continue;
      CHECK(it.chi2 < previous);
      previous = it.chi2;
    }
    CHECK(r.accepted_steps > 0);
  }
}

TEST_CASE("dense and sparse solves agree") {
  const auto g = random_graph(20, 25, 0.2);
  LmConfig dense;
  dense.solver = LinearSolver::dense;
  LmConfig sparse;
  sparse.solver = LinearSolver::sparse;
  const LmResult a = optimize(g.graph, dense);
  const LmResult b = optimize(g.graph, sparse);
  REQUIRE(a.ok);
  REQUIRE(b.ok);
  for (std::size_t i = 0; i < g.truth.size(); ++i) {
    CHECK(sim3_distance(a.graph.vertices[i].estimate, b.graph.vertices[i].estimate) < 1e-9);
  }
}

TEST_CASE("optimization is bit-identical across worker counts") {
  const auto g = random_graph(21, 40, 0.3);
  const LmResult ref = optimize(g.graph, {}, Executor::serial());
  for (int w : {2, 4, 8}) {
    const LmResult r = optimize(g.graph, {}, Executor::with_workers(w));
    CHECK(r.final_chi2 == ref.final_chi2);
    CHECK(r.trace.size() == ref.trace.size());
    for (std::size_t i = 0; i < ref.graph.vertices.size(); ++i) {
      CHECK(sim3_distance(r.graph.vertices[i].estimate, ref.graph.vertices[i].estimate) == 0.0);
    }
  }
}

TEST_CASE("validate rejects malformed graphs") {
  auto g = random_graph(7, 5, 0.1).graph;
  CHECK_NOTHROW(g.validate());

  auto bad_index = g;
  bad_index.edges.push_back({0, 9, Sim3{}, EdgeKind::tree});
  CHECK_THROWS_AS(bad_index.validate(), std::invalid_argument);

  auto self_loop = g;
  self_loop.edges.push_back({2, 2, Sim3{}, EdgeKind::tree});
  CHECK_THROWS_AS(self_loop.validate(), std::invalid_argument);

  auto zero_scale = g;
  zero_scale.vertices[3].estimate.scale = 0.0;
  CHECK_THROWS_AS(zero_scale.validate(), std::invalid_argument);

  auto unanchored = g;
  unanchored.vertices[0].fixed = false;
  CHECK_THROWS_AS(unanchored.validate(), std::invalid_argument);

  auto islands = g;
  PoseGraphVertex lone;
  lone.id = 99;
  islands.vertices.push_back(lone);
  CHECK_THROWS_AS(islands.validate(), std::invalid_argument);

  CHECK_THROWS_AS(optimize(unanchored), std::invalid_argument);
}

TEST_CASE("g2o text round trip") {
  const auto g = random_graph(8, 12, 0.2).graph;
  std::stringstream ss;
  write_g2o(ss, g);
  const PoseGraph back = read_g2o(ss);
  REQUIRE(back.vertices.size() == g.vertices.size());
  REQUIRE(back.edges.size() == g.edges.size());
  for (std::size_t i = 0; i < g.vertices.size(); ++i) {
    CHECK(back.vertices[i].id == g.vertices[i].id);
    CHECK(back.vertices[i].fixed == g.vertices[i].fixed);
    CHECK(sim3_distance(back.vertices[i].estimate, g.vertices[i].estimate) < 1e-12);
  }
  for (std::size_t e = 0; e < g.edges.size(); ++e) {
    CHECK(back.edges[e].i == g.edges[e].i);
    CHECK(back.edges[e].j == g.edges[e].j);
    CHECK(sim3_distance(back.edges[e].measurement, g.edges[e].measurement) < 1e-12);
  }
  CHECK(chi2(back) == doctest::Approx(chi2(g)).epsilon(1e-9));

  std::istringstream junk("VERTEX_SIM3:EXPMAP 1 0 0\n");
  CHECK_THROWS(read_g2o(junk));
  std::istringstream unknown("EDGE_SE2 1 2\n");
  CHECK_THROWS(read_g2o(unknown));
}

TEST_CASE("essential problem over a corrected world map") {
  const SyntheticWorld world = generate_world(SyntheticWorldConfig{});
  Map map = world_map(world, static_cast<int>(world.keyframes.size()));
  const auto [first, second] = world.loop_labels.front();
  const LoopDetection d = ground_truth_detection(world, second, first);
  const CorrectedPoseSet set = propagate_correction(map, d);
  const PoseGraph g = build_essential_problem(map, set, d);
  CHECK_NOTHROW(g.validate());
  CHECK(g.vertices.size() == map.keyframe_count());
  CHECK(g.vertices[g.index_of(first)].fixed);

  int loops = 0;
  int tree = 0;
  for (const auto& e : g.edges) {
    if (e.kind == EdgeKind::tree) ++tree;
    if (e.kind != EdgeKind::loop) continue;
    ++loops;
    // The new loop edge carries the correction itself, so it starts satisfied.
    CHECK(edge_residual(e.measurement, g.vertices[e.i].estimate, g.vertices[e.j].estimate).norm() <
          1e-9);
  }
  CHECK(loops == 1);
  CHECK(tree == static_cast<int>(map.keyframe_count()) - 1);

  const LmResult r = optimize(g);
  REQUIRE(r.ok);
  CHECK(r.final_chi2 < r.initial_chi2);
  recover(map, g, r.graph, set.anchors);
  for (const auto& v : r.graph.vertices) {
    CHECK(sim3_distance(to_sim3(map.keyframe(v.id).pose), to_sim3(to_se3(v.estimate))) < 1e-12);
  }
  CHECK(audit(map).ok());

  // Optimization brings the loop closer to the truth than the drifted map.
  std::vector<SE3Pose> optimized;
  for (const auto& [id, kf] : map.keyframes()) optimized.push_back(kf.pose);
  const auto gt_center = [&](std::size_t k) { return world.ground_truth[k].inverse().translation; };
  const auto center = [&](const std::vector<SE3Pose>& p, std::size_t k) { return p[k].inverse().translation; };
  const double before = ((center(world.drifted, second) - center(world.drifted, first)) -
                         (gt_center(second) - gt_center(first))).norm();
  const double after = ((center(optimized, second) - center(optimized, first)) -
                        (gt_center(second) - gt_center(first))).norm();
  CHECK(after < before);
}
