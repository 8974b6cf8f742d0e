#include "loopclose/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace loopclose {

using nlohmann::json;

namespace {

using Clock = std::chrono::steady_clock;

double ms_since(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

LoopEvent close_loop(Map& map, const LoopDetection& detection, const PipelineConfig& config,
                     const Executor& exec) {
  LoopEvent ev;
  ev.detection = detection;
  const auto t_correction = Clock::now();

  std::map<KeyFrameId, std::vector<KeyFrameId>> before;
  for (KeyFrameId k : correction_window(map, detection.current_kf_id)) before[k] = map.connected(k);
  const CorrectedPoseSet corrected = propagate_correction(map, detection);

  const auto t_fusion = Clock::now();
  FusionPlan plan;
  {
    ReadPhase phase = map.freeze();
    const Map& frozen = map;
    std::vector<KeyFrameId> window;
    for (const auto& [k, cp] : corrected.poses) window.push_back(k);
    std::vector<PointRecord> points;
    for (MapPointId id : frozen.points_seen_by(detection.window)) {
      points.push_back(make_point_record(frozen.map_point(id)));
    }
    plan = plan_fusion(frozen, window, points, corrected, config.fusion, exec);
  }
  ev.plan_entries = plan.size();
  ev.fusion = apply_fusion(map, plan);
  ev.stage_ms["loop_fusion"] = ms_since(t_fusion);

  const auto t_graph = Clock::now();
  const auto links = loop_connections(map, before, corrected);
  const PoseGraph graph = build_essential_problem(map, corrected, detection, links);
  const LmResult lm = optimize(graph, config.lm, exec);
  if (!lm.ok) throw std::runtime_error("pose graph optimization failed: " + lm.stop_reason);
  recover(map, graph, lm.graph, corrected.anchors);
  ev.stage_ms["graph_optimization"] = ms_since(t_graph);
  ev.stage_ms["loop_correction"] = ms_since(t_correction);

  ev.graph_vertices = graph.vertices.size();
  ev.graph_edges = graph.edges.size();
  ev.initial_chi2 = lm.initial_chi2;
  ev.final_chi2 = lm.final_chi2;
  ev.lm_iterations = static_cast<int>(lm.trace.size());
  ev.lm_stop = lm.stop_reason;
  return ev;
}

}  // namespace

KeyFrame world_keyframe(Map& map, const SyntheticWorld& world, int k, const Vocabulary& vocabulary,
                        bool moved) {
  KeyFrame kf = world.keyframes[k];
  SE3Pose pose = world.drifted[k];
  if (moved && k > 0) {
    pose = compose(compose(world.drifted[k], world.drifted[k - 1].inverse()), map.keyframe(k - 1).pose);
  }
  const SE3Pose to_map = compose(pose.inverse(), world.drifted[k]);
  kf.pose = pose;

  for (std::size_t f = 0; f < kf.associations.size(); ++f) {
    const MapPointId id = kf.associations[f];
    if (id == kNoMapPoint) continue;
    const MapPoint& src = world.map_points[static_cast<std::size_t>(id)];
    if (src.reference_keyframe != k) continue;
    if (map.has_map_point(id)) continue;
    MapPoint p = src;
    if (moved) {
      p.position = to_map * src.position;
      p.normal = to_map.rotation * src.normal;
    }
    map.add_map_point(p);
  }
  std::set<MapPointId> used;
  for (auto& a : kf.associations) {
    if (a == kNoMapPoint) continue;
    a = map.resolve(a);
    if (!used.insert(a).second) a = kNoMapPoint;
  }
  kf.word_ids = vocabulary.assign_words(kf.descriptors);
  return kf;
}

PipelineRun run_once(const SyntheticWorld& world, const PipelineConfig& config) {
  const Executor exec = Executor::with_workers(config.workers);
  const Vocabulary vocabulary(config.vocabulary_seed);
  Map map(config.map);
  WordIndex index;
  PipelineRun run;
  for (const char* s : kStageNames) run.stage_ms[s] = 0.0;

  bool moved = false;
  int last_loop = -1'000'000;
  const int n = static_cast<int>(world.keyframes.size());
  for (int k = 0; k < n; ++k) {
    KeyFrame kf = world_keyframe(map, world, k, vocabulary, moved);
    const std::vector<WordId> words = kf.word_ids;
    map.insert_keyframe(std::move(kf));

    if (config.detection && k >= config.first_detection && k - last_loop >= config.cooldown) {
      std::optional<LoopDetection> detection;
      const auto t0 = Clock::now();
      try {
        detection = detect_loop(map, k, index, vocabulary, config.detect, exec);
      } catch (const std::exception& e) {
        run.failures.push_back({k, "region_detection", e.what()});
      }
      const double detect_ms = ms_since(t0);
      run.detection_ms_all += detect_ms;
      ++run.detection_calls;
      if (detection && detection->accepted) {
        try {
          LoopEvent ev = close_loop(map, *detection, config, exec);
          ev.stage_ms["region_detection"] = detect_ms;
          ev.stage_ms["total"] = detect_ms + ev.stage_ms["loop_correction"];
          for (const auto& [stage, ms] : ev.stage_ms) run.stage_ms[stage] += ms;
          run.loops.push_back(std::move(ev));
          moved = true;
          last_loop = k;
        } catch (const std::exception& e) {
          run.failures.push_back({k, "loop_correction", e.what()});
          moved = true;
        }
      }
    }
    index.add(k, words);
  }

  run.corrected.reserve(n);
  for (const auto& [id, kf] : map.keyframes()) run.corrected.push_back(kf.pose);
  run.snapshots = map.snapshot_counters();
  run.audit_ok = audit(map).ok();
  return run;
}

StageStats summarize(const std::vector<double>& samples) {
  StageStats s;
  s.runs = samples;
  if (samples.empty()) return s;
  double sum = 0.0;
  for (double x : samples) sum += x;
  s.mean = sum / static_cast<double>(samples.size());
  if (samples.size() > 1) {
    double sq = 0.0;
    for (double x : samples) sq += (x - s.mean) * (x - s.mean);
    s.stddev = std::sqrt(sq / static_cast<double>(samples.size() - 1));
  }
  return s;
}

std::string trajectory_bytes(const std::vector<SE3Pose>& poses) {
  std::string out;
  out.reserve(poses.size() * 7 * sizeof(double));
  auto put = [&](double x) {
    char buf[sizeof(double)];
    std::memcpy(buf, &x, sizeof(double));
    out.append(buf, sizeof(double));
  };
  for (const auto& p : poses) {
    put(p.rotation.w());
    put(p.rotation.x());
    put(p.rotation.y());
    put(p.rotation.z());
    put(p.translation.x());
    put(p.translation.y());
    put(p.translation.z());
  }
  return out;
}

PipelineResult run_pipeline(const SyntheticWorld& world, const PipelineConfig& config, int repeats) {
  if (repeats < 1) throw std::invalid_argument("repeat count must be >= 1");
  if (world.loop_labels.empty() && config.detection) {
    throw std::invalid_argument("world has no loop labels");
  }
  PipelineResult result;
  std::map<std::string, std::vector<double>> samples;
  std::string reference;
  for (int r = 0; r < repeats; ++r) {
    PipelineRun run = run_once(world, config);
    for (const auto& [stage, ms] : run.stage_ms) samples[stage].push_back(ms);
    const std::string bytes = trajectory_bytes(run.corrected);
    if (r == 0) {
      reference = bytes;
      result.run = std::move(run);
    } else if (bytes != reference) {
      result.repeats_identical = false;
    }
  }
  for (const auto& [stage, xs] : samples) result.timing.stages[stage] = summarize(xs);
  result.timing.workers = config.workers;
  result.timing.repeats = repeats;
  result.timing.host_cores = host_cores();
  result.ate_before = compute_ate(world.drifted, world.ground_truth, true);
  result.ate_after = compute_ate(result.run.corrected, world.ground_truth, true);
  return result;
}

// --- report -----------------------------------------------------------------------------

namespace {

json sim3_json(const Sim3& s) {
  return json::array({s.scale, s.rotation.w(), s.rotation.x(), s.rotation.y(), s.rotation.z(),
                      s.translation.x(), s.translation.y(), s.translation.z()});
}

}  // namespace

void write_report(std::ostream& out, const SyntheticWorld& world, const PipelineConfig& config,
                  const PipelineResult& result) {
  json j;
  j["world"] = {{"shape", to_string(world.config.shape)},
                {"poses", world.config.poses},
                {"landmarks", world.config.landmarks},
                {"seed", world.config.seed},
                {"map_points", world.map_points.size()},
                {"loop_labels", world.loop_labels.size()}};
  j["workers"] = config.workers;
  j["repeats"] = result.timing.repeats;
  j["host_cores"] = result.timing.host_cores;
  json stages;
  for (const auto& [name, s] : result.timing.stages) {
    stages[name] = {{"mean_ms", s.mean}, {"std_ms", s.stddev}, {"runs_ms", s.runs}};
  }
  j["stage_timing"] = stages;
  j["ate"] = {{"before_rmse", result.ate_before.rmse},
              {"after_rmse", result.ate_after.rmse},
              {"ratio", result.ate_before.rmse > 0.0 ? result.ate_after.rmse / result.ate_before.rmse
                                                     : 0.0},
              {"aligned", true}};
  json loops = json::array();
  for (const auto& ev : result.run.loops) {
    const auto& d = ev.detection;
    json fusion = {{"plan_entries", ev.plan_entries},
                   {"replaced", ev.fusion.replaced},
                   {"new_associations", ev.fusion.new_associations},
                   {"skipped", ev.fusion.skipped},
                   {"touched_keyframes", ev.fusion.touched.size()}};
    loops.push_back({{"current", d.current_kf_id},
                     {"matched", d.matched_kf_id},
                     {"s_cm", sim3_json(d.s_cm)},
                     {"verified_matches", d.verified_matches},
                     {"narrow_matches", d.narrow_matches.size()},
                     {"wide_matches", d.wide_matches.size()},
                     {"in_loop_window", world.near_loop_label(static_cast<int>(d.matched_kf_id),
                                                              static_cast<int>(d.current_kf_id),
                                                              kLoopWindowSlack)},
                     {"detection_stage_ms", d.stage_ms},
                     {"stage_ms", ev.stage_ms},
                     {"fusion", fusion},
                     {"graph", {{"vertices", ev.graph_vertices},
                                {"edges", ev.graph_edges},
                                {"initial_chi2", ev.initial_chi2},
                                {"final_chi2", ev.final_chi2},
                                {"iterations", ev.lm_iterations},
                                {"stop", ev.lm_stop}}}});
  }
  j["loops"] = loops;
  json failures = json::array();
  for (const auto& f : result.run.failures) {
    failures.push_back({{"keyframe", f.keyframe}, {"stage", f.stage}, {"message", f.message}});
  }
  j["failures"] = failures;
  j["repeats_identical"] = result.repeats_identical;
  j["map_audit_ok"] = result.run.audit_ok;
  j["detection"] = {{"calls", result.run.detection_calls},
                    {"total_ms", result.run.detection_ms_all}};

  const RuntimeCounters rc = runtime_counters();
  json jobs;
  for (const auto& [name, t] : rc.jobs) {
    jobs[name] = {{"invocations", t.invocations}, {"total_ms", t.total_ms}};
  }
  j["runtime"] = {{"staging_allocations", rc.staging_allocations},
                  {"staging_reuses", rc.staging_reuses},
                  {"distinct_shapes", rc.distinct_shapes},
                  {"snapshot_stagings", result.run.snapshots.stagings},
                  {"snapshot_repacks", result.run.snapshots.repacks},
                  {"snapshot_buffer_reuses", result.run.snapshots.buffer_reuses},
                  {"jobs", jobs}};
  out << j.dump(2) << '\n';
}

void write_trajectory_svg(std::ostream& out, const std::vector<SE3Pose>& ground_truth,
                          const std::vector<SE3Pose>& drifted,
                          const std::vector<SE3Pose>& corrected) {
  const std::vector<const std::vector<SE3Pose>*> tracks{&ground_truth, &drifted, &corrected};
  const char* colors[] = {"#222222", "#d62728", "#1f77b4"};
  const char* labels[] = {"ground truth", "drifted", "corrected"};
  double min_x = 1e300, min_y = 1e300, max_x = -1e300, max_y = -1e300;
  for (const auto* t : tracks) {
    for (const auto& p : *t) {
      const Vector3 c = p.center();
      min_x = std::min(min_x, c.x());
      max_x = std::max(max_x, c.x());
      min_y = std::min(min_y, c.y());
      max_y = std::max(max_y, c.y());
    }
  }
  if (min_x > max_x) min_x = max_x = min_y = max_y = 0.0;
  const double size = 800.0, margin = 40.0;
  const double span = std::max({max_x - min_x, max_y - min_y, 1e-9});
  const double scale = (size - 2.0 * margin) / span;
  auto px = [&](double x) { return margin + (x - min_x) * scale; };
  auto py = [&](double y) { return size - margin - (y - min_y) * scale; };

  out << std::fixed << std::setprecision(2);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size << "\" height=\"" << size
      << "\" viewBox=\"0 0 " << size << ' ' << size << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  for (std::size_t t = 0; t < tracks.size(); ++t) {
    out << "<polyline fill=\"none\" stroke=\"" << colors[t] << "\" stroke-width=\"1.5\" points=\"";
    for (const auto& p : *tracks[t]) {
      const Vector3 c = p.center();
      out << px(c.x()) << ',' << py(c.y()) << ' ';
    }
    out << "\"/>\n";
    out << "<text x=\"" << margin << "\" y=\"" << 20.0 + 16.0 * static_cast<double>(t)
        << "\" font-family=\"sans-serif\" font-size=\"13\" fill=\"" << colors[t] << "\">"
        << labels[t] << "</text>\n";
  }
  out << "</svg>\n";
}

// --- scaling benchmark ------------------------------------------------------------------

ScalingWorkload make_scaling_workload(int poses, int landmarks, std::uint64_t seed) {
  SyntheticWorldConfig wc;
  wc.poses = poses;
  wc.landmarks = landmarks;
  wc.seed = seed;
  wc.radius = 10.0 * poses / 100.0;  // constant spacing between keyframes
  ScalingWorkload w;
  w.world = generate_world(wc);
  PipelineConfig pc;
  pc.detection = false;
  const Vocabulary vocabulary(pc.vocabulary_seed);
  for (int k = 0; k < poses; ++k) {
    w.map.insert_keyframe(world_keyframe(w.map, w.world, k, vocabulary, false));
  }
  for (const auto& [id, kf] : w.map.keyframes()) {
    w.window.push_back(id);
    const Sim3 s = to_sim3(kf.pose);
    w.poses.poses[id] = CorrectedPose{s, s};
  }
  for (const auto& [id, p] : w.map.map_points()) {
    if (!p.replaced()) w.points.push_back(make_point_record(p));
  }

  // Drifted estimates, ground-truth relative measurements.
  std::map<KeyFrameId, std::size_t> index;
  for (const auto& [id, kf] : w.map.keyframes()) {
    index[id] = w.graph.vertices.size();
    w.graph.vertices.push_back({id, to_sim3(kf.pose), id == 0});
  }
  auto measurement = [&](KeyFrameId a, KeyFrameId b) {
    return to_sim3(compose(w.world.ground_truth[a], w.world.ground_truth[b].inverse()));
  };
  std::set<std::pair<KeyFrameId, KeyFrameId>> seen;
  for (const auto& [id, kf] : w.map.keyframes()) {
    const KeyFrameId p = w.map.parent(id);
    if (p != kNoKeyFrame && seen.emplace(std::min(p, id), std::max(p, id)).second) {
      w.graph.edges.push_back({index[p], index[id], measurement(p, id), EdgeKind::tree});
    }
  }
  for (const auto& [id, kf] : w.map.keyframes()) {
    for (KeyFrameId o : w.map.connected(id)) {
      if (o <= id || !seen.emplace(id, o).second) continue;
      w.graph.edges.push_back({index[id], index[o], measurement(id, o), EdgeKind::covisibility});
    }
  }
  return w;
}

namespace {

template <typename F> double median_ms(int repeats, F&& f) {
  std::vector<double> t;
  for (int r = 0; r < repeats; ++r) {
    const auto t0 = Clock::now();
    f();
    t.push_back(ms_since(t0));
  }
  std::sort(t.begin(), t.end());
  return t[t.size() / 2];
}

}  // namespace

std::vector<ScalingRow> bench_scaling(const std::vector<int>& sizes, const std::vector<int>& workers,
                                      int repeats, int landmarks_per_pose, std::uint64_t seed) {
  if (sizes.empty() || workers.empty()) throw std::invalid_argument("empty benchmark grid");
  for (std::size_t i = 1; i < sizes.size(); ++i) {
    if (sizes[i] <= sizes[i - 1]) throw std::invalid_argument("sizes must increase");
  }
  std::vector<int> grid = workers;
  if (std::find(grid.begin(), grid.end(), 1) == grid.end()) grid.insert(grid.begin(), 1);
  std::sort(grid.begin(), grid.end());
  grid.erase(std::unique(grid.begin(), grid.end()), grid.end());

  LmConfig lm;
  lm.max_iterations = 5;
  std::vector<ScalingRow> rows;
  for (int size : sizes) {
    ScalingWorkload w = make_scaling_workload(size, size * landmarks_per_pose, seed);
    ReadPhase phase = w.map.freeze();
    const Map& frozen = w.map;
    std::map<std::string, std::map<int, double>> ms;
    for (int wk : grid) {
      const Executor exec = Executor::with_workers(wk);
      ms["fusion_planning"][wk] = median_ms(repeats, [&] {
        plan_fusion(frozen, w.window, w.points, w.poses, ProjectionSearchParams::fusion(), exec);
      });
      ms["graph_linearize"][wk] = median_ms(repeats, [&] { linearize(w.graph, exec); });
      ms["graph_optimization"][wk] = median_ms(repeats, [&] { optimize(w.graph, lm, exec); });
    }
    const std::map<std::string, std::size_t> items{
        {"fusion_planning", w.points.size() * w.window.size()},
        {"graph_linearize", w.graph.edges.size()},
        {"graph_optimization", w.graph.edges.size()}};
    for (const auto& [stage, by_workers] : ms) {
      for (int wk : grid) {
        if (wk != 1 && std::find(workers.begin(), workers.end(), wk) == workers.end()) continue;
        if (wk == 1 && std::find(workers.begin(), workers.end(), 1) == workers.end()) continue;
        const double t = by_workers.at(wk);
        rows.push_back({stage, size, wk, t, t > 0.0 ? by_workers.at(1) / t : 1.0, items.at(stage)});
      }
    }
  }
  return rows;
}

void write_scaling_csv(std::ostream& out, const std::vector<ScalingRow>& rows) {
  out << "stage,size,workers,ms,speedup,work_items\n" << std::setprecision(6);
  for (const auto& r : rows) {
    out << r.stage << ',' << r.size << ',' << r.workers << ',' << r.ms << ',' << r.speedup << ','
        << r.work_items << '\n';
  }
}

}  // namespace loopclose
