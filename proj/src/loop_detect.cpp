#include "loopclose/loop_detect.hpp"

#include "loopclose/autodiff.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Eigenvalues>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <random>
#include <set>
#include <unordered_map>

namespace loopclose {

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point t0) {
  return std::chrono::duration<double, std::milli>(Clock::now() - t0).count();
}

bool collinear(const Vector3& p0, const Vector3& p1, const Vector3& p2) {
  const Vector3 d1 = p1 - p0;
  const Vector3 d2 = p2 - p0;
  const double scale = d1.norm() * d2.norm();
  return scale == 0.0 || d1.cross(d2).norm() <= 1e-9 * scale;
}

double squared_reprojection(const CameraIntrinsics& k, const Vector3& p, const Vector2& pixel) {
  const auto px = project_unbounded(k, p);
  if (!px) return std::numeric_limits<double>::infinity();
  return (*px - pixel).squaredNorm();
}

int count_inliers(const std::vector<Correspondence>& matches, const Sim3& s,
                  const CameraIntrinsics& ka, const CameraIntrinsics& kb,
                  const RansacConfig& config, std::vector<bool>* mask) {
  int count = 0;
  if (mask) mask->assign(matches.size(), false);
  for (std::size_t i = 0; i < matches.size(); ++i) {
    if (is_inlier(matches[i], s, ka, kb, config)) {
      ++count;
      if (mask) (*mask)[i] = true;
    }
  }
  return count;
}

std::optional<Sim3> fit_subset(const std::vector<Correspondence>& matches,
                               const std::vector<std::size_t>& subset) {
  std::vector<Vector3> a;
  std::vector<Vector3> b;
  a.reserve(subset.size());
  b.reserve(subset.size());
  for (std::size_t i : subset) {
    a.push_back(matches[i].a);
    b.push_back(matches[i].b);
  }
  return horn_similarity(a, b);
}

}  // namespace

// --- Horn / RANSAC ------------------------------------------------------------------

std::optional<Sim3> horn_similarity(std::span<const Vector3> a, std::span<const Vector3> b) {
  if (a.size() != b.size() || a.size() < 3) return std::nullopt;
  const double n = static_cast<double>(a.size());
  Vector3 ca = Vector3::Zero();
  Vector3 cb = Vector3::Zero();
  for (std::size_t i = 0; i < a.size(); ++i) {
    ca += a[i];
    cb += b[i];
  }
  ca /= n;
  cb /= n;
  Matrix3 m = Matrix3::Zero();
  double norm_a = 0.0;
  double norm_b = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const Vector3 pa = a[i] - ca;
    const Vector3 pb = b[i] - cb;
    m += pb * pa.transpose();
    norm_a += pa.squaredNorm();
    norm_b += pb.squaredNorm();
  }
  if (!(norm_a > 0.0) || !(norm_b > 0.0)) return std::nullopt;

  const double sxx = m(0, 0), sxy = m(0, 1), sxz = m(0, 2);
  const double syx = m(1, 0), syy = m(1, 1), syz = m(1, 2);
  const double szx = m(2, 0), szy = m(2, 1), szz = m(2, 2);
  Eigen::Matrix4d nmat;
  nmat << sxx + syy + szz, syz - szy, szx - sxz, sxy - syx,
          syz - szy, sxx - syy - szz, sxy + syx, szx + sxz,
          szx - sxz, sxy + syx, -sxx + syy - szz, syz + szy,
          sxy - syx, szx + sxz, syz + szy, -sxx - syy + szz;
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix4d> eig(nmat);
  if (eig.info() != Eigen::Success) return std::nullopt;
  const Eigen::Vector4d q = eig.eigenvectors().col(3);

  Sim3 s;
  s.rotation = Quaternion(q(0), q(1), q(2), q(3)).normalized();
  s.scale = std::sqrt(norm_a / norm_b);
  s.translation = ca - s.scale * (s.rotation * cb);
  return s;
}

bool is_inlier(const Correspondence& c, const Sim3& s_ab, const CameraIntrinsics& ka,
               const CameraIntrinsics& kb, const RansacConfig& config) {
  const double sa = std::pow(config.scale_factor, 2 * c.octave_a);
  const double sb = std::pow(config.scale_factor, 2 * c.octave_b);
  if (squared_reprojection(ka, s_ab * c.b, c.pixel_a) >= config.chi2_threshold * sa) return false;
  return squared_reprojection(kb, s_ab.inverse() * c.a, c.pixel_b) < config.chi2_threshold * sb;
}

std::optional<RansacResult> estimate_sim3_ransac(const std::vector<Correspondence>& matches,
                                                 const CameraIntrinsics& ka,
                                                 const CameraIntrinsics& kb,
                                                 const RansacConfig& config) {
  const std::size_t n = matches.size();
  if (n < 3) return std::nullopt;
  std::mt19937_64 rng(config.seed);
  RansacResult best;
  best.inlier_count = -1;
  int iteration = 0;
  for (; iteration < config.max_iterations; ++iteration) {
    const std::size_t i0 = rng() % n;
    std::size_t i1 = rng() % n;
    while (i1 == i0) i1 = rng() % n;
    std::size_t i2 = rng() % n;
    while (i2 == i0 || i2 == i1) i2 = rng() % n;
    if (collinear(matches[i0].b, matches[i1].b, matches[i2].b) ||
        collinear(matches[i0].a, matches[i1].a, matches[i2].a)) {
      continue;
    }
    const auto model = fit_subset(matches, {i0, i1, i2});
    if (!model) continue;
    const int count = count_inliers(matches, *model, ka, kb, config, nullptr);
    if (count > best.inlier_count) {
      best.inlier_count = count;
      best.s_ab = *model;
      if (static_cast<std::size_t>(count) == n) {
        ++iteration;
        break;
      }
    }
  }
  best.iterations = iteration;
  if (best.inlier_count < config.min_inliers || best.inlier_count < 3) return std::nullopt;

  count_inliers(matches, best.s_ab, ka, kb, config, &best.inliers);
  std::vector<std::size_t> subset;
  for (std::size_t i = 0; i < n; ++i) {
    if (best.inliers[i]) subset.push_back(i);
  }
  if (const auto refit = fit_subset(matches, subset)) {
    std::vector<bool> mask;
    const int count = count_inliers(matches, *refit, ka, kb, config, &mask);
    if (count >= best.inlier_count) {
      best.s_ab = *refit;
      best.inliers = std::move(mask);
      best.inlier_count = count;
    }
  }
  return best;
}

// --- refinement ---------------------------------------------------------------------

LoopQuery make_loop_query(const Map& map, KeyFrameId current) {
  LoopQuery query;
  query.snapshot = map.snapshot(current);
  const KeyFrame& kf = map.keyframe(current);
  const double nan = std::numeric_limits<double>::quiet_NaN();
  query.feature_points.assign(kf.size(), Vector3(nan, nan, nan));
  for (std::size_t f = 0; f < kf.size(); ++f) {
    const MapPointId p = kf.associations[f];
    if (p != kNoMapPoint) query.feature_points[f] = kf.pose * map.map_point(p).position;
  }
  return query;
}

double reprojection_error(const LoopQuery& query, const Sim3& s_cm, const SE3Pose& matched_pose,
                          const PointRecord& point, std::uint32_t feature) {
  const KeyFrameSnapshot& snap = *query.snapshot;
  const Vector3 pc = s_cm * (matched_pose * point.position);
  const auto px = project_unbounded(snap.intrinsics, pc);
  if (!px) return std::numeric_limits<double>::infinity();
  return (*px - Vector2(snap.u[feature], snap.v[feature])).norm();
}

namespace {

struct GaussNewtonOutcome {
  bool ok = false;
  std::string diagnostic;
  Sim3 s_cm;
  int iterations = 0;
  double initial_cost = 0.0;
  double final_cost = 0.0;
  std::vector<MatchResult> matches;
};

// Projection with the same depth guard as project_unbounded, on any scalar.
template <typename T>
bool project_t(const CameraIntrinsics& k, const Vec3T<T>& p, Eigen::Matrix<T, 2, 1>& out) {
  if (!(scalar_value(p.z()) > kDepthEpsilon)) return false;
  out << T(k.fx) * p.x() / p.z() + T(k.cx), T(k.fy) * p.y() / p.z() + T(k.cy);
  return true;
}

struct GnTerm {
  Vector3 b;             // window point in the matched camera frame
  Vector2 pixel_c;       // observed pixel in the current image
  bool has_reverse = false;
  Vector3 a;             // current-side point in the current camera frame
  Vector2 pixel_m;       // window point projected in the matched image
};

double huber_cost(double r, double k) { return r <= k ? r * r : 2.0 * k * r - k * k; }

double gn_cost(const std::vector<GnTerm>& terms, const Sim3& s, const CameraIntrinsics& kc,
               const CameraIntrinsics& km, double huber) {
  const Sim3 inv = s.inverse();
  double cost = 0.0;
  for (const auto& t : terms) {
    Vector2 px;
    if (project_t<double>(kc, s * t.b, px)) cost += huber_cost((px - t.pixel_c).norm(), huber);
    if (t.has_reverse && project_t<double>(km, inv * t.a, px)) {
      cost += huber_cost((px - t.pixel_m).norm(), huber);
    }
  }
  return cost;
}

void accumulate_term(const Eigen::Matrix<Dual7, 2, 1>& e, double huber, Matrix7& h, Vector7& g) {
  const Eigen::Vector2d ev(e(0).value, e(1).value);
  Eigen::Matrix<double, 2, 7> j;
  j.row(0) = e(0).partials.transpose();
  j.row(1) = e(1).partials.transpose();
  const double r = ev.norm();
  const double w = r <= huber ? 1.0 : huber / r;
  h += w * j.transpose() * j;
  g += w * j.transpose() * ev;
}

GaussNewtonOutcome gauss_newton(const std::vector<GnTerm>& terms, const Sim3& s0,
                                const CameraIntrinsics& kc, const CameraIntrinsics& km,
                                const RefineConfig& config) {
  GaussNewtonOutcome out;
  out.s_cm = s0;
  out.initial_cost = gn_cost(terms, s0, kc, km, config.huber_px);
  out.final_cost = out.initial_cost;
  double previous = out.initial_cost;
  int increases = 0;
  for (int iter = 1; iter <= config.max_iterations; ++iter) {
    Vec7T<Dual7> delta;
    for (int k = 0; k < 7; ++k) delta(k) = Dual7::variable(0.0, k);
    const Sim3T<Dual7> s = compose(sim3_exp<Dual7>(delta), out.s_cm.cast<Dual7>());
    const Sim3T<Dual7> inv = s.inverse();
    Matrix7 h = Matrix7::Zero();
    Vector7 g = Vector7::Zero();
    for (const auto& t : terms) {
      Eigen::Matrix<Dual7, 2, 1> px;
      if (project_t<Dual7>(kc, s * t.b.cast<Dual7>(), px)) {
        accumulate_term(px - t.pixel_c.cast<Dual7>(), config.huber_px, h, g);
      }
      if (t.has_reverse && project_t<Dual7>(km, inv * t.a.cast<Dual7>(), px)) {
        accumulate_term(px - t.pixel_m.cast<Dual7>(), config.huber_px, h, g);
      }
    }
    const Vector7 step = -h.ldlt().solve(g);
    if (!step.allFinite()) {
      out.diagnostic = "singular normal equations at iteration " + std::to_string(iter);
      return out;
    }
    out.s_cm = compose(sim3_exp<double>(step), out.s_cm);
    out.iterations = iter;
    const double cost = gn_cost(terms, out.s_cm, kc, km, config.huber_px);
    out.final_cost = cost;
    increases = cost > previous ? increases + 1 : 0;
    previous = cost;
    if (increases >= config.divergence_limit) {
      out.diagnostic = "diverged: cost rose " + std::to_string(increases) +
                       " iterations in a row (cost " + std::to_string(cost) + ")";
      return out;
    }
    if (step.norm() < config.convergence) break;
  }
  out.ok = true;
  return out;
}

}  // namespace

RefineResult refine_sim3(const LoopQuery& query, std::span<const PointRecord> window_points,
                         const SE3Pose& matched_pose, const Sim3& s0, const RefineConfig& config,
                         const Executor& exec) {
  RefineResult result;
  const KeyFrameSnapshot& snap = *query.snapshot;
  const CameraIntrinsics& kc = snap.intrinsics;
  const CameraIntrinsics& km = snap.intrinsics;
  const Sim3 pose0 = compose(s0, to_sim3(matched_pose));
  std::unordered_map<MapPointId, std::size_t> by_id;
  for (std::size_t i = 0; i < window_points.size(); ++i) by_id.emplace(window_points[i].id, i);

  auto narrow_task = [&](const Executor& inner) {
    GaussNewtonOutcome out;
    out.matches = projection_search(snap, pose0, window_points, config.narrow, inner);
    if (static_cast<int>(out.matches.size()) < config.min_matches) {
      out.s_cm = s0;
      out.diagnostic = "only " + std::to_string(out.matches.size()) + " narrow matches";
      return out;
    }
    std::vector<GnTerm> terms;
    terms.reserve(out.matches.size());
    for (const auto& m : out.matches) {
      GnTerm t;
      t.b = matched_pose * window_points[by_id.at(m.map_point_id)].position;
      t.pixel_c = Vector2(snap.u[m.feature_index], snap.v[m.feature_index]);
      const Vector3& a = query.feature_points[m.feature_index];
      const auto pm = project_unbounded(km, t.b);
      if (a.allFinite() && pm) {
        t.has_reverse = true;
        t.a = a;
        t.pixel_m = *pm;
      }
      terms.push_back(t);
    }
    auto gn = gauss_newton(terms, s0, kc, km, config);
    gn.matches = std::move(out.matches);
    return gn;
  };
  auto wide_task = [&](const Executor& inner) {
    return projection_search(snap, pose0, window_points, config.wide, inner);
  };

  auto pair = run_pair<GaussNewtonOutcome, std::vector<MatchResult>>(narrow_task, wide_task, exec,
                                                                     "refine_sim3");
  if (!pair.ok()) {
    result.diagnostic = pair.error->message;
    return result;
  }
  GaussNewtonOutcome& gn = *pair.a;
  result.s_cm = gn.s_cm;
  result.iterations = gn.iterations;
  result.initial_cost = gn.initial_cost;
  result.final_cost = gn.final_cost;
  if (!gn.ok) {
    result.diagnostic = gn.diagnostic;
    return result;
  }

  auto gate = [&](const std::vector<MatchResult>& in, double base) {
    std::vector<MatchResult> out;
    for (const auto& m : in) {
      const double limit =
          base * config.narrow.level_scale(snap.octave[m.feature_index]);
      const auto& point = window_points[by_id.at(m.map_point_id)];
      if (reprojection_error(query, gn.s_cm, matched_pose, point, m.feature_index) <= limit) {
        out.push_back(m);
      }
    }
    return out;
  };
  result.narrow = gate(gn.matches, config.narrow_gate);
  result.wide = gate(*pair.b, config.wide_gate);
  result.ok = true;
  return result;
}

// --- verification -------------------------------------------------------------------

std::vector<VerifiedMatch> verify_triple(
    const std::vector<std::shared_ptr<const KeyFrameSnapshot>>& snapshots,
    const std::vector<Sim3>& poses, std::span<const PointRecord> window_points,
    const ProjectionSearchParams& params, const Executor& exec) {
  if (snapshots.size() != poses.size() || snapshots.empty() || snapshots.size() > 3) {
    throw std::invalid_argument("verify_triple: need one to three snapshots with poses");
  }
  params.validate();
  const std::size_t n = window_points.size();
  const std::size_t k = snapshots.size();
  std::vector<Vector3> centers;
  for (const auto& p : poses) centers.push_back(p.center());

  auto batch = run_batch<std::optional<MatchResult>>(
      k * n,
      [&](std::size_t i) {
        const std::size_t s = i / n;
        return match_point(*snapshots[s], poses[s], centers[s], window_points[i % n], params);
      },
      exec, "verify_triple");
  if (!batch.ok()) {
    throw std::runtime_error("verify_triple failed at element " +
                             std::to_string(batch.error->index) + ": " + batch.error->message);
  }

  std::vector<VerifiedMatch> merged;
  for (std::size_t s = 0; s < k; ++s) {
    std::vector<MatchResult> candidates;
    for (std::size_t i = s * n; i < (s + 1) * n; ++i) {
      if (batch.output[i]) candidates.push_back(*batch.output[i]);
    }
    for (const auto& m : resolve_feature_conflicts(std::move(candidates))) {
      merged.push_back({snapshots[s]->keyframe_id, m});
    }
  }
  return merged;
}

// --- detection ----------------------------------------------------------------------

std::vector<KeyFrameId> loop_window(const Map& map, KeyFrameId current, KeyFrameId matched) {
  std::set<KeyFrameId> excluded{current};
  for (KeyFrameId k : map.covisible(current, 1)) excluded.insert(k);
  std::set<KeyFrameId> window;
  if (!excluded.count(matched)) window.insert(matched);
  for (KeyFrameId k : map.connected(matched)) {
    if (!excluded.count(k)) window.insert(k);
  }
  return {window.begin(), window.end()};
}

std::vector<KeyFrameId> verification_keyframes(const Map& map, KeyFrameId current) {
  std::vector<KeyFrameId> out{current};
  for (KeyFrameId k : map.covisible(current, 1)) {
    if (out.size() == 3) break;
    if (k < current) out.push_back(k);
  }
  return out;
}

namespace {

std::vector<MapPointId> window_point_ids(const Map& map, const std::vector<KeyFrameId>& window,
                                         KeyFrameId current) {
  std::set<MapPointId> own;
  for (MapPointId p : map.keyframe(current).associations) {
    if (p != kNoMapPoint) own.insert(p);
  }
  std::vector<MapPointId> ids;
  for (MapPointId p : map.points_seen_by(window)) {
    if (!own.count(p)) ids.push_back(p);
  }
  return ids;
}

}  // namespace

std::optional<LoopDetection> detect_loop(Map& map, KeyFrameId current, const WordIndex& index,
                                         const Vocabulary& vocabulary,
                                         const LoopDetectConfig& config, const Executor& exec) {
  const auto t_total = Clock::now();
  ReadPhase phase = map.freeze();
  const Map& frozen = map;

  auto t0 = Clock::now();
  std::set<KeyFrameId> exclusion{current};
  for (KeyFrameId k : frozen.covisible(current, 1)) exclusion.insert(k);
  const KeyFrame& current_kf = frozen.keyframe(current);
  const auto candidates = detect_candidates(index, frozen, current, current_kf.word_ids,
                                            config.candidates, exclusion);
  const double candidates_ms = elapsed_ms(t0);
  if (candidates.empty()) return std::nullopt;

  const LoopQuery query = make_loop_query(frozen, current);
  const KeyFrameSnapshot& snap = *query.snapshot;
  thread_local StagingBuffer<PointRecord> candidate_buffer;
  thread_local StagingBuffer<PointRecord> window_buffer;

  std::optional<LoopDetection> best;
  std::vector<std::string> log;
  for (KeyFrameId matched : candidates) {
    LoopDetection det;
    det.current_kf_id = current;
    det.matched_kf_id = matched;
    det.stage_ms["candidates"] = candidates_ms;
    const KeyFrame& matched_kf = frozen.keyframe(matched);
    const std::string tag = "candidate " + std::to_string(matched) + ": ";

    // Initial correspondences: word-restricted matching against the candidate's points.
    t0 = Clock::now();
    const auto own_ids = window_point_ids(frozen, {matched}, current);
    const auto own_points = stage_points(frozen, own_ids, candidate_buffer);
    const auto word_matches = search_by_words(snap, own_points, vocabulary, config.word_max_hamming);
    std::vector<Correspondence> initial;
    for (const auto& m : word_matches) {
      const Vector3& a = query.feature_points[m.feature_index];
      if (!a.allFinite()) continue;
      const MapPoint& p = frozen.map_point(m.map_point_id);
      const std::size_t fb = p.observations.at(matched);
      Correspondence c;
      c.a = a;
      c.b = matched_kf.pose * p.position;
      c.pixel_a = Vector2(snap.u[m.feature_index], snap.v[m.feature_index]);
      c.pixel_b = Vector2(matched_kf.keypoints[fb].u, matched_kf.keypoints[fb].v);
      c.octave_a = snap.octave[m.feature_index];
      c.octave_b = matched_kf.keypoints[fb].octave;
      initial.push_back(c);
    }
    const auto coarse = estimate_sim3_ransac(initial, snap.intrinsics, matched_kf.intrinsics,
                                             config.ransac);
    det.stage_ms["words"] = elapsed_ms(t0);
    if (!coarse) {
      log.push_back(tag + "coarse RANSAC failed on " + std::to_string(initial.size()) +
                    " word matches");
      continue;
    }

    // PS1: narrow projection of the whole window at the coarse pose.
    t0 = Clock::now();
    det.window = loop_window(frozen, current, matched);
    const auto window_ids = window_point_ids(frozen, det.window, current);
    const auto window_points = stage_points(frozen, window_ids, window_buffer);
    const Sim3 coarse_pose = compose(coarse->s_ab, to_sim3(matched_kf.pose));
    const auto ps1 = projection_search(snap, coarse_pose, window_points, config.ps1, exec);
    det.stage_ms["ps1"] = elapsed_ms(t0);

    t0 = Clock::now();
    std::unordered_map<MapPointId, std::size_t> by_id;
    for (std::size_t i = 0; i < window_points.size(); ++i) by_id.emplace(window_points[i].id, i);
    std::vector<Correspondence> dense;
    for (const auto& m : ps1) {
      const Vector3& a = query.feature_points[m.feature_index];
      if (!a.allFinite()) continue;
      Correspondence c;
      c.a = a;
      c.b = matched_kf.pose * window_points[by_id.at(m.map_point_id)].position;
      const auto pb = project_unbounded(matched_kf.intrinsics, c.b);
      if (!pb) continue;
      c.pixel_a = Vector2(snap.u[m.feature_index], snap.v[m.feature_index]);
      c.pixel_b = *pb;
      c.octave_a = snap.octave[m.feature_index];
      c.octave_b = c.octave_a;
      dense.push_back(c);
    }
    const auto ransac =
        estimate_sim3_ransac(dense, snap.intrinsics, matched_kf.intrinsics, config.ransac);
    det.stage_ms["ransac"] = elapsed_ms(t0);
    if (!ransac) {
      log.push_back(tag + "RANSAC failed on " + std::to_string(dense.size()) + " PS1 matches");
      continue;
    }

    t0 = Clock::now();
    const auto refined =
        refine_sim3(query, window_points, matched_kf.pose, ransac->s_ab, config.refine, exec);
    det.stage_ms["refine"] = elapsed_ms(t0);
    if (!refined.ok) {
      log.push_back(tag + "refinement failed: " + refined.diagnostic);
      continue;
    }
    det.s_cm = refined.s_cm;
    det.narrow_matches = refined.narrow;
    det.wide_matches = refined.wide;

    // PS3a-c: the current keyframe and two covisible neighbours in one batch.
    t0 = Clock::now();
    const Sim3 s_cw = compose(refined.s_cm, to_sim3(matched_kf.pose));
    det.verify_keyframes = verification_keyframes(frozen, current);
    std::vector<std::shared_ptr<const KeyFrameSnapshot>> snaps;
    std::vector<Sim3> poses;
    const SE3Pose current_inv = current_kf.pose.inverse();
    for (KeyFrameId k : det.verify_keyframes) {
      snaps.push_back(frozen.snapshot(k));
      poses.push_back(compose(to_sim3(compose(frozen.keyframe(k).pose, current_inv)), s_cw));
    }
    const auto verified = verify_triple(snaps, poses, window_points, config.verify, exec);
    det.stage_ms["verify"] = elapsed_ms(t0);
    det.verified_matches = static_cast<int>(verified.size());
    det.accepted = det.verified_matches >= config.accept_threshold;
    log.push_back(tag + std::to_string(det.verified_matches) + " verified matches" +
                  (det.accepted ? " (accepted)" : ""));
    if (det.accepted) {
      det.stage_ms["total"] = elapsed_ms(t_total);
      det.log = log;
      return det;
    }
    if (!best || det.verified_matches > best->verified_matches) best = det;
  }
  if (best) {
    best->stage_ms["total"] = elapsed_ms(t_total);
    best->log = log;
  }
  return best;
}

}  // namespace loopclose
