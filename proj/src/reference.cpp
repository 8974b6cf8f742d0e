#include "loopclose/reference.hpp"

#include <algorithm>
#include <cmath>

namespace loopclose::reference {

std::vector<std::uint32_t> features_in_radius(const KeyFrameSnapshot& snap, double u, double v,
                                              double radius, int min_octave, int max_octave) {
  std::vector<std::uint32_t> out;
  for (std::uint32_t f = 0; f < snap.size(); ++f) {
    if (snap.octave[f] < min_octave || snap.octave[f] > max_octave) continue;
    if (std::hypot(snap.u[f] - u, snap.v[f] - v) <= radius) out.push_back(f);
  }
  return out;
}

std::vector<MatchResult> projection_search(const KeyFrameSnapshot& snap, const Sim3& pose,
                                           std::span<const PointRecord> points,
                                           const ProjectionSearchParams& params) {
  const Vector3 center = pose.center();
  // best[f] holds the winning candidate for feature f.
  std::vector<std::optional<MatchResult>> best(snap.size());
  for (const auto& point : points) {
    const Vector3 pc = pose.scale * (pose.rotation * point.position) + pose.translation;
    const auto px = project(snap.intrinsics, pc);
    if (!px) continue;
    const double u = px->x();
    const double v = px->y();
    const Vector3 ray = point.position - center;
    const double dist = ray.norm();
    if (params.check_distance_range && (dist < 0.8 * point.d_min || dist > 1.2 * point.d_max)) {
      continue;
    }
    if (params.check_view_angle && ray.dot(point.normal) < params.min_view_cosine * dist) continue;
    const int octave = predict_octave(dist, point.d_max, params);
    const double radius = params.radius_multiplier * std::pow(params.scale_factor, octave);
    int best_d = params.max_hamming + 1;
    std::uint32_t best_f = 0;
    for (std::uint32_t f = 0; f < snap.size(); ++f) {
      if (std::abs(snap.octave[f] - octave) > params.octave_tolerance) continue;
      const double du = snap.u[f] - u;
      const double dv = snap.v[f] - v;
      if (du * du + dv * dv > radius * radius) continue;
      int d = 0;
      for (std::size_t byte = 0; byte < 32; ++byte) {
        for (int bit = 0; bit < 8; ++bit) {
          d += ((point.descriptor[byte] ^ snap.descriptors[f][byte]) >> bit) & 1;
        }
      }
      if (d < best_d) {
        best_d = d;
        best_f = f;
      }
    }
    if (best_d > params.max_hamming) continue;
    auto& slot = best[best_f];
    if (!slot || best_d < slot->hamming_distance ||
        (best_d == slot->hamming_distance && point.id < slot->map_point_id)) {
      slot = MatchResult{point.id, best_f, best_d};
    }
  }
  std::vector<MatchResult> out;
  for (const auto& m : best) {
    if (m) out.push_back(*m);
  }
  std::sort(out.begin(), out.end(),
            [](const MatchResult& a, const MatchResult& b) { return a.map_point_id < b.map_point_id; });
  return out;
}

std::vector<KeyFrameId> detect_candidates(const Map& map, KeyFrameId query,
                                          const std::vector<WordId>& query_words, int n,
                                          const std::set<KeyFrameId>& exclusion) {
  std::vector<std::pair<int, KeyFrameId>> scored;
  for (const auto& [id, kf] : map.keyframes()) {
    if (id == query || exclusion.count(id)) continue;
    int shared = 0;
    for (WordId w : query_words) {
      if (std::binary_search(kf.word_ids.begin(), kf.word_ids.end(), w)) ++shared;
    }
    if (shared > 0) scored.emplace_back(shared, id);
  }
  std::stable_sort(scored.begin(), scored.end(),
                   [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<KeyFrameId> out;
  for (const auto& [score, id] : scored) {
    if (static_cast<int>(out.size()) == n) break;
    bool grouped = false;
    for (KeyFrameId c : out) grouped = grouped || map.covisibility_weight(id, c) > 0;
    if (!grouped) out.push_back(id);
  }
  return out;
}

}  // namespace loopclose::reference
