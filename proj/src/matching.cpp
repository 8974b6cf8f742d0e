#include "loopclose/matching.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numeric>
#include <random>
#include <stdexcept>

namespace loopclose {

int hamming(const Descriptor& a, const Descriptor& b) {
  int dist = 0;
  for (std::size_t i = 0; i < a.size(); i += 8) {
    std::uint64_t x;
    std::uint64_t y;
    std::memcpy(&x, a.data() + i, 8);
    std::memcpy(&y, b.data() + i, 8);
    dist += std::popcount(x ^ y);
  }
  return dist;
}

void ProjectionSearchParams::validate() const {
  if (!(radius_multiplier > 0.0)) throw std::invalid_argument("radius_multiplier must be > 0");
  if (max_hamming <= 0 || max_hamming > 256) throw std::invalid_argument("max_hamming out of (0, 256]");
  if (octave_tolerance < 0) throw std::invalid_argument("octave_tolerance must be >= 0");
  if (!(scale_factor > 1.0) || levels < 1) throw std::invalid_argument("bad scale pyramid");
}

double ProjectionSearchParams::level_scale(int octave) const {
  return std::pow(scale_factor, octave);
}

PointRecord make_point_record(const MapPoint& p) {
  return {p.id, p.position, p.normal, p.d_min, p.d_max, p.descriptor};
}

std::span<const PointRecord> stage_points(const Map& map, std::span<const MapPointId> ids,
                                          StagingBuffer<PointRecord>& buffer) {
  std::span<PointRecord> dst = buffer.acquire(ids.size());
  for (std::size_t i = 0; i < ids.size(); ++i) dst[i] = make_point_record(map.map_point(ids[i]));
  return dst;
}

std::vector<std::uint32_t> features_in_radius(const KeyFrameSnapshot& snap, double u, double v,
                                              double radius, int min_octave, int max_octave) {
  std::vector<std::uint32_t> out;
  if (!(radius > 0.0) || snap.size() == 0) return out;
  int c0, r0, c1, r1;
  snap.cell_of(u - radius, v - radius, &c0, &r0);
  snap.cell_of(u + radius, v + radius, &c1, &r1);
  const double r2 = radius * radius;
  for (int r = r0; r <= r1; ++r) {
    for (int c = c0; c <= c1; ++c) {
      const std::size_t cell = static_cast<std::size_t>(r) * snap.grid_cols + c;
      for (std::uint32_t k = snap.cell_start[cell]; k < snap.cell_start[cell + 1]; ++k) {
        const std::uint32_t f = snap.cell_features[k];
        const int oct = snap.octave[f];
        if (oct < min_octave || oct > max_octave) continue;
        const double du = snap.u[f] - u;
        const double dv = snap.v[f] - v;
        if (du * du + dv * dv <= r2) out.push_back(f);
      }
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

int predict_octave(double dist, double d_max, const ProjectionSearchParams& params) {
  const double level = std::round(std::log(d_max / dist) / std::log(params.scale_factor));
  return std::clamp(static_cast<int>(level), 0, params.levels - 1);
}

std::optional<MatchResult> match_point(const KeyFrameSnapshot& snap, const Sim3& pose,
                                       const Vector3& camera_center, const PointRecord& point,
                                       const ProjectionSearchParams& params) {
  const Vector3 pc = pose * point.position;
  const auto px = project(snap.intrinsics, pc);
  if (!px) return std::nullopt;

  const Vector3 ray = point.position - camera_center;
  const double dist = ray.norm();
  if (!(dist > 0.0)) return std::nullopt;
  if (params.check_distance_range && (dist < 0.8 * point.d_min || dist > 1.2 * point.d_max)) {
    return std::nullopt;
  }
  if (params.check_view_angle && ray.dot(point.normal) < params.min_view_cosine * dist) {
    return std::nullopt;
  }

  const int octave = predict_octave(dist, point.d_max, params);
  const double radius = params.radius_multiplier * params.level_scale(octave);
  const auto candidates = features_in_radius(snap, px->x(), px->y(), radius,
                                             octave - params.octave_tolerance,
                                             octave + params.octave_tolerance);
  int best = 257;
  std::uint32_t best_feature = 0;
  for (std::uint32_t f : candidates) {
    const int d = hamming(point.descriptor, snap.descriptors[f]);
    if (d < best) {
      best = d;
      best_feature = f;
    }
  }
  if (best > params.max_hamming) return std::nullopt;
  return MatchResult{point.id, best_feature, best};
}

std::vector<MatchResult> resolve_feature_conflicts(std::vector<MatchResult> candidates) {
  std::sort(candidates.begin(), candidates.end(), [](const MatchResult& a, const MatchResult& b) {
    return std::tie(a.feature_index, a.hamming_distance, a.map_point_id) <
           std::tie(b.feature_index, b.hamming_distance, b.map_point_id);
  });
  std::vector<MatchResult> kept;
  kept.reserve(candidates.size());
  for (const auto& m : candidates) {
    if (kept.empty() || kept.back().feature_index != m.feature_index) kept.push_back(m);
  }
  std::sort(kept.begin(), kept.end(), [](const MatchResult& a, const MatchResult& b) {
    return a.map_point_id < b.map_point_id;
  });
  return kept;
}

std::vector<MatchResult> projection_search(const KeyFrameSnapshot& snap, const Sim3& pose,
                                           std::span<const PointRecord> points,
                                           const ProjectionSearchParams& params,
                                           const Executor& exec) {
  params.validate();
  const Vector3 center = pose.center();
  auto batch = run_batch<std::optional<MatchResult>>(
      points.size(),
      [&](std::size_t i) { return match_point(snap, pose, center, points[i], params); }, exec,
      "projection_search");
  if (!batch.ok()) {
    throw std::runtime_error("projection_search failed at point index " +
                             std::to_string(batch.error->index) + ": " + batch.error->message);
  }
  std::vector<MatchResult> candidates;
  for (const auto& m : batch.output) {
    if (m) candidates.push_back(*m);
  }
  return resolve_feature_conflicts(std::move(candidates));
}

// --- vocabulary -------------------------------------------------------------------

Vocabulary::Vocabulary(std::uint64_t seed) : seed_(seed) {
  std::vector<int> all(256);
  std::iota(all.begin(), all.end(), 0);
  std::mt19937_64 rng(seed);
  // Partial Fisher-Yates with raw engine output keeps the choice portable.
  for (int i = 0; i < 16; ++i) {
    const auto j = i + static_cast<int>(rng() % static_cast<std::uint64_t>(256 - i));
    std::swap(all[i], all[j]);
    bits_[i] = all[i];
  }
}

WordId Vocabulary::word(const Descriptor& d) const {
  WordId w = 0;
  for (int i = 0; i < 16; ++i) {
    const int bit = bits_[i];
    const WordId b = (d[bit / 8] >> (bit % 8)) & 1u;
    w |= b << i;
  }
  return w;
}

std::vector<WordId> Vocabulary::assign_words(std::span<const Descriptor> descriptors) const {
  std::vector<WordId> words;
  words.reserve(descriptors.size());
  for (const auto& d : descriptors) words.push_back(word(d));
  std::sort(words.begin(), words.end());
  words.erase(std::unique(words.begin(), words.end()), words.end());
  return words;
}

std::vector<MatchResult> search_by_words(const KeyFrameSnapshot& snap,
                                         std::span<const PointRecord> points,
                                         const Vocabulary& vocabulary, int max_hamming) {
  std::unordered_map<WordId, std::vector<std::uint32_t>> by_word;
  for (std::uint32_t f = 0; f < snap.size(); ++f) {
    by_word[vocabulary.word(snap.descriptors[f])].push_back(f);
  }
  std::vector<MatchResult> candidates;
  for (const auto& p : points) {
    auto it = by_word.find(vocabulary.word(p.descriptor));
    if (it == by_word.end()) continue;
    int best = 257;
    std::uint32_t best_feature = 0;
    for (std::uint32_t f : it->second) {
      const int d = hamming(p.descriptor, snap.descriptors[f]);
      if (d < best) {
        best = d;
        best_feature = f;
      }
    }
    if (best <= max_hamming) candidates.push_back({p.id, best_feature, best});
  }
  return resolve_feature_conflicts(std::move(candidates));
}

// --- inverted index -----------------------------------------------------------------

void WordIndex::add(KeyFrameId id, const std::vector<WordId>& words) {
  remove(id);
  std::vector<WordId> unique = words;
  std::sort(unique.begin(), unique.end());
  unique.erase(std::unique(unique.begin(), unique.end()), unique.end());
  for (WordId w : unique) {
    auto& list = index_[w];
    list.insert(std::lower_bound(list.begin(), list.end(), id), id);
  }
  words_[id] = std::move(unique);
}

void WordIndex::remove(KeyFrameId id) {
  auto it = words_.find(id);
  if (it == words_.end()) return;
  for (WordId w : it->second) {
    auto& list = index_[w];
    list.erase(std::remove(list.begin(), list.end(), id), list.end());
    if (list.empty()) index_.erase(w);
  }
  words_.erase(it);
}

const std::vector<KeyFrameId>& WordIndex::keyframes_with(WordId w) const {
  static const std::vector<KeyFrameId> empty;
  auto it = index_.find(w);
  return it == index_.end() ? empty : it->second;
}

const std::vector<WordId>& WordIndex::words_of(KeyFrameId id) const {
  static const std::vector<WordId> empty;
  auto it = words_.find(id);
  return it == words_.end() ? empty : it->second;
}

std::vector<KeyFrameId> detect_candidates(const WordIndex& index, const Map& map,
                                          KeyFrameId query, const std::vector<WordId>& query_words,
                                          int n, const std::set<KeyFrameId>& exclusion) {
  if (n < 1) throw std::invalid_argument("detect_candidates: n must be >= 1");
  std::map<KeyFrameId, int> scores;
  for (WordId w : query_words) {
    for (KeyFrameId k : index.keyframes_with(w)) {
      if (k == query || exclusion.count(k)) continue;
      ++scores[k];
    }
  }
  std::vector<std::pair<int, KeyFrameId>> ranked;
  ranked.reserve(scores.size());
  for (const auto& [k, s] : scores) ranked.emplace_back(-s, k);
  std::sort(ranked.begin(), ranked.end());

  std::vector<KeyFrameId> chosen;
  for (const auto& [neg, k] : ranked) {
    bool grouped = false;
    for (KeyFrameId c : chosen) {
      if (map.has_keyframe(k) && map.has_keyframe(c) && map.covisibility_weight(k, c) > 0) {
        grouped = true;
        break;
      }
    }
    if (grouped) continue;
    chosen.push_back(k);
    if (static_cast<int>(chosen.size()) == n) break;
  }
  return chosen;
}

}  // namespace loopclose
