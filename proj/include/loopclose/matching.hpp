#pragma once

// Descriptor matching: Hamming distance, grid radius lookup, the data-parallel
// projection search kernel, the word vocabulary and the inverted-index
// candidate detector.

#include "loopclose/map.hpp"
#include "loopclose/parallel.hpp"

#include <array>
#include <cstdint>
#include <set>
#include <span>
#include <unordered_map>
#include <vector>

namespace loopclose {

int hamming(const Descriptor& a, const Descriptor& b);

struct MatchResult {
  MapPointId map_point_id = kNoMapPoint;
  std::uint32_t feature_index = 0;
  int hamming_distance = 0;

  friend bool operator==(const MatchResult&, const MatchResult&) = default;
};

struct ProjectionSearchParams {
  double radius_multiplier = 2.5;  // pixels at octave 0
  int max_hamming = 50;
  int octave_tolerance = 1;
  bool check_view_angle = true;
  bool check_distance_range = true;
  double scale_factor = 1.2;
  int levels = 8;
  double min_view_cosine = 0.5;

  static ProjectionSearchParams narrow() { return {}; }
  static ProjectionSearchParams wide() {
    ProjectionSearchParams p;
    p.radius_multiplier = 7.5;
    p.max_hamming = 100;
    return p;
  }
  static ProjectionSearchParams fusion() {
    ProjectionSearchParams p;
    p.radius_multiplier = 4.0;
    return p;
  }
  /// Throws std::invalid_argument when out of range.
  void validate() const;
  double level_scale(int octave) const;
};

/// The subset of a map point the search kernels read.
struct PointRecord {
  MapPointId id = kNoMapPoint;
  Vector3 position = Vector3::Zero();
  Vector3 normal = Vector3::UnitZ();
  double d_min = 0.1;
  double d_max = 10.0;
  Descriptor descriptor{};
};

PointRecord make_point_record(const MapPoint& p);

/// Packs the given live points, in order, into `buffer` and returns the view.
std::span<const PointRecord> stage_points(const Map& map, std::span<const MapPointId> ids,
                                          StagingBuffer<PointRecord>& buffer);

/// Features within `radius` pixels of (u, v) whose octave lies in
/// [min_octave, max_octave], ascending feature index.
std::vector<std::uint32_t> features_in_radius(const KeyFrameSnapshot& snap, double u, double v,
                                              double radius, int min_octave, int max_octave);

/// Octave predicted from the scale-invariance range: round(log(d_max / dist) / log(scale)).
int predict_octave(double dist, double d_max, const ProjectionSearchParams& params);

/// Per-point kernel: projection, culls, radius lookup and best-descriptor pick.
/// Returns a match candidate before one-per-feature conflict resolution.
std::optional<MatchResult> match_point(const KeyFrameSnapshot& snap, const Sim3& pose,
                                       const Vector3& camera_center, const PointRecord& point,
                                       const ProjectionSearchParams& params);

/// Keeps one result per feature (lower Hamming, then lower map-point id) and
/// orders the survivors by map-point id.
std::vector<MatchResult> resolve_feature_conflicts(std::vector<MatchResult> candidates);

/// Projects every point through `pose` (world to camera) into the snapshot and
/// matches descriptors. Data-parallel over points; output is independent of
/// the executor.
std::vector<MatchResult> projection_search(const KeyFrameSnapshot& snap, const Sim3& pose,
                                           std::span<const PointRecord> points,
                                           const ProjectionSearchParams& params,
                                           const Executor& exec = {});

// --- vocabulary -------------------------------------------------------------------

/// Word = 16 fixed descriptor bits chosen from a seed (65,536 words).
class Vocabulary {
 public:
  static constexpr std::uint64_t kDefaultSeed = 0x5eed0f0dULL;

  explicit Vocabulary(std::uint64_t seed = kDefaultSeed);

  WordId word(const Descriptor& d) const;
  /// Sorted, unique word ids of the descriptors.
  std::vector<WordId> assign_words(std::span<const Descriptor> descriptors) const;
  const std::array<int, 16>& bit_positions() const { return bits_; }
  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  std::array<int, 16> bits_{};
};

/// Sequential descriptor matching restricted to equal words: for each point the
/// best same-word feature within `max_hamming`, then one result per feature.
std::vector<MatchResult> search_by_words(const KeyFrameSnapshot& snap,
                                         std::span<const PointRecord> points,
                                         const Vocabulary& vocabulary, int max_hamming);

/// Inverted index word -> keyframes.
class WordIndex {
 public:
  void add(KeyFrameId id, const std::vector<WordId>& words);
  void remove(KeyFrameId id);

  const std::vector<KeyFrameId>& keyframes_with(WordId w) const;
  const std::vector<WordId>& words_of(KeyFrameId id) const;
  std::size_t size() const { return words_.size(); }

 private:
  std::unordered_map<WordId, std::vector<KeyFrameId>> index_;
  std::map<KeyFrameId, std::vector<WordId>> words_;
};

/// Scores keyframes sharing words with the query by shared-word count, drops
/// the exclusion set, keeps the best keyframe per covisibility group and
/// returns the top `n` (score descending, id ascending). Single-threaded.
std::vector<KeyFrameId> detect_candidates(const WordIndex& index, const Map& map,
                                          KeyFrameId query, const std::vector<WordId>& query_words,
                                          int n, const std::set<KeyFrameId>& exclusion);

}  // namespace loopclose
