#pragma once

// The shared map: keyframes, map points, covisibility and essential graphs and
// the snapshot store holding flat-packed, immutable keyframe copies for the
// parallel search stages.
//
// Access follows a two-phase discipline. A ReadPhase token (Map::freeze)
// marks a frozen interval in which any number of workers may read snapshots and
// map state; every mutating call throws std::logic_error while a token is alive.

#include "loopclose/geometry.hpp"

#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

namespace loopclose {

using KeyFrameId = std::int64_t;
using MapPointId = std::int64_t;
using WordId = std::uint32_t;

inline constexpr MapPointId kNoMapPoint = -1;
inline constexpr KeyFrameId kNoKeyFrame = -1;

/// 256-bit binary feature descriptor.
using Descriptor = std::array<std::uint8_t, 32>;

struct KeyPoint {
  double u = 0.0;
  double v = 0.0;
  int octave = 0;
  double angle = 0.0;
};

struct KeyFrame {
  KeyFrameId id = kNoKeyFrame;
  SE3Pose pose;  // world-to-camera
  CameraIntrinsics intrinsics;
  std::vector<KeyPoint> keypoints;
  std::vector<Descriptor> descriptors;
  std::vector<MapPointId> associations;  // kNoMapPoint for unmatched features
  std::vector<WordId> word_ids;          // sorted, unique

  std::size_t size() const { return keypoints.size(); }
};

struct MapPoint {
  MapPointId id = kNoMapPoint;
  Vector3 position = Vector3::Zero();
  Vector3 normal = Vector3::UnitZ();
  double d_min = 0.1;
  double d_max = 10.0;
  Descriptor descriptor{};
  KeyFrameId reference_keyframe = kNoKeyFrame;
  std::map<KeyFrameId, std::size_t> observations;
  MapPointId replaced_by = kNoMapPoint;

  bool replaced() const { return replaced_by != kNoMapPoint; }
};

/// Flat-packed copy of a keyframe for the search kernels.
struct KeyFrameSnapshot {
  KeyFrameId keyframe_id = kNoKeyFrame;
  std::uint64_t version = 0;
  SE3Pose pose;
  CameraIntrinsics intrinsics;
  std::vector<double> u;
  std::vector<double> v;
  std::vector<std::int32_t> octave;
  std::vector<Descriptor> descriptors;
  std::vector<MapPointId> associations;
  int grid_cols = 64;
  int grid_rows = 48;
  std::vector<std::uint32_t> cell_start;  // size grid_cols * grid_rows + 1
  std::vector<std::uint32_t> cell_features;

  std::size_t size() const { return u.size(); }
  int cell_of(double x, double y, int* col, int* row) const;
};

/// Packs a keyframe into `out`, reusing its storage.
void pack_snapshot(const KeyFrame& kf, int grid_cols, int grid_rows, std::uint64_t version,
                   KeyFrameSnapshot& out);

struct MapConfig {
  int covisibility_threshold = 15;
  int essential_threshold = 100;
  int grid_cols = 64;
  int grid_rows = 48;
};

struct CovisibilityChange {
  KeyFrameId a = kNoKeyFrame;
  KeyFrameId b = kNoKeyFrame;
  int old_weight = 0;  // 0 when the edge did not exist
  int new_weight = 0;  // 0 when the edge was dropped

  friend bool operator==(const CovisibilityChange&, const CovisibilityChange&) = default;
};

struct SnapshotCounters {
  std::uint64_t stagings = 0;      // snapshots packed (initial + repacks)
  std::uint64_t repacks = 0;       // restagings after mutation
  std::uint64_t buffer_reuses = 0; // repacks that reused the previous storage
};

class Map;

struct AuditReport {
  std::vector<std::string> problems;
  bool ok() const { return problems.empty(); }
};

/// Token for a frozen read phase; mutations are rejected while one is alive.
class ReadPhase {
 public:
  ReadPhase(ReadPhase&& other) noexcept;
  ReadPhase& operator=(ReadPhase&&) = delete;
  ReadPhase(const ReadPhase&) = delete;
  ReadPhase& operator=(const ReadPhase&) = delete;
  ~ReadPhase();

 private:
  friend class Map;
  explicit ReadPhase(const Map* map);
  const Map* map_;
};

class Map {
 public:
  explicit Map(MapConfig config = {});

  const MapConfig& config() const { return config_; }

  // --- mutation (exclusive phase) -------------------------------------------

  /// Adds a map point without observations; observations arrive through
  /// keyframe insertion or add_observation. Returns its id.
  MapPointId add_map_point(MapPoint point);

  /// Stores the keyframe, links its associations, updates covisibility, sets
  /// its spanning-tree parent and stages its snapshot once.
  KeyFrameId insert_keyframe(KeyFrame kf);

  /// Recomputes the connection edges incident to `id` from the current
  /// covisibility counts; returns the edges whose presence or weight changed.
  std::vector<CovisibilityChange> update_connections(KeyFrameId id);

  /// Transfers every observation of `victim` to `survivor` and tombstones the
  /// victim with a forwarding id.
  void replace_map_point(MapPointId victim, MapPointId survivor);

  /// Associates feature `feature` of keyframe `kf` with `point`. Returns false
  /// when the slot is occupied or the keyframe already observes the point.
  bool add_observation(KeyFrameId kf, std::size_t feature, MapPointId point);

  void set_pose(KeyFrameId id, const SE3Pose& pose);
  void set_point_position(MapPointId id, const Vector3& position);
  void add_loop_edge(KeyFrameId a, KeyFrameId b);

  // --- queries ----------------------------------------------------------------

  bool has_keyframe(KeyFrameId id) const { return keyframes_.count(id) != 0; }
  bool has_map_point(MapPointId id) const { return points_.count(id) != 0; }
  const KeyFrame& keyframe(KeyFrameId id) const;
  const MapPoint& map_point(MapPointId id) const;
  const std::map<KeyFrameId, KeyFrame>& keyframes() const { return keyframes_; }
  const std::map<MapPointId, MapPoint>& map_points() const { return points_; }
  std::size_t keyframe_count() const { return keyframes_.size(); }

  /// Follows forwarding ids to the live point.
  MapPointId resolve(MapPointId id) const;

  /// Exact shared-observation count between two keyframes.
  int covisibility_weight(KeyFrameId a, KeyFrameId b) const;
  /// All keyframes sharing at least `min_weight` observations with `id`,
  /// ordered by weight descending then id ascending.
  std::vector<KeyFrameId> covisible(KeyFrameId id, int min_weight = 1) const;
  const std::map<KeyFrameId, int>& covisibility_counts(KeyFrameId id) const;
  /// Connection edges kept by the last update_connections.
  const std::map<KeyFrameId, int>& connections(KeyFrameId id) const;
  /// Connected keyframes sorted by id.
  std::vector<KeyFrameId> connected(KeyFrameId id) const;

  KeyFrameId parent(KeyFrameId id) const;
  const std::set<std::pair<KeyFrameId, KeyFrameId>>& loop_edges() const { return loop_edges_; }
  /// Pairs (a < b) with covisibility weight >= essential_threshold.
  std::vector<std::pair<KeyFrameId, KeyFrameId>> essential_covisibility_edges() const;

  /// Live map points observed by the given keyframes, ascending id.
  std::vector<MapPointId> points_seen_by(const std::vector<KeyFrameId>& kfs) const;

  // --- snapshots ----------------------------------------------------------------

  /// Current snapshot; repacked (version + 1) only if the keyframe's pose or
  /// associations changed since the last staging. Outside a read phase only.
  std::shared_ptr<const KeyFrameSnapshot> snapshot(KeyFrameId id);
  /// Lookup usable inside a read phase (freeze() restages everything first).
  std::shared_ptr<const KeyFrameSnapshot> snapshot(KeyFrameId id) const;
  const SnapshotCounters& snapshot_counters() const { return snapshot_counters_; }

  // --- phases -------------------------------------------------------------------

  /// Enters a read phase. Stale snapshots are restaged before the freeze.
  ReadPhase freeze();
  bool frozen() const { return readers_ > 0; }

 private:
  friend class ReadPhase;

  friend AuditReport audit(const Map& map);

  void require_mutable(const char* op) const;
  void link(KeyFrameId kf, std::size_t feature, MapPointId point);
  void unlink(KeyFrameId kf, std::size_t feature);
  void touch(KeyFrameId kf);
  void restage(KeyFrameId id);

  MapConfig config_;
  std::map<KeyFrameId, KeyFrame> keyframes_;
  std::map<MapPointId, MapPoint> points_;
  std::map<KeyFrameId, std::map<KeyFrameId, int>> counts_;
  std::map<KeyFrameId, std::map<KeyFrameId, int>> connections_;
  std::map<KeyFrameId, KeyFrameId> parent_;
  std::set<std::pair<KeyFrameId, KeyFrameId>> loop_edges_;
  std::map<KeyFrameId, std::uint64_t> revision_;
  std::map<KeyFrameId, std::uint64_t> staged_revision_;
  std::map<KeyFrameId, std::shared_ptr<KeyFrameSnapshot>> snapshots_;
  SnapshotCounters snapshot_counters_;
  MapPointId next_point_id_ = 0;
  mutable int readers_ = 0;
};

// --- audit ---------------------------------------------------------------------

/// Brute-force consistency check: bidirectional observation links, exact
/// covisibility counts, spanning tree acyclic and spanning, snapshots fresh.
AuditReport audit(const Map& map);

}  // namespace loopclose
