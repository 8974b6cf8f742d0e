#include "loopclose/map.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace loopclose {

namespace {

std::string kf_name(KeyFrameId id) { return "keyframe " + std::to_string(id); }
std::string mp_name(MapPointId id) { return "map point " + std::to_string(id); }

const std::map<KeyFrameId, int>& empty_weights() {
  static const std::map<KeyFrameId, int> empty;
  return empty;
}

}  // namespace

// --- snapshot packing ---------------------------------------------------------

int KeyFrameSnapshot::cell_of(double x, double y, int* col, int* row) const {
  int c = static_cast<int>(std::floor(x * grid_cols / intrinsics.width));
  int r = static_cast<int>(std::floor(y * grid_rows / intrinsics.height));
  c = std::clamp(c, 0, grid_cols - 1);
  r = std::clamp(r, 0, grid_rows - 1);
  if (col) *col = c;
  if (row) *row = r;
  return r * grid_cols + c;
}

void pack_snapshot(const KeyFrame& kf, int grid_cols, int grid_rows, std::uint64_t version,
                   KeyFrameSnapshot& out) {
  const std::size_t n = kf.size();
  out.keyframe_id = kf.id;
  out.version = version;
  out.pose = kf.pose;
  out.intrinsics = kf.intrinsics;
  out.grid_cols = grid_cols;
  out.grid_rows = grid_rows;
  out.u.resize(n);
  out.v.resize(n);
  out.octave.resize(n);
  out.descriptors.assign(kf.descriptors.begin(), kf.descriptors.end());
  out.associations.assign(kf.associations.begin(), kf.associations.end());
  for (std::size_t i = 0; i < n; ++i) {
    out.u[i] = kf.keypoints[i].u;
    out.v[i] = kf.keypoints[i].v;
    out.octave[i] = kf.keypoints[i].octave;
  }

  // Counting sort into grid cells keeps feature indices ascending per cell.
  const std::size_t cells = static_cast<std::size_t>(grid_cols) * grid_rows;
  out.cell_start.assign(cells + 1, 0);
  std::vector<std::uint32_t> cell_index(n);
  for (std::size_t i = 0; i < n; ++i) {
    cell_index[i] = static_cast<std::uint32_t>(out.cell_of(out.u[i], out.v[i], nullptr, nullptr));
    ++out.cell_start[cell_index[i] + 1];
  }
  for (std::size_t c = 0; c < cells; ++c) out.cell_start[c + 1] += out.cell_start[c];
  out.cell_features.resize(n);
  std::vector<std::uint32_t> cursor(out.cell_start.begin(), out.cell_start.end() - 1);
  for (std::size_t i = 0; i < n; ++i) {
    out.cell_features[cursor[cell_index[i]]++] = static_cast<std::uint32_t>(i);
  }
}

// --- read phase ------------------------------------------------------------------

ReadPhase::ReadPhase(const Map* map) : map_(map) { ++map_->readers_; }
ReadPhase::ReadPhase(ReadPhase&& other) noexcept : map_(other.map_) { other.map_ = nullptr; }
ReadPhase::~ReadPhase() {
  if (map_) --map_->readers_;
}

// --- map ------------------------------------------------------------------------

Map::Map(MapConfig config) : config_(config) {}

void Map::require_mutable(const char* op) const {
  if (readers_ > 0) {
    throw std::logic_error(std::string(op) + ": map is frozen in a read phase");
  }
}

const KeyFrame& Map::keyframe(KeyFrameId id) const {
  auto it = keyframes_.find(id);
  if (it == keyframes_.end()) throw std::out_of_range("unknown " + kf_name(id));
  return it->second;
}

const MapPoint& Map::map_point(MapPointId id) const {
  auto it = points_.find(id);
  if (it == points_.end()) throw std::out_of_range("unknown " + mp_name(id));
  return it->second;
}

MapPointId Map::resolve(MapPointId id) const {
  // Forwarding chains are acyclic: a survivor is never replaced by its victim.
  for (std::size_t hops = 0; hops <= points_.size(); ++hops) {
    const MapPoint& p = map_point(id);
    if (!p.replaced()) return id;
    id = p.replaced_by;
  }
  throw std::logic_error("forwarding cycle at " + mp_name(id));
}

MapPointId Map::add_map_point(MapPoint point) {
  require_mutable("add_map_point");
  if (point.id == kNoMapPoint) point.id = next_point_id_;
  if (point.id < 0 || points_.count(point.id)) {
    throw std::invalid_argument("duplicate " + mp_name(point.id));
  }
  if (!(point.d_min > 0.0 && point.d_min <= point.d_max)) {
    throw std::invalid_argument(mp_name(point.id) + ": need 0 < d_min <= d_max");
  }
  point.observations.clear();
  const MapPointId id = point.id;
  next_point_id_ = std::max(next_point_id_, id + 1);
  points_.emplace(id, std::move(point));
  return id;
}

void Map::touch(KeyFrameId kf) { ++revision_[kf]; }

void Map::link(KeyFrameId kf, std::size_t feature, MapPointId point) {
  MapPoint& p = points_.at(point);
  auto& counts = counts_[kf];
  for (const auto& [other, idx] : p.observations) {
    (void)idx;
    ++counts[other];
    ++counts_[other][kf];
  }
  p.observations.emplace(kf, feature);
  if (p.reference_keyframe == kNoKeyFrame) p.reference_keyframe = kf;
  keyframes_.at(kf).associations[feature] = point;
}

void Map::unlink(KeyFrameId kf, std::size_t feature) {
  KeyFrame& frame = keyframes_.at(kf);
  const MapPointId point = frame.associations[feature];
  if (point == kNoMapPoint) return;
  MapPoint& p = points_.at(point);
  p.observations.erase(kf);
  auto& counts = counts_[kf];
  for (const auto& [other, idx] : p.observations) {
    (void)idx;
    if (--counts[other] == 0) counts.erase(other);
    auto& back = counts_[other];
    if (--back[kf] == 0) back.erase(kf);
  }
  frame.associations[feature] = kNoMapPoint;
}

KeyFrameId Map::insert_keyframe(KeyFrame kf) {
  require_mutable("insert_keyframe");
  if (kf.id < 0) throw std::invalid_argument("keyframe id must be non-negative");
  if (keyframes_.count(kf.id)) throw std::invalid_argument("duplicate " + kf_name(kf.id));
  if (!keyframes_.empty() && kf.id < keyframes_.rbegin()->first) {
    throw std::invalid_argument(kf_name(kf.id) + ": ids must be monotone");
  }
  if (kf.descriptors.size() != kf.keypoints.size()) {
    throw std::invalid_argument(kf_name(kf.id) + ": keypoint/descriptor count mismatch");
  }
  if (kf.associations.empty()) kf.associations.assign(kf.size(), kNoMapPoint);
  if (kf.associations.size() != kf.size()) {
    throw std::invalid_argument(kf_name(kf.id) + ": association count mismatch");
  }
  if (!kf.intrinsics.valid()) throw std::invalid_argument(kf_name(kf.id) + ": bad intrinsics");
  for (const auto& kp : kf.keypoints) {
    if (!kf.intrinsics.in_image(kp.u, kp.v) || kp.octave < 0) {
      throw std::invalid_argument(kf_name(kf.id) + ": keypoint outside the image");
    }
  }
  std::set<MapPointId> seen;
  for (MapPointId a : kf.associations) {
    if (a == kNoMapPoint) continue;
    auto it = points_.find(a);
    if (it == points_.end()) throw std::invalid_argument(kf_name(kf.id) + ": unknown " + mp_name(a));
    if (it->second.replaced()) {
      throw std::invalid_argument(kf_name(kf.id) + ": association to replaced " + mp_name(a));
    }
    if (!seen.insert(a).second) {
      throw std::invalid_argument(kf_name(kf.id) + ": " + mp_name(a) + " associated twice");
    }
  }
  std::sort(kf.word_ids.begin(), kf.word_ids.end());
  kf.word_ids.erase(std::unique(kf.word_ids.begin(), kf.word_ids.end()), kf.word_ids.end());

  const KeyFrameId id = kf.id;
  const KeyFrameId previous = keyframes_.empty() ? kNoKeyFrame : keyframes_.rbegin()->first;
  std::vector<MapPointId> associations = kf.associations;
  std::fill(kf.associations.begin(), kf.associations.end(), kNoMapPoint);
  keyframes_.emplace(id, std::move(kf));
  counts_[id];
  connections_[id];
  for (std::size_t f = 0; f < associations.size(); ++f) {
    if (associations[f] != kNoMapPoint) link(id, f, associations[f]);
  }

  KeyFrameId parent = previous;
  int best = 0;
  for (const auto& [other, w] : counts_[id]) {
    if (w > best) {
      best = w;
      parent = other;
    }
  }
  parent_[id] = parent;

  update_connections(id);
  revision_[id] = 0;
  restage(id);
  return id;
}

std::vector<CovisibilityChange> Map::update_connections(KeyFrameId id) {
  require_mutable("update_connections");
  if (!has_keyframe(id)) throw std::out_of_range("unknown " + kf_name(id));
  const auto& counts = counts_[id];
  std::map<KeyFrameId, int> desired;
  for (const auto& [other, w] : counts) {
    if (w >= config_.covisibility_threshold) desired.emplace(other, w);
  }
  if (desired.empty() && !counts.empty()) {
    auto best = counts.begin();
    for (auto it = counts.begin(); it != counts.end(); ++it) {
      if (it->second > best->second) best = it;
    }
    desired.emplace(best->first, best->second);
  }

  std::set<KeyFrameId> others;
  for (const auto& [other, w] : connections_[id]) others.insert(other);
  for (const auto& [other, w] : counts) others.insert(other);

  std::vector<CovisibilityChange> changes;
  for (KeyFrameId other : others) {
    auto& mine = connections_[id];
    auto& theirs = connections_[other];
    const auto cur = mine.find(other);
    const int old_w = cur == mine.end() ? 0 : cur->second;
    auto want = desired.find(other);
    int new_w = want == desired.end() ? 0 : want->second;
    if (new_w == 0 && old_w > 0) {
      // Never strand the other endpoint: keep its last edge while it shares points.
      auto c = counts.find(other);
      if (theirs.size() == 1 && c != counts.end()) new_w = c->second;
    }
    if (old_w == new_w) continue;
    changes.push_back({std::min(id, other), std::max(id, other), old_w, new_w});
    if (new_w == 0) {
      mine.erase(other);
      theirs.erase(id);
    } else {
      mine[other] = new_w;
      theirs[id] = new_w;
    }
  }
  std::sort(changes.begin(), changes.end(), [](const auto& x, const auto& y) {
    return std::pair(x.a, x.b) < std::pair(y.a, y.b);
  });
  return changes;
}

void Map::replace_map_point(MapPointId victim, MapPointId survivor) {
  require_mutable("replace_map_point");
  if (victim == survivor) throw std::invalid_argument("replace_map_point: victim == survivor");
  MapPoint& v = points_.count(victim) ? points_.at(victim)
                                      : throw std::invalid_argument("unknown " + mp_name(victim));
  MapPoint& s = points_.count(survivor) ? points_.at(survivor)
                                        : throw std::invalid_argument("unknown " + mp_name(survivor));
  if (v.replaced()) throw std::invalid_argument(mp_name(victim) + " already replaced");
  if (s.replaced()) throw std::invalid_argument(mp_name(survivor) + " already replaced");

  const auto observations = v.observations;
  for (const auto& [kf, feature] : observations) {
    unlink(kf, feature);
    if (!s.observations.count(kf)) link(kf, feature, survivor);
    touch(kf);
  }
  v.replaced_by = survivor;
  v.observations.clear();
}

bool Map::add_observation(KeyFrameId kf, std::size_t feature, MapPointId point) {
  require_mutable("add_observation");
  KeyFrame& frame = keyframes_.count(kf) ? keyframes_.at(kf)
                                         : throw std::out_of_range("unknown " + kf_name(kf));
  if (feature >= frame.size()) throw std::out_of_range(kf_name(kf) + ": feature out of range");
  const MapPoint& p = map_point(point);
  if (p.replaced()) throw std::invalid_argument(mp_name(point) + " is replaced");
  if (frame.associations[feature] != kNoMapPoint) return false;
  if (p.observations.count(kf)) return false;
  link(kf, feature, point);
  touch(kf);
  return true;
}

void Map::set_pose(KeyFrameId id, const SE3Pose& pose) {
  require_mutable("set_pose");
  auto it = keyframes_.find(id);
  if (it == keyframes_.end()) throw std::out_of_range("unknown " + kf_name(id));
  it->second.pose = pose;
  it->second.pose.rotation.normalize();
  touch(id);
}

void Map::set_point_position(MapPointId id, const Vector3& position) {
  require_mutable("set_point_position");
  auto it = points_.find(id);
  if (it == points_.end()) throw std::out_of_range("unknown " + mp_name(id));
  it->second.position = position;
}

void Map::add_loop_edge(KeyFrameId a, KeyFrameId b) {
  require_mutable("add_loop_edge");
  if (!has_keyframe(a) || !has_keyframe(b) || a == b) {
    throw std::invalid_argument("add_loop_edge: bad keyframe pair");
  }
  loop_edges_.emplace(std::min(a, b), std::max(a, b));
}

int Map::covisibility_weight(KeyFrameId a, KeyFrameId b) const {
  auto it = counts_.find(a);
  if (it == counts_.end()) return 0;
  auto w = it->second.find(b);
  return w == it->second.end() ? 0 : w->second;
}

const std::map<KeyFrameId, int>& Map::covisibility_counts(KeyFrameId id) const {
  auto it = counts_.find(id);
  return it == counts_.end() ? empty_weights() : it->second;
}

std::vector<KeyFrameId> Map::covisible(KeyFrameId id, int min_weight) const {
  std::vector<std::pair<int, KeyFrameId>> ranked;
  for (const auto& [other, w] : covisibility_counts(id)) {
    if (w >= min_weight) ranked.emplace_back(-w, other);
  }
  std::sort(ranked.begin(), ranked.end());
  std::vector<KeyFrameId> out;
  out.reserve(ranked.size());
  for (const auto& [w, other] : ranked) out.push_back(other);
  return out;
}

const std::map<KeyFrameId, int>& Map::connections(KeyFrameId id) const {
  auto it = connections_.find(id);
  return it == connections_.end() ? empty_weights() : it->second;
}

std::vector<KeyFrameId> Map::connected(KeyFrameId id) const {
  std::vector<KeyFrameId> out;
  for (const auto& [other, w] : connections(id)) out.push_back(other);
  return out;
}

KeyFrameId Map::parent(KeyFrameId id) const {
  auto it = parent_.find(id);
  if (it == parent_.end()) throw std::out_of_range("unknown " + kf_name(id));
  return it->second;
}

std::vector<std::pair<KeyFrameId, KeyFrameId>> Map::essential_covisibility_edges() const {
  std::vector<std::pair<KeyFrameId, KeyFrameId>> out;
  for (const auto& [a, row] : counts_) {
    for (const auto& [b, w] : row) {
      if (a < b && w >= config_.essential_threshold) out.emplace_back(a, b);
    }
  }
  return out;
}

std::vector<MapPointId> Map::points_seen_by(const std::vector<KeyFrameId>& kfs) const {
  std::set<MapPointId> ids;
  for (KeyFrameId k : kfs) {
    for (MapPointId p : keyframe(k).associations) {
      if (p != kNoMapPoint) ids.insert(p);
    }
  }
  return {ids.begin(), ids.end()};
}

void Map::restage(KeyFrameId id) {
  const KeyFrame& kf = keyframes_.at(id);
  auto& slot = snapshots_[id];
  const std::uint64_t version = slot ? slot->version + 1 : 1;
  if (slot && slot.use_count() == 1) {
    ++snapshot_counters_.buffer_reuses;
  } else {
    slot = std::make_shared<KeyFrameSnapshot>();
  }
  pack_snapshot(kf, config_.grid_cols, config_.grid_rows, version, *slot);
  if (version > 1) ++snapshot_counters_.repacks;
  ++snapshot_counters_.stagings;
  staged_revision_[id] = revision_[id];
}

std::shared_ptr<const KeyFrameSnapshot> Map::snapshot(KeyFrameId id) {
  if (!has_keyframe(id)) throw std::out_of_range("unknown " + kf_name(id));
  if (staged_revision_.at(id) != revision_.at(id)) {
    require_mutable("snapshot restage");
    restage(id);
  }
  return snapshots_.at(id);
}

std::shared_ptr<const KeyFrameSnapshot> Map::snapshot(KeyFrameId id) const {
  if (!has_keyframe(id)) throw std::out_of_range("unknown " + kf_name(id));
  if (staged_revision_.at(id) != revision_.at(id)) {
    throw std::logic_error(kf_name(id) + ": stale snapshot outside a refresh point");
  }
  return snapshots_.at(id);
}

ReadPhase Map::freeze() {
  if (readers_ == 0) {
    for (const auto& [id, kf] : keyframes_) {
      if (staged_revision_.at(id) != revision_.at(id)) restage(id);
    }
  }
  return ReadPhase(this);
}

// --- audit ----------------------------------------------------------------------

AuditReport audit(const Map& map) {
  AuditReport report;
  auto fail = [&](const std::string& msg) { report.problems.push_back(msg); };

  std::map<KeyFrameId, std::map<KeyFrameId, int>> recount;
  for (const auto& [id, kf] : map.keyframes_) {
    if (kf.keypoints.size() != kf.descriptors.size() ||
        kf.associations.size() != kf.keypoints.size()) {
      fail(kf_name(id) + ": array sizes differ");
      continue;
    }
    for (std::size_t f = 0; f < kf.associations.size(); ++f) {
      const MapPointId p = kf.associations[f];
      if (p == kNoMapPoint) continue;
      auto it = map.points_.find(p);
      if (it == map.points_.end()) {
        fail(kf_name(id) + " references missing " + mp_name(p));
        continue;
      }
      if (it->second.replaced()) fail(kf_name(id) + " references replaced " + mp_name(p));
      auto obs = it->second.observations.find(id);
      if (obs == it->second.observations.end() || obs->second != f) {
        fail(kf_name(id) + " feature " + std::to_string(f) + " not mirrored by " + mp_name(p));
      }
    }
  }
  for (const auto& [id, p] : map.points_) {
    if (p.replaced()) {
      if (!p.observations.empty()) fail(mp_name(id) + " replaced but still observed");
      if (!map.points_.count(p.replaced_by)) fail(mp_name(id) + " forwards to a missing point");
    }
    if (!(p.d_min > 0.0 && p.d_min <= p.d_max)) fail(mp_name(id) + ": bad distance range");
    std::vector<KeyFrameId> observers;
    for (const auto& [kf, f] : p.observations) {
      auto it = map.keyframes_.find(kf);
      if (it == map.keyframes_.end()) {
        fail(mp_name(id) + " observed by missing " + kf_name(kf));
        continue;
      }
      if (f >= it->second.associations.size() || it->second.associations[f] != id) {
        fail(mp_name(id) + " observation in " + kf_name(kf) + " not mirrored");
      }
      observers.push_back(kf);
    }
    for (std::size_t i = 0; i < observers.size(); ++i) {
      for (std::size_t j = i + 1; j < observers.size(); ++j) {
        ++recount[observers[i]][observers[j]];
        ++recount[observers[j]][observers[i]];
      }
    }
  }
  for (const auto& [id, kf] : map.keyframes_) {
    const auto& stored = map.covisibility_counts(id);
    const auto& expected = recount.count(id) ? recount.at(id) : empty_weights();
    if (stored != expected) fail(kf_name(id) + ": covisibility counts differ from recount");
    for (const auto& [other, w] : map.connections(id)) {
      if (map.connections(other).count(id) == 0 || map.connections(other).at(id) != w) {
        fail(kf_name(id) + ": asymmetric connection to " + kf_name(other));
      }
    }
  }

  // Spanning tree: exactly one root, every chain of parents reaches it.
  int roots = 0;
  for (const auto& [id, kf] : map.keyframes_) {
    KeyFrameId cur = id;
    std::size_t steps = 0;
    while (true) {
      auto it = map.parent_.find(cur);
      if (it == map.parent_.end()) {
        fail(kf_name(cur) + " has no tree entry");
        break;
      }
      if (it->second == kNoKeyFrame) break;
      if (!map.keyframes_.count(it->second)) {
        fail(kf_name(cur) + " has a missing parent");
        break;
      }
      cur = it->second;
      if (++steps > map.keyframes_.size()) {
        fail("spanning tree cycle through " + kf_name(id));
        break;
      }
    }
    if (map.parent_.count(id) && map.parent_.at(id) == kNoKeyFrame) ++roots;
  }
  if (!map.keyframes_.empty() && roots != 1) {
    fail("spanning tree has " + std::to_string(roots) + " roots");
  }

  for (const auto& [id, kf] : map.keyframes_) {
    if (map.staged_revision_.at(id) != map.revision_.at(id)) continue;
    const auto& snap = *map.snapshots_.at(id);
    if (snap.pose.rotation.coeffs() != kf.pose.rotation.coeffs() ||
        snap.pose.translation != kf.pose.translation) {
      fail(kf_name(id) + ": snapshot pose is stale");
    }
    if (snap.associations != kf.associations) fail(kf_name(id) + ": snapshot associations are stale");
    if (snap.descriptors != kf.descriptors) fail(kf_name(id) + ": snapshot descriptors differ");
  }
  return report;
}

}  // namespace loopclose
