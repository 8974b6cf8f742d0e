#include "loopclose/world.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <unordered_map>

namespace loopclose {

using nlohmann::json;

const char* to_string(TrajectoryShape shape) {
  switch (shape) {
    case TrajectoryShape::circle: return "circle";
    case TrajectoryShape::figure_eight: return "figure-eight";
    case TrajectoryShape::corridor_return: return "corridor-return";
  }
  return "unknown";
}

TrajectoryShape parse_shape(const std::string& name) {
  if (name == "circle") return TrajectoryShape::circle;
  if (name == "figure-eight" || name == "figure_eight") return TrajectoryShape::figure_eight;
  if (name == "corridor-return" || name == "corridor_return") return TrajectoryShape::corridor_return;
  throw std::invalid_argument("unknown trajectory shape '" + name + "'");
}

void SyntheticWorldConfig::validate() const {
  if (poses < 10) throw std::invalid_argument("world needs at least 10 poses");
  if (landmarks < 1) throw std::invalid_argument("world needs landmarks");
  if (!(sigma_t >= 0.0) || !(sigma_r >= 0.0) || !(pixel_noise >= 0.0)) {
    throw std::invalid_argument("noise levels must be >= 0");
  }
  if (!(descriptor_noise >= 0.0 && descriptor_noise <= 1.0) ||
      !(untracked_fraction >= 0.0 && untracked_fraction < 1.0)) {
    throw std::invalid_argument("descriptor noise must lie in [0, 1], untracked fraction in [0, 1)");
  }
  if (!(visibility_radius > 0.0) || !(radius > 0.0) || !(laps > 0.0)) {
    throw std::invalid_argument("radii and laps must be > 0");
  }
  if (!(scale_factor > 1.0) || levels < 1) throw std::invalid_argument("bad scale pyramid");
  if (!intrinsics.valid()) throw std::invalid_argument("bad intrinsics");
}

bool SyntheticWorld::near_loop_label(int i, int j, int slack) const {
  const int lo = std::min(i, j);
  const int hi = std::max(i, j);
  for (const auto& [a, b] : loop_labels) {
    if (std::abs(a - lo) <= slack && std::abs(b - hi) <= slack) return true;
  }
  return false;
}

Matrix3 left_looking_rotation(const Vector3& heading) {
  const Vector3 up = Vector3::UnitZ();
  const Vector3 h = heading.normalized();
  Matrix3 r;
  r.col(0) = h;
  r.col(1) = -up;
  r.col(2) = up.cross(h);
  return r;
}

namespace {

SE3Pose camera_at(const Vector3& position, const Vector3& heading) {
  const Matrix3 r_wc = left_looking_rotation(heading);
  SE3Pose pose;
  pose.rotation = Quaternion(Matrix3(r_wc.transpose())).normalized();
  pose.translation = -(r_wc.transpose() * position);
  return pose;
}

void shape_point(const SyntheticWorldConfig& c, double t, Vector3& p, Vector3& h) {
  const double r = c.radius;
  switch (c.shape) {
    case TrajectoryShape::circle: {
      const double a = 2.0 * M_PI * t;
      p = Vector3(r * std::cos(a), r * std::sin(a), 0.0);
      h = Vector3(-std::sin(a), std::cos(a), 0.0);
      return;
    }
    case TrajectoryShape::figure_eight: {
      // Two lobes touching at the origin, both left through it heading +x.
      const double circles = 2.0 * t;
      const double k = std::floor(circles);
      const double phi = 2.0 * M_PI * (circles - k);
      if (static_cast<long>(k) % 2 == 0) {
        p = Vector3(r * std::sin(phi), r - r * std::cos(phi), 0.0);
        h = Vector3(std::cos(phi), std::sin(phi), 0.0);
      } else {
        p = Vector3(r * std::sin(phi), -r + r * std::cos(phi), 0.0);
        h = Vector3(std::cos(phi), -std::sin(phi), 0.0);
      }
      return;
    }
    case TrajectoryShape::corridor_return: {
      // Out along one corridor wall, turn, back along the other, turn again.
      const double half = r;
      const double bend = r / 2.0;
      const double perimeter = 4.0 * half + 2.0 * M_PI * bend;
      double s = std::fmod(t * perimeter, perimeter);
      if (s < 2.0 * half) {
        p = Vector3(-half + s, -bend, 0.0);
        h = Vector3(1.0, 0.0, 0.0);
        return;
      }
      s -= 2.0 * half;
      if (s < M_PI * bend) {
        const double th = s / bend - M_PI / 2.0;
        p = Vector3(half + bend * std::cos(th), bend * std::sin(th), 0.0);
        h = Vector3(-std::sin(th), std::cos(th), 0.0);
        return;
      }
      s -= M_PI * bend;
      if (s < 2.0 * half) {
        p = Vector3(half - s, bend, 0.0);
        h = Vector3(-1.0, 0.0, 0.0);
        return;
      }
      s -= 2.0 * half;
      const double th = s / bend + M_PI / 2.0;
      p = Vector3(-half + bend * std::cos(th), bend * std::sin(th), 0.0);
      h = Vector3(-std::sin(th), std::cos(th), 0.0);
      return;
    }
  }
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Descriptor random_descriptor(std::mt19937_64& rng) {
  Descriptor d;
  for (std::size_t i = 0; i < d.size(); i += 8) {
    const std::uint64_t word = rng();
    for (std::size_t b = 0; b < 8; ++b) d[i + b] = static_cast<std::uint8_t>(word >> (8 * b));
  }
  return d;
}

Descriptor flip_bits(const Descriptor& base, double p, std::mt19937_64& rng) {
  Descriptor d = base;
  if (p <= 0.0) return d;
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  for (int bit = 0; bit < 256; ++bit) {
    if (uni(rng) < p) d[bit / 8] ^= static_cast<std::uint8_t>(1u << (bit % 8));
  }
  return d;
}

struct ActivePoint {
  MapPointId id = kNoMapPoint;
  int last_tracked = -1000;
};

}  // namespace

std::vector<SE3Pose> ground_truth_trajectory(const SyntheticWorldConfig& config) {
  std::vector<SE3Pose> poses;
  poses.reserve(config.poses);
  for (int i = 0; i < config.poses; ++i) {
    const double t = config.laps * i / (config.poses - 1);
    Vector3 p, h;
    shape_point(config, t, p, h);
    poses.push_back(camera_at(p, h));
  }
  return poses;
}

std::vector<SE3Pose> dead_reckon(const std::vector<SE3Pose>& ground_truth, double sigma_t,
                                 double sigma_r, std::uint64_t seed) {
  std::vector<SE3Pose> drifted;
  if (ground_truth.empty()) return drifted;
  std::mt19937_64 rng(mix_seed(seed, 1));
  std::normal_distribution<double> nt(0.0, 1.0);
  drifted.push_back(ground_truth.front());
  SE3Pose c_prev = ground_truth.front().inverse();  // camera-to-world
  for (std::size_t k = 1; k < ground_truth.size(); ++k) {
    const SE3Pose rel = compose(ground_truth[k - 1], ground_truth[k].inverse());
    Vector3 dt, dr;
    for (int a = 0; a < 3; ++a) dt(a) = sigma_t * nt(rng);
    for (int a = 0; a < 3; ++a) dr(a) = sigma_r * nt(rng);
    SE3Pose noise;
    noise.rotation = so3_exp<double>(dr);
    noise.translation = dt;
    c_prev = compose(compose(c_prev, rel), noise);
    drifted.push_back(c_prev.inverse());
  }
  return drifted;
}

std::vector<std::pair<int, int>> loop_labels(const std::vector<SE3Pose>& ground_truth) {
  const int n = static_cast<int>(ground_truth.size());
  std::vector<Vector3> centers;
  for (const auto& p : ground_truth) centers.push_back(p.center());
  std::vector<std::pair<int, int>> labels;
  for (int i = 0; i < n; ++i) {
    for (int j = i + 1; j < n; ++j) {
      if (4 * (j - i) > n && (centers[i] - centers[j]).norm() < 1.0) labels.emplace_back(i, j);
    }
  }
  return labels;
}

SyntheticWorld generate_world(const SyntheticWorldConfig& config) {
  config.validate();
  SyntheticWorld world;
  world.config = config;
  world.ground_truth = ground_truth_trajectory(config);
  world.drifted = dead_reckon(world.ground_truth, config.sigma_t, config.sigma_r, config.seed);
  world.loop_labels = loop_labels(world.ground_truth);
  if (world.loop_labels.empty()) {
    throw std::invalid_argument(std::string("a ") + to_string(config.shape) +
                                " world with these settings never revisits a place");
  }

  const CameraIntrinsics& cam = config.intrinsics;
  const int n = config.poses;
  const double d_max = config.visibility_radius;
  const double d_min = d_max / std::pow(config.scale_factor, config.levels - 1);
  std::mt19937_64 rng(mix_seed(config.seed, 2));
  std::uniform_real_distribution<double> uni(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);

  // Landmarks are placed inside the view of a random ground-truth pose.
  std::vector<Descriptor> base(config.landmarks);
  world.landmarks.reserve(config.landmarks);
  for (int l = 0; l < config.landmarks; ++l) {
    const int anchor = static_cast<int>(rng() % static_cast<std::uint64_t>(n));
    const Vector2 pixel(uni(rng) * cam.width, uni(rng) * cam.height);
    const double depth = d_min * 1.05 + uni(rng) * (0.95 * d_max - 1.05 * d_min);
    const Vector3 ray = unproject(cam, pixel, 1.0).normalized();
    world.landmarks.push_back(world.ground_truth[anchor].inverse() * (depth * ray));
    base[l] = random_descriptor(rng);
  }

  // Spatial hash on the ground plane so each keyframe only tests nearby landmarks.
  const double cell = d_max;
  auto cell_key = [&](double x, double y) {
    const auto cx = static_cast<std::int64_t>(std::floor(x / cell));
    const auto cy = static_cast<std::int64_t>(std::floor(y / cell));
    return (cx << 32) ^ (cy & 0xffffffff);
  };
  std::unordered_map<std::int64_t, std::vector<int>> grid;
  for (int l = 0; l < config.landmarks; ++l) {
    grid[cell_key(world.landmarks[l].x(), world.landmarks[l].y())].push_back(l);
  }

  std::vector<ActivePoint> active(config.landmarks);
  const double log_scale = std::log(config.scale_factor);
  for (int k = 0; k < n; ++k) {
    const SE3Pose& gt = world.ground_truth[k];
    const SE3Pose& dr = world.drifted[k];
    const Vector3 center_gt = gt.center();
    const Vector3 center_dr = dr.center();
    std::vector<int> nearby;
    const auto ccx = static_cast<std::int64_t>(std::floor(center_gt.x() / cell));
    const auto ccy = static_cast<std::int64_t>(std::floor(center_gt.y() / cell));
    for (std::int64_t dx = -1; dx <= 1; ++dx) {
      for (std::int64_t dy = -1; dy <= 1; ++dy) {
        auto it = grid.find(((ccx + dx) << 32) ^ ((ccy + dy) & 0xffffffff));
        if (it != grid.end()) nearby.insert(nearby.end(), it->second.begin(), it->second.end());
      }
    }
    std::sort(nearby.begin(), nearby.end());

    KeyFrame kf;
    kf.id = k;
    kf.pose = dr;
    kf.intrinsics = cam;
    for (int l : nearby) {
      const Vector3 x_gt = gt * world.landmarks[l];
      const double dist_gt = x_gt.norm();
      if (x_gt.z() <= kDepthEpsilon || dist_gt < d_min || dist_gt > d_max) continue;
      if (!project(cam, x_gt)) continue;
      const Vector2 noise(config.pixel_noise * gauss(rng), config.pixel_noise * gauss(rng));
      const bool untracked = uni(rng) < config.untracked_fraction;
      const Descriptor desc = flip_bits(base[l], config.descriptor_noise, rng);

      ActivePoint& act = active[l];
      bool reuse = false;
      Vector3 x_map = x_gt;
      if (act.id != kNoMapPoint && act.last_tracked >= k - 3) {
        const MapPoint& mp = world.map_points[act.id];
        const Vector3 ray = mp.position - center_dr;
        const Vector3 x = dr * mp.position;
        const double dist = ray.norm();
        if (ray.dot(mp.normal) >= config.reuse_cosine * dist && x.z() > kDepthEpsilon &&
            dist >= d_min && dist <= d_max && project(cam, x)) {
          reuse = true;
          x_map = x;
        }
      }
      const auto px = project_unbounded(cam, x_map);
      const Vector2 pixel = *px + noise;
      if (!cam.in_image(pixel.x(), pixel.y())) continue;

      const double dist_map = x_map.norm();
      const int octave = std::clamp(static_cast<int>(std::lround(std::log(d_max / dist_map) / log_scale)),
                                    0, config.levels - 1);
      const std::size_t feature = kf.keypoints.size();
      kf.keypoints.push_back({pixel.x(), pixel.y(), octave, 0.0});
      kf.descriptors.push_back(desc);
      kf.associations.push_back(kNoMapPoint);
      if (untracked) continue;

      if (!reuse) {
        MapPoint mp;
        mp.id = static_cast<MapPointId>(world.map_points.size());
        mp.position = dr.inverse() * x_gt;
        mp.normal = (mp.position - center_dr).normalized();
        mp.d_min = d_min;
        mp.d_max = d_max;
        mp.descriptor = desc;
        mp.reference_keyframe = k;
        world.map_points.push_back(mp);
        world.point_landmark.push_back(l);
        act.id = mp.id;
      }
      act.last_tracked = k;
      kf.associations[feature] = act.id;
    }
    world.keyframes.push_back(std::move(kf));
  }
  return world;
}

// --- JSON ---------------------------------------------------------------------------------

std::string descriptor_to_hex(const Descriptor& d) {
  static const char* digits = "0123456789abcdef";
  std::string out;
  out.reserve(64);
  for (std::uint8_t byte : d) {
    out.push_back(digits[byte >> 4]);
    out.push_back(digits[byte & 15]);
  }
  return out;
}

Descriptor descriptor_from_hex(const std::string& hex) {
  if (hex.size() != 64) throw std::invalid_argument("descriptor hex must have 64 digits");
  auto nibble = [](char c) -> int {
    if (c >= '0' && c <= '9') return c - '0';
    if (c >= 'a' && c <= 'f') return c - 'a' + 10;
    if (c >= 'A' && c <= 'F') return c - 'A' + 10;
    throw std::invalid_argument("bad hex digit in descriptor");
  };
  Descriptor d;
  for (std::size_t i = 0; i < 32; ++i) {
    d[i] = static_cast<std::uint8_t>(nibble(hex[2 * i]) * 16 + nibble(hex[2 * i + 1]));
  }
  return d;
}

namespace {

json pose_json(const SE3Pose& p) {
  return json::array({p.rotation.w(), p.rotation.x(), p.rotation.y(), p.rotation.z(),
                      p.translation.x(), p.translation.y(), p.translation.z()});
}

SE3Pose pose_from_json(const json& j) {
  SE3Pose p;
  p.rotation = Quaternion(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>(),
                          j.at(3).get<double>());
  p.translation = Vector3(j.at(4).get<double>(), j.at(5).get<double>(), j.at(6).get<double>());
  return p;
}

json vec_json(const Vector3& v) { return json::array({v.x(), v.y(), v.z()}); }
Vector3 vec_from_json(const json& j) {
  return Vector3(j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>());
}

json intrinsics_json(const CameraIntrinsics& k) {
  return {{"fx", k.fx}, {"fy", k.fy}, {"cx", k.cx}, {"cy", k.cy}, {"width", k.width},
          {"height", k.height}};
}

CameraIntrinsics intrinsics_from_json(const json& j) {
  CameraIntrinsics k;
  k.fx = j.at("fx");
  k.fy = j.at("fy");
  k.cx = j.at("cx");
  k.cy = j.at("cy");
  k.width = j.at("width");
  k.height = j.at("height");
  return k;
}

json config_json(const SyntheticWorldConfig& c) {
  return {{"shape", to_string(c.shape)},
          {"poses", c.poses},
          {"landmarks", c.landmarks},
          {"visibility_radius", c.visibility_radius},
          {"sigma_t", c.sigma_t},
          {"sigma_r", c.sigma_r},
          {"descriptor_noise", c.descriptor_noise},
          {"pixel_noise", c.pixel_noise},
          {"untracked_fraction", c.untracked_fraction},
          {"radius", c.radius},
          {"laps", c.laps},
          {"reuse_cosine", c.reuse_cosine},
          {"scale_factor", c.scale_factor},
          {"levels", c.levels},
          {"seed", c.seed},
          {"intrinsics", intrinsics_json(c.intrinsics)}};
}

SyntheticWorldConfig config_from_json(const json& j) {
  SyntheticWorldConfig c;
  c.shape = parse_shape(j.at("shape").get<std::string>());
  c.poses = j.at("poses");
  c.landmarks = j.at("landmarks");
  c.visibility_radius = j.at("visibility_radius");
  c.sigma_t = j.at("sigma_t");
  c.sigma_r = j.at("sigma_r");
  c.descriptor_noise = j.at("descriptor_noise");
  c.pixel_noise = j.at("pixel_noise");
  c.untracked_fraction = j.at("untracked_fraction");
  c.radius = j.at("radius");
  c.laps = j.at("laps");
  c.reuse_cosine = j.at("reuse_cosine");
  c.scale_factor = j.at("scale_factor");
  c.levels = j.at("levels");
  c.seed = j.at("seed");
  c.intrinsics = intrinsics_from_json(j.at("intrinsics"));
  return c;
}

constexpr int kWorldVersion = 1;

}  // namespace

void write_world(std::ostream& out, const SyntheticWorld& world) {
  json j;
  j["format"] = "loopclose-world";
  j["version"] = kWorldVersion;
  j["config"] = config_json(world.config);
  json gt = json::array();
  for (const auto& p : world.ground_truth) gt.push_back(pose_json(p));
  j["ground_truth"] = std::move(gt);
  json dr = json::array();
  for (const auto& p : world.drifted) dr.push_back(pose_json(p));
  j["drifted"] = std::move(dr);
  json lm = json::array();
  for (const auto& p : world.landmarks) lm.push_back(vec_json(p));
  j["landmarks"] = std::move(lm);

  json kfs = json::array();
  for (const auto& kf : world.keyframes) {
    json kps = json::array();
    for (const auto& kp : kf.keypoints) kps.push_back(json::array({kp.u, kp.v, kp.octave, kp.angle}));
    json descs = json::array();
    for (const auto& d : kf.descriptors) descs.push_back(descriptor_to_hex(d));
    kfs.push_back({{"id", kf.id},
                   {"pose", pose_json(kf.pose)},
                   {"intrinsics", intrinsics_json(kf.intrinsics)},
                   {"keypoints", std::move(kps)},
                   {"descriptors", std::move(descs)},
                   {"associations", kf.associations}});
  }
  j["keyframes"] = std::move(kfs);

  json mps = json::array();
  for (std::size_t i = 0; i < world.map_points.size(); ++i) {
    const MapPoint& p = world.map_points[i];
    mps.push_back({{"id", p.id},
                   {"position", vec_json(p.position)},
                   {"normal", vec_json(p.normal)},
                   {"d_min", p.d_min},
                   {"d_max", p.d_max},
                   {"descriptor", descriptor_to_hex(p.descriptor)},
                   {"reference_keyframe", p.reference_keyframe},
                   {"landmark", i < world.point_landmark.size() ? world.point_landmark[i] : -1}});
  }
  j["map_points"] = std::move(mps);
  json labels = json::array();
  for (const auto& [a, b] : world.loop_labels) labels.push_back(json::array({a, b}));
  j["loop_labels"] = std::move(labels);
  out << j.dump() << '\n';
}

SyntheticWorld read_world(std::istream& in) {
  json j;
  in >> j;
  if (j.value("format", std::string()) != "loopclose-world") {
    throw std::runtime_error("not a loopclose world file");
  }
  if (j.at("version").get<int>() != kWorldVersion) {
    throw std::runtime_error("unsupported world version " + j.at("version").dump());
  }
  SyntheticWorld world;
  world.config = config_from_json(j.at("config"));
  for (const auto& p : j.at("ground_truth")) world.ground_truth.push_back(pose_from_json(p));
  for (const auto& p : j.at("drifted")) world.drifted.push_back(pose_from_json(p));
  for (const auto& p : j.at("landmarks")) world.landmarks.push_back(vec_from_json(p));
  for (const auto& k : j.at("keyframes")) {
    KeyFrame kf;
    kf.id = k.at("id");
    kf.pose = pose_from_json(k.at("pose"));
    kf.intrinsics = intrinsics_from_json(k.at("intrinsics"));
    for (const auto& kp : k.at("keypoints")) {
      kf.keypoints.push_back({kp.at(0).get<double>(), kp.at(1).get<double>(), kp.at(2).get<int>(),
                              kp.at(3).get<double>()});
    }
    for (const auto& d : k.at("descriptors")) kf.descriptors.push_back(descriptor_from_hex(d));
    kf.associations = k.at("associations").get<std::vector<MapPointId>>();
    world.keyframes.push_back(std::move(kf));
  }
  for (const auto& m : j.at("map_points")) {
    MapPoint p;
    p.id = m.at("id");
    p.position = vec_from_json(m.at("position"));
    p.normal = vec_from_json(m.at("normal"));
    p.d_min = m.at("d_min");
    p.d_max = m.at("d_max");
    p.descriptor = descriptor_from_hex(m.at("descriptor"));
    p.reference_keyframe = m.at("reference_keyframe");
    world.point_landmark.push_back(m.at("landmark").get<std::int64_t>());
    world.map_points.push_back(std::move(p));
  }
  for (const auto& l : j.at("loop_labels")) world.loop_labels.emplace_back(l.at(0), l.at(1));
  return world;
}

void save_world(const std::string& path, const SyntheticWorld& world) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_world(out, world);
}

SyntheticWorld load_world(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_world(in);
}

}  // namespace loopclose
