#include "loopclose/trajectory.hpp"

#include <Eigen/Geometry>

#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace loopclose {

SE3Pose align_rigid(const std::vector<Vector3>& src, const std::vector<Vector3>& dst) {
  if (src.size() != dst.size() || src.empty()) {
    throw std::invalid_argument("alignment needs two equal, non-empty point sets");
  }
  Eigen::Matrix<double, 3, Eigen::Dynamic> a(3, src.size());
  Eigen::Matrix<double, 3, Eigen::Dynamic> b(3, dst.size());
  for (std::size_t i = 0; i < src.size(); ++i) {
    a.col(static_cast<Eigen::Index>(i)) = src[i];
    b.col(static_cast<Eigen::Index>(i)) = dst[i];
  }
  // Umeyama without scale: SVD of the centred cross-covariance, reflection fixed.
  const Eigen::Matrix4d m = Eigen::umeyama(a, b, false);
  SE3Pose t;
  t.rotation = Quaternion(Matrix3(m.topLeftCorner<3, 3>())).normalized();
  t.translation = m.topRightCorner<3, 1>();
  return t;
}

AteResult compute_ate(const std::vector<SE3Pose>& estimated,
                      const std::vector<SE3Pose>& ground_truth, bool align) {
  if (estimated.size() != ground_truth.size()) {
    throw std::invalid_argument("trajectory lengths differ: " + std::to_string(estimated.size()) +
                                " vs " + std::to_string(ground_truth.size()));
  }
  if (estimated.empty()) throw std::invalid_argument("empty trajectories");
  std::vector<Vector3> est, gt;
  est.reserve(estimated.size());
  gt.reserve(ground_truth.size());
  for (const auto& p : estimated) est.push_back(p.center());
  for (const auto& p : ground_truth) gt.push_back(p.center());

  AteResult r;
  r.aligned = align;
  if (align) r.alignment = align_rigid(est, gt);
  double sum = 0.0;
  r.errors.reserve(est.size());
  for (std::size_t i = 0; i < est.size(); ++i) {
    const double e = ((align ? r.alignment * est[i] : est[i]) - gt[i]).norm();
    r.errors.push_back(e);
    sum += e * e;
  }
  r.rmse = std::sqrt(sum / static_cast<double>(est.size()));
  return r;
}

void write_tum(std::ostream& out, const std::vector<TimedPose>& poses) {
  out << "# timestamp tx ty tz qx qy qz qw\n" << std::setprecision(17);
  for (const auto& tp : poses) {
    const SE3Pose c = tp.pose.inverse();
    out << tp.timestamp << ' ' << c.translation.x() << ' ' << c.translation.y() << ' '
        << c.translation.z() << ' ' << c.rotation.x() << ' ' << c.rotation.y() << ' '
        << c.rotation.z() << ' ' << c.rotation.w() << '\n';
  }
}

std::vector<TimedPose> read_tum(std::istream& in) {
  std::vector<TimedPose> poses;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream fields(line);
    double ts, tx, ty, tz, qx, qy, qz, qw;
    if (!(fields >> ts >> tx >> ty >> tz >> qx >> qy >> qz >> qw)) {
      throw std::runtime_error("malformed trajectory line " + std::to_string(line_no));
    }
    SE3Pose c;
    c.rotation = Quaternion(qw, qx, qy, qz).normalized();
    c.translation = Vector3(tx, ty, tz);
    poses.push_back({ts, c.inverse()});
  }
  return poses;
}

void save_tum(const std::string& path, const std::vector<TimedPose>& poses) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path);
  write_tum(out, poses);
}

std::vector<TimedPose> load_tum(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path);
  return read_tum(in);
}

std::vector<TimedPose> stamp_by_index(const std::vector<SE3Pose>& poses) {
  std::vector<TimedPose> out;
  out.reserve(poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) out.push_back({static_cast<double>(i), poses[i]});
  return out;
}

}  // namespace loopclose
