#include "loopclose/trajectory.hpp"

#include "support.hpp"

#include <doctest.h>

#include <sstream>

using namespace loopclose;
using namespace loopclose::testing;

namespace {

std::vector<SE3Pose> random_trajectory(std::mt19937_64& rng, std::size_t n) {
  std::vector<SE3Pose> out;
  for (std::size_t i = 0; i < n; ++i) out.push_back(random_se3(rng, 10.0));
  return out;
}

Vector3 center(const SE3Pose& p) { return p.inverse().translation; }

// Camera-centre RMSE after applying a known world transform to the estimate.
double rmse_under(const std::vector<SE3Pose>& est, const std::vector<SE3Pose>& gt,
                  const SE3Pose& align) {
  double sq = 0.0;
  for (std::size_t i = 0; i < est.size(); ++i) {
    sq += (align * center(est[i]) - center(gt[i])).squaredNorm();
  }
  return std::sqrt(sq / static_cast<double>(est.size()));
}

// Closed-form rigid fit via the cross-covariance SVD.
SE3Pose svd_fit(const std::vector<Vector3>& src, const std::vector<Vector3>& dst) {
  Vector3 ms = Vector3::Zero(), md = Vector3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) {
    ms += src[i];
    md += dst[i];
  }
  ms /= static_cast<double>(src.size());
  md /= static_cast<double>(dst.size());
  Matrix3 h = Matrix3::Zero();
  for (std::size_t i = 0; i < src.size(); ++i) h += (src[i] - ms) * (dst[i] - md).transpose();
  Eigen::JacobiSVD<Matrix3> svd(h, Eigen::ComputeFullU | Eigen::ComputeFullV);
  Matrix3 d = Matrix3::Identity();
  if ((svd.matrixV() * svd.matrixU().transpose()).determinant() < 0) d(2, 2) = -1.0;
  SE3Pose out;
  const Matrix3 r = svd.matrixV() * d * svd.matrixU().transpose();
  out.rotation = Quaternion(r);
  out.translation = md - r * ms;
  return out;
}

SE3Pose moved_world(const SE3Pose& pose, const SE3Pose& world_motion) {
  // Camera centre c -> M c: world-to-camera T -> T * M^-1.
  return compose(pose, world_motion.inverse());
}

}  // namespace

TEST_CASE("identical trajectories have zero error") {
  std::mt19937_64 rng(1);
  const auto gt = random_trajectory(rng, 50);
  CHECK(compute_ate(gt, gt).rmse < 1e-12);
  CHECK(compute_ate(gt, gt, false).rmse == 0.0);
}

TEST_CASE("a shifted copy aligns to zero and is 1 m off unaligned") {
  std::mt19937_64 rng(2);
  const auto gt = random_trajectory(rng, 50);
  SE3Pose shift;
  shift.translation = Vector3(1.0, 0.0, 0.0);
  std::vector<SE3Pose> est;
  for (const auto& p : gt) est.push_back(moved_world(p, shift));
  const AteResult aligned = compute_ate(est, gt);
  CHECK(aligned.aligned);
  CHECK(aligned.rmse < 1e-9);
  CHECK((aligned.alignment.translation - Vector3(-1.0, 0.0, 0.0)).norm() < 1e-9);
  const AteResult raw = compute_ate(est, gt, false);
  CHECK_FALSE(raw.aligned);
  CHECK(raw.rmse == doctest::Approx(1.0).epsilon(1e-12));
  for (double e : raw.errors) CHECK(e == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("ATE matches an independent evaluator") {
  std::mt19937_64 rng(3);
  for (int t = 0; t < 10; ++t) {
    const auto gt = random_trajectory(rng, 40);
    std::vector<SE3Pose> est;
    for (const auto& p : gt) {
      SE3Pose noisy = p;
      noisy.translation += random_vector(rng, 0.3);
      est.push_back(noisy);
    }
    std::vector<Vector3> src, dst;
    for (std::size_t i = 0; i < gt.size(); ++i) {
      src.push_back(center(est[i]));
      dst.push_back(center(gt[i]));
    }
    const SE3Pose fit = svd_fit(src, dst);
    const AteResult r = compute_ate(est, gt);
    CHECK(r.rmse == doctest::Approx(rmse_under(est, gt, fit)).epsilon(1e-12));
    CHECK(compute_ate(est, gt, false).rmse ==
          doctest::Approx(rmse_under(est, gt, SE3Pose{})).epsilon(1e-12));
    CHECK(sim3_distance(to_sim3(align_rigid(src, dst)), to_sim3(fit)) < 1e-9);
  }
}

TEST_CASE("aligned ATE is invariant to a rigid motion of the estimate") {
  std::mt19937_64 rng(4);
  const auto gt = random_trajectory(rng, 60);
  std::vector<SE3Pose> est;
  for (const auto& p : gt) {
    SE3Pose noisy = p;
    noisy.translation += random_vector(rng, 0.2);
    est.push_back(noisy);
  }
  const double base = compute_ate(est, gt).rmse;
  for (int t = 0; t < 5; ++t) {
    const SE3Pose m = random_se3(rng, 20.0);
    std::vector<SE3Pose> moved;
    for (const auto& p : est) moved.push_back(moved_world(p, m));
    CHECK(std::abs(compute_ate(moved, gt).rmse - base) < 1e-9);
  }
}

TEST_CASE("alignment does not absorb scale") {
  std::mt19937_64 rng(5);
  const auto gt = random_trajectory(rng, 30);
  std::vector<SE3Pose> est;
  for (const auto& p : gt) {
    SE3Pose scaled = p;
    scaled.translation *= 1.1;  // centres scaled by 1.1 about the origin
    est.push_back(scaled);
  }
  CHECK(compute_ate(est, gt).rmse > 0.1);
}

TEST_CASE("mismatched or empty trajectories are rejected") {
  std::mt19937_64 rng(6);
  const auto a = random_trajectory(rng, 5);
  const auto b = random_trajectory(rng, 6);
  CHECK_THROWS_AS(compute_ate(a, b), std::invalid_argument);
  CHECK_THROWS_AS(compute_ate({}, {}), std::invalid_argument);
  CHECK_THROWS_AS(align_rigid({Vector3::Zero()}, {}), std::invalid_argument);
}

TEST_CASE("TUM text round trip") {
  std::mt19937_64 rng(7);
  const auto poses = stamp_by_index(random_trajectory(rng, 25));
  CHECK(poses[3].timestamp == 3.0);
  std::stringstream ss;
  write_tum(ss, poses);
  const std::string text = ss.str();
  const auto back = read_tum(ss);
  REQUIRE(back.size() == poses.size());
  for (std::size_t i = 0; i < poses.size(); ++i) {
    CHECK(back[i].timestamp == poses[i].timestamp);
    CHECK(sim3_distance(to_sim3(back[i].pose), to_sim3(poses[i].pose)) < 1e-12);
  }

  // The file holds camera-to-world: first line translation is the camera centre.
  double ts, tx, ty, tz;
  std::istringstream lines(text);
  std::string line;
  while (std::getline(lines, line)) {
    if (line.empty() || line[0] == '#') continue;
    std::istringstream ls(line);
    ls >> ts >> tx >> ty >> tz;
    break;
  }
  CHECK((Vector3(tx, ty, tz) - center(poses[0].pose)).norm() < 1e-12);

  std::istringstream bad("0 1 2\n");
  CHECK_THROWS(read_tum(bad));
  std::istringstream comments("# only a comment\n\n");
  CHECK(read_tum(comments).empty());
}
