#include "loopclose/pipeline.hpp"

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

using namespace loopclose;

namespace {

template <typename F> int guarded(F&& f) {
  try {
    return f();
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"loopclose: loop closing over synthetic SLAM maps"};
  app.require_subcommand(1);

  // generate
  SyntheticWorldConfig wc;
  std::string shape = "circle";
  std::string world_out;
  auto* gen = app.add_subcommand("generate", "Generate a synthetic world with drift and revisits");
  gen->add_option("--shape", shape, "circle | figure-eight | corridor-return")->capture_default_str();
  gen->add_option("--poses", wc.poses, "Keyframe count")->capture_default_str();
  gen->add_option("--landmarks", wc.landmarks, "Landmark count")->capture_default_str();
  gen->add_option("--sigma-t", wc.sigma_t, "Odometry translation noise, m per step")->capture_default_str();
  gen->add_option("--sigma-r", wc.sigma_r, "Odometry rotation noise, rad per step")->capture_default_str();
  gen->add_option("--descriptor-noise", wc.descriptor_noise, "Bit-flip probability")->capture_default_str();
  gen->add_option("--visibility", wc.visibility_radius, "Landmark visibility radius, m")->capture_default_str();
  gen->add_option("--radius", wc.radius, "Shape radius, m")->capture_default_str();
  gen->add_option("--laps", wc.laps, "Laps around the shape")->capture_default_str();
  gen->add_option("--seed", wc.seed, "Random seed")->capture_default_str();
  gen->add_option("--out", world_out, "Output world JSON")->required();

  // run
  std::string world_in, report_out, plot_out, traj_out, gt_out;
  int workers = default_workers();
  int repeat = 1;
  bool no_detection = false;
  auto* run = app.add_subcommand("run", "Run the loop closing pipeline over a world");
  run->add_option("--world", world_in, "World JSON")->required();
  run->add_option("--workers", workers, "Worker count")->capture_default_str();
  run->add_option("--repeat", repeat, "Repetitions for mean and std")->capture_default_str();
  run->add_option("--report", report_out, "Report JSON");
  run->add_option("--plot", plot_out, "Trajectory SVG");
  run->add_option("--trajectory", traj_out, "Corrected trajectory, TUM text");
  run->add_option("--ground-truth", gt_out, "Ground-truth trajectory, TUM text");
  run->add_flag("--no-detection", no_detection, "Insert keyframes without loop detection");

  // bench
  std::vector<int> sizes{100, 500, 2000};
  std::vector<int> bench_workers{1, 2, 4, 8};
  std::string bench_out;
  int bench_repeat = 3;
  int per_pose = 30;
  auto* bench = app.add_subcommand("bench", "Scaling of fusion planning and graph optimization");
  bench->add_option("--sizes", sizes, "Pose counts, increasing")->delimiter(',')->capture_default_str();
  bench->add_option("--workers", bench_workers, "Worker counts")->delimiter(',')->capture_default_str();
  bench->add_option("--repeat", bench_repeat, "Timed repetitions per cell (median)")->capture_default_str();
  bench->add_option("--landmarks-per-pose", per_pose, "Landmarks per pose")->capture_default_str();
  bench->add_option("--out", bench_out, "Output CSV")->required();

  // ate
  std::string est_path, gt_path;
  bool no_align = false;
  auto* ate = app.add_subcommand("ate", "Absolute trajectory error between two TUM files");
  ate->add_option("--est", est_path, "Estimated trajectory")->required();
  ate->add_option("--gt", gt_path, "Ground-truth trajectory")->required();
  ate->add_flag("--no-align", no_align, "Skip rigid alignment");

  CLI11_PARSE(app, argc, argv);

  if (*gen) {
    return guarded([&] {
      wc.shape = parse_shape(shape);
      const SyntheticWorld world = generate_world(wc);
      save_world(world_out, world);
      std::printf("wrote %s: %zu keyframes, %zu map points, %zu loop labels\n", world_out.c_str(),
                  world.keyframes.size(), world.map_points.size(), world.loop_labels.size());
      return 0;
    });
  }
  if (*run) {
    return guarded([&] {
      const SyntheticWorld world = load_world(world_in);
      PipelineConfig pc;
      pc.workers = workers;
      pc.detection = !no_detection;
      const PipelineResult result = run_pipeline(world, pc, repeat);
      for (const auto& ev : result.run.loops) {
        std::printf("loop: keyframe %lld -> %lld, %d verified matches, %d fused, chi2 %.3g -> %.3g\n",
                    static_cast<long long>(ev.detection.current_kf_id),
                    static_cast<long long>(ev.detection.matched_kf_id), ev.detection.verified_matches,
                    ev.fusion.replaced, ev.initial_chi2, ev.final_chi2);
      }
      for (const auto& f : result.run.failures) {
        std::printf("failure at keyframe %lld (%s): %s\n", static_cast<long long>(f.keyframe),
                    f.stage.c_str(), f.message.c_str());
      }
      std::printf("ATE before %.4f m, after %.4f m\n", result.ate_before.rmse, result.ate_after.rmse);
      for (const char* stage : kStageNames) {
        const auto& s = result.timing.stages.at(stage);
        std::printf("%-20s %10.3f ms +- %.3f\n", stage, s.mean, s.stddev);
      }
      if (!report_out.empty()) {
        std::ofstream out(report_out);
        if (!out) throw std::runtime_error("cannot write " + report_out);
        write_report(out, world, pc, result);
      }
      if (!plot_out.empty()) {
        std::ofstream out(plot_out);
        if (!out) throw std::runtime_error("cannot write " + plot_out);
        write_trajectory_svg(out, world.ground_truth, world.drifted, result.run.corrected);
      }
      if (!traj_out.empty()) save_tum(traj_out, stamp_by_index(result.run.corrected));
      if (!gt_out.empty()) save_tum(gt_out, stamp_by_index(world.ground_truth));
      return 0;
    });
  }
  if (*bench) {
    return guarded([&] {
      const auto rows = bench_scaling(sizes, bench_workers, bench_repeat, per_pose);
      std::ofstream out(bench_out);
      if (!out) throw std::runtime_error("cannot write " + bench_out);
      write_scaling_csv(out, rows);
      write_scaling_csv(std::cout, rows);
      return 0;
    });
  }
  if (*ate) {
    return guarded([&] {
      const auto est = load_tum(est_path);
      const auto gt = load_tum(gt_path);
      std::vector<SE3Pose> e, g;
      for (const auto& p : est) e.push_back(p.pose);
      for (const auto& p : gt) g.push_back(p.pose);
      const AteResult r = compute_ate(e, g, !no_align);
      std::printf("ATE RMSE %.9f m over %zu poses (%s)\n", r.rmse, r.errors.size(),
                  no_align ? "unaligned" : "SE3-aligned");
      return 0;
    });
  }
  return 0;
}
