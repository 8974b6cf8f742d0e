// Kernel timings: linear-scan reference, serial executor and OpenMP workers.

#include "loopclose/pipeline.hpp"
#include "loopclose/reference.hpp"

#include "../tests/support.hpp"

#include <benchmark/benchmark.h>

using namespace loopclose;
using namespace loopclose::testing;

namespace {

Executor executor(int workers) { return workers <= 1 ? Executor::serial() : Executor::with_workers(workers); }

const ScalingWorkload& workload(int size) {
  static std::map<int, ScalingWorkload> cache;
  auto it = cache.find(size);
  if (it == cache.end()) it = cache.emplace(size, make_scaling_workload(size, 30 * size)).first;
  return it->second;
}

void BM_ProjectionSearchReference(benchmark::State& state) {
  const ProjectionScene s = make_projection_scene(1, static_cast<std::size_t>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        reference::projection_search(s.snapshot, s.pose, s.points, ProjectionSearchParams::narrow()));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_ProjectionSearch(benchmark::State& state) {
  const ProjectionScene s = make_projection_scene(1, static_cast<std::size_t>(state.range(0)));
  const Executor exec = executor(static_cast<int>(state.range(1)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(
        projection_search(s.snapshot, s.pose, s.points, ProjectionSearchParams::narrow(), exec));
  }
  state.SetItemsProcessed(state.iterations() * state.range(0));
}

void BM_VerifyTriple(benchmark::State& state) {
  const TripleScene s = make_triple_scene(1);
  const Executor exec = executor(static_cast<int>(state.range(0)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(verify_triple(s.snapshots, s.poses, s.points, ProjectionSearchParams::narrow(), exec));
  }
}

void BM_RefineSim3(benchmark::State& state) {
  const RefineScene s = make_refine_scene(1);
  const Executor exec = executor(static_cast<int>(state.range(0)));
  RefineConfig rc;
  rc.narrow.radius_multiplier = 60.0;
  for (auto _ : state) {
    benchmark::DoNotOptimize(refine_sim3(s.query, s.points, s.matched_pose, s.s_cm, rc, exec));
  }
}

void BM_PlanFusion(benchmark::State& state) {
  const ScalingWorkload& w = workload(static_cast<int>(state.range(0)));
  const Executor exec = executor(static_cast<int>(state.range(1)));
  for (auto _ : state) {
    benchmark::DoNotOptimize(plan_fusion(w.map, w.window, w.points, w.poses, ProjectionSearchParams::fusion(), exec));
  }
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.points.size() * w.window.size()));
}

void BM_Linearize(benchmark::State& state) {
  const ScalingWorkload& w = workload(static_cast<int>(state.range(0)));
  const Executor exec = executor(static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(linearize(w.graph, exec));
  state.SetItemsProcessed(state.iterations() * static_cast<std::int64_t>(w.graph.edges.size()));
}

void BM_Optimize(benchmark::State& state) {
  const ScalingWorkload& w = workload(static_cast<int>(state.range(0)));
  const Executor exec = executor(static_cast<int>(state.range(1)));
  for (auto _ : state) benchmark::DoNotOptimize(optimize(w.graph, {}, exec));
}

}  // namespace

BENCHMARK(BM_ProjectionSearchReference)->Arg(200)->Arg(2000)->UseRealTime();
BENCHMARK(BM_ProjectionSearch)->ArgsProduct({{200, 2000}, {1, 2, 4, 8}})->UseRealTime();
BENCHMARK(BM_VerifyTriple)->Arg(1)->Arg(8)->UseRealTime();
BENCHMARK(BM_RefineSim3)->Arg(1)->Arg(8)->UseRealTime();
BENCHMARK(BM_PlanFusion)->ArgsProduct({{100, 500}, {1, 8}})->Unit(benchmark::kMillisecond)->UseRealTime();
BENCHMARK(BM_Linearize)->ArgsProduct({{100, 500}, {1, 8}})->UseRealTime();
BENCHMARK(BM_Optimize)->ArgsProduct({{100}, {1, 8}})->Unit(benchmark::kMillisecond)->UseRealTime();

BENCHMARK_MAIN();
