#include "loopclose/parallel.hpp"

#include <cstdlib>
#include <thread>

namespace loopclose {

namespace {

std::mutex& counters_mutex() {
  static std::mutex m;
  return m;
}

RuntimeCounters& counters() {
  static RuntimeCounters c;
  return c;
}

}  // namespace

int host_cores() {
  const int n = omp_get_num_procs();
  return n > 0 ? n : 1;
}

int default_workers() {
  if (const char* env = std::getenv("LOOPCLOSE_WORKERS")) {
    const int w = std::atoi(env);
    if (w > 0) return w;
  }
  return host_cores();
}

RuntimeCounters runtime_counters() {
  std::lock_guard lock(counters_mutex());
  return counters();
}

void reset_runtime_counters() {
  std::lock_guard lock(counters_mutex());
  counters() = RuntimeCounters{};
}

namespace detail {

void record_job(const std::string& name, double ms) {
  std::lock_guard lock(counters_mutex());
  auto& t = counters().jobs[name];
  ++t.invocations;
  t.total_ms += ms;
}

void record_staging(bool allocated, bool new_shape) {
  std::lock_guard lock(counters_mutex());
  if (allocated) {
    ++counters().staging_allocations;
  } else {
    ++counters().staging_reuses;
  }
  if (new_shape) ++counters().distinct_shapes;
}

std::string describe(std::exception_ptr e) {
  if (!e) return "unknown failure";
  try {
    std::rethrow_exception(e);
  } catch (const std::exception& ex) {
    return ex.what();
  } catch (...) {
    return "non-standard exception";
  }
}

}  // namespace detail

}  // namespace loopclose
