#pragma once

// Execution substrate: task pairs and data-parallel batches on OpenMP worker
// teams, plus reusable staging buffers. This is the only module that touches
// threads or synchronisation. Every job is deterministic: outputs never depend
// on the worker count or on how indices are chunked.

#include <algorithm>
#include <chrono>
#include <cstddef>
#include <cstdint>
#include <exception>
#include <functional>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <omp.h>

namespace loopclose {

/// Worker count used when a caller does not specify one. Reads the
/// LOOPCLOSE_WORKERS environment variable, else the host core count.
int default_workers();
int host_cores();

struct Executor {
  int workers = default_workers();
  std::size_t chunk = 0;  // 0: static ceil(n / workers) blocks

  static Executor serial() { return Executor{1, 0}; }
  static Executor with_workers(int w) { return Executor{w < 1 ? 1 : w, 0}; }
};

struct JobError {
  std::string job;
  std::size_t index = 0;  // offending element, or side (0 = a, 1 = b) for pairs
  std::string message;
};

template <typename T> struct BatchResult {
  std::vector<T> output;
  std::optional<JobError> error;
  bool ok() const { return !error.has_value(); }
};

template <typename A, typename B> struct PairResult {
  std::optional<A> a;
  std::optional<B> b;
  std::optional<JobError> error;  // index 0 names side a, 1 names side b
  bool ok() const { return !error.has_value(); }
};

// --- counters -------------------------------------------------------------

struct JobTiming {
  std::uint64_t invocations = 0;
  double total_ms = 0.0;
};

struct RuntimeCounters {
  std::uint64_t staging_allocations = 0;
  std::uint64_t staging_reuses = 0;
  std::uint64_t distinct_shapes = 0;
  std::map<std::string, JobTiming> jobs;
};

RuntimeCounters runtime_counters();
void reset_runtime_counters();

namespace detail {
void record_job(const std::string& name, double ms);
void record_staging(bool allocated, bool new_shape);
std::string describe(std::exception_ptr e);
}  // namespace detail

// --- batch ------------------------------------------------------------------

/// output[i] = f(i) for i in [0, n). The first failing index (lowest) is
/// reported; the rest of the batch still runs to keep timing comparable.
template <typename T, typename F>
BatchResult<T> run_batch(std::size_t n, F&& f, const Executor& exec = {},
                         const std::string& name = "batch") {
  const auto t0 = std::chrono::steady_clock::now();
  BatchResult<T> result;
  result.output.resize(n);
  const int workers = exec.workers < 1 ? 1 : exec.workers;
  constexpr std::size_t kNone = std::numeric_limits<std::size_t>::max();
  std::vector<std::size_t> failed(static_cast<std::size_t>(workers), kNone);
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(workers));
  const auto count = static_cast<std::int64_t>(n);
  const auto chunk = static_cast<int>(exec.chunk);

  auto body = [&](std::int64_t i) {
    const int tid = omp_get_thread_num();
    try {
      result.output[static_cast<std::size_t>(i)] = f(static_cast<std::size_t>(i));
    } catch (...) {
      auto& slot = failed[static_cast<std::size_t>(tid)];
      if (static_cast<std::size_t>(i) < slot) {
        slot = static_cast<std::size_t>(i);
        errors[static_cast<std::size_t>(tid)] = std::current_exception();
      }
    }
  };

  if (workers == 1 || n < 2) {
    for (std::int64_t i = 0; i < count; ++i) body(i);
  } else if (chunk > 0) {
#pragma omp parallel for num_threads(workers) schedule(static, chunk)
    for (std::int64_t i = 0; i < count; ++i) body(i);
  } else {
#pragma omp parallel for num_threads(workers) schedule(static)
    for (std::int64_t i = 0; i < count; ++i) body(i);
  }

  std::size_t worst = kNone;
  std::exception_ptr cause;
  for (std::size_t w = 0; w < failed.size(); ++w) {
    if (failed[w] < worst) {
      worst = failed[w];
      cause = errors[w];
    }
  }
  if (worst != kNone) result.error = JobError{name, worst, detail::describe(cause)};
  detail::record_job(name, std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - t0).count());
  return result;
}

// --- pair -------------------------------------------------------------------

/// Runs two independent tasks over shared immutable input. Each task receives
/// an executor with half the workers for its own inner batches. Outputs land in
/// separate slots; when either side throws, both outputs are discarded.
template <typename A, typename B, typename FA, typename FB>
PairResult<A, B> run_pair(FA&& task_a, FB&& task_b, const Executor& exec = {},
                          const std::string& name = "pair") {
  const auto t0 = std::chrono::steady_clock::now();
  std::optional<A> out_a;
  std::optional<B> out_b;
  std::exception_ptr err_a;
  std::exception_ptr err_b;
  const int workers = exec.workers < 1 ? 1 : exec.workers;
  Executor inner_a = Executor::with_workers(workers / 2 > 0 ? (workers + 1) / 2 : 1);
  Executor inner_b = Executor::with_workers(workers / 2 > 0 ? workers / 2 : 1);
  inner_a.chunk = exec.chunk;
  inner_b.chunk = exec.chunk;

  auto side_a = [&] {
    try {
      out_a.emplace(task_a(inner_a));
    } catch (...) {
      err_a = std::current_exception();
    }
  };
  auto side_b = [&] {
    try {
      out_b.emplace(task_b(inner_b));
    } catch (...) {
      err_b = std::current_exception();
    }
  };

  if (workers == 1) {
    side_a();
    side_b();
  } else {
    const int saved_levels = omp_get_max_active_levels();
    omp_set_max_active_levels(2);
#pragma omp parallel sections num_threads(2)
    {
#pragma omp section
      side_a();
#pragma omp section
      side_b();
    }
    omp_set_max_active_levels(saved_levels);
  }

  PairResult<A, B> result;
  if (err_a) {
    result.error = JobError{name, 0, "task a failed: " + detail::describe(err_a)};
  } else if (err_b) {
    result.error = JobError{name, 1, "task b failed: " + detail::describe(err_b)};
  } else {
    result.a = std::move(out_a);
    result.b = std::move(out_b);
  }
  detail::record_job(name, std::chrono::duration<double, std::milli>(
                               std::chrono::steady_clock::now() - t0).count());
  return result;
}

// --- staging ----------------------------------------------------------------

/// Preallocated, reusable packing buffer. Capacity grows in powers of two;
/// each capacity class counts as one shape and is allocated at most once.
template <typename T> class StagingBuffer {
 public:
  StagingBuffer() = default;
  explicit StagingBuffer(std::size_t capacity) { grow(capacity); }

  StagingBuffer(const StagingBuffer&) = delete;
  StagingBuffer& operator=(const StagingBuffer&) = delete;
  StagingBuffer(StagingBuffer&&) noexcept = default;
  StagingBuffer& operator=(StagingBuffer&&) noexcept = default;

  /// Packs `payload` contiguously and returns a view of the staged copy.
  std::span<const T> stage(std::span<const T> payload) {
    std::span<T> dst = acquire(payload.size());
    std::copy(payload.begin(), payload.end(), dst.begin());
    return dst;
  }

  /// Reserves `n` slots for in-place packing; contents must be overwritten.
  std::span<T> acquire(std::size_t n) {
    if (n > storage_.size()) {
      grow(n);
    } else {
      ++reuses_;
      detail::record_staging(false, false);
    }
    size_ = n;
    high_water_ = std::max(high_water_, n);
    return std::span<T>(storage_.data(), n);
  }

  std::span<const T> view() const { return std::span<const T>(storage_.data(), size_); }
  std::size_t capacity() const { return storage_.size(); }
  std::size_t high_water_mark() const { return high_water_; }
  std::uint64_t reuse_count() const { return reuses_; }
  std::uint64_t allocation_count() const { return allocations_; }

 private:
  void grow(std::size_t n) {
    std::size_t cap = 1;
    while (cap < n) cap <<= 1;
    storage_.assign(cap, T{});
    ++allocations_;
    detail::record_staging(true, true);
  }

  std::vector<T> storage_;
  std::size_t size_ = 0;
  std::size_t high_water_ = 0;
  std::uint64_t reuses_ = 0;
  std::uint64_t allocations_ = 0;
};

}  // namespace loopclose
