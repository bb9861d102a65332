#pragma once

#include <algorithm>
#include <atomic>
#include <condition_variable>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace lcforge::parallel {

// Work is always decomposed into caller-defined units whose outputs are
// disjoint; the thread count only changes which thread runs which unit,
// never the arithmetic. Reductions must use fixed-size chunks combined in
// chunk order by the caller (see kReduceChunk).
inline constexpr int64_t kReduceChunk = 16;

namespace detail {

inline int env_thread_cap() {
  const char* v = std::getenv("LCFORGE_THREADS");
  if (!v) return 0;
  int n = std::atoi(v);
  return n > 0 ? n : 0;
}

class Pool {
 public:
  static Pool& instance() {
    static Pool pool;
    return pool;
  }

  int threads() const { return threads_; }
  void set_threads(int n) { threads_ = std::max(1, n); }

  // Runs fn(lo, hi) over a partition of [0, n_units). fn for different
  // ranges must touch disjoint state. Nested calls execute inline.
  void run(int64_t n_units, const std::function<void(int64_t, int64_t)>& fn) {
    if (n_units <= 0) return;
    const int want = static_cast<int>(std::min<int64_t>(threads_, n_units));
    if (want <= 1 || in_parallel_region()) {
      fn(0, n_units);
      return;
    }
    in_parallel_region() = true;
    ensure_workers(want - 1);
    std::exception_ptr error;
    std::mutex error_mu;
    std::atomic<int> pending{want};
    {
      std::unique_lock lock(mu_);
      job_fn_ = [&](int part) {
        const int64_t lo = n_units * part / want;
        const int64_t hi = n_units * (part + 1) / want;
        try {
          if (lo < hi) fn(lo, hi);
        } catch (...) {
          std::lock_guard g(error_mu);
          if (!error) error = std::current_exception();
        }
        if (pending.fetch_sub(1) == 1) {
          std::lock_guard g(done_mu_);
          done_cv_.notify_all();
        }
      };
      job_parts_ = want - 1;  // workers take parts 1..want-1
      next_part_ = 1;
      ++generation_;
      cv_.notify_all();
    }
    job_fn_(0);  // caller thread takes part 0
    {
      std::unique_lock lock(done_mu_);
      done_cv_.wait(lock, [&] { return pending.load() == 0; });
    }
    {
      std::unique_lock lock(mu_);
      job_fn_ = nullptr;
    }
    in_parallel_region() = false;
    if (error) std::rethrow_exception(error);
  }

  static bool& in_parallel_region() {
    thread_local bool inside = false;
    return inside;
  }

 private:
  Pool() {
    int cap = env_thread_cap();
    unsigned hw = std::thread::hardware_concurrency();
    threads_ = static_cast<int>(hw ? hw : 1);
    if (cap > 0) threads_ = std::min(threads_, cap);
  }

  ~Pool() {
    {
      std::unique_lock lock(mu_);
      stop_ = true;
      cv_.notify_all();
    }
    for (auto& t : workers_) t.join();
  }

  void ensure_workers(int n) {
    std::unique_lock lock(mu_);
    while (static_cast<int>(workers_.size()) < n) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  void worker_loop() {
    uint64_t seen = 0;
    while (true) {
      std::function<void(int)> fn;
      int part = -1;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] {
          return stop_ || (job_fn_ && generation_ != seen && next_part_ <= job_parts_);
        });
        if (stop_) return;
        part = next_part_++;
        if (next_part_ > job_parts_) seen = generation_;
        fn = job_fn_;
      }
      in_parallel_region() = true;
      fn(part);
      in_parallel_region() = false;
    }
  }

  int threads_ = 1;
  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::function<void(int)> job_fn_;
  int job_parts_ = 0;
  int next_part_ = 0;
  uint64_t generation_ = 0;
  bool stop_ = false;
  std::mutex done_mu_;
  std::condition_variable done_cv_;
};

}  // namespace detail

inline int threads() { return detail::Pool::instance().threads(); }
inline void set_threads(int n) { detail::Pool::instance().set_threads(n); }

/// Partition [0, n_units) across the pool; fn(lo, hi) handles one range.
inline void run(int64_t n_units, const std::function<void(int64_t, int64_t)>& fn) {
  detail::Pool::instance().run(n_units, fn);
}

/// Number of fixed-size reduction chunks covering n items.
inline int64_t reduce_chunks(int64_t n) {
  return (n + kReduceChunk - 1) / kReduceChunk;
}

}  // namespace lcforge::parallel
