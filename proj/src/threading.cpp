#include "fb/threading.hpp"

#include <atomic>
#include <condition_variable>
#include <cstdlib>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace fb {

int worker_count() {
  static const int n = [] {
    if (const char* env = std::getenv("FB_THREADS")) {
      const long v = std::strtol(env, nullptr, 10);
      if (v >= 1) return static_cast<int>(v);
    }
    const unsigned hw = std::thread::hardware_concurrency();
    return hw > 0 ? static_cast<int>(hw) : 1;
  }();
  return n;
}

namespace {

thread_local bool inside_parallel_for = false;

// Minimal persistent pool. One task at a time; items are claimed through an
// atomic cursor so the item->computation mapping is independent of which
// worker runs it.
class Pool {
 public:
  explicit Pool(int workers) {
    for (int i = 0; i < workers; ++i) {
      threads_.emplace_back([this] { worker_loop(); });
    }
  }

  ~Pool() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    for (auto& t : threads_) t.join();
  }

  void run(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
    std::unique_lock<std::mutex> lk(mu_);
    fn_ = &fn;
    total_ = n;
    cursor_.store(0, std::memory_order_relaxed);
    pending_ = static_cast<int>(threads_.size());
    ++generation_;
    cv_.notify_all();
    done_cv_.wait(lk, [this] { return pending_ == 0; });
    fn_ = nullptr;
    if (error_) {
      auto e = error_;
      error_ = nullptr;
      std::rethrow_exception(e);
    }
  }

 private:
  void worker_loop() {
    inside_parallel_for = true;  // nested parallel_for on a worker runs inline
    std::uint64_t seen = 0;
    for (;;) {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || generation_ != seen; });
      if (stop_) return;
      seen = generation_;
      auto* fn = fn_;
      auto total = total_;
      lk.unlock();

      for (;;) {
        const std::int64_t i = cursor_.fetch_add(1, std::memory_order_relaxed);
        if (i >= total) break;
        try {
          (*fn)(i);
        } catch (...) {
          std::lock_guard<std::mutex> g(mu_);
          if (!error_) error_ = std::current_exception();
        }
      }

      lk.lock();
      if (--pending_ == 0) done_cv_.notify_all();
    }
  }

  std::mutex mu_;
  std::condition_variable cv_, done_cv_;
  std::vector<std::thread> threads_;
  const std::function<void(std::int64_t)>* fn_ = nullptr;
  std::int64_t total_ = 0;
  std::atomic<std::int64_t> cursor_{0};
  std::uint64_t generation_ = 0;
  int pending_ = 0;
  bool stop_ = false;
  std::exception_ptr error_;
};

}  // namespace

void parallel_for(std::int64_t n, const std::function<void(std::int64_t)>& fn) {
  if (n <= 0) return;
  const int workers = worker_count();
  if (workers <= 1 || n == 1 || inside_parallel_for) {
    // Nested calls run inline; only the outermost level fans out.
    for (std::int64_t i = 0; i < n; ++i) fn(i);
    return;
  }
  inside_parallel_for = true;
  static Pool pool(worker_count());
  try {
    pool.run(n, fn);
  } catch (...) {
    inside_parallel_for = false;
    throw;
  }
  inside_parallel_for = false;
}

}  // namespace fb
