#pragma once

#include <algorithm>
#include <condition_variable>
#include <cstddef>
#include <exception>
#include <functional>
#include <mutex>
#include <thread>
#include <vector>

namespace dpnet {

/// Fixed set of workers running index-parallel loops. Work items must write
/// to disjoint outputs; callers merge results in index order.
class ThreadPool {
 public:
  explicit ThreadPool(std::size_t threads = std::thread::hardware_concurrency()) {
    threads = std::max<std::size_t>(threads, 1);
    for (std::size_t i = 1; i < threads; ++i) {
      workers_.emplace_back([this] { worker_loop(); });
    }
  }

  ThreadPool(const ThreadPool&) = delete;
  ThreadPool& operator=(const ThreadPool&) = delete;

  ~ThreadPool() {
    {
      std::lock_guard lock(mu_);
      stop_ = true;
    }
    wake_.notify_all();
    for (auto& w : workers_) w.join();
  }

  std::size_t size() const { return workers_.size() + 1; }

  /// Runs fn(i) for i in [0, n). Rethrows the exception of the lowest failing index.
  void parallel_for(std::size_t n, const std::function<void(std::size_t)>& fn) {
    if (n == 0) return;
    if (workers_.empty() || n == 1) {
      for (std::size_t i = 0; i < n; ++i) fn(i);
      return;
    }
    std::vector<std::exception_ptr> errors(n);
    {
      std::lock_guard lock(mu_);
      job_ = &fn;
      errors_ = &errors;
      count_ = n;
      next_ = 0;
      active_ = workers_.size();
      ++generation_;
    }
    wake_.notify_all();
    run_items();
    {
      std::unique_lock lock(mu_);
      done_.wait(lock, [this] { return active_ == 0; });
      job_ = nullptr;
      errors_ = nullptr;
    }
    for (auto& e : errors) {
      if (e) std::rethrow_exception(e);
    }
  }

 private:
  void run_items() {
    for (;;) {
      std::size_t i;
      {
        std::lock_guard lock(mu_);
        if (next_ >= count_) return;
        i = next_++;
      }
      try {
        (*job_)(i);
      } catch (...) {
        (*errors_)[i] = std::current_exception();
      }
    }
  }

  void worker_loop() {
    std::size_t seen = 0;
    for (;;) {
      {
        std::unique_lock lock(mu_);
        wake_.wait(lock, [&] { return stop_ || generation_ != seen; });
        if (stop_) return;
        seen = generation_;
      }
      run_items();
      {
        std::lock_guard lock(mu_);
        if (--active_ == 0) done_.notify_one();
      }
    }
  }

  std::vector<std::thread> workers_;
  std::mutex mu_;
  std::condition_variable wake_;
  std::condition_variable done_;
  const std::function<void(std::size_t)>* job_ = nullptr;
  std::vector<std::exception_ptr>* errors_ = nullptr;
  std::size_t count_ = 0;
  std::size_t next_ = 0;
  std::size_t active_ = 0;
  std::size_t generation_ = 0;
  bool stop_ = false;
};

}  // namespace dpnet
