#pragma once

#include <algorithm>
#include <atomic>
#include <cstddef>
#include <exception>
#include <mutex>
#include <thread>
#include <vector>

namespace mp {

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. Work items are claimed
/// from a shared counter; the first exception (lowest index) is rethrown after
/// all threads finish. jobs <= 1 runs inline in index order.
template <typename Fn>
void parallel_for(std::size_t n, std::size_t jobs, Fn&& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::exception_ptr first;
  std::size_t first_index = n;
  auto worker = [&] {
    for (std::size_t i; (i = next.fetch_add(1)) < n;) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < first_index) {
          first_index = i;
          first = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> threads;
  const std::size_t t = std::min(jobs, n);
  threads.reserve(t);
  for (std::size_t k = 0; k < t; ++k) threads.emplace_back(worker);
  for (auto& th : threads) th.join();
  if (first) std::rethrow_exception(first);
}

}  // namespace mp
