#include "xkt/parallel.hpp"

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>
#include <thread>
#include <vector>

namespace xkt {

namespace {

std::size_t detect_threads() {
  std::size_t n = 0;
  if (const char* env = std::getenv("XKT_THREADS")) {
    try {
      n = static_cast<std::size_t>(std::stoul(env));
    } catch (...) {
      n = 0;
    }
  }
  if (n == 0) n = std::max(1u, std::thread::hardware_concurrency());
  return n;
}

std::atomic<std::size_t>& thread_setting() {
  static std::atomic<std::size_t> value{detect_threads()};
  return value;
}

}  // namespace

std::size_t worker_threads() { return thread_setting().load(); }

void set_worker_threads(std::size_t n) {
  thread_setting().store(n == 0 ? std::max(1u, std::thread::hardware_concurrency()) : n);
}

void parallel_for(std::size_t n, std::size_t min_chunk,
                  const std::function<void(std::size_t, std::size_t)>& body) {
  std::size_t threads = std::min(worker_threads(), n / std::max<std::size_t>(min_chunk, 1));
  if (threads <= 1) {
    if (n) body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(threads - 1);
  std::size_t chunk = (n + threads - 1) / threads;
  for (std::size_t t = 1; t < threads; ++t) {
    std::size_t begin = t * chunk;
    std::size_t end = std::min(n, begin + chunk);
    if (begin >= end) break;
    pool.emplace_back([&body, begin, end] { body(begin, end); });
  }
  body(0, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace xkt
