#include "common.hpp"

#include <algorithm>
#include <cstdlib>

namespace tpd {

int max_threads() {
  static int cached = [] {
    if (const char* env = std::getenv("TPD_THREADS")) {
      int v = std::atoi(env);
      if (v >= 1) return std::min(v, 64);
    }
    unsigned hw = std::thread::hardware_concurrency();
    return int(std::min(4u, hw == 0 ? 1u : hw));
  }();
  return cached;
}

namespace {
thread_local bool g_in_worker = false;
}

void parallel_for(int64_t n, int64_t grain, const std::function<void(int64_t, int64_t)>& fn) {
  if (n <= 0) return;
  int threads = max_threads();
  if (g_in_worker || threads <= 1 || n <= grain) {
    fn(0, n);
    return;
  }
  int64_t chunks = std::min<int64_t>(threads, (n + grain - 1) / grain);
  if (chunks <= 1) {
    fn(0, n);
    return;
  }
  int64_t per = (n + chunks - 1) / chunks;
  std::vector<std::thread> pool;
  pool.reserve(size_t(chunks - 1));
  for (int64_t c = 1; c < chunks; ++c) {
    int64_t b = c * per, e = std::min(n, (c + 1) * per);
    if (b >= e) break;
    pool.emplace_back([&fn, b, e] {
      g_in_worker = true;
      fn(b, e);
      g_in_worker = false;
    });
  }
  {
    g_in_worker = true;
    fn(0, std::min(n, per));
    g_in_worker = false;
  }
  for (auto& t : pool) t.join();
}

}  // namespace tpd
