#include "krrmix/parallel.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <cstdlib>
#include <string>

namespace krrmix {

namespace {
std::atomic<int> g_threads{1};
}

int num_threads() { return g_threads.load(std::memory_order_relaxed); }

void set_num_threads(int n) {
  n = std::clamp(n, 1, std::max(1, omp_get_num_procs() * 4));
  g_threads.store(n, std::memory_order_relaxed);
}

int init_threads_from_env() {
  int n = 1;
  if (const char* env = std::getenv("KRRMIX_THREADS")) {
    try {
      n = std::stoi(env);
    } catch (...) {
      n = 1;
    }
  }
  set_num_threads(n);
  return num_threads();
}

}  // namespace krrmix
