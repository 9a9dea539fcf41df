#include "kbl/parallel.hpp"

#include <atomic>

namespace kbl {

namespace {
std::atomic<int> g_threads{1};
}

int num_threads() { return g_threads.load(); }
void set_num_threads(int n) { g_threads.store(n < 1 ? 1 : n); }

}  // namespace kbl
