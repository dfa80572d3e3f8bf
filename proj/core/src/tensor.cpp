#include "rapstream/tensor.hpp"

#include <algorithm>
#include <atomic>

namespace rapstream::tensor {

namespace {
std::atomic<int> g_max_threads{0};
thread_local int t_thread_limit = 0;  // 0: no per-thread cap
}

void set_max_threads(int n) { g_max_threads.store(n < 0 ? 0 : n); }

int max_threads() {
    const int configured = g_max_threads.load();
    if (configured > 0) return configured;
    const unsigned hw = std::thread::hardware_concurrency();
    return hw == 0 ? 1 : static_cast<int>(hw);
}

ThreadLimit::ThreadLimit(int n) : previous_(t_thread_limit) {
    t_thread_limit = n < 1 ? 1 : n;
}

ThreadLimit::~ThreadLimit() { t_thread_limit = previous_; }

namespace detail {
int effective_threads(std::int64_t items) {
    if (items < 2) return 1;
    int limit = max_threads();
    if (t_thread_limit > 0) limit = std::min(limit, t_thread_limit);
    return static_cast<int>(std::min<std::int64_t>(limit, items));
}
}  // namespace detail

std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9e3779b97f4a7c15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t counter) {
    std::uint64_t state = seed ^ (0xd1b54a32d192ed03ULL * (counter + 1));
    return splitmix64(state);
}

}  // namespace rapstream::tensor
