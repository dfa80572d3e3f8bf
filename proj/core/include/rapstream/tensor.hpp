#ifndef RAPSTREAM_TENSOR_HPP
#define RAPSTREAM_TENSOR_HPP

#include <cstdint>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include "rapstream/errors.hpp"

namespace rapstream::tensor {

template <typename S>
struct Tensor {
    std::vector<std::int64_t> shape;
    std::vector<S> v;

    Tensor() = default;
    explicit Tensor(std::vector<std::int64_t> dims) { resize(std::move(dims)); }

    void resize(std::vector<std::int64_t> dims) {
        shape = std::move(dims);
        v.assign(static_cast<std::size_t>(numel(shape)), S{0});
    }
    static std::int64_t numel(const std::vector<std::int64_t>& dims) {
        std::int64_t n = 1;
        for (std::int64_t d : dims) n *= d;
        return n;
    }
    std::int64_t numel() const { return static_cast<std::int64_t>(v.size()); }

    bool operator==(const Tensor&) const = default;
};

template <typename S>
struct NamedTensor {
    std::string name;
    Tensor<S> t;

    bool operator==(const NamedTensor&) const = default;
};

/// Threads used by parallel_for (0 = hardware concurrency). Results never
/// depend on this value; work items only write disjoint slices.
void set_max_threads(int n);
int max_threads();

/// Caps parallel_for to `n` threads on the current thread while alive
/// (latency-sensitive single-window decodes run serially).
class ThreadLimit {
public:
    explicit ThreadLimit(int n);
    ~ThreadLimit();
    ThreadLimit(const ThreadLimit&) = delete;
    ThreadLimit& operator=(const ThreadLimit&) = delete;

private:
    int previous_;
};

namespace detail {
int effective_threads(std::int64_t items);
}

template <typename F>
void parallel_for(std::int64_t items, F&& fn) {
    const int threads = detail::effective_threads(items);
    if (threads <= 1) {
        for (std::int64_t i = 0; i < items; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(static_cast<std::size_t>(threads));
    const std::int64_t chunk = (items + threads - 1) / threads;
    for (int t = 0; t < threads; ++t) {
        const std::int64_t lo = t * chunk;
        const std::int64_t hi = std::min(items, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn]() {
            for (std::int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (std::thread& th : pool) th.join();
}

/// SplitMix64 step; used to derive per-call RNG streams from (seed, counter).
std::uint64_t splitmix64(std::uint64_t& state);
std::uint64_t derive_stream(std::uint64_t seed, std::uint64_t counter);

}  // namespace rapstream::tensor

#endif
