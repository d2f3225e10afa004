#pragma once

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace vesselnet {

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeError : Error { using Error::Error; };
struct AxisError : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };
struct ContractError : Error { using Error::Error; };
struct IngestError : Error { using Error::Error; };
struct FormatError : Error { using Error::Error; };
struct DegenerateError : Error { using Error::Error; };
struct NumericError : Error { using Error::Error; };

namespace detail {
inline int& thread_count_slot() {
    static int count = 0;  // 0 = unresolved
    return count;
}
}  // namespace detail

// Resolution order: set_thread_count() > VESSELNET_THREADS > hardware_concurrency.
inline int thread_count() {
    int& slot = detail::thread_count_slot();
    if (slot > 0) return slot;
    if (const char* env = std::getenv("VESSELNET_THREADS")) {
        int v = std::atoi(env);
        if (v > 0) { slot = v; return slot; }
    }
    unsigned hw = std::thread::hardware_concurrency();
    slot = hw > 0 ? static_cast<int>(hw) : 1;
    return slot;
}

inline void set_thread_count(int n) {
    detail::thread_count_slot() = std::max(1, n);
}

// Splits [0, n) into at most thread_count() contiguous chunks. Each index is
// processed exactly once by exactly one worker, so any computation whose
// per-index work is self-contained produces bitwise identical results for
// every thread count.
template <class F>
void parallel_for(std::int64_t n, F&& body) {
    if (n <= 0) return;
    int threads = std::min<std::int64_t>(thread_count(), n);
    if (threads <= 1) {
        body(std::int64_t{0}, n);
        return;
    }
    std::vector<std::thread> pool;
    pool.reserve(threads - 1);
    std::int64_t chunk = (n + threads - 1) / threads;
    for (int t = 1; t < threads; ++t) {
        std::int64_t lo = t * chunk;
        std::int64_t hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(std::int64_t{0}, std::min(n, chunk));
    for (auto& th : pool) th.join();
}

// Polynomial expf (Cephes coefficients), |rel err| < 2e-7 over the clamped
// range. Pure arithmetic, so it auto-vectorizes and stays bitwise
// reproducible; std::exp keeps that accuracy only at scalar call cost.
inline float fast_expf(float x) {
    x = std::min(88.72284f, std::max(x, -87.33655f));
    float z = x * 1.44269504088896341f;
    float n = std::floor(z + 0.5f);
    float r = x - n * 0.693359375f;
    r -= n * -2.12194440e-4f;
    float p = 1.9875691500e-4f;
    p = p * r + 1.3981999507e-3f;
    p = p * r + 8.3334519073e-3f;
    p = p * r + 4.1665795894e-2f;
    p = p * r + 1.6666665459e-1f;
    p = p * r + 5.0000001201e-1f;
    p = p * r * r + r + 1.0f;
    std::int32_t e = static_cast<std::int32_t>(n);
    float s = std::bit_cast<float>(static_cast<std::uint32_t>(e + 127) << 23);
    return p * s;
}

template <typename T>
inline T exp_scalar(T x) {
    return std::exp(x);
}
template <>
inline float exp_scalar<float>(float x) {
    return fast_expf(x);
}

// Numerically stable logistic function.
template <typename T>
inline T sigmoid_scalar(T x) {
    T e = exp_scalar<T>(x >= T(0) ? -x : x);
    T s = T(1) / (T(1) + e);
    return x >= T(0) ? s : T(1) - s;
}

}  // namespace vesselnet
