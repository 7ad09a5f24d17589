#pragma once

#include <chrono>
#include <cstddef>
#include <cstdint>
#include <span>
#include <thread>

namespace rpcfab {

/// Monotonic wall time in nanoseconds.
inline uint64_t now_ns() {
    return static_cast<uint64_t>(
        std::chrono::duration_cast<std::chrono::nanoseconds>(
            std::chrono::steady_clock::now().time_since_epoch())
            .count());
}

/// FNV-1a, 64 bit. This is the fixed hash used by the object-level load
/// balancer; the steering of a key must be identical on every host, so the
/// function is part of the wire contract and must not change.
inline uint64_t hash64(std::span<const uint8_t> bytes) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (uint8_t b : bytes) {
        h ^= b;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint32_t next_pow2(uint32_t v) {
    if (v <= 1) return 1;
    --v;
    v |= v >> 1;
    v |= v >> 2;
    v |= v >> 4;
    v |= v >> 8;
    v |= v >> 16;
    return v + 1;
}

/// Spin-wait helper for polling loops. On a loaded machine a raw spin
/// starves the peer thread, so yield to the scheduler every iteration.
inline void cpu_relax() {
    std::this_thread::yield();
}

}  // namespace rpcfab
