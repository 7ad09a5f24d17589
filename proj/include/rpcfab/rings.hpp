#pragma once

#include <atomic>
#include <cassert>
#include <cmath>
#include <cstdint>
#include <memory>
#include <optional>
#include <span>
#include <vector>

#include "rpcfab/util.hpp"
#include "rpcfab/wire.hpp"

// Per-flow RX/TX rings shared between an application thread and the NIC
// context. Transfer is polling based: the producer publishes an entry by
// bumping its phase byte with release ordering, the consumer detects the
// change and reads the 64-byte entry. There are no notifications.
//
// Each ring direction is strictly single-producer/single-consumer:
//   TX: application produces, NIC consumes (and returns free slot ids).
//   RX: NIC produces, application consumes.
//
// Phase bytes wrap at 256. A consumer can only miss a wrap if a slot is
// reused 256 times between two observations, which cannot happen because
// reuse is gated on the consumer itself (TX: the NIC frees slots it
// fetched; RX: the producer blocks on the consumer's head).

namespace rpcfab::ring {

struct alignas(64) Slot {
    wire::FrameBytes bytes{};
    std::atomic<uint8_t> phase{0};
};

/// Fixed-capacity SPSC queue of slot indices (the free-slot channel).
class SpscIndexQueue {
  public:
    explicit SpscIndexQueue(uint32_t capacity)
        : mask_(next_pow2(capacity + 1) - 1), buf_(mask_ + 1) {}

    bool push(uint32_t v) {  // producer side
        const uint64_t t = tail_.load(std::memory_order_relaxed);
        if (t - head_.load(std::memory_order_acquire) > mask_) return false;
        buf_[t & mask_] = v;
        tail_.store(t + 1, std::memory_order_release);
        return true;
    }

    std::optional<uint32_t> pop() {  // consumer side
        const uint64_t h = head_.load(std::memory_order_relaxed);
        if (h == tail_.load(std::memory_order_acquire)) return std::nullopt;
        uint32_t v = buf_[h & mask_];
        head_.store(h + 1, std::memory_order_release);
        return v;
    }

    /// Exact from the consumer side, conservative from elsewhere.
    uint64_t size() const {
        return tail_.load(std::memory_order_acquire) - head_.load(std::memory_order_acquire);
    }

  private:
    alignas(64) std::atomic<uint64_t> head_{0};
    alignas(64) std::atomic<uint64_t> tail_{0};
    const uint32_t mask_;
    std::vector<uint32_t> buf_;
};

struct RingConfig {
    double target_throughput_per_flow = 12.4e6;  // requests/sec
    uint32_t batch = 4;                          // B, entries per NIC fetch
    uint32_t mean_rpc_frames = 1;                // frames per message estimate
    uint32_t max_outstanding = 128;
};

/// TX sizing: max(B, ceil(thr * 0.8 / 1e6)) * mean frames. The 0.8 factor
/// is the slot hold time in microseconds (400 ns fetch + 400 ns free-slot
/// bookkeeping). Capped at 255: the one-byte phase counter requires fewer
/// than 256 slot reuses between consumer observations.
inline uint32_t tx_capacity_for(const RingConfig& cfg) {
    const auto sized =
        static_cast<uint32_t>(std::ceil(cfg.target_throughput_per_flow * 0.8 / 1e6));
    const uint32_t cap =
        std::max(cfg.batch, std::max(sized, 1u)) * std::max(cfg.mean_rpc_frames, 1u);
    return std::min(cap, 255u);
}

/// RX sizing: B * mean frames, rounded up to a power of two for masking.
inline uint32_t rx_capacity_for(const RingConfig& cfg) {
    return next_pow2(std::max(cfg.batch, 1u) * std::max(cfg.mean_rpc_frames, 1u));
}

/// Application -> NIC ring. The application acquires a free slot, writes
/// the frame and publishes it; the NIC polls slots in circular order,
/// forwards them and returns the slot ids once its bookkeeping is done.
class TxRing {
  public:
    explicit TxRing(uint32_t capacity)
        : cap_(capacity), slots_(capacity), seen_(capacity, 0), inflight_(capacity),
          free_(capacity) {
        assert(capacity >= 1 && capacity < 256);
        for (uint32_t i = 0; i < capacity; ++i) {
            free_.push(i);
            inflight_[i].store(0, std::memory_order_relaxed);
        }
    }

    // -- application (producer) side --

    /// Writes the frame into a free slot. Returns the slot id, or nullopt
    /// when the ring is full (caller back-pressures).
    std::optional<uint32_t> push(const wire::FrameBytes& frame) {
        auto slot = free_.pop();
        if (!slot) return std::nullopt;
        Slot& s = slots_[*slot];
        uint8_t was = inflight_[*slot].exchange(1, std::memory_order_relaxed);
        assert(was == 0 && "slot granted while still in flight");
        (void)was;
        s.bytes = frame;
        s.phase.store(static_cast<uint8_t>(s.phase.load(std::memory_order_relaxed) + 1),
                      std::memory_order_release);
        return *slot;
    }

    /// Free slots as seen by the producer (exact; only the NIC adds).
    uint32_t free_count() const { return static_cast<uint32_t>(free_.size()); }

    // -- NIC (consumer) side --

    struct Fetch {
        uint32_t slot;
        wire::FrameBytes bytes;
    };

    /// Returns up to out.size() newly published entries in push order.
    /// Does not free them; the caller must release() each slot exactly once.
    std::size_t poll(std::span<Fetch> out) {
        std::size_t n = 0;
        while (n < out.size()) {
            Slot& s = slots_[cursor_];
            const uint8_t p = s.phase.load(std::memory_order_acquire);
            if (p == seen_[cursor_]) break;  // frontier: nothing new at cursor
            seen_[cursor_] = p;
            out[n].slot = cursor_;
            out[n].bytes = s.bytes;
            ++n;
            cursor_ = cursor_ + 1 == cap_ ? 0 : cursor_ + 1;
        }
        return n;
    }

    /// Returns slot ids to the free channel. Double release is a usage bug.
    void release(std::span<const uint32_t> slot_ids) {
        for (uint32_t id : slot_ids) {
            assert(id < cap_);
            uint8_t was = inflight_[id].exchange(0, std::memory_order_relaxed);
            assert(was == 1 && "double release of a tx slot");
            (void)was;
            bool ok = free_.push(id);
            assert(ok && "free channel overflow");
            (void)ok;
        }
    }

    uint32_t capacity() const { return cap_; }

  private:
    const uint32_t cap_;
    std::vector<Slot> slots_;
    std::vector<uint8_t> seen_;  // NIC-side last observed phase per slot
    uint32_t cursor_ = 0;        // NIC-side circular scan position
    std::vector<std::atomic<uint8_t>> inflight_;
    SpscIndexQueue free_;  // NIC produces, application consumes
};

/// NIC -> application ring. Classic in-order SPSC; the consumer detects new
/// entries purely by the phase byte of the head slot (phase for lap L is
/// L+1 mod 256), the producer respects the consumer's published head.
class RxRing {
  public:
    explicit RxRing(uint32_t capacity) : cap_(capacity), slots_(capacity) {
        assert(capacity >= 1 && (capacity & (capacity - 1)) == 0);
    }

    // -- NIC (producer) side --

    /// Appends frames until the ring fills; returns how many were accepted.
    std::size_t push(std::span<const wire::FrameBytes> frames) {
        std::size_t n = 0;
        for (const auto& fb : frames) {
            if (tail_ - head_pub_.load(std::memory_order_acquire) >= cap_) break;
            Slot& s = slots_[tail_ & (cap_ - 1)];
            s.bytes = fb;
            s.phase.store(static_cast<uint8_t>(tail_ / cap_ + 1), std::memory_order_release);
            ++tail_;
            ++n;
        }
        return n;
    }

    /// Space currently available to the producer.
    uint32_t space() const {
        return cap_ - static_cast<uint32_t>(tail_ - head_pub_.load(std::memory_order_acquire));
    }

    // -- application (consumer) side --

    /// Drains up to out.size() frames in FIFO order.
    std::size_t poll(std::span<wire::FrameBytes> out) {
        std::size_t n = 0;
        while (n < out.size()) {
            Slot& s = slots_[head_ & (cap_ - 1)];
            const uint8_t expect = static_cast<uint8_t>(head_ / cap_ + 1);
            if (s.phase.load(std::memory_order_acquire) != expect) break;
            out[n] = s.bytes;
            ++n;
            ++head_;
        }
        if (n) head_pub_.store(head_, std::memory_order_release);
        return n;
    }

    uint32_t capacity() const { return cap_; }

  private:
    const uint32_t cap_;
    std::vector<Slot> slots_;
    uint64_t tail_ = 0;  // producer-local monotonic count
    uint64_t head_ = 0;  // consumer-local monotonic count
    alignas(64) std::atomic<uint64_t> head_pub_{0};
};

/// The per-flow pair shared between one application thread and the NIC.
struct RingPair {
    uint32_t flow_id;
    TxRing tx;
    RxRing rx;

    RingPair(uint32_t flow, const RingConfig& cfg)
        : flow_id(flow), tx(tx_capacity_for(cfg)), rx(rx_capacity_for(cfg)) {}
};

inline std::unique_ptr<RingPair> create_ring_pair(uint32_t flow_id, const RingConfig& cfg) {
    return std::make_unique<RingPair>(flow_id, cfg);
}

}  // namespace rpcfab::ring
