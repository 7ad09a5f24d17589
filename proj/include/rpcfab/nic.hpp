#pragma once

#include <atomic>
#include <cstdint>
#include <deque>
#include <memory>
#include <mutex>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "rpcfab/rings.hpp"
#include "rpcfab/wire.hpp"

// The simulated NIC pipeline: TX/RX state machines over the per-flow rings,
// the connection cache, load balancers, the request buffer with its free
// slot FIFO and per-flow FIFOs, the flow scheduler, the packet monitor
// counters and the soft configuration registers.
//
// One Nic instance is driven by exactly one context (thread) through
// cycle(). The only cross-context surfaces are the SPSC rings, the bounded
// ingress queue, and atomic snapshots of the counters and soft config.

namespace rpcfab::nic {

enum class LbPolicy : uint8_t { Uniform = 0, Static = 1, ObjectLevel = 2 };

struct ConnectionTuple {
    uint32_t src_flow = 0;
    uint16_t dest_addr = 0;
    LbPolicy load_balancer = LbPolicy::Uniform;

    bool operator==(const ConnectionTuple&) const = default;
};

/// Direct-mapped connection cache with one-writer/any-readers semantics.
/// The tuple is held in three parallel tables (one per field) plus a tag
/// and valid bit, indexed by the low log2(N) bits of the connection id.
/// A per-index sequence counter makes each install atomic for readers: a
/// lookup never returns fields from two different installs.
class ConnectionCache {
  public:
    explicit ConnectionCache(uint32_t entries = 65536);

    /// Writer only. Installs at c_id mod N, silently evicting a prior
    /// different-tag occupant. Returns true when an eviction happened.
    bool open(uint32_t c_id, const ConnectionTuple& tuple);

    /// Writer only. Invalidates the entry if its tag matches.
    bool close(uint32_t c_id);

    /// Any thread.
    std::optional<ConnectionTuple> lookup(uint32_t c_id) const;

    uint32_t entries() const { return n_; }
    uint64_t evictions() const { return evictions_; }

  private:
    uint32_t n_;
    uint32_t mask_;
    std::unique_ptr<std::atomic<uint32_t>[]> seq_;
    std::unique_ptr<std::atomic<uint32_t>[]> tag_;
    std::unique_ptr<std::atomic<uint8_t>[]> valid_;
    // the three field tables
    std::unique_ptr<std::atomic<uint32_t>[]> t_src_flow_;
    std::unique_ptr<std::atomic<uint16_t>[]> t_dest_addr_;
    std::unique_ptr<std::atomic<uint8_t>[]> t_lb_;
    uint64_t evictions_ = 0;
};

/// Load-balancer scratch state (round-robin cursor, object hash prefix).
struct LbState {
    uint64_t rr = 0;
    uint32_t hash_prefix = 8;  // K: bytes of payload hashed by ObjectLevel
};

/// Steers one message to a flow. Uniform cycles a round-robin counter,
/// Static pins to the connection's src_flow, ObjectLevel hashes the first
/// K payload bytes so identical keys always map to identical flows.
uint32_t lb_steer(std::span<const uint8_t> payload, LbPolicy policy, uint32_t n_flows,
                  uint32_t static_flow, LbState& state);
inline uint32_t lb_steer(const wire::RpcMessage& msg, LbPolicy policy, uint32_t n_flows,
                         uint32_t static_flow, LbState& state) {
    return lb_steer(std::span<const uint8_t>(msg.payload), policy, n_flows, static_flow, state);
}

/// Inbound staging: a lookup table of B * N_flows frame slots, a free-slot
/// FIFO, and per-flow FIFOs holding slot references. Slot ids in the free
/// FIFO and the flow FIFOs always partition the table.
class RequestBuffer {
  public:
    RequestBuffer(uint32_t batch, uint32_t n_flows);

    struct Ref {
        uint32_t slot;
        uint64_t enq_ns;
    };

    /// Allocates a slot and queues it on `flow`; false when no slot free.
    bool accept(uint32_t flow, const wire::FrameBytes& frame, uint64_t now_ns);

    std::size_t flow_depth(uint32_t flow) const { return fifos_[flow].size(); }
    uint64_t oldest_ns(uint32_t flow) const { return fifos_[flow].front().enq_ns; }
    std::size_t free_slots() const { return free_.size(); }
    uint32_t table_size() const { return static_cast<uint32_t>(slots_.size()); }

    /// Pops up to max slot refs from a flow FIFO, copies the frames out and
    /// returns the slots to the free FIFO.
    std::size_t drain(uint32_t flow, std::span<wire::FrameBytes> out);

  private:
    std::vector<wire::FrameBytes> slots_;
    std::vector<uint32_t> free_;
    std::vector<std::deque<Ref>> fifos_;
};

struct NicStatsSnapshot {
    uint64_t frames_rx = 0;   // inbound data frames taken off the network
    uint64_t frames_tx = 0;   // outbound frames forwarded to the network
    uint64_t rpcs_in = 0;     // inbound messages (first frames)
    uint64_t rpcs_out = 0;    // outbound messages (first frames)
    uint64_t drops = 0;       // all drops, sum of the detail counters
    uint64_t cm_hits = 0;
    uint64_t cm_misses = 0;
    uint64_t batches_sent = 0;
    uint64_t delivered = 0;   // frames pushed into RX rings
    uint64_t evictions = 0;
    // drop detail
    uint64_t drop_no_slot = 0;
    uint64_t drop_rx_full = 0;
    uint64_t drop_cm_miss_in = 0;
    uint64_t drop_cm_miss_out = 0;
    uint64_t drop_sticky_miss = 0;
    uint64_t drop_bad_frame = 0;
    uint64_t drop_unknown_addr = 0;      // counted on the source NIC
    uint64_t drop_ingress_overflow = 0;  // counted on the destination NIC
    uint64_t ctrl_in = 0;
    uint64_t ctrl_out = 0;
};

/// Where the NIC emits outbound frames (bound by the fabric).
class EgressPort {
  public:
    virtual ~EgressPort() = default;
    virtual void forward(const wire::FrameBytes& frame) = 0;
};

/// Construction-time structure. Changing these requires rebuilding the NIC.
struct HardConfig {
    uint32_t n_flows = 4;
    ring::RingConfig ring;
    uint32_t cm_entries = 65536;
    LbPolicy default_lb = LbPolicy::Uniform;
    uint32_t lb_hash_prefix = 8;
    uint64_t flush_timeout_ns = 5'000;  // partial-batch flush
    uint32_t ingress_capacity = 4096;
};

class Nic {
  public:
    Nic(uint16_t tenant_addr, const HardConfig& cfg);

    uint16_t address() const { return addr_; }
    uint32_t n_flows() const { return static_cast<uint32_t>(flows_.size()); }
    ring::RingPair& flow(uint32_t flow_id) { return *flows_[flow_id]; }

    void bind_egress(EgressPort* port) { egress_ = port; }

    /// Called from any NIC context; false when the bounded queue is full
    /// (the switch then drops and counts on this NIC).
    bool ingress_push(const wire::FrameBytes& frame);

    /// One pipeline iteration: poll TX rings, release previously fetched
    /// slots, forward outbound frames, drain ingress, run the flow
    /// scheduler and push scheduled batches into RX rings.
    bool cycle();

    enum class CfgResult { Ok, RejectedWhileActive, UnknownKey };

    /// Runtime tuning; batch size, balancer and the auto-batch threshold
    /// take effect at the next cycle. Ring sizes and flow count are hard
    /// configuration and are rejected while flows exist.
    CfgResult soft_configure(std::string_view key, uint64_t value);

    NicStatsSnapshot stats() const;
    std::string stats_text() const;

    const ConnectionCache& cm() const { return cm_; }
    uint64_t cycles() const { return cycles_; }

    // counters bumped by the switch (source / destination attribution)
    void count_unknown_addr();
    void count_ingress_overflow();

  private:
    struct Counters;
    void handle_egress_frame(uint32_t flow, const wire::FrameBytes& bytes);
    void handle_ingress_frame(const wire::FrameBytes& bytes);
    void accept_inbound(uint32_t flow, const wire::RpcFrame& frame,
                        const wire::FrameBytes& bytes);
    bool run_scheduler(uint32_t batch);
    void forward(const wire::FrameBytes& bytes);
    uint32_t effective_batch();

    const uint16_t addr_;
    const HardConfig cfg_;
    std::vector<std::unique_ptr<ring::RingPair>> flows_;
    ConnectionCache cm_;
    RequestBuffer reqbuf_;
    LbState lb_state_;
    uint64_t conn_rr_ = 0;  // src_flow assignment for new connections
    uint32_t sched_cursor_ = 0;
    uint64_t cycles_ = 0;

    // per-flow slots fetched last cycle, released after the modeled
    // one-cycle bookkeeping delay
    std::vector<std::vector<uint32_t>> pending_release_;

    // multi-frame inbound messages stick to the flow picked for frame 0
    struct Sticky {
        uint32_t flow;
        uint64_t ns;
    };
    std::unordered_map<uint64_t, Sticky> sticky_;

    EgressPort* egress_ = nullptr;

    // bounded MPSC ingress queue
    mutable std::mutex ingress_mu_;
    std::deque<wire::FrameBytes> ingress_;

    // soft configuration (any thread writes, NIC thread samples per cycle)
    std::atomic<uint32_t> soft_batch_;
    std::atomic<uint8_t> soft_lb_;
    std::atomic<uint8_t> soft_auto_batch_{0};
    std::atomic<uint64_t> soft_auto_thresh_fps_{0};

    // auto-batch load estimate
    uint64_t win_start_ns_ = 0;
    uint64_t win_frames_ = 0;
    uint32_t auto_batch_now_ = 1;

    struct Counters {
        std::atomic<uint64_t> frames_rx{0}, frames_tx{0}, rpcs_in{0}, rpcs_out{0};
        std::atomic<uint64_t> cm_hits{0}, cm_misses{0}, batches_sent{0}, delivered{0};
        std::atomic<uint64_t> drop_no_slot{0}, drop_rx_full{0}, drop_cm_miss_in{0},
            drop_cm_miss_out{0}, drop_sticky_miss{0}, drop_bad_frame{0}, drop_unknown_addr{0},
            drop_ingress_overflow{0};
        std::atomic<uint64_t> ctrl_in{0}, ctrl_out{0};
    } c_;
};

// Control frame payload layout (payloads are never empty):
//   Connect:    bytes 0-1 reply address (filled in by the sending NIC)
//   ConnectAck: byte 0 status, 0 = ok, 1 = duplicate connection id
//   Disconnect: byte 0 zero
inline constexpr uint8_t kConnectAckOk = 0;
inline constexpr uint8_t kConnectAckDuplicate = 1;

}  // namespace rpcfab::nic
