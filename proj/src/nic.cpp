#include "rpcfab/nic.hpp"

#include <atomic>
#include <cassert>
#include <sstream>

#include "rpcfab/util.hpp"

namespace rpcfab::nic {

// ---------------------------------------------------------------------------
// ConnectionCache

ConnectionCache::ConnectionCache(uint32_t entries) : n_(next_pow2(entries)), mask_(n_ - 1) {
    seq_ = std::make_unique<std::atomic<uint32_t>[]>(n_);
    tag_ = std::make_unique<std::atomic<uint32_t>[]>(n_);
    valid_ = std::make_unique<std::atomic<uint8_t>[]>(n_);
    t_src_flow_ = std::make_unique<std::atomic<uint32_t>[]>(n_);
    t_dest_addr_ = std::make_unique<std::atomic<uint16_t>[]>(n_);
    t_lb_ = std::make_unique<std::atomic<uint8_t>[]>(n_);
    for (uint32_t i = 0; i < n_; ++i) {
        seq_[i].store(0, std::memory_order_relaxed);
        valid_[i].store(0, std::memory_order_relaxed);
    }
}

bool ConnectionCache::open(uint32_t c_id, const ConnectionTuple& tuple) {
    const uint32_t i = c_id & mask_;
    const bool evict = valid_[i].load(std::memory_order_relaxed) &&
                       tag_[i].load(std::memory_order_relaxed) != c_id;
    if (evict) ++evictions_;

    const uint32_t s = seq_[i].load(std::memory_order_relaxed);
    seq_[i].store(s + 1, std::memory_order_relaxed);  // odd: install in progress
    std::atomic_thread_fence(std::memory_order_release);
    tag_[i].store(c_id, std::memory_order_relaxed);
    t_src_flow_[i].store(tuple.src_flow, std::memory_order_relaxed);
    t_dest_addr_[i].store(tuple.dest_addr, std::memory_order_relaxed);
    t_lb_[i].store(static_cast<uint8_t>(tuple.load_balancer), std::memory_order_relaxed);
    valid_[i].store(1, std::memory_order_relaxed);
    seq_[i].store(s + 2, std::memory_order_release);
    return evict;
}

bool ConnectionCache::close(uint32_t c_id) {
    const uint32_t i = c_id & mask_;
    if (!valid_[i].load(std::memory_order_relaxed) ||
        tag_[i].load(std::memory_order_relaxed) != c_id)
        return false;
    const uint32_t s = seq_[i].load(std::memory_order_relaxed);
    seq_[i].store(s + 1, std::memory_order_relaxed);
    std::atomic_thread_fence(std::memory_order_release);
    valid_[i].store(0, std::memory_order_relaxed);
    seq_[i].store(s + 2, std::memory_order_release);
    return true;
}

std::optional<ConnectionTuple> ConnectionCache::lookup(uint32_t c_id) const {
    const uint32_t i = c_id & mask_;
    for (;;) {
        const uint32_t s1 = seq_[i].load(std::memory_order_acquire);
        if (s1 & 1) {
            cpu_relax();
            continue;
        }
        const uint8_t valid = valid_[i].load(std::memory_order_relaxed);
        const uint32_t tag = tag_[i].load(std::memory_order_relaxed);
        ConnectionTuple t;
        t.src_flow = t_src_flow_[i].load(std::memory_order_relaxed);
        t.dest_addr = t_dest_addr_[i].load(std::memory_order_relaxed);
        t.load_balancer = static_cast<LbPolicy>(t_lb_[i].load(std::memory_order_relaxed));
        std::atomic_thread_fence(std::memory_order_acquire);
        if (seq_[i].load(std::memory_order_relaxed) != s1) continue;  // raced an install
        if (!valid || tag != c_id) return std::nullopt;
        return t;
    }
}

// ---------------------------------------------------------------------------
// Load balancer

uint32_t lb_steer(std::span<const uint8_t> payload, LbPolicy policy, uint32_t n_flows,
                  uint32_t static_flow, LbState& state) {
    assert(n_flows >= 1);
    switch (policy) {
        case LbPolicy::Uniform:
            return static_cast<uint32_t>(state.rr++ % n_flows);
        case LbPolicy::Static:
            return static_flow % n_flows;
        case LbPolicy::ObjectLevel: {
            // hash exactly K bytes; missing bytes count as the zero padding
            // they are on the wire, keeping the steering deterministic
            std::array<uint8_t, wire::kFramePayload> key{};
            const std::size_t k = std::min<std::size_t>(state.hash_prefix, key.size());
            const std::size_t have = std::min(k, payload.size());
            std::copy_n(payload.begin(), have, key.begin());
            return static_cast<uint32_t>(hash64(std::span(key.data(), k)) % n_flows);
        }
    }
    return 0;
}

// ---------------------------------------------------------------------------
// RequestBuffer

RequestBuffer::RequestBuffer(uint32_t batch, uint32_t n_flows)
    : slots_(std::size_t{batch} * n_flows), fifos_(n_flows) {
    free_.reserve(slots_.size());
    for (uint32_t i = 0; i < slots_.size(); ++i) free_.push_back(i);
}

bool RequestBuffer::accept(uint32_t flow, const wire::FrameBytes& frame, uint64_t now_ns) {
    if (free_.empty()) return false;
    const uint32_t slot = free_.back();
    free_.pop_back();
    slots_[slot] = frame;
    fifos_[flow].push_back({slot, now_ns});
    return true;
}

std::size_t RequestBuffer::drain(uint32_t flow, std::span<wire::FrameBytes> out) {
    auto& fifo = fifos_[flow];
    std::size_t n = 0;
    while (n < out.size() && !fifo.empty()) {
        const Ref ref = fifo.front();
        fifo.pop_front();
        out[n++] = slots_[ref.slot];
        free_.push_back(ref.slot);
    }
    return n;
}

// ---------------------------------------------------------------------------
// Nic

Nic::Nic(uint16_t tenant_addr, const HardConfig& cfg)
    : addr_(tenant_addr), cfg_(cfg),
      cm_(cfg.cm_entries),
      reqbuf_(std::max(cfg.ring.batch, 1u), std::max(cfg.n_flows, 1u)),
      pending_release_(std::max(cfg.n_flows, 1u)),
      soft_batch_(std::max(cfg.ring.batch, 1u)),
      soft_lb_(static_cast<uint8_t>(cfg.default_lb)) {
    lb_state_.hash_prefix = cfg.lb_hash_prefix;
    for (uint32_t f = 0; f < std::max(cfg.n_flows, 1u); ++f)
        flows_.push_back(std::make_unique<ring::RingPair>(f, cfg.ring));
    win_start_ns_ = now_ns();
}

bool Nic::ingress_push(const wire::FrameBytes& frame) {
    std::lock_guard lock(ingress_mu_);
    if (ingress_.size() >= cfg_.ingress_capacity) return false;
    ingress_.push_back(frame);
    return true;
}

void Nic::count_unknown_addr() {
    c_.drop_unknown_addr.fetch_add(1, std::memory_order_relaxed);
}
void Nic::count_ingress_overflow() {
    c_.drop_ingress_overflow.fetch_add(1, std::memory_order_relaxed);
}

void Nic::forward(const wire::FrameBytes& bytes) {
    if (egress_) egress_->forward(bytes);
}

uint32_t Nic::effective_batch() {
    const uint32_t batch = soft_batch_.load(std::memory_order_relaxed);
    if (!soft_auto_batch_.load(std::memory_order_relaxed)) return batch;
    // grow the batch only above the configured load threshold
    const uint64_t now = now_ns();
    if (now - win_start_ns_ >= 1'000'000) {
        const double fps = static_cast<double>(win_frames_) * 1e9 /
                           static_cast<double>(now - win_start_ns_);
        auto_batch_now_ =
            fps > static_cast<double>(soft_auto_thresh_fps_.load(std::memory_order_relaxed))
                ? batch
                : 1;
        win_start_ns_ = now;
        win_frames_ = 0;
    }
    return auto_batch_now_;
}

Nic::CfgResult Nic::soft_configure(std::string_view key, uint64_t value) {
    if (key == "batch") {
        if (value == 0) return CfgResult::UnknownKey;
        soft_batch_.store(static_cast<uint32_t>(value), std::memory_order_relaxed);
        return CfgResult::Ok;
    }
    if (key == "lb") {
        if (value > static_cast<uint64_t>(LbPolicy::ObjectLevel)) return CfgResult::UnknownKey;
        soft_lb_.store(static_cast<uint8_t>(value), std::memory_order_relaxed);
        return CfgResult::Ok;
    }
    if (key == "auto_batch") {
        soft_auto_batch_.store(value ? 1 : 0, std::memory_order_relaxed);
        return CfgResult::Ok;
    }
    if (key == "auto_batch_threshold") {
        soft_auto_thresh_fps_.store(value, std::memory_order_relaxed);
        return CfgResult::Ok;
    }
    // structural parameters need dedicated hardware, i.e. a new instance
    if (key == "ring_size" || key == "n_flows" || key == "cm_entries")
        return CfgResult::RejectedWhileActive;
    return CfgResult::UnknownKey;
}

void Nic::handle_egress_frame(uint32_t flow, const wire::FrameBytes& bytes) {
    auto decoded = wire::decode_frame(bytes);
    if (!decoded) {
        c_.drop_bad_frame.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    wire::RpcFrame& f = *decoded;

    switch (f.kind) {
        case wire::FrameKind::Connect: {
            // opening side: pin the connection to the flow that sent it and
            // remember the peer; stamp our address as the reply address
            ConnectionTuple t;
            t.src_flow = flow;
            t.dest_addr = f.dst_addr;
            t.load_balancer = LbPolicy::Static;
            cm_.open(f.connection_id, t);
            wire::FrameBytes out = bytes;
            out[wire::kHeaderSize] = static_cast<uint8_t>(addr_);
            out[wire::kHeaderSize + 1] = static_cast<uint8_t>(addr_ >> 8);
            forward(out);
            c_.ctrl_out.fetch_add(1, std::memory_order_relaxed);
            return;
        }
        case wire::FrameKind::Disconnect: {
            auto t = cm_.lookup(f.connection_id);
            if (t) {
                wire::FrameBytes out = bytes;
                out[0] = static_cast<uint8_t>(t->dest_addr);
                out[1] = static_cast<uint8_t>(t->dest_addr >> 8);
                forward(out);
                c_.ctrl_out.fetch_add(1, std::memory_order_relaxed);
                cm_.close(f.connection_id);
            }
            return;
        }
        case wire::FrameKind::ConnectAck:
            // applications do not send acks; the NIC generates them
            c_.drop_bad_frame.fetch_add(1, std::memory_order_relaxed);
            return;
        case wire::FrameKind::Request:
        case wire::FrameKind::Response: {
            auto t = cm_.lookup(f.connection_id);
            if (!t) {
                c_.cm_misses.fetch_add(1, std::memory_order_relaxed);
                c_.drop_cm_miss_out.fetch_add(1, std::memory_order_relaxed);
                return;
            }
            c_.cm_hits.fetch_add(1, std::memory_order_relaxed);
            wire::FrameBytes out = bytes;
            out[0] = static_cast<uint8_t>(t->dest_addr);
            out[1] = static_cast<uint8_t>(t->dest_addr >> 8);
            forward(out);
            c_.frames_tx.fetch_add(1, std::memory_order_relaxed);
            if (f.frame_index == 0) c_.rpcs_out.fetch_add(1, std::memory_order_relaxed);
            return;
        }
    }
}

void Nic::accept_inbound(uint32_t flow, const wire::RpcFrame& frame,
                         const wire::FrameBytes& bytes) {
    if (!reqbuf_.accept(flow, bytes, now_ns())) {
        // the hardware drains the request table concurrently with arrivals;
        // give the scheduler one chance to free slots before dropping
        run_scheduler(cur_batch_);
        if (!reqbuf_.accept(flow, bytes, now_ns())) {
            c_.drop_no_slot.fetch_add(1, std::memory_order_relaxed);
            return;
        }
    }
    if (frame.frame_index == 0 && frame.kind != wire::FrameKind::ConnectAck)
        c_.rpcs_in.fetch_add(1, std::memory_order_relaxed);
}

void Nic::handle_ingress_frame(const wire::FrameBytes& bytes) {
    auto decoded = wire::decode_frame(bytes);
    if (!decoded) {
        c_.drop_bad_frame.fetch_add(1, std::memory_order_relaxed);
        return;
    }
    const wire::RpcFrame& f = *decoded;

    switch (f.kind) {
        case wire::FrameKind::Connect: {
            c_.ctrl_in.fetch_add(1, std::memory_order_relaxed);
            const uint16_t reply_addr =
                static_cast<uint16_t>(f.payload[0] | (uint16_t{f.payload[1]} << 8));
            uint8_t status = kConnectAckOk;
            if (cm_.lookup(f.connection_id)) {
                status = kConnectAckDuplicate;
            } else {
                ConnectionTuple t;
                t.src_flow = static_cast<uint32_t>(conn_rr_++ % n_flows());
                t.dest_addr = reply_addr;
                t.load_balancer = static_cast<LbPolicy>(soft_lb_.load(std::memory_order_relaxed));
                cm_.open(f.connection_id, t);  // evictions counted by the cache
            }
            wire::RpcFrame ack;
            ack.dst_addr = reply_addr;
            ack.connection_id = f.connection_id;
            ack.rpc_id = f.rpc_id;
            ack.kind = wire::FrameKind::ConnectAck;
            ack.frame_count = 1;
            ack.payload_len_total = 1;
            ack.payload[0] = status;
            forward(wire::encode_frame(ack));
            c_.ctrl_out.fetch_add(1, std::memory_order_relaxed);
            return;
        }
        case wire::FrameKind::Disconnect:
            c_.ctrl_in.fetch_add(1, std::memory_order_relaxed);
            cm_.close(f.connection_id);
            return;
        case wire::FrameKind::ConnectAck: {
            c_.frames_rx.fetch_add(1, std::memory_order_relaxed);
            auto t = cm_.lookup(f.connection_id);
            if (!t) {
                c_.cm_misses.fetch_add(1, std::memory_order_relaxed);
                c_.drop_cm_miss_in.fetch_add(1, std::memory_order_relaxed);
                return;
            }
            c_.cm_hits.fetch_add(1, std::memory_order_relaxed);
            accept_inbound(t->src_flow, f, bytes);
            return;
        }
        case wire::FrameKind::Request:
        case wire::FrameKind::Response: {
            c_.frames_rx.fetch_add(1, std::memory_order_relaxed);
            ++win_frames_;
            const uint64_t mkey = (uint64_t{f.connection_id} << 32) | f.rpc_id;

            uint32_t flow = 0;
            if (f.frame_count > 1 && f.frame_index > 0) {
                // later frames follow the steering decision made for frame 0
                auto it = sticky_.find(mkey);
                if (it == sticky_.end()) {
                    c_.drop_sticky_miss.fetch_add(1, std::memory_order_relaxed);
                    return;
                }
                flow = it->second.flow;
                if (f.frame_index + 1 == f.frame_count) sticky_.erase(it);
            } else {
                auto t = cm_.lookup(f.connection_id);
                if (!t) {
                    c_.cm_misses.fetch_add(1, std::memory_order_relaxed);
                    c_.drop_cm_miss_in.fetch_add(1, std::memory_order_relaxed);
                    return;
                }
                c_.cm_hits.fetch_add(1, std::memory_order_relaxed);
                if (f.kind == wire::FrameKind::Response) {
                    // responses return to the flow the requests came from
                    flow = t->src_flow % n_flows();
                } else {
                    flow = lb_steer(std::span<const uint8_t>(f.payload.data(), f.chunk_len()),
                                    t->load_balancer, n_flows(), t->src_flow, lb_state_);
                }
                if (f.frame_count > 1) sticky_[mkey] = {flow, now_ns()};
            }
            accept_inbound(flow, f, bytes);
            return;
        }
    }
}

bool Nic::run_scheduler(uint32_t batch) {
    bool progress = false;
    const uint64_t now = now_ns();
    std::array<wire::FrameBytes, 64> buf;
    const uint32_t nf = n_flows();
    for (uint32_t i = 0; i < nf; ++i) {
        const uint32_t f = (sched_cursor_ + i) % nf;
        const std::size_t depth = reqbuf_.flow_depth(f);
        if (depth == 0) continue;
        const bool full_batch = depth >= batch;
        const bool flush = now - reqbuf_.oldest_ns(f) > cfg_.flush_timeout_ns;
        if (!full_batch && !flush) continue;

        const std::size_t want = std::min<std::size_t>(std::min<std::size_t>(batch, depth),
                                                       buf.size());
        const std::size_t got = reqbuf_.drain(f, std::span(buf.data(), want));
        const std::size_t pushed = flows_[f]->rx.push(std::span(buf.data(), got));
        if (pushed < got)
            c_.drop_rx_full.fetch_add(got - pushed, std::memory_order_relaxed);
        c_.delivered.fetch_add(pushed, std::memory_order_relaxed);
        c_.batches_sent.fetch_add(1, std::memory_order_relaxed);
        progress = true;
    }
    sched_cursor_ = nf ? (sched_cursor_ + 1) % nf : 0;
    return progress;
}

bool Nic::cycle() {
    ++cycles_;
    const uint32_t batch = effective_batch();
    cur_batch_ = batch;
    bool progress = false;

    // free-slot bookkeeping for entries fetched on the previous cycle
    for (uint32_t f = 0; f < n_flows(); ++f) {
        auto& pending = pending_release_[f];
        if (!pending.empty()) {
            flows_[f]->tx.release(pending);
            pending.clear();
            progress = true;
        }
    }

    // poll the TX rings and forward outbound frames
    std::array<ring::TxRing::Fetch, 64> fetched;
    for (uint32_t f = 0; f < n_flows(); ++f) {
        const std::size_t n =
            flows_[f]->tx.poll(std::span(fetched.data(), std::min<std::size_t>(batch, 64)));
        for (std::size_t i = 0; i < n; ++i) {
            handle_egress_frame(f, fetched[i].bytes);
            pending_release_[f].push_back(fetched[i].slot);
        }
        if (n) progress = true;
    }

    // accept inbound frames from the switch
    std::size_t budget = std::max<std::size_t>(std::size_t{batch} * n_flows() * 2, 64);
    while (budget--) {
        wire::FrameBytes frame;
        {
            std::lock_guard lock(ingress_mu_);
            if (ingress_.empty()) break;
            frame = ingress_.front();
            ingress_.pop_front();
        }
        handle_ingress_frame(frame);
        progress = true;
    }

    progress |= run_scheduler(batch);

    // age out steering state of messages that never completed
    if ((cycles_ & 0xFFF) == 0 && !sticky_.empty()) {
        const uint64_t now = now_ns();
        for (auto it = sticky_.begin(); it != sticky_.end();) {
            if (now - it->second.ns > 100'000'000)
                it = sticky_.erase(it);
            else
                ++it;
        }
    }
    return progress;
}

NicStatsSnapshot Nic::stats() const {
    NicStatsSnapshot s;
    s.frames_rx = c_.frames_rx.load(std::memory_order_relaxed);
    s.frames_tx = c_.frames_tx.load(std::memory_order_relaxed);
    s.rpcs_in = c_.rpcs_in.load(std::memory_order_relaxed);
    s.rpcs_out = c_.rpcs_out.load(std::memory_order_relaxed);
    s.cm_hits = c_.cm_hits.load(std::memory_order_relaxed);
    s.cm_misses = c_.cm_misses.load(std::memory_order_relaxed);
    s.batches_sent = c_.batches_sent.load(std::memory_order_relaxed);
    s.delivered = c_.delivered.load(std::memory_order_relaxed);
    s.evictions = cm_.evictions();
    s.drop_no_slot = c_.drop_no_slot.load(std::memory_order_relaxed);
    s.drop_rx_full = c_.drop_rx_full.load(std::memory_order_relaxed);
    s.drop_cm_miss_in = c_.drop_cm_miss_in.load(std::memory_order_relaxed);
    s.drop_cm_miss_out = c_.drop_cm_miss_out.load(std::memory_order_relaxed);
    s.drop_sticky_miss = c_.drop_sticky_miss.load(std::memory_order_relaxed);
    s.drop_bad_frame = c_.drop_bad_frame.load(std::memory_order_relaxed);
    s.drop_unknown_addr = c_.drop_unknown_addr.load(std::memory_order_relaxed);
    s.drop_ingress_overflow = c_.drop_ingress_overflow.load(std::memory_order_relaxed);
    s.ctrl_in = c_.ctrl_in.load(std::memory_order_relaxed);
    s.ctrl_out = c_.ctrl_out.load(std::memory_order_relaxed);
    s.drops = s.drop_no_slot + s.drop_rx_full + s.drop_cm_miss_in + s.drop_cm_miss_out +
              s.drop_sticky_miss + s.drop_bad_frame + s.drop_unknown_addr +
              s.drop_ingress_overflow;
    return s;
}

std::string Nic::stats_text() const {
    const NicStatsSnapshot s = stats();
    std::ostringstream os;
    os << "addr=" << addr_ << '\n'
       << "frames_rx=" << s.frames_rx << '\n'
       << "frames_tx=" << s.frames_tx << '\n'
       << "rpcs_in=" << s.rpcs_in << '\n'
       << "rpcs_out=" << s.rpcs_out << '\n'
       << "drops=" << s.drops << '\n'
       << "cm_hits=" << s.cm_hits << '\n'
       << "cm_misses=" << s.cm_misses << '\n'
       << "batches_sent=" << s.batches_sent << '\n'
       << "delivered=" << s.delivered << '\n'
       << "evictions=" << s.evictions << '\n'
       << "drop_no_slot=" << s.drop_no_slot << '\n'
       << "drop_rx_full=" << s.drop_rx_full << '\n'
       << "drop_cm_miss_in=" << s.drop_cm_miss_in << '\n'
       << "drop_cm_miss_out=" << s.drop_cm_miss_out << '\n'
       << "drop_sticky_miss=" << s.drop_sticky_miss << '\n'
       << "drop_bad_frame=" << s.drop_bad_frame << '\n'
       << "drop_unknown_addr=" << s.drop_unknown_addr << '\n'
       << "drop_ingress_overflow=" << s.drop_ingress_overflow << '\n'
       << "ctrl_in=" << s.ctrl_in << '\n'
       << "ctrl_out=" << s.ctrl_out << '\n';
    return os.str();
}

}  // namespace rpcfab::nic
