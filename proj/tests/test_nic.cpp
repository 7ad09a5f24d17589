#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <map>
#include <random>

#include "rpcfab/nic.hpp"
#include "rpcfab/util.hpp"

using namespace rpcfab;
using namespace rpcfab::nic;

TEST_CASE("connection cache: direct-mapped indexing and eviction") {
    ConnectionCache cm(1024);
    CHECK(cm.entries() == 1024);

    ConnectionTuple t1{7, 42, LbPolicy::Static};
    cm.open(2049, t1);  // occupies index 2049 mod 1024 = 1
    auto hit = cm.lookup(2049);
    REQUIRE(hit.has_value());
    CHECK(*hit == t1);

    // same index, different tag: 2 and 1026 collide
    ConnectionTuple t2{1, 10, LbPolicy::Uniform};
    cm.open(2, t2);
    CHECK(cm.lookup(2).has_value());
    ConnectionTuple t3{2, 11, LbPolicy::Uniform};
    CHECK(cm.open(1026, t3));  // evicts
    CHECK(!cm.lookup(2).has_value());
    CHECK(cm.lookup(1026).has_value());
    CHECK(cm.evictions() == 1);

    CHECK(cm.close(1026));
    CHECK(!cm.lookup(1026).has_value());
    CHECK(!cm.close(1026));
}

// Oracle: a plain map keyed by index replays the same operation sequence;
// hit/miss behaviour must match exactly on a 16-entry cache.
TEST_CASE("connection cache: eviction semantics against brute-force oracle") {
    const uint32_t N = 16;
    ConnectionCache cm(N);
    std::map<uint32_t, uint32_t> oracle;  // index -> installed c_id

    std::mt19937_64 rng(11);
    for (int i = 0; i < 100'000; ++i) {
        const uint32_t c_id = static_cast<uint32_t>(rng() % 200);
        const uint32_t idx = c_id % N;
        switch (rng() % 3) {
            case 0: {
                ConnectionTuple t{c_id, static_cast<uint16_t>(c_id * 3), LbPolicy::Uniform};
                cm.open(c_id, t);
                oracle[idx] = c_id;
                break;
            }
            case 1: {
                auto it = oracle.find(idx);
                const bool oracle_hit = it != oracle.end() && it->second == c_id;
                auto got = cm.lookup(c_id);
                REQUIRE(got.has_value() == oracle_hit);
                if (got) {
                    CHECK(got->src_flow == c_id);
                    CHECK(got->dest_addr == static_cast<uint16_t>(c_id * 3));
                }
                break;
            }
            default: {
                auto it = oracle.find(idx);
                const bool oracle_hit = it != oracle.end() && it->second == c_id;
                CHECK(cm.close(c_id) == oracle_hit);
                if (oracle_hit) oracle.erase(it);
                break;
            }
        }
    }
}

TEST_CASE("lb_steer: uniform round robin") {
    LbState st;
    std::vector<uint8_t> payload{1, 2, 3};
    std::vector<uint32_t> flows;
    for (int i = 0; i < 6; ++i) flows.push_back(lb_steer(payload, LbPolicy::Uniform, 4, 0, st));
    CHECK(flows == std::vector<uint32_t>{0, 1, 2, 3, 0, 1});
}

TEST_CASE("lb_steer: static pins to the tuple's src_flow") {
    LbState st;
    for (int i = 0; i < 10; ++i) {
        std::vector<uint8_t> payload(8, static_cast<uint8_t>(i));
        CHECK(lb_steer(payload, LbPolicy::Static, 8, 3, st) == 3);
    }
}

// Determinism oracle: identical keys always map to identical flows.
TEST_CASE("lb_steer: object-level determinism over random keys") {
    LbState st;
    st.hash_prefix = 8;
    std::mt19937_64 rng(5);
    for (int i = 0; i < 100'000; ++i) {
        std::vector<uint8_t> key(8);
        for (auto& b : key) b = static_cast<uint8_t>(rng());
        const uint32_t first = lb_steer(key, LbPolicy::ObjectLevel, 7, 0, st);
        // trailing garbage beyond the prefix must not matter
        std::vector<uint8_t> extended = key;
        extended.resize(32, static_cast<uint8_t>(rng()));
        CHECK(lb_steer(extended, LbPolicy::ObjectLevel, 7, 0, st) == first);
        CHECK(lb_steer(key, LbPolicy::ObjectLevel, 7, 0, st) == first);
    }
}

TEST_CASE("request buffer: slot partition invariant under stress") {
    RequestBuffer rb(4, 3);  // 12 slots
    CHECK(rb.table_size() == 12);
    CHECK(rb.free_slots() == 12);

    std::mt19937_64 rng(3);
    wire::FrameBytes fb{};
    std::array<std::size_t, 3> queued{};
    for (int i = 0; i < 200'000; ++i) {
        const uint32_t flow = static_cast<uint32_t>(rng() % 3);
        if (rng() & 1) {
            if (rb.accept(flow, fb, 0)) ++queued[flow];
        } else {
            std::array<wire::FrameBytes, 4> out;
            queued[flow] -= rb.drain(flow, out);
        }
        REQUIRE(rb.free_slots() + queued[0] + queued[1] + queued[2] == 12);
        REQUIRE(rb.flow_depth(0) == queued[0]);
    }
}

TEST_CASE("request buffer: accept fails when no slot free") {
    RequestBuffer rb(1, 2);
    wire::FrameBytes fb{};
    CHECK(rb.accept(0, fb, 0));
    CHECK(rb.accept(0, fb, 0));
    CHECK(!rb.accept(1, fb, 0));  // table exhausted
    std::array<wire::FrameBytes, 1> out;
    CHECK(rb.drain(0, out) == 1);
    CHECK(rb.accept(1, fb, 0));
}

namespace {

// back-to-back harness: each NIC's egress feeds the other's ingress
struct Pipe : EgressPort {
    Nic* peer = nullptr;
    uint64_t sent = 0;
    void forward(const wire::FrameBytes& frame) override {
        ++sent;
        REQUIRE(peer->ingress_push(frame));
    }
};

struct Pair {
    Nic a, b;
    Pipe a2b, b2a;
    Pair(const HardConfig& ca, const HardConfig& cb) : a(1, ca), b(2, cb) {
        a2b.peer = &b;
        b2a.peer = &a;
        a.bind_egress(&a2b);
        b.bind_egress(&b2a);
    }
    void run(int cycles) {
        for (int i = 0; i < cycles; ++i) {
            a.cycle();
            b.cycle();
        }
    }
};

wire::FrameBytes connect_frame(uint32_t c_id, uint16_t dst) {
    wire::RpcFrame f;
    f.dst_addr = dst;
    f.connection_id = c_id;
    f.kind = wire::FrameKind::Connect;
    f.frame_count = 1;
    f.payload_len_total = 2;
    return wire::encode_frame(f);
}

}  // namespace

TEST_CASE("nic: connect handshake installs tuples on both sides") {
    HardConfig cfg;
    cfg.n_flows = 2;
    cfg.ring.batch = 2;
    cfg.ring.target_throughput_per_flow = 1e6;
    cfg.flush_timeout_ns = 0;  // deliver singletons without the 5 us wait
    Pair p(cfg, cfg);

    REQUIRE(p.a.flow(0).tx.push(connect_frame(77, 2)).has_value());
    p.run(20);

    auto client_side = p.a.cm().lookup(77);
    REQUIRE(client_side.has_value());
    CHECK(client_side->src_flow == 0);
    CHECK(client_side->dest_addr == 2);

    auto server_side = p.b.cm().lookup(77);
    REQUIRE(server_side.has_value());
    CHECK(server_side->dest_addr == 1);

    // the ack reaches flow 0's RX ring on the client side
    std::array<wire::FrameBytes, 4> out;
    std::size_t n = p.a.flow(0).rx.poll(out);
    REQUIRE(n == 1);
    auto ack = wire::decode_frame(out[0]);
    REQUIRE(ack.has_value());
    CHECK(ack->kind == wire::FrameKind::ConnectAck);
    CHECK(ack->payload[0] == kConnectAckOk);

    // second connect with the same id reports a duplicate
    REQUIRE(p.a.flow(1).tx.push(connect_frame(77, 2)).has_value());
    p.run(20);
    // ack steers to flow 1, the most recent opener of c_id 77
    n = p.a.flow(1).rx.poll(out);
    REQUIRE(n == 1);
    ack = wire::decode_frame(out[0]);
    CHECK(ack->payload[0] == kConnectAckDuplicate);
}

TEST_CASE("nic: request forwarding, steering and response return path") {
    HardConfig cfg;
    cfg.n_flows = 2;
    cfg.ring.batch = 2;
    cfg.ring.target_throughput_per_flow = 1e6;
    cfg.flush_timeout_ns = 0;  // flush immediately for the test
    Pair p(cfg, cfg);

    REQUIRE(p.a.flow(0).tx.push(connect_frame(5, 2)).has_value());
    p.run(20);
    std::array<wire::FrameBytes, 8> scratch;
    p.a.flow(0).rx.poll(scratch);  // consume the ack

    // client sends a request; NIC fills in the destination from the cache
    wire::RpcMessage req;
    req.connection_id = 5;
    req.rpc_id = 1;
    req.function_id = 9;
    req.payload = {1, 2, 3, 4};
    for (const auto& f : wire::fragment(req, 0))
        REQUIRE(p.a.flow(0).tx.push(wire::encode_frame(f)).has_value());
    p.run(20);

    // server side: steered to some flow by the Uniform default
    std::size_t got = 0;
    uint32_t server_flow = 0;
    for (uint32_t f = 0; f < 2; ++f) {
        std::size_t n = p.b.flow(f).rx.poll(scratch);
        if (n) {
            got += n;
            server_flow = f;
        }
    }
    REQUIRE(got == 1);
    auto rf = wire::decode_frame(scratch[0]);
    REQUIRE(rf.has_value());
    CHECK(rf->function_id == 9);
    CHECK(rf->dst_addr == 2);

    // server responds from the flow that handled it
    wire::RpcMessage resp;
    resp.connection_id = 5;
    resp.rpc_id = 1;
    resp.kind = wire::MsgKind::Response;
    resp.function_id = 9;
    resp.payload = {4, 3, 2, 1};
    for (const auto& f : wire::fragment(resp, 0))
        REQUIRE(p.b.flow(server_flow).tx.push(wire::encode_frame(f)).has_value());
    p.run(20);

    // response comes back on the client flow that opened the connection
    std::size_t n = p.a.flow(0).rx.poll(scratch);
    REQUIRE(n == 1);
    auto back = wire::decode_frame(scratch[0]);
    CHECK(back->kind == wire::FrameKind::Response);
    CHECK(back->rpc_id == 1);

    auto sa = p.a.stats();
    auto sb = p.b.stats();
    CHECK(sa.rpcs_out == 1);
    CHECK(sb.rpcs_in == 1);
    CHECK(sa.frames_tx == 1);
    CHECK(sb.frames_rx >= 1);
    // conservation: every inbound data frame was delivered or dropped
    CHECK(sb.frames_rx == sb.delivered + sb.drops);
    CHECK(sa.frames_rx == sa.delivered + sa.drops);
}

TEST_CASE("nic: frames on unknown connections are dropped and counted") {
    HardConfig cfg;
    cfg.n_flows = 1;
    cfg.ring.batch = 1;
    cfg.ring.target_throughput_per_flow = 1e6;
    Pair p(cfg, cfg);

    wire::RpcMessage req;
    req.connection_id = 999;  // never opened
    req.rpc_id = 1;
    req.payload = {1};
    REQUIRE(p.a.flow(0).tx.push(wire::encode_frame(wire::fragment(req, 0)[0])).has_value());
    p.run(10);
    auto s = p.a.stats();
    CHECK(s.drop_cm_miss_out == 1);
    CHECK(s.cm_misses == 1);
    CHECK(s.frames_tx == 0);
}

TEST_CASE("nic: batching - full batches except flush-timeout flushes") {
    HardConfig cfg;
    cfg.n_flows = 1;
    cfg.ring.batch = 4;
    cfg.ring.target_throughput_per_flow = 1e6;
    cfg.flush_timeout_ns = 3'600'000'000'000ull;  // effectively never flush
    Pair p(cfg, cfg);

    REQUIRE(p.a.flow(0).tx.push(connect_frame(5, 2)).has_value());
    p.run(20);
    std::array<wire::FrameBytes, 16> scratch;
    p.a.flow(0).rx.poll(scratch);

    // 6 single-frame requests: one full batch of 4 delivered, 2 remain queued
    for (uint32_t r = 1; r <= 6; ++r) {
        wire::RpcMessage m;
        m.connection_id = 5;
        m.rpc_id = r;
        m.payload = {static_cast<uint8_t>(r)};
        REQUIRE(p.a.flow(0).tx.push(wire::encode_frame(wire::fragment(m, 0)[0])).has_value());
        p.run(2);
    }
    p.run(10);
    auto sb = p.b.stats();
    CHECK(sb.delivered == 4);
    CHECK(sb.batches_sent == 1);
    std::size_t n = p.b.flow(0).rx.poll(scratch);
    CHECK(n == 4);

    // partial-batch flush: with a zero timeout a lone frame goes out alone
    HardConfig zf = cfg;
    zf.flush_timeout_ns = 0;
    Pair q(zf, zf);
    REQUIRE(q.a.flow(0).tx.push(connect_frame(5, 2)).has_value());
    q.run(20);
    q.a.flow(0).rx.poll(scratch);
    wire::RpcMessage m;
    m.connection_id = 5;
    m.rpc_id = 1;
    m.payload = {1};
    REQUIRE(q.a.flow(0).tx.push(wire::encode_frame(wire::fragment(m, 0)[0])).has_value());
    q.run(20);
    CHECK(q.b.stats().delivered == 1);  // partial batch of 1, flushed
}

TEST_CASE("nic: soft configuration") {
    HardConfig cfg;
    cfg.n_flows = 1;
    Nic n(1, cfg);
    CHECK(n.soft_configure("batch", 8) == Nic::CfgResult::Ok);
    CHECK(n.soft_configure("lb", 2) == Nic::CfgResult::Ok);
    CHECK(n.soft_configure("auto_batch", 1) == Nic::CfgResult::Ok);
    CHECK(n.soft_configure("auto_batch_threshold", 1'000'000) == Nic::CfgResult::Ok);
    CHECK(n.soft_configure("ring_size", 64) == Nic::CfgResult::RejectedWhileActive);
    CHECK(n.soft_configure("n_flows", 8) == Nic::CfgResult::RejectedWhileActive);
    CHECK(n.soft_configure("nonsense", 1) == Nic::CfgResult::UnknownKey);
    CHECK(n.soft_configure("lb", 9) == Nic::CfgResult::UnknownKey);
}

TEST_CASE("nic: stats text dump is key=value") {
    HardConfig cfg;
    cfg.n_flows = 1;
    Nic n(1, cfg);
    auto txt = n.stats_text();
    CHECK(txt.find("frames_rx=0") != std::string::npos);
    CHECK(txt.find("drops=0") != std::string::npos);
}
