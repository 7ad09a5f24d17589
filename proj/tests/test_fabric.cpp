#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "rpcfab/fabric.hpp"

using namespace rpcfab;
using namespace rpcfab::fabric;

namespace {

nic::HardConfig small_cfg(uint32_t flows = 1) {
    nic::HardConfig cfg;
    cfg.n_flows = flows;
    cfg.ring.batch = 2;
    cfg.ring.target_throughput_per_flow = 1e6;
    cfg.flush_timeout_ns = 0;
    return cfg;
}

wire::FrameBytes connect_frame(uint32_t c_id, uint16_t dst) {
    wire::RpcFrame f;
    f.dst_addr = dst;
    f.connection_id = c_id;
    f.kind = wire::FrameKind::Connect;
    f.frame_count = 1;
    f.payload_len_total = 2;
    return wire::encode_frame(f);
}

wire::FrameBytes request_frame(uint32_t c_id, uint32_t rpc_id, uint8_t tagbyte) {
    wire::RpcMessage m;
    m.connection_id = c_id;
    m.rpc_id = rpc_id;
    m.payload = {tagbyte, 0, 0, 0};
    return wire::encode_frame(wire::fragment(m, 0)[0]);
}

}  // namespace

TEST_CASE("fabric: registration and duplicate address") {
    Fabric fab;
    fab.create_virtual_nic(1, small_cfg());
    fab.create_virtual_nic(2, small_cfg());
    CHECK(fab.n_ports() == 2);
    CHECK_THROWS_AS(fab.create_virtual_nic(1, small_cfg()), DuplicateAddress);
    auto table = fab.switch_table();
    CHECK(table.at(1) == 0);
    CHECK(table.at(2) == 1);
}

TEST_CASE("fabric: 100 frames A to B arrive complete and in order") {
    Fabric fab;
    nic::Nic& a = fab.create_virtual_nic(1, small_cfg());
    nic::Nic& b = fab.create_virtual_nic(2, small_cfg());

    REQUIRE(a.flow(0).tx.push(connect_frame(9, 2)).has_value());
    fab.step(16);
    std::array<wire::FrameBytes, 8> scratch;
    a.flow(0).rx.poll(scratch);  // ack

    uint32_t sent = 0;
    uint32_t received = 0;
    uint32_t expect = 1;
    while (sent < 100 || received < 100) {
        if (sent < 100 && a.flow(0).tx.push(request_frame(9, sent + 1, 7))) ++sent;
        fab.step(4);
        std::size_t n = b.flow(0).rx.poll(scratch);
        for (std::size_t i = 0; i < n; ++i) {
            auto f = wire::decode_frame(scratch[i]);
            REQUIRE(f.has_value());
            REQUIRE(f->rpc_id == expect);  // per-source FIFO
            ++expect;
            ++received;
        }
    }
    CHECK(received == 100);
    CHECK(b.stats().frames_rx == 100);
    CHECK(b.stats().delivered == 100);
}

TEST_CASE("fabric: frame to an unregistered address counts on the source") {
    Fabric fab;
    nic::Nic& a = fab.create_virtual_nic(1, small_cfg());

    REQUIRE(a.flow(0).tx.push(connect_frame(5, 777)).has_value());  // no such tenant
    fab.step(8);
    CHECK(a.stats().drop_unknown_addr == 1);
}

// Per-source sequence oracle: with an all-to-one fan-in, the destination
// sees an interleaving that preserves each source's own order.
TEST_CASE("fabric: 8-NIC fan-in preserves per-source order") {
    Fabric fab;
    auto cfg = small_cfg();
    cfg.ring.batch = 4;
    cfg.ingress_capacity = 1 << 15;
    nic::HardConfig dst_cfg = cfg;
    dst_cfg.n_flows = 1;
    dst_cfg.default_lb = nic::LbPolicy::Uniform;
    nic::Nic& dst = fab.create_virtual_nic(100, dst_cfg);

    std::vector<nic::Nic*> sources;
    for (uint16_t i = 0; i < 7; ++i) sources.push_back(&fab.create_virtual_nic(1 + i, cfg));

    for (std::size_t s = 0; s < sources.size(); ++s) {
        REQUIRE(sources[s]->flow(0).tx.push(connect_frame(static_cast<uint32_t>(s), 100))
                    .has_value());
    }
    fab.step(64);
    std::array<wire::FrameBytes, 16> scratch;
    for (auto* s : sources) s->flow(0).rx.poll(scratch);  // acks

    const uint32_t kPer = 500;
    std::vector<uint32_t> sent(sources.size(), 0);
    std::vector<uint32_t> seen(sources.size(), 0);
    uint64_t total = 0;
    while (total < kPer * sources.size()) {
        for (std::size_t s = 0; s < sources.size(); ++s) {
            if (sent[s] < kPer &&
                sources[s]->flow(0).tx.push(
                    request_frame(static_cast<uint32_t>(s), sent[s] + 1, 0)))
                ++sent[s];
        }
        fab.step(sources.size() + 1);
        std::size_t n = dst.flow(0).rx.poll(scratch);
        for (std::size_t i = 0; i < n; ++i) {
            auto f = wire::decode_frame(scratch[i]);
            REQUIRE(f.has_value());
            const uint32_t src = f->connection_id;
            REQUIRE(f->rpc_id == seen[src] + 1);  // strictly sequential per source
            ++seen[src];
            ++total;
        }
    }
    for (std::size_t s = 0; s < sources.size(); ++s) CHECK(seen[s] == kPer);
    CHECK(dst.stats().drops == 0);
}

TEST_CASE("fabric: round-robin grants are fair (within 1 over any window)") {
    Fabric fab;
    for (uint16_t i = 0; i < 8; ++i) fab.create_virtual_nic(i + 1, small_cfg());

    fab.step(1000);  // not a multiple of 8
    auto grants = fab.grant_counts();
    uint64_t lo = grants[0], hi = grants[0];
    for (auto g : grants) {
        lo = std::min(lo, g);
        hi = std::max(hi, g);
    }
    CHECK(hi - lo <= 1);
    uint64_t sum = 0;
    for (auto g : grants) sum += g;
    CHECK(sum == 1000);
}

TEST_CASE("fabric: threaded modes run and stop cleanly") {
    for (auto mode : {Fabric::Mode::Deterministic, Fabric::Mode::Throughput}) {
        Fabric fab;
        nic::Nic& a = fab.create_virtual_nic(1, small_cfg());
        fab.create_virtual_nic(2, small_cfg());
        fab.start(mode);
        REQUIRE(a.flow(0).tx.push(connect_frame(3, 2)).has_value());
        std::array<wire::FrameBytes, 4> out;
        const uint64_t deadline = now_ns() + 2'000'000'000ull;
        std::size_t n = 0;
        while (n == 0 && now_ns() < deadline) n = a.flow(0).rx.poll(out);
        fab.stop();
        REQUIRE(n == 1);
        CHECK(wire::decode_frame(out[0])->kind == wire::FrameKind::ConnectAck);
    }
}
