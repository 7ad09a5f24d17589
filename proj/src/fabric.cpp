#include "rpcfab/fabric.hpp"

#include "rpcfab/util.hpp"

namespace rpcfab::fabric {

nic::Nic& Fabric::create_virtual_nic(uint16_t tenant_addr, const nic::HardConfig& cfg) {
    if (running_.load()) throw std::logic_error("cannot add a NIC while the fabric runs");
    if (table_.count(tenant_addr))
        throw DuplicateAddress("tenant address " + std::to_string(tenant_addr) +
                               " already registered");
    auto port = std::make_unique<Port>();
    port->fabric = this;
    port->index = ports_.size();
    port->nic = std::make_unique<nic::Nic>(tenant_addr, cfg);
    port->nic->bind_egress(port.get());
    table_.emplace(tenant_addr, port->index);
    ports_.push_back(std::move(port));
    return *ports_.back()->nic;
}

void Fabric::switch_forward(std::size_t src_port, const wire::FrameBytes& frame) {
    const uint16_t dst = wire::peek_dst_addr(frame);
    auto it = table_.find(dst);
    if (it == table_.end()) {
        ports_[src_port]->nic->count_unknown_addr();
        return;
    }
    nic::Nic& dest = *ports_[it->second]->nic;
    if (!dest.ingress_push(frame)) dest.count_ingress_overflow();
}

void Fabric::step(uint64_t grants) {
    const std::size_t n = ports_.size();
    if (n == 0) return;
    for (uint64_t g = 0; g < grants; ++g) {
        Port& p = *ports_[rr_];
        rr_ = (rr_ + 1) % n;
        p.grants.fetch_add(1, std::memory_order_relaxed);
        p.nic->cycle();
    }
}

void Fabric::start(Mode mode) {
    if (running_.exchange(true)) return;
    if (mode == Mode::Deterministic) {
        threads_.emplace_back([this] {
            while (running_.load(std::memory_order_relaxed)) {
                bool progress = false;
                for (auto& p : ports_) {
                    p->grants.fetch_add(1, std::memory_order_relaxed);
                    progress |= p->nic->cycle();
                }
                if (!progress) cpu_relax();
            }
        });
    } else {
        for (auto& p : ports_) {
            threads_.emplace_back([this, port = p.get()] {
                while (running_.load(std::memory_order_relaxed)) {
                    port->grants.fetch_add(1, std::memory_order_relaxed);
                    if (!port->nic->cycle()) cpu_relax();
                }
            });
        }
    }
}

void Fabric::stop() {
    if (!running_.exchange(false)) return;
    for (auto& t : threads_) t.join();
    threads_.clear();
}

std::vector<uint64_t> Fabric::grant_counts() const {
    std::vector<uint64_t> out;
    out.reserve(ports_.size());
    for (const auto& p : ports_) out.push_back(p->grants.load(std::memory_order_relaxed));
    return out;
}

std::unordered_map<uint16_t, std::size_t> Fabric::switch_table() const { return table_; }

}  // namespace rpcfab::fabric
