#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <stdexcept>
#include <thread>
#include <unordered_map>
#include <vector>

#include "rpcfab/nic.hpp"

// Multi-tenant virtualization: several NIC instances on one device with
// fair round-robin arbitration, connected through a static-table L2 switch
// (a loop-back network; frames never leave the process).

namespace rpcfab::fabric {

struct DuplicateAddress : std::runtime_error {
    using std::runtime_error::runtime_error;
};

class Fabric {
  public:
    Fabric() = default;
    ~Fabric() { stop(); }
    Fabric(const Fabric&) = delete;
    Fabric& operator=(const Fabric&) = delete;

    /// Instantiates an independent NIC bound to a switch port. Throws
    /// DuplicateAddress when the tenant address is already registered.
    nic::Nic& create_virtual_nic(uint16_t tenant_addr, const nic::HardConfig& cfg);

    nic::Nic& nic_at(std::size_t port) { return *ports_[port]->nic; }
    std::size_t n_ports() const { return ports_.size(); }

    /// Runs the arbiter on the calling thread for exactly n grants
    /// (deterministic mode). A NIC reporting no progress is skipped
    /// without stalling the others.
    void step(uint64_t grants);

    /// Mode for the background runner.
    enum class Mode {
        Deterministic,  // one arbiter thread grants cycles round robin
        Throughput,     // one thread per NIC
    };

    void start(Mode mode = Mode::Deterministic);
    void stop();

    /// Grants issued to each port by the round-robin arbiter so far.
    std::vector<uint64_t> grant_counts() const;

    /// The static switching table: tenant address -> port index.
    std::unordered_map<uint16_t, std::size_t> switch_table() const;

  private:
    struct Port : nic::EgressPort {
        Fabric* fabric = nullptr;
        std::size_t index = 0;
        std::unique_ptr<nic::Nic> nic;
        std::atomic<uint64_t> grants{0};

        void forward(const wire::FrameBytes& frame) override {
            fabric->switch_forward(index, frame);
        }
    };

    /// L2 forwarding: in-order per (source, destination); a frame to an
    /// unregistered address is dropped and counted on the source NIC;
    /// ingress overflow drops count on the destination.
    void switch_forward(std::size_t src_port, const wire::FrameBytes& frame);

    std::vector<std::unique_ptr<Port>> ports_;
    std::unordered_map<uint16_t, std::size_t> table_;

    std::atomic<bool> running_{false};
    std::vector<std::thread> threads_;
    std::size_t rr_ = 0;
};

}  // namespace rpcfab::fabric
