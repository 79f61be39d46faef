#pragma once

#include <atomic>
#include <cstdint>
#include <memory>
#include <optional>
#include <vector>

#include "quicknat/bytes.hpp"
#include "quicknat/errors.hpp"
#include "quicknat/net.hpp"

namespace quicknat {

struct PoolConfig {
    std::vector<Ipv4Addr> public_ips;
    uint16_t port_lo = 1024;
    uint16_t port_hi = 65535;
    uint64_t seed = 0;

    bool valid() const { return !public_ips.empty() && port_lo <= port_hi; }
    size_t triples_per_proto() const {
        return public_ips.size() * (size_t(port_hi) - port_lo + 1);
    }
};

// An exclusive claim on one public (ip, port, proto) triple. The id token
// lets the pool detect releases of leases that are no longer live.
struct Lease {
    Ipv4Addr ip;
    uint16_t port = 0;
    Proto proto = Proto::Other;
    uint64_t id = 0;
};

// Allocator for public endpoints. TCP and UDP port spaces are
// independent. Allocation is safe under unrestricted concurrency: a
// triple is claimed with one CAS on its occupancy bit, so two concurrent
// allocations can never return the same triple.
//
// Slot order round-robins across the configured IPs, then advances
// through the port range. Callers that pass a flow_hint get a
// seed-derived start slot, making the flow-to-endpoint assignment
// independent of allocation order whenever hinted slots do not collide.
class NatPool {
public:
    explicit NatPool(PoolConfig cfg) : cfg_(std::move(cfg)) {
        if (!cfg_.valid())
            throw InvalidRule("pool needs at least one ip and a non-empty port range");
        size_t n = cfg_.triples_per_proto();
        for (auto& s : per_proto_) {
            s.bits = std::vector<std::atomic<uint64_t>>((n + 63) / 64);
            s.generation = std::vector<std::atomic<uint32_t>>(n);
            s.cursor.store(0, std::memory_order_relaxed);
            s.live.store(0, std::memory_order_relaxed);
        }
    }

    // Claims a free triple, or nullopt when the protocol's space is
    // exhausted.
    std::optional<Lease> allocate(Proto proto,
                                  std::optional<uint64_t> flow_hint = std::nullopt) {
        Space& s = space(proto);
        size_t n = cfg_.triples_per_proto();
        size_t start = flow_hint ? size_t(mix64(*flow_hint, cfg_.seed) % n)
                                 : size_t(s.cursor.fetch_add(1, std::memory_order_relaxed) % n);
        for (size_t step = 0; step < n; ++step) {
            size_t idx = start + step;
            if (idx >= n) idx -= n;
            uint64_t bit = 1ULL << (idx & 63);
            std::atomic<uint64_t>& word = s.bits[idx >> 6];
            uint64_t cur = word.load(std::memory_order_relaxed);
            while (!(cur & bit)) {
                if (word.compare_exchange_weak(cur, cur | bit, std::memory_order_acq_rel)) {
                    uint32_t gen = s.generation[idx].fetch_add(1, std::memory_order_relaxed) + 1;
                    s.live.fetch_add(1, std::memory_order_relaxed);
                    auto [ip, port] = endpoint_of(idx);
                    return Lease{ip, port, proto, uint64_t(idx) << 32 | gen};
                }
                // CAS failure reloaded cur; loop exits if this bit was taken.
            }
        }
        return std::nullopt;
    }

    // Returns a triple to the pool. Throws DoubleRelease when the lease
    // is not live (already released, or its triple re-leased since).
    void release(const Lease& lease) {
        Space& s = space(lease.proto);
        size_t idx = size_t(lease.id >> 32);
        uint32_t gen = uint32_t(lease.id);
        size_t n = cfg_.triples_per_proto();
        if (idx >= n || endpoint_of(idx) != std::pair(lease.ip, lease.port))
            throw DoubleRelease("lease does not belong to this pool");
        if (s.generation[idx].load(std::memory_order_relaxed) != gen)
            throw DoubleRelease("lease superseded: " + to_string(lease.ip) + ":" +
                                std::to_string(lease.port));
        uint64_t bit = 1ULL << (idx & 63);
        uint64_t prev = s.bits[idx >> 6].fetch_and(~bit, std::memory_order_acq_rel);
        if (!(prev & bit))
            throw DoubleRelease("lease already released: " + to_string(lease.ip) + ":" +
                                std::to_string(lease.port));
        s.live.fetch_sub(1, std::memory_order_relaxed);
    }

    struct Occupancy {
        size_t total_per_proto;
        size_t live_tcp;
        size_t live_udp;
    };

    Occupancy occupancy() const {
        return {cfg_.triples_per_proto(),
                per_proto_[0].live.load(std::memory_order_relaxed),
                per_proto_[1].live.load(std::memory_order_relaxed)};
    }

    const PoolConfig& config() const { return cfg_; }

    // Slot a hinted allocation starts from (exposed so determinism tests
    // can verify hint collisions are absent).
    size_t hint_slot(uint64_t flow_hint) const {
        return size_t(mix64(flow_hint, cfg_.seed) % cfg_.triples_per_proto());
    }

private:
    struct Space {
        std::vector<std::atomic<uint64_t>> bits;
        std::vector<std::atomic<uint32_t>> generation;
        std::atomic<uint64_t> cursor{0};
        std::atomic<size_t> live{0};
    };

    Space& space(Proto p) { return per_proto_[p == Proto::Udp ? 1 : 0]; }

    std::pair<Ipv4Addr, uint16_t> endpoint_of(size_t idx) const {
        size_t n_ips = cfg_.public_ips.size();
        return {cfg_.public_ips[idx % n_ips], uint16_t(cfg_.port_lo + idx / n_ips)};
    }

    PoolConfig cfg_;
    Space per_proto_[2];
};

} // namespace quicknat
