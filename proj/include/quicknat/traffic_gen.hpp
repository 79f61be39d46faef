#pragma once

#include <cstdint>
#include <random>
#include <span>
#include <vector>

#include "quicknat/bytes.hpp"
#include "quicknat/checksum.hpp"
#include "quicknat/errors.hpp"
#include "quicknat/net.hpp"
#include "quicknat/packet_stream.hpp"

namespace quicknat {

// Builds one raw-IPv4 TCP or UDP packet with correct checksums.
// packet_size is the full IPv4 length; the payload is zero-filled after
// the caller's bytes.
inline Packet build_packet(Proto proto, Endpoint src, Endpoint dst, size_t packet_size,
                           std::span<const uint8_t> payload = {}, uint16_t ip_id = 0,
                           uint32_t ts_sec = 0, uint32_t ts_usec = 0) {
    size_t l4_header = proto == Proto::Tcp ? 20 : 8;
    size_t min_size = 20 + l4_header + payload.size();
    if (proto != Proto::Tcp && proto != Proto::Udp)
        throw ContractViolation("build_packet supports tcp and udp only");
    if (packet_size < min_size)
        packet_size = min_size;
    if (packet_size > 0xFFFF)
        throw ContractViolation("packet size exceeds ipv4 total length");

    Packet pkt;
    pkt.ts_sec = ts_sec;
    pkt.ts_usec = ts_usec;
    pkt.bytes.assign(packet_size, 0);
    std::span<uint8_t> b = pkt.bytes;

    // IPv4 header
    b[0] = 0x45;
    b[8] = 64; // TTL
    b[9] = uint8_t(proto);
    store_be16(b, 2, uint16_t(packet_size));
    store_be16(b, 4, ip_id);
    store_be32(b, 12, src.ip.value);
    store_be32(b, 16, dst.ip.value);
    store_be16(b, 10, checksum_full(b.subspan(0, 20)));

    // L4 header
    std::span<uint8_t> l4 = b.subspan(20);
    store_be16(l4, 0, src.port);
    store_be16(l4, 2, dst.port);
    if (proto == Proto::Tcp) {
        store_be32(l4, 4, 1);      // seq
        l4[12] = 5 << 4;           // data offset
        l4[13] = 0x10;             // ACK
        store_be16(l4, 14, 65535); // window
    } else {
        store_be16(l4, 4, uint16_t(l4.size()));
    }
    if (!payload.empty())
        std::copy(payload.begin(), payload.end(), l4.begin() + ptrdiff_t(l4_header));

    size_t csum_off = proto == Proto::Tcp ? 16 : 6;
    store_be16(l4, csum_off, 0);
    uint16_t csum = l4_checksum_full(src.ip, dst.ip, proto, l4);
    if (proto == Proto::Udp && csum == 0)
        csum = 0xFFFF;
    store_be16(l4, csum_off, csum);
    return pkt;
}

// Deterministic synthetic workload: n_flows flows between the private
// and remote subnets, packets_per_flow packets each, interleaved
// round-robin. The seed fully determines the stream. Payloads carry the
// flow id and a per-flow sequence number so ordering checks can replay
// them.
struct TrafficSpec {
    uint32_t n_flows = 1;
    uint32_t packets_per_flow = 1;
    Ipv4Addr private_subnet = Ipv4Addr(192, 168, 0, 0);
    uint8_t private_prefix = 16;
    Ipv4Addr remote_subnet = Ipv4Addr(198, 51, 100, 0);
    uint8_t remote_prefix = 24;
    double tcp_fraction = 1.0;
    uint32_t packet_size = 64;
    uint64_t seed = 1;
};

namespace gen_detail {

struct FlowPlan {
    FiveTuple tuple;
    uint32_t sent = 0;
};

inline Ipv4Addr pick_host(std::mt19937_64& rng, Ipv4Addr subnet, uint8_t prefix) {
    uint32_t host_bits = 32 - prefix;
    uint32_t host_space = host_bits >= 32 ? ~uint32_t(0) : (1u << host_bits) - 1;
    uint32_t host = host_space == 0 ? 0 : uint32_t(rng() % host_space) + 1; // skip .0
    return Ipv4Addr{masked(subnet, prefix).value | (host & host_space)};
}

inline std::vector<FlowPlan> plan_flows(const TrafficSpec& spec) {
    std::mt19937_64 rng(spec.seed);
    std::vector<FlowPlan> flows;
    flows.reserve(spec.n_flows);
    for (uint32_t i = 0; i < spec.n_flows; ++i) {
        FlowPlan f;
        f.tuple.src_ip = pick_host(rng, spec.private_subnet, spec.private_prefix);
        f.tuple.dst_ip = pick_host(rng, spec.remote_subnet, spec.remote_prefix);
        f.tuple.src_port = uint16_t(1024 + rng() % (65536 - 1024));
        f.tuple.dst_port = uint16_t(1 + rng() % 65535);
        double toss = double(rng() % 1'000'000) / 1'000'000.0;
        f.tuple.proto = toss < spec.tcp_fraction ? Proto::Tcp : Proto::Udp;
        flows.push_back(f);
    }
    return flows;
}

} // namespace gen_detail

// Streaming generator; memory use is independent of the trace length.
class SyntheticSource : public PacketSource {
public:
    explicit SyntheticSource(const TrafficSpec& spec)
        : spec_(spec), flows_(gen_detail::plan_flows(spec)) {
        if (spec.packet_size < 64)
            throw ContractViolation("packet_size below the 64-byte minimum");
    }

    std::optional<Packet> next() override {
        if (emitted_ >= uint64_t(spec_.n_flows) * spec_.packets_per_flow || flows_.empty())
            return std::nullopt;
        // Round-robin across flows.
        while (flows_[flow_cursor_].sent >= spec_.packets_per_flow)
            flow_cursor_ = (flow_cursor_ + 1) % flows_.size();
        gen_detail::FlowPlan& f = flows_[flow_cursor_];
        flow_cursor_ = (flow_cursor_ + 1) % flows_.size();
        uint8_t payload[8];
        store_be32(payload, 0, uint32_t(&f - flows_.data()));
        store_be32(payload, 4, f.sent);
        uint64_t us = emitted_;
        Packet pkt = build_packet(f.tuple.proto, f.tuple.src(), f.tuple.dst(), spec_.packet_size,
                                  payload, uint16_t(f.sent), uint32_t(us / 1'000'000),
                                  uint32_t(us % 1'000'000));
        ++f.sent;
        ++emitted_;
        return pkt;
    }

    LinkType link_type() const override { return LinkType::RawIp; }

    const std::vector<gen_detail::FlowPlan>& flows() const { return flows_; }

private:
    TrafficSpec spec_;
    std::vector<gen_detail::FlowPlan> flows_;
    size_t flow_cursor_ = 0;
    uint64_t emitted_ = 0;
};

inline std::vector<Packet> generate(const TrafficSpec& spec) {
    SyntheticSource src(spec);
    std::vector<Packet> out;
    out.reserve(size_t(spec.n_flows) * spec.packets_per_flow);
    while (auto p = src.next())
        out.push_back(std::move(*p));
    return out;
}

} // namespace quicknat
