#pragma once

#include <cstdint>
#include <optional>
#include <utility>
#include <vector>

#include "quicknat/packet.hpp"

namespace quicknat {

// pcap link types this engine understands.
enum class LinkType : uint32_t {
    Ethernet = 1,
    RawIp = 101,
};

inline ParseMode parse_mode_of(LinkType lt) {
    return lt == LinkType::Ethernet ? ParseMode::Ethernet : ParseMode::RawIp;
}

// One captured or synthesized packet. The buffer is owned and moves
// through the pipeline without duplication.
struct Packet {
    std::vector<uint8_t> bytes;
    uint32_t ts_sec = 0;
    uint32_t ts_usec = 0;

    uint64_t ts_ns() const {
        return uint64_t(ts_sec) * 1'000'000'000ULL + uint64_t(ts_usec) * 1'000ULL;
    }

    friend bool operator==(const Packet& a, const Packet& b) {
        return a.bytes == b.bytes && a.ts_sec == b.ts_sec && a.ts_usec == b.ts_usec;
    }
};

// Which side of the gateway a packet entered from. Outbound traffic is
// subject to SNAT rules, inbound to DNAT rules.
enum class Direction : uint8_t { Outbound = 0, Inbound = 1 };

class PacketSource {
public:
    virtual ~PacketSource() = default;
    virtual std::optional<Packet> next() = 0;
    virtual LinkType link_type() const = 0;
};

class PacketSink {
public:
    virtual ~PacketSink() = default;
    virtual void write(const Packet& pkt) = 0;
};

class MemorySource : public PacketSource {
public:
    explicit MemorySource(std::vector<Packet> packets, LinkType lt = LinkType::RawIp)
        : packets_(std::move(packets)), link_(lt) {}

    std::optional<Packet> next() override {
        if (pos_ >= packets_.size())
            return std::nullopt;
        return std::move(packets_[pos_++]);
    }

    LinkType link_type() const override { return link_; }

private:
    std::vector<Packet> packets_;
    size_t pos_ = 0;
    LinkType link_;
};

class MemorySink : public PacketSink {
public:
    void write(const Packet& pkt) override { packets_.push_back(pkt); }
    const std::vector<Packet>& packets() const { return packets_; }
    std::vector<Packet>& packets() { return packets_; }

private:
    std::vector<Packet> packets_;
};

// A source bound to its ingress side.
struct DirectedPacket {
    Packet packet;
    Direction direction = Direction::Outbound;
    LinkType link = LinkType::RawIp;
};

class DirectedSource {
public:
    virtual ~DirectedSource() = default;
    virtual std::optional<DirectedPacket> next() = 0;
};

class SingleDirectionSource : public DirectedSource {
public:
    SingleDirectionSource(PacketSource& src, Direction dir) : src_(src), dir_(dir) {}

    std::optional<DirectedPacket> next() override {
        auto p = src_.next();
        if (!p)
            return std::nullopt;
        return DirectedPacket{std::move(*p), dir_, src_.link_type()};
    }

private:
    PacketSource& src_;
    Direction dir_;
};

// Interleaves two sides by capture timestamp (ties favor the first
// source), the way two NIC queues would be drained.
class MergedSource : public DirectedSource {
public:
    MergedSource(PacketSource& a, Direction dir_a, PacketSource& b, Direction dir_b)
        : a_(a), b_(b), dir_a_(dir_a), dir_b_(dir_b) {}

    std::optional<DirectedPacket> next() override {
        if (!peek_a_)
            peek_a_ = a_.next();
        if (!peek_b_)
            peek_b_ = b_.next();
        if (!peek_a_ && !peek_b_)
            return std::nullopt;
        bool take_a;
        if (!peek_b_)
            take_a = true;
        else if (!peek_a_)
            take_a = false;
        else
            take_a = key(*peek_a_) <= key(*peek_b_);
        if (take_a) {
            DirectedPacket out{std::move(*peek_a_), dir_a_, a_.link_type()};
            peek_a_.reset();
            return out;
        }
        DirectedPacket out{std::move(*peek_b_), dir_b_, b_.link_type()};
        peek_b_.reset();
        return out;
    }

private:
    static uint64_t key(const Packet& p) { return p.ts_ns(); }

    PacketSource& a_;
    PacketSource& b_;
    Direction dir_a_;
    Direction dir_b_;
    std::optional<Packet> peek_a_;
    std::optional<Packet> peek_b_;
};

} // namespace quicknat
