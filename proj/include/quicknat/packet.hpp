#pragma once

#include <cstdint>
#include <optional>
#include <span>

#include "quicknat/bytes.hpp"
#include "quicknat/checksum.hpp"
#include "quicknat/errors.hpp"
#include "quicknat/net.hpp"

namespace quicknat {

// Whether a buffer starts at an Ethernet frame or directly at the IPv4
// header. pcap input declares this through its link type.
enum class ParseMode : uint8_t {
    RawIp,
    Ethernet,
};

enum class Field : uint8_t { Src, Dst };

namespace detail {
constexpr size_t kEthHeaderLen = 14;
constexpr uint16_t kEtherTypeIpv4 = 0x0800;
constexpr size_t kIpv4MinHeaderLen = 20;
constexpr size_t kTcpMinHeaderLen = 20;
constexpr size_t kUdpHeaderLen = 8;
} // namespace detail

// Mutable in-place view of one IPv4+TCP/UDP packet. The view never owns
// or duplicates the buffer; every mutation writes straight into it and
// keeps the IPv4 and L4 checksums coherent through incremental updates.
//
// A view is confined to one worker at a time; it is cheap to copy but must
// not be used to mutate the same buffer from two threads.
class PacketView {
public:
    PacketView() = default;

    // Parses a packet buffer. Non-IPv4 frames, non-TCP/UDP protocols and
    // non-first fragments yield a view with valid()==false and
    // proto()==Other (pass-through material, not an error). Structurally
    // truncated headers throw MalformedPacket.
    static PacketView parse(std::span<uint8_t> buf, ParseMode mode) {
        PacketView v;
        v.buf_ = buf;
        if (buf.empty())
            throw MalformedPacket("empty buffer");

        size_t l3 = 0;
        if (mode == ParseMode::Ethernet) {
            if (buf.size() < detail::kEthHeaderLen)
                throw MalformedPacket("truncated ethernet header");
            if (load_be16(buf, 12) != detail::kEtherTypeIpv4)
                return v; // ARP, IPv6, ...: not ours
            l3 = detail::kEthHeaderLen;
        }

        if (buf.size() < l3 + detail::kIpv4MinHeaderLen)
            throw MalformedPacket("truncated ipv4 header");
        uint8_t ver_ihl = buf[l3];
        if ((ver_ihl >> 4) != 4)
            return v; // not IPv4
        size_t ihl_bytes = size_t(ver_ihl & 0x0F) * 4;
        if (ihl_bytes < detail::kIpv4MinHeaderLen)
            throw MalformedPacket("ipv4 IHL below minimum");
        uint16_t total_len = load_be16(buf, l3 + 2);
        if (total_len < ihl_bytes)
            throw MalformedPacket("ipv4 total length below header length");
        if (buf.size() < l3 + total_len)
            throw MalformedPacket("buffer shorter than ipv4 total length");
        if (buf.size() < l3 + ihl_bytes)
            throw MalformedPacket("buffer shorter than ipv4 IHL");

        v.l3_offset_ = l3;
        v.l4_offset_ = l3 + ihl_bytes;
        v.l3_end_ = l3 + total_len;

        uint16_t flags_frag = load_be16(buf, l3 + 6);
        if ((flags_frag & 0x1FFF) != 0)
            return v; // non-first fragment: no L4 header present

        uint8_t proto_byte = buf[l3 + 9];
        size_t l4_len = v.l3_end_ - v.l4_offset_;
        if (proto_byte == uint8_t(Proto::Tcp)) {
            if (l4_len < detail::kTcpMinHeaderLen)
                throw MalformedPacket("truncated tcp header");
            v.proto_ = Proto::Tcp;
        } else if (proto_byte == uint8_t(Proto::Udp)) {
            if (l4_len < detail::kUdpHeaderLen)
                throw MalformedPacket("truncated udp header");
            v.proto_ = Proto::Udp;
        } else {
            return v; // ICMP etc.: pass-through material
        }
        v.valid_ = true;
        return v;
    }

    bool valid() const { return valid_; }
    Proto proto() const { return proto_; }
    size_t l3_offset() const { return l3_offset_; }
    size_t l4_offset() const { return l4_offset_; }
    std::span<uint8_t> buffer() const { return buf_; }

    FiveTuple five_tuple() const {
        require_valid("five_tuple");
        FiveTuple t;
        t.src_ip = Ipv4Addr{load_be32(buf_, l3_offset_ + 12)};
        t.dst_ip = Ipv4Addr{load_be32(buf_, l3_offset_ + 16)};
        t.src_port = load_be16(buf_, l4_offset_ + 0);
        t.dst_port = load_be16(buf_, l4_offset_ + 2);
        t.proto = proto_;
        return t;
    }

    // Overwrites the selected address (and port, unless nullopt = keep) in
    // place, updating the IPv4 header checksum and TCP/UDP checksum
    // incrementally. A UDP checksum of 0 (disabled) is left at 0.
    void rewrite(Field which, Ipv4Addr new_ip, std::optional<uint16_t> new_port) {
        require_valid("rewrite");
        size_t ip_off = l3_offset_ + (which == Field::Src ? 12 : 16);
        size_t port_off = l4_offset_ + (which == Field::Src ? 0 : 2);

        uint32_t old_ip = load_be32(buf_, ip_off);
        uint16_t old_port = load_be16(buf_, port_off);
        uint32_t nip = new_ip.value;
        uint16_t nport = new_port.value_or(old_port);

        if (old_ip != nip) {
            store_be32(buf_, ip_off, nip);
            set_ip_checksum(incr_csum_update32(ip_checksum(), old_ip, nip));
        }

        size_t l4_csum_off = l4_checksum_offset();
        uint16_t l4_csum = load_be16(buf_, l4_csum_off);
        bool udp_disabled = proto_ == Proto::Udp && l4_csum == 0;
        if (!udp_disabled) {
            if (old_ip != nip)
                l4_csum = incr_csum_update32(l4_csum, old_ip, nip);
            if (old_port != nport)
                l4_csum = incr_csum_update(l4_csum, old_port, nport);
            if (proto_ == Proto::Udp && l4_csum == 0)
                l4_csum = 0xFFFF; // 0 is reserved for "no checksum"
            store_be16(buf_, l4_csum_off, l4_csum);
        }
        if (old_port != nport)
            store_be16(buf_, port_off, nport);
    }

    uint16_t ip_checksum() const {
        return load_be16(buf_, l3_offset_ + 10);
    }

    uint16_t l4_checksum() const {
        return load_be16(buf_, l4_checksum_offset());
    }

    // End of the IPv4 packet (headers + payload) within the buffer; the
    // buffer may extend further (Ethernet padding).
    size_t l3_end() const { return l3_end_; }

private:
    void require_valid(const char* op) const {
        if (!valid_)
            throw ContractViolation(std::string(op) + " called on invalid packet view");
    }

    size_t l4_checksum_offset() const {
        return l4_offset_ + (proto_ == Proto::Tcp ? 16 : 6);
    }

    void set_ip_checksum(uint16_t v) {
        store_be16(buf_, l3_offset_ + 10, v);
    }

    std::span<uint8_t> buf_;
    size_t l3_offset_ = 0;
    size_t l4_offset_ = 0;
    size_t l3_end_ = 0;
    Proto proto_ = Proto::Other;
    bool valid_ = false;
};

} // namespace quicknat
