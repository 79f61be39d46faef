#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <tuple>

#include "quicknat/bytes.hpp"

namespace quicknat {

enum class Proto : uint8_t {
    Other = 0,
    Tcp   = 6,
    Udp   = 17,
};

inline const char* to_string(Proto p) {
    switch (p) {
        case Proto::Tcp: return "tcp";
        case Proto::Udp: return "udp";
        default: return "other";
    }
}

// IPv4 address held as a host-order 32-bit value.
struct Ipv4Addr {
    uint32_t value = 0;

    constexpr Ipv4Addr() = default;
    constexpr explicit Ipv4Addr(uint32_t v) : value(v) {}
    constexpr Ipv4Addr(uint8_t a, uint8_t b, uint8_t c, uint8_t d)
        : value(uint32_t(a) << 24 | uint32_t(b) << 16 | uint32_t(c) << 8 | uint32_t(d)) {}

    friend constexpr bool operator==(Ipv4Addr x, Ipv4Addr y) { return x.value == y.value; }
    friend constexpr bool operator!=(Ipv4Addr x, Ipv4Addr y) { return x.value != y.value; }
    friend constexpr bool operator<(Ipv4Addr x, Ipv4Addr y) { return x.value < y.value; }
};

// All-ones mask of the given prefix length. prefix_len 0 gives 0.
constexpr uint32_t prefix_mask(unsigned prefix_len) {
    return prefix_len == 0 ? 0u : ~uint32_t(0) << (32 - prefix_len);
}

constexpr Ipv4Addr masked(Ipv4Addr a, unsigned prefix_len) {
    return Ipv4Addr{a.value & prefix_mask(prefix_len)};
}

inline std::string to_string(Ipv4Addr a) {
    return std::to_string(a.value >> 24) + "." + std::to_string((a.value >> 16) & 0xFF) + "." +
           std::to_string((a.value >> 8) & 0xFF) + "." + std::to_string(a.value & 0xFF);
}

// Parses dotted-quad notation. Rejects anything but exactly four decimal
// octets in range.
inline std::optional<Ipv4Addr> parse_ipv4(std::string_view s) {
    uint32_t v = 0;
    int octets = 0;
    size_t i = 0;
    while (octets < 4) {
        if (i >= s.size() || s[i] < '0' || s[i] > '9') return std::nullopt;
        uint32_t oct = 0;
        size_t digits = 0;
        while (i < s.size() && s[i] >= '0' && s[i] <= '9') {
            oct = oct * 10 + uint32_t(s[i] - '0');
            if (oct > 255 || ++digits > 3) return std::nullopt;
            ++i;
        }
        v = v << 8 | oct;
        ++octets;
        if (octets < 4) {
            if (i >= s.size() || s[i] != '.') return std::nullopt;
            ++i;
        }
    }
    if (i != s.size()) return std::nullopt;
    return Ipv4Addr{v};
}

struct Endpoint {
    Ipv4Addr ip;
    uint16_t port = 0;

    friend constexpr bool operator==(const Endpoint& x, const Endpoint& y) {
        return x.ip == y.ip && x.port == y.port;
    }
    friend constexpr bool operator!=(const Endpoint& x, const Endpoint& y) { return !(x == y); }
};

inline std::string to_string(const Endpoint& e) {
    return to_string(e.ip) + ":" + std::to_string(e.port);
}

struct FiveTuple {
    Ipv4Addr src_ip;
    Ipv4Addr dst_ip;
    uint16_t src_port = 0;
    uint16_t dst_port = 0;
    Proto proto = Proto::Other;

    Endpoint src() const { return {src_ip, src_port}; }
    Endpoint dst() const { return {dst_ip, dst_port}; }

    FiveTuple reversed() const {
        return {dst_ip, src_ip, dst_port, src_port, proto};
    }

    friend bool operator==(const FiveTuple& x, const FiveTuple& y) {
        return x.src_ip == y.src_ip && x.dst_ip == y.dst_ip && x.src_port == y.src_port &&
               x.dst_port == y.dst_port && x.proto == y.proto;
    }
    friend bool operator!=(const FiveTuple& x, const FiveTuple& y) { return !(x == y); }
};

inline std::string to_string(const FiveTuple& t) {
    return std::string(to_string(t.proto)) + " " + to_string(t.src()) + " -> " + to_string(t.dst());
}

inline uint64_t hash_tuple(const FiveTuple& t, uint64_t seed = 0) {
    uint64_t a = uint64_t(t.src_ip.value) << 16 | t.src_port;
    uint64_t b = uint64_t(t.dst_ip.value) << 16 | t.dst_port;
    return mix64(mix64(a, seed) ^ (b * 0x9e3779b97f4a7c15ULL) ^ uint64_t(t.proto));
}

// Order-independent over the two endpoints, so both directions of a flow
// hash alike (software stand-in for symmetric RSS).
inline uint64_t symmetric_flow_hash(const FiveTuple& t, uint64_t seed = 0) {
    uint64_t a = uint64_t(t.src_ip.value) << 16 | t.src_port;
    uint64_t b = uint64_t(t.dst_ip.value) << 16 | t.dst_port;
    uint64_t lo = a < b ? a : b;
    uint64_t hi = a < b ? b : a;
    return mix64(mix64(lo, seed) ^ mix64(hi ^ 0x517cc1b727220a95ULL, seed) ^ uint64_t(t.proto));
}

} // namespace quicknat
