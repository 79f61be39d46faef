#pragma once

#include <cstdint>
#include <span>

#include "quicknat/bytes.hpp"
#include "quicknat/net.hpp"

namespace quicknat {

// Internet checksum arithmetic. Checksums and data words are handled as
// the host-order value of each big-endian 16-bit word, so no byte-order
// conversion is needed around the math itself.

// One's-complement addition with end-around carry.
inline uint16_t ones_add(uint16_t a, uint16_t b) {
    uint32_t s = uint32_t(a) + uint32_t(b);
    return uint16_t((s & 0xFFFF) + (s >> 16));
}

// Incremental update: recomputes a stored checksum after one covered
// 16-bit word changes from old_word to new_word (~ HC' = ~(~HC + ~m + m')).
// An unchanged word returns the checksum verbatim; the formula alone
// would flip the negative-zero form 0xFFFF to 0x0000.
inline uint16_t incr_csum_update(uint16_t csum, uint16_t old_word, uint16_t new_word) {
    if (old_word == new_word)
        return csum;
    uint16_t sum = ones_add(uint16_t(~csum), uint16_t(~old_word));
    sum = ones_add(sum, new_word);
    return uint16_t(~sum);
}

// Update for a 32-bit field change (an IPv4 address), applied as two
// independent 16-bit word updates.
inline uint16_t incr_csum_update32(uint16_t csum, uint32_t old_val, uint32_t new_val) {
    csum = incr_csum_update(csum, uint16_t(old_val >> 16), uint16_t(new_val >> 16));
    csum = incr_csum_update(csum, uint16_t(old_val), uint16_t(new_val));
    return csum;
}

// One's-complement sum over a byte range (padded with a zero byte when the
// length is odd). Returns the un-complemented sum for chaining.
inline uint16_t ones_sum(std::span<const uint8_t> data) {
    uint32_t acc = 0;
    size_t i = 0;
    for (; i + 1 < data.size(); i += 2)
        acc += uint32_t(data[i]) << 8 | data[i + 1];
    if (i < data.size())
        acc += uint32_t(data[i]) << 8;
    while (acc >> 16)
        acc = (acc & 0xFFFF) + (acc >> 16);
    return uint16_t(acc);
}

// Full checksum of a byte range: complement of the one's-complement sum.
// The field being computed must be zeroed in the input.
inline uint16_t checksum_full(std::span<const uint8_t> data) {
    return uint16_t(~ones_sum(data));
}

// TCP/UDP checksum: pseudo-header (addresses, protocol, L4 length)
// followed by the L4 segment with its checksum field zeroed by the caller.
inline uint16_t l4_checksum_full(Ipv4Addr src, Ipv4Addr dst, Proto proto,
                                 std::span<const uint8_t> l4_segment) {
    uint8_t pseudo[12];
    store_be32(pseudo, 0, src.value);
    store_be32(pseudo, 4, dst.value);
    pseudo[8] = 0;
    pseudo[9] = uint8_t(proto);
    store_be16(pseudo, 10, uint16_t(l4_segment.size()));
    uint32_t acc = uint32_t(ones_sum(pseudo)) + uint32_t(ones_sum(l4_segment));
    while (acc >> 16)
        acc = (acc & 0xFFFF) + (acc >> 16);
    return uint16_t(~acc);
}

} // namespace quicknat
