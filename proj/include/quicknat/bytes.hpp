#pragma once

#include <cstdint>
#include <cstddef>
#include <span>

namespace quicknat {

// Big-endian field access into packet buffers. All multi-byte header
// fields on the wire are big-endian; values in the rest of the code are
// plain host integers.

inline uint16_t load_be16(std::span<const uint8_t> buf, size_t off) {
    return static_cast<uint16_t>(uint16_t(buf[off]) << 8 | uint16_t(buf[off + 1]));
}

inline uint32_t load_be32(std::span<const uint8_t> buf, size_t off) {
    return uint32_t(buf[off]) << 24 | uint32_t(buf[off + 1]) << 16 |
           uint32_t(buf[off + 2]) << 8 | uint32_t(buf[off + 3]);
}

inline void store_be16(std::span<uint8_t> buf, size_t off, uint16_t v) {
    buf[off]     = uint8_t(v >> 8);
    buf[off + 1] = uint8_t(v);
}

inline void store_be32(std::span<uint8_t> buf, size_t off, uint32_t v) {
    buf[off]     = uint8_t(v >> 24);
    buf[off + 1] = uint8_t(v >> 16);
    buf[off + 2] = uint8_t(v >> 8);
    buf[off + 3] = uint8_t(v);
}

inline uint32_t load_le32(std::span<const uint8_t> buf, size_t off) {
    return uint32_t(buf[off]) | uint32_t(buf[off + 1]) << 8 |
           uint32_t(buf[off + 2]) << 16 | uint32_t(buf[off + 3]) << 24;
}

inline uint16_t load_le16(std::span<const uint8_t> buf, size_t off) {
    return static_cast<uint16_t>(uint16_t(buf[off]) | uint16_t(buf[off + 1]) << 8);
}

inline void store_le32(std::span<uint8_t> buf, size_t off, uint32_t v) {
    buf[off]     = uint8_t(v);
    buf[off + 1] = uint8_t(v >> 8);
    buf[off + 2] = uint8_t(v >> 16);
    buf[off + 3] = uint8_t(v >> 24);
}

inline void store_le16(std::span<uint8_t> buf, size_t off, uint16_t v) {
    buf[off]     = uint8_t(v);
    buf[off + 1] = uint8_t(v >> 8);
}

// splitmix64 finalizer. Used as the seedable hash everywhere a
// well-distributed 64-bit mix is needed (rule tables, conntrack,
// dispatch, pool placement).
inline uint64_t mix64(uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline uint64_t mix64(uint64_t x, uint64_t seed) {
    return mix64(x ^ mix64(seed));
}

// Keeps a value observable so timed loops are not optimized away.
template <typename T>
inline void do_not_optimize(T const& value) {
    asm volatile("" : : "g"(value) : "memory");
}

} // namespace quicknat
