#pragma once

#include <array>
#include <cstdint>
#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include "quicknat/bytes.hpp"
#include "quicknat/errors.hpp"
#include "quicknat/packet_stream.hpp"

namespace quicknat {

// Classic pcap only (no pcapng). Reading accepts both byte orders and
// the nanosecond-timestamp magic; writing always emits little-endian
// microsecond files.

namespace pcap_detail {
constexpr uint32_t kMagicUsec = 0xA1B2C3D4;
constexpr uint32_t kMagicNsec = 0xA1B23C4D;
constexpr size_t kFileHeaderLen = 24;
constexpr size_t kRecordHeaderLen = 16;

inline uint32_t swap32(uint32_t v) {
    return v >> 24 | (v >> 8 & 0xFF00) | (v << 8 & 0xFF0000) | v << 24;
}
} // namespace pcap_detail

class PcapReader : public PacketSource {
public:
    explicit PcapReader(const std::string& path) {
        file_.reset(std::fopen(path.c_str(), "rb"));
        if (!file_)
            throw IoError("cannot open pcap file: " + path);
        std::array<uint8_t, pcap_detail::kFileHeaderLen> hdr;
        if (std::fread(hdr.data(), 1, hdr.size(), file_.get()) != hdr.size())
            throw BadMagic("pcap file header truncated: " + path);
        uint32_t magic = load_le32(hdr, 0);
        if (magic == pcap_detail::kMagicUsec) {
            swapped_ = false;
            nanosecond_ = false;
        } else if (magic == pcap_detail::kMagicNsec) {
            swapped_ = false;
            nanosecond_ = true;
        } else if (pcap_detail::swap32(magic) == pcap_detail::kMagicUsec) {
            swapped_ = true;
            nanosecond_ = false;
        } else if (pcap_detail::swap32(magic) == pcap_detail::kMagicNsec) {
            swapped_ = true;
            nanosecond_ = true;
        } else {
            throw BadMagic("not a pcap file: " + path);
        }
        link_ = static_cast<LinkType>(field(hdr, 20));
    }

    std::optional<Packet> next() override {
        std::array<uint8_t, pcap_detail::kRecordHeaderLen> rec;
        size_t got = std::fread(rec.data(), 1, rec.size(), file_.get());
        if (got == 0)
            return std::nullopt;
        if (got != rec.size())
            throw TruncatedRecord("pcap record header truncated");
        Packet p;
        p.ts_sec = field(rec, 0);
        uint32_t frac = field(rec, 4);
        p.ts_usec = nanosecond_ ? frac / 1000 : frac;
        uint32_t incl_len = field(rec, 8);
        if (incl_len > kMaxRecordLen)
            throw TruncatedRecord("pcap record length implausible");
        p.bytes.resize(incl_len);
        if (std::fread(p.bytes.data(), 1, incl_len, file_.get()) != incl_len)
            throw TruncatedRecord("pcap record body truncated");
        return p;
    }

    LinkType link_type() const override { return link_; }

private:
    static constexpr uint32_t kMaxRecordLen = 1 << 26;

    uint32_t field(std::span<const uint8_t> buf, size_t off) const {
        uint32_t v = load_le32(buf, off);
        return swapped_ ? pcap_detail::swap32(v) : v;
    }

    struct Closer {
        void operator()(std::FILE* f) const { std::fclose(f); }
    };
    std::unique_ptr<std::FILE, Closer> file_;
    bool swapped_ = false;
    bool nanosecond_ = false;
    LinkType link_ = LinkType::RawIp;
};

class PcapWriter : public PacketSink {
public:
    PcapWriter(const std::string& path, LinkType link) : link_(link) {
        file_.reset(std::fopen(path.c_str(), "wb"));
        if (!file_)
            throw IoError("cannot create pcap file: " + path);
        std::array<uint8_t, pcap_detail::kFileHeaderLen> hdr{};
        store_le32(hdr, 0, pcap_detail::kMagicUsec);
        store_le16(hdr, 4, 2);  // version 2.4
        store_le16(hdr, 6, 4);
        store_le32(hdr, 16, 0x00040000); // snaplen 256 KiB
        store_le32(hdr, 20, uint32_t(link));
        write_all(hdr.data(), hdr.size());
    }

    void write(const Packet& pkt) override {
        std::array<uint8_t, pcap_detail::kRecordHeaderLen> rec;
        store_le32(rec, 0, pkt.ts_sec);
        store_le32(rec, 4, pkt.ts_usec);
        store_le32(rec, 8, uint32_t(pkt.bytes.size()));
        store_le32(rec, 12, uint32_t(pkt.bytes.size()));
        write_all(rec.data(), rec.size());
        write_all(pkt.bytes.data(), pkt.bytes.size());
    }

    void flush() {
        if (std::fflush(file_.get()) != 0)
            throw IoError("pcap flush failed");
    }

private:
    void write_all(const uint8_t* data, size_t len) {
        if (std::fwrite(data, 1, len, file_.get()) != len)
            throw IoError("pcap write failed");
    }

    struct Closer {
        void operator()(std::FILE* f) const { std::fclose(f); }
    };
    std::unique_ptr<std::FILE, Closer> file_;
    LinkType link_;
};

inline std::vector<Packet> read_pcap(const std::string& path, LinkType* link_out = nullptr) {
    PcapReader reader(path);
    if (link_out)
        *link_out = reader.link_type();
    std::vector<Packet> out;
    while (auto p = reader.next())
        out.push_back(std::move(*p));
    return out;
}

inline void write_pcap(const std::string& path, const std::vector<Packet>& packets,
                       LinkType link = LinkType::RawIp) {
    PcapWriter writer(path, link);
    for (const auto& p : packets)
        writer.write(p);
    writer.flush();
}

} // namespace quicknat
