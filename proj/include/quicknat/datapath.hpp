#pragma once

#include <algorithm>
#include <atomic>
#include <cstdint>
#include <memory>
#include <thread>
#include <vector>

#include "quicknat/conntrack.hpp"
#include "quicknat/nat_pool.hpp"
#include "quicknat/net.hpp"
#include "quicknat/packet.hpp"
#include "quicknat/packet_stream.hpp"
#include "quicknat/rule_table.hpp"

namespace quicknat {

enum class Verdict : uint8_t { Forward, Drop, PassThrough };

// Why process_packet reached its verdict, for stats accounting.
enum class ProcessReason : uint8_t {
    ConntrackHit,
    RuleHit,
    RuleMiss,
    NonNatTraffic, // non-IPv4, non-TCP/UDP, or non-first fragment
    PoolExhausted,
    TableFull,
};

struct ProcessResult {
    Verdict verdict = Verdict::PassThrough;
    ProcessReason reason = ProcessReason::NonNatTraffic;
};

struct PipelinePolicy {
    Verdict miss_verdict = Verdict::PassThrough;     // rule-lookup miss
    Verdict fragment_verdict = Verdict::PassThrough; // also non-TCP/UDP traffic
};

struct WorkerStats {
    uint64_t packets_in = 0;
    uint64_t packets_out = 0;
    uint64_t dropped = 0;
    uint64_t conntrack_hits = 0;
    uint64_t rule_hits = 0;
    uint64_t rule_misses = 0;
    uint64_t malformed = 0;
    uint64_t pass_through = 0;

    WorkerStats& operator+=(const WorkerStats& o) {
        packets_in += o.packets_in;
        packets_out += o.packets_out;
        dropped += o.dropped;
        conntrack_hits += o.conntrack_hits;
        rule_hits += o.rule_hits;
        rule_misses += o.rule_misses;
        malformed += o.malformed;
        pass_through += o.pass_through;
        return *this;
    }
};

struct PipelineStats {
    std::vector<WorkerStats> per_worker;

    WorkerStats totals() const {
        WorkerStats t;
        for (const auto& w : per_worker)
            t += w;
        return t;
    }
};

// Shared state one packet run executes against. The rules snapshot is
// immutable; conntrack and pool are concurrent-safe per their contracts.
struct NatContext {
    std::shared_ptr<const RuleTableSet> rules;
    ConnTable* conntrack = nullptr;
    NatPool* pool = nullptr;
    PipelinePolicy policy;
};

// Symmetric software RSS: both directions of a flow land on one worker.
inline uint32_t dispatch(const FiveTuple& tuple, uint32_t n_workers, uint64_t seed = 0) {
    return uint32_t(symmetric_flow_hash(tuple, seed) % n_workers);
}

namespace datapath_detail {

// The lookup key QNS uses: the source endpoint for SNAT (outbound), the
// destination endpoint for DNAT (inbound).
inline Endpoint rule_key(const FiveTuple& t, Direction dir) {
    return dir == Direction::Outbound ? t.src() : t.dst();
}

inline std::pair<ConnKey, ConnKey> conn_keys(const FiveTuple& tuple, const Endpoint& new_src,
                                             const Endpoint& new_dst) {
    FiveTuple reply;
    reply.src_ip = new_dst.ip;
    reply.src_port = new_dst.port;
    reply.dst_ip = new_src.ip;
    reply.dst_port = new_src.port;
    reply.proto = tuple.proto;
    return {tuple, reply};
}

} // namespace datapath_detail

// One packet through the Fig.-style pipeline: connection tracer first,
// then rule finder, pool and tuple rewriter. `now` is the packet's
// timestamp; `worker` is this worker's conntrack registration.
inline ProcessResult process_packet(PacketView& pkt, Direction dir, NatContext& ctx,
                                    ConnTable::WorkerHandle& worker, Timestamp now) {
    if (!pkt.valid())
        return {ctx.policy.fragment_verdict, ProcessReason::NonNatTraffic};

    FiveTuple tuple = pkt.five_tuple();

    if (auto rec = ctx.conntrack->lookup(worker, tuple, now)) {
        pkt.rewrite(Field::Src, rec->translated_src.ip, rec->translated_src.port);
        pkt.rewrite(Field::Dst, rec->translated_dst.ip, rec->translated_dst.port);
        return {Verdict::Forward, ProcessReason::ConntrackHit};
    }

    NatType nat_type = dir == Direction::Outbound ? NatType::Snat : NatType::Dnat;
    Endpoint key = datapath_detail::rule_key(tuple, dir);
    const NatRule* rule = ctx.rules->qns_lookup(nat_type, key.ip, key.port);
    if (!rule)
        return {ctx.policy.miss_verdict, ProcessReason::RuleMiss};

    // Compute the translated endpoints.
    Endpoint new_src = tuple.src();
    Endpoint new_dst = tuple.dst();
    std::optional<Lease> lease;
    if (nat_type == NatType::Snat) {
        switch (rule->rewrite_port_kind) {
            case RewritePort::Explicit:
                new_src = {rule->rewrite_ip, rule->rewrite_port};
                break;
            case RewritePort::FromPool: {
                lease = ctx.pool ? ctx.pool->allocate(tuple.proto, hash_tuple(tuple))
                                 : std::nullopt;
                if (!lease)
                    return {Verdict::Drop, ProcessReason::PoolExhausted};
                new_src = {lease->ip, lease->port};
                break;
            }
            case RewritePort::Keep:
                new_src = {rule->rewrite_ip, tuple.src_port};
                break;
        }
    } else {
        uint16_t port = rule->rewrite_port_kind == RewritePort::Explicit ? rule->rewrite_port
                                                                         : tuple.dst_port;
        new_dst = {rule->rewrite_ip, port};
    }

    auto [orig_key, reply_key] = datapath_detail::conn_keys(tuple, new_src, new_dst);
    PairData data;
    data.original_src = new_src;
    data.original_dst = new_dst;
    // The reply direction undoes the translation: traffic addressed to
    // the translated endpoints is rewritten back to the pre-NAT tuple.
    data.reply_src = tuple.dst();
    data.reply_dst = tuple.src();
    data.lease = std::move(lease);
    data.rule_generation = ctx.rules->generation();

    InsertOutcome out = ctx.conntrack->insert_pair(worker, orig_key, reply_key, std::move(data), now);
    if (out.status == InsertStatus::TableFull) {
        if (out.returned_lease && ctx.pool)
            ctx.pool->release(*out.returned_lease);
        return {Verdict::Drop, ProcessReason::TableFull};
    }
    if (out.status == InsertStatus::Existing && out.returned_lease && ctx.pool)
        ctx.pool->release(*out.returned_lease);

    pkt.rewrite(Field::Src, out.record.translated_src.ip, out.record.translated_src.port);
    pkt.rewrite(Field::Dst, out.record.translated_dst.ip, out.record.translated_dst.port);
    return {Verdict::Forward, ProcessReason::RuleHit};
}

namespace datapath_detail {

struct WorkItem {
    uint64_t seq = 0;
    Packet packet;
    Direction dir = Direction::Outbound;
    ParseMode mode = ParseMode::RawIp;
    bool poison = false;
};

// Single-producer single-consumer ring, one per worker, mirroring an RSS
// queue. Spins with yields; packet buffers move through untouched.
class SpscRing {
public:
    explicit SpscRing(size_t capacity_pow2 = 1024)
        : buf_(capacity_pow2), mask_(capacity_pow2 - 1) {}

    void push(WorkItem&& item) {
        size_t head = head_.load(std::memory_order_relaxed);
        while (head - tail_.load(std::memory_order_acquire) >= buf_.size())
            std::this_thread::yield();
        buf_[head & mask_] = std::move(item);
        head_.store(head + 1, std::memory_order_release);
    }

    bool pop(WorkItem& out) {
        size_t tail = tail_.load(std::memory_order_relaxed);
        if (tail == head_.load(std::memory_order_acquire))
            return false;
        out = std::move(buf_[tail & mask_]);
        tail_.store(tail + 1, std::memory_order_release);
        return true;
    }

private:
    std::vector<WorkItem> buf_;
    size_t mask_;
    std::atomic<size_t> head_{0};
    std::atomic<size_t> tail_{0};
};

} // namespace datapath_detail

// Reads packets from a directed source, fans them out to n_workers
// parallel workers by symmetric flow hash, and writes surviving packets
// to the sink in source order (which preserves per-flow order for any
// worker count). A null sink discards output. Each packet is owned by
// exactly one worker from dispatch to sink; no copies are made.
inline PipelineStats run_pipeline(DirectedSource& source, PacketSink* sink, uint32_t n_workers,
                                  NatContext& ctx) {
    using datapath_detail::SpscRing;
    using datapath_detail::WorkItem;

    if (n_workers < 1)
        throw ContractViolation("run_pipeline needs at least one worker");

    PipelineStats stats;
    stats.per_worker.resize(n_workers);
    std::vector<SpscRing> rings(n_workers);
    std::vector<std::vector<std::pair<uint64_t, Packet>>> outputs(n_workers);
    std::vector<std::thread> threads;
    threads.reserve(n_workers);

    for (uint32_t w = 0; w < n_workers; ++w) {
        threads.emplace_back([&, w] {
            auto handle = ctx.conntrack->make_handle();
            WorkerStats& ws = stats.per_worker[w];
            auto& out = outputs[w];
            WorkItem item;
            for (;;) {
                if (!rings[w].pop(item)) {
                    std::this_thread::yield();
                    continue;
                }
                if (item.poison)
                    break;
                ++ws.packets_in;
                Verdict verdict;
                try {
                    PacketView view = PacketView::parse(item.packet.bytes, item.mode);
                    ProcessResult r = process_packet(view, item.dir, ctx, handle, item.packet.ts_ns());
                    verdict = r.verdict;
                    switch (r.reason) {
                        case ProcessReason::ConntrackHit: ++ws.conntrack_hits; break;
                        case ProcessReason::RuleHit: ++ws.rule_hits; break;
                        case ProcessReason::RuleMiss: ++ws.rule_misses; break;
                        default: break;
                    }
                } catch (const MalformedPacket&) {
                    ++ws.malformed;
                    verdict = Verdict::Drop;
                }
                if (verdict == Verdict::Drop) {
                    ++ws.dropped;
                    continue;
                }
                if (verdict == Verdict::PassThrough)
                    ++ws.pass_through;
                ++ws.packets_out;
                if (sink)
                    out.emplace_back(item.seq, std::move(item.packet));
            }
        });
    }

    // The caller's thread is the dispatcher (single producer per ring).
    uint64_t seq = 0;
    while (auto dp = source.next()) {
        uint32_t target = 0;
        if (n_workers > 1) {
            try {
                PacketView view = PacketView::parse(dp->packet.bytes, parse_mode_of(dp->link));
                if (view.valid())
                    target = dispatch(view.five_tuple(), n_workers);
            } catch (const MalformedPacket&) {
                // Malformed packets can go anywhere; the worker counts them.
            }
        }
        rings[target].push(WorkItem{seq++, std::move(dp->packet), dp->direction,
                                    parse_mode_of(dp->link), false});
    }
    for (auto& ring : rings)
        ring.push(WorkItem{0, {}, Direction::Outbound, ParseMode::RawIp, true});
    for (auto& t : threads)
        t.join();

    if (sink) {
        // Merge per-worker outputs back into source order.
        std::vector<std::pair<uint64_t, Packet>> merged;
        size_t total = 0;
        for (auto& out : outputs)
            total += out.size();
        merged.reserve(total);
        for (auto& out : outputs)
            for (auto& item : out)
                merged.push_back(std::move(item));
        std::sort(merged.begin(), merged.end(),
                  [](const auto& a, const auto& b) { return a.first < b.first; });
        for (auto& [s, pkt] : merged)
            sink->write(pkt);
    }
    return stats;
}

} // namespace quicknat
