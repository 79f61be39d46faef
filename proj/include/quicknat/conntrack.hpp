#pragma once

#include <atomic>
#include <chrono>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <vector>

#include "quicknat/errors.hpp"
#include "quicknat/nat_pool.hpp"
#include "quicknat/net.hpp"

namespace quicknat {

// Monotonic nanoseconds. The table never reads a clock itself; callers
// supply time, which keeps replay and tests deterministic.
using Timestamp = uint64_t;

using ConnKey = FiveTuple;

enum class FlowDir : uint8_t { Original = 0, Reply = 1 };

// Copy of one directional connection record, as returned by lookups.
struct ConnRecord {
    FlowDir direction = FlowDir::Original;
    Endpoint translated_src;
    Endpoint translated_dst;
    ConnKey peer_key;
    uint64_t rule_generation = 0;
    Timestamp last_seen = 0;
    std::optional<Lease> pool_lease;
    uint64_t pair_id = 0;
};

// Both directions' rewrites plus ownership of any pool lease backing them.
struct PairData {
    Endpoint original_src, original_dst; // applied to original-direction packets
    Endpoint reply_src, reply_dst;       // applied to reply-direction packets
    std::optional<Lease> lease;
    uint64_t rule_generation = 0;
};

enum class InsertStatus : uint8_t { Inserted, Existing, TableFull };

struct InsertOutcome {
    InsertStatus status = InsertStatus::TableFull;
    ConnRecord record;               // valid unless TableFull
    std::optional<Lease> returned_lease; // handed back when the table did not take ownership
};

struct ConnTrackConfig {
    std::chrono::nanoseconds tcp_idle = std::chrono::seconds(300);
    std::chrono::nanoseconds udp_idle = std::chrono::seconds(60);
    uint64_t hash_seed = 0;
};

struct ConnStats {
    uint64_t live_pairs = 0;
    uint64_t insert_races_lost = 0;
    uint64_t evictions = 0;
};

// Injection points for concurrency tests: a hooked worker can be parked
// mid-insert to show that other workers keep making progress.
enum class PausePoint : uint8_t { BeforeReplyClaim, AfterReplyClaim, AfterOriginalClaim };

// Connection record table shared by all workers.
//
// Layout: a power-of-two array of bucket heads over per-bucket singly
// linked chains of fixed preallocated nodes (two nodes, one per
// direction, packed into a pair). All hot-path operations are
// non-blocking:
//   - insert pushes with a head CAS,
//   - removal marks a node's next pointer, then unlinks it with a CAS,
//   - readers never wait; node memory is recycled only after an epoch
//     grace period, so a suspended worker can delay reuse but never
//     block anyone.
//
// Pair atomicity hangs off one event: a pair's reply node is pushed
// first but stays dormant; the head CAS that links the original node is
// the commit point, and reply lookups verify the original is still
// linked and unmarked. Marking the original is, symmetrically, the
// whole pair's removal point. Racing inserts of one original key are
// resolved by that same CAS: the loser observes the winner's node,
// retracts its dormant reply and adopts the winner's translation.
class ConnTable {
    static constexpr uintptr_t kMark = 1;
    static constexpr uint32_t kNone = std::numeric_limits<uint32_t>::max();
    static constexpr size_t kMaxHandles = 256;

    struct Pair;

    struct Node {
        std::atomic<uintptr_t> next{0};
        ConnKey key;
        FlowDir dir = FlowDir::Original;
        Endpoint t_src, t_dst;
        std::atomic<Timestamp> last_seen{0};
        Pair* pair = nullptr;
    };

    struct Pair {
        Node original;
        Node reply;
        std::optional<Lease> lease;
        uint64_t rule_generation = 0;
        uint64_t pair_id = 0;
        uint64_t retire_epoch = 0;
        std::atomic<uint32_t> link{kNone}; // freelist / limbo chaining
        uint32_t self_idx = 0;
    };

    struct alignas(64) HandleSlot {
        std::atomic<uint32_t> claimed{0};
        std::atomic<uint64_t> epoch{0}; // 0 = quiescent
        uint64_t probes = 0;            // owned by the handle's thread
    };

public:
    // RAII registration of one concurrent caller. Every operation takes a
    // handle; a handle must not be used from two threads at once.
    class WorkerHandle {
    public:
        WorkerHandle() = default;
        WorkerHandle(WorkerHandle&& o) noexcept : table_(o.table_), idx_(o.idx_) {
            o.table_ = nullptr;
        }
        WorkerHandle& operator=(WorkerHandle&& o) noexcept {
            release();
            table_ = o.table_;
            idx_ = o.idx_;
            o.table_ = nullptr;
            return *this;
        }
        WorkerHandle(const WorkerHandle&) = delete;
        WorkerHandle& operator=(const WorkerHandle&) = delete;
        ~WorkerHandle() { release(); }

        // Bucket-node visits performed by the most recent operation.
        uint64_t last_op_probes() const { return table_->handles_[idx_].probes; }

    private:
        friend class ConnTable;
        WorkerHandle(ConnTable* t, uint32_t idx) : table_(t), idx_(idx) {}
        void release() {
            if (table_) {
                table_->handles_[idx_].epoch.store(0, std::memory_order_release);
                table_->handles_[idx_].claimed.store(0, std::memory_order_release);
                table_ = nullptr;
            }
        }
        ConnTable* table_ = nullptr;
        uint32_t idx_ = 0;
    };

    explicit ConnTable(size_t capacity_records = size_t(1) << 20, ConnTrackConfig cfg = {},
                       NatPool* pool = nullptr)
        : cfg_(cfg), pool_(pool) {
        if (capacity_records < 2 || (capacity_records & (capacity_records - 1)) != 0)
            throw ContractViolation("conntrack capacity must be a power of two >= 2");
        capacity_ = capacity_records;
        buckets_ = std::vector<std::atomic<uintptr_t>>(capacity_);
        pairs_ = std::vector<Pair>(capacity_ / 2);
        handles_ = std::vector<HandleSlot>(kMaxHandles);
        // Thread the freelist through all pairs.
        for (size_t i = 0; i < pairs_.size(); ++i) {
            pairs_[i].self_idx = uint32_t(i);
            pairs_[i].link.store(i + 1 < pairs_.size() ? uint32_t(i + 1) : kNone,
                                 std::memory_order_relaxed);
        }
        free_head_.store(pack_head(0, 0), std::memory_order_relaxed);
        limbo_head_.store(pack_head(kNone, 0), std::memory_order_relaxed);
        global_epoch_.store(1, std::memory_order_relaxed);
    }

    ~ConnTable() {
        // Single-threaded teardown: hand the leases of still-live pairs
        // back to the pool (evicted pairs released theirs already).
        for (auto& bucket : buckets_) {
            uintptr_t cur = bucket.load(std::memory_order_relaxed);
            while (cur) {
                Node* n = node_of(cur);
                uintptr_t nx = n->next.load(std::memory_order_relaxed);
                if (n->dir == FlowDir::Original && !is_marked(nx) && pool_ && n->pair->lease) {
                    try {
                        pool_->release(*n->pair->lease);
                    } catch (const DoubleRelease&) {
                        // Destructors must not throw; a mismatched pool is
                        // the caller's wiring error.
                    }
                }
                cur = clear_mark(nx);
            }
        }
    }

    ConnTable(const ConnTable&) = delete;
    ConnTable& operator=(const ConnTable&) = delete;

    WorkerHandle make_handle() {
        for (uint32_t i = 0; i < kMaxHandles; ++i) {
            uint32_t expected = 0;
            if (handles_[i].claimed.compare_exchange_strong(expected, 1,
                                                            std::memory_order_acq_rel))
                return WorkerHandle(this, i);
        }
        throw ContractViolation("too many concurrent conntrack handles");
    }

    size_t capacity() const { return capacity_; }
    const ConnTrackConfig& config() const { return cfg_; }

    void set_pause_hook(std::function<void(PausePoint)> hook) { pause_hook_ = std::move(hook); }

    // Finds the live record for key and touches its last_seen. Records
    // past their idle timeout are treated as absent (lazy expiry).
    std::optional<ConnRecord> lookup(WorkerHandle& h, const ConnKey& key, Timestamp now) {
        EpochGuard g(*this, h);
        HandleSlot& hs = handles_[h.idx_];
        hs.probes = 0;
        Node* n = find_live(hs, key, now);
        if (!n)
            return std::nullopt;
        n->last_seen.store(now, std::memory_order_relaxed);
        return record_of(*n, now);
    }

    // Atomically installs both directional records, or adopts the
    // winner's pair when another worker raced us on the same original
    // key. On Existing/TableFull the lease inside data is handed back.
    InsertOutcome insert_pair(WorkerHandle& h, const ConnKey& original, const ConnKey& reply,
                              PairData data, Timestamp now) {
        if (original == reply)
            throw ContractViolation("insert_pair requires original != reply");
        EpochGuard g(*this, h);
        HandleSlot& hs = handles_[h.idx_];
        hs.probes = 0;

        pause(PausePoint::BeforeReplyClaim);
        uint32_t pidx = freelist_pop();
        if (pidx == kNone)
            return {InsertStatus::TableFull, {}, std::move(data.lease)};

        Pair& p = pairs_[pidx];
        p.lease = std::move(data.lease);
        p.rule_generation = data.rule_generation;
        p.pair_id = pair_id_counter_.fetch_add(1, std::memory_order_relaxed) + 1;
        init_node(p.original, original, FlowDir::Original, data.original_src, data.original_dst,
                  &p, now);
        init_node(p.reply, reply, FlowDir::Reply, data.reply_src, data.reply_dst, &p, now);

        // Reply first: it stays dormant (invisible to lookups) until the
        // original's head CAS commits the pair.
        push_head(bucket_of(reply), p.reply);
        pause(PausePoint::AfterReplyClaim);

        auto& obucket = bucket_of(original);
        for (;;) {
            uintptr_t head = obucket.load(std::memory_order_acquire);
            Node* existing = nullptr;
            for (uintptr_t cur = head; cur;) {
                ++hs.probes;
                Node* n = node_of(cur);
                uintptr_t nx = n->next.load(std::memory_order_acquire);
                if (!is_marked(nx) && n->dir == FlowDir::Original && n->key == original &&
                    fresh(*n->pair, now, cfg_.tcp_idle.count(), cfg_.udp_idle.count())) {
                    existing = n;
                    break;
                }
                cur = clear_mark(nx);
            }
            if (existing) {
                // Lost the race: first writer wins. Retract the dormant
                // reply and hand the tentative lease back.
                existing->last_seen.store(now, std::memory_order_relaxed);
                ConnRecord rec = record_of(*existing, now);
                std::optional<Lease> lease = std::move(p.lease);
                p.lease.reset();
                mark_node(p.reply);
                unlink(bucket_of(reply), &p.reply);
                retire(p);
                races_lost_.fetch_add(1, std::memory_order_relaxed);
                return {InsertStatus::Existing, rec, std::move(lease)};
            }
            p.original.next.store(head, std::memory_order_relaxed);
            uintptr_t expected = head;
            if (obucket.compare_exchange_strong(expected, uintptr_t(&p.original),
                                                std::memory_order_acq_rel)) {
                break; // pair committed
            }
        }
        pause(PausePoint::AfterOriginalClaim);
        live_pairs_.fetch_add(1, std::memory_order_relaxed);
        return {InsertStatus::Inserted, record_of(p.original, now), std::nullopt};
    }

    // Sweeps pairs idle longer than the given timeouts: marks the
    // original (the pair's atomic removal point), unlinks both nodes,
    // releases the pool lease, and recycles memory after a grace period.
    size_t expire(WorkerHandle& h, Timestamp now, std::chrono::nanoseconds tcp_idle,
                  std::chrono::nanoseconds udp_idle) {
        EpochGuard g(*this, h);
        size_t evicted = 0;
        for (auto& bucket : buckets_) {
            uintptr_t cur = bucket.load(std::memory_order_acquire);
            while (cur) {
                Node* n = node_of(cur);
                uintptr_t nx = n->next.load(std::memory_order_acquire);
                if (!is_marked(nx) && n->dir == FlowDir::Original &&
                    !fresh(*n->pair, now, tcp_idle.count(), udp_idle.count())) {
                    if (n->next.compare_exchange_strong(nx, set_mark(nx),
                                                        std::memory_order_acq_rel)) {
                        teardown(*n->pair);
                        ++evicted;
                    }
                    // On CAS failure another sweep won; move on either way.
                }
                cur = clear_mark(is_marked(nx) ? nx : n->next.load(std::memory_order_acquire));
            }
        }
        evictions_.fetch_add(evicted, std::memory_order_relaxed);
        live_pairs_.fetch_sub(evicted, std::memory_order_relaxed);
        reclaim();
        return evicted;
    }

    size_t expire(WorkerHandle& h, Timestamp now) {
        return expire(h, now, cfg_.tcp_idle, cfg_.udp_idle);
    }

    ConnStats stats() const {
        return {live_pairs_.load(std::memory_order_relaxed),
                races_lost_.load(std::memory_order_relaxed),
                evictions_.load(std::memory_order_relaxed)};
    }

private:
    struct EpochGuard {
        EpochGuard(ConnTable& t, WorkerHandle& h) : slot(t.handles_[h.idx_]) {
            // seq_cst so the announcement is globally visible before any
            // bucket loads of this operation.
            slot.epoch.exchange(t.global_epoch_.load(std::memory_order_seq_cst),
                                std::memory_order_seq_cst);
        }
        ~EpochGuard() { slot.epoch.store(0, std::memory_order_release); }
        HandleSlot& slot;
    };

    static Node* node_of(uintptr_t v) { return reinterpret_cast<Node*>(v & ~kMark); }
    static bool is_marked(uintptr_t v) { return (v & kMark) != 0; }
    static uintptr_t set_mark(uintptr_t v) { return v | kMark; }
    static uintptr_t clear_mark(uintptr_t v) { return v & ~kMark; }

    static uint64_t pack_head(uint32_t idx, uint32_t tag) {
        return uint64_t(idx) | uint64_t(tag) << 32;
    }

    std::atomic<uintptr_t>& bucket_of(const ConnKey& key) {
        return buckets_[hash_tuple(key, cfg_.hash_seed) & (capacity_ - 1)];
    }

    static void init_node(Node& n, const ConnKey& key, FlowDir dir, Endpoint src, Endpoint dst,
                          Pair* pair, Timestamp now) {
        n.next.store(0, std::memory_order_relaxed);
        n.key = key;
        n.dir = dir;
        n.t_src = src;
        n.t_dst = dst;
        n.last_seen.store(now, std::memory_order_relaxed);
        n.pair = pair;
    }

    static Timestamp pair_last_seen(const Pair& p) {
        Timestamp a = p.original.last_seen.load(std::memory_order_relaxed);
        Timestamp b = p.reply.last_seen.load(std::memory_order_relaxed);
        return a > b ? a : b;
    }

    static bool fresh(const Pair& p, Timestamp now, uint64_t tcp_idle_ns, uint64_t udp_idle_ns) {
        Timestamp seen = pair_last_seen(p);
        if (now <= seen)
            return true;
        uint64_t idle =
            p.original.key.proto == Proto::Udp ? udp_idle_ns : tcp_idle_ns;
        return now - seen <= idle;
    }

    ConnRecord record_of(const Node& n, Timestamp now) const {
        const Pair& p = *n.pair;
        const Node& peer = (n.dir == FlowDir::Original) ? p.reply : p.original;
        return {n.dir,     n.t_src,          n.t_dst, peer.key,
                p.rule_generation, now, p.lease, p.pair_id};
    }

    // A committed, unmarked original is live by construction (originals
    // only enter chains through the commit CAS). A reply is live only
    // while its pair's original is linked and unmarked.
    bool original_live(const Pair& p) {
        if (is_marked(p.original.next.load(std::memory_order_acquire)))
            return false;
        auto& bucket = bucket_of(p.original.key);
        for (uintptr_t cur = bucket.load(std::memory_order_acquire); cur;) {
            Node* n = node_of(cur);
            uintptr_t nx = n->next.load(std::memory_order_acquire);
            if (n == &p.original)
                return !is_marked(nx);
            cur = clear_mark(nx);
        }
        return false;
    }

    Node* find_live(HandleSlot& hs, const ConnKey& key, Timestamp now) {
        auto& bucket = bucket_of(key);
    retry:
        std::atomic<uintptr_t>* prev = &bucket;
        uintptr_t cur = prev->load(std::memory_order_acquire);
        while (cur) {
            ++hs.probes;
            Node* n = node_of(cur);
            uintptr_t nx = n->next.load(std::memory_order_acquire);
            if (is_marked(nx)) {
                // Help unlink logically deleted nodes as we pass.
                if (!prev->compare_exchange_strong(cur, clear_mark(nx),
                                                   std::memory_order_acq_rel))
                    goto retry;
                cur = clear_mark(nx);
                continue;
            }
            if (n->key == key && fresh(*n->pair, now, cfg_.tcp_idle.count(),
                                       cfg_.udp_idle.count())) {
                if (n->dir == FlowDir::Original)
                    return n;
                if (original_live(*n->pair))
                    return n;
                // Dormant or torn-down reply: keep walking.
            }
            prev = &n->next;
            cur = nx;
        }
        return nullptr;
    }

    void push_head(std::atomic<uintptr_t>& bucket, Node& n) {
        uintptr_t head = bucket.load(std::memory_order_acquire);
        for (;;) {
            n.next.store(head, std::memory_order_relaxed);
            if (bucket.compare_exchange_weak(head, uintptr_t(&n), std::memory_order_acq_rel))
                return;
        }
    }

    void mark_node(Node& n) {
        uintptr_t nx = n.next.load(std::memory_order_acquire);
        while (!is_marked(nx)) {
            if (n.next.compare_exchange_weak(nx, set_mark(nx), std::memory_order_acq_rel))
                return;
        }
    }

    // Physically removes a marked node from its bucket chain. Returns
    // once the node is no longer reachable (a helper may have beaten us).
    void unlink(std::atomic<uintptr_t>& bucket, Node* target) {
    retry:
        std::atomic<uintptr_t>* prev = &bucket;
        uintptr_t cur = prev->load(std::memory_order_acquire);
        while (cur) {
            Node* n = node_of(cur);
            uintptr_t nx = n->next.load(std::memory_order_acquire);
            if (n == target) {
                if (!prev->compare_exchange_strong(cur, clear_mark(nx),
                                                   std::memory_order_acq_rel))
                    goto retry;
                return;
            }
            if (is_marked(nx)) {
                if (!prev->compare_exchange_strong(cur, clear_mark(nx),
                                                   std::memory_order_acq_rel))
                    goto retry;
                cur = clear_mark(nx);
                continue;
            }
            prev = &n->next;
            cur = nx;
        }
    }

    // Tears down a pair whose original this caller just marked: the mark
    // already made both directions invisible, so release the lease,
    // unlink both nodes and queue the memory for recycling. The lease
    // value is left in place (readers that passed the liveness check
    // just before the mark may still be copying the record); it is
    // overwritten only after the reclamation grace period.
    void teardown(Pair& p) {
        mark_node(p.reply);
        unlink(bucket_of(p.original.key), &p.original);
        unlink(bucket_of(p.reply.key), &p.reply);
        if (p.lease && pool_)
            pool_->release(*p.lease);
        retire(p);
    }

    // --- memory recycling -------------------------------------------------
    //
    // Retired pairs sit in a limbo stack stamped with the epoch of their
    // retirement; they return to the freelist only after the global epoch
    // has advanced twice with no straggling reader announced at or before
    // the stamp.

    void retire(Pair& p) {
        p.retire_epoch = global_epoch_.load(std::memory_order_seq_cst);
        uint64_t head = limbo_head_.load(std::memory_order_acquire);
        for (;;) {
            p.link.store(uint32_t(head), std::memory_order_relaxed);
            uint64_t next = pack_head(p.self_idx, uint32_t(head >> 32) + 1);
            if (limbo_head_.compare_exchange_weak(head, next, std::memory_order_acq_rel))
                return;
        }
    }

    void reclaim() {
        uint64_t epoch = global_epoch_.fetch_add(1, std::memory_order_seq_cst) + 1;
        uint64_t min_active = epoch;
        for (auto& hs : handles_) {
            if (hs.claimed.load(std::memory_order_acquire) == 0)
                continue;
            uint64_t e = hs.epoch.load(std::memory_order_seq_cst);
            if (e != 0 && e < min_active)
                min_active = e;
        }
        // Detach the limbo stack and filter it.
        uint64_t head = limbo_head_.load(std::memory_order_acquire);
        for (;;) {
            uint64_t empty = pack_head(kNone, uint32_t(head >> 32) + 1);
            if (limbo_head_.compare_exchange_weak(head, empty, std::memory_order_acq_rel))
                break;
        }
        uint32_t cur = uint32_t(head);
        while (cur != kNone) {
            Pair& p = pairs_[cur];
            uint32_t next = p.link.load(std::memory_order_relaxed);
            if (p.retire_epoch + 2 <= epoch && p.retire_epoch < min_active)
                freelist_push(p);
            else
                relimbo(p);
            cur = next;
        }
    }

    void relimbo(Pair& p) {
        uint64_t head = limbo_head_.load(std::memory_order_acquire);
        for (;;) {
            p.link.store(uint32_t(head), std::memory_order_relaxed);
            uint64_t next = pack_head(p.self_idx, uint32_t(head >> 32) + 1);
            if (limbo_head_.compare_exchange_weak(head, next, std::memory_order_acq_rel))
                return;
        }
    }

    uint32_t freelist_pop() {
        uint64_t head = free_head_.load(std::memory_order_acquire);
        for (;;) {
            uint32_t idx = uint32_t(head);
            if (idx == kNone)
                return kNone;
            uint32_t next = pairs_[idx].link.load(std::memory_order_acquire);
            uint64_t replacement = pack_head(next, uint32_t(head >> 32) + 1);
            if (free_head_.compare_exchange_weak(head, replacement, std::memory_order_acq_rel))
                return idx;
        }
    }

    void freelist_push(Pair& p) {
        uint64_t head = free_head_.load(std::memory_order_acquire);
        for (;;) {
            p.link.store(uint32_t(head), std::memory_order_relaxed);
            uint64_t next = pack_head(p.self_idx, uint32_t(head >> 32) + 1);
            if (free_head_.compare_exchange_weak(head, next, std::memory_order_acq_rel))
                return;
        }
    }

    void pause(PausePoint p) {
        if (pause_hook_)
            pause_hook_(p);
    }

    ConnTrackConfig cfg_;
    NatPool* pool_ = nullptr;
    size_t capacity_ = 0;
    std::vector<std::atomic<uintptr_t>> buckets_;
    std::vector<Pair> pairs_;
    std::vector<HandleSlot> handles_;
    std::atomic<uint64_t> free_head_{0};
    std::atomic<uint64_t> limbo_head_{0};
    std::atomic<uint64_t> global_epoch_{1};
    std::atomic<uint64_t> pair_id_counter_{0};
    std::atomic<uint64_t> live_pairs_{0};
    std::atomic<uint64_t> races_lost_{0};
    std::atomic<uint64_t> evictions_{0};
    std::function<void(PausePoint)> pause_hook_;
};

} // namespace quicknat
