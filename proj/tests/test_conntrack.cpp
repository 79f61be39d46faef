#include <gtest/gtest.h>

#include <atomic>
#include <barrier>
#include <chrono>
#include <condition_variable>
#include <map>
#include <mutex>
#include <random>
#include <thread>
#include <vector>

#include "quicknat/conntrack.hpp"

using namespace quicknat;
using namespace std::chrono_literals;

namespace {

ConnKey key_of(uint32_t a, uint16_t ap, uint32_t b, uint16_t bp, Proto proto = Proto::Tcp) {
    return FiveTuple{Ipv4Addr{a}, Ipv4Addr{b}, ap, bp, proto};
}

// Outbound flow i: (10.x:p -> 198.51.100.9:80) translated to
// (203.0.113.7:q -> same dst).
struct FlowFixture {
    ConnKey orig;
    ConnKey reply;
    PairData data;
};

FlowFixture flow_fixture(uint32_t i, Proto proto = Proto::Tcp) {
    FlowFixture f;
    uint32_t priv = (10u << 24) | i;
    uint16_t sport = uint16_t(1024 + i % 60000);
    uint32_t remote = (198u << 24) | (51u << 16) | (100u << 8) | 9;
    // Unique public endpoint per flow index (the port space alone is too
    // small for the larger storms).
    uint32_t pub = (203u << 24) | (113u << 8) | (7 + i / 60000);
    uint16_t pport = uint16_t(1024 + i % 60000);
    f.orig = key_of(priv, sport, remote, 80, proto);
    f.reply = key_of(remote, 80, pub, pport, proto);
    f.data.original_src = {Ipv4Addr{pub}, pport};
    f.data.original_dst = {Ipv4Addr{remote}, 80};
    f.data.reply_src = {Ipv4Addr{remote}, 80};
    f.data.reply_dst = {Ipv4Addr{priv}, sport};
    f.data.rule_generation = 1;
    return f;
}

// Applies a directional record to a tuple the way the datapath would.
FiveTuple apply(const ConnRecord& rec, FiveTuple t) {
    t.src_ip = rec.translated_src.ip;
    t.src_port = rec.translated_src.port;
    t.dst_ip = rec.translated_dst.ip;
    t.dst_port = rec.translated_dst.port;
    return t;
}

} // namespace

TEST(Conntrack, ReadYourWrite) {
    ConnTable ct(1024);
    auto h = ct.make_handle();
    auto f = flow_fixture(1);
    auto out = ct.insert_pair(h, f.orig, f.reply, f.data, 1000);
    ASSERT_EQ(out.status, InsertStatus::Inserted);
    EXPECT_EQ(out.record.direction, FlowDir::Original);

    auto rec = ct.lookup(h, f.orig, 1001);
    ASSERT_TRUE(rec);
    EXPECT_EQ(rec->direction, FlowDir::Original);
    EXPECT_EQ(rec->translated_src, f.data.original_src);
    EXPECT_EQ(rec->peer_key, f.reply);
    EXPECT_EQ(ct.stats().live_pairs, 1u);
}

TEST(Conntrack, MissingKeyIsNone) {
    ConnTable ct(1024);
    auto h = ct.make_handle();
    EXPECT_FALSE(ct.lookup(h, flow_fixture(5).orig, 1000));
}

TEST(Conntrack, ReplyDirectionIsInverse) {
    ConnTable ct(1024);
    auto h = ct.make_handle();
    auto f = flow_fixture(2);
    ct.insert_pair(h, f.orig, f.reply, f.data, 1000);

    auto rep = ct.lookup(h, f.reply, 1001);
    ASSERT_TRUE(rep);
    EXPECT_EQ(rep->direction, FlowDir::Reply);
    EXPECT_EQ(rep->peer_key, f.orig);

    // ORIGINAL then REPLY rewrite composes back to the pre-NAT endpoints.
    auto orig = ct.lookup(h, f.orig, 1001);
    FiveTuple translated = apply(*orig, f.orig);
    EXPECT_EQ(translated, f.reply.reversed());
    FiveTuple replied = apply(*rep, translated.reversed());
    EXPECT_EQ(replied, f.orig.reversed());
}

TEST(Conntrack, SelfPairRejected) {
    ConnTable ct(64);
    auto h = ct.make_handle();
    auto f = flow_fixture(3);
    EXPECT_THROW(ct.insert_pair(h, f.orig, f.orig, f.data, 1000), ContractViolation);
}

TEST(Conntrack, CapacityBoundGivesTableFull) {
    ConnTable ct(8); // 4 pairs
    auto h = ct.make_handle();
    for (uint32_t i = 0; i < 4; ++i) {
        auto f = flow_fixture(i);
        ASSERT_EQ(ct.insert_pair(h, f.orig, f.reply, f.data, 1000).status,
                  InsertStatus::Inserted);
    }
    auto f = flow_fixture(99);
    auto out = ct.insert_pair(h, f.orig, f.reply, f.data, 1000);
    EXPECT_EQ(out.status, InsertStatus::TableFull);
    EXPECT_EQ(ct.stats().live_pairs, 4u);
    // All prior flows still intact.
    for (uint32_t i = 0; i < 4; ++i)
        EXPECT_TRUE(ct.lookup(h, flow_fixture(i).orig, 1001));
    EXPECT_FALSE(ct.lookup(h, f.orig, 1001));
}

TEST(Conntrack, DuplicateInsertReturnsExisting) {
    ConnTable ct(1024);
    auto h = ct.make_handle();
    auto f = flow_fixture(4);
    auto first = ct.insert_pair(h, f.orig, f.reply, f.data, 1000);
    ASSERT_EQ(first.status, InsertStatus::Inserted);

    PairData other = f.data;
    other.original_src = {Ipv4Addr(203, 0, 113, 99), 1}; // a losing translation
    auto second = ct.insert_pair(h, f.orig, f.reply, other, 1000);
    EXPECT_EQ(second.status, InsertStatus::Existing);
    EXPECT_EQ(second.record.translated_src, f.data.original_src);
    EXPECT_EQ(ct.stats().live_pairs, 1u);
    EXPECT_EQ(ct.stats().insert_races_lost, 1u);
}

TEST(Conntrack, RacingInsertsAgreeOnOneTranslation) {
    for (int round = 0; round < 50; ++round) {
        ConnTable ct(256);
        auto f = flow_fixture(7);
        constexpr int kWorkers = 8;
        std::vector<ConnRecord> results(kWorkers);
        std::barrier sync(kWorkers);
        std::vector<std::thread> threads;
        for (int w = 0; w < kWorkers; ++w)
            threads.emplace_back([&, w] {
                auto h = ct.make_handle();
                PairData mine = f.data;
                mine.original_src.port = uint16_t(2000 + w); // distinct tentative translations
                sync.arrive_and_wait();
                auto out = ct.insert_pair(h, f.orig, f.reply, mine, 1000);
                ASSERT_NE(out.status, InsertStatus::TableFull);
                results[w] = out.record;
            });
        for (auto& t : threads)
            t.join();
        for (int w = 1; w < kWorkers; ++w) {
            ASSERT_EQ(results[w].translated_src, results[0].translated_src) << "round " << round;
            ASSERT_EQ(results[w].pair_id, results[0].pair_id) << "round " << round;
        }
        ASSERT_EQ(ct.stats().live_pairs, 1u);
        ASSERT_EQ(ct.stats().insert_races_lost, uint64_t(kWorkers - 1));
    }
}

TEST(Conntrack, ConcurrentStormLosesNothing) {
    // 8 workers x 10k distinct pairs, then every key of all 160k records
    // must resolve, checked against the same fixtures sequentially.
    constexpr uint32_t kWorkers = 8, kPerWorker = 10000;
    ConnTable ct(size_t(1) << 18);
    std::vector<std::thread> threads;
    for (uint32_t w = 0; w < kWorkers; ++w)
        threads.emplace_back([&, w] {
            auto h = ct.make_handle();
            for (uint32_t i = 0; i < kPerWorker; ++i) {
                auto f = flow_fixture(w * kPerWorker + i, i % 2 ? Proto::Tcp : Proto::Udp);
                auto out = ct.insert_pair(h, f.orig, f.reply, f.data, 1000);
                ASSERT_EQ(out.status, InsertStatus::Inserted);
            }
        });
    for (auto& t : threads)
        t.join();
    ASSERT_EQ(ct.stats().live_pairs, uint64_t(kWorkers) * kPerWorker);

    auto h = ct.make_handle();
    for (uint32_t i = 0; i < kWorkers * kPerWorker; ++i) {
        auto f = flow_fixture(i, i % 2 ? Proto::Tcp : Proto::Udp);
        auto orig = ct.lookup(h, f.orig, 2000);
        ASSERT_TRUE(orig) << "lost original " << i;
        ASSERT_EQ(orig->translated_src, f.data.original_src);
        auto rep = ct.lookup(h, f.reply, 2000);
        ASSERT_TRUE(rep) << "lost reply " << i;
        ASSERT_EQ(rep->translated_dst, f.data.reply_dst);
    }
}

TEST(Conntrack, PairAtomicityUnderMutationStorm) {
    // Writers insert and expire flows while scanners assert that the two
    // directions of any flow appear together or not at all.
    ConnTable ct(1 << 12);
    std::atomic<bool> stop{false};
    constexpr uint32_t kFlows = 512;

    std::vector<std::thread> writers;
    for (int w = 0; w < 2; ++w)
        writers.emplace_back([&, w] {
            auto h = ct.make_handle();
            std::mt19937_64 rng(uint64_t(w) * 77 + 1);
            Timestamp now = 10'000'000'000ULL;
            while (!stop.load(std::memory_order_relaxed)) {
                uint32_t i = uint32_t(rng() % kFlows);
                auto f = flow_fixture(i);
                now += 1000;
                ct.insert_pair(h, f.orig, f.reply, f.data, now);
                if (rng() % 8 == 0)
                    ct.expire(h, now + uint64_t(ct.config().tcp_idle.count()) + 1);
            }
        });

    std::vector<std::thread> scanners;
    std::atomic<uint64_t> checks{0};
    for (int s = 0; s < 2; ++s)
        scanners.emplace_back([&] {
            auto h = ct.make_handle();
            std::mt19937_64 rng(999);
            while (!stop.load(std::memory_order_relaxed)) {
                uint32_t i = uint32_t(rng() % kFlows);
                auto f = flow_fixture(i);
                // Writers only move time forward, so from this scanner's
                // fixed viewpoint a pair observed once can only disappear
                // by eviction, never by idling out mid-check.
                Timestamp now = 10'000'000'000ULL;
                auto orig = ct.lookup(h, f.orig, now);
                auto rep = ct.lookup(h, f.reply, now);
                if (orig && !rep) {
                    // Legal only if the pair died in between; then the
                    // original must be gone (or replaced) too.
                    auto orig2 = ct.lookup(h, f.orig, now);
                    ASSERT_FALSE(orig2 && orig2->pair_id == orig->pair_id)
                        << "original visible without its reply";
                }
                if (rep && !orig) {
                    auto rep2 = ct.lookup(h, f.reply, now);
                    ASSERT_FALSE(rep2 && rep2->pair_id == rep->pair_id)
                        << "reply visible without its original";
                }
                checks.fetch_add(1, std::memory_order_relaxed);
            }
        });

    std::this_thread::sleep_for(1200ms);
    stop.store(true);
    for (auto& t : writers)
        t.join();
    for (auto& t : scanners)
        t.join();
    EXPECT_GT(checks.load(), 1000u);
}

TEST(Conntrack, ParkedWorkerDoesNotBlockOthers) {
    ConnTable ct(1024);
    std::mutex mu;
    std::condition_variable cv;
    bool parked = false, release = false;

    ct.set_pause_hook([&](PausePoint p) {
        if (p != PausePoint::AfterReplyClaim)
            return;
        std::unique_lock lock(mu);
        if (parked)
            return; // only the first insert parks
        parked = true;
        cv.notify_all();
        cv.wait(lock, [&] { return release; });
    });

    auto f = flow_fixture(11);
    std::thread victim([&] {
        auto h = ct.make_handle();
        PairData mine = f.data;
        mine.original_src.port = 61000; // loses the race while parked
        auto out = ct.insert_pair(h, f.orig, f.reply, mine, 1000);
        EXPECT_EQ(out.status, InsertStatus::Existing);
        EXPECT_EQ(out.record.translated_src, f.data.original_src);
    });

    {
        std::unique_lock lock(mu);
        cv.wait(lock, [&] { return parked; });
    }
    ct.set_pause_hook(nullptr); // only the victim parks

    // While the victim is suspended mid-insert, everyone else proceeds
    // within bounded work.
    auto h = ct.make_handle();
    auto rival = ct.insert_pair(h, f.orig, f.reply, f.data, 1000);
    EXPECT_EQ(rival.status, InsertStatus::Inserted);
    EXPECT_LE(h.last_op_probes(), 64u);

    for (uint32_t i = 100; i < 200; ++i) {
        auto g = flow_fixture(i);
        ASSERT_EQ(ct.insert_pair(h, g.orig, g.reply, g.data, 1000).status,
                  InsertStatus::Inserted);
        ASSERT_LE(h.last_op_probes(), 64u);
        ASSERT_TRUE(ct.lookup(h, g.orig, 1000));
        ASSERT_LE(h.last_op_probes(), 64u);
    }
    // Expiry also proceeds while the worker is parked.
    EXPECT_EQ(ct.expire(h, 1000), 0u);

    {
        std::lock_guard lock(mu);
        release = true;
    }
    cv.notify_all();
    victim.join();
    EXPECT_EQ(ct.stats().live_pairs, 101u);
    EXPECT_EQ(ct.stats().insert_races_lost, 1u);
}

TEST(Conntrack, ExpireEvictsStaleReleasesLease) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 1024, 1027});
    ConnTable ct(64, {}, &pool);
    auto h = ct.make_handle();

    auto lease = pool.allocate(Proto::Tcp);
    ASSERT_TRUE(lease);
    auto f = flow_fixture(1);
    f.data.lease = *lease;
    ct.insert_pair(h, f.orig, f.reply, f.data, 0);
    ASSERT_EQ(pool.occupancy().live_tcp, 1u);

    Timestamp later = uint64_t(ct.config().tcp_idle.count()) + 1;
    EXPECT_EQ(ct.expire(h, later), 1u);
    EXPECT_FALSE(ct.lookup(h, f.orig, later));
    EXPECT_FALSE(ct.lookup(h, f.reply, later));
    EXPECT_EQ(pool.occupancy().live_tcp, 0u); // lease returned
    EXPECT_EQ(ct.stats().evictions, 1u);
    EXPECT_EQ(ct.stats().live_pairs, 0u);
}

TEST(Conntrack, FreshRecordsRetained) {
    ConnTable ct(64);
    auto h = ct.make_handle();
    auto f = flow_fixture(1);
    ct.insert_pair(h, f.orig, f.reply, f.data, 1'000'000'000);
    EXPECT_EQ(ct.expire(h, 1'500'000'000), 0u);
    EXPECT_TRUE(ct.lookup(h, f.orig, 1'500'000'000));
}

TEST(Conntrack, TouchKeepsPairAlive) {
    ConnTable ct(64);
    auto h = ct.make_handle();
    auto f = flow_fixture(1);
    uint64_t idle = uint64_t(ct.config().tcp_idle.count());
    ct.insert_pair(h, f.orig, f.reply, f.data, 0);
    // Touch the reply direction only; the pair's last_seen is the max.
    ASSERT_TRUE(ct.lookup(h, f.reply, idle - 1000));
    EXPECT_EQ(ct.expire(h, idle + 1000), 0u);
    EXPECT_TRUE(ct.lookup(h, f.orig, idle + 1000));
}

TEST(Conntrack, HalfStaleFixtureEvictsExactlyHalf) {
    ConnTable ct(1 << 12);
    auto h = ct.make_handle();
    // 1000 pairs; even flows last touched at t=0, odd flows an hour later.
    for (uint32_t i = 0; i < 1000; ++i) {
        auto f = flow_fixture(i);
        Timestamp at = i % 2 ? 3'600'000'000'000ULL : 0;
        ASSERT_EQ(ct.insert_pair(h, f.orig, f.reply, f.data, at).status,
                  InsertStatus::Inserted);
    }
    Timestamp probe = 3'600'000'000'000ULL + 1000;
    EXPECT_EQ(ct.expire(h, probe), 500u);
    EXPECT_EQ(ct.stats().live_pairs, 500u);
    for (uint32_t i = 0; i < 1000; ++i) {
        auto f = flow_fixture(i);
        EXPECT_EQ(bool(ct.lookup(h, f.orig, probe)), i % 2 == 1) << i;
    }
}

TEST(Conntrack, LazyExpirySkipsStaleBeforeSweep) {
    ConnTable ct(64);
    auto h = ct.make_handle();
    auto f = flow_fixture(1, Proto::Udp);
    ct.insert_pair(h, f.orig, f.reply, f.data, 0);
    Timestamp past_udp_idle = uint64_t(ct.config().udp_idle.count()) + 1;
    // No sweep has run, but the record is already treated as absent.
    EXPECT_FALSE(ct.lookup(h, f.orig, past_udp_idle));
    EXPECT_FALSE(ct.lookup(h, f.reply, past_udp_idle));
    EXPECT_EQ(ct.stats().evictions, 0u);
}

TEST(Conntrack, CapacityRecycledAfterExpiry) {
    // Insert to capacity, expire everything, and verify the memory is
    // reusable for a fresh set of flows (grace periods notwithstanding).
    ConnTable ct(64); // 32 pairs
    auto h = ct.make_handle();
    for (uint32_t i = 0; i < 32; ++i) {
        auto f = flow_fixture(i);
        ASSERT_EQ(ct.insert_pair(h, f.orig, f.reply, f.data, 0).status, InsertStatus::Inserted);
    }
    Timestamp later = uint64_t(ct.config().tcp_idle.count()) + 1;
    EXPECT_EQ(ct.expire(h, later), 32u);
    // Two more sweeps advance the epochs enough to recycle.
    ct.expire(h, later);
    ct.expire(h, later);
    for (uint32_t i = 100; i < 132; ++i) {
        auto f = flow_fixture(i);
        ASSERT_EQ(ct.insert_pair(h, f.orig, f.reply, f.data, later).status,
                  InsertStatus::Inserted)
            << "pair memory not recycled, flow " << i;
    }
}

TEST(Conntrack, StaleEntryShadowedByReinsert) {
    ConnTable ct(64);
    auto h = ct.make_handle();
    auto f = flow_fixture(1);
    ct.insert_pair(h, f.orig, f.reply, f.data, 0);
    Timestamp later = uint64_t(ct.config().tcp_idle.count()) + 1;

    // Reinsert the same flow after idle expiry but before any sweep: the
    // fresh pair must win the lookups.
    PairData fresh = f.data;
    fresh.original_src.port = 50001;
    auto out = ct.insert_pair(h, f.orig, f.reply, fresh, later);
    ASSERT_EQ(out.status, InsertStatus::Inserted);
    auto rec = ct.lookup(h, f.orig, later);
    ASSERT_TRUE(rec);
    EXPECT_EQ(rec->translated_src.port, 50001);
}
