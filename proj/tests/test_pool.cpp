#include <gtest/gtest.h>

#include <mutex>
#include <random>
#include <set>
#include <thread>
#include <vector>

#include "quicknat/nat_pool.hpp"

using namespace quicknat;

namespace {

std::tuple<uint32_t, uint16_t, uint8_t> triple_of(const Lease& l) {
    return {l.ip.value, l.port, uint8_t(l.proto)};
}

} // namespace

TEST(Pool, PigeonholeExhaustion) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 1024, 1025});
    auto a = pool.allocate(Proto::Tcp);
    auto b = pool.allocate(Proto::Tcp);
    ASSERT_TRUE(a && b);
    EXPECT_NE(a->port, b->port);
    EXPECT_FALSE(pool.allocate(Proto::Tcp));
}

TEST(Pool, ReleaseMakesTripleReusable) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 1024, 1024});
    auto a = pool.allocate(Proto::Tcp);
    ASSERT_TRUE(a);
    EXPECT_FALSE(pool.allocate(Proto::Tcp));
    pool.release(*a);
    auto b = pool.allocate(Proto::Tcp);
    ASSERT_TRUE(b);
    EXPECT_EQ(b->port, a->port);
}

TEST(Pool, DoubleReleaseDetected) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 1024, 1027});
    auto a = pool.allocate(Proto::Tcp);
    pool.release(*a);
    EXPECT_THROW(pool.release(*a), DoubleRelease);
}

TEST(Pool, StaleLeaseAfterReallocationDetected) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 1024, 1024});
    auto a = pool.allocate(Proto::Tcp);
    pool.release(*a);
    auto b = pool.allocate(Proto::Tcp);
    ASSERT_EQ(a->port, b->port);
    EXPECT_THROW(pool.release(*a), DoubleRelease); // superseded lease id
    pool.release(*b);
}

TEST(Pool, ProtocolSpacesIndependent) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 2000, 2000});
    auto tcp = pool.allocate(Proto::Tcp);
    auto udp = pool.allocate(Proto::Udp);
    ASSERT_TRUE(tcp && udp);
    EXPECT_EQ(tcp->port, 2000);
    EXPECT_EQ(udp->port, 2000);
    EXPECT_FALSE(pool.allocate(Proto::Tcp));
    EXPECT_FALSE(pool.allocate(Proto::Udp));
}

TEST(Pool, RoundRobinAcrossIpsThenPorts) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 1), Ipv4Addr(203, 0, 113, 2)}, 1024, 1025});
    auto a = pool.allocate(Proto::Tcp);
    auto b = pool.allocate(Proto::Tcp);
    auto c = pool.allocate(Proto::Tcp);
    auto d = pool.allocate(Proto::Tcp);
    ASSERT_TRUE(a && b && c && d);
    EXPECT_EQ((std::pair{a->ip, a->port}), (std::pair{Ipv4Addr(203, 0, 113, 1), uint16_t(1024)}));
    EXPECT_EQ((std::pair{b->ip, b->port}), (std::pair{Ipv4Addr(203, 0, 113, 2), uint16_t(1024)}));
    EXPECT_EQ((std::pair{c->ip, c->port}), (std::pair{Ipv4Addr(203, 0, 113, 1), uint16_t(1025)}));
    EXPECT_EQ((std::pair{d->ip, d->port}), (std::pair{Ipv4Addr(203, 0, 113, 2), uint16_t(1025)}));
}

TEST(Pool, ConservationAtQuiescence) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 7)}, 1024, 1123});
    std::vector<Lease> held;
    std::mt19937_64 rng(9);
    for (int step = 0; step < 500; ++step) {
        if (held.empty() || rng() % 2) {
            if (auto l = pool.allocate(Proto::Udp))
                held.push_back(*l);
        } else {
            size_t i = rng() % held.size();
            pool.release(held[i]);
            held.erase(held.begin() + ptrdiff_t(i));
        }
        auto occ = pool.occupancy();
        ASSERT_EQ(occ.live_udp, held.size());
        ASSERT_EQ(occ.total_per_proto, 100u);
    }
}

TEST(Pool, ConcurrentAllocationsAreUnique) {
    // 8 workers x 1000 allocations from a 10k-triple pool.
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 1)}, 1024, 11023});
    constexpr int kWorkers = 8, kEach = 1000;
    std::vector<std::vector<Lease>> got(kWorkers);
    std::vector<std::thread> threads;
    for (int w = 0; w < kWorkers; ++w)
        threads.emplace_back([&, w] {
            got[w].reserve(kEach);
            for (int i = 0; i < kEach; ++i) {
                auto l = pool.allocate(Proto::Tcp);
                ASSERT_TRUE(l);
                got[w].push_back(*l);
            }
        });
    for (auto& t : threads)
        t.join();

    std::set<std::tuple<uint32_t, uint16_t, uint8_t>> seen;
    for (const auto& v : got)
        for (const auto& l : v)
            ASSERT_TRUE(seen.insert(triple_of(l)).second)
                << "duplicate triple " << to_string(l.ip) << ":" << l.port;
    EXPECT_EQ(seen.size(), size_t(kWorkers) * kEach);
    EXPECT_EQ(pool.occupancy().live_tcp, size_t(kWorkers) * kEach);
}

TEST(Pool, ReleaseUnderAllocationStorm) {
    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 1)}, 1024, 2047});
    std::atomic<bool> stop{false};
    std::mutex mu;
    std::set<std::tuple<uint32_t, uint16_t, uint8_t>> live;

    std::vector<std::thread> threads;
    for (int w = 0; w < 4; ++w)
        threads.emplace_back([&] {
            std::mt19937_64 rng(std::hash<std::thread::id>{}(std::this_thread::get_id()));
            std::vector<Lease> mine;
            while (!stop.load()) {
                if (mine.size() < 64 && rng() % 2) {
                    if (auto l = pool.allocate(Proto::Udp)) {
                        {
                            std::lock_guard lock(mu);
                            ASSERT_TRUE(live.insert(triple_of(*l)).second)
                                << "triple double-held";
                        }
                        mine.push_back(*l);
                    }
                } else if (!mine.empty()) {
                    size_t i = rng() % mine.size();
                    {
                        std::lock_guard lock(mu);
                        live.erase(triple_of(mine[i]));
                    }
                    pool.release(mine[i]);
                    mine.erase(mine.begin() + ptrdiff_t(i));
                }
            }
            for (const auto& l : mine)
                pool.release(l);
        });
    std::this_thread::sleep_for(std::chrono::milliseconds(300));
    stop.store(true);
    for (auto& t : threads)
        t.join();
    EXPECT_EQ(pool.occupancy().live_udp, 0u);
}

TEST(Pool, HintedAllocationIsPositionStable) {
    PoolConfig cfg{{Ipv4Addr(203, 0, 113, 7)}, 1024, 65535};
    cfg.seed = 42;
    NatPool a(cfg), b(cfg);
    // Same hints, different allocation order: identical assignments when
    // the hinted slots are collision-free.
    std::vector<uint64_t> hints{101, 202, 303, 404, 505};
    std::set<size_t> slots;
    for (uint64_t h : hints)
        ASSERT_TRUE(slots.insert(a.hint_slot(h)).second);

    std::vector<Lease> fwd, rev;
    for (uint64_t h : hints)
        fwd.push_back(*a.allocate(Proto::Tcp, h));
    for (auto it = hints.rbegin(); it != hints.rend(); ++it)
        rev.push_back(*b.allocate(Proto::Tcp, *it));
    std::reverse(rev.begin(), rev.end());
    for (size_t i = 0; i < hints.size(); ++i) {
        EXPECT_EQ(fwd[i].ip, rev[i].ip);
        EXPECT_EQ(fwd[i].port, rev[i].port);
    }
}

TEST(Pool, InvalidConfigRejected) {
    EXPECT_THROW(NatPool(PoolConfig{{}, 1024, 2048}), InvalidRule);
    EXPECT_THROW(NatPool(PoolConfig{{Ipv4Addr(1, 2, 3, 4)}, 2048, 1024}), InvalidRule);
}
