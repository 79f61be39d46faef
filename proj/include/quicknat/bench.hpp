#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "quicknat/bytes.hpp"
#include "quicknat/datapath.hpp"
#include "quicknat/rule_table.hpp"
#include "quicknat/traffic_gen.hpp"

namespace quicknat {

enum class BenchAlgorithm : uint8_t { Qns, Linear };

inline const char* to_string(BenchAlgorithm a) {
    return a == BenchAlgorithm::Qns ? "qns" : "linear";
}

struct BenchResult {
    BenchAlgorithm algorithm = BenchAlgorithm::Qns;
    uint32_t rule_count = 0;
    uint32_t lookups = 0;
    double mean_ns = 0;
    double p50_ns = 0;
    double p99_ns = 0;
    uint64_t seed = 0;
};

namespace bench_detail {

inline uint64_t now_ns() {
    return uint64_t(std::chrono::duration_cast<std::chrono::nanoseconds>(
                        std::chrono::steady_clock::now().time_since_epoch())
                        .count());
}

// Per-lookup sections are tens of nanoseconds, so the timestamp source
// is the invariant TSC where available (a steady_clock read alone costs
// ~25 ns); ticks are converted through a one-time calibration against
// the monotonic clock.
#if defined(__x86_64__) || defined(__i386__)
inline uint64_t clock_ticks() { return __builtin_ia32_rdtsc(); }

inline double ticks_per_ns() {
    static const double rate = [] {
        uint64_t t0 = clock_ticks();
        uint64_t n0 = now_ns();
        while (now_ns() - n0 < 20'000'000) {
        }
        uint64_t t1 = clock_ticks();
        uint64_t n1 = now_ns();
        double r = double(t1 - t0) / double(n1 - n0);
        return r > 0.1 && r < 20.0 ? r : 1.0;
    }();
    return rate;
}
#else
inline uint64_t clock_ticks() { return now_ns(); }
inline double ticks_per_ns() { return 1.0; }
#endif

inline uint64_t ticks_to_ns(uint64_t ticks) {
    return uint64_t(double(ticks) / ticks_per_ns() + 0.5);
}

// Random SNAT rule set: prefix lengths uniform over {16, 24, 32}, half
// the rules wildcard-port, unique keys.
inline std::vector<NatRule> make_rules(uint32_t count, uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::vector<NatRule> rules;
    rules.reserve(count);
    RuleTableSet dedup(seed);
    const uint8_t prefixes[3] = {16, 24, 32};
    while (rules.size() < count) {
        NatRule r;
        r.nat_type = NatType::Snat;
        r.prefix_len = prefixes[rng() % 3];
        r.match_ip = masked(Ipv4Addr{uint32_t(rng())}, r.prefix_len);
        if (rng() % 2)
            r.match_port = uint16_t(1 + rng() % 65535);
        r.rewrite_ip = Ipv4Addr{uint32_t(0xCB007100) | uint32_t(rng() % 250)};
        r.rewrite_port_kind = RewritePort::Explicit;
        r.rewrite_port = uint16_t(1024 + rng() % 64512);
        try {
            dedup.insert_rule(r);
        } catch (const DuplicateRule&) {
            continue;
        }
        rules.push_back(r);
    }
    return rules;
}

// Queries guaranteed to match some rule ("look for different NAT rules").
inline std::vector<Endpoint> make_queries(const std::vector<NatRule>& rules, uint32_t n,
                                          uint64_t seed) {
    std::mt19937_64 rng(seed ^ 0x9e3779b97f4a7c15ULL);
    std::vector<Endpoint> qs;
    qs.reserve(n);
    for (uint32_t i = 0; i < n; ++i) {
        const NatRule& r = rules[rng() % rules.size()];
        uint32_t host_space = r.prefix_len >= 32 ? 0 : (1u << (32 - r.prefix_len)) - 1;
        Ipv4Addr ip{r.match_ip.value | (host_space ? uint32_t(rng()) & host_space : 0)};
        uint16_t port = r.match_port ? *r.match_port : uint16_t(1 + rng() % 65535);
        qs.push_back({ip, port});
    }
    return qs;
}

inline double percentile(std::vector<uint64_t>& sorted, double p) {
    if (sorted.empty())
        return 0;
    size_t idx = size_t(p * double(sorted.size() - 1) + 0.5);
    return double(sorted[std::min(idx, sorted.size() - 1)]);
}

} // namespace bench_detail

// Mean cost of an empty timed section, published alongside results so
// per-lookup numbers can be read against the clock overhead.
inline double measure_clock_baseline_ns(uint32_t samples = 100000) {
    using bench_detail::clock_ticks;
    uint64_t acc = 0;
    for (uint32_t i = 0; i < samples; ++i) {
        uint64_t t0 = clock_ticks();
        uint64_t t1 = clock_ticks();
        acc += t1 - t0;
    }
    return double(bench_detail::ticks_to_ns(acc)) / double(samples);
}

// Times n_queries individual lookups against a seeded rule set of
// rule_count rules, after a 10k-lookup warm-up. The same seed always
// produces the same rules and query sequence. QNS and the linear
// baseline are verified to agree on every query before timing.
inline BenchResult run_lookup_bench(uint32_t rule_count, uint32_t n_queries,
                                    BenchAlgorithm algorithm, uint64_t seed,
                                    std::vector<uint64_t>* samples_out = nullptr) {
    using bench_detail::now_ns;
    if (rule_count < 1)
        throw ContractViolation("rule_count must be >= 1");
    if (n_queries < 100)
        throw ContractViolation("n_queries must be >= 100");

    std::vector<NatRule> rules = bench_detail::make_rules(rule_count, seed);
    std::vector<Endpoint> queries = bench_detail::make_queries(rules, n_queries, seed);

    RuleTableSet tables(seed);
    for (const auto& r : rules)
        tables.insert_rule(r);
    std::vector<NatRule> flat = rules;
    sort_by_precedence(flat);

    // Correctness pass, untimed: both algorithms answer identically.
    for (const auto& q : queries) {
        const NatRule* a = tables.qns_lookup(NatType::Snat, q.ip, q.port);
        const NatRule* b = linear_lookup(flat, NatType::Snat, q.ip, q.port);
        if (!a || !b || !(a->rewrite_ip == b->rewrite_ip && a->rewrite_port == b->rewrite_port &&
                          a->prefix_len == b->prefix_len))
            throw ContractViolation("qns and linear search disagree on a benchmark query");
    }

    const uint32_t warmup = 10000;
    for (uint32_t i = 0; i < warmup; ++i) {
        const Endpoint& q = queries[i % queries.size()];
        const NatRule* r = algorithm == BenchAlgorithm::Qns
                               ? tables.qns_lookup(NatType::Snat, q.ip, q.port)
                               : linear_lookup(flat, NatType::Snat, q.ip, q.port);
        do_not_optimize(r);
    }

    using bench_detail::clock_ticks;
    using bench_detail::ticks_to_ns;
    std::vector<uint64_t> samples(queries.size());
    if (algorithm == BenchAlgorithm::Qns) {
        for (size_t i = 0; i < queries.size(); ++i) {
            const Endpoint& q = queries[i];
            uint64_t t0 = clock_ticks();
            const NatRule* r = tables.qns_lookup(NatType::Snat, q.ip, q.port);
            uint64_t t1 = clock_ticks();
            do_not_optimize(r);
            samples[i] = ticks_to_ns(t1 - t0);
        }
    } else {
        for (size_t i = 0; i < queries.size(); ++i) {
            const Endpoint& q = queries[i];
            uint64_t t0 = clock_ticks();
            const NatRule* r = linear_lookup(flat, NatType::Snat, q.ip, q.port);
            uint64_t t1 = clock_ticks();
            do_not_optimize(r);
            samples[i] = ticks_to_ns(t1 - t0);
        }
    }

    BenchResult res;
    res.algorithm = algorithm;
    res.rule_count = rule_count;
    res.lookups = n_queries;
    res.seed = seed;
    uint64_t total = 0;
    for (uint64_t s : samples)
        total += s;
    res.mean_ns = double(total) / double(samples.size());
    std::vector<uint64_t> sorted = samples;
    std::sort(sorted.begin(), sorted.end());
    res.p50_ns = bench_detail::percentile(sorted, 0.50);
    res.p99_ns = bench_detail::percentile(sorted, 0.99);
    if (samples_out)
        *samples_out = std::move(samples);
    return res;
}

struct ThroughputResult {
    double packets_per_sec = 0;
    uint64_t packets = 0;
    double elapsed_sec = 0;
    PipelineStats stats;
};

// Drives a synthetic trace through the pipeline with a null sink. The
// pool and conntrack table are sized for the trace; the implicit config
// is one SNAT rule covering the private subnet.
inline ThroughputResult run_throughput_bench(const TrafficSpec& spec, uint32_t n_workers) {
    auto rules = std::make_shared<RuleTableSet>(spec.seed);
    NatRule rule;
    rule.nat_type = NatType::Snat;
    rule.match_ip = masked(spec.private_subnet, spec.private_prefix);
    rule.prefix_len = spec.private_prefix;
    rule.rewrite_ip = Ipv4Addr(203, 0, 113, 1);
    rule.rewrite_port_kind = RewritePort::FromPool;
    rules->insert_rule(rule);

    NatPool pool(PoolConfig{{Ipv4Addr(203, 0, 113, 1)}, 1024, 65535, spec.seed});
    size_t cap = 2;
    while (cap < size_t(spec.n_flows) * 4)
        cap <<= 1;
    ConnTable conntrack(cap, ConnTrackConfig{}, &pool);

    NatContext ctx;
    ctx.rules = rules;
    ctx.conntrack = &conntrack;
    ctx.pool = &pool;

    SyntheticSource source(spec);
    SingleDirectionSource directed(source, Direction::Outbound);

    uint64_t t0 = bench_detail::now_ns();
    PipelineStats stats = run_pipeline(directed, nullptr, n_workers, ctx);
    uint64_t t1 = bench_detail::now_ns();

    ThroughputResult res;
    res.stats = std::move(stats);
    res.packets = res.stats.totals().packets_in;
    res.elapsed_sec = double(t1 - t0) / 1e9;
    res.packets_per_sec = res.elapsed_sec > 0 ? double(res.packets) / res.elapsed_sec : 0;
    return res;
}

// CSV report, one row per result in input order.
inline std::string emit_report(const std::vector<BenchResult>& results) {
    std::ostringstream out;
    out << "algorithm,rule_count,lookups,mean_ns,p50_ns,p99_ns,seed\n";
    for (const auto& r : results) {
        out << to_string(r.algorithm) << ',' << r.rule_count << ',' << r.lookups << ',';
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%.1f,%.1f,%.1f", r.mean_ns, r.p50_ns, r.p99_ns);
        out << buf << ',' << r.seed << '\n';
    }
    return out.str();
}

} // namespace quicknat
