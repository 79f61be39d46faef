// natctl — command-line front end for the Quick NAT engine: runs the
// translation pipeline over pcap files and reproduces the QNS vs linear
// rule-lookup benchmark.
//
// Exit codes: 0 success, 1 configuration error, 2 I/O error.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "quicknat/quicknat.hpp"

namespace qn = quicknat;
using nlohmann::json;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitIo = 2;

struct CliError {
    int code;
    std::string message;
};

void print_error(const std::string& category, const std::string& msg) {
    std::cerr << "natctl: error: " << category << ": " << msg << "\n";
}

qn::ConfigDocument load_config(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CliError{kExitConfig, "cannot open config file: " + path};
    std::ostringstream ss;
    ss << in.rdbuf();
    auto [doc, errors] = qn::parse_config(ss.str());
    if (!errors.empty()) {
        for (const auto& e : errors)
            print_error("config", path + ":" + std::to_string(e.line) + ": " + e.message);
        throw CliError{kExitConfig, "invalid configuration (" + std::to_string(errors.size()) +
                                        " error(s))"};
    }
    return doc;
}

json stats_to_json(const qn::PipelineStats& stats) {
    auto worker_json = [](const qn::WorkerStats& w) {
        return json{{"packets_in", w.packets_in},   {"packets_out", w.packets_out},
                    {"dropped", w.dropped},         {"conntrack_hits", w.conntrack_hits},
                    {"rule_hits", w.rule_hits},     {"rule_misses", w.rule_misses},
                    {"malformed", w.malformed},     {"pass_through", w.pass_through}};
    };
    json workers = json::array();
    for (const auto& w : stats.per_worker)
        workers.push_back(worker_json(w));
    return json{{"totals", worker_json(stats.totals())}, {"per_worker", workers}};
}

int cmd_run(const std::string& config_path, const std::string& in_private,
            const std::string& in_public, const std::string& out_path,
            const std::string& stats_json_path, uint32_t workers_flag, uint64_t pool_seed,
            uint32_t ct_capacity_log2) {
    qn::ConfigDocument cfg = load_config(config_path);
    if (workers_flag > 0)
        cfg.workers = workers_flag;
    if (in_private.empty() && in_public.empty())
        throw CliError{kExitConfig, "at least one of --in-private/--in-public is required"};

    auto rules = std::make_shared<qn::RuleTableSet>(pool_seed, 1);
    for (const auto& r : cfg.rules)
        rules->insert_rule(r);

    std::unique_ptr<qn::NatPool> pool;
    if (cfg.pool) {
        qn::PoolConfig pc = *cfg.pool;
        pc.seed = pool_seed;
        pool = std::make_unique<qn::NatPool>(pc);
    }

    qn::ConnTrackConfig ct_cfg;
    ct_cfg.tcp_idle = cfg.tcp_idle;
    ct_cfg.udp_idle = cfg.udp_idle;
    ct_cfg.hash_seed = pool_seed;
    qn::ConnTable conntrack(size_t(1) << ct_capacity_log2, ct_cfg, pool.get());

    qn::NatContext ctx;
    ctx.rules = rules;
    ctx.conntrack = &conntrack;
    ctx.pool = pool.get();
    ctx.policy = cfg.policy;

    try {
        std::unique_ptr<qn::PcapReader> private_in, public_in;
        if (!in_private.empty())
            private_in = std::make_unique<qn::PcapReader>(in_private);
        if (!in_public.empty())
            public_in = std::make_unique<qn::PcapReader>(in_public);

        std::unique_ptr<qn::PcapWriter> writer;
        if (!out_path.empty()) {
            qn::LinkType link = private_in ? private_in->link_type() : public_in->link_type();
            if (private_in && public_in && private_in->link_type() != public_in->link_type())
                throw CliError{kExitIo, "--out needs both inputs to share one link type"};
            writer = std::make_unique<qn::PcapWriter>(out_path, link);
        }

        std::unique_ptr<qn::DirectedSource> source;
        if (private_in && public_in)
            source = std::make_unique<qn::MergedSource>(*private_in, qn::Direction::Outbound,
                                                        *public_in, qn::Direction::Inbound);
        else if (private_in)
            source = std::make_unique<qn::SingleDirectionSource>(*private_in,
                                                                 qn::Direction::Outbound);
        else
            source = std::make_unique<qn::SingleDirectionSource>(*public_in,
                                                                 qn::Direction::Inbound);

        qn::PipelineStats stats = qn::run_pipeline(*source, writer.get(), cfg.workers, ctx);
        if (writer)
            writer->flush();

        auto t = stats.totals();
        std::cout << "packets in: " << t.packets_in << "\n"
                  << "packets out: " << t.packets_out << "\n"
                  << "dropped: " << t.dropped << "\n"
                  << "conntrack hits: " << t.conntrack_hits << "\n"
                  << "rule hits: " << t.rule_hits << "\n"
                  << "rule misses: " << t.rule_misses << "\n"
                  << "malformed: " << t.malformed << "\n"
                  << "pass-through: " << t.pass_through << "\n";
        auto ct_stats = conntrack.stats();
        std::cout << "live pairs: " << ct_stats.live_pairs
                  << "  races lost: " << ct_stats.insert_races_lost
                  << "  evictions: " << ct_stats.evictions << "\n";
        if (pool) {
            auto occ = pool->occupancy();
            std::cout << "pool leases: tcp " << occ.live_tcp << ", udp " << occ.live_udp << " of "
                      << occ.total_per_proto << " per proto\n";
        }

        if (!stats_json_path.empty()) {
            json j = stats_to_json(stats);
            j["conntrack"] = {{"live_pairs", ct_stats.live_pairs},
                              {"insert_races_lost", ct_stats.insert_races_lost},
                              {"evictions", ct_stats.evictions}};
            if (pool) {
                auto occ = pool->occupancy();
                j["pool"] = {{"total_per_proto", occ.total_per_proto},
                             {"live_tcp", occ.live_tcp},
                             {"live_udp", occ.live_udp}};
            }
            std::ofstream out(stats_json_path, std::ios::binary);
            if (!out)
                throw CliError{kExitIo, "cannot write stats json: " + stats_json_path};
            out << j.dump(2) << "\n";
        }
    } catch (const qn::BadMagic& e) {
        throw CliError{kExitIo, e.what()};
    } catch (const qn::TruncatedRecord& e) {
        throw CliError{kExitIo, e.what()};
    } catch (const qn::IoError& e) {
        throw CliError{kExitIo, e.what()};
    }
    return kExitOk;
}

int cmd_bench(const std::string& rules_csv, const std::string& algorithms_csv, uint32_t queries,
              bool paper_fidelity, uint64_t seed, const std::string& out_path, bool as_json) {
    std::vector<uint32_t> rule_counts;
    std::stringstream rs(rules_csv);
    std::string tok;
    while (std::getline(rs, tok, ',')) {
        try {
            unsigned long v = std::stoul(tok);
            if (v < 1 || v > 10'000'000)
                throw std::out_of_range(tok);
            rule_counts.push_back(uint32_t(v));
        } catch (const std::exception&) {
            throw CliError{kExitConfig, "invalid rule count '" + tok + "'"};
        }
    }
    if (rule_counts.empty())
        throw CliError{kExitConfig, "--rules needs at least one count"};

    std::vector<qn::BenchAlgorithm> algos;
    std::stringstream as(algorithms_csv);
    while (std::getline(as, tok, ',')) {
        if (tok == "qns")
            algos.push_back(qn::BenchAlgorithm::Qns);
        else if (tok == "linear")
            algos.push_back(qn::BenchAlgorithm::Linear);
        else
            throw CliError{kExitConfig, "unknown algorithm '" + tok + "' (qns|linear)"};
    }
    if (algos.empty())
        throw CliError{kExitConfig, "--algorithms needs at least one of qns,linear"};

    if (paper_fidelity)
        queries = 100;

    double baseline = qn::measure_clock_baseline_ns();
    std::cerr << "clock baseline: " << baseline << " ns per timed empty section\n";

    std::vector<qn::BenchResult> results;
    for (uint32_t count : rule_counts)
        for (auto algo : algos)
            results.push_back(qn::run_lookup_bench(count, queries, algo, seed));

    std::string report;
    if (as_json) {
        json arr = json::array();
        for (const auto& r : results)
            arr.push_back({{"algorithm", qn::to_string(r.algorithm)},
                           {"rule_count", r.rule_count},
                           {"lookups", r.lookups},
                           {"mean_ns", r.mean_ns},
                           {"p50_ns", r.p50_ns},
                           {"p99_ns", r.p99_ns},
                           {"seed", r.seed}});
        report = arr.dump(2) + "\n";
    } else {
        report = qn::emit_report(results);
    }

    if (out_path.empty()) {
        std::cout << report;
    } else {
        std::ofstream out(out_path, std::ios::binary);
        if (!out || !(out << report))
            throw CliError{kExitIo, "cannot write report: " + out_path};
    }
    return kExitOk;
}

int cmd_throughput(uint32_t flows, uint32_t packets_per_flow, uint32_t workers, uint64_t seed) {
    qn::TrafficSpec spec;
    spec.n_flows = flows;
    spec.packets_per_flow = packets_per_flow;
    spec.tcp_fraction = 0.8;
    spec.seed = seed;
    auto res = qn::run_throughput_bench(spec, workers);
    std::cout << "packets: " << res.packets << "\n"
              << "elapsed: " << res.elapsed_sec << " s\n"
              << "rate: " << uint64_t(res.packets_per_sec) << " packets/s\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Quick NAT userspace engine"};
    app.require_subcommand(1);

    auto* run = app.add_subcommand("run", "translate packets from pcap files");
    std::string config_path, in_private, in_public, out_path, stats_json;
    uint32_t workers_flag = 0;
    uint64_t pool_seed = 0;
    uint32_t ct_capacity_log2 = 20;
    run->add_option("--config", config_path, "rule/pool/policy config file")->required();
    run->add_option("--in-private", in_private, "pcap of traffic from the private side (SNAT)");
    run->add_option("--in-public", in_public, "pcap of traffic from the public side (DNAT)");
    run->add_option("--out", out_path, "write translated+forwarded packets to this pcap");
    run->add_option("--stats-json", stats_json, "write pipeline stats as JSON");
    run->add_option("--workers", workers_flag, "worker count (overrides config)");
    run->add_option("--pool-seed", pool_seed, "seed for pool placement and hashing");
    run->add_option("--ct-capacity-log2", ct_capacity_log2, "conntrack capacity as a power of two")
        ->check(CLI::Range(4u, 26u));

    auto* bench = app.add_subcommand("bench", "QNS vs linear rule-lookup timing");
    std::string rules_csv = "100,1000,3000,5000,10000";
    std::string algorithms_csv = "qns,linear";
    uint32_t queries = 100000;
    bool paper_fidelity = false;
    uint64_t bench_seed = 1;
    std::string bench_out;
    bool bench_json = false;
    bench->add_option("--rules", rules_csv, "comma-separated rule counts");
    bench->add_option("--algorithms", algorithms_csv, "subset of qns,linear");
    bench->add_option("--queries", queries, "timed lookups per configuration")
        ->check(CLI::Range(100u, 100000000u));
    bench->add_flag("--paper-fidelity", paper_fidelity, "use the original 100-lookup protocol");
    bench->add_option("--seed", bench_seed, "rule and query seed");
    bench->add_option("--out", bench_out, "write the report to a file instead of stdout");
    bench->add_flag("--json", bench_json, "emit JSON instead of CSV");

    auto* tput = app.add_subcommand("throughput", "synthetic pipeline throughput");
    uint32_t tput_flows = 10000, tput_ppf = 100, tput_workers = 1;
    uint64_t tput_seed = 1;
    tput->add_option("--flows", tput_flows, "distinct flows");
    tput->add_option("--packets-per-flow", tput_ppf, "packets per flow");
    tput->add_option("--workers", tput_workers, "worker count");
    tput->add_option("--seed", tput_seed, "traffic seed");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed())
            return cmd_run(config_path, in_private, in_public, out_path, stats_json, workers_flag,
                           pool_seed, ct_capacity_log2);
        if (bench->parsed())
            return cmd_bench(rules_csv, algorithms_csv, queries, paper_fidelity, bench_seed,
                             bench_out, bench_json);
        if (tput->parsed())
            return cmd_throughput(tput_flows, tput_ppf, tput_workers, tput_seed);
    } catch (const CliError& e) {
        print_error(e.code == kExitConfig ? "config" : "io", e.message);
        return e.code;
    } catch (const qn::InvalidRule& e) {
        print_error("config", e.what());
        return kExitConfig;
    } catch (const qn::DuplicateRule& e) {
        print_error("config", e.what());
        return kExitConfig;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return kExitIo;
    }
    return kExitOk;
}
