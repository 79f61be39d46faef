#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "quicknat/datapath.hpp"
#include "quicknat/nat_pool.hpp"
#include "quicknat/net.hpp"
#include "quicknat/rule_table.hpp"

namespace quicknat {

// Line-oriented config, one statement per line, '#' comments:
//
//   snat <ip>/<prefix> <port|*> -> <ip> <port|pool>
//   dnat <ip>/<prefix> <port|*> -> <ip> <port|*>     (* target = keep port)
//   pool <ip>[,<ip>...] ports <lo>-<hi>
//   policy miss <forward|drop>
//   policy fragment <forward|drop>
//   timeout tcp <secs>
//   timeout udp <secs>
//   workers <n>

struct ConfigError {
    int line = 0;
    std::string message;
};

struct ConfigDocument {
    std::vector<NatRule> rules;
    std::optional<PoolConfig> pool;
    PipelinePolicy policy;
    std::chrono::seconds tcp_idle{300};
    std::chrono::seconds udp_idle{60};
    uint32_t workers = 1;
};

namespace config_detail {

inline std::vector<std::string> tokenize(std::string_view line) {
    std::vector<std::string> toks;
    size_t i = 0;
    while (i < line.size()) {
        while (i < line.size() && (line[i] == ' ' || line[i] == '\t'))
            ++i;
        if (i >= line.size() || line[i] == '#')
            break;
        size_t start = i;
        while (i < line.size() && line[i] != ' ' && line[i] != '\t' && line[i] != '#')
            ++i;
        toks.emplace_back(line.substr(start, i - start));
    }
    return toks;
}

inline std::optional<uint64_t> parse_uint(std::string_view s, uint64_t max) {
    if (s.empty() || s.size() > 20)
        return std::nullopt;
    uint64_t v = 0;
    for (char c : s) {
        if (c < '0' || c > '9')
            return std::nullopt;
        v = v * 10 + uint64_t(c - '0');
        if (v > max)
            return std::nullopt;
    }
    return v;
}

// "<ip>/<prefix>" with prefix 1..=32.
inline bool parse_prefix(std::string_view s, Ipv4Addr& ip, uint8_t& prefix, std::string& err) {
    size_t slash = s.find('/');
    if (slash == std::string_view::npos) {
        err = "expected <ip>/<prefix>";
        return false;
    }
    auto addr = parse_ipv4(s.substr(0, slash));
    if (!addr) {
        err = "invalid ip address '" + std::string(s.substr(0, slash)) + "'";
        return false;
    }
    auto p = parse_uint(s.substr(slash + 1), 64);
    if (!p || *p < 1 || *p > 32) {
        err = "invalid prefix '" + std::string(s.substr(slash + 1)) + "' (must be 1..32)";
        return false;
    }
    ip = *addr;
    prefix = uint8_t(*p);
    return true;
}

inline bool parse_port(std::string_view s, uint16_t& port, std::string& err) {
    auto v = parse_uint(s, 65535);
    if (!v || *v == 0) {
        err = "invalid port '" + std::string(s) + "' (must be 1..65535)";
        return false;
    }
    port = uint16_t(*v);
    return true;
}

} // namespace config_detail

// Parses the whole document, collecting every error with its line number
// instead of stopping at the first. A document with any error is
// rejected as a whole.
inline std::pair<ConfigDocument, std::vector<ConfigError>> parse_config(std::string_view text) {
    using namespace config_detail;
    ConfigDocument doc;
    std::vector<ConfigError> errors;
    RuleTableSet dedup;

    auto fail = [&](int line, std::string msg) { errors.push_back({line, std::move(msg)}); };

    int line_no = 0;
    size_t pos = 0;
    while (pos <= text.size()) {
        size_t eol = text.find('\n', pos);
        std::string_view line = text.substr(pos, eol == std::string_view::npos ? std::string_view::npos
                                                                               : eol - pos);
        pos = eol == std::string_view::npos ? text.size() + 1 : eol + 1;
        ++line_no;
        auto toks = tokenize(line);
        if (toks.empty())
            continue;
        const std::string& kw = toks[0];
        std::string err;

        if (kw == "snat" || kw == "dnat") {
            if (toks.size() != 6 || toks[3] != "->") {
                fail(line_no, kw + " syntax: " + kw + " <ip>/<prefix> <port|*> -> <ip> <port|" +
                                  (kw == "snat" ? "pool" : "*") + ">");
                continue;
            }
            NatRule rule;
            rule.nat_type = kw == "snat" ? NatType::Snat : NatType::Dnat;
            if (!parse_prefix(toks[1], rule.match_ip, rule.prefix_len, err)) {
                fail(line_no, err);
                continue;
            }
            if (toks[2] != "*") {
                uint16_t p;
                if (!parse_port(toks[2], p, err)) {
                    fail(line_no, err);
                    continue;
                }
                rule.match_port = p;
            }
            auto rewrite_ip = parse_ipv4(toks[4]);
            if (!rewrite_ip) {
                fail(line_no, "invalid rewrite ip '" + toks[4] + "'");
                continue;
            }
            rule.rewrite_ip = *rewrite_ip;
            if (rule.nat_type == NatType::Snat && toks[5] == "pool") {
                rule.rewrite_port_kind = RewritePort::FromPool;
            } else if (rule.nat_type == NatType::Dnat && toks[5] == "*") {
                rule.rewrite_port_kind = RewritePort::Keep;
            } else {
                uint16_t p;
                if (!parse_port(toks[5], p, err)) {
                    fail(line_no, err);
                    continue;
                }
                rule.rewrite_port_kind = RewritePort::Explicit;
                rule.rewrite_port = p;
            }
            try {
                dedup.insert_rule(rule);
                doc.rules.push_back(rule);
            } catch (const DuplicateRule&) {
                fail(line_no, "duplicate rule");
            } catch (const InvalidRule& e) {
                fail(line_no, e.what());
            }
        } else if (kw == "pool") {
            if (toks.size() != 4 || toks[2] != "ports") {
                fail(line_no, "pool syntax: pool <ip>[,<ip>...] ports <lo>-<hi>");
                continue;
            }
            PoolConfig pc;
            std::string_view ips = toks[1];
            bool ok = true;
            while (!ips.empty()) {
                size_t comma = ips.find(',');
                std::string_view one = ips.substr(0, comma);
                auto a = parse_ipv4(one);
                if (!a) {
                    fail(line_no, "invalid pool ip '" + std::string(one) + "'");
                    ok = false;
                    break;
                }
                pc.public_ips.push_back(*a);
                ips = comma == std::string_view::npos ? std::string_view{} : ips.substr(comma + 1);
            }
            if (!ok)
                continue;
            std::string_view range = toks[3];
            size_t dash = range.find('-');
            auto lo = dash == std::string_view::npos
                          ? std::nullopt
                          : parse_uint(range.substr(0, dash), 65535);
            auto hi = dash == std::string_view::npos ? std::nullopt
                                                     : parse_uint(range.substr(dash + 1), 65535);
            if (!lo || !hi || *lo == 0 || *lo > *hi) {
                fail(line_no, "invalid port range '" + std::string(range) + "'");
                continue;
            }
            pc.port_lo = uint16_t(*lo);
            pc.port_hi = uint16_t(*hi);
            if (doc.pool) {
                fail(line_no, "pool declared twice");
                continue;
            }
            doc.pool = pc;
        } else if (kw == "policy") {
            if (toks.size() != 3 || (toks[1] != "miss" && toks[1] != "fragment") ||
                (toks[2] != "forward" && toks[2] != "drop")) {
                fail(line_no, "policy syntax: policy <miss|fragment> <forward|drop>");
                continue;
            }
            Verdict v = toks[2] == "drop" ? Verdict::Drop : Verdict::PassThrough;
            if (toks[1] == "miss")
                doc.policy.miss_verdict = v;
            else
                doc.policy.fragment_verdict = v;
        } else if (kw == "timeout") {
            auto secs = toks.size() == 3 ? parse_uint(toks[2], 86400 * 365) : std::nullopt;
            if (toks.size() != 3 || (toks[1] != "tcp" && toks[1] != "udp") || !secs) {
                fail(line_no, "timeout syntax: timeout <tcp|udp> <secs>");
                continue;
            }
            if (toks[1] == "tcp")
                doc.tcp_idle = std::chrono::seconds(*secs);
            else
                doc.udp_idle = std::chrono::seconds(*secs);
        } else if (kw == "workers") {
            auto n = toks.size() == 2 ? parse_uint(toks[1], 256) : std::nullopt;
            if (!n || *n == 0) {
                fail(line_no, "workers syntax: workers <1..256>");
                continue;
            }
            doc.workers = uint32_t(*n);
        } else {
            fail(line_no, "unknown statement '" + kw + "'");
        }
    }

    // Whole-document validation.
    bool needs_pool = false;
    for (const auto& r : doc.rules)
        if (r.rewrite_port_kind == RewritePort::FromPool)
            needs_pool = true;
    if (needs_pool && !doc.pool)
        fail(0, "a snat rule uses 'pool' but no pool is declared");

    return {std::move(doc), std::move(errors)};
}

// Canonical re-serialization; parse(serialize(doc)) is structurally
// identical to doc.
inline std::string serialize_config(const ConfigDocument& doc) {
    std::ostringstream out;
    for (const auto& r : doc.rules) {
        out << to_string(r.nat_type) << ' ' << to_string(masked(r.match_ip, r.prefix_len)) << '/'
            << int(r.prefix_len) << ' ';
        if (r.match_port)
            out << *r.match_port;
        else
            out << '*';
        out << " -> " << to_string(r.rewrite_ip) << ' ';
        switch (r.rewrite_port_kind) {
            case RewritePort::Explicit: out << r.rewrite_port; break;
            case RewritePort::FromPool: out << "pool"; break;
            case RewritePort::Keep: out << '*'; break;
        }
        out << '\n';
    }
    if (doc.pool) {
        out << "pool ";
        for (size_t i = 0; i < doc.pool->public_ips.size(); ++i)
            out << (i ? "," : "") << to_string(doc.pool->public_ips[i]);
        out << " ports " << doc.pool->port_lo << '-' << doc.pool->port_hi << '\n';
    }
    out << "policy miss " << (doc.policy.miss_verdict == Verdict::Drop ? "drop" : "forward")
        << '\n';
    out << "policy fragment "
        << (doc.policy.fragment_verdict == Verdict::Drop ? "drop" : "forward") << '\n';
    out << "timeout tcp " << doc.tcp_idle.count() << '\n';
    out << "timeout udp " << doc.udp_idle.count() << '\n';
    out << "workers " << doc.workers << '\n';
    return out.str();
}

} // namespace quicknat
