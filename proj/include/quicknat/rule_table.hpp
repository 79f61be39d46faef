#pragma once

#include <algorithm>
#include <bit>
#include <array>
#include <cstdint>
#include <optional>
#include <string>

#include <vector>

#include "quicknat/bytes.hpp"
#include "quicknat/errors.hpp"
#include "quicknat/net.hpp"

namespace quicknat {

enum class NatType : uint8_t { Snat = 0, Dnat = 1 };

inline const char* to_string(NatType t) { return t == NatType::Snat ? "snat" : "dnat"; }

// How a rule chooses the rewritten port.
//   Explicit  — a fixed port.
//   FromPool  — lease an endpoint from the NAT pool (SNAT only).
//   Keep      — keep the packet's original port (DNAT "*" target).
enum class RewritePort : uint8_t { Explicit = 0, FromPool = 1, Keep = 2 };

// One translation rule. match_port empty means wildcard (matches any
// port); such rules are keyed under port 0, so 0 is not a legal explicit
// match port.
struct NatRule {
    NatType nat_type = NatType::Snat;
    Ipv4Addr match_ip;
    uint8_t prefix_len = 32;            // 1..=32
    std::optional<uint16_t> match_port; // empty = wildcard
    Ipv4Addr rewrite_ip;
    RewritePort rewrite_port_kind = RewritePort::Explicit;
    uint16_t rewrite_port = 0;          // meaningful only for Explicit

    bool wildcard_port() const { return !match_port.has_value(); }

    bool matches(NatType t, Ipv4Addr ip, uint16_t port) const {
        if (t != nat_type) return false;
        if (masked(ip, prefix_len) != masked(match_ip, prefix_len)) return false;
        return wildcard_port() || *match_port == port;
    }
};

// One hash probe performed by qns_lookup, for instrumentation.
struct Probe {
    uint8_t prefix_len;
    bool wildcard; // false = exact-port probe, true = zero-port probe
    bool hit;
};
using ProbeTrace = std::vector<Probe>;

namespace rule_detail {

// Open-addressing hash table for one (nat_type, prefix_len) sub-table,
// keyed by the packed (masked IP, port) word. Linear probing at load
// factor <= 1/2; deletion rebuilds (a config-path operation). Keys live
// in their own flat array so a probe walks 8-byte entries and the rule
// payload is touched only on a hit. Packed keys use 48 bits, leaving
// an all-ones sentinel for empty slots.
class SubTable {
    static constexpr uint64_t kEmpty = ~uint64_t(0);
    // Fibonacci multiplicative hashing: one multiply on the probe's
    // critical path, top bits select the slot.
    static constexpr uint64_t kGolden = 0x9E3779B97F4A7C15ULL;

public:
    // Callers only probe flagged (hence non-empty) sub-tables.
    const NatRule* find(uint64_t key, uint64_t mixed_seed) const {
        size_t mask = keys_.size() - 1;
        size_t i = size_t(((key ^ mixed_seed) * kGolden) >> 40) & mask;
        while (keys_[i] != kEmpty) {
            if (keys_[i] == key)
                return &rules_[i];
            i = (i + 1) & mask;
        }
        return nullptr;
    }

    bool insert(uint64_t key, const NatRule& rule, uint64_t mixed_seed) {
        if (!keys_.empty() && find(key, mixed_seed))
            return false;
        if ((size_ + 1) * 2 > keys_.size())
            grow(mixed_seed);
        place(key, rule, mixed_seed);
        ++size_;
        return true;
    }

    bool erase(uint64_t key, uint64_t mixed_seed) {
        if (keys_.empty() || !find(key, mixed_seed))
            return false;
        std::vector<uint64_t> old_keys = std::move(keys_);
        std::vector<NatRule> old_rules = std::move(rules_);
        keys_.assign(old_keys.size(), kEmpty);
        rules_.assign(old_rules.size(), {});
        --size_;
        for (size_t i = 0; i < old_keys.size(); ++i)
            if (old_keys[i] != kEmpty && old_keys[i] != key)
                place(old_keys[i], old_rules[i], mixed_seed);
        return true;
    }

    bool empty() const { return size_ == 0; }
    size_t size() const { return size_; }

    template <typename F>
    void for_each(F&& f) const {
        for (size_t i = 0; i < keys_.size(); ++i)
            if (keys_[i] != kEmpty)
                f(rules_[i]);
    }

private:
    void grow(uint64_t mixed_seed) {
        std::vector<uint64_t> old_keys = std::move(keys_);
        std::vector<NatRule> old_rules = std::move(rules_);
        size_t n = old_keys.empty() ? 16 : old_keys.size() * 2;
        keys_.assign(n, kEmpty);
        rules_.assign(n, {});
        for (size_t i = 0; i < old_keys.size(); ++i)
            if (old_keys[i] != kEmpty)
                place(old_keys[i], old_rules[i], mixed_seed);
    }

    void place(uint64_t key, const NatRule& rule, uint64_t mixed_seed) {
        size_t mask = keys_.size() - 1;
        size_t i = size_t(((key ^ mixed_seed) * kGolden) >> 40) & mask;
        while (keys_[i] != kEmpty)
            i = (i + 1) & mask;
        keys_[i] = key;
        rules_[i] = rule;
    }

    std::vector<uint64_t> keys_;
    std::vector<NatRule> rules_;
    size_t size_ = 0;
};

} // namespace rule_detail

// Rule store of the Quick NAT search structure: 32 SNAT and 32 DNAT hash
// sub-tables, one per prefix length, each with a non-empty flag so empty
// prefix lengths are skipped in O(1). Lookup walks prefix lengths 32
// down to 1, probing the exact port before the wildcard port, and stops
// at the first hit.
//
// A published RuleTableSet is immutable and safely shared across workers;
// mutation happens on a private copy before publication.
class RuleTableSet {
public:
    explicit RuleTableSet(uint64_t hash_seed = 0, uint64_t generation = 0)
        : hash_seed_(hash_seed), mixed_seed_(mix64(hash_seed)), generation_(generation) {}

    uint64_t generation() const { return generation_; }
    void set_generation(uint64_t g) { generation_ = g; }

    // Normalizes the match IP to its prefix and stores the rule in the
    // (nat_type, prefix_len) sub-table, setting that sub-table's flag.
    void insert_rule(NatRule rule) {
        validate(rule);
        rule.match_ip = masked(rule.match_ip, rule.prefix_len);
        auto& table = sub_tables_[type_index(rule.nat_type)][rule.prefix_len - 1];
        if (!table.insert(key_of(rule.match_ip, port_key(rule)), rule, mixed_seed_))
            throw DuplicateRule("rule already present: " + describe(rule));
        flag_bits_[type_index(rule.nat_type)] |= 1u << (rule.prefix_len - 1);
        ++size_;
    }

    // Removes a rule; clears the sub-table flag when it empties.
    void delete_rule(NatType t, Ipv4Addr match_ip, uint8_t prefix_len,
                     std::optional<uint16_t> match_port) {
        if (prefix_len < 1 || prefix_len > 32)
            throw NotFound("no such rule: prefix length out of range");
        auto& table = sub_tables_[type_index(t)][prefix_len - 1];
        uint64_t key = key_of(masked(match_ip, prefix_len), match_port.value_or(0));
        if (!table.erase(key, mixed_seed_))
            throw NotFound("no such rule");
        if (table.empty())
            flag_bits_[type_index(t)] &= ~(1u << (prefix_len - 1));
        --size_;
    }

    // QNS lookup. Returns the first rule found in decreasing-prefix,
    // exact-before-wildcard probe order, or nullptr on a full miss.
    const NatRule* qns_lookup(NatType t, Ipv4Addr ip, uint16_t port,
                              ProbeTrace* trace = nullptr) const {
        return trace ? lookup_impl<true>(t, ip, port, trace)
                     : lookup_impl<false>(t, ip, port, nullptr);
    }

    bool flag(NatType t, uint8_t prefix_len) const {
        return (flag_bits_[type_index(t)] >> (prefix_len - 1)) & 1;
    }

    size_t size() const { return size_; }
    uint64_t hash_seed() const { return hash_seed_; }

    // All rules in unspecified order (for serialization and stats).
    std::vector<NatRule> all_rules() const {
        std::vector<NatRule> out;
        out.reserve(size_);
        for (const auto& per_type : sub_tables_)
            for (const auto& table : per_type)
                table.for_each([&](const NatRule& r) { out.push_back(r); });
        return out;
    }

    static void validate(const NatRule& rule) {
        if (rule.prefix_len < 1 || rule.prefix_len > 32)
            throw InvalidRule("prefix length must be in 1..=32");
        if (rule.rewrite_port_kind == RewritePort::FromPool && rule.nat_type != NatType::Snat)
            throw InvalidRule("pool-allocated rewrite is only legal for snat rules");
        if (rule.rewrite_port_kind == RewritePort::Keep && rule.nat_type != NatType::Dnat)
            throw InvalidRule("keep-port rewrite is only legal for dnat rules");
        if (rule.match_port && *rule.match_port == 0)
            throw InvalidRule("explicit match port 0 is reserved for wildcard keys");
    }

private:
    using Table = rule_detail::SubTable;

    // Empty sub-tables are skipped via their flag bits; iteration visits
    // only set bits, longest prefix first. The untraced path issues both
    // probes of a sub-table up front (the exact-port result still wins),
    // which keeps the per-sub-table bound of two hash probes but avoids
    // a data-dependent branch between them.
    template <bool kTrace>
    const NatRule* lookup_impl(NatType t, Ipv4Addr ip, uint16_t port, ProbeTrace* trace) const {
        const auto& tables = sub_tables_[type_index(t)];
        uint32_t bits = flag_bits_[type_index(t)];
        while (bits) {
            int m = 32 - std::countl_zero(bits);
            bits &= ~(1u << (m - 1));
            Ipv4Addr mip = masked(ip, unsigned(m));
            const auto& table = tables[m - 1];
            if constexpr (kTrace) {
                if (const NatRule* r = table.find(key_of(mip, port), mixed_seed_)) {
                    trace->push_back({uint8_t(m), false, true});
                    return r;
                }
                trace->push_back({uint8_t(m), false, false});
                if (const NatRule* r = table.find(key_of(mip, 0), mixed_seed_)) {
                    trace->push_back({uint8_t(m), true, true});
                    return r;
                }
                trace->push_back({uint8_t(m), true, false});
            } else {
                const NatRule* exact = table.find(key_of(mip, port), mixed_seed_);
                const NatRule* wild = table.find(key_of(mip, 0), mixed_seed_);
                if (const NatRule* r = exact ? exact : wild)
                    return r;
            }
        }
        return nullptr;
    }

    static size_t type_index(NatType t) { return size_t(t); }

    static uint64_t key_of(Ipv4Addr ip, uint16_t port) {
        return uint64_t(ip.value) << 16 | port;
    }

    static uint16_t port_key(const NatRule& r) { return r.match_port.value_or(0); }

    static std::string describe(const NatRule& r) {
        return std::string(to_string(r.nat_type)) + " " + to_string(r.match_ip) + "/" +
               std::to_string(r.prefix_len) +
               (r.wildcard_port() ? " *" : " " + std::to_string(*r.match_port));
    }

    std::array<std::array<Table, 32>, 2> sub_tables_;
    std::array<uint32_t, 2> flag_bits_{0, 0};
    uint64_t hash_seed_ = 0;
    uint64_t mixed_seed_ = 0;
    uint64_t generation_ = 0;
    size_t size_ = 0;
};

// Baseline sequential search over a flat rule list in list order,
// first match wins (the Netfilter-style lookup QNS is compared against).
inline const NatRule* linear_lookup(const std::vector<NatRule>& rules, NatType t, Ipv4Addr ip,
                                    uint16_t port) {
    for (const auto& r : rules)
        if (r.matches(t, ip, port))
            return &r;
    return nullptr;
}

// Sorts a flat rule list so linear_lookup applies QNS precedence:
// longer prefix first, exact port before wildcard within a prefix.
// Relative order is otherwise preserved.
inline void sort_by_precedence(std::vector<NatRule>& rules) {
    std::stable_sort(rules.begin(), rules.end(), [](const NatRule& a, const NatRule& b) {
        if (a.prefix_len != b.prefix_len) return a.prefix_len > b.prefix_len;
        return !a.wildcard_port() && b.wildcard_port();
    });
}

} // namespace quicknat
