// SPDX-License-Identifier: Apache-2.0
// Random generators for valid wire packets, shared by the unit and
// acceptance suites.
#pragma once

#include "sensert/wire.hpp"

#include <random>
#include <string>

namespace sensert::testing {

inline std::string random_level(std::mt19937_64& rng) {
    static const char* const pool[] = {"tele", "plug-17", "SENSOR", "v3", "app", "devices",
                                       "up",   "a",       "b",      "",   "caf\xC3\xA9",
                                       "\xE2\x82\xAC", "x y", "$SYS"};
    return pool[std::uniform_int_distribution<std::size_t>(0, std::size(pool) - 1)(rng)];
}

inline std::string random_topic(std::mt19937_64& rng) {
    const int depth = std::uniform_int_distribution<int>(1, 5)(rng);
    std::string t;
    for (int i = 0; i < depth; ++i) {
        if (i) t += '/';
        t += random_level(rng);
    }
    if (t.empty()) t = "x";
    return t;
}

inline std::string random_filter(std::mt19937_64& rng) {
    const int depth = std::uniform_int_distribution<int>(1, 4)(rng);
    std::string f;
    for (int i = 0; i < depth; ++i) {
        if (i) f += '/';
        const int kind = std::uniform_int_distribution<int>(0, 5)(rng);
        if (kind == 0) f += '+';
        else if (kind == 1 && i + 1 == depth) f += '#';
        else f += random_level(rng);
    }
    return f.empty() ? "+" : f;
}

inline std::string random_payload(std::mt19937_64& rng) {
    const std::size_t len = std::uniform_int_distribution<std::size_t>(0, 300)(rng);
    std::string p(len, '\0');
    for (auto& c : p) c = static_cast<char>(rng());
    return p;
}

inline std::uint16_t random_id(std::mt19937_64& rng) {
    return std::uniform_int_distribution<std::uint16_t>(1, 65535)(rng);
}

inline wire::Packet random_packet(std::mt19937_64& rng) {
    switch (std::uniform_int_distribution<int>(0, 9)(rng)) {
        case 0:
            return wire::Connect{random_level(rng) + std::to_string(rng() % 1000),
                                 static_cast<std::uint16_t>(rng()), (rng() & 1) != 0};
        case 1: return wire::Connack{static_cast<std::uint8_t>(rng() % 6)};
        case 2: return wire::Publish{random_topic(rng), random_payload(rng), (rng() & 1) != 0};
        case 3: {
            wire::Subscribe s{random_id(rng), {}};
            const int n = std::uniform_int_distribution<int>(1, 4)(rng);
            for (int i = 0; i < n; ++i) s.filters.push_back(random_filter(rng));
            return s;
        }
        case 4: {
            wire::Suback s{random_id(rng), {}};
            const int n = std::uniform_int_distribution<int>(1, 4)(rng);
            for (int i = 0; i < n; ++i) s.granted.push_back((rng() & 1) ? 0x00 : 0x80);
            return s;
        }
        case 5: {
            wire::Unsubscribe u{random_id(rng), {}};
            const int n = std::uniform_int_distribution<int>(1, 4)(rng);
            for (int i = 0; i < n; ++i) u.filters.push_back(random_filter(rng));
            return u;
        }
        case 6: return wire::Unsuback{random_id(rng)};
        case 7: return wire::Pingreq{};
        case 8: return wire::Pingresp{};
        default: return wire::Disconnect{};
    }
}

/// Independent recursive matcher over pre-split levels, used as the oracle
/// for topic_matches.
inline bool reference_match(const std::vector<std::string>& f, std::size_t fi,
                            const std::vector<std::string>& t, std::size_t ti) {
    if (fi == f.size()) return ti == t.size();
    if (f[fi] == "#") return true;
    if (ti == t.size()) return false;
    if (f[fi] == "+" || f[fi] == t[ti]) return reference_match(f, fi + 1, t, ti + 1);
    return false;
}

/// Every level sequence of length 1..max_depth over `alphabet`.
inline std::vector<std::vector<std::string>> all_level_sequences(
    const std::vector<std::string>& alphabet, std::size_t max_depth) {
    std::vector<std::vector<std::string>> out;
    std::vector<std::vector<std::string>> frontier{{}};
    for (std::size_t d = 1; d <= max_depth; ++d) {
        std::vector<std::vector<std::string>> next;
        for (const auto& prefix : frontier) {
            for (const auto& a : alphabet) {
                auto s = prefix;
                s.push_back(a);
                next.push_back(s);
            }
        }
        out.insert(out.end(), next.begin(), next.end());
        frontier = std::move(next);
    }
    return out;
}

inline std::string join_levels(const std::vector<std::string>& levels) {
    std::string s;
    for (std::size_t i = 0; i < levels.size(); ++i) {
        if (i) s += '/';
        s += levels[i];
    }
    return s;
}

}  // namespace sensert::testing
