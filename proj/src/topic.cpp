// SPDX-License-Identifier: Apache-2.0
#include "sensert/topic.hpp"

#include <cstdint>

namespace sensert {

bool is_valid_utf8(std::string_view s) {
    const auto* p = reinterpret_cast<const unsigned char*>(s.data());
    const std::size_t n = s.size();
    std::size_t i = 0;
    while (i < n) {
        const unsigned char c = p[i];
        if (c == 0x00) return false;
        if (c < 0x80) {
            ++i;
            continue;
        }
        std::size_t len;
        std::uint32_t cp;
        if ((c & 0xE0) == 0xC0) {
            len = 2;
            cp = c & 0x1F;
        } else if ((c & 0xF0) == 0xE0) {
            len = 3;
            cp = c & 0x0F;
        } else if ((c & 0xF8) == 0xF0) {
            len = 4;
            cp = c & 0x07;
        } else {
            return false;
        }
        if (i + len > n) return false;
        for (std::size_t k = 1; k < len; ++k) {
            if ((p[i + k] & 0xC0) != 0x80) return false;
            cp = (cp << 6) | (p[i + k] & 0x3F);
        }
        if ((len == 2 && cp < 0x80) || (len == 3 && cp < 0x800) || (len == 4 && cp < 0x10000))
            return false;
        if (cp > 0x10FFFF || (cp >= 0xD800 && cp <= 0xDFFF)) return false;
        i += len;
    }
    return true;
}

std::vector<std::string_view> split_levels(std::string_view s) {
    std::vector<std::string_view> out;
    std::size_t start = 0;
    for (;;) {
        const std::size_t slash = s.find('/', start);
        if (slash == std::string_view::npos) {
            out.push_back(s.substr(start));
            return out;
        }
        out.push_back(s.substr(start, slash - start));
        start = slash + 1;
    }
}

TopicName TopicName::parse(std::string_view raw) {
    if (raw.empty()) throw InvalidTopic("topic name is empty", 0);
    if (raw.size() > 65535) throw InvalidTopic("topic name longer than 65535 bytes", 65535);
    if (!is_valid_utf8(raw)) throw InvalidTopic("topic name is not valid UTF-8", 0);
    for (std::size_t i = 0; i < raw.size(); ++i) {
        if (raw[i] == '+' || raw[i] == '#')
            throw InvalidTopic("wildcard character in topic name", i);
    }
    TopicName t;
    t.raw_ = std::string(raw);
    for (auto level : split_levels(raw)) t.levels_.emplace_back(level);
    return t;
}

TopicFilter TopicFilter::parse(std::string_view raw) {
    if (raw.empty()) throw InvalidFilter("topic filter is empty", 0);
    if (raw.size() > 65535) throw InvalidFilter("topic filter longer than 65535 bytes", 65535);
    if (!is_valid_utf8(raw)) throw InvalidFilter("topic filter is not valid UTF-8", 0);
    TopicFilter f;
    std::size_t offset = 0;
    const auto levels = split_levels(raw);
    for (std::size_t li = 0; li < levels.size(); ++li) {
        const auto level = levels[li];
        for (std::size_t k = 0; k < level.size(); ++k) {
            const char c = level[k];
            if (c == '+' && level.size() != 1)
                throw InvalidFilter("'+' must occupy a whole level", offset + k);
            if (c == '#') {
                if (level.size() != 1)
                    throw InvalidFilter("'#' must occupy a whole level", offset + k);
                if (li + 1 != levels.size())
                    throw InvalidFilter("'#' must be the last level", offset + k);
            }
            if (c == '+' || c == '#') f.wildcards_ = true;
        }
        f.levels_.emplace_back(level);
        offset += level.size() + 1;
    }
    f.raw_ = std::string(raw);
    return f;
}

namespace {

template <typename FilterLevels, typename TopicLevels>
bool match_levels(const FilterLevels& filter, const TopicLevels& topic) {
    if (!topic.empty() && !topic[0].empty() && topic[0][0] == '$' && !filter.empty() &&
        (filter[0] == "+" || filter[0] == "#"))
        return false;
    std::size_t i = 0;
    for (; i < filter.size(); ++i) {
        if (filter[i] == "#") return true;
        if (i >= topic.size()) return false;
        if (filter[i] != "+" && filter[i] != topic[i]) return false;
    }
    return i == topic.size();
}

}  // namespace

bool topic_matches(const TopicFilter& filter, const TopicName& topic) {
    return match_levels(filter.levels(), topic.levels());
}

bool topic_matches(const TopicFilter& filter, const std::vector<std::string_view>& topic_levels) {
    return match_levels(filter.levels(), topic_levels);
}

bool topic_matches(std::string_view filter, std::string_view topic) {
    return match_levels(split_levels(filter), split_levels(topic));
}

}  // namespace sensert
