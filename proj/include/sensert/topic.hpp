// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace sensert {

/// True when `s` is well-formed UTF-8 with no U+0000, no surrogates and no
/// overlong sequences (the MQTT string rules).
bool is_valid_utf8(std::string_view s);

class InvalidTopic : public std::invalid_argument {
public:
    InvalidTopic(const std::string& what, std::size_t position)
        : std::invalid_argument(what), position_(position) {}
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

class InvalidFilter : public std::invalid_argument {
public:
    InvalidFilter(const std::string& what, std::size_t position)
        : std::invalid_argument(what), position_(position) {}
    /// Byte offset of the offending character in the raw filter.
    std::size_t position() const noexcept { return position_; }

private:
    std::size_t position_;
};

/// A concrete, wildcard-free topic such as "tele/plug-17/SENSOR".
class TopicName {
public:
    static TopicName parse(std::string_view raw);

    const std::string& str() const noexcept { return raw_; }
    const std::vector<std::string>& levels() const noexcept { return levels_; }

    friend bool operator==(const TopicName& a, const TopicName& b) { return a.raw_ == b.raw_; }

private:
    std::string raw_;
    std::vector<std::string> levels_;
};

/// A subscription filter. `+` takes a whole level; `#` takes a whole level and
/// must be last.
class TopicFilter {
public:
    static TopicFilter parse(std::string_view raw);

    const std::string& str() const noexcept { return raw_; }
    const std::vector<std::string>& levels() const noexcept { return levels_; }
    bool has_wildcards() const noexcept { return wildcards_; }

    friend bool operator==(const TopicFilter& a, const TopicFilter& b) { return a.raw_ == b.raw_; }

private:
    std::string raw_;
    std::vector<std::string> levels_;
    bool wildcards_ = false;
};

inline TopicFilter validate_filter(std::string_view raw) { return TopicFilter::parse(raw); }

/// MQTT 3.1.1 matching. Topics beginning with '$' are not matched by a filter
/// whose first level is a wildcard.
bool topic_matches(const TopicFilter& filter, const TopicName& topic);

/// Matches against a topic already split into levels.
bool topic_matches(const TopicFilter& filter, const std::vector<std::string_view>& topic_levels);

/// Same as above over raw strings that are already known to be valid.
bool topic_matches(std::string_view filter, std::string_view topic);

std::vector<std::string_view> split_levels(std::string_view s);

}  // namespace sensert
