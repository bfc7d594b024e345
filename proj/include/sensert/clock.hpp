// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <chrono>
#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>

namespace sensert {

/// UTC epoch milliseconds. The single time base used across the system.
using EpochMs = std::int64_t;

/// Wall-clock epoch captured once per process and advanced with the steady
/// clock, so readings taken on one host never go backwards.
EpochMs now_ms();

using ClockFn = std::function<EpochMs()>;

/// "2020-06-01T10:00:00Z", with optional fractional seconds and an optional
/// numeric offset. A missing zone designator is read as UTC.
std::optional<EpochMs> parse_iso8601(std::string_view text);

/// Always emits "YYYY-MM-DDTHH:MM:SS.mmmZ".
std::string format_iso8601(EpochMs t);

struct CivilDate {
    int year;
    unsigned month;
    unsigned day;
};

CivilDate utc_date(EpochMs t);

}  // namespace sensert
