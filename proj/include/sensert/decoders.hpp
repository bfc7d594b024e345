// SPDX-License-Identifier: Apache-2.0
//
// Decoder set and decoder manager: pick a decoder per raw message and turn
// vendor payloads into NormalizedMessage records.
#pragma once

#include "sensert/clock.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace sensert {

inline constexpr std::string_view kDeadLetterTopic = "sensert/deadletter";

/// Readings in the future by more than this are clamped to receipt time.
inline constexpr EpochMs kClockSkewAllowanceMs = 500;

struct RawSensorMessage {
    std::string topic;
    std::string payload;
    /// First-hop receipt time.
    EpochMs received_at = 0;
};

using CookedValue = std::variant<bool, std::int64_t, double, std::string>;
using Cooked = std::map<std::string, CookedValue>;

struct NormalizedMessage {
    std::string device_id;
    EpochMs ts = 0;
    std::string family;
    Cooked cooked;
    std::string original;
    EpochMs received_at = 0;
    std::optional<EpochMs> sim_t0;

    bool operator==(const NormalizedMessage&) const = default;
};

/// Numeric reading as double, if present and numeric.
std::optional<double> cooked_number(const Cooked& c, const std::string& key);

nlohmann::json cooked_to_json(const CookedValue& v);

/// Canonical field order: device_id, ts, family, cooked, received_at, sim_t0,
/// original (or original_b64 when the payload is not UTF-8).
nlohmann::ordered_json to_json(const NormalizedMessage& m);
NormalizedMessage normalized_from_json(const nlohmann::json& j);

struct DeadLetter {
    RawSensorMessage raw;
    std::string reason;
};

nlohmann::ordered_json to_json(const DeadLetter& d);

class DecodeError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class NoDecoder : public DecodeError {
public:
    using DecodeError::DecodeError;
};

class DuplicateName : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

struct DecoderSpec {
    std::string name;
    int priority = 0;
    std::function<bool(const RawSensorMessage&)> matches;
    std::function<NormalizedMessage(const RawSensorMessage&)> decode;
};

using DecodeOutcome = std::variant<NormalizedMessage, DeadLetter>;

/// Thread-safe registry. Lookups share a lock; registration is exclusive and
/// takes effect for the next message.
class DecoderRegistry {
public:
    DecoderRegistry() = default;
    DecoderRegistry(const DecoderRegistry&) = delete;
    DecoderRegistry& operator=(const DecoderRegistry&) = delete;

    /// All built-in decoders.
    static std::unique_ptr<DecoderRegistry> with_defaults();

    void register_decoder(DecoderSpec spec);

    /// Highest priority match, ties broken by name. Throws NoDecoder.
    std::shared_ptr<const DecoderSpec> select(const RawSensorMessage& m) const;

    /// Never throws: failures come back as a DeadLetter.
    DecodeOutcome decode(const RawSensorMessage& m) const;

    std::vector<std::string> names() const;

    std::uint64_t clamped() const { return clamped_.load(); }
    std::uint64_t decoded() const { return decoded_.load(); }
    std::uint64_t dead_letters() const { return dead_letters_.load(); }

private:
    mutable std::shared_mutex mutex_;
    std::vector<std::shared_ptr<const DecoderSpec>> decoders_;
    mutable std::atomic<std::uint64_t> clamped_{0};
    mutable std::atomic<std::uint64_t> decoded_{0};
    mutable std::atomic<std::uint64_t> dead_letters_{0};
};

// Built-in decoders. Each throws DecodeError on payloads it cannot read.
NormalizedMessage decode_smartplug(const RawSensorMessage& m);
NormalizedMessage decode_ttn(const RawSensorMessage& m);
NormalizedMessage decode_zigbee(const RawSensorMessage& m);
NormalizedMessage decode_coffee(const RawSensorMessage& m);
NormalizedMessage decode_deepdish(const RawSensorMessage& m);
NormalizedMessage decode_normalized(const RawSensorMessage& m);

DecoderSpec smartplug_decoder();
DecoderSpec ttn_decoder();
DecoderSpec zigbee_decoder();
DecoderSpec coffee_decoder();
DecoderSpec deepdish_decoder();
/// Accepts payloads that are already NormalizedMessage JSON.
DecoderSpec normalized_passthrough_decoder();

/// Nested objects become "a.b" keys; arrays use the index as a level; nulls
/// are skipped.
void flatten_into(Cooked& out, const nlohmann::json& value, const std::string& prefix);

std::string base64_encode(std::string_view data);
std::string base64_decode(std::string_view text);

}  // namespace sensert
