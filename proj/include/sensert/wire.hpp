// SPDX-License-Identifier: Apache-2.0
//
// Encoder/decoder for the MQTT 3.1.1 subset spoken by every component:
// QoS 0 only, clean sessions, no will/credentials.
#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <variant>
#include <vector>

namespace sensert::wire {

using Bytes = std::vector<std::uint8_t>;

inline constexpr std::uint32_t kMaxVarint = 268'435'455;
/// Frames whose remaining length exceeds this are rejected as malformed.
inline constexpr std::uint32_t kMaxRemainingLength = 1U << 20;

enum class PacketType : std::uint8_t {
    Connect = 1,
    Connack = 2,
    Publish = 3,
    Subscribe = 8,
    Suback = 9,
    Unsubscribe = 10,
    Unsuback = 11,
    Pingreq = 12,
    Pingresp = 13,
    Disconnect = 14,
};

struct Connect {
    std::string client_id;
    std::uint16_t keep_alive_s = 60;
    bool clean_session = true;
    bool operator==(const Connect&) const = default;
};

struct Connack {
    std::uint8_t return_code = 0;
    bool operator==(const Connack&) const = default;
};

struct Publish {
    std::string topic;
    std::string payload;
    bool retain = false;
    bool operator==(const Publish&) const = default;
};

struct Subscribe {
    std::uint16_t packet_id = 1;
    std::vector<std::string> filters;
    bool operator==(const Subscribe&) const = default;
};

struct Suback {
    std::uint16_t packet_id = 1;
    std::vector<std::uint8_t> granted;
    bool operator==(const Suback&) const = default;
};

struct Unsubscribe {
    std::uint16_t packet_id = 1;
    std::vector<std::string> filters;
    bool operator==(const Unsubscribe&) const = default;
};

struct Unsuback {
    std::uint16_t packet_id = 1;
    bool operator==(const Unsuback&) const = default;
};

struct Pingreq {
    bool operator==(const Pingreq&) const = default;
};
struct Pingresp {
    bool operator==(const Pingresp&) const = default;
};
struct Disconnect {
    bool operator==(const Disconnect&) const = default;
};

using Packet = std::variant<Connect, Connack, Publish, Subscribe, Suback, Unsubscribe, Unsuback,
                            Pingreq, Pingresp, Disconnect>;

PacketType packet_type(const Packet& p);
std::string_view to_string(PacketType t);

struct Decoded {
    Packet packet;
    std::size_t consumed = 0;
};

/// The buffer holds a strict prefix of a frame; retry with more bytes.
struct NeedMoreData {};

struct Malformed {
    std::string reason;
};

using DecodeResult = std::variant<Decoded, NeedMoreData, Malformed>;

class EncodingError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

Bytes encode_remaining_length(std::uint32_t n);

/// Decodes a remaining-length varint. Fails on a fifth byte or on a
/// non-minimal encoding.
struct VarintResult {
    std::uint32_t value = 0;
    std::size_t length = 0;
};
std::variant<VarintResult, NeedMoreData, Malformed> decode_remaining_length(
    std::span<const std::uint8_t> bytes);

/// Decodes the first frame in `bytes`. Accepts only canonical frames, so any
/// successfully decoded packet re-encodes to the identical bytes.
DecodeResult decode_packet(std::span<const std::uint8_t> bytes);

Bytes encode_packet(const Packet& p);

/// Incremental reader over a growable buffer, for stream transports.
class FrameReader {
public:
    void feed(std::span<const std::uint8_t> bytes);
    /// Next complete packet, NeedMoreData, or Malformed (after which the
    /// stream is unusable).
    DecodeResult next();
    std::size_t buffered() const noexcept { return buffer_.size() - offset_; }

private:
    Bytes buffer_;
    std::size_t offset_ = 0;
};

}  // namespace sensert::wire
