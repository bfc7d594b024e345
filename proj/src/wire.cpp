// SPDX-License-Identifier: Apache-2.0
#include "sensert/wire.hpp"

#include "sensert/topic.hpp"

#include <optional>

namespace sensert::wire {

namespace {

template <class... Ts>
struct overloaded : Ts... {
    using Ts::operator()...;
};
template <class... Ts>
overloaded(Ts...) -> overloaded<Ts...>;

class Writer {
public:
    void u8(std::uint8_t v) { out.push_back(v); }
    void u16(std::uint16_t v) {
        out.push_back(static_cast<std::uint8_t>(v >> 8));
        out.push_back(static_cast<std::uint8_t>(v & 0xFF));
    }
    void str(std::string_view s) {
        if (s.size() > 0xFFFF) throw EncodingError("string longer than 65535 bytes");
        if (!is_valid_utf8(s)) throw EncodingError("string is not valid UTF-8");
        u16(static_cast<std::uint16_t>(s.size()));
        raw(s);
    }
    void raw(std::string_view s) { out.insert(out.end(), s.begin(), s.end()); }
    Bytes out;
};

class Reader {
public:
    explicit Reader(std::span<const std::uint8_t> b) : bytes_(b) {}

    bool u8(std::uint8_t& v) {
        if (pos_ + 1 > bytes_.size()) return false;
        v = bytes_[pos_++];
        return true;
    }
    bool u16(std::uint16_t& v) {
        if (pos_ + 2 > bytes_.size()) return false;
        v = static_cast<std::uint16_t>((bytes_[pos_] << 8) | bytes_[pos_ + 1]);
        pos_ += 2;
        return true;
    }
    /// Length-prefixed UTF-8 string; sets `error` on bad content.
    bool str(std::string& v, std::string& error) {
        std::uint16_t len;
        if (!u16(len)) {
            error = "truncated string length";
            return false;
        }
        if (pos_ + len > bytes_.size()) {
            error = "string runs past end of packet";
            return false;
        }
        v.assign(reinterpret_cast<const char*>(bytes_.data() + pos_), len);
        pos_ += len;
        if (!is_valid_utf8(v)) {
            error = "string is not valid UTF-8";
            return false;
        }
        return true;
    }
    std::string rest() {
        std::string v(reinterpret_cast<const char*>(bytes_.data() + pos_), bytes_.size() - pos_);
        pos_ = bytes_.size();
        return v;
    }
    bool done() const { return pos_ == bytes_.size(); }

private:
    std::span<const std::uint8_t> bytes_;
    std::size_t pos_ = 0;
};

Bytes frame(std::uint8_t first, const Bytes& body) {
    if (body.size() > kMaxRemainingLength) throw EncodingError("packet exceeds 1 MiB");
    Bytes out;
    out.reserve(body.size() + 5);
    out.push_back(first);
    const Bytes len = encode_remaining_length(static_cast<std::uint32_t>(body.size()));
    out.insert(out.end(), len.begin(), len.end());
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

std::uint8_t first_byte(PacketType t, std::uint8_t flags = 0) {
    return static_cast<std::uint8_t>((static_cast<unsigned>(t) << 4) | flags);
}

Malformed bad(std::string reason) { return Malformed{std::move(reason)}; }

DecodeResult decode_body(std::uint8_t type, std::uint8_t flags, std::span<const std::uint8_t> body,
                         std::size_t consumed) {
    Reader r(body);
    std::string err;
    auto finish = [&](Packet p) -> DecodeResult {
        if (!r.done()) return bad("trailing bytes after packet body");
        return Decoded{std::move(p), consumed};
    };
    auto expect_flags = [&](std::uint8_t want) -> std::optional<Malformed> {
        if (flags != want) return bad("invalid fixed-header flags");
        return std::nullopt;
    };

    switch (type) {
        case 1: {  // CONNECT
            if (auto e = expect_flags(0)) return *e;
            std::string proto;
            if (!r.str(proto, err)) return bad(err);
            if (proto != "MQTT") return bad("protocol name is not MQTT");
            std::uint8_t level, cflags;
            if (!r.u8(level) || !r.u8(cflags)) return bad("truncated CONNECT header");
            if (level != 4) return bad("unsupported protocol level");
            if ((cflags & ~0x02) != 0) return bad("unsupported CONNECT flags");
            Connect c;
            c.clean_session = (cflags & 0x02) != 0;
            if (!r.u16(c.keep_alive_s)) return bad("truncated keep-alive");
            if (!r.str(c.client_id, err)) return bad(err);
            return finish(std::move(c));
        }
        case 2: {  // CONNACK
            if (auto e = expect_flags(0)) return *e;
            std::uint8_t ack_flags;
            Connack c;
            if (!r.u8(ack_flags) || !r.u8(c.return_code)) return bad("truncated CONNACK");
            if (ack_flags != 0) return bad("session-present flag set on clean session");
            return finish(c);
        }
        case 3: {  // PUBLISH
            if ((flags & 0x06) != 0) return bad("QoS > 0 is not supported");
            if ((flags & 0x08) != 0) return bad("DUP flag set on QoS 0 publish");
            Publish p;
            p.retain = (flags & 0x01) != 0;
            if (!r.str(p.topic, err)) return bad(err);
            if (p.topic.empty()) return bad("empty topic name");
            if (p.topic.find_first_of("+#") != std::string::npos)
                return bad("wildcard in publish topic");
            p.payload = r.rest();
            return finish(std::move(p));
        }
        case 8:    // SUBSCRIBE
        case 10: {  // UNSUBSCRIBE
            if (auto e = expect_flags(0x02)) return *e;
            std::uint16_t id;
            if (!r.u16(id)) return bad("truncated packet id");
            if (id == 0) return bad("packet id 0");
            std::vector<std::string> filters;
            while (!r.done()) {
                std::string f;
                if (!r.str(f, err)) return bad(err);
                if (type == 8) {
                    std::uint8_t qos;
                    if (!r.u8(qos)) return bad("truncated requested QoS");
                    if (qos != 0) return bad("requested QoS > 0 is not supported");
                }
                filters.push_back(std::move(f));
            }
            if (filters.empty()) return bad("no topic filters");
            if (type == 8) return finish(Subscribe{id, std::move(filters)});
            return finish(Unsubscribe{id, std::move(filters)});
        }
        case 9: {  // SUBACK
            if (auto e = expect_flags(0)) return *e;
            Suback s;
            if (!r.u16(s.packet_id)) return bad("truncated packet id");
            if (s.packet_id == 0) return bad("packet id 0");
            std::uint8_t g;
            while (r.u8(g)) s.granted.push_back(g);
            if (s.granted.empty()) return bad("SUBACK without return codes");
            return finish(std::move(s));
        }
        case 11: {  // UNSUBACK
            if (auto e = expect_flags(0)) return *e;
            Unsuback u;
            if (!r.u16(u.packet_id)) return bad("truncated packet id");
            if (u.packet_id == 0) return bad("packet id 0");
            return finish(u);
        }
        case 12:
            if (auto e = expect_flags(0)) return *e;
            return finish(Pingreq{});
        case 13:
            if (auto e = expect_flags(0)) return *e;
            return finish(Pingresp{});
        case 14:
            if (auto e = expect_flags(0)) return *e;
            return finish(Disconnect{});
        case 4:
        case 5:
        case 6:
        case 7:
            return bad("QoS 1/2 acknowledgement packets are not supported");
        default:
            return bad("reserved packet type");
    }
}

}  // namespace

PacketType packet_type(const Packet& p) {
    return std::visit(overloaded{
                          [](const Connect&) { return PacketType::Connect; },
                          [](const Connack&) { return PacketType::Connack; },
                          [](const Publish&) { return PacketType::Publish; },
                          [](const Subscribe&) { return PacketType::Subscribe; },
                          [](const Suback&) { return PacketType::Suback; },
                          [](const Unsubscribe&) { return PacketType::Unsubscribe; },
                          [](const Unsuback&) { return PacketType::Unsuback; },
                          [](const Pingreq&) { return PacketType::Pingreq; },
                          [](const Pingresp&) { return PacketType::Pingresp; },
                          [](const Disconnect&) { return PacketType::Disconnect; },
                      },
                      p);
}

std::string_view to_string(PacketType t) {
    switch (t) {
        case PacketType::Connect: return "CONNECT";
        case PacketType::Connack: return "CONNACK";
        case PacketType::Publish: return "PUBLISH";
        case PacketType::Subscribe: return "SUBSCRIBE";
        case PacketType::Suback: return "SUBACK";
        case PacketType::Unsubscribe: return "UNSUBSCRIBE";
        case PacketType::Unsuback: return "UNSUBACK";
        case PacketType::Pingreq: return "PINGREQ";
        case PacketType::Pingresp: return "PINGRESP";
        case PacketType::Disconnect: return "DISCONNECT";
    }
    return "UNKNOWN";
}

Bytes encode_remaining_length(std::uint32_t n) {
    if (n > kMaxVarint) throw EncodingError("remaining length out of range");
    Bytes out;
    do {
        std::uint8_t b = n % 128;
        n /= 128;
        if (n > 0) b |= 0x80;
        out.push_back(b);
    } while (n > 0);
    return out;
}

std::variant<VarintResult, NeedMoreData, Malformed> decode_remaining_length(
    std::span<const std::uint8_t> bytes) {
    std::uint32_t value = 0;
    std::uint32_t multiplier = 1;
    for (std::size_t i = 0; i < 4; ++i) {
        if (i >= bytes.size()) return NeedMoreData{};
        const std::uint8_t b = bytes[i];
        value += (b & 0x7F) * multiplier;
        if ((b & 0x80) == 0) {
            if (i > 0 && b == 0) return bad("non-minimal remaining length");
            return VarintResult{value, i + 1};
        }
        multiplier *= 128;
    }
    return bad("remaining length longer than 4 bytes");
}

DecodeResult decode_packet(std::span<const std::uint8_t> bytes) {
    if (bytes.empty()) return NeedMoreData{};
    const std::uint8_t type = bytes[0] >> 4;
    const std::uint8_t flags = bytes[0] & 0x0F;
    // Reject what we can from the first byte alone, so garbage does not
    // wait for more data.
    if (type == 0 || type == 15) return bad("reserved packet type");

    auto len = decode_remaining_length(bytes.subspan(1));
    if (auto* m = std::get_if<Malformed>(&len)) return *m;
    if (std::holds_alternative<NeedMoreData>(len)) return NeedMoreData{};
    const auto [remaining, len_bytes] = std::get<VarintResult>(len);
    if (remaining > kMaxRemainingLength) return bad("remaining length exceeds 1 MiB");

    const std::size_t total = 1 + len_bytes + remaining;
    if (bytes.size() < total) return NeedMoreData{};
    return decode_body(type, flags, bytes.subspan(1 + len_bytes, remaining), total);
}

Bytes encode_packet(const Packet& packet) {
    return std::visit(
        overloaded{
            [](const Connect& c) {
                Writer w;
                w.str("MQTT");
                w.u8(4);
                w.u8(c.clean_session ? 0x02 : 0x00);
                w.u16(c.keep_alive_s);
                w.str(c.client_id);
                return frame(first_byte(PacketType::Connect), w.out);
            },
            [](const Connack& c) {
                return frame(first_byte(PacketType::Connack), Bytes{0x00, c.return_code});
            },
            [](const Publish& p) {
                if (p.topic.empty()) throw EncodingError("empty topic name");
                if (p.topic.find_first_of("+#") != std::string::npos)
                    throw EncodingError("wildcard in publish topic");
                Writer w;
                w.str(p.topic);
                w.raw(p.payload);
                return frame(first_byte(PacketType::Publish, p.retain ? 0x01 : 0x00), w.out);
            },
            [](const Subscribe& s) {
                if (s.filters.empty()) throw EncodingError("SUBSCRIBE needs at least one filter");
                if (s.packet_id == 0) throw EncodingError("packet id 0");
                Writer w;
                w.u16(s.packet_id);
                for (const auto& f : s.filters) {
                    w.str(f);
                    w.u8(0);
                }
                return frame(first_byte(PacketType::Subscribe, 0x02), w.out);
            },
            [](const Suback& s) {
                if (s.granted.empty()) throw EncodingError("SUBACK needs at least one code");
                if (s.packet_id == 0) throw EncodingError("packet id 0");
                Writer w;
                w.u16(s.packet_id);
                for (auto g : s.granted) w.u8(g);
                return frame(first_byte(PacketType::Suback), w.out);
            },
            [](const Unsubscribe& u) {
                if (u.filters.empty()) throw EncodingError("UNSUBSCRIBE needs at least one filter");
                if (u.packet_id == 0) throw EncodingError("packet id 0");
                Writer w;
                w.u16(u.packet_id);
                for (const auto& f : u.filters) w.str(f);
                return frame(first_byte(PacketType::Unsubscribe, 0x02), w.out);
            },
            [](const Unsuback& u) {
                if (u.packet_id == 0) throw EncodingError("packet id 0");
                Writer w;
                w.u16(u.packet_id);
                return frame(first_byte(PacketType::Unsuback), w.out);
            },
            [](const Pingreq&) { return Bytes{0xC0, 0x00}; },
            [](const Pingresp&) { return Bytes{0xD0, 0x00}; },
            [](const Disconnect&) { return Bytes{0xE0, 0x00}; },
        },
        packet);
}

void FrameReader::feed(std::span<const std::uint8_t> bytes) {
    if (offset_ > 0 && offset_ == buffer_.size()) {
        buffer_.clear();
        offset_ = 0;
    } else if (offset_ > 64 * 1024) {
        buffer_.erase(buffer_.begin(), buffer_.begin() + static_cast<std::ptrdiff_t>(offset_));
        offset_ = 0;
    }
    buffer_.insert(buffer_.end(), bytes.begin(), bytes.end());
}

DecodeResult FrameReader::next() {
    auto r = decode_packet(std::span<const std::uint8_t>(buffer_).subspan(offset_));
    if (auto* d = std::get_if<Decoded>(&r)) offset_ += d->consumed;
    return r;
}

}  // namespace sensert::wire
