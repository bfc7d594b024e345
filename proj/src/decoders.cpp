// SPDX-License-Identifier: Apache-2.0
#include "sensert/decoders.hpp"

#include "sensert/topic.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <mutex>

namespace sensert {

using nlohmann::json;

std::optional<double> cooked_number(const Cooked& c, const std::string& key) {
    auto it = c.find(key);
    if (it == c.end()) return std::nullopt;
    if (auto* i = std::get_if<std::int64_t>(&it->second)) return static_cast<double>(*i);
    if (auto* d = std::get_if<double>(&it->second)) return *d;
    return std::nullopt;
}

json cooked_to_json(const CookedValue& v) {
    return std::visit([](const auto& x) { return json(x); }, v);
}

std::string base64_encode(std::string_view data) {
    std::string out(4 * ((data.size() + 2) / 3), '\0');
    const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(data.data()),
                                  static_cast<int>(data.size()));
    out.resize(static_cast<std::size_t>(n));
    return out;
}

std::string base64_decode(std::string_view text) {
    if (text.size() % 4 != 0) throw DecodeError("base64 length not a multiple of 4");
    std::string out(3 * text.size() / 4, '\0');
    const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                  reinterpret_cast<const unsigned char*>(text.data()),
                                  static_cast<int>(text.size()));
    if (n < 0) throw DecodeError("invalid base64");
    std::size_t len = static_cast<std::size_t>(n);
    // EVP_DecodeBlock counts padding as zero bytes.
    if (!text.empty() && text.back() == '=') --len;
    if (text.size() > 1 && text[text.size() - 2] == '=') --len;
    out.resize(len);
    return out;
}

void flatten_into(Cooked& out, const json& value, const std::string& prefix) {
    auto key = [&](const std::string& k) { return prefix.empty() ? k : prefix + "." + k; };
    switch (value.type()) {
        case json::value_t::object:
            for (const auto& [k, v] : value.items()) flatten_into(out, v, key(k));
            break;
        case json::value_t::array:
            for (std::size_t i = 0; i < value.size(); ++i)
                flatten_into(out, value[i], key(std::to_string(i)));
            break;
        case json::value_t::boolean: out[prefix] = value.get<bool>(); break;
        case json::value_t::number_integer: out[prefix] = value.get<std::int64_t>(); break;
        case json::value_t::number_unsigned:
            out[prefix] = static_cast<std::int64_t>(value.get<std::uint64_t>());
            break;
        case json::value_t::number_float: out[prefix] = value.get<double>(); break;
        case json::value_t::string: out[prefix] = value.get<std::string>(); break;
        default: break;
    }
}

nlohmann::ordered_json to_json(const NormalizedMessage& m) {
    nlohmann::ordered_json j;
    j["device_id"] = m.device_id;
    j["ts"] = m.ts;
    j["family"] = m.family;
    nlohmann::ordered_json cooked = nlohmann::ordered_json::object();
    for (const auto& [k, v] : m.cooked)
        std::visit([&](const auto& x) { cooked[k] = x; }, v);
    j["cooked"] = std::move(cooked);
    j["received_at"] = m.received_at;
    if (m.sim_t0) j["sim_t0"] = *m.sim_t0;
    if (is_valid_utf8(m.original) || m.original.empty())
        j["original"] = m.original;
    else
        j["original_b64"] = base64_encode(m.original);
    return j;
}

NormalizedMessage normalized_from_json(const json& j) {
    NormalizedMessage m;
    try {
        m.device_id = j.at("device_id").get<std::string>();
        m.ts = j.at("ts").get<EpochMs>();
        m.family = j.at("family").get<std::string>();
        const auto& cooked = j.at("cooked");
        if (!cooked.is_object()) throw DecodeError("cooked is not an object");
        for (const auto& [k, v] : cooked.items()) {
            if (v.is_object() || v.is_array()) throw DecodeError("cooked value is not flat: " + k);
            flatten_into(m.cooked, v, k);
        }
        m.received_at = j.value("received_at", EpochMs{0});
        if (j.contains("sim_t0")) m.sim_t0 = j.at("sim_t0").get<EpochMs>();
        if (j.contains("original_b64"))
            m.original = base64_decode(j.at("original_b64").get<std::string>());
        else
            m.original = j.value("original", std::string{});
    } catch (const json::exception& e) {
        throw DecodeError(std::string("not a normalized message: ") + e.what());
    }
    if (m.device_id.empty()) throw DecodeError("empty device_id");
    return m;
}

nlohmann::ordered_json to_json(const DeadLetter& d) {
    nlohmann::ordered_json j;
    j["topic"] = d.raw.topic;
    j["reason"] = d.reason;
    j["received_at"] = d.raw.received_at;
    if (is_valid_utf8(d.raw.payload) || d.raw.payload.empty())
        j["payload"] = d.raw.payload;
    else
        j["payload_b64"] = base64_encode(d.raw.payload);
    return j;
}

// ---------------------------------------------------------------- decoders

namespace {

json parse_object(const RawSensorMessage& m) {
    json j = json::parse(m.payload, nullptr, /*allow_exceptions=*/false);
    if (j.is_discarded()) throw DecodeError("payload is not valid JSON");
    if (!j.is_object()) throw DecodeError("payload is not a JSON object");
    return j;
}

NormalizedMessage base(const RawSensorMessage& m, const json& payload, std::string family) {
    NormalizedMessage n;
    n.family = std::move(family);
    n.original = m.payload;
    n.received_at = m.received_at;
    n.ts = m.received_at;
    if (auto it = payload.find("sim_t0"); it != payload.end() && it->is_number_integer())
        n.sim_t0 = it->get<EpochMs>();
    return n;
}

std::string topic_level(const std::string& topic, std::size_t index) {
    const auto levels = split_levels(topic);
    if (index >= levels.size() || levels[index].empty())
        throw DecodeError("topic has no device level: " + topic);
    return std::string(levels[index]);
}

std::optional<EpochMs> time_field(const json& obj, const char* key) {
    auto it = obj.find(key);
    if (it == obj.end()) return std::nullopt;
    if (it->is_string()) return parse_iso8601(it->get<std::string>());
    if (it->is_number_integer()) return it->get<EpochMs>();
    return std::nullopt;
}

void put_number(Cooked& c, const std::string& key, const json& v) {
    if (v.is_number_integer()) c[key] = v.get<std::int64_t>();
    else if (v.is_number()) c[key] = v.get<double>();
    else throw DecodeError("field '" + key + "' is not numeric");
}

std::function<bool(const RawSensorMessage&)> topic_matcher(std::string filter) {
    auto f = std::make_shared<TopicFilter>(TopicFilter::parse(filter));
    return [f](const RawSensorMessage& m) {
        try {
            return topic_matches(*f, TopicName::parse(m.topic));
        } catch (const InvalidTopic&) {
            return false;
        }
    };
}

}  // namespace

NormalizedMessage decode_smartplug(const RawSensorMessage& m) {
    const json p = parse_object(m);
    NormalizedMessage n = base(m, p, "smartplug");
    n.device_id = topic_level(m.topic, 1);
    auto energy = p.find("ENERGY");
    if (energy == p.end() || !energy->is_object() || !energy->contains("Power"))
        throw DecodeError("missing ENERGY.Power");
    for (const auto& [k, v] : energy->items()) {
        if (k == "Power") put_number(n.cooked, "power_w", v);
        else flatten_into(n.cooked, v, "energy." + k);
    }
    if (auto t = time_field(p, "Time")) n.ts = *t;
    return n;
}

NormalizedMessage decode_ttn(const RawSensorMessage& m) {
    const json p = parse_object(m);
    NormalizedMessage n = base(m, p, topic_level(m.topic, 1));
    auto ids = p.find("end_device_ids");
    if (ids == p.end() || !ids->is_object() || !ids->contains("device_id") ||
        !(*ids)["device_id"].is_string())
        throw DecodeError("missing end_device_ids.device_id");
    n.device_id = (*ids)["device_id"].get<std::string>();
    if (n.device_id.empty()) throw DecodeError("empty end_device_ids.device_id");
    if (auto up = p.find("uplink_message"); up != p.end() && up->is_object()) {
        if (auto dp = up->find("decoded_payload"); dp != up->end() && dp->is_object())
            flatten_into(n.cooked, *dp, "");
        if (auto t = time_field(*up, "received_at")) n.ts = *t;
    }
    return n;
}

NormalizedMessage decode_zigbee(const RawSensorMessage& m) {
    const json p = parse_object(m);
    NormalizedMessage n = base(m, p, "zigbee");
    if (auto id = p.find("id"); id != p.end() && id->is_string() && !id->get<std::string>().empty())
        n.device_id = id->get<std::string>();
    else
        n.device_id = topic_level(m.topic, 1);
    auto state = p.find("state");
    if (state == p.end() || !state->is_object()) throw DecodeError("missing state object");
    for (const auto& [k, v] : state->items()) {
        if (k == "lastupdated") continue;
        flatten_into(n.cooked, v, k);
    }
    if (auto t = time_field(*state, "lastupdated")) n.ts = *t;
    return n;
}

NormalizedMessage decode_coffee(const RawSensorMessage& m) {
    const json p = parse_object(m);
    NormalizedMessage n = base(m, p, "coffee");
    n.device_id = topic_level(m.topic, 1);
    bool any = false;
    for (const char* key : {"weight_kg", "grinder_w", "brewer_w"}) {
        if (auto it = p.find(key); it != p.end()) {
            put_number(n.cooked, key, *it);
            any = true;
        }
    }
    if (!any) throw DecodeError("coffee reading has no weight or power fields");
    if (auto t = time_field(p, "ts")) n.ts = *t;
    return n;
}

NormalizedMessage decode_deepdish(const RawSensorMessage& m) {
    const json p = parse_object(m);
    NormalizedMessage n = base(m, p, "deepdish");
    n.device_id = topic_level(m.topic, 1);
    auto count = p.find("count");
    if (count == p.end() || !count->is_number()) throw DecodeError("missing people count");
    put_number(n.cooked, "people_count", *count);
    if (auto t = time_field(p, "ts")) n.ts = *t;
    return n;
}

NormalizedMessage decode_normalized(const RawSensorMessage& m) {
    const json p = parse_object(m);
    NormalizedMessage n = normalized_from_json(p);
    if (n.received_at == 0) n.received_at = m.received_at;
    return n;
}

DecoderSpec smartplug_decoder() {
    return {"smartplug", 100, topic_matcher("tele/+/SENSOR"), decode_smartplug};
}
DecoderSpec ttn_decoder() { return {"ttn", 100, topic_matcher("v3/+/devices/+/up"), decode_ttn}; }
DecoderSpec zigbee_decoder() { return {"zigbee", 100, topic_matcher("zigbee/+/state"), decode_zigbee}; }
DecoderSpec coffee_decoder() { return {"coffee", 100, topic_matcher("coffee/+/reading"), decode_coffee}; }
DecoderSpec deepdish_decoder() {
    return {"deepdish", 100, topic_matcher("deepdish/+/count"), decode_deepdish};
}

DecoderSpec normalized_passthrough_decoder() {
    return {"normalized", 0,
            [](const RawSensorMessage& m) {
                const json j = json::parse(m.payload, nullptr, false);
                return j.is_object() && j.contains("device_id") && j.contains("family") &&
                       j.contains("cooked") && j.contains("ts");
            },
            decode_normalized};
}

// ---------------------------------------------------------------- registry

std::unique_ptr<DecoderRegistry> DecoderRegistry::with_defaults() {
    auto r = std::make_unique<DecoderRegistry>();
    r->register_decoder(smartplug_decoder());
    r->register_decoder(ttn_decoder());
    r->register_decoder(zigbee_decoder());
    r->register_decoder(coffee_decoder());
    r->register_decoder(deepdish_decoder());
    r->register_decoder(normalized_passthrough_decoder());
    return r;
}

void DecoderRegistry::register_decoder(DecoderSpec spec) {
    if (!spec.matches || !spec.decode) throw std::invalid_argument("decoder needs matches and decode");
    std::unique_lock lk(mutex_);
    for (const auto& d : decoders_) {
        if (d->name == spec.name) throw DuplicateName("decoder already registered: " + spec.name);
    }
    decoders_.push_back(std::make_shared<const DecoderSpec>(std::move(spec)));
    std::sort(decoders_.begin(), decoders_.end(), [](const auto& a, const auto& b) {
        if (a->priority != b->priority) return a->priority > b->priority;
        return a->name < b->name;
    });
}

std::shared_ptr<const DecoderSpec> DecoderRegistry::select(const RawSensorMessage& m) const {
    std::shared_lock lk(mutex_);
    for (const auto& d : decoders_) {
        if (d->matches(m)) return d;
    }
    throw NoDecoder("no decoder for topic " + m.topic);
}

DecodeOutcome DecoderRegistry::decode(const RawSensorMessage& m) const {
    try {
        auto spec = select(m);
        NormalizedMessage n = spec->decode(m);
        if (n.device_id.empty()) throw DecodeError("decoder produced an empty device_id");
        if (n.ts <= 0) n.ts = m.received_at;
        if (m.received_at > 0 && n.ts > m.received_at + kClockSkewAllowanceMs) {
            n.ts = m.received_at;
            ++clamped_;
        }
        ++decoded_;
        return n;
    } catch (const std::exception& e) {
        ++dead_letters_;
        return DeadLetter{m, e.what()};
    }
}

std::vector<std::string> DecoderRegistry::names() const {
    std::shared_lock lk(mutex_);
    std::vector<std::string> out;
    for (const auto& d : decoders_) out.push_back(d->name);
    return out;
}

}  // namespace sensert
