// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "sensert/decoders.hpp"

#include <nlohmann/json.hpp>

#include <random>

using namespace sensert;
using nlohmann::json;

namespace {

constexpr EpochMs kRecv = 1'591'005'600'000;  // 2020-06-01T10:00:00Z

RawSensorMessage raw(std::string topic, std::string payload, EpochMs at = kRecv) {
    return RawSensorMessage{std::move(topic), std::move(payload), at};
}

NormalizedMessage ok(const DecodeOutcome& o) {
    if (auto* d = std::get_if<DeadLetter>(&o)) FAIL("dead-lettered: " << d->reason);
    return std::get<NormalizedMessage>(o);
}

}  // namespace

TEST_CASE("select picks family decoders by topic") {
    auto reg = DecoderRegistry::with_defaults();
    CHECK(reg->select(raw("tele/p1/SENSOR", "{}"))->name == "smartplug");
    CHECK(reg->select(raw("v3/app/devices/d1/up", "{}"))->name == "ttn");
    CHECK(reg->select(raw("zigbee/m1/state", "{}"))->name == "zigbee");
    CHECK(reg->select(raw("coffee/pot1/reading", "{}"))->name == "coffee");
    CHECK(reg->select(raw("deepdish/cam1/count", "{}"))->name == "deepdish");
    CHECK_THROWS_AS(reg->select(raw("unknown/x", "{}")), NoDecoder);

    auto out = reg->decode(raw("unknown/x", "{}"));
    REQUIRE(std::holds_alternative<DeadLetter>(out));
    CHECK(std::get<DeadLetter>(out).raw.topic == "unknown/x");
}

TEST_CASE("smartplug") {
    auto reg = DecoderRegistry::with_defaults();
    const auto n = ok(reg->decode(raw("tele/plug-17/SENSOR", R"({"ENERGY":{"Power":42.0}})")));
    CHECK(n.device_id == "plug-17");
    CHECK(n.family == "smartplug");
    CHECK(cooked_number(n.cooked, "power_w") == doctest::Approx(42.0));
    CHECK(n.ts == kRecv);  // no Time field
    CHECK(n.original == R"({"ENERGY":{"Power":42.0}})");

    const auto t = ok(reg->decode(raw(
        "tele/p2/SENSOR",
        R"({"Time":"2020-06-01T09:59:58","ENERGY":{"Power":38,"Voltage":230.1,"Today":0.4},"sim_t0":17})")));
    CHECK(t.ts == kRecv - 2000);
    CHECK(std::get<std::int64_t>(t.cooked.at("power_w")) == 38);
    CHECK(cooked_number(t.cooked, "energy.Voltage") == doctest::Approx(230.1));
    CHECK(t.sim_t0 == 17);

    auto bad = reg->decode(raw("tele/p1/SENSOR", "not json"));
    REQUIRE(std::holds_alternative<DeadLetter>(bad));
    CHECK_FALSE(std::get<DeadLetter>(bad).reason.empty());
}

TEST_CASE("ttn") {
    auto reg = DecoderRegistry::with_defaults();
    const std::string fixture =
        R"({"end_device_ids":{"device_id":"co2-3"},"uplink_message":{"decoded_payload":)"
        R"({"co2":600,"temperature":21.5,"humidity":40}},"sim_t0":1})";
    const auto n = ok(reg->decode(raw("v3/co2/devices/co2-3/up", fixture)));
    CHECK(n.device_id == "co2-3");
    CHECK(n.family == "co2");
    CHECK(n.cooked.size() == 3);
    CHECK(std::get<std::int64_t>(n.cooked.at("co2")) == 600);
    CHECK(std::get<double>(n.cooked.at("temperature")) == 21.5);
    CHECK(std::get<std::int64_t>(n.cooked.at("humidity")) == 40);

    const auto e = ok(reg->decode(
        raw("v3/co2/devices/x/up", R"({"end_device_ids":{"device_id":"x"},"uplink_message":{}})")));
    CHECK(e.cooked.empty());

    CHECK(std::holds_alternative<DeadLetter>(
        reg->decode(raw("v3/co2/devices/x/up", R"({"uplink_message":{}})"))));

    const auto ts = ok(reg->decode(raw(
        "v3/t/devices/x/up",
        R"({"end_device_ids":{"device_id":"x"},"uplink_message":{"received_at":"2020-06-01T09:00:00.250Z",)"
        R"("decoded_payload":{"nested":{"a":1,"b":true}}}})")));
    CHECK(ts.ts == kRecv - 3'600'000 + 250);
    CHECK(std::get<bool>(ts.cooked.at("nested.b")));
}

TEST_CASE("zigbee coffee deepdish") {
    auto reg = DecoderRegistry::with_defaults();
    const auto z = ok(reg->decode(raw("zigbee/m1/state", R"({"state":{"presence":true}})")));
    CHECK(std::get<bool>(z.cooked.at("presence")));
    CHECK(z.device_id == "m1");

    const auto zid = ok(reg->decode(raw(
        "zigbee/x/state", R"({"e":"changed","r":"sensors","id":"door-2","state":{"open":false}})")));
    CHECK(zid.device_id == "door-2");

    const EpochMs T = kRecv - 100;
    const auto c = ok(reg->decode(raw(
        "coffee/pot1/reading",
        json{{"weight_kg", 2.5}, {"grinder_w", 0}, {"brewer_w", 0}, {"ts", T}}.dump())));
    CHECK(c.ts == T);
    CHECK(cooked_number(c.cooked, "weight_kg") == doctest::Approx(2.5));
    CHECK(c.device_id == "pot1");

    const auto d = ok(reg->decode(raw("deepdish/cam1/count", R"({"count":7})")));
    CHECK(std::get<std::int64_t>(d.cooked.at("people_count")) == 7);
}

TEST_CASE("future timestamps are clamped and counted") {
    auto reg = DecoderRegistry::with_defaults();
    auto at = [&](EpochMs ts) {
        return ok(reg->decode(raw("coffee/p/reading", json{{"weight_kg", 1.0}, {"ts", ts}}.dump())));
    };
    CHECK(at(kRecv + 500).ts == kRecv + 500);
    CHECK(reg->clamped() == 0);
    CHECK(at(kRecv + 501).ts == kRecv);
    CHECK(reg->clamped() == 1);
}

TEST_CASE("registration") {
    auto reg = DecoderRegistry::with_defaults();
    CHECK_THROWS_AS(reg->register_decoder(smartplug_decoder()), DuplicateName);

    auto spec = smartplug_decoder();
    spec.name = "aaa-low";
    spec.priority = 50;
    reg->register_decoder(spec);
    CHECK(reg->select(raw("tele/p1/SENSOR", "{}"))->name == "smartplug");

    // Equal priority: lexicographic name wins.
    auto tie = smartplug_decoder();
    tie.name = "a-plug";
    reg->register_decoder(tie);
    CHECK(reg->select(raw("tele/p1/SENSOR", "{}"))->name == "a-plug");

    DecoderSpec custom{"custom", 100,
                       [](const RawSensorMessage& m) { return m.topic.rfind("custom/", 0) == 0; },
                       [](const RawSensorMessage& m) {
                           NormalizedMessage n;
                           n.device_id = "c1";
                           n.family = "custom";
                           n.ts = m.received_at;
                           n.received_at = m.received_at;
                           n.original = m.payload;
                           n.cooked["v"] = std::int64_t{1};
                           return n;
                       }};
    CHECK(std::holds_alternative<DeadLetter>(reg->decode(raw("custom/x", "1"))));
    reg->register_decoder(custom);
    CHECK(ok(reg->decode(raw("custom/x", "1"))).family == "custom");
}

TEST_CASE("normalized passthrough is the identity on device_id, ts, cooked") {
    auto reg = DecoderRegistry::with_defaults();
    std::mt19937_64 rng(7);
    for (int i = 0; i < 500; ++i) {
        json p = {{"ENERGY", {{"Power", std::uniform_real_distribution<>(0, 2000)(rng)},
                              {"Total", static_cast<std::int64_t>(rng() % 100000)}}},
                  {"sim_t0", kRecv - 5}};
        const auto first = ok(reg->decode(raw("tele/d" + std::to_string(i) + "/SENSOR", p.dump())));
        const auto again = ok(reg->decode(raw("anything/here", to_json(first).dump(), kRecv + 99)));
        CHECK(again.device_id == first.device_id);
        CHECK(again.ts == first.ts);
        CHECK(again.cooked == first.cooked);
        CHECK(again.family == first.family);
        CHECK(again.sim_t0 == first.sim_t0);
    }
}

TEST_CASE("non-UTF-8 originals survive as base64") {
    NormalizedMessage n;
    n.device_id = "d";
    n.ts = 5;
    n.family = "f";
    n.original = std::string("\xff\x00\x01", 3);
    n.received_at = 6;
    const auto j = to_json(n);
    CHECK(j.contains("original_b64"));
    CHECK(normalized_from_json(json::parse(j.dump())) == n);

    std::mt19937 rng(3);
    for (int i = 0; i < 200; ++i) {
        std::string s(rng() % 40, '\0');
        for (auto& c : s) c = static_cast<char>(rng());
        CHECK(base64_decode(base64_encode(s)) == s);
    }
}

TEST_CASE("canonical JSON field order") {
    NormalizedMessage n{"d1", 10, "coffee", {{"weight_kg", 1.5}}, "{}", 11, 9};
    CHECK(to_json(n).dump() ==
          R"({"device_id":"d1","ts":10,"family":"coffee","cooked":{"weight_kg":1.5},)"
          R"("received_at":11,"sim_t0":9,"original":"{}"})");
}

TEST_CASE("totality over random payloads") {
    auto reg = DecoderRegistry::with_defaults();
    std::mt19937 rng(11);
    const char* topics[] = {"tele/a/SENSOR", "v3/x/devices/a/up", "zigbee/a/state", "coffee/a/reading",
                            "deepdish/a/count", "nowhere", "a/b/c"};
    const char* bodies[] = {"{}", "[]", "null", R"({"ENERGY":{"Power":"x"}})", R"({"count":1})",
                            R"({"state":{"on":1}})", R"({"weight_kg":0.4,"ts":-5})", "\xff\xfe"};
    std::uint64_t total = 0;
    for (int i = 0; i < 5000; ++i) {
        auto m = raw(topics[rng() % 7], bodies[rng() % 8]);
        reg->decode(m);
        ++total;
    }
    CHECK(reg->decoded() + reg->dead_letters() == total);
}
