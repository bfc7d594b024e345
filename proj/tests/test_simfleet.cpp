// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "sensert/broker.hpp"
#include "sensert/coffee.hpp"
#include "sensert/deconz.hpp"
#include "sensert/simfleet.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <map>
#include <set>

using namespace sensert;
using namespace sensert::sim;
using namespace std::chrono_literals;
using nlohmann::json;
using sensert::broker::Broker;
using sensert::broker::BrokerConfig;

namespace {

std::vector<std::string> coffee_events(const std::vector<Emission>& log) {
    auto reg = DecoderRegistry::with_defaults();
    rts::CoffeeState s;
    std::vector<std::string> out;
    for (const auto& e : log) {
        auto o = reg->decode(RawSensorMessage{e.topic, e.payload, e.ts + 10});
        REQUIRE(std::holds_alternative<NormalizedMessage>(o));
        auto step = rts::rtcoffee_step(std::move(s), std::get<NormalizedMessage>(o));
        s = std::move(step.state);
        for (const auto& ev : step.events)
            if (ev.event_type != "coffee-level") out.push_back(ev.event_type);
    }
    return out;
}

std::unique_ptr<Broker> start_broker(std::string name) {
    BrokerConfig c;
    c.name = std::move(name);
    c.listen = net::Endpoint{"127.0.0.1", 0};
    auto b = std::make_unique<Broker>(c);
    b->start();
    return b;
}

std::unique_ptr<MqttClient> sink(const net::Endpoint& at) {
    ClientOptions o;
    o.remote = at;
    o.client_id = "sink-" + std::to_string(at.port);
    o.subscriptions = {"#"};
    auto c = std::make_unique<MqttClient>(o);
    c->start();
    REQUIRE(c->wait_ready(5s));
    return c;
}

}  // namespace

TEST_CASE("every family decodes through its decoder") {
    auto reg = DecoderRegistry::with_defaults();
    const EpochMs t = kScenarioEpoch + 123;
    for (auto f : {Family::SmartPlug, Family::LoraCO2, Family::LoraTemp, Family::LoraOccupancy, Family::ZigbeeMotion,
                   Family::ZigbeeDoor, Family::DeepDish, Family::CoffeeNode}) {
        const auto p = DeviceProfile::make("dev-" + to_string(f), f);
        const auto m = emit_reading(p, t);
        CAPTURE(m.topic);
        auto o = reg->decode(RawSensorMessage{m.topic, m.payload, t + 5});
        REQUIRE(std::holds_alternative<NormalizedMessage>(o));
        const auto& n = std::get<NormalizedMessage>(o);
        CHECK(n.device_id == p.device_id);
        CHECK(n.family == decoded_family(f));
        CHECK(n.sim_t0 == t);
        CHECK(n.ts <= t);
        CHECK(n.ts > t - 1000);
        CHECK_FALSE(n.cooked.empty());
    }
    const auto plug = json::parse(emit_reading(DeviceProfile::make("p", Family::SmartPlug), t).payload);
    CHECK(plug.contains("Time"));
    CHECK(plug["ENERGY"].contains("Power"));
    const auto co2 = emit_reading(DeviceProfile::make("c", Family::LoraCO2), t);
    CHECK(co2.topic == "v3/co2/devices/c/up");
    const auto zb = json::parse(emit_reading(DeviceProfile::make("z", Family::ZigbeeMotion), t).payload);
    CHECK(zb["e"] == "changed");
    CHECK(zb["r"] == "sensors");
    CHECK(zb["state"].contains("presence"));
}

TEST_CASE("closed loop: a mixed fleet never dead-letters") {
    auto reg = DecoderRegistry::with_defaults();
    const auto log = simulate_offline(make_fleet(45, 1.0, 0.2), std::nullopt, 60, 3);
    for (const auto& e : log) reg->decode(RawSensorMessage{e.topic, e.payload, e.ts + 1});
    CHECK(reg->dead_letters() == 0);
    CHECK(reg->decoded() == log.size());
}

TEST_CASE("emission counts") {
    const auto fleet = make_fleet(45, 1.0);
    const auto log = simulate_offline(fleet, std::nullopt, 60);
    CHECK(log.size() >= 2700 - 45);
    CHECK(log.size() <= 2700 + 45);
    std::map<std::string, int> per;
    for (const auto& e : log) ++per[e.device_id];
    for (const auto& p : fleet) {
        CHECK(per[p.device_id] >= 59);
        CHECK(per[p.device_id] <= 61);
    }

    for (double period : {0.7, 2.5, 13.0}) {
        auto jittered = make_fleet(20, period, period / 4);
        const double D = 97;
        std::map<std::string, int> n;
        for (const auto& e : simulate_offline(jittered, std::nullopt, D, 9)) ++n[e.device_id];
        for (const auto& p : jittered) {
            CHECK(n[p.device_id] >= std::floor(D / period) - 1);
            CHECK(n[p.device_id] <= std::floor(D / period) + 1);
        }
    }
    CHECK(simulate_offline({}, std::nullopt, 60).empty());
}

TEST_CASE("a single override marks a single payload") {
    ScenarioScript s;
    s.steps.push_back({5, "co2-1", {{"uplink_message", {{"decoded_payload", {{"co2", 1500}}}}}}});
    const auto log = simulate_offline(make_fleet(3, 1.0), s, 20, 1, kScenarioEpoch, false);
    int overridden = 0;
    for (const auto& e : log) {
        if (!e.overridden) continue;
        ++overridden;
        CHECK(e.device_id == "co2-1");
        CHECK(e.ts - kScenarioEpoch == 5000);
        CHECK(json::parse(e.payload)["uplink_message"]["decoded_payload"]["co2"] == 1500);
    }
    CHECK(overridden == 1);

    ScenarioScript bad;
    bad.steps = {{5, "x", json::object()}, {4, "x", json::object()}};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
}

TEST_CASE("coffee scenario weights follow the pot") {
    const auto s = coffee_scenario();
    const auto log = simulate_offline({}, s, s.duration_s, 1, s.sim_epoch, false);
    CHECK(log.size() == 480);
    std::map<EpochMs, double> w;
    std::map<EpochMs, double> grinder;
    for (const auto& e : log) {
        const auto j = json::parse(e.payload);
        const EpochMs t = (e.ts - kScenarioEpoch) / 1000;
        w[t] = j["weight_kg"];
        grinder[t] = j["grinder_w"];
    }
    // Full pot: 0.5 kg pot plus 2 kg coffee.
    for (EpochMs t = 250; t < 600; t += 5) CHECK(std::abs(w[t] - 2.5) < 0.05);
    auto mean = [&](EpochMs a, EpochMs b) {
        double s = 0;
        int n = 0;
        for (EpochMs t = a; t < b; t += 5) s += w[t], ++n;
        return s / n;
    };
    for (EpochMs pour : {600, 900, 1200, 1500}) CHECK(mean(pour - 100, pour) - mean(pour, pour + 100) == doctest::Approx(0.25).epsilon(0.05));
    for (EpochMs t = 60; t < 90; t += 5) CHECK(grinder[t] > 40);
    CHECK(std::abs(w[1900]) < 0.05);
    CHECK(std::abs(w[2200] - 0.5) < 0.05);
}

TEST_CASE("coffee scenario replays to its ground truth") {
    const auto s = coffee_scenario();
    const std::vector<std::string> want{"coffee-grinding", "new-pot",    "pot-poured", "pot-poured",
                                        "pot-poured",      "pot-poured", "pot-removed", "pot-empty"};
    CHECK(s.ground_truth_types() == want);
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        CAPTURE(seed);
        CHECK(coffee_events(simulate_offline({}, s, s.duration_s, seed, s.sim_epoch, false)) == want);
    }
}

TEST_CASE("profiles") {
    CHECK(DeviceProfile::make("d", Family::DeepDish).extra_delay_s == doctest::Approx(0.2));
    CHECK(DeviceProfile::make("z", Family::ZigbeeDoor).transport == Transport::DeconzWs);
    const auto fleet = make_fleet(14);
    const auto back = fleet_from_json(json{{"devices", [&] {
                                                json a = json::array();
                                                for (const auto& p : fleet) a.push_back(p.to_json());
                                                return a;
                                            }()}});
    REQUIRE(back.size() == fleet.size());
    for (std::size_t i = 0; i < fleet.size(); ++i) {
        CHECK(back[i].device_id == fleet[i].device_id);
        CHECK(back[i].family == fleet[i].family);
        CHECK(back[i].transport == fleet[i].transport);
    }
    CHECK_THROWS(DeviceProfile::from_json(json{{"device_id", "x"}, {"family", "Toaster"}}));
    CHECK_THROWS(DeviceProfile::from_json(json{{"device_id", "x"}, {"family", "SmartPlug"}, {"period_s", 0}}));
    CHECK(parse_family("loraco2") == Family::LoraCO2);

    const auto b = BrokerAddresses::parse("local=127.0.0.1:1883,ttn=127.0.0.1:1884,zigbee=1885");
    CHECK(b.ttn.port == 1884);
    CHECK(b.zigbee.port == 1885);
    CHECK_THROWS(BrokerAddresses::parse("ttn=1:2"));
}

TEST_CASE("deCONZ emulator and translator") {
    auto zigbee = start_broker("zigbee");
    auto out = sink(zigbee->endpoint());
    DeconzEmulator emu;
    emu.start();
    CHECK(emu.push("{}") == 0);
    DeconzTranslator tr(emu.endpoint(), zigbee->endpoint());
    tr.start();
    REQUIRE(tr.wait_ready(5s));
    while (emu.clients() == 0) std::this_thread::sleep_for(10ms);

    const auto m = emit_reading(DeviceProfile::make("motion-1", Family::ZigbeeMotion), kScenarioEpoch);
    CHECK(emu.push(m.payload) == 1);
    CHECK(emu.push(R"({"e":"added","r":"lights","id":"l1"})") == 1);
    auto p = out->receive(3s);
    REQUIRE(p);
    CHECK(p->topic == "zigbee/motion-1/state");
    CHECK(p->payload == m.payload);
    CHECK_FALSE(out->receive(300ms));
    CHECK(tr.ignored() == 1);
    tr.stop();
    emu.stop();
    out->stop();
    zigbee->stop();
}

TEST_CASE("live fleet over all three transports") {
    auto local = start_broker("local"), ttn = start_broker("ttn"), zigbee = start_broker("zigbee");
    auto sl = sink(local->endpoint()), st = sink(ttn->endpoint()), sz = sink(zigbee->endpoint());
    const auto fleet = make_fleet(7, 0.5);
    FleetTransports tx({local->endpoint(), ttn->endpoint(), zigbee->endpoint()}, fleet);
    tx.start();
    REQUIRE(tx.wait_ready(5s));
    const auto log = run_fleet(fleet, std::nullopt, 3.0, tx);
    CHECK(log.size() >= 7 * 5);
    std::multiset<std::string> want_local, want_ttn, want_zigbee, got_local, got_ttn, got_zigbee;
    for (const auto& e : log) {
        CHECK(e.sent);
        switch (default_transport(e.family)) {
            case Transport::WifiMqtt: want_local.insert(e.payload); break;
            case Transport::TtnMqtt: want_ttn.insert(e.payload); break;
            case Transport::DeconzWs: want_zigbee.insert(e.payload); break;
        }
    }
    auto collect = [](MqttClient& c, std::multiset<std::string>& into) {
        while (auto p = c.receive(500ms)) into.insert(p->payload);
    };
    collect(*sl, got_local);
    collect(*st, got_ttn);
    collect(*sz, got_zigbee);
    CHECK(got_local == want_local);
    CHECK(got_ttn == want_ttn);
    CHECK(got_zigbee == want_zigbee);
    CHECK(tx.drops() == 0);

    // DeepDish readings leave about 200 ms after they are taken.
    for (const auto& e : log)
        if (e.family == Family::DeepDish) CHECK(json::parse(e.payload)["sim_t0"] == e.sim_t0);
    tx.stop();
    for (auto* c : {sl.get(), st.get(), sz.get()}) c->stop();
    local->stop();
    ttn->stop();
    zigbee->stop();
}

TEST_CASE("unreachable transport buffers 100 per device then drops oldest") {
    net::Endpoint nowhere{"127.0.0.1", 1};
    const auto p = DeviceProfile::make("plug", Family::SmartPlug);
    FleetTransports tx({nowhere, nowhere, nowhere}, {p});
    tx.start();
    for (int i = 0; i < 130; ++i) CHECK_FALSE(tx.send(p, emit_reading(p, kScenarioEpoch + i)));
    CHECK(tx.buffered() == 100);
    CHECK(tx.drops() == 30);
    tx.stop();
}
