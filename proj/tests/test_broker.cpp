// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "sensert/broker.hpp"
#include "sensert/mqtt_client.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <random>
#include <set>
#include <thread>

using namespace sensert;
using namespace sensert::broker;
using namespace std::chrono_literals;

namespace {

BrokerConfig local_config(std::string name = "test") {
    BrokerConfig c;
    c.name = std::move(name);
    c.listen = net::Endpoint{"127.0.0.1", 0};
    c.bridge_backoff_base = 50ms;
    return c;
}

std::unique_ptr<MqttClient> client(const net::Endpoint& at, std::string id,
                                   std::vector<std::string> subs = {}) {
    ClientOptions o;
    o.remote = at;
    o.client_id = std::move(id);
    o.subscriptions = std::move(subs);
    o.backoff_base = 50ms;
    auto c = std::make_unique<MqttClient>(o);
    c->start();
    REQUIRE(c->wait_ready(5s));
    return c;
}

std::size_t drain(MqttClient& c, std::chrono::milliseconds quiet = 300ms) {
    std::size_t n = 0;
    while (c.receive(quiet)) ++n;
    return n;
}

template <typename Pred>
bool eventually(Pred pred, std::chrono::milliseconds limit = 5s) {
    const auto deadline = std::chrono::steady_clock::now() + limit;
    while (std::chrono::steady_clock::now() < deadline) {
        if (pred()) return true;
        std::this_thread::sleep_for(10ms);
    }
    return pred();
}

}  // namespace

TEST_CASE("router fan-out and per-session dedup") {
    Router r;
    auto a = r.new_link_id(), b = r.new_link_id(), c = r.new_link_id();
    auto oa = std::make_shared<Outbox>(16), ob = std::make_shared<Outbox>(16),
         oc = std::make_shared<Outbox>(16);
    r.attach(a, "a", oa);
    r.attach(b, "b", ob);
    r.attach(c, "c", oc);
    r.subscribe(a, {"tele/#"});
    r.subscribe(b, {"tele/#"});
    CHECK(r.route_publish(c, wire::Publish{"tele/p1/SENSOR", "{}", false}) == 2);

    r.subscribe(c, {"a/#", "a/+"});
    CHECK(r.route_publish(a, wire::Publish{"a/b", "x", false}) == 1);
    CHECK(oc->size() == 1);

    // Never back over the arrival link.
    CHECK(r.route_publish(c, wire::Publish{"a/b", "x", false}) == 0);

    // Duplicate filter strings collapse.
    r.subscribe(a, {"tele/#"});
    CHECK(r.route_publish(c, wire::Publish{"tele/x", "", false}) == 2);
    CHECK(oa->size() == 2);
}

TEST_CASE("subscribe grants per filter") {
    Router r;
    auto l = r.new_link_id();
    r.attach(l, "s", std::make_shared<Outbox>(4));
    CHECK(r.subscribe(l, {"tele/+/SENSOR"}) == std::vector<std::uint8_t>{0x00});
    CHECK(r.subscribe(l, {"a/#/b"}) == std::vector<std::uint8_t>{0x80});
    CHECK(r.subscribe(l, {"x/y", "a/b+", "z/#"}) == std::vector<std::uint8_t>{0x00, 0x80, 0x00});
    r.unsubscribe(l, {"x/y"});
    CHECK(r.matching_links(0, "x/y").empty());
    CHECK(r.matching_links(0, "z/q") == std::vector<LinkId>{l});
}

TEST_CASE("routing agrees with a match-all-sessions oracle") {
    std::mt19937_64 rng(99);
    const std::vector<std::string> levels{"a", "b", "c"};
    auto pick = [&](const std::vector<std::string>& from) {
        return from[std::uniform_int_distribution<std::size_t>(0, from.size() - 1)(rng)];
    };
    for (int round = 0; round < 50; ++round) {
        Router r;
        std::vector<std::pair<LinkId, std::vector<std::string>>> table;
        for (int s = 0; s < 20; ++s) {
            auto id = r.new_link_id();
            r.attach(id, "c" + std::to_string(s), std::make_shared<Outbox>(4));
            std::vector<std::string> fs;
            const int nf = std::uniform_int_distribution<int>(0, 3)(rng);
            for (int k = 0; k < nf; ++k) {
                std::string f;
                const int depth = std::uniform_int_distribution<int>(1, 3)(rng);
                for (int d = 0; d < depth; ++d) {
                    if (d) f += '/';
                    const int kind = std::uniform_int_distribution<int>(0, 4)(rng);
                    f += kind == 0 ? "+" : (kind == 1 && d + 1 == depth) ? "#" : pick(levels);
                }
                fs.push_back(f);
            }
            if (!fs.empty()) r.subscribe(id, fs);
            table.emplace_back(id, fs);
        }
        for (int q = 0; q < 40; ++q) {
            std::string topic;
            const int depth = std::uniform_int_distribution<int>(1, 3)(rng);
            for (int d = 0; d < depth; ++d) topic += (d ? "/" : "") + pick(levels);
            const LinkId origin = table[q % table.size()].first;
            std::vector<LinkId> expected;
            for (const auto& [id, fs] : table) {
                if (id == origin) continue;
                if (std::any_of(fs.begin(), fs.end(),
                                [&](const std::string& f) { return topic_matches(f, topic); }))
                    expected.push_back(id);
            }
            std::sort(expected.begin(), expected.end());
            REQUIRE(r.matching_links(origin, topic) == expected);
        }
    }
}

TEST_CASE("bridge rule topic mapping") {
    BridgeRule rule;
    rule.local_prefix = "ttn";
    CHECK(rule.local_topic("a/b") == "ttn/a/b");
    CHECK(rule.remote_topic("ttn/a/b") == std::optional<std::string>("a/b"));
    CHECK_FALSE(rule.remote_topic("zigbee/a").has_value());
    rule.local_prefix = "bad/+";
    CHECK_THROWS(rule.validate());
    rule.local_prefix.clear();
    rule.filter = "a/#/b";
    CHECK_THROWS(rule.validate());

    auto cfg = BrokerConfig::from_json(nlohmann::json::parse(R"({
        "listen": "127.0.0.1:1999",
        "bridges": [{"remote": "127.0.0.1:1884", "direction": "both",
                     "filter": "v3/+/devices/#", "local_prefix": "ttn"}]})"));
    CHECK(cfg.listen.port == 1999);
    REQUIRE(cfg.bridges.size() == 1);
    CHECK(cfg.bridges[0].direction == BridgeDirection::Both);
    CHECK(cfg.bridges[0].local_filter() == "ttn/v3/+/devices/#");
}

TEST_CASE("loopback publish reaches a subscriber intact") {
    auto b = serve(local_config());
    auto sub = client(b->endpoint(), "sub", {"tele/#"});
    auto pub = client(b->endpoint(), "pub");
    const std::string payload = R"({"ENERGY":{"Power":38.5}})";
    REQUIRE(pub->publish("tele/p1/SENSOR", payload));
    auto got = sub->receive(3s);
    REQUIRE(got.has_value());
    CHECK(got->topic == "tele/p1/SENSOR");
    CHECK(got->payload == payload);
    CHECK(b->stats().msgs_in == 1);
}

TEST_CASE("protocol violation closes only the offending connection") {
    auto b = serve(local_config());
    {
        auto raw = net::connect_tcp(b->endpoint());
        const std::uint8_t reserved[] = {0xF0, 0x00};
        REQUIRE(raw.send_all(std::span<const std::uint8_t>(reserved)));
        std::array<std::uint8_t, 16> buf{};
        auto n = raw.recv_some(buf, 3s);
        REQUIRE(n.has_value());
        CHECK(*n <= 0);
    }
    {
        // A publish before CONNECT is also a violation.
        auto raw = net::connect_tcp(b->endpoint());
        REQUIRE(raw.send_all(wire::encode_packet(wire::Publish{"a", "b", false})));
        std::array<std::uint8_t, 16> buf{};
        auto n = raw.recv_some(buf, 3s);
        REQUIRE(n.has_value());
        CHECK(*n <= 0);
    }
    auto sub = client(b->endpoint(), "sub", {"x"});
    auto pub = client(b->endpoint(), "pub");
    REQUIRE(pub->publish("x", "still serving"));
    auto got = sub->receive(3s);
    REQUIRE(got.has_value());
    CHECK(got->payload == "still serving");
}

TEST_CASE("keep-alive expiry disconnects a silent client") {
    auto b = serve(local_config());
    auto raw = net::connect_tcp(b->endpoint());
    REQUIRE(raw.send_all(wire::encode_packet(wire::Connect{"quiet", 1, true})));
    std::array<std::uint8_t, 16> buf{};
    auto n = raw.recv_some(buf, 2s);
    REQUIRE(n.has_value());
    CHECK(*n == 4);  // CONNACK
    const auto start = std::chrono::steady_clock::now();
    n = raw.recv_some(buf, 5s);
    const auto waited = std::chrono::steady_clock::now() - start;
    REQUIRE(n.has_value());
    CHECK(*n <= 0);
    CHECK(waited >= 1200ms);
    CHECK(waited < 3s);
}

TEST_CASE("newer connection with the same client id supersedes the older") {
    auto b = serve(local_config());
    auto first = net::connect_tcp(b->endpoint());
    REQUIRE(first.send_all(wire::encode_packet(wire::Connect{"dup", 60, true})));
    std::array<std::uint8_t, 16> buf{};
    REQUIRE(first.recv_some(buf, 2s).value_or(0) == 4);
    auto second = client(b->endpoint(), "dup");
    auto n = first.recv_some(buf, 3s);
    REQUIRE(n.has_value());
    CHECK(*n <= 0);
    CHECK(eventually([&] { return b->stats().live_sessions == 1; }));
}

TEST_CASE("100 concurrent clients x 100 publishes are all counted") {
    auto b = serve(local_config());
    std::vector<std::unique_ptr<MqttClient>> clients;
    for (int i = 0; i < 100; ++i) clients.push_back(client(b->endpoint(), "load-" + std::to_string(i)));
    std::vector<std::thread> threads;
    for (int t = 0; t < 4; ++t) {
        threads.emplace_back([&, t] {
            for (int i = t; i < 100; i += 4)
                for (int k = 0; k < 100; ++k) clients[i]->publish("load/" + std::to_string(i), "m");
        });
    }
    for (auto& t : threads) t.join();
    CHECK(eventually([&] { return b->stats().msgs_in == 10000; }, 20s));
}

TEST_CASE("per-publisher FIFO and stalled-subscriber isolation") {
    auto cfg = local_config();
    cfg.session_queue_capacity = 64;
    auto b = serve(cfg);

    // Subscriber that never reads its socket.
    auto stalled = net::connect_tcp(b->endpoint());
    REQUIRE(stalled.send_all(wire::encode_packet(wire::Connect{"stalled", 0, true})));
    REQUIRE(stalled.send_all(wire::encode_packet(wire::Subscribe{1, {"bulk/#"}})));
    std::this_thread::sleep_for(200ms);

    auto good = client(b->endpoint(), "good", {"bulk/#"});
    auto pub = client(b->endpoint(), "pub");
    const std::string blob(8000, 'z');
    constexpr int kCount = 2000;
    std::vector<std::string> got;
    std::thread reader([&] {
        while (got.size() < kCount) {
            auto m = good->receive(5s);
            if (!m) break;
            got.push_back(m->payload.substr(0, m->payload.find('|')));
        }
    });
    for (int i = 0; i < kCount; ++i) {
        REQUIRE(pub->publish("bulk/x", std::to_string(i) + "|" + blob));
        // Pace the publisher so the healthy reader keeps up with its queue.
        if (i % 16 == 15) std::this_thread::sleep_for(3ms);
    }
    reader.join();
    REQUIRE(got.size() == kCount);
    for (int i = 0; i < kCount; ++i) REQUIRE(got[i] == std::to_string(i));
    CHECK(b->stats().drops > 0);
}

TEST_CASE("in-bridge carries remote uplinks to the local broker") {
    auto ttn = serve(local_config("ttn"));
    auto cfg = local_config("local");
    BridgeRule rule;
    rule.remote = ttn->endpoint();
    rule.direction = BridgeDirection::In;
    rule.filter = "v3/+/devices/#";
    cfg.bridges.push_back(rule);
    rule.filter = "other/#";
    rule.local_prefix = "ttn";
    cfg.bridges.push_back(rule);
    auto local = serve(cfg);
    REQUIRE(local->wait_bridges_ready(5s));

    auto sub = client(local->endpoint(), "rts", {"#"});
    auto remote_sub = client(ttn->endpoint(), "echo-watch", {"#"});
    auto uplink = client(ttn->endpoint(), "ttn-ns");
    REQUIRE(uplink->publish("v3/app/devices/d1/up", R"({"id":1})"));
    REQUIRE(uplink->publish("other/a/b", "p"));

    // Separate bridges are separate paths, so only per-path order is fixed.
    std::map<std::string, std::string> seen;
    for (int i = 0; i < 2; ++i) {
        auto m = sub->receive(3s);
        REQUIRE(m.has_value());
        seen[m->topic] = m->payload;
    }
    CHECK(seen == std::map<std::string, std::string>{{"v3/app/devices/d1/up", R"({"id":1})"},
                                                     {"ttn/other/a/b", "p"}});
    CHECK(drain(*sub) == 0);
    // The remote watcher sees the two originals and nothing echoed back.
    CHECK(drain(*remote_sub) == 2);
}

TEST_CASE("both-direction bridge does not echo") {
    auto remote = serve(local_config("remote"));
    auto cfg = local_config("local");
    BridgeRule rule;
    rule.remote = remote->endpoint();
    rule.direction = BridgeDirection::Both;
    rule.filter = "share/#";
    cfg.bridges.push_back(rule);
    auto local = serve(cfg);
    REQUIRE(local->wait_bridges_ready(5s));

    auto remote_watch = client(remote->endpoint(), "rw", {"share/#"});
    auto local_watch = client(local->endpoint(), "lw", {"share/#"});
    auto remote_pub = client(remote->endpoint(), "rp");
    auto local_pub = client(local->endpoint(), "lp");

    REQUIRE(remote_pub->publish("share/from-remote", "r"));
    REQUIRE(local_pub->publish("share/from-local", "l"));
    std::this_thread::sleep_for(500ms);

    std::multiset<std::string> remote_seen, local_seen;
    while (auto m = remote_watch->receive(200ms)) remote_seen.insert(m->topic);
    while (auto m = local_watch->receive(200ms)) local_seen.insert(m->topic);
    CHECK(remote_seen == std::multiset<std::string>{"share/from-local", "share/from-remote"});
    CHECK(local_seen == std::multiset<std::string>{"share/from-local", "share/from-remote"});
    CHECK(remote->stats().msgs_in == 2);
    CHECK(local->stats().msgs_in == 2);
}

TEST_CASE("bridge retries until the remote comes up") {
    // Reserve a port, release it, then point the bridge at it.
    std::uint16_t port;
    {
        net::Listener probe(net::Endpoint{"127.0.0.1", 0});
        port = probe.local().port;
    }
    auto cfg = local_config("local");
    BridgeRule rule;
    rule.remote = net::Endpoint{"127.0.0.1", port};
    rule.filter = "late/#";
    cfg.bridges.push_back(rule);
    auto local = serve(cfg);
    CHECK_FALSE(local->wait_bridges_ready(300ms));

    auto remote_cfg = local_config("remote");
    remote_cfg.listen.port = port;
    auto remote = serve(remote_cfg);
    REQUIRE(local->wait_bridges_ready(10s));
    auto sub = client(local->endpoint(), "s", {"late/#"});
    auto pub = client(remote->endpoint(), "p");
    REQUIRE(pub->publish("late/x", "ok"));
    auto m = sub->receive(3s);
    REQUIRE(m.has_value());
    CHECK(m->payload == "ok");
}
