// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "sensert/demo.hpp"
#include "sensert/metadata.hpp"
#include "sensert/net.hpp"

#include <nlohmann/json.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sys/wait.h>

using namespace sensert;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    auto p = fs::temp_directory_path() / ("sensert-stack-" + name + "-" + std::to_string(::getpid()));
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(SENSERT_CLI) + " --log-level error " + args + " >/dev/null 2>&1";
    const int rc = std::system(cmd.c_str());
    return WIFEXITED(rc) ? WEXITSTATUS(rc) : -1;
}

std::size_t count_lines(const fs::path& p) {
    std::ifstream in(p);
    std::size_t n = 0;
    for (std::string line; std::getline(in, line);) n += !line.empty();
    return n;
}

}  // namespace

TEST_CASE("stack config parses and rejects colliding addresses") {
    auto c = StackConfig::from_json(json::parse(R"({
        "brokers": {"local": "127.0.0.1:1883", "ttn": "127.0.0.1:1884", "zigbee": "127.0.0.1:1885"},
        "monitor": "127.0.0.1:7000", "data_root": "data",
        "rules": [{"filter": "feed/#", "field": "co2", "op": ">", "value": 1000}]
    })"), "/srv");
    CHECK(c.local.port == 1883);
    CHECK(c.zigbee.port == 1885);
    CHECK(c.data_root == fs::path("/srv/data"));
    REQUIRE(c.rules.size() == 1);
    CHECK(c.rules[0].field == "co2");
    CHECK_THROWS_AS(StackConfig::from_json(json::parse(R"({"brokers": {"local": "1883", "ttn": "1883"}})")),
                    std::invalid_argument);
    // ephemeral ports never collide
    CHECK_NOTHROW(StackConfig::from_json(json::parse(R"({"brokers": {"local": "0", "ttn": "0"}})")));
}

TEST_CASE("coffee demo detects the ground-truth sequence and stores every reading") {
    DemoOptions o;
    o.stack.data_root = scratch("coffee");
    o.out_dir = o.stack.data_root / "bench";
    auto r = run_demo(o);
    CHECK(r.matches());
    CHECK(r.detected == std::vector<std::string>{"coffee-grinding", "new-pot", "pot-poured", "pot-poured",
                                                 "pot-poured", "pot-poured", "pot-removed", "pot-empty"});
    CHECK(r.run.conservation_ok);
    CHECK(r.run.feed_in == r.run.feed_out + r.run.feed_dead);
    CHECK(r.run.feed_dead == 0);

    // storage replay: one line per decoded reading, latest.json holds max ts
    const fs::path node = o.stack.data_root / "coffee-1";
    REQUIRE(fs::exists(node));
    std::size_t lines = 0;
    EpochMs max_ts = 0;
    for (const auto& f : fs::recursive_directory_iterator(node)) {
        if (f.path().extension() != ".jsonl") continue;
        lines += count_lines(f.path());
        std::ifstream in(f.path());
        for (std::string line; std::getline(in, line);)
            if (!line.empty()) max_ts = std::max(max_ts, json::parse(line).at("ts").get<EpochMs>());
    }
    CHECK(lines == r.run.feed_out);
    std::ifstream latest(node / "latest.json");
    CHECK(json::parse(latest).at("ts").get<EpochMs>() == max_ts);
    CHECK(fs::exists(*o.out_dir / "table2.csv"));
    CHECK(fs::exists(*o.out_dir / "fig8a.csv"));
    CHECK(fs::exists(*o.out_dir / "fig8b.csv"));
    fs::remove_all(o.stack.data_root);
}

TEST_CASE("co2 excursion demo yields one threshold-crossed event") {
    DemoOptions o;
    o.scenario = "co2";
    auto r = run_demo(o);
    CHECK(std::count(r.detected.begin(), r.detected.end(), "threshold-crossed") == 1);
    CHECK(r.matches());
}

TEST_CASE("cli: demo on an occupied port exits 2") {
    net::Listener squatter(net::Endpoint{"127.0.0.1", 0});
    const auto port = std::to_string(squatter.local().port);
    CHECK(run_cli("demo --out '' --local 127.0.0.1:" + port + " --ttn 127.0.0.1:0 --zigbee 127.0.0.1:0 --monitor 127.0.0.1:0") == 2);
    CHECK(run_cli("demo --out '' --local 127.0.0.1:0 --ttn 127.0.0.1:0 --zigbee 127.0.0.1:0 --monitor 127.0.0.1:" + port) == 2);
}

TEST_CASE("cli: demo exits 0 on a match") {
    CHECK(run_cli("demo --ephemeral --out ''") == 0);
}

TEST_CASE("cli: meta import, asof and ls") {
    const auto dir = scratch("meta");
    const auto doc = dir / "m.json";
    std::ofstream(doc) << R"({
      "containers": [
        {"id": "b", "kind": "Building", "parent": null, "ts": "2020-01-01T00:00:00Z"},
        {"id": "f1", "kind": "Floor", "parent": "b", "ts": "2020-01-01T00:00:00Z"},
        {"id": "r1", "kind": "Room", "parent": "f1", "ts": "2020-01-01T00:00:00Z"}
      ],
      "devices": [
        {"device_id": "d1", "ts": "2020-02-01T00:00:00Z",
         "doc": {"location": {"x_m": 1, "y_m": 1, "floor": 1, "container_id": "r1"}}}
      ]})";
    const std::string store = "meta --store " + (dir / "store").string() + " ";
    CHECK(run_cli(store + "import " + doc.string()) == 0);
    CHECK(run_cli(store + "asof d1 2020-03-01T00:00:00Z") == 0);
    CHECK(run_cli(store + "asof d1 2020-01-15T00:00:00Z") == 1);
    CHECK(run_cli(store + "ls b --at 2020-03-01T00:00:00Z") == 0);
    CHECK(run_cli(store + "ls nowhere") == 1);
    // journal survives a reopen
    auto s = meta::MetadataStore::open(dir / "store");
    CHECK(s.devices_in("b", *parse_iso8601("2020-03-01T00:00:00Z")) == std::vector<std::string>{"d1"});
    fs::remove_all(dir);
}
