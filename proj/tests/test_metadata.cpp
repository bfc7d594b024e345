// SPDX-License-Identifier: Apache-2.0
#include "doctest.h"

#include "sensert/metadata.hpp"
#include "support/metadata_oracle.hpp"

#include <filesystem>
#include <random>
#include <set>

using namespace sensert;
using namespace sensert::meta;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

json loc(const std::string& container, double x = 1, double y = 2) {
    return {{"location", {{"x_m", x}, {"y_m", y}, {"floor", 1}, {"h_m", 0.8}, {"container_id", container}}}};
}

SpatialContainer box(std::string id, Kind k, std::optional<std::string> parent = std::nullopt) {
    return SpatialContainer{id, std::move(parent), k, id, {}};
}

/// Building b, floor f, rooms rA rB, desk d in rA.
MetadataStore small() {
    MetadataStore s;
    s.add_container(box("b", Kind::Building), 0);
    s.add_container(box("f", Kind::Floor, "b"), 0);
    s.add_container(box("rA", Kind::Room, "f"), 0);
    s.add_container(box("rB", Kind::Room, "f"), 0);
    s.add_container(box("d", Kind::Desk, "rA"), 0);
    return s;
}

}  // namespace

TEST_CASE("device history") {
    auto s = small();
    s.upsert_device({"d1", 100, loc("d")});
    CHECK(s.history("d1").size() == 1);
    s.upsert_device({"d1", 200, loc("rB")});
    CHECK(s.history("d1").size() == 2);
    CHECK(s.get_asof("d1", 150)->ts == 100);
    CHECK(s.get_asof("d1", 200)->ts == 200);
    CHECK_FALSE(s.get_asof("d1", 50));
    CHECK(s.get_asof("d1", 150)->doc["ts"] == 100);

    CHECK_THROWS_AS(s.upsert_device({"d1", 300, json{{"name", "x"}}}), ValidationError);
    CHECK_THROWS_AS(s.upsert_device({"d1", 100, loc("d")}), ValidationError);
    CHECK_THROWS_AS(s.upsert_device({"d1", 300, loc("nowhere")}), ValidationError);
    CHECK_THROWS_AS(s.upsert_device({"d1", 300, loc("d", -1, 0)}), ValidationError);
    CHECK(s.history("d1").size() == 2);
}

TEST_CASE("devices_in follows the hierarchy and time") {
    auto s = small();
    s.upsert_device({"d1", 100, loc("d")});
    CHECK(s.devices_in("rA", 150) == std::vector<std::string>{"d1"});
    CHECK(s.devices_in("b", 150) == std::vector<std::string>{"d1"});
    CHECK(s.devices_in("rB", 150).empty());

    s.upsert_device({"mover", 100, loc("rA")});
    s.upsert_device({"mover", 200, loc("rB")});
    CHECK(s.devices_in("rA", 150) == std::vector<std::string>{"d1", "mover"});
    CHECK(s.devices_in("rA", 250) == std::vector<std::string>{"d1"});

    MetadataStore empty;
    empty.add_container(box("b", Kind::Building), 0);
    CHECK(empty.devices_in("b", 10).empty());
    CHECK_THROWS_AS(empty.devices_in("zzz", 10), UnknownContainer);
}

TEST_CASE("reparent") {
    auto s = small();
    s.upsert_device({"d1", 100, loc("d")});
    s.reparent("d", "rB", 500);
    CHECK(s.devices_in("rA", 501).empty());
    CHECK(s.devices_in("rB", 501) == std::vector<std::string>{"d1"});
    CHECK(s.devices_in("rA", 499) == std::vector<std::string>{"d1"});

    s.add_container(box("d2", Kind::Desk, "rB"), 0);
    CHECK_THROWS_AS(s.reparent("rA", "d2", 600), KindError);
    CHECK_THROWS_AS(s.reparent("f", "rA", 600), CycleError);
    CHECK_THROWS_AS(s.reparent("rA", "rA", 600), CycleError);
    CHECK_THROWS_AS(s.reparent("rA", "ghost", 600), UnknownContainer);
    CHECK_THROWS_AS(s.add_container(box("x", Kind::Floor, "d2"), 0), KindError);
    CHECK_THROWS_AS(s.add_container(box("d2", Kind::Desk, "rB"), 0), ValidationError);

    // A back-dated move that would close a loop with a later move.
    MetadataStore t;
    t.add_container(box("b", Kind::Building), 0);
    t.add_container(box("f1", Kind::Floor, "b"), 0);
    t.add_container(box("f2", Kind::Floor, "b"), 0);
    t.add_container(box("r", Kind::Room, "f1"), 0);
    t.reparent("r", "f2", 300);
    CHECK(t.parent_asof("r", 299) == "f1");
    CHECK(t.parent_asof("r", 300) == "f2");
}

TEST_CASE("journals survive reopen") {
    const auto dir = fs::temp_directory_path() / ("sensert-meta-" + std::to_string(::getpid()));
    fs::remove_all(dir);
    {
        auto s = MetadataStore::open(dir);
        s.add_container(box("b", Kind::Building), 0);
        s.add_container(box("r1", Kind::Room, "b"), 0);
        s.add_container(box("r2", Kind::Room, "b"), 0);
        s.add_container(box("d", Kind::Desk, "r1"), 10);
        s.upsert_device({"x", 100, loc("d")});
        s.upsert_device({"x", 200, loc("r2", 5, 6)});
        s.reparent("d", "r2", 150);
    }
    auto s = MetadataStore::open(dir);
    CHECK(s.history("x").size() == 2);
    CHECK(s.get_asof("x", 120)->location().container_id == "d");
    CHECK(s.devices_in("r1", 140) == std::vector<std::string>{"x"});
    CHECK(s.devices_in("r1", 160).empty());
    CHECK(s.container("d")->kind == Kind::Desk);
    std::ifstream in(dir / "devices.jsonl");
    std::string line;
    std::getline(in, line);
    const auto j = json::parse(line);
    CHECK(j["id"] == "x");
    CHECK(j["ts"] == 100);
    CHECK(j["doc"]["location"]["container_id"] == "d");
    fs::remove_all(dir);
}

TEST_CASE("import") {
    MetadataStore s;
    const auto doc = json::parse(R"({
      "containers": [
        {"id": "bldg", "kind": "Building", "name": "Lab"},
        {"id": "fl1", "kind": "Floor", "parent": "bldg"},
        {"id": "room-101", "kind": "Room", "parent": "fl1", "geometry": [[0,0],[5,0],[5,4],[0,4]]}
      ],
      "devices": [
        {"device_id": "co2-1", "ts": "2020-06-01T08:00:00Z",
         "doc": {"model": "ERS CO2", "location": {"x_m": 1.5, "y_m": 2.0, "floor": 1, "h_m": 1.2, "container_id": "room-101"}}}
      ]})");
    CHECK(import_json(s, doc) == std::pair<std::size_t, std::size_t>{3, 1});
    CHECK(s.get_asof("co2-1", 1'590'998'400'000)->doc["model"] == "ERS CO2");
    CHECK(s.container("room-101")->geometry.size() == 4);
}

TEST_CASE("randomized histories agree with scan oracles") {
    std::mt19937 rng(2024);
    std::size_t queries = 0;
    for (int round = 0; round < 10000; ++round) {
        MetadataStore s;
        testing::MetaOracle o;
        s.add_container(box("b", Kind::Building), 0);
        o.edges.push_back({"b", 0, std::nullopt});
        std::vector<std::string> floors{"f0", "f1"}, rooms{"r0", "r1", "r2"}, desks{"d0", "d1", "d2"};
        for (const auto& f : floors) s.add_container(box(f, Kind::Floor, "b"), 0), o.edges.push_back({f, 0, "b"});
        for (const auto& r : rooms) {
            const auto& f = floors[rng() % floors.size()];
            s.add_container(box(r, Kind::Room, f), 0);
            o.edges.push_back({r, 0, f});
        }
        for (const auto& d : desks) {
            const auto& r = rooms[rng() % rooms.size()];
            s.add_container(box(d, Kind::Desk, r), 0);
            o.edges.push_back({d, 0, r});
        }
        const std::vector<std::string> all{"b", "f0", "f1", "r0", "r1", "r2", "d0", "d1", "d2"};
        const int ops = 3 + rng() % 10;
        std::set<std::pair<std::string, EpochMs>> used, used_edges;
        for (int i = 0; i < ops; ++i) {
            const EpochMs ts = 1 + rng() % 1000;
            if (rng() % 4 == 0) {
                const bool desk = rng() % 2;
                const auto& id = desk ? desks[rng() % 3] : rooms[rng() % 3];
                const auto& p = desk ? rooms[rng() % 3] : floors[rng() % 2];
                if (!used_edges.insert({id, ts}).second) continue;
                // Pre-move answers must not change.
                std::vector<std::vector<std::string>> before;
                for (const auto& c : all) before.push_back(s.devices_in(c, ts - 1));
                s.reparent(id, p, ts);
                o.edges.push_back({id, ts, p});
                for (std::size_t k = 0; k < all.size(); ++k) CHECK(s.devices_in(all[k], ts - 1) == before[k]);
            } else {
                const std::string dev = "dev" + std::to_string(rng() % 4);
                if (!used.insert({dev, ts}).second) continue;
                const auto& c = all[rng() % all.size()];
                s.upsert_device({dev, ts, loc(c)});
                o.recs.push_back({dev, ts, c});
            }
        }
        for (int q = 0; q < 4; ++q) {
            const EpochMs t = rng() % 1100;
            const std::string dev = "dev" + std::to_string(rng() % 5);
            const auto got = s.get_asof(dev, t);
            const auto want = o.asof(dev, t);
            REQUIRE(got.has_value() == want.has_value());
            if (got) {
                CHECK(got->ts == want->ts);
                CHECK(got->location().container_id == want->container);
            }
            const auto& c = all[rng() % all.size()];
            CHECK(s.devices_in(c, t) == o.in(c, t));
            queries += 2;
        }
    }
    CHECK(queries == 80000);
}
