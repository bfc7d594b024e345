// SPDX-License-Identifier: Apache-2.0
#include "sensert/metadata.hpp"

#include <algorithm>
#include <mutex>
#include <set>

namespace sensert::meta {

namespace fs = std::filesystem;
using nlohmann::json;

std::string to_string(Kind k) {
    switch (k) {
        case Kind::Building: return "Building";
        case Kind::Floor: return "Floor";
        case Kind::Room: return "Room";
        case Kind::Desk: return "Desk";
    }
    return "?";
}

Kind parse_kind(std::string_view s) {
    for (Kind k : {Kind::Building, Kind::Floor, Kind::Room, Kind::Desk}) {
        const auto name = to_string(k);
        if (s.size() == name.size() &&
            std::equal(s.begin(), s.end(), name.begin(), [](char a, char b) { return std::tolower(a) == std::tolower(b); }))
            return k;
    }
    throw ValidationError("unknown container kind '" + std::string(s) + "'");
}

Location Location::from_json(const json& j) {
    if (!j.is_object()) throw ValidationError("location must be an object");
    Location l;
    try {
        l.x_m = j.at("x_m").get<double>();
        l.y_m = j.at("y_m").get<double>();
        l.floor = j.at("floor").get<int>();
        l.h_m = j.value("h_m", 0.0);
        l.container_id = j.at("container_id").get<std::string>();
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad location: ") + e.what());
    }
    if (l.x_m < 0 || l.y_m < 0) throw ValidationError("location x_m and y_m must be non-negative");
    if (l.container_id.empty()) throw ValidationError("location needs a container_id");
    return l;
}

json Location::to_json() const {
    return {{"x_m", x_m}, {"y_m", y_m}, {"floor", floor}, {"h_m", h_m}, {"container_id", container_id}};
}

json SpatialContainer::doc() const {
    json d{{"kind", meta::to_string(kind)}, {"name", name}};
    d["parent"] = parent_id ? json(*parent_id) : json(nullptr);
    if (!geometry.empty()) {
        json g = json::array();
        for (const auto& [x, y] : geometry) g.push_back({x, y});
        d["geometry"] = g;
    }
    return d;
}

SpatialContainer SpatialContainer::from_doc(std::string id, const json& doc) {
    SpatialContainer c;
    c.container_id = std::move(id);
    try {
        c.kind = parse_kind(doc.at("kind").get<std::string>());
        c.name = doc.value("name", c.container_id);
        if (auto p = doc.find("parent"); p != doc.end() && !p->is_null()) c.parent_id = p->get<std::string>();
        if (auto g = doc.find("geometry"); g != doc.end())
            for (const auto& pt : *g) c.geometry.emplace_back(pt.at(0).get<double>(), pt.at(1).get<double>());
    } catch (const json::exception& e) {
        throw ValidationError(std::string("bad container document: ") + e.what());
    }
    return c;
}

// ---------------------------------------------------------------- store

MetadataStore::MetadataStore(MetadataStore&& o) noexcept
    : containers_(std::move(o.containers_)),
      devices_(std::move(o.devices_)),
      dir_(std::move(o.dir_)),
      containers_journal_(std::move(o.containers_journal_)),
      devices_journal_(std::move(o.devices_journal_)) {}

MetadataStore& MetadataStore::operator=(MetadataStore&& o) noexcept {
    containers_ = std::move(o.containers_);
    devices_ = std::move(o.devices_);
    dir_ = std::move(o.dir_);
    containers_journal_ = std::move(o.containers_journal_);
    devices_journal_ = std::move(o.devices_journal_);
    return *this;
}

MetadataStore MetadataStore::open(const fs::path& dir) {
    fs::create_directories(dir);
    MetadataStore s;
    auto replay = [](const fs::path& p, auto&& each) {
        std::ifstream in(p);
        std::size_t n = 0;
        for (std::string line; std::getline(in, line);) {
            ++n;
            if (line.empty()) continue;
            auto j = json::parse(line, nullptr, false);
            if (j.is_discarded()) throw ValidationError(p.string() + ":" + std::to_string(n) + ": not JSON");
            each(j.at("id").get<std::string>(), j.at("ts").get<EpochMs>(), j.at("doc"));
        }
    };
    replay(dir / "containers.jsonl", [&](const std::string& id, EpochMs ts, const json& doc) {
        auto c = SpatialContainer::from_doc(id, doc);
        if (s.containers_.count(id)) s.reparent_locked(id, c.parent_id.value_or(""), ts, false);
        else s.add_container_locked(c, ts, false);
    });
    replay(dir / "devices.jsonl", [&](const std::string& id, EpochMs ts, const json& doc) {
        s.upsert_locked(DeviceMetadataRecord{id, ts, doc}, false);
    });
    s.dir_ = dir;
    s.containers_journal_.open(dir / "containers.jsonl", std::ios::app);
    s.devices_journal_.open(dir / "devices.jsonl", std::ios::app);
    return s;
}

void MetadataStore::append(std::ofstream& out, const std::string& id, EpochMs ts, const json& doc) {
    if (!dir_) return;
    out << json{{"id", id}, {"ts", ts}, {"doc", doc}}.dump() << '\n';
    out.flush();
    if (!out) throw std::runtime_error("metadata journal write failed");
}

void MetadataStore::add_container(const SpatialContainer& c, EpochMs ts) {
    std::unique_lock lk(mutex_);
    add_container_locked(c, ts, true);
}

void MetadataStore::add_container_locked(const SpatialContainer& c, EpochMs ts, bool journal) {
    if (c.container_id.empty()) throw ValidationError("container id must be non-empty");
    if (containers_.count(c.container_id)) throw ValidationError("container '" + c.container_id + "' exists");
    if (c.parent_id) {
        auto p = containers_.find(*c.parent_id);
        if (p == containers_.end()) throw ValidationError("unknown parent '" + *c.parent_id + "'");
        if (p->second.info.kind >= c.kind)
            throw KindError(to_string(c.kind) + " cannot sit inside " + to_string(p->second.info.kind));
    }
    ContainerEntry e;
    e.info = c;
    e.created = ts;
    e.edges.emplace_back(ts, c.parent_id);
    containers_.emplace(c.container_id, std::move(e));
    if (journal) append(containers_journal_, c.container_id, ts, c.doc());
}

void MetadataStore::upsert_device(DeviceMetadataRecord rec) {
    std::unique_lock lk(mutex_);
    upsert_locked(std::move(rec), true);
}

void MetadataStore::upsert_locked(DeviceMetadataRecord rec, bool journal) {
    if (rec.device_id.empty()) throw ValidationError("device id must be non-empty");
    if (!rec.doc.is_object()) throw ValidationError("metadata document must be an object");
    if (!rec.doc.contains("location")) throw ValidationError("metadata document needs a location");
    const auto loc = Location::from_json(rec.doc["location"]);
    if (!containers_.count(loc.container_id))
        throw ValidationError("unknown container '" + loc.container_id + "'");
    if (auto t = rec.doc.find("ts"); t == rec.doc.end()) rec.doc["ts"] = rec.ts;
    else if (!t->is_number_integer() || t->get<EpochMs>() != rec.ts)
        throw ValidationError("document ts disagrees with record ts");
    auto& hist = devices_[rec.device_id];
    auto pos = std::lower_bound(hist.begin(), hist.end(), rec.ts,
                                [](const DeviceMetadataRecord& r, EpochMs t) { return r.ts < t; });
    if (pos != hist.end() && pos->ts == rec.ts)
        throw ValidationError("device '" + rec.device_id + "' already has a record at " + std::to_string(rec.ts));
    if (journal) append(devices_journal_, rec.device_id, rec.ts, rec.doc);
    hist.insert(pos, std::move(rec));
}

std::optional<std::string> MetadataStore::parent_locked(const std::string& id, EpochMs t) const {
    auto it = containers_.find(id);
    if (it == containers_.end()) return std::nullopt;
    const auto& edges = it->second.edges;
    auto pos = std::upper_bound(edges.begin(), edges.end(), t,
                                [](EpochMs v, const auto& e) { return v < e.first; });
    if (pos == edges.begin()) return std::nullopt;
    return std::prev(pos)->second;
}

bool MetadataStore::reaches_locked(std::string from, const std::string& target, EpochMs t,
                                   const std::string& moved, const std::string& new_parent, EpochMs since) const {
    for (std::size_t hops = 0; hops <= containers_.size(); ++hops) {
        if (from == target) return true;
        std::optional<std::string> up = (from == moved && t >= since) ? std::optional(new_parent) : parent_locked(from, t);
        if (!up) return false;
        from = *up;
    }
    return true;
}

void MetadataStore::reparent(const std::string& id, const std::string& parent, EpochMs t) {
    std::unique_lock lk(mutex_);
    reparent_locked(id, parent, t, true);
}

void MetadataStore::reparent_locked(const std::string& id, const std::string& parent, EpochMs t, bool journal) {
    auto it = containers_.find(id);
    if (it == containers_.end()) throw UnknownContainer("unknown container '" + id + "'");
    auto pit = containers_.find(parent);
    if (pit == containers_.end()) throw UnknownContainer("unknown parent '" + parent + "'");
    if (t < it->second.created) throw ValidationError("reparent before the container existed");

    // A cycle may appear at t or at any later edge change.
    std::set<EpochMs> checkpoints{t};
    for (const auto& [cid, c] : containers_)
        for (const auto& [ts, p] : c.edges)
            if (ts > t) checkpoints.insert(ts);
    for (EpochMs at : checkpoints) {
        // Edges of `id` after t still apply after their own time.
        const auto& edges = it->second.edges;
        const bool overridden = std::any_of(edges.begin(), edges.end(), [&](const auto& e) { return e.first > t && e.first <= at; });
        if (overridden) continue;
        if (reaches_locked(parent, id, at, id, parent, t))
            throw CycleError("moving '" + id + "' under '" + parent + "' creates a cycle");
    }
    if (pit->second.info.kind >= it->second.info.kind)
        throw KindError(to_string(it->second.info.kind) + " cannot sit inside " + to_string(pit->second.info.kind));

    auto& edges = it->second.edges;
    auto pos = std::lower_bound(edges.begin(), edges.end(), t, [](const auto& e, EpochMs v) { return e.first < v; });
    if (pos != edges.end() && pos->first == t)
        throw ValidationError("container '" + id + "' already changed parent at " + std::to_string(t));
    edges.insert(pos, {t, parent});
    if (journal) {
        auto c = it->second.info;
        c.parent_id = parent;
        append(containers_journal_, id, t, c.doc());
    }
}

std::optional<DeviceMetadataRecord> MetadataStore::get_asof(const std::string& device_id, EpochMs t) const {
    std::shared_lock lk(mutex_);
    auto it = devices_.find(device_id);
    if (it == devices_.end()) return std::nullopt;
    const auto& hist = it->second;
    auto pos = std::upper_bound(hist.begin(), hist.end(), t,
                                [](EpochMs v, const DeviceMetadataRecord& r) { return v < r.ts; });
    if (pos == hist.begin()) return std::nullopt;
    return *std::prev(pos);
}

std::vector<DeviceMetadataRecord> MetadataStore::history(const std::string& device_id) const {
    std::shared_lock lk(mutex_);
    auto it = devices_.find(device_id);
    return it == devices_.end() ? std::vector<DeviceMetadataRecord>{} : it->second;
}

std::vector<std::string> MetadataStore::devices_in(const std::string& container_id, EpochMs t) const {
    std::shared_lock lk(mutex_);
    if (!containers_.count(container_id)) throw UnknownContainer("unknown container '" + container_id + "'");
    std::vector<std::string> out;
    for (const auto& [dev, hist] : devices_) {
        auto pos = std::upper_bound(hist.begin(), hist.end(), t,
                                    [](EpochMs v, const DeviceMetadataRecord& r) { return v < r.ts; });
        if (pos == hist.begin()) continue;
        std::string at = std::prev(pos)->doc["location"]["container_id"].get<std::string>();
        for (std::size_t hops = 0; hops <= containers_.size(); ++hops) {
            if (at == container_id) {
                out.push_back(dev);
                break;
            }
            auto up = parent_locked(at, t);
            if (!up) break;
            at = *up;
        }
    }
    return out;
}

std::optional<std::string> MetadataStore::parent_asof(const std::string& id, EpochMs t) const {
    std::shared_lock lk(mutex_);
    return parent_locked(id, t);
}

bool MetadataStore::exists_asof(const std::string& id, EpochMs t) const {
    std::shared_lock lk(mutex_);
    auto it = containers_.find(id);
    return it != containers_.end() && it->second.created <= t;
}

std::vector<std::string> MetadataStore::device_ids() const {
    std::shared_lock lk(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, h] : devices_) out.push_back(id);
    return out;
}

std::vector<std::string> MetadataStore::container_ids() const {
    std::shared_lock lk(mutex_);
    std::vector<std::string> out;
    for (const auto& [id, c] : containers_) out.push_back(id);
    return out;
}

std::optional<SpatialContainer> MetadataStore::container(const std::string& id) const {
    std::shared_lock lk(mutex_);
    auto it = containers_.find(id);
    if (it == containers_.end()) return std::nullopt;
    return it->second.info;
}

std::size_t MetadataStore::record_count() const {
    std::shared_lock lk(mutex_);
    std::size_t n = 0;
    for (const auto& [id, h] : devices_) n += h.size();
    return n;
}

namespace {

EpochMs parse_ts(const json& j) {
    if (j.is_number_integer()) return j.get<EpochMs>();
    if (j.is_string()) {
        if (auto t = parse_iso8601(j.get<std::string>())) return *t;
    }
    throw ValidationError("bad timestamp " + j.dump());
}

}  // namespace

std::pair<std::size_t, std::size_t> import_json(MetadataStore& store, const json& doc) {
    std::size_t nc = 0, nd = 0;
    if (auto cs = doc.find("containers"); cs != doc.end()) {
        for (const auto& c : *cs) {
            const std::string id = c.at("id").get<std::string>();
            const EpochMs ts = c.contains("ts") ? parse_ts(c["ts"]) : 0;
            store.add_container(SpatialContainer::from_doc(id, c), ts);
            ++nc;
        }
    }
    if (auto ds = doc.find("devices"); ds != doc.end()) {
        for (const auto& d : *ds) {
            const std::string id = d.contains("device_id") ? d["device_id"].get<std::string>() : d.at("id").get<std::string>();
            const EpochMs ts = parse_ts(d.at("ts"));
            json body = d.at("doc");
            if (body.is_object() && body.contains("ts")) body["ts"] = parse_ts(body["ts"]);
            store.upsert_device(DeviceMetadataRecord{id, ts, std::move(body)});
            ++nd;
        }
    }
    return {nc, nd};
}

}  // namespace sensert::meta
