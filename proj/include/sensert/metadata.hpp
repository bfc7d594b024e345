// SPDX-License-Identifier: Apache-2.0
//
// Spatio-temporal metadata: a hierarchy of spatial containers and timestamped
// per-device JSON documents, all append-only and queryable as of any time.
#pragma once

#include "sensert/clock.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <shared_mutex>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace sensert::meta {

class ValidationError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};
class CycleError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};
class KindError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};
class UnknownContainer : public std::out_of_range {
public:
    using std::out_of_range::out_of_range;
};

/// Coarsest first.
enum class Kind { Building = 0, Floor = 1, Room = 2, Desk = 3 };

std::string to_string(Kind k);
Kind parse_kind(std::string_view s);

struct Location {
    double x_m = 0;
    double y_m = 0;
    int floor = 0;
    double h_m = 0;
    std::string container_id;

    /// Throws ValidationError.
    static Location from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

struct DeviceMetadataRecord {
    std::string device_id;
    EpochMs ts = 0;
    nlohmann::json doc;

    Location location() const { return Location::from_json(doc.at("location")); }
};

struct SpatialContainer {
    std::string container_id;
    std::optional<std::string> parent_id;
    Kind kind = Kind::Building;
    std::string name;
    std::vector<std::pair<double, double>> geometry;

    nlohmann::json doc() const;
    static SpatialContainer from_doc(std::string id, const nlohmann::json& doc);
};

/// In-memory indexes over two journals (containers.jsonl, devices.jsonl).
/// Readers share a lock, writers are serialized.
class MetadataStore {
public:
    /// Volatile store.
    MetadataStore() = default;
    /// Replays the journals in `dir` (created if missing) and appends to them.
    static MetadataStore open(const std::filesystem::path& dir);

    MetadataStore(MetadataStore&&) noexcept;
    MetadataStore& operator=(MetadataStore&&) noexcept;

    /// New container effective from `ts`. Throws ValidationError, KindError.
    void add_container(const SpatialContainer& c, EpochMs ts);
    /// Throws ValidationError (missing/invalid location, duplicate ts,
    /// unknown container).
    void upsert_device(DeviceMetadataRecord rec);
    /// Throws UnknownContainer, CycleError, KindError, ValidationError.
    void reparent(const std::string& container_id, const std::string& new_parent_id, EpochMs t);

    std::optional<DeviceMetadataRecord> get_asof(const std::string& device_id, EpochMs t) const;
    std::vector<DeviceMetadataRecord> history(const std::string& device_id) const;
    /// Devices located in the container or any descendant as of `t`, sorted.
    /// Throws UnknownContainer.
    std::vector<std::string> devices_in(const std::string& container_id, EpochMs t) const;
    /// nullopt for a root, or for a container not yet created at `t`.
    std::optional<std::string> parent_asof(const std::string& container_id, EpochMs t) const;
    bool exists_asof(const std::string& container_id, EpochMs t) const;

    std::vector<std::string> device_ids() const;
    std::vector<std::string> container_ids() const;
    std::optional<SpatialContainer> container(const std::string& id) const;
    std::size_t record_count() const;

private:
    struct ContainerEntry {
        SpatialContainer info;
        EpochMs created = 0;
        /// Sorted by ts; the first edge is the creation parent.
        std::vector<std::pair<EpochMs, std::optional<std::string>>> edges;
    };

    void add_container_locked(const SpatialContainer& c, EpochMs ts, bool journal);
    void upsert_locked(DeviceMetadataRecord rec, bool journal);
    void reparent_locked(const std::string& id, const std::string& parent, EpochMs t, bool journal);
    std::optional<std::string> parent_locked(const std::string& id, EpochMs t) const;
    bool reaches_locked(std::string from, const std::string& target, EpochMs t,
                        const std::string& moved, const std::string& new_parent, EpochMs since) const;
    void append(std::ofstream& out, const std::string& id, EpochMs ts, const nlohmann::json& doc);

    mutable std::shared_mutex mutex_;
    std::map<std::string, ContainerEntry> containers_;
    std::map<std::string, std::vector<DeviceMetadataRecord>> devices_;
    std::optional<std::filesystem::path> dir_;
    std::ofstream containers_journal_;
    std::ofstream devices_journal_;
};

/// Loads {"containers":[...],"devices":[...]} into the store. Timestamps may
/// be epoch ms or ISO-8601. Returns (containers, device records) imported.
std::pair<std::size_t, std::size_t> import_json(MetadataStore& store, const nlohmann::json& doc);

}  // namespace sensert::meta
