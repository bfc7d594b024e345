// SPDX-License-Identifier: Apache-2.0
//
// Simulated sensor fleet: device profiles emitting vendor-shaped payloads over
// the transport each family uses in the field.
#pragma once

#include "sensert/clock.hpp"
#include "sensert/decoders.hpp"
#include "sensert/net.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <random>
#include <string>
#include <vector>

namespace sensert::sim {

enum class Family { SmartPlug, LoraCO2, LoraTemp, LoraOccupancy, ZigbeeMotion, ZigbeeDoor, DeepDish, CoffeeNode };
enum class Transport { WifiMqtt, TtnMqtt, DeconzWs };

std::string to_string(Family f);
std::string to_string(Transport t);
/// Accepts the enum spelling ("LoraCO2") case-insensitively.
Family parse_family(std::string_view s);
Transport parse_transport(std::string_view s);
Transport default_transport(Family f);
/// Family name as it appears in NormalizedMessage.family after decoding.
std::string decoded_family(Family f);

struct DeviceProfile {
    std::string device_id;
    Family family = Family::SmartPlug;
    double period_s = 1.0;
    Transport transport = Transport::WifiMqtt;
    double jitter_s = 0.0;
    double extra_delay_s = 0.0;

    /// Fills transport and DeepDish delay defaults.
    static DeviceProfile make(std::string id, Family f, double period_s = 1.0);
    static DeviceProfile from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
    void validate() const;
};

std::vector<DeviceProfile> fleet_from_json(const nlohmann::json& j);
std::vector<DeviceProfile> load_fleet(const std::filesystem::path& path);

/// N devices cycling through every family except CoffeeNode.
std::vector<DeviceProfile> make_fleet(std::size_t n, double period_s = 1.0, double jitter_s = 0.0);

struct ScenarioStep {
    double t_offset_s = 0;
    std::string device_id;
    nlohmann::json fields;
};

struct GroundTruthEvent {
    double t_offset_s = 0;
    std::string event_type;
};

struct ScenarioScript {
    std::string name;
    std::vector<DeviceProfile> devices;
    std::vector<ScenarioStep> steps;
    std::vector<GroundTruthEvent> ground_truth;
    double duration_s = 0;
    /// Simulated seconds per wall-clock second when run live.
    double time_scale = 1.0;
    /// Simulated clock origin.
    EpochMs sim_epoch = 0;

    /// Throws std::invalid_argument when offsets decrease.
    void validate() const;
    std::vector<std::string> ground_truth_types() const;
};

inline constexpr double kCoffeeSamplePeriod = 5.0;
inline constexpr EpochMs kScenarioEpoch = 1'590'998'400'000;  // 2020-06-01T08:00:00Z

/// Grind, brew, four cups, removal, empty pot back.
ScenarioScript coffee_scenario(std::string node_id = "coffee-1");
/// CO2 readings 600, 1100, 1250, 1150, 600 once a minute.
ScenarioScript co2_excursion_scenario(std::string device_id = "co2-excursion");
ScenarioScript scenario_by_name(std::string_view name);

/// Simulation-side coffee pot.
struct CoffeePotState {
    bool pot_present = true;
    double coffee_kg = 0.0;
    double grinder_w = 0.0;
    double brewer_w = 0.0;
    double noise_sigma = 0.01;
};

/// Per-device generator. Coffee overrides are sticky state changes; for every
/// other family an override is merged once into the next payload.
class DeviceSim {
public:
    DeviceSim(DeviceProfile profile, std::uint64_t seed);

    /// Reading taken at simulated time `ts`; `sim_t0` is the origin stamp.
    RawSensorMessage emit(EpochMs ts, EpochMs sim_t0);
    void apply(const nlohmann::json& fields);
    bool pending_override() const { return pending_.has_value() || coffee_dirty_; }

    const DeviceProfile& profile() const { return profile_; }
    const CoffeePotState& pot() const { return pot_; }

private:
    nlohmann::json payload(EpochMs ts);

    DeviceProfile profile_;
    std::mt19937_64 rng_;
    CoffeePotState pot_;
    bool coffee_dirty_ = false;
    std::optional<nlohmann::json> pending_;
    double level_ = 0;
    std::int64_t counter_ = 0;
};

/// Stateless convenience wrapper: one reading from a fresh generator.
RawSensorMessage emit_reading(const DeviceProfile& p, EpochMs t);

struct Emission {
    std::string device_id;
    Family family = Family::SmartPlug;
    EpochMs sim_t0 = 0;
    EpochMs ts = 0;
    std::string topic;
    std::string payload;
    bool overridden = false;
    bool sent = true;
};

/// Serialized collector of everything the fleet sent.
class EmissionLog {
public:
    void append(Emission e);
    std::vector<Emission> snapshot() const;
    std::size_t size() const;

private:
    mutable std::mutex mutex_;
    std::vector<Emission> entries_;
};

/// Deterministic emission order for a fleet plus scenario, in simulated ms
/// from the start.
class FleetSchedule {
public:
    FleetSchedule(std::vector<DeviceProfile> profiles, std::optional<ScenarioScript> scenario, double duration_s,
                  std::uint64_t seed, bool stagger);

    struct Due {
        EpochMs offset_ms;  // reading time
        EpochMs send_offset_ms;  // after extra_delay
        std::size_t device;
    };
    std::optional<Due> next();
    /// Applies scenario steps with offset <= t.
    void apply_steps_until(EpochMs offset_ms);
    DeviceSim& device(std::size_t i) { return sims_[i]; }
    std::size_t size() const { return sims_.size(); }

private:
    struct Slot {
        EpochMs offset_ms;
        std::size_t device;
        bool operator>(const Slot& o) const {
            return offset_ms != o.offset_ms ? offset_ms > o.offset_ms : device > o.device;
        }
    };
    EpochMs scheduled(std::size_t device, std::int64_t k);

    std::vector<DeviceProfile> profiles_;
    std::vector<DeviceSim> sims_;
    std::optional<ScenarioScript> scenario_;
    std::size_t next_step_ = 0;
    EpochMs end_ms_;
    std::vector<EpochMs> phase_;
    std::vector<std::int64_t> k_;
    std::mt19937_64 rng_;
    std::vector<Slot> heap_;
};

/// Emissions without any transport, in schedule order.
std::vector<Emission> simulate_offline(const std::vector<DeviceProfile>& profiles,
                                       const std::optional<ScenarioScript>& scenario, double duration_s,
                                       std::uint64_t seed = 1, EpochMs sim_epoch = kScenarioEpoch,
                                       bool stagger = true);

// ---------------------------------------------------------------- transports

struct BrokerAddresses {
    net::Endpoint local;
    net::Endpoint ttn;
    net::Endpoint zigbee;

    /// "local=host:port,ttn=host:port,zigbee=host:port"
    static BrokerAddresses parse(std::string_view text);
};

class DeconzEmulator;
class DeconzTranslator;

/// Sends messages over the transport named in each profile. Undeliverable
/// messages wait in a per-device buffer of 100, oldest dropped first.
class FleetTransports {
public:
    static constexpr std::size_t kDeviceBuffer = 100;

    FleetTransports(BrokerAddresses brokers, const std::vector<DeviceProfile>& profiles);
    ~FleetTransports();

    void start();
    void stop();
    bool wait_ready(std::chrono::milliseconds timeout);

    /// Returns true when sent now, false when buffered.
    bool send(const DeviceProfile& p, const RawSensorMessage& m);
    /// Retries buffered messages.
    void flush();

    std::uint64_t drops() const { return drops_.load(); }
    std::uint64_t buffered() const;
    net::Endpoint deconz_endpoint() const;

private:
    class Impl;
    std::unique_ptr<Impl> impl_;
    std::atomic<std::uint64_t> drops_{0};
};

struct RunOptions {
    std::uint64_t seed = 1;
    /// Wall-clock origin maps to this simulated time; 0 means "now".
    EpochMs sim_epoch = 0;
    double time_scale = 1.0;
    bool stagger = true;
    std::atomic<bool>* cancel = nullptr;
};

/// Emits in real time through `transports` and returns the emission log.
std::vector<Emission> run_fleet(const std::vector<DeviceProfile>& profiles,
                                const std::optional<ScenarioScript>& scenario, double duration_s,
                                FleetTransports& transports, const RunOptions& options = {});

}  // namespace sensert::sim
