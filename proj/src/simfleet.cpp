// SPDX-License-Identifier: Apache-2.0
#include "sensert/simfleet.hpp"

#include "sensert/deconz.hpp"
#include "sensert/mqtt_client.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <map>
#include <queue>
#include <thread>

namespace sensert::sim {

using nlohmann::json;
using namespace std::chrono_literals;

namespace {

struct FamilyInfo {
    Family family;
    const char* name;
    Transport transport;
    const char* decoded;
};

constexpr FamilyInfo kFamilies[] = {
    {Family::SmartPlug, "SmartPlug", Transport::WifiMqtt, "smartplug"},
    {Family::LoraCO2, "LoraCO2", Transport::TtnMqtt, "co2"},
    {Family::LoraTemp, "LoraTemp", Transport::TtnMqtt, "temp"},
    {Family::LoraOccupancy, "LoraOccupancy", Transport::TtnMqtt, "occupancy"},
    {Family::ZigbeeMotion, "ZigbeeMotion", Transport::DeconzWs, "zigbee"},
    {Family::ZigbeeDoor, "ZigbeeDoor", Transport::DeconzWs, "zigbee"},
    {Family::DeepDish, "DeepDish", Transport::WifiMqtt, "deepdish"},
    {Family::CoffeeNode, "CoffeeNode", Transport::WifiMqtt, "coffee"},
};

const FamilyInfo& info(Family f) {
    for (const auto& i : kFamilies)
        if (i.family == f) return i;
    throw std::logic_error("unknown family");
}

bool iequals(std::string_view a, std::string_view b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin(), [](char x, char y) {
               return std::tolower(static_cast<unsigned char>(x)) == std::tolower(static_cast<unsigned char>(y));
           });
}

std::uint64_t fnv1a(std::string_view s) {
    std::uint64_t h = 1469598103934665603ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ULL;
    }
    return h;
}

double round_to(double v, int places) {
    const double f = std::pow(10.0, places);
    return std::round(v * f) / f;
}

EpochMs to_ms(double seconds) { return static_cast<EpochMs>(std::llround(seconds * 1000.0)); }

}  // namespace

std::string to_string(Family f) { return info(f).name; }

std::string to_string(Transport t) {
    switch (t) {
        case Transport::WifiMqtt: return "WifiMqtt";
        case Transport::TtnMqtt: return "TtnMqtt";
        case Transport::DeconzWs: return "DeconzWs";
    }
    return "?";
}

Family parse_family(std::string_view s) {
    for (const auto& i : kFamilies)
        if (iequals(s, i.name)) return i.family;
    throw std::invalid_argument("unknown device family '" + std::string(s) + "'");
}

Transport parse_transport(std::string_view s) {
    for (Transport t : {Transport::WifiMqtt, Transport::TtnMqtt, Transport::DeconzWs})
        if (iequals(s, to_string(t))) return t;
    throw std::invalid_argument("unknown transport '" + std::string(s) + "'");
}

Transport default_transport(Family f) { return info(f).transport; }
std::string decoded_family(Family f) { return info(f).decoded; }

// ---------------------------------------------------------------- profiles

DeviceProfile DeviceProfile::make(std::string id, Family f, double period_s) {
    DeviceProfile p;
    p.device_id = std::move(id);
    p.family = f;
    p.period_s = period_s;
    p.transport = default_transport(f);
    if (f == Family::DeepDish) p.extra_delay_s = 0.2;
    return p;
}

DeviceProfile DeviceProfile::from_json(const json& j) {
    DeviceProfile p = make(j.at("device_id").get<std::string>(), parse_family(j.at("family").get<std::string>()),
                           j.value("period_s", 1.0));
    if (j.contains("transport")) p.transport = parse_transport(j["transport"].get<std::string>());
    p.jitter_s = j.value("jitter_s", 0.0);
    p.extra_delay_s = j.value("extra_delay_s", p.extra_delay_s);
    p.validate();
    return p;
}

json DeviceProfile::to_json() const {
    return {{"device_id", device_id},       {"family", to_string(family)}, {"period_s", period_s},
            {"transport", to_string(transport)}, {"jitter_s", jitter_s},  {"extra_delay_s", extra_delay_s}};
}

void DeviceProfile::validate() const {
    if (device_id.empty() || device_id.find_first_of("/+#") != std::string::npos)
        throw std::invalid_argument("invalid device id '" + device_id + "'");
    if (!(period_s > 0)) throw std::invalid_argument(device_id + ": period_s must be positive");
    if (jitter_s < 0) throw std::invalid_argument(device_id + ": jitter_s must be non-negative");
    if (extra_delay_s < 0) throw std::invalid_argument(device_id + ": extra_delay_s must be non-negative");
}

std::vector<DeviceProfile> fleet_from_json(const json& j) {
    const json& list = j.is_object() ? j.at("devices") : j;
    std::vector<DeviceProfile> out;
    for (const auto& d : list) out.push_back(DeviceProfile::from_json(d));
    return out;
}

std::vector<DeviceProfile> load_fleet(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open fleet file " + path.string());
    return fleet_from_json(json::parse(in));
}

std::vector<DeviceProfile> make_fleet(std::size_t n, double period_s, double jitter_s) {
    static constexpr Family cycle[] = {Family::SmartPlug,    Family::LoraCO2,    Family::ZigbeeMotion,
                                       Family::DeepDish,     Family::LoraTemp,   Family::ZigbeeDoor,
                                       Family::LoraOccupancy};
    std::vector<DeviceProfile> out;
    for (std::size_t i = 0; i < n; ++i) {
        const Family f = cycle[i % std::size(cycle)];
        std::string id = decoded_family(f) + "-" + std::to_string(i);
        if (f == Family::ZigbeeDoor) id = "door-" + std::to_string(i);
        if (f == Family::ZigbeeMotion) id = "motion-" + std::to_string(i);
        auto p = DeviceProfile::make(std::move(id), f, period_s);
        p.jitter_s = jitter_s;
        out.push_back(std::move(p));
    }
    return out;
}

// ---------------------------------------------------------------- scenarios

void ScenarioScript::validate() const {
    for (std::size_t i = 1; i < steps.size(); ++i)
        if (steps[i].t_offset_s < steps[i - 1].t_offset_s)
            throw std::invalid_argument("scenario offsets must be non-decreasing");
    for (const auto& d : devices) d.validate();
}

std::vector<std::string> ScenarioScript::ground_truth_types() const {
    std::vector<std::string> out;
    for (const auto& g : ground_truth) out.push_back(g.event_type);
    return out;
}

ScenarioScript coffee_scenario(std::string node_id) {
    ScenarioScript s;
    s.name = "coffee";
    s.devices.push_back(DeviceProfile::make(node_id, Family::CoffeeNode, kCoffeeSamplePeriod));
    s.duration_s = 2400;
    s.time_scale = 500;
    s.sim_epoch = kScenarioEpoch;
    auto at = [&](double t, json fields) { s.steps.push_back({t, node_id, std::move(fields)}); };

    at(0, {{"pot_present", true}, {"coffee_kg", 0.0}, {"grinder_w", 0.0}, {"brewer_w", 0.0}});
    at(60, {{"grinder_w", 150.0}});
    at(90, {{"grinder_w", 0.0}});
    at(120, {{"brewer_w", 900.0}});
    for (int k = 0; k <= 24; ++k) at(120 + 5.0 * k, {{"coffee_kg", 2.0 * k / 24}});
    at(240, {{"brewer_w", 0.0}});
    double kg = 2.0;
    for (double t : {600.0, 900.0, 1200.0, 1500.0}) at(t, {{"coffee_kg", kg -= 0.25}});
    at(1800, {{"pot_present", false}});
    at(2100, {{"pot_present", true}, {"coffee_kg", 0.0}});

    s.ground_truth = {{65, "coffee-grinding"}, {185, "new-pot"},     {610, "pot-poured"},
                      {910, "pot-poured"},     {1210, "pot-poured"}, {1510, "pot-poured"},
                      {1810, "pot-removed"},   {2105, "pot-empty"}};
    return s;
}

ScenarioScript co2_excursion_scenario(std::string device_id) {
    ScenarioScript s;
    s.name = "co2";
    s.devices.push_back(DeviceProfile::make(device_id, Family::LoraCO2, 60));
    s.duration_s = 330;
    s.time_scale = 100;
    s.sim_epoch = kScenarioEpoch;
    auto co2 = [](int v) { return json{{"uplink_message", {{"decoded_payload", {{"co2", v}}}}}}; };
    s.steps = {{0, device_id, co2(600)},   {60, device_id, co2(1100)},  {120, device_id, co2(1250)},
               {180, device_id, co2(1150)}, {240, device_id, co2(600)}, {300, device_id, co2(600)}};
    s.ground_truth = {{60, "threshold-crossed"}, {240, "threshold-cleared"}};
    return s;
}

ScenarioScript scenario_by_name(std::string_view name) {
    if (name == "coffee") return coffee_scenario();
    if (name == "co2") return co2_excursion_scenario();
    throw std::invalid_argument("unknown scenario '" + std::string(name) + "' (coffee, co2)");
}

// ---------------------------------------------------------------- DeviceSim

DeviceSim::DeviceSim(DeviceProfile profile, std::uint64_t seed)
    : profile_(std::move(profile)), rng_(seed ^ fnv1a(profile_.device_id)) {
    std::uniform_real_distribution<double> u(0, 1);
    switch (profile_.family) {
        case Family::SmartPlug: level_ = 5 + 115 * u(rng_); break;
        case Family::LoraCO2: level_ = 550 + 100 * u(rng_); break;
        case Family::LoraTemp: level_ = 20 + 3 * u(rng_); break;
        default: level_ = 0;
    }
}

void DeviceSim::apply(const json& fields) {
    if (profile_.family == Family::CoffeeNode) {
        pot_.pot_present = fields.value("pot_present", pot_.pot_present);
        pot_.coffee_kg = std::clamp(fields.value("coffee_kg", pot_.coffee_kg), 0.0, 2.0);
        pot_.grinder_w = std::max(0.0, fields.value("grinder_w", pot_.grinder_w));
        pot_.brewer_w = std::max(0.0, fields.value("brewer_w", pot_.brewer_w));
        pot_.noise_sigma = fields.value("noise_sigma", pot_.noise_sigma);
        coffee_dirty_ = true;
        return;
    }
    if (!pending_) pending_ = json::object();
    pending_->merge_patch(fields);
}

json DeviceSim::payload(EpochMs ts) {
    std::normal_distribution<double> n01(0, 1);
    std::uniform_real_distribution<double> u(0, 1);
    const std::string& id = profile_.device_id;
    const std::string iso = format_iso8601(ts);  // 2020-06-01T10:00:00.000Z
    ++counter_;
    switch (profile_.family) {
        case Family::SmartPlug: {
            const double p = round_to(std::max(0.0, level_ + 2 * n01(rng_)), 1);
            return {{"Time", iso.substr(0, 19)},
                    {"ENERGY",
                     {{"TotalStartTime", "2020-01-01T00:00:00"},
                      {"Total", round_to(counter_ * 0.001, 3)},
                      {"Yesterday", 0.512},
                      {"Today", round_to(counter_ * 0.0005, 3)},
                      {"Power", p},
                      {"ApparentPower", round_to(p * 1.05, 1)},
                      {"ReactivePower", round_to(p * 0.3, 1)},
                      {"Factor", 0.95},
                      {"Voltage", 230},
                      {"Current", round_to(p / 230, 3)}}}};
        }
        case Family::LoraCO2:
        case Family::LoraTemp:
        case Family::LoraOccupancy: {
            json decoded;
            if (profile_.family == Family::LoraCO2) {
                level_ = std::clamp(level_ + 5 * n01(rng_), 420.0, 850.0);
                decoded = {{"co2", static_cast<int>(std::lround(level_))},
                           {"temperature", round_to(21.5 + 0.2 * n01(rng_), 1)},
                           {"humidity", static_cast<int>(std::lround(40 + 2 * n01(rng_)))}};
            } else if (profile_.family == Family::LoraTemp) {
                level_ = std::clamp(level_ + 0.05 * n01(rng_), 16.0, 28.0);
                decoded = {{"temperature", round_to(level_, 1)},
                           {"humidity", static_cast<int>(std::lround(40 + 2 * n01(rng_)))}};
            } else {
                const bool occ = u(rng_) < 0.4;
                decoded = {{"occupancy", occ ? 1 : 0}, {"motion", occ ? static_cast<int>(1 + u(rng_) * 5) : 0}};
            }
            const std::string app = decoded_family(profile_.family);
            return {{"end_device_ids",
                     {{"device_id", id}, {"application_ids", {{"application_id", app}}}, {"dev_eui", "00" + std::to_string(fnv1a(id) % 100000000000000ULL)}}},
                    {"received_at", iso},
                    {"uplink_message",
                     {{"f_port", 1}, {"f_cnt", counter_}, {"decoded_payload", decoded}, {"received_at", iso}}}};
        }
        case Family::ZigbeeMotion:
        case Family::ZigbeeDoor: {
            json state;
            if (profile_.family == Family::ZigbeeMotion) state["presence"] = u(rng_) < 0.3;
            else state["open"] = u(rng_) < 0.1;
            state["lastupdated"] = iso.substr(0, 23);
            return {{"e", "changed"}, {"r", "sensors"}, {"t", "event"}, {"id", id}, {"state", state}};
        }
        case Family::DeepDish: {
            std::poisson_distribution<int> people(3.0);
            return {{"count", people(rng_)}, {"ts", ts}};
        }
        case Family::CoffeeNode: {
            const double base = pot_.pot_present ? 0.5 + pot_.coffee_kg : 0.0;
            const double w = round_to(base + pot_.noise_sigma * n01(rng_), 3);
            return {{"weight_kg", w}, {"grinder_w", pot_.grinder_w}, {"brewer_w", pot_.brewer_w}, {"ts", ts}};
        }
    }
    return json::object();
}

RawSensorMessage DeviceSim::emit(EpochMs ts, EpochMs sim_t0) {
    json p = payload(ts);
    if (pending_) {
        p.merge_patch(*pending_);
        pending_.reset();
    }
    coffee_dirty_ = false;
    p["sim_t0"] = sim_t0;

    const std::string& id = profile_.device_id;
    std::string topic;
    switch (profile_.family) {
        case Family::SmartPlug: topic = "tele/" + id + "/SENSOR"; break;
        case Family::LoraCO2:
        case Family::LoraTemp:
        case Family::LoraOccupancy: topic = "v3/" + decoded_family(profile_.family) + "/devices/" + id + "/up"; break;
        case Family::ZigbeeMotion:
        case Family::ZigbeeDoor: topic = "zigbee/" + id + "/state"; break;
        case Family::DeepDish: topic = "deepdish/" + id + "/count"; break;
        case Family::CoffeeNode: topic = "coffee/" + id + "/reading"; break;
    }
    return RawSensorMessage{std::move(topic), p.dump(), ts};
}

RawSensorMessage emit_reading(const DeviceProfile& p, EpochMs t) {
    DeviceSim sim(p, 1);
    return sim.emit(t, t);
}

// ---------------------------------------------------------------- log

void EmissionLog::append(Emission e) {
    std::lock_guard lk(mutex_);
    entries_.push_back(std::move(e));
}

std::vector<Emission> EmissionLog::snapshot() const {
    std::lock_guard lk(mutex_);
    return entries_;
}

std::size_t EmissionLog::size() const {
    std::lock_guard lk(mutex_);
    return entries_.size();
}

// ---------------------------------------------------------------- schedule

FleetSchedule::FleetSchedule(std::vector<DeviceProfile> profiles, std::optional<ScenarioScript> scenario,
                             double duration_s, std::uint64_t seed, bool stagger)
    : profiles_(std::move(profiles)), scenario_(std::move(scenario)), end_ms_(to_ms(duration_s)), rng_(seed) {
    if (scenario_) {
        scenario_->validate();
        for (const auto& d : scenario_->devices) {
            if (std::none_of(profiles_.begin(), profiles_.end(),
                             [&](const DeviceProfile& p) { return p.device_id == d.device_id; }))
                profiles_.push_back(d);
        }
    }
    for (const auto& p : profiles_) {
        p.validate();
        sims_.emplace_back(p, seed);
        std::uniform_real_distribution<double> u(0, p.period_s);
        phase_.push_back(stagger ? to_ms(u(rng_)) : 0);
        k_.push_back(0);
    }
    for (std::size_t i = 0; i < profiles_.size(); ++i) {
        const EpochMs t = scheduled(i, 0);
        if (t < end_ms_) heap_.push_back({t, i});
    }
    std::make_heap(heap_.begin(), heap_.end(), std::greater<>{});
}

EpochMs FleetSchedule::scheduled(std::size_t d, std::int64_t k) {
    const auto& p = profiles_[d];
    EpochMs t = phase_[d] + to_ms(k * p.period_s);
    if (p.jitter_s > 0) {
        std::uniform_real_distribution<double> j(-p.jitter_s, p.jitter_s);
        t += to_ms(j(rng_));
    }
    return std::max<EpochMs>(0, t);
}

void FleetSchedule::apply_steps_until(EpochMs offset_ms) {
    if (!scenario_) return;
    while (next_step_ < scenario_->steps.size() && to_ms(scenario_->steps[next_step_].t_offset_s) <= offset_ms) {
        const auto& s = scenario_->steps[next_step_++];
        for (auto& sim : sims_)
            if (sim.profile().device_id == s.device_id) sim.apply(s.fields);
    }
}

std::optional<FleetSchedule::Due> FleetSchedule::next() {
    if (heap_.empty()) return std::nullopt;
    std::pop_heap(heap_.begin(), heap_.end(), std::greater<>{});
    const Slot s = heap_.back();
    heap_.pop_back();
    const EpochMs t = scheduled(s.device, ++k_[s.device]);
    // Emission k is due while phase + k*period < duration, jitter aside.
    if (phase_[s.device] + to_ms(k_[s.device] * profiles_[s.device].period_s) < end_ms_) {
        heap_.push_back({t, s.device});
        std::push_heap(heap_.begin(), heap_.end(), std::greater<>{});
    }
    return Due{s.offset_ms, s.offset_ms + to_ms(profiles_[s.device].extra_delay_s), s.device};
}

std::vector<Emission> simulate_offline(const std::vector<DeviceProfile>& profiles,
                                       const std::optional<ScenarioScript>& scenario, double duration_s,
                                       std::uint64_t seed, EpochMs sim_epoch, bool stagger) {
    FleetSchedule sched(profiles, scenario, duration_s, seed, stagger);
    std::vector<Emission> out;
    while (auto due = sched.next()) {
        sched.apply_steps_until(due->offset_ms);
        auto& dev = sched.device(due->device);
        const bool overridden = dev.pending_override();
        const EpochMs ts = sim_epoch + due->offset_ms;
        auto m = dev.emit(ts, ts);
        out.push_back(Emission{dev.profile().device_id, dev.profile().family, ts, ts, std::move(m.topic),
                               std::move(m.payload), overridden, true});
    }
    return out;
}

// ---------------------------------------------------------------- transports

BrokerAddresses BrokerAddresses::parse(std::string_view text) {
    BrokerAddresses b;
    bool local = false, ttn = false, zigbee = false;
    std::size_t start = 0;
    while (start <= text.size()) {
        const auto end = std::min(text.find(',', start), text.size());
        const auto item = text.substr(start, end - start);
        const auto eq = item.find('=');
        if (eq == std::string_view::npos) throw std::invalid_argument("expected name=host:port in '" + std::string(item) + "'");
        const auto name = item.substr(0, eq);
        const auto ep = net::Endpoint::parse(item.substr(eq + 1));
        if (name == "local") b.local = ep, local = true;
        else if (name == "ttn") b.ttn = ep, ttn = true;
        else if (name == "zigbee") b.zigbee = ep, zigbee = true;
        else throw std::invalid_argument("unknown broker name '" + std::string(name) + "'");
        start = end + 1;
    }
    if (!local) throw std::invalid_argument("--brokers needs local=<addr>");
    if (!ttn) b.ttn = b.local;
    if (!zigbee) b.zigbee = b.local;
    return b;
}

class FleetTransports::Impl {
public:
    Impl(BrokerAddresses brokers, const std::vector<DeviceProfile>& profiles) : brokers_(std::move(brokers)) {
        for (const auto& p : profiles) {
            switch (p.transport) {
                case Transport::WifiMqtt: {
                    ClientOptions co;
                    co.remote = brokers_.local;
                    co.client_id = "sim-" + p.device_id;
                    co.backoff_base = 100ms;
                    co.backoff_cap = 2s;
                    wifi_.emplace(p.device_id, std::make_unique<MqttClient>(co));
                    break;
                }
                case Transport::TtnMqtt:
                    if (!ttn_) {
                        ClientOptions co;
                        co.remote = brokers_.ttn;
                        co.client_id = "ttn-ns";
                        co.backoff_base = 100ms;
                        co.backoff_cap = 2s;
                        ttn_ = std::make_unique<MqttClient>(co);
                    }
                    break;
                case Transport::DeconzWs:
                    if (!emulator_) emulator_ = std::make_unique<DeconzEmulator>();
                    break;
            }
        }
    }

    void start() {
        for (auto& [id, c] : wifi_) c->start();
        if (ttn_) ttn_->start();
        if (emulator_) {
            emulator_->start();
            translator_ = std::make_unique<DeconzTranslator>(emulator_->endpoint(), brokers_.zigbee);
            translator_->start();
        }
    }

    void stop() {
        if (translator_) translator_->stop();
        if (emulator_) emulator_->stop();
        if (ttn_) ttn_->stop();
        for (auto& [id, c] : wifi_) c->stop();
    }

    bool wait_ready(std::chrono::milliseconds timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        auto left = [&] {
            return std::max(0ms, std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now()));
        };
        for (auto& [id, c] : wifi_)
            if (!c->wait_ready(left())) return false;
        if (ttn_ && !ttn_->wait_ready(left())) return false;
        if (translator_ && !translator_->wait_ready(left())) return false;
        while (emulator_ && emulator_->clients() == 0) {
            if (left() == 0ms) return false;
            std::this_thread::sleep_for(10ms);
        }
        return true;
    }

    bool direct(const DeviceProfile& p, const RawSensorMessage& m) {
        switch (p.transport) {
            case Transport::WifiMqtt: {
                auto it = wifi_.find(p.device_id);
                return it != wifi_.end() && it->second->publish(m.topic, m.payload);
            }
            case Transport::TtnMqtt: return ttn_ && ttn_->publish(m.topic, m.payload);
            case Transport::DeconzWs: return emulator_ && emulator_->push(m.payload) > 0;
        }
        return false;
    }

    struct Pending {
        DeviceProfile profile;
        std::deque<RawSensorMessage> queue;
    };

    BrokerAddresses brokers_;
    std::map<std::string, std::unique_ptr<MqttClient>> wifi_;
    std::unique_ptr<MqttClient> ttn_;
    std::unique_ptr<DeconzEmulator> emulator_;
    std::unique_ptr<DeconzTranslator> translator_;
    std::mutex mutex_;
    std::map<std::string, Pending> buffers_;
};

FleetTransports::FleetTransports(BrokerAddresses brokers, const std::vector<DeviceProfile>& profiles)
    : impl_(std::make_unique<Impl>(std::move(brokers), profiles)) {}

FleetTransports::~FleetTransports() { stop(); }

void FleetTransports::start() { impl_->start(); }
void FleetTransports::stop() { impl_->stop(); }
bool FleetTransports::wait_ready(std::chrono::milliseconds timeout) { return impl_->wait_ready(timeout); }

net::Endpoint FleetTransports::deconz_endpoint() const {
    return impl_->emulator_ ? impl_->emulator_->endpoint() : net::Endpoint{};
}

bool FleetTransports::send(const DeviceProfile& p, const RawSensorMessage& m) {
    std::lock_guard lk(impl_->mutex_);
    auto it = impl_->buffers_.find(p.device_id);
    if ((it == impl_->buffers_.end() || it->second.queue.empty()) && impl_->direct(p, m)) return true;
    auto& pending = impl_->buffers_[p.device_id];
    pending.profile = p;
    if (pending.queue.size() >= kDeviceBuffer) {
        pending.queue.pop_front();
        ++drops_;
    }
    pending.queue.push_back(m);
    return false;
}

void FleetTransports::flush() {
    std::lock_guard lk(impl_->mutex_);
    for (auto& [id, pending] : impl_->buffers_) {
        while (!pending.queue.empty() && impl_->direct(pending.profile, pending.queue.front())) pending.queue.pop_front();
    }
}

std::uint64_t FleetTransports::buffered() const {
    std::lock_guard lk(impl_->mutex_);
    std::uint64_t n = 0;
    for (const auto& [id, pending] : impl_->buffers_) n += pending.queue.size();
    return n;
}

// ---------------------------------------------------------------- run_fleet

std::vector<Emission> run_fleet(const std::vector<DeviceProfile>& profiles,
                                const std::optional<ScenarioScript>& scenario, double duration_s,
                                FleetTransports& transports, const RunOptions& options) {
    FleetSchedule sched(profiles, scenario, duration_s, options.seed, options.stagger);
    EmissionLog log;
    const double scale = options.time_scale > 0 ? options.time_scale : 1.0;
    const auto wall0 = std::chrono::steady_clock::now() + 20ms;
    const EpochMs real0 = now_ms() + 20;
    const EpochMs sim_epoch = options.sim_epoch != 0 ? options.sim_epoch : real0;
    auto wall_at = [&](EpochMs offset) {
        return wall0 + std::chrono::microseconds(static_cast<std::int64_t>(offset * 1000.0 / scale));
    };

    struct Delayed {
        std::chrono::steady_clock::time_point at;
        std::uint64_t order;
        std::size_t device;
        RawSensorMessage msg;
        Emission entry;
        bool operator>(const Delayed& o) const { return at != o.at ? at > o.at : order > o.order; }
    };
    std::priority_queue<Delayed, std::vector<Delayed>, std::greater<>> delayed;
    std::uint64_t order = 0;
    std::optional<FleetSchedule::Due> due = sched.next();

    auto send = [&](std::size_t device, const RawSensorMessage& m, Emission entry) {
        if (transports.buffered() > 0) transports.flush();
        entry.sent = transports.send(sched.device(device).profile(), m);
        log.append(std::move(entry));
    };

    while (due || !delayed.empty()) {
        if (options.cancel && options.cancel->load()) break;
        const bool take_delayed = !delayed.empty() && (!due || delayed.top().at <= wall_at(due->offset_ms));
        const auto when = take_delayed ? delayed.top().at : wall_at(due->offset_ms);
        std::this_thread::sleep_until(when);
        if (take_delayed) {
            auto d = delayed.top();
            delayed.pop();
            send(d.device, d.msg, std::move(d.entry));
            continue;
        }
        sched.apply_steps_until(due->offset_ms);
        auto& dev = sched.device(due->device);
        const bool overridden = dev.pending_override();
        const EpochMs ts = sim_epoch + due->offset_ms;
        const EpochMs t0 = now_ms();
        auto m = dev.emit(ts, t0);
        Emission entry{dev.profile().device_id, dev.profile().family, t0, ts, m.topic, m.payload, overridden, true};
        if (due->send_offset_ms > due->offset_ms) {
            const auto at = std::chrono::steady_clock::now() +
                            std::chrono::microseconds(static_cast<std::int64_t>(
                                (due->send_offset_ms - due->offset_ms) * 1000.0 / scale));
            delayed.push(Delayed{at, order++, due->device, std::move(m), std::move(entry)});
        } else {
            send(due->device, m, std::move(entry));
        }
        due = sched.next();
    }
    // Give buffered messages a last chance.
    for (int i = 0; i < 50 && transports.buffered() > 0; ++i) {
        transports.flush();
        std::this_thread::sleep_for(20ms);
    }
    return log.snapshot();
}

}  // namespace sensert::sim
