// SPDX-License-Identifier: Apache-2.0
//
// Coffee-pot sensor node analysis: a load cell under the pot plus power
// readings from the grinder and brewer smart plugs, turned into pot events.
#pragma once

#include "sensert/bus.hpp"

#include <deque>
#include <optional>
#include <string>
#include <vector>

namespace sensert::rts {

struct CoffeeParams {
    double power_threshold_w = 40.0;
    int grind_samples = 2;
    double presence_kg = 0.25;
    int absent_samples = 2;
    double pot_kg = 0.5;
    double full_kg = 2.0;
    double new_pot_rise_kg = 1.0;
    EpochMs brew_window_ms = 600'000;
    double pour_min_kg = 0.15;
    double pour_max_kg = 0.6;
    double settle_range_kg = 0.06;
    double empty_margin_kg = 0.1;
    double level_step = 0.05;
};

struct CoffeeState {
    bool initialised = false;
    std::deque<double> raw;     // last 3 weights
    std::deque<double> smooth;  // last 3 medians
    bool present = false;
    int absent_run = 0;
    std::optional<double> settled;
    int grind_run = 0;
    bool grinding = false;
    bool brewing = false;
    std::optional<EpochMs> last_brew_ts;
    std::optional<double> baseline;
    bool new_pot_armed = false;
    bool empty = false;
    std::optional<double> level;

    bool operator==(const CoffeeState&) const = default;
};

struct CoffeeStep {
    CoffeeState state;
    std::vector<DerivedEvent> events;
};

inline constexpr const char* kCoffeeSource = "RTCoffee";

/// The five pot events, in the order they are reported.
const std::vector<std::string>& coffee_event_types();

/// Pure transition. Non-coffee messages and messages without weight_kg
/// leave the state unchanged.
CoffeeStep rtcoffee_step(CoffeeState state, const NormalizedMessage& m, const CoffeeParams& params = {});

/// Publishes events on "event/coffee/<node_id>", one state per node.
class RTCoffee : public SubscriberVerticle {
public:
    explicit RTCoffee(CoffeeParams params = {}, std::string filter = "feed/coffee/#");
    std::uint64_t events_emitted() const { return emitted_.load(); }

protected:
    void handle(const BusEnvelope& env) override;

private:
    CoffeeParams params_;
    std::map<std::string, CoffeeState> nodes_;
    std::atomic<std::uint64_t> emitted_{0};
};

}  // namespace sensert::rts
