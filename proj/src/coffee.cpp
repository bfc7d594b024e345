// SPDX-License-Identifier: Apache-2.0
#include "sensert/coffee.hpp"

#include <algorithm>

namespace sensert::rts {

const std::vector<std::string>& coffee_event_types() {
    static const std::vector<std::string> v{"coffee-grinding", "new-pot", "pot-poured", "pot-removed",
                                            "pot-empty"};
    return v;
}

namespace {

void push3(std::deque<double>& q, double v) {
    q.push_back(v);
    if (q.size() > 3) q.pop_front();
}

double median(const std::deque<double>& q) {
    std::vector<double> v(q.begin(), q.end());
    std::sort(v.begin(), v.end());
    if (v.size() == 2) return (v[0] + v[1]) / 2;
    return v[v.size() / 2];
}

}  // namespace

CoffeeStep rtcoffee_step(CoffeeState s, const NormalizedMessage& m, const CoffeeParams& p) {
    CoffeeStep out;
    const auto weight = cooked_number(m.cooked, "weight_kg");
    if (m.family != "coffee" || !weight) {
        out.state = std::move(s);
        return out;
    }
    const double grinder = cooked_number(m.cooked, "grinder_w").value_or(0.0);
    const double brewer = cooked_number(m.cooked, "brewer_w").value_or(0.0);

    auto emit = [&](const char* type, Cooked attrs = {}) {
        out.events.push_back(make_event(type, m.device_id, m.ts, std::move(attrs), kCoffeeSource));
    };

    push3(s.raw, *weight);
    const double w = median(s.raw);
    push3(s.smooth, w);
    const bool present_now = w >= p.presence_kg;
    const bool empty_now = present_now && w - p.pot_kg <= p.empty_margin_kg;
    const double level = std::clamp((w - p.pot_kg) / p.full_kg, 0.0, 1.0);

    const bool grinder_on = grinder > p.power_threshold_w;
    const bool brewer_on = brewer > p.power_threshold_w;
    s.grind_run = grinder_on ? s.grind_run + 1 : 0;
    if (brewer_on) s.last_brew_ts = m.ts;

    if (!s.initialised) {
        s.initialised = true;
        s.present = present_now;
        s.empty = empty_now;
        s.level = level;
        s.grinding = s.grind_run >= p.grind_samples;
        s.brewing = brewer_on;
        out.state = std::move(s);
        return out;
    }

    // Grinder: rising edge sustained for grind_samples.
    if (!grinder_on) {
        s.grinding = false;
    } else if (!s.grinding && s.grind_run >= p.grind_samples) {
        s.grinding = true;
        emit("coffee-grinding", {{"grinder_w", grinder}});
    }

    // Brew start fixes the pre-brew baseline.
    if (brewer_on && !s.brewing) {
        s.baseline = s.settled.value_or(w);
        s.new_pot_armed = true;
    }
    s.brewing = brewer_on;
    if (s.new_pot_armed && s.baseline && w >= *s.baseline + p.new_pot_rise_kg && s.last_brew_ts &&
        m.ts - *s.last_brew_ts <= p.brew_window_ms) {
        s.new_pot_armed = false;
        emit("new-pot", {{"weight_kg", w}, {"baseline_kg", *s.baseline}});
    }

    // Presence, debounced on the way out.
    if (present_now) {
        s.absent_run = 0;
        s.present = true;
    } else if (s.present && ++s.absent_run >= p.absent_samples) {
        s.present = false;
        s.settled.reset();
        emit("pot-removed");
    }

    // Settled weight: three smoothed samples within settle_range.
    if (present_now && s.smooth.size() == 3) {
        const auto [lo, hi] = std::minmax_element(s.smooth.begin(), s.smooth.end());
        if (*hi - *lo <= p.settle_range_kg) {
            const double value = median(s.smooth);
            if (!s.settled) {
                s.settled = value;
            } else {
                const double drop = *s.settled - value;
                if (drop >= p.pour_min_kg && drop <= p.pour_max_kg) {
                    emit("pot-poured", {{"amount_kg", drop}, {"weight_kg", value}});
                    s.settled = value;
                } else if (std::abs(drop) > p.settle_range_kg) {
                    s.settled = value;
                }
            }
        }
    }

    if (empty_now && !s.empty) emit("pot-empty", {{"weight_kg", w}});
    s.empty = empty_now;

    if (!s.level || std::abs(level - *s.level) >= p.level_step) {
        s.level = level;
        emit("coffee-level", {{"level", level}});
    }

    out.state = std::move(s);
    return out;
}

RTCoffee::RTCoffee(CoffeeParams params, std::string filter)
    : SubscriberVerticle(kCoffeeSource, SubscriptionPolicy::on(std::move(filter))), params_(params) {}

void RTCoffee::handle(const BusEnvelope& env) {
    const auto* m = env.message();
    if (!m) return;
    auto step = rtcoffee_step(std::move(nodes_[m->device_id]), *m, params_);
    nodes_[m->device_id] = std::move(step.state);
    for (auto& e : step.events) {
        const std::string address = "event/coffee/" + e.scope;
        bus().publish(publisher(), address, std::move(e));
        ++emitted_;
    }
}

}  // namespace sensert::rts
