// SPDX-License-Identifier: Apache-2.0
#include "sensert/bench.hpp"

#include <fmt/format.h>
#include <spdlog/spdlog.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <sstream>
#include <thread>

namespace sensert::bench {

using namespace std::chrono_literals;

std::string to_string(TapPoint p) {
    switch (p) {
        case TapPoint::Gateway: return "Gateway";
        case TapPoint::Broker: return "Broker";
        case TapPoint::EventBus: return "EventBus";
        case TapPoint::Client: return "Client";
    }
    return "?";
}

std::size_t MsgKeyHash::operator()(const MsgKey& k) const noexcept {
    std::size_t h = std::hash<std::string>{}(k.device_id);
    return h ^ (std::hash<EpochMs>{}(k.sim_t0) + 0x9e3779b97f4a7c15ULL + (h << 6) + (h >> 2));
}

bool TapRecord::complete() const {
    return std::all_of(t.begin(), t.end(), [](const auto& v) { return v.has_value(); });
}

bool TapRecord::monotone() const {
    if (!complete()) return false;
    for (std::size_t i = 1; i < t.size(); ++i)
        if (*t[i - 1] > *t[i]) return false;
    return true;
}

bool TapCollector::tap(TapPoint point, const MsgKey& key, EpochMs t) {
    auto& shard = shards_[MsgKeyHash{}(key) % kShards];
    std::lock_guard lock(shard.mutex);
    auto [it, inserted] = shard.records.try_emplace(key);
    if (inserted) it->second.key = key;
    auto& slot = it->second.t[static_cast<std::size_t>(point)];
    if (slot) {
        ++duplicates_;
        return false;
    }
    slot = t;
    return true;
}

std::vector<TapRecord> TapCollector::records() const {
    std::vector<TapRecord> out;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mutex);
        for (const auto& [k, r] : s.records) out.push_back(r);
    }
    return out;
}

std::optional<TapRecord> TapCollector::find(const MsgKey& key) const {
    const auto& shard = shards_[MsgKeyHash{}(key) % kShards];
    std::lock_guard lock(shard.mutex);
    auto it = shard.records.find(key);
    if (it == shard.records.end()) return std::nullopt;
    return it->second;
}

std::size_t TapCollector::size() const {
    std::size_t n = 0;
    for (const auto& s : shards_) {
        std::lock_guard lock(s.mutex);
        n += s.records.size();
    }
    return n;
}

void TapCollector::clear() {
    for (auto& s : shards_) {
        std::lock_guard lock(s.mutex);
        s.records.clear();
    }
    duplicates_ = 0;
}

double nearest_rank(const std::vector<double>& sorted, double p) {
    if (sorted.empty()) throw NoData("no samples");
    const auto n = sorted.size();
    auto rank = static_cast<std::size_t>(std::ceil(p / 100.0 * static_cast<double>(n)));
    rank = std::clamp<std::size_t>(rank, 1, n);
    return sorted[rank - 1];
}

LatencyStats stats(std::vector<double> deltas) {
    if (deltas.empty()) throw NoData("no samples");
    std::sort(deltas.begin(), deltas.end());
    LatencyStats s;
    s.count = deltas.size();
    const double n = static_cast<double>(s.count);
    // Two-pass for stability.
    s.mean_ms = std::accumulate(deltas.begin(), deltas.end(), 0.0) / n;
    double ss = 0;
    for (double d : deltas) ss += (d - s.mean_ms) * (d - s.mean_ms);
    s.stddev_ms = std::sqrt(ss / n);
    s.mean_ms = std::clamp(s.mean_ms, deltas.front(), deltas.back());
    s.p50_ms = nearest_rank(deltas, 50);
    s.p95_ms = nearest_rank(deltas, 95);
    s.p99_ms = nearest_rank(deltas, 99);
    return s;
}

const std::array<PaperRow, 4>& paper_table2() {
    static const std::array<PaperRow, 4> rows{{{TapPoint::Gateway, 57.15, 10.21},
                                               {TapPoint::Broker, 147.86, 63.56},
                                               {TapPoint::EventBus, 157.86, 2.35},
                                               {TapPoint::Client, 159.55, 0.56}}};
    return rows;
}

// ---------------------------------------------------------------- aggregation

void aggregate(ExperimentResult& r, const std::vector<sim::DeviceProfile>& fleet) {
    std::unordered_map<std::string, std::string> category;
    for (const auto& p : fleet) category[p.device_id] = sim::to_string(p.family);

    std::unordered_map<MsgKey, const TapRecord*, MsgKeyHash> by_key;
    for (const auto& rec : r.records) by_key[rec.key] = &rec;

    std::array<std::vector<double>, 4> per_tap;
    std::map<std::string, std::vector<double>> per_cat;
    r.complete = r.incomplete = r.non_monotone = 0;
    r.emitted = 0;
    for (const auto& e : r.emissions) {
        if (!e.sent) continue;
        ++r.emitted;
        auto it = by_key.find(MsgKey{e.device_id, e.sim_t0});
        if (it == by_key.end() || !it->second->complete()) {
            ++r.incomplete;
            continue;
        }
        const TapRecord& rec = *it->second;
        ++r.complete;
        if (!rec.monotone()) ++r.non_monotone;
        for (std::size_t i = 0; i < 4; ++i) per_tap[i].push_back(static_cast<double>(*rec.t[i] - rec.key.sim_t0));
        if (auto c = category.find(e.device_id); c != category.end())
            per_cat[c->second].push_back(static_cast<double>(*rec.t[3] - rec.key.sim_t0));
    }
    r.per_tap.clear();
    r.per_category.clear();
    r.end_to_end.reset();
    for (std::size_t i = 0; i < 4; ++i)
        if (!per_tap[i].empty()) r.per_tap[kTapPoints[i]] = stats(per_tap[i]);
    if (auto it = r.per_tap.find(TapPoint::Client); it != r.per_tap.end()) r.end_to_end = it->second;
    for (auto& [c, v] : per_cat) r.per_category[c] = stats(std::move(v));
    if (r.emitted && r.incomplete_ratio() > 0.01)
        r.warnings.push_back(fmt::format("incomplete records {:.2f}% exceed 1% ({} of {})",
                                         100.0 * r.incomplete_ratio(), r.incomplete, r.emitted));
    if (r.non_monotone) r.warnings.push_back(fmt::format("{} complete records violate tap ordering", r.non_monotone));
}

// ---------------------------------------------------------------- experiment

namespace {

std::optional<MsgKey> key_of(const NormalizedMessage& m) {
    if (!m.sim_t0) return std::nullopt;
    return MsgKey{m.device_id, *m.sim_t0};
}

}  // namespace

ExperimentResult run_experiment(const ExperimentOptions& options) {
    ExperimentResult r;
    auto fleet = options.fleet ? *options.fleet : sim::make_fleet(options.n_sensors, options.period_s, options.jitter_s);
    if (options.scenario)
        for (const auto& d : options.scenario->devices)
            if (std::none_of(fleet.begin(), fleet.end(), [&](const auto& p) { return p.device_id == d.device_id; }))
                fleet.push_back(d);
    r.n_sensors = fleet.size();
    r.duration_s = options.duration_s > 0 || !options.scenario ? options.duration_s : options.scenario->duration_s;
    if (r.n_sensors == 0) return r;

    auto registry = std::shared_ptr<DecoderRegistry>(DecoderRegistry::with_defaults());
    TapCollector taps;

    auto keyed = [&](const wire::Publish& p) -> std::optional<MsgKey> {
        RawSensorMessage raw{p.topic, p.payload, now_ms()};
        auto out = registry->decode(raw);
        if (auto* m = std::get_if<NormalizedMessage>(&out)) return key_of(*m);
        return std::nullopt;
    };
    auto gateway_hook = [&](const wire::Publish& p, const broker::Ingress&) {
        const EpochMs t = now_ms();
        if (auto k = keyed(p)) taps.tap(TapPoint::Gateway, *k, t);
    };
    auto local_hook = [&](const wire::Publish& p, const broker::Ingress& in) {
        const EpochMs t = now_ms();
        if (p.topic.rfind("sensert/", 0) == 0) return;
        auto k = keyed(p);
        if (!k) return;
        // Wifi devices publish straight to the local broker: it is their gateway.
        if (!in.via_bridge) taps.tap(TapPoint::Gateway, *k, t);
        taps.tap(TapPoint::Broker, *k, t);
    };

    Stack stack(options.stack);
    stack.set_broker_hooks(local_hook, gateway_hook, gateway_hook);
    stack.start();

    std::atomic<bool> done{false};
    rts::SubscriptionPolicy tap_policy = rts::SubscriptionPolicy::on("feed/#");
    tap_policy.queue_capacity = 1 << 16;
    auto tap_sub = stack.bus().subscribe(tap_policy);
    auto event_sub = stack.bus().subscribe(rts::SubscriptionPolicy::on("event/#"));
    std::thread bus_tap([&] {
        for (;;) {
            auto env = tap_sub->receive(200ms);
            if (!env) {
                if (tap_sub->closed()) break;
                continue;
            }
            if (const auto* m = env->message())
                if (auto k = key_of(*m)) taps.tap(TapPoint::EventBus, *k, env->published_at);
        }
    });
    std::thread event_tap([&] {
        for (;;) {
            auto env = event_sub->receive(200ms);
            if (!env) {
                if (event_sub->closed()) break;
                continue;
            }
            if (const auto* e = env->event()) r.events.push_back(*e);
        }
    });

    rts::MonitorClient client(stack.monitor_endpoint());
    client.subscribe({"feed/#"});
    // Wait for the ack so nothing is missed at start.
    for (int i = 0; i < 50; ++i) {
        auto j = client.next(100ms);
        if (j && j->contains("ok")) break;
    }
    std::thread client_tap([&] {
        while (!done.load() || !client.closed()) {
            auto j = client.next_envelope(100ms);
            const EpochMs t = now_ms();
            if (!j) {
                if (done.load() || client.closed()) break;
                continue;
            }
            try {
                const auto& body = j->at("body");
                if (!body.contains("sim_t0")) continue;
                taps.tap(TapPoint::Client, MsgKey{body.at("device_id").get<std::string>(), body.at("sim_t0").get<EpochMs>()}, t);
            } catch (const std::exception&) {
            }
        }
    });

    if (!stack.wait_ready(10s)) r.warnings.push_back("stack not ready within 10 s");
    sim::FleetTransports transports(stack.brokers(), fleet);
    transports.start();
    if (!transports.wait_ready(10s)) r.warnings.push_back("fleet transports not ready within 10 s");

    sim::RunOptions ro;
    ro.seed = options.seed;
    if (options.scenario) {
        ro.time_scale = options.scenario->time_scale;
        ro.sim_epoch = options.scenario->sim_epoch;
    }
    r.emissions = sim::run_fleet(fleet, options.scenario, r.duration_s, transports, ro);
    std::this_thread::sleep_for(options.settle);
    stack.drain(5s);
    transports.stop();
    r.transport_drops = transports.drops();

    done = true;
    client_tap.join();
    client.close();
    stack.bus().unsubscribe(tap_sub);
    stack.bus().unsubscribe(event_sub);
    bus_tap.join();
    event_tap.join();

    r.feed_in = stack.feed().in();
    r.feed_out = stack.feed().out();
    r.feed_dead = stack.feed().dead();
    r.conservation_ok = r.feed_in == r.feed_out + r.feed_dead;
    auto subs = stack.subscriptions();
    subs.push_back(tap_sub);
    subs.push_back(event_sub);
    for (const auto& s : subs) {
        r.audit.push_back(s->counters());
        if (!r.audit.back().balanced()) r.conservation_ok = false;
    }
    stack.stop();

    r.records = taps.records();
    r.duplicates = taps.duplicates();
    aggregate(r, fleet);
    for (const auto& w : r.warnings) spdlog::warn("bench N={}: {}", r.n_sensors, w);
    return r;
}

// ---------------------------------------------------------------- reports

std::string table2_csv(const ExperimentResult& r) {
    std::string out = "point,count,mean_ms,stddev_ms,p50_ms,p95_ms,p99_ms\n";
    for (TapPoint p : kTapPoints) {
        auto it = r.per_tap.find(p);
        if (it == r.per_tap.end()) continue;
        const auto& s = it->second;
        out += fmt::format("{},{},{:.3f},{:.3f},{:.3f},{:.3f},{:.3f}\n", to_string(p), s.count, s.mean_ms, s.stddev_ms,
                           s.p50_ms, s.p95_ms, s.p99_ms);
    }
    return out;
}

std::string fig8a_csv(const std::vector<ExperimentResult>& sweep) {
    std::string out = "n_sensors,mean_ms,stddev_ms\n";
    for (const auto& r : sweep)
        if (r.end_to_end) out += fmt::format("{},{:.3f},{:.3f}\n", r.n_sensors, r.end_to_end->mean_ms, r.end_to_end->stddev_ms);
    return out;
}

std::string fig8b_csv(const ExperimentResult& r) {
    std::string out = "category,mean_ms,stddev_ms\n";
    for (const auto& [c, s] : r.per_category) out += fmt::format("{},{:.3f},{:.3f}\n", c, s.mean_ms, s.stddev_ms);
    return out;
}

std::string summary_text(const ExperimentResult& main, const std::vector<ExperimentResult>& sweep) {
    std::ostringstream o;
    o << fmt::format("run: N={} duration={}s emitted={} complete={} incomplete={} ({:.2f}%) duplicates={}\n",
                     main.n_sensors, main.duration_s, main.emitted, main.complete, main.incomplete,
                     100.0 * main.incomplete_ratio(), main.duplicates);
    o << fmt::format("{:<10}{:>12}{:>12}{:>16}{:>16}\n", "point", "mean_ms", "stddev_ms", "deployed_mean", "deployed_std");
    for (const auto& row : paper_table2()) {
        auto it = main.per_tap.find(row.point);
        if (it == main.per_tap.end())
            o << fmt::format("{:<10}{:>12}{:>12}{:>16.2f}{:>16.2f}\n", to_string(row.point), "-", "-", row.mean_ms, row.stddev_ms);
        else
            o << fmt::format("{:<10}{:>12.2f}{:>12.2f}{:>16.2f}{:>16.2f}\n", to_string(row.point), it->second.mean_ms,
                             it->second.stddev_ms, row.mean_ms, row.stddev_ms);
    }
    o << "deployed figures include real radio hops (first hop ~57 ms); desk numbers do not.\n";
    o << "per category (end-to-end):\n";
    for (const auto& [c, s] : main.per_category)
        o << fmt::format("  {:<16}{:>10.2f} ms  (sd {:.2f}, n={})\n", c, s.mean_ms, s.stddev_ms, s.count);
    if (!sweep.empty()) {
        o << "sweep (end-to-end mean):\n";
        for (const auto& r : sweep)
            o << fmt::format("  N={:<6}{}\n", r.n_sensors,
                             r.end_to_end ? fmt::format("{:.2f} ms", r.end_to_end->mean_ms) : std::string("no data"));
    }
    for (const auto& w : main.warnings) o << "WARNING: " << w << "\n";
    for (const auto& r : sweep)
        if (&r != &main)
            for (const auto& w : r.warnings) o << "WARNING (N=" << r.n_sensors << "): " << w << "\n";
    return o.str();
}

void write_reports(const std::filesystem::path& dir, const ExperimentResult& main,
                   const std::vector<ExperimentResult>& sweep) {
    std::filesystem::create_directories(dir);
    auto put = [&](const char* name, const std::string& text) {
        std::ofstream f(dir / name, std::ios::trunc);
        if (!f) throw std::runtime_error("cannot write " + (dir / name).string());
        f << text;
    };
    put("table2.csv", table2_csv(main));
    put("fig8a.csv", fig8a_csv(sweep));
    put("fig8b.csv", fig8b_csv(main));
    put("summary.txt", summary_text(main, sweep));
}

}  // namespace sensert::bench
