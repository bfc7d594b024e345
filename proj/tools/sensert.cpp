// SPDX-License-Identifier: Apache-2.0
#include "sensert/bench.hpp"
#include "sensert/broker.hpp"
#include "sensert/demo.hpp"
#include "sensert/metadata.hpp"
#include "sensert/simfleet.hpp"
#include "sensert/stack.hpp"

#include <CLI11.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <atomic>
#include <csignal>
#include <fstream>
#include <iostream>
#include <thread>

namespace fs = std::filesystem;
using nlohmann::json;
using namespace sensert;
using namespace std::chrono_literals;

namespace {

std::atomic<bool> g_stop{false};

extern "C" void on_signal(int) { g_stop = true; }

void install_signals() {
    std::signal(SIGINT, on_signal);
    std::signal(SIGTERM, on_signal);
    std::signal(SIGPIPE, SIG_IGN);
}

/// Sleeps until a signal arrives or `duration_s` (> 0) elapses, calling `tick`
/// every `interval`.
void run_until_stopped(double duration_s, std::chrono::milliseconds interval, const std::function<void()>& tick) {
    const auto start = std::chrono::steady_clock::now();
    auto next_tick = start + interval;
    while (!g_stop.load()) {
        std::this_thread::sleep_for(50ms);
        const auto now = std::chrono::steady_clock::now();
        if (duration_s > 0 && now - start >= std::chrono::duration<double>(duration_s)) break;
        if (tick && interval.count() > 0 && now >= next_tick) {
            tick();
            next_tick += interval;
        }
    }
}

std::chrono::milliseconds parse_interval(const std::string& text) {
    std::size_t pos = 0;
    const double v = std::stod(text, &pos);
    const std::string unit = text.substr(pos);
    if (v < 0) throw std::invalid_argument("negative interval");
    if (unit.empty() || unit == "s") return std::chrono::milliseconds(static_cast<std::int64_t>(v * 1000));
    if (unit == "ms") return std::chrono::milliseconds(static_cast<std::int64_t>(v));
    if (unit == "m") return std::chrono::milliseconds(static_cast<std::int64_t>(v * 60000));
    throw std::invalid_argument("bad interval '" + text + "' (use 10s, 500ms, 1m)");
}

EpochMs parse_time_arg(const std::string& text) {
    if (auto t = parse_iso8601(text)) return *t;
    std::size_t pos = 0;
    const long long v = std::stoll(text, &pos);
    if (pos != text.size()) throw std::invalid_argument("bad time '" + text + "'");
    return v;
}

json load_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw std::runtime_error("cannot open " + p.string());
    return json::parse(in);
}

struct Global {
    std::string log_level = "info";
    std::string config;
    json doc = json::object();
    fs::path base;

    StackConfig stack() const { return doc.is_object() ? StackConfig::from_json(doc, base) : StackConfig{}; }
};

void print_stats(const std::string& name, const broker::BrokerStats& s) {
    spdlog::info("{}: msgs_in={} msgs_out={} drops={} live_sessions={}", name, s.msgs_in, s.msgs_out, s.drops,
                 s.live_sessions);
}

// ---------------------------------------------------------------- subcommands

int cmd_broker(const Global& g, const std::string& config, const std::string& interval) {
    broker::BrokerConfig bc;
    if (!config.empty())
        bc = broker::BrokerConfig::load(config);
    else if (g.doc.contains("broker"))
        bc = broker::BrokerConfig::from_json(g.doc["broker"]);
    broker::Broker b(bc);
    b.start();
    std::cout << "listening " << b.endpoint().str() << std::endl;
    run_until_stopped(0, parse_interval(interval), [&] { print_stats(bc.name, b.stats()); });
    print_stats(bc.name, b.stats());
    b.stop();
    return 0;
}

struct SimArgs {
    std::string brokers;
    std::string fleet;
    std::string scenario;
    double duration = 300;
    std::uint64_t seed = 1;
    double time_scale = 0;
    std::string log;
};

int cmd_sim(const Global& g, const SimArgs& a) {
    sim::BrokerAddresses addrs;
    if (!a.brokers.empty()) {
        addrs = sim::BrokerAddresses::parse(a.brokers);
    } else {
        auto sc = g.stack();
        addrs = {sc.local, sc.ttn, sc.zigbee};
        if (addrs.local.port == 0) throw std::invalid_argument("--brokers is required");
    }
    std::vector<sim::DeviceProfile> fleet;
    if (!a.fleet.empty())
        fleet = sim::load_fleet(a.fleet);
    else if (auto sc = g.stack(); sc.fleet_file)
        fleet = sim::load_fleet(*sc.fleet_file);
    std::optional<sim::ScenarioScript> scenario;
    if (!a.scenario.empty()) {
        scenario = sim::scenario_by_name(a.scenario);
        for (const auto& d : scenario->devices)
            if (std::none_of(fleet.begin(), fleet.end(), [&](const auto& p) { return p.device_id == d.device_id; }))
                fleet.push_back(d);
    }
    if (fleet.empty()) throw std::invalid_argument("empty fleet: give --fleet or --scenario");

    sim::FleetTransports transports(addrs, fleet);
    transports.start();
    if (!transports.wait_ready(10s)) spdlog::warn("not every transport connected within 10 s; buffering");

    sim::RunOptions ro;
    ro.seed = a.seed;
    ro.cancel = &g_stop;
    if (scenario) {
        ro.time_scale = scenario->time_scale;
        ro.sim_epoch = scenario->sim_epoch;
    }
    if (a.time_scale > 0) ro.time_scale = a.time_scale;
    const auto log = sim::run_fleet(fleet, scenario, a.duration, transports, ro);
    transports.stop();
    std::size_t sent = 0;
    for (const auto& e : log) sent += e.sent;
    spdlog::info("emitted {} readings ({} sent, {} dropped)", log.size(), sent, transports.drops());
    if (!a.log.empty()) {
        std::ofstream out(a.log);
        for (const auto& e : log)
            out << json{{"device_id", e.device_id}, {"family", sim::to_string(e.family)}, {"sim_t0", e.sim_t0},
                        {"ts", e.ts},         {"topic", e.topic},  {"payload", e.payload}, {"sent", e.sent}}
                       .dump()
                << "\n";
    }
    return 0;
}

struct RtsArgs {
    std::string broker;
    std::string data_root;
    std::string monitor;
    std::string rules;
    bool no_coffee = false;
    double duration = 0;
    std::string stats_interval = "0";
};

int cmd_rts(const Global& g, const RtsArgs& a) {
    auto sc = g.stack();
    if (!a.broker.empty()) sc.external_broker = net::Endpoint::parse(a.broker);
    if (!sc.external_broker) sc.external_broker = sc.local;
    if (sc.external_broker->port == 0) throw std::invalid_argument("--broker is required");
    if (!a.data_root.empty()) sc.data_root = a.data_root;
    if (!a.monitor.empty()) sc.monitor = net::Endpoint::parse(a.monitor);
    if (!a.rules.empty()) sc.rules = rts::load_rules(a.rules);
    if (a.no_coffee) sc.coffee = false;
    Stack stack(sc);
    stack.start();
    if (!stack.wait_ready(10s)) spdlog::warn("feed handler not connected yet; it keeps retrying");
    std::cout << "monitor " << stack.monitor_endpoint().str() << std::endl;
    run_until_stopped(a.duration, parse_interval(a.stats_interval), [&] {
        spdlog::info("feed in={} out={} dead={}", stack.feed().in(), stack.feed().out(), stack.feed().dead());
    });
    stack.drain(5s);
    spdlog::info("feed in={} out={} dead={}", stack.feed().in(), stack.feed().out(), stack.feed().dead());
    stack.stop();
    return 0;
}

fs::path meta_store_dir(const Global& g, const std::string& flag) {
    if (!flag.empty()) return flag;
    if (g.doc.contains("meta_store")) {
        fs::path p = g.doc["meta_store"].get<std::string>();
        return p.is_absolute() || g.base.empty() ? p : g.base / p;
    }
    return "meta";
}

int cmd_meta_import(const fs::path& store_dir, const std::string& file) {
    auto store = meta::MetadataStore::open(store_dir);
    auto [containers, devices] = meta::import_json(store, load_json(file));
    std::cout << json{{"containers", containers}, {"devices", devices}}.dump() << std::endl;
    return 0;
}

int cmd_meta_asof(const fs::path& store_dir, const std::string& device, const std::string& at) {
    auto store = meta::MetadataStore::open(store_dir);
    auto rec = store.get_asof(device, parse_time_arg(at));
    if (!rec) {
        std::cerr << "no metadata for " << device << " at " << at << std::endl;
        return 1;
    }
    std::cout << json{{"device_id", rec->device_id}, {"ts", format_iso8601(rec->ts)}, {"doc", rec->doc}}.dump(2)
              << std::endl;
    return 0;
}

int cmd_meta_ls(const fs::path& store_dir, const std::string& container, const std::string& at) {
    auto store = meta::MetadataStore::open(store_dir);
    const EpochMs t = at.empty() ? now_ms() : parse_time_arg(at);
    if (!store.exists_asof(container, t)) {
        std::cerr << "container " << container << " does not exist at " << format_iso8601(t) << std::endl;
        return 1;
    }
    for (const auto& d : store.devices_in(container, t)) std::cout << d << "\n";
    return 0;
}

int cmd_bench(const Global& g, const std::string& sweep_text, double duration, const std::string& out,
              std::uint64_t seed, std::size_t main_n) {
    std::vector<std::size_t> sweep;
    std::stringstream ss(sweep_text);
    for (std::string item; std::getline(ss, item, ',');)
        if (!item.empty()) sweep.push_back(std::stoul(item));
    if (sweep.empty()) throw std::invalid_argument("--sweep needs at least one N");
    if (main_n == 0) main_n = std::find(sweep.begin(), sweep.end(), 45) != sweep.end() ? 45 : sweep.back();

    auto base = g.stack();
    std::vector<bench::ExperimentResult> results;
    for (std::size_t n : sweep) {
        if (g_stop.load()) break;
        bench::ExperimentOptions o;
        o.n_sensors = n;
        o.duration_s = duration;
        o.seed = seed;
        o.stack = base;
        spdlog::info("bench: N={} for {} s", n, duration);
        results.push_back(bench::run_experiment(o));
    }
    auto main = std::find_if(results.begin(), results.end(), [&](const auto& r) { return r.n_sensors == main_n; });
    const bench::ExperimentResult empty;
    const auto& m = main != results.end() ? *main : (results.empty() ? empty : results.back());
    bench::write_reports(out, m, results);
    std::cout << bench::summary_text(m, results);
    return 0;
}

struct DemoArgs {
    std::string scenario = "coffee";
    std::uint64_t seed = 1;
    std::string rules;
    std::string out = "demo-out";
    std::string data_root;
    std::string local = "127.0.0.1:1883", ttn = "127.0.0.1:1884", zigbee = "127.0.0.1:1885",
                monitor = "127.0.0.1:7000";
    bool ephemeral = false;
    std::string fleet;
};

int cmd_demo(const Global& g, const DemoArgs& a, const CLI::App& sub) {
    DemoOptions o;
    o.scenario = a.scenario;
    o.seed = a.seed;
    o.stack = g.stack();
    auto pick = [&](const char* flag, const std::string& value, net::Endpoint& target) {
        if (a.ephemeral)
            target = net::Endpoint{"127.0.0.1", 0};
        else if (sub.count(flag) > 0 || target.port == 0)
            target = net::Endpoint::parse(value);
    };
    pick("--local", a.local, o.stack.local);
    pick("--ttn", a.ttn, o.stack.ttn);
    pick("--zigbee", a.zigbee, o.stack.zigbee);
    pick("--monitor", a.monitor, o.stack.monitor);
    o.stack.validate();
    if (!a.rules.empty()) o.stack.rules = rts::load_rules(a.rules);
    if (!a.data_root.empty()) o.stack.data_root = a.data_root;
    if (!a.fleet.empty()) o.fleet = sim::load_fleet(a.fleet);
    else if (o.stack.fleet_file) o.fleet = sim::load_fleet(*o.stack.fleet_file);
    if (!a.out.empty()) o.out_dir = fs::path(a.out);

    DemoResult r;
    try {
        r = run_demo(o);
    } catch (const net::AddressInUse& e) {
        std::cerr << "port conflict: " << e.what() << std::endl;
        return 2;
    }
    std::cout << "expected:";
    for (const auto& t : r.expected) std::cout << " " << t;
    std::cout << "\ndetected:";
    for (const auto& t : r.detected) std::cout << " " << t;
    std::cout << "\n" << (r.matches() ? "MATCH" : "MISMATCH") << std::endl;
    if (o.out_dir) std::cout << "bench reports in " << o.out_dir->string() << std::endl;
    return r.matches() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sensert: sensor data real-time stack"};
    app.require_subcommand(1);
    Global g;
    app.add_option("--log-level", g.log_level, "trace, debug, info, warn, error, off")
        ->check(CLI::IsMember({"trace", "debug", "info", "warn", "error", "critical", "off"}));
    app.add_option("--config", g.config, "JSON config with brokers, monitor, data_root, rules, fleet, meta_store");

    auto* broker_cmd = app.add_subcommand("broker", "run one MQTT broker with optional bridges");
    std::string broker_config, broker_interval = "10s";
    broker_cmd->add_option("--config", broker_config, "broker config JSON");
    broker_cmd->add_option("--stats-interval", broker_interval, "stats log period, e.g. 10s; 0 disables");

    auto* sim_cmd = app.add_subcommand("sim", "run a simulated sensor fleet against live brokers");
    SimArgs sim_args;
    sim_cmd->add_option("--brokers", sim_args.brokers, "local=<addr>,ttn=<addr>,zigbee=<addr>");
    sim_cmd->add_option("--fleet", sim_args.fleet, "fleet JSON");
    sim_cmd->add_option("--scenario", sim_args.scenario, "coffee or co2")->check(CLI::IsMember({"coffee", "co2"}));
    sim_cmd->add_option("--duration", sim_args.duration, "simulated seconds");
    sim_cmd->add_option("--seed", sim_args.seed);
    sim_cmd->add_option("--time-scale", sim_args.time_scale, "simulated seconds per wall second");
    sim_cmd->add_option("--emission-log", sim_args.log, "write every emission as JSON lines");

    auto* rts_cmd = app.add_subcommand("rts", "run the real-time server against a broker");
    RtsArgs rts_args;
    rts_cmd->add_option("--broker", rts_args.broker, "broker address host:port");
    rts_cmd->add_option("--data-root", rts_args.data_root, "storage root for JSONL files");
    rts_cmd->add_option("--monitor-listen", rts_args.monitor, "DataMonitor listen address");
    rts_cmd->add_option("--rules", rts_args.rules, "threshold rules JSON");
    rts_cmd->add_flag("--no-coffee", rts_args.no_coffee, "do not deploy the coffee verticle");
    rts_cmd->add_option("--duration", rts_args.duration, "stop after this many seconds (0 = until signalled)");
    rts_cmd->add_option("--stats-interval", rts_args.stats_interval, "feed counter log period");

    auto* meta_cmd = app.add_subcommand("meta", "temporal device metadata");
    meta_cmd->require_subcommand(1);
    std::string store_flag;
    meta_cmd->add_option("--store", store_flag, "metadata journal directory");
    std::string import_file, asof_device, asof_time, ls_container, ls_at;
    auto* meta_import = meta_cmd->add_subcommand("import", "import containers and devices from JSON");
    meta_import->add_option("file", import_file)->required();
    auto* meta_asof = meta_cmd->add_subcommand("asof", "device metadata in effect at a time");
    meta_asof->add_option("device_id", asof_device)->required();
    meta_asof->add_option("time", asof_time, "ISO-8601 or epoch ms")->required();
    auto* meta_ls = meta_cmd->add_subcommand("ls", "devices in a container (and its children)");
    meta_ls->add_option("container_id", ls_container)->required();
    meta_ls->add_option("--at", ls_at, "ISO-8601 or epoch ms; default now");

    auto* bench_cmd = app.add_subcommand("bench", "latency benchmark over a sensor-count sweep");
    std::string sweep = "10,20,45,100", bench_out = "bench-out";
    double bench_duration = 120;
    std::uint64_t bench_seed = 1;
    std::size_t bench_main = 0;
    bench_cmd->add_option("--sweep", sweep, "comma-separated fleet sizes");
    bench_cmd->add_option("--duration", bench_duration, "seconds per run");
    bench_cmd->add_option("--out", bench_out, "report directory");
    bench_cmd->add_option("--seed", bench_seed);
    bench_cmd->add_option("--table-n", bench_main, "fleet size used for table2/fig8b (default 45 or the largest)");

    auto* demo_cmd = app.add_subcommand("demo", "three brokers, RTS and a scenario in one process");
    DemoArgs demo_args;
    demo_cmd->add_option("--scenario", demo_args.scenario)->check(CLI::IsMember({"coffee", "co2"}));
    demo_cmd->add_option("--seed", demo_args.seed);
    demo_cmd->add_option("--rules", demo_args.rules, "threshold rules JSON");
    demo_cmd->add_option("--out", demo_args.out, "bench report directory (empty disables)");
    demo_cmd->add_option("--data-root", demo_args.data_root, "storage root; off when empty");
    demo_cmd->add_option("--fleet", demo_args.fleet, "background fleet JSON");
    demo_cmd->add_option("--local", demo_args.local);
    demo_cmd->add_option("--ttn", demo_args.ttn);
    demo_cmd->add_option("--zigbee", demo_args.zigbee);
    demo_cmd->add_option("--monitor", demo_args.monitor);
    demo_cmd->add_flag("--ephemeral", demo_args.ephemeral, "bind every listener to a free port");

    CLI11_PARSE(app, argc, argv);

    spdlog::set_default_logger(spdlog::stderr_color_mt("sensert"));
    spdlog::set_level(spdlog::level::from_str(g.log_level));
    install_signals();

    try {
        if (!g.config.empty()) {
            g.doc = load_json(g.config);
            g.base = fs::path(g.config).parent_path();
        }
        if (*broker_cmd) return cmd_broker(g, broker_config, broker_interval);
        if (*sim_cmd) return cmd_sim(g, sim_args);
        if (*rts_cmd) return cmd_rts(g, rts_args);
        if (*meta_cmd) {
            const auto dir = meta_store_dir(g, store_flag);
            if (*meta_import) return cmd_meta_import(dir, import_file);
            if (*meta_asof) return cmd_meta_asof(dir, asof_device, asof_time);
            if (*meta_ls) return cmd_meta_ls(dir, ls_container, ls_at);
        }
        if (*bench_cmd) return cmd_bench(g, sweep, bench_duration, bench_out, bench_seed, bench_main);
        if (*demo_cmd) return cmd_demo(g, demo_args, *demo_cmd);
    } catch (const net::AddressInUse& e) {
        std::cerr << "port conflict: " << e.what() << std::endl;
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << std::endl;
        return 1;
    }
    return 0;
}
