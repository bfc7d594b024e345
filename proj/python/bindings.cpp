// SPDX-License-Identifier: Apache-2.0
#include "sensert/bench.hpp"
#include "sensert/broker.hpp"
#include "sensert/coffee.hpp"
#include "sensert/decoders.hpp"
#include "sensert/demo.hpp"
#include "sensert/metadata.hpp"
#include "sensert/simfleet.hpp"
#include "sensert/topic.hpp"
#include "sensert/wire.hpp"

#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

namespace py = pybind11;
using nlohmann::json;
using namespace sensert;

namespace {

py::object to_py(const json& j) {
    switch (j.type()) {
        case json::value_t::null: return py::none();
        case json::value_t::boolean: return py::bool_(j.get<bool>());
        case json::value_t::number_integer: return py::int_(j.get<std::int64_t>());
        case json::value_t::number_unsigned: return py::int_(j.get<std::uint64_t>());
        case json::value_t::number_float: return py::float_(j.get<double>());
        case json::value_t::string: return py::str(j.get<std::string>());
        case json::value_t::array: {
            py::list l;
            for (const auto& x : j) l.append(to_py(x));
            return l;
        }
        case json::value_t::object: {
            py::dict d;
            for (const auto& [k, v] : j.items()) d[py::str(k)] = to_py(v);
            return d;
        }
        default: return py::none();
    }
}

json from_py(const py::handle& o) {
    if (o.is_none()) return nullptr;
    if (py::isinstance<py::bool_>(o)) return o.cast<bool>();
    if (py::isinstance<py::int_>(o)) return o.cast<std::int64_t>();
    if (py::isinstance<py::float_>(o)) return o.cast<double>();
    if (py::isinstance<py::str>(o)) return o.cast<std::string>();
    if (py::isinstance<py::dict>(o)) {
        json j = json::object();
        for (auto [k, v] : o.cast<py::dict>()) j[py::str(k).cast<std::string>()] = from_py(v);
        return j;
    }
    if (py::isinstance<py::list>(o) || py::isinstance<py::tuple>(o)) {
        json j = json::array();
        for (auto v : o) j.push_back(from_py(v));
        return j;
    }
    throw py::type_error("cannot convert to JSON: " + py::repr(o).cast<std::string>());
}

py::dict stats_dict(const bench::LatencyStats& s) {
    py::dict d;
    d["count"] = s.count;
    d["mean_ms"] = s.mean_ms;
    d["stddev_ms"] = s.stddev_ms;
    d["p50_ms"] = s.p50_ms;
    d["p95_ms"] = s.p95_ms;
    d["p99_ms"] = s.p99_ms;
    return d;
}

py::dict experiment_dict(const bench::ExperimentResult& r) {
    py::dict d;
    d["n_sensors"] = r.n_sensors;
    d["duration_s"] = r.duration_s;
    d["emitted"] = r.emitted;
    d["complete"] = r.complete;
    d["incomplete"] = r.incomplete;
    d["non_monotone"] = r.non_monotone;
    d["duplicates"] = r.duplicates;
    py::dict taps;
    for (const auto& [p, s] : r.per_tap) taps[py::str(bench::to_string(p))] = stats_dict(s);
    d["per_tap"] = taps;
    py::dict cats;
    for (const auto& [c, s] : r.per_category) cats[py::str(c)] = stats_dict(s);
    d["per_category"] = cats;
    d["end_to_end"] = r.end_to_end ? py::object(stats_dict(*r.end_to_end)) : py::none();
    d["conservation_ok"] = r.conservation_ok;
    d["feed"] = py::dict(py::arg("in") = r.feed_in, py::arg("out") = r.feed_out, py::arg("dead") = r.feed_dead);
    d["warnings"] = r.warnings;
    d["table2_csv"] = bench::table2_csv(r);
    d["fig8b_csv"] = bench::fig8b_csv(r);
    return d;
}

bench::TapPoint tap_point(const std::string& name) {
    for (auto p : bench::kTapPoints)
        if (bench::to_string(p) == name) return p;
    throw py::value_error("tap point must be Gateway, Broker, EventBus or Client");
}

EpochMs time_arg(const py::object& o) {
    if (py::isinstance<py::str>(o)) {
        auto t = parse_iso8601(o.cast<std::string>());
        if (!t) throw py::value_error("bad ISO-8601 time");
        return *t;
    }
    return o.cast<EpochMs>();
}

class CoffeeDetector {
public:
    explicit CoffeeDetector(std::string node_id) : node_(std::move(node_id)) {}

    py::list step(EpochMs ts, double weight_kg, double grinder_w, double brewer_w) {
        NormalizedMessage m;
        m.device_id = node_;
        m.family = "coffee";
        m.ts = ts;
        m.received_at = ts;
        m.cooked = {{"weight_kg", weight_kg}, {"grinder_w", grinder_w}, {"brewer_w", brewer_w}};
        auto r = rts::rtcoffee_step(std::move(state_), m, params_);
        state_ = std::move(r.state);
        py::list out;
        for (const auto& e : r.events) out.append(to_py(rts::to_json(e)));
        return out;
    }

private:
    std::string node_;
    rts::CoffeeState state_;
    rts::CoffeeParams params_;
};

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "sensert core bindings";

    py::register_exception<DecodeError>(m, "DeadLetter", PyExc_ValueError);
    py::register_exception<InvalidFilter>(m, "InvalidFilter", PyExc_ValueError);
    py::register_exception<InvalidTopic>(m, "InvalidTopic", PyExc_ValueError);
    py::register_exception<meta::ValidationError>(m, "ValidationError", PyExc_ValueError);
    py::register_exception<meta::CycleError>(m, "CycleError", PyExc_ValueError);
    py::register_exception<meta::KindError>(m, "KindError", PyExc_ValueError);
    py::register_exception<bench::NoData>(m, "NoData", PyExc_ValueError);
    py::register_exception<net::AddressInUse>(m, "AddressInUse", PyExc_OSError);

    m.def("topic_matches", py::overload_cast<std::string_view, std::string_view>(&topic_matches), py::arg("filter"),
          py::arg("topic"));
    m.def(
        "validate_filter", [](const std::string& f) { TopicFilter::parse(f); }, py::arg("filter"),
        "Raises InvalidFilter when the filter is malformed.");

    m.def(
        "encode_publish",
        [](const std::string& topic, const std::string& payload) {
            const auto b = wire::encode_packet(wire::Publish{topic, payload, false});
            return py::bytes(reinterpret_cast<const char*>(b.data()), b.size());
        },
        py::arg("topic"), py::arg("payload"));
    m.def(
        "decode_packet",
        [](const py::bytes& data) -> py::object {
            const std::string s = data;
            auto r = wire::decode_packet(std::span(reinterpret_cast<const std::uint8_t*>(s.data()), s.size()));
            if (std::holds_alternative<wire::NeedMoreData>(r)) return py::none();
            if (auto* bad = std::get_if<wire::Malformed>(&r)) throw py::value_error("malformed: " + bad->reason);
            const auto& d = std::get<wire::Decoded>(r);
            py::dict out;
            out["type"] = std::string(wire::to_string(wire::packet_type(d.packet)));
            out["consumed"] = d.consumed;
            if (auto* p = std::get_if<wire::Publish>(&d.packet)) {
                out["topic"] = p->topic;
                out["payload"] = py::bytes(p->payload);
            }
            return out;
        },
        py::arg("data"), "Decodes one frame; None when more bytes are needed.");

    m.def(
        "decode",
        [](const std::string& topic, const std::string& payload, std::optional<EpochMs> received_at) {
            static const auto registry = DecoderRegistry::with_defaults();
            auto r = registry->decode(RawSensorMessage{topic, payload, received_at.value_or(now_ms())});
            if (auto* dl = std::get_if<DeadLetter>(&r)) throw DecodeError(dl->reason);
            return to_py(to_json(std::get<NormalizedMessage>(r)));
        },
        py::arg("topic"), py::arg("payload"), py::arg("received_at") = py::none(),
        "Normalizes one raw sensor message; raises DeadLetter when no decoder accepts it.");

    m.def("parse_iso8601", [](const std::string& s) { return parse_iso8601(s); });
    m.def("format_iso8601", &format_iso8601);

    m.def(
        "stats", [](std::vector<double> v) { return stats_dict(bench::stats(std::move(v))); }, py::arg("deltas"),
        "Mean, population stddev and nearest-rank percentiles.");

    py::class_<bench::TapCollector>(m, "TapCollector")
        .def(py::init<>())
        .def(
            "tap",
            [](bench::TapCollector& c, const std::string& point, const std::string& device, EpochMs sim_t0, EpochMs t) {
                return c.tap(tap_point(point), bench::MsgKey{device, sim_t0}, t);
            },
            py::arg("point"), py::arg("device_id"), py::arg("sim_t0"), py::arg("t"))
        .def_property_readonly("duplicates", &bench::TapCollector::duplicates)
        .def("__len__", &bench::TapCollector::size)
        .def(
            "record",
            [](const bench::TapCollector& c, const std::string& device, EpochMs sim_t0) -> py::object {
                auto r = c.find({device, sim_t0});
                if (!r) return py::none();
                py::dict d;
                for (auto p : bench::kTapPoints) d[py::str(bench::to_string(p))] = r->at(p);
                d["complete"] = r->complete();
                d["monotone"] = r->monotone();
                return d;
            },
            py::arg("device_id"), py::arg("sim_t0"));

    py::class_<CoffeeDetector>(m, "CoffeeDetector")
        .def(py::init<std::string>(), py::arg("node_id") = "coffee-1")
        .def("step", &CoffeeDetector::step, py::arg("ts"), py::arg("weight_kg"), py::arg("grinder_w") = 0.0,
             py::arg("brewer_w") = 0.0, "Feeds one sample; returns the derived events it produced.");

    m.def(
        "scenario",
        [](const std::string& name) {
            const auto s = sim::scenario_by_name(name);
            py::dict d;
            d["name"] = s.name;
            d["duration_s"] = s.duration_s;
            d["time_scale"] = s.time_scale;
            d["ground_truth"] = s.ground_truth_types();
            py::list devs;
            for (const auto& p : s.devices) devs.append(to_py(p.to_json()));
            d["devices"] = devs;
            return d;
        },
        py::arg("name"));

    m.def(
        "simulate_offline",
        [](const std::string& scenario_name, std::uint64_t seed, std::optional<double> duration_s) {
            const auto s = sim::scenario_by_name(scenario_name);
            py::list out;
            for (const auto& e : sim::simulate_offline({}, s, duration_s.value_or(s.duration_s), seed)) {
                py::dict d;
                d["device_id"] = e.device_id;
                d["family"] = sim::to_string(e.family);
                d["ts"] = e.ts;
                d["topic"] = e.topic;
                d["payload"] = e.payload;
                d["overridden"] = e.overridden;
                out.append(d);
            }
            return out;
        },
        py::arg("scenario") = "coffee", py::arg("seed") = 1, py::arg("duration_s") = py::none(),
        "Emissions of a scenario in simulated time, without any network.");

    py::class_<meta::MetadataStore>(m, "MetadataStore")
        .def(py::init<>())
        .def_static("open", &meta::MetadataStore::open, py::arg("directory"))
        .def(
            "import_json",
            [](meta::MetadataStore& s, const py::object& doc) {
                return meta::import_json(s, py::isinstance<py::str>(doc) ? json::parse(doc.cast<std::string>())
                                                                         : from_py(doc));
            },
            py::arg("doc"), "Returns (containers, devices) imported.")
        .def(
            "upsert_device",
            [](meta::MetadataStore& s, const std::string& id, const py::object& ts, const py::dict& doc) {
                s.upsert_device(meta::DeviceMetadataRecord{id, time_arg(ts), from_py(doc)});
            },
            py::arg("device_id"), py::arg("ts"), py::arg("doc"))
        .def(
            "reparent",
            [](meta::MetadataStore& s, const std::string& id, const std::string& parent, const py::object& t) {
                s.reparent(id, parent, time_arg(t));
            },
            py::arg("container_id"), py::arg("new_parent_id"), py::arg("t"))
        .def(
            "get_asof",
            [](const meta::MetadataStore& s, const std::string& id, const py::object& t) -> py::object {
                auto r = s.get_asof(id, time_arg(t));
                if (!r) return py::none();
                py::dict d;
                d["device_id"] = r->device_id;
                d["ts"] = r->ts;
                d["doc"] = to_py(r->doc);
                return d;
            },
            py::arg("device_id"), py::arg("t"))
        .def(
            "devices_in",
            [](const meta::MetadataStore& s, const std::string& c, const py::object& t) {
                return s.devices_in(c, time_arg(t));
            },
            py::arg("container_id"), py::arg("t"))
        .def(
            "parent_asof",
            [](const meta::MetadataStore& s, const std::string& c, const py::object& t) {
                return s.parent_asof(c, time_arg(t));
            },
            py::arg("container_id"), py::arg("t"))
        .def("device_ids", &meta::MetadataStore::device_ids)
        .def("container_ids", &meta::MetadataStore::container_ids)
        .def("__len__", &meta::MetadataStore::record_count);

    py::class_<broker::Broker>(m, "Broker")
        .def(py::init([](const std::string& listen, const std::string& name) {
                 broker::BrokerConfig c;
                 c.name = name;
                 c.listen = net::Endpoint::parse(listen);
                 return std::make_unique<broker::Broker>(c);
             }),
             py::arg("listen") = "127.0.0.1:0", py::arg("name") = "broker")
        .def("start", &broker::Broker::start, py::call_guard<py::gil_scoped_release>())
        .def("stop", &broker::Broker::stop, py::call_guard<py::gil_scoped_release>())
        .def_property_readonly("endpoint", [](const broker::Broker& b) { return b.endpoint().str(); })
        .def("stats", [](const broker::Broker& b) {
            const auto s = b.stats();
            return py::dict(py::arg("msgs_in") = s.msgs_in, py::arg("msgs_out") = s.msgs_out,
                            py::arg("drops") = s.drops, py::arg("live_sessions") = s.live_sessions);
        });

    m.def(
        "run_demo",
        [](const std::string& scenario_name, std::uint64_t seed) {
            DemoOptions o;
            o.scenario = scenario_name;
            o.seed = seed;
            DemoResult r;
            {
                py::gil_scoped_release release;
                r = run_demo(o);
            }
            py::dict d;
            d["expected"] = r.expected;
            d["detected"] = r.detected;
            d["matches"] = r.matches();
            d["run"] = experiment_dict(r.run);
            return d;
        },
        py::arg("scenario") = "coffee", py::arg("seed") = 1,
        "Runs brokers, RTS and a scenario in-process on ephemeral ports.");

    m.def(
        "run_experiment",
        [](std::size_t n, double duration_s, std::uint64_t seed) {
            bench::ExperimentOptions o;
            o.n_sensors = n;
            o.duration_s = duration_s;
            o.seed = seed;
            bench::ExperimentResult r;
            {
                py::gil_scoped_release release;
                r = bench::run_experiment(o);
            }
            return experiment_dict(r);
        },
        py::arg("n_sensors"), py::arg("duration_s"), py::arg("seed") = 1, "Live latency run with tap statistics.");
}
