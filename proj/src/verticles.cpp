// SPDX-License-Identifier: Apache-2.0
#include "sensert/verticles.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <sstream>

namespace sensert::rts {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace std::chrono_literals;

std::string feed_address(const NormalizedMessage& m) { return "feed/" + m.family + "/" + m.device_id; }

// ---------------------------------------------------------------- FeedHandler

FeedHandler::FeedHandler(FeedHandlerOptions options, std::shared_ptr<DecoderRegistry> registry)
    : options_(std::move(options)), registry_(std::move(registry)) {}

FeedHandler::~FeedHandler() { FeedHandler::stop(); }

void FeedHandler::start(EventBus& bus) {
    bus_ = &bus;
    publisher_ = bus.make_publisher();
    if (options_.broker.port == 0) return;  // ingest() only
    ClientOptions co;
    co.remote = options_.broker;
    co.client_id = options_.client_id;
    co.subscriptions = options_.filters;
    client_ = std::make_unique<MqttClient>(co, [this](wire::Publish&& p) {
        if (p.topic.rfind("sensert/", 0) == 0) return;
        ingest(RawSensorMessage{std::move(p.topic), std::move(p.payload), now_ms()});
    });
    client_->start();
}

void FeedHandler::stop() {
    if (client_) {
        client_->stop();
        client_.reset();
    }
}

bool FeedHandler::wait_ready(std::chrono::milliseconds timeout) {
    return client_ && client_->wait_ready(timeout);
}

void FeedHandler::ingest(const RawSensorMessage& m) {
    ++in_;
    auto outcome = registry_->decode(m);
    std::optional<DeadLetter> dead;
    if (auto* n = std::get_if<NormalizedMessage>(&outcome)) {
        std::string address = feed_address(*n);
        try {
            bus_->publish(*publisher_, std::move(address), std::move(*n));
            ++out_;
            return;
        } catch (const InvalidTopic& e) {
            dead = DeadLetter{m, std::string("device id not usable as an address: ") + e.what()};
        }
    } else {
        dead = std::get<DeadLetter>(std::move(outcome));
    }
    ++dead_;
    Cooked attrs{{"topic", m.topic}, {"reason", dead->reason}};
    if (is_valid_utf8(m.payload)) attrs["payload"] = m.payload;
    else attrs["payload_b64"] = base64_encode(m.payload);
    bus_->publish(*publisher_, std::string(kFeedDeadLetter),
                  make_event("dead-letter", "feedhandler", std::max<EpochMs>(1, m.received_at), std::move(attrs),
                             "FeedHandler"));
    if (options_.republish_dead_letters && client_)
        client_->publish(kDeadLetterTopic, to_json(*dead).dump());
}

// ---------------------------------------------------------------- MessageFiler

namespace {

void check_device_id(const std::string& id) {
    if (id.empty() || id == "." || id == ".." || id.find_first_of("/\\") != std::string::npos)
        throw std::runtime_error("device id not usable as a directory name: '" + id + "'");
}

}  // namespace

MessageFiler::MessageFiler(fs::path root, std::string filter)
    : SubscriberVerticle("MessageFiler", [&] {
          auto p = SubscriptionPolicy::on(std::move(filter));
          p.queue_capacity = 65536;
          return p;
      }()),
      root_(std::move(root)) {}

fs::path MessageFiler::day_file(const fs::path& root, const std::string& device_id, EpochMs ts) {
    const auto d = utc_date(ts);
    char y[8], mo[4], da[12];
    std::snprintf(y, sizeof y, "%04d", d.year);
    std::snprintf(mo, sizeof mo, "%02u", d.month);
    std::snprintf(da, sizeof da, "%02u.jsonl", d.day);
    return root / device_id / y / mo / da;
}

fs::path MessageFiler::latest_file(const fs::path& root, const std::string& device_id) {
    return root / device_id / "latest.json";
}

void MessageFiler::write(const NormalizedMessage& m) {
    check_device_id(m.device_id);
    const std::string line = to_json(m).dump();
    const fs::path day = day_file(root_, m.device_id, m.ts);
    fs::create_directories(day.parent_path());
    {
        std::ofstream out(day, std::ios::app | std::ios::binary);
        out << line << '\n';
        out.flush();
        if (!out) throw std::runtime_error("cannot append to " + day.string());
    }

    const fs::path latest = latest_file(root_, m.device_id);
    auto it = latest_ts_.find(m.device_id);
    if (it == latest_ts_.end()) {
        EpochMs current = std::numeric_limits<EpochMs>::min();
        std::ifstream in(latest);
        if (in) {
            auto j = json::parse(in, nullptr, false);
            if (!j.is_discarded() && j.contains("ts") && j["ts"].is_number_integer()) current = j["ts"];
        }
        it = latest_ts_.emplace(m.device_id, current).first;
    }
    if (m.ts < it->second) return;
    const fs::path tmp = latest.string() + ".tmp";
    {
        std::ofstream out(tmp, std::ios::trunc | std::ios::binary);
        out << line << '\n';
        out.flush();
        if (!out) throw std::runtime_error("cannot write " + tmp.string());
    }
    fs::rename(tmp, latest);
    it->second = m.ts;
}

void MessageFiler::handle(const BusEnvelope& env) {
    const auto* m = env.message();
    if (!m) return;
    try {
        write(*m);
        ++written_;
    } catch (const std::exception& e) {
        ++errors_;
        spdlog::warn("filer: {}", e.what());
        bus().publish(publisher(), std::string(kFilerError),
                      make_event("filer-error", m->device_id, std::max<EpochMs>(1, m->ts),
                                 {{"reason", std::string(e.what())}, {"address", env.address}}, "MessageFiler"));
    }
}

// ---------------------------------------------------------------- ThresholdWatch

ThresholdRule ThresholdRule::from_json(const json& j) {
    ThresholdRule r;
    r.filter = j.at("filter").get<std::string>();
    TopicFilter::parse(r.filter);
    r.field = j.at("field").get<std::string>();
    const auto op = j.at("op").get<std::string>();
    if (op != ">" && op != "<") throw std::invalid_argument("rule op must be '>' or '<', got '" + op + "'");
    r.op = op[0];
    r.value = j.at("value").get<double>();
    r.hysteresis = j.value("hysteresis", 0.0);
    if (r.hysteresis < 0) throw std::invalid_argument("hysteresis must be non-negative");
    r.name = j.value("name", r.field + op + j.at("value").dump());
    return r;
}

json ThresholdRule::to_json() const {
    return {{"name", name}, {"filter", filter}, {"field", field}, {"op", std::string(1, op)},
            {"value", value}, {"hysteresis", hysteresis}};
}

std::vector<ThresholdRule> rules_from_json(const json& j) {
    const json& list = j.is_object() ? j.at("rules") : j;
    std::vector<ThresholdRule> out;
    for (const auto& r : list) out.push_back(ThresholdRule::from_json(r));
    return out;
}

std::vector<ThresholdRule> load_rules(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open rules file " + path.string());
    return rules_from_json(json::parse(in));
}

ThresholdTracker::ThresholdTracker(std::vector<ThresholdRule> rules) : rules_(std::move(rules)) {
    for (const auto& r : rules_) filters_.push_back(TopicFilter::parse(r.filter));
}

std::vector<DerivedEvent> ThresholdTracker::step(const std::string& address, const NormalizedMessage& m) {
    std::vector<DerivedEvent> out;
    const auto levels = split_levels(address);
    for (std::size_t i = 0; i < rules_.size(); ++i) {
        if (!topic_matches(filters_[i], levels)) continue;
        const auto& r = rules_[i];
        const auto v = cooked_number(m.cooked, r.field);
        if (!v) {
            ++missing_field_;
            continue;
        }
        const bool beyond = r.op == '>' ? *v > r.value : *v < r.value;
        const bool back = r.op == '>' ? *v <= r.value - r.hysteresis : *v >= r.value + r.hysteresis;
        bool& active = active_[{i, m.device_id}];
        const char* type = nullptr;
        if (!active && beyond) type = "threshold-crossed";
        else if (active && back) type = "threshold-cleared";
        if (!type) continue;
        active = !active;
        out.push_back(make_event(type, m.device_id, m.ts,
                                 {{"rule", r.name},
                                  {"field", r.field},
                                  {"value", *v},
                                  {"threshold", r.value},
                                  {"op", std::string(1, r.op)}},
                                 "ThresholdWatch"));
    }
    return out;
}

namespace {

SubscriptionPolicy rules_policy(const std::vector<ThresholdRule>& rules) {
    SubscriptionPolicy p;
    for (const auto& r : rules) p.filters.push_back(r.filter);
    p.queue_capacity = 8192;
    return p;
}

}  // namespace

ThresholdWatch::ThresholdWatch(std::vector<ThresholdRule> rules)
    : SubscriberVerticle("ThresholdWatch", rules_policy(rules)), tracker_(std::move(rules)) {}

void ThresholdWatch::handle(const BusEnvelope& env) {
    const auto* m = env.message();
    if (!m) return;
    auto events = tracker_.step(env.address, *m);
    missing_ = tracker_.missing_field();
    for (auto& e : events) bus().publish(publisher(), "event/threshold/" + e.scope, std::move(e));
}

// ---------------------------------------------------------------- MessageRouter

Route Route::from_json(const json& j) {
    Route r;
    r.filter = j.at("filter").get<std::string>();
    TopicFilter::parse(r.filter);
    r.remote = net::Endpoint::parse(j.at("remote").get<std::string>());
    r.topic_template = j.value("topic", std::string("{address}"));
    r.client_id = j.value("client_id", std::string{});
    return r;
}

std::string render_topic(const std::string& tmpl, const BusEnvelope& env) {
    std::string device, family;
    if (const auto* m = env.message()) {
        device = m->device_id;
        family = m->family;
    } else if (const auto* e = env.event()) {
        device = e->scope;
        family = "event";
    }
    std::string out;
    for (std::size_t i = 0; i < tmpl.size();) {
        auto sub = [&](std::string_view key, const std::string& value) {
            if (tmpl.compare(i, key.size(), key) != 0) return false;
            out += value;
            i += key.size();
            return true;
        };
        if (sub("{address}", env.address) || sub("{device_id}", device) || sub("{family}", family)) continue;
        out += tmpl[i++];
    }
    return out;
}

class MessageRouter::Forwarder : public SubscriberVerticle {
public:
    Forwarder(Route route, std::size_t index)
        : SubscriberVerticle("MessageRouter", [&] {
              auto p = SubscriptionPolicy::on(route.filter);
              p.queue_capacity = kRouterBuffer;
              return p;
          }()),
          route_(std::move(route)) {
        ClientOptions co;
        co.remote = route_.remote;
        co.client_id = route_.client_id.empty() ? "rts-router-" + std::to_string(index) : route_.client_id;
        co.backoff_base = 100ms;
        co.backoff_cap = 2s;
        client_ = std::make_unique<MqttClient>(co);
    }
    ~Forwarder() override { Forwarder::stop(); }

    void start(EventBus& bus) override {
        client_->start();
        SubscriberVerticle::start(bus);
    }
    void stop() override {
        SubscriberVerticle::stop();
        client_->stop();
    }

    std::atomic<std::uint64_t> forwarded{0};

protected:
    void handle(const BusEnvelope& env) override {
        const std::string topic = render_topic(route_.topic_template, env);
        const std::string payload = body_to_json(*env.body).dump();
        // Holding the envelope here lets the subscription queue act as the
        // outage buffer, so order is kept across reconnects.
        while (!stopping()) {
            if (client_->publish(topic, payload)) {
                ++forwarded;
                return;
            }
            client_->wait_ready(50ms);
        }
    }

private:
    Route route_;
    std::unique_ptr<MqttClient> client_;
};

MessageRouter::MessageRouter(std::vector<Route> routes) : routes_(std::move(routes)) {}

MessageRouter::~MessageRouter() { MessageRouter::stop(); }

void MessageRouter::start(EventBus& bus) {
    for (std::size_t i = 0; i < routes_.size(); ++i) {
        forwarders_.push_back(std::make_unique<Forwarder>(routes_[i], i));
        forwarders_.back()->start(bus);
    }
}

void MessageRouter::stop() {
    for (auto& f : forwarders_) f->stop();
}

std::uint64_t MessageRouter::forwarded() const {
    std::uint64_t n = 0;
    for (const auto& f : forwarders_) n += f->forwarded.load();
    return n;
}

std::uint64_t MessageRouter::dropped() const {
    std::uint64_t n = 0;
    for (const auto& f : forwarders_)
        if (auto s = f->subscription()) n += s->counters().drops;
    return n;
}

// ---------------------------------------------------------------- DataMonitor

class DataMonitor::Session {
public:
    Session(net::Socket socket, EventBus& bus, SubscriptionPtr sub)
        : socket_(std::move(socket)), bus_(bus), sub_(std::move(sub)) {
        reader_ = std::thread([this] { read_loop(); });
        writer_ = std::thread([this] { write_loop(); });
    }
    ~Session() { close(); }

    void close() {
        done_ = true;
        bus_.unsubscribe(sub_);
        socket_.shutdown();
        if (reader_.joinable()) reader_.join();
        if (writer_.joinable()) writer_.join();
    }

    bool finished() const { return done_.load(); }
    SubscriptionPtr subscription() const { return sub_; }

private:
    bool send(const std::string& line) {
        std::lock_guard lk(send_mutex_);
        return socket_.send_all(line);
    }

    void reply_error(const std::string& what) { send(json{{"error", what}}.dump() + "\n"); }

    void handle_line(std::string_view line) {
        if (line.empty()) return;
        json req = json::parse(line, nullptr, false);
        if (req.is_discarded() || !req.is_object()) return reply_error("request is not a JSON object");
        const auto method = req.value("method", std::string{});
        if (method != "subscribe" && method != "unsubscribe")
            return reply_error("unknown method '" + method + "'");
        auto f = req.find("filters");
        if (f == req.end() || !f->is_array()) return reply_error("filters must be an array of strings");
        std::vector<std::string> filters;
        for (const auto& x : *f) {
            if (!x.is_string()) return reply_error("filters must be an array of strings");
            filters.push_back(x.get<std::string>());
        }
        try {
            if (method == "subscribe") sub_->add_filters(filters);
            else sub_->remove_filters(filters);
        } catch (const InvalidFilter& e) {
            return reply_error(e.what());
        }
        send(json{{"ok", method}, {"filters", sub_->filters()}}.dump() + "\n");
    }

    void read_loop() {
        std::string buffer;
        std::array<std::uint8_t, 4096> chunk{};
        while (!done_) {
            auto n = socket_.recv_some(chunk, 200ms);
            if (!n) continue;
            if (*n <= 0) break;
            buffer.append(reinterpret_cast<const char*>(chunk.data()), static_cast<std::size_t>(*n));
            std::size_t pos;
            while ((pos = buffer.find('\n')) != std::string::npos) {
                std::string line = buffer.substr(0, pos);
                buffer.erase(0, pos + 1);
                if (!line.empty() && line.back() == '\r') line.pop_back();
                handle_line(line);
            }
            if (buffer.size() > (1u << 20)) {
                reply_error("request line too long");
                break;
            }
        }
        done_ = true;
    }

    void write_loop() {
        while (!done_) {
            auto env = sub_->receive(200ms);
            if (!env) continue;
            if (!send(to_json(*env).dump() + "\n")) break;
        }
        done_ = true;
    }

    net::Socket socket_;
    EventBus& bus_;
    SubscriptionPtr sub_;
    std::mutex send_mutex_;
    std::atomic<bool> done_{false};
    std::thread reader_, writer_;
};

DataMonitor::DataMonitor(DataMonitorOptions options) : options_(std::move(options)) {}

DataMonitor::~DataMonitor() { DataMonitor::stop(); }

void DataMonitor::start(EventBus& bus) {
    bus_ = &bus;
    listener_ = std::make_unique<net::Listener>(options_.listen);
    endpoint_ = listener_->local();
    running_ = true;
    acceptor_ = std::thread([this] { accept_loop(); });
    spdlog::info("DataMonitor listening on {}", endpoint_.str());
}

void DataMonitor::stop() {
    if (!running_.exchange(false)) return;
    if (acceptor_.joinable()) acceptor_.join();
    listener_->close();
    std::list<std::shared_ptr<Session>> sessions;
    {
        std::lock_guard lk(mutex_);
        sessions.swap(sessions_);
    }
    for (auto& s : sessions) {
        s->close();
        std::lock_guard lk(mutex_);
        retired_.push_back(s->subscription());
    }
}

void DataMonitor::accept_loop() {
    while (running_) {
        auto sock = listener_->accept(200ms);
        std::lock_guard lk(mutex_);
        for (auto it = sessions_.begin(); it != sessions_.end();) {
            if ((*it)->finished()) {
                (*it)->close();
                retired_.push_back((*it)->subscription());
                it = sessions_.erase(it);
            } else {
                ++it;
            }
        }
        if (!sock) continue;
        SubscriptionPolicy p;
        p.queue_capacity = options_.client_queue_capacity;
        p.timeliness_bound = options_.timeliness_bound;
        sessions_.push_back(std::make_shared<Session>(std::move(*sock), *bus_, bus_->subscribe(p)));
    }
}

std::size_t DataMonitor::clients() const {
    std::lock_guard lk(mutex_);
    std::size_t n = 0;
    for (const auto& s : sessions_) n += s->finished() ? 0 : 1;
    return n;
}

std::vector<SubscriptionPtr> DataMonitor::subscriptions() const {
    std::lock_guard lk(mutex_);
    std::vector<SubscriptionPtr> out = retired_;
    for (const auto& s : sessions_) out.push_back(s->subscription());
    return out;
}

// ---------------------------------------------------------------- MonitorClient

MonitorClient::MonitorClient(const net::Endpoint& server) : socket_(net::connect_tcp(server)) {}

void MonitorClient::send_line(std::string_view line) {
    std::string s(line);
    s.push_back('\n');
    if (!socket_.send_all(s)) closed_ = true;
}

void MonitorClient::subscribe(const std::vector<std::string>& filters) {
    send_line(json{{"method", "subscribe"}, {"filters", filters}}.dump());
}

void MonitorClient::unsubscribe(const std::vector<std::string>& filters) {
    send_line(json{{"method", "unsubscribe"}, {"filters", filters}}.dump());
}

std::optional<json> MonitorClient::next(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::array<std::uint8_t, 8192> chunk{};
    for (;;) {
        if (auto pos = buffer_.find('\n'); pos != std::string::npos) {
            auto j = json::parse(std::string_view(buffer_).substr(0, pos), nullptr, false);
            buffer_.erase(0, pos + 1);
            if (j.is_discarded()) continue;
            return j;
        }
        if (closed_) return std::nullopt;
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        if (left.count() < 0) return std::nullopt;
        auto n = socket_.recv_some(chunk, left);
        if (!n) return std::nullopt;
        if (*n <= 0) {
            closed_ = true;
            continue;
        }
        buffer_.append(reinterpret_cast<const char*>(chunk.data()), static_cast<std::size_t>(*n));
    }
}

std::optional<json> MonitorClient::next_envelope(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (;;) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
        auto j = next(std::max(left, std::chrono::milliseconds(0)));
        if (!j) return std::nullopt;
        if (j->contains("address")) return j;
    }
}

}  // namespace sensert::rts
