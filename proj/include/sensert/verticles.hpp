// SPDX-License-Identifier: Apache-2.0
//
// The stock verticles of the real-time server.
#pragma once

#include "sensert/bus.hpp"
#include "sensert/decoders.hpp"
#include "sensert/mqtt_client.hpp"
#include "sensert/net.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <filesystem>
#include <list>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace sensert::rts {

inline constexpr std::string_view kFeedDeadLetter = "feed/deadletter";
inline constexpr std::string_view kFilerError = "sys/filer/error";

std::string feed_address(const NormalizedMessage& m);

// ---------------------------------------------------------------- FeedHandler

struct FeedHandlerOptions {
    net::Endpoint broker;
    std::vector<std::string> filters{"#"};
    std::string client_id = "rts-feedhandler";
    /// Also republish dead letters to the broker on kDeadLetterTopic.
    bool republish_dead_letters = true;
};

/// Entry point of broker traffic into the bus: decode, then publish on
/// "feed/<family>/<device_id>".
class FeedHandler : public Verticle {
public:
    FeedHandler(FeedHandlerOptions options, std::shared_ptr<DecoderRegistry> registry);
    ~FeedHandler() override;

    std::string name() const override { return "FeedHandler"; }
    void start(EventBus& bus) override;
    void stop() override;

    /// Decode and publish one message. Used by the broker path and by tests.
    void ingest(const RawSensorMessage& m);

    bool wait_ready(std::chrono::milliseconds timeout);
    std::uint64_t in() const { return in_.load(); }
    std::uint64_t out() const { return out_.load(); }
    std::uint64_t dead() const { return dead_.load(); }
    const DecoderRegistry& registry() const { return *registry_; }

private:
    FeedHandlerOptions options_;
    std::shared_ptr<DecoderRegistry> registry_;
    EventBus* bus_ = nullptr;
    std::shared_ptr<Publisher> publisher_;
    std::unique_ptr<MqttClient> client_;
    std::atomic<std::uint64_t> in_{0}, out_{0}, dead_{0};
};

// ---------------------------------------------------------------- MessageFiler

/// Appends NormalizedMessages to <root>/<device>/<YYYY>/<MM>/<DD>.jsonl and
/// keeps <root>/<device>/latest.json at the newest reading.
class MessageFiler : public SubscriberVerticle {
public:
    explicit MessageFiler(std::filesystem::path root, std::string filter = "feed/#");

    static std::filesystem::path day_file(const std::filesystem::path& root, const std::string& device_id,
                                          EpochMs ts);
    static std::filesystem::path latest_file(const std::filesystem::path& root, const std::string& device_id);

    std::uint64_t written() const { return written_.load(); }
    std::uint64_t errors() const { return errors_.load(); }

    /// Writes one message synchronously. Throws on I/O failure.
    void write(const NormalizedMessage& m);

protected:
    void handle(const BusEnvelope& env) override;

private:
    std::filesystem::path root_;
    std::map<std::string, EpochMs> latest_ts_;
    std::atomic<std::uint64_t> written_{0}, errors_{0};
};

// ---------------------------------------------------------------- ThresholdWatch

struct ThresholdRule {
    std::string name;
    /// Bus address filter, e.g. "feed/co2/#".
    std::string filter;
    std::string field;
    char op = '>';
    double value = 0;
    double hysteresis = 0;

    static ThresholdRule from_json(const nlohmann::json& j);
    nlohmann::json to_json() const;
};

/// Accepts either a list of rules or {"rules": [...]}.
std::vector<ThresholdRule> rules_from_json(const nlohmann::json& j);
std::vector<ThresholdRule> load_rules(const std::filesystem::path& path);

/// Edge-triggered evaluation for every rule and device.
class ThresholdTracker {
public:
    explicit ThresholdTracker(std::vector<ThresholdRule> rules);

    std::vector<DerivedEvent> step(const std::string& address, const NormalizedMessage& m);

    const std::vector<ThresholdRule>& rules() const { return rules_; }
    std::uint64_t missing_field() const { return missing_field_; }

private:
    std::vector<ThresholdRule> rules_;
    std::vector<TopicFilter> filters_;
    std::map<std::pair<std::size_t, std::string>, bool> active_;
    std::uint64_t missing_field_ = 0;
};

/// Publishes on "event/threshold/<device_id>".
class ThresholdWatch : public SubscriberVerticle {
public:
    explicit ThresholdWatch(std::vector<ThresholdRule> rules);
    std::uint64_t missing_field() const { return missing_.load(); }

protected:
    void handle(const BusEnvelope& env) override;

private:
    ThresholdTracker tracker_;
    std::atomic<std::uint64_t> missing_{0};
};

// ---------------------------------------------------------------- MessageRouter

struct Route {
    std::string filter;
    net::Endpoint remote;
    /// "{address}", "{device_id}" and "{family}" are substituted.
    std::string topic_template = "{address}";
    std::string client_id;

    static Route from_json(const nlohmann::json& j);
};

std::string render_topic(const std::string& tmpl, const BusEnvelope& env);

inline constexpr std::size_t kRouterBuffer = 10'000;

/// Forwards matching envelopes to remote brokers as JSON. While a remote is
/// unreachable up to kRouterBuffer envelopes wait, oldest dropped first.
class MessageRouter : public Verticle {
public:
    explicit MessageRouter(std::vector<Route> routes);
    ~MessageRouter() override;

    std::string name() const override { return "MessageRouter"; }
    void start(EventBus& bus) override;
    void stop() override;

    std::uint64_t forwarded() const;
    std::uint64_t dropped() const;

private:
    class Forwarder;
    std::vector<Route> routes_;
    std::vector<std::unique_ptr<Forwarder>> forwarders_;
};

// ---------------------------------------------------------------- DataMonitor

struct DataMonitorOptions {
    net::Endpoint listen{"127.0.0.1", 0};
    std::size_t client_queue_capacity = 1024;
    std::optional<std::chrono::milliseconds> timeliness_bound;
};

/// Newline-delimited JSON push server. Clients send
///   {"method":"subscribe","filters":[...]} / {"method":"unsubscribe","filters":[...]}
/// and receive one envelope per line.
class DataMonitor : public Verticle {
public:
    explicit DataMonitor(DataMonitorOptions options = {});
    ~DataMonitor() override;

    std::string name() const override { return "DataMonitor"; }
    /// Throws net::AddressInUse when the port is taken.
    void start(EventBus& bus) override;
    void stop() override;

    net::Endpoint endpoint() const { return endpoint_; }
    std::size_t clients() const;
    /// Bus subscriptions of connected and past clients.
    std::vector<SubscriptionPtr> subscriptions() const;

private:
    class Session;
    void accept_loop();

    DataMonitorOptions options_;
    EventBus* bus_ = nullptr;
    std::unique_ptr<net::Listener> listener_;
    net::Endpoint endpoint_;
    std::thread acceptor_;
    std::atomic<bool> running_{false};
    mutable std::mutex mutex_;
    std::list<std::shared_ptr<Session>> sessions_;
    std::vector<SubscriptionPtr> retired_;
};

/// Minimal DataMonitor client.
class MonitorClient {
public:
    explicit MonitorClient(const net::Endpoint& server);

    void subscribe(const std::vector<std::string>& filters);
    void unsubscribe(const std::vector<std::string>& filters);
    void send_line(std::string_view line);

    /// Next line parsed as JSON, or nullopt on timeout / close.
    std::optional<nlohmann::json> next(std::chrono::milliseconds timeout);
    /// Next envelope line (skips acknowledgements).
    std::optional<nlohmann::json> next_envelope(std::chrono::milliseconds timeout);
    bool closed() const { return closed_; }
    void close() { socket_.close(); }

private:
    net::Socket socket_;
    std::string buffer_;
    bool closed_ = false;
};

}  // namespace sensert::rts
