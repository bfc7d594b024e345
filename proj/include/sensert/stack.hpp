// SPDX-License-Identifier: Apache-2.0
//
// Whole system in one process: ttn and zigbee brokers bridged into a local
// broker, and the real-time server with its verticles on top.
#pragma once

#include "sensert/broker.hpp"
#include "sensert/coffee.hpp"
#include "sensert/simfleet.hpp"
#include "sensert/verticles.hpp"

#include <filesystem>
#include <memory>
#include <optional>

namespace sensert {

struct StackConfig {
    net::Endpoint local{"127.0.0.1", 0};
    net::Endpoint ttn{"127.0.0.1", 0};
    net::Endpoint zigbee{"127.0.0.1", 0};
    net::Endpoint monitor{"127.0.0.1", 0};
    /// RTS only: attach the FeedHandler to this broker and start no brokers.
    std::optional<net::Endpoint> external_broker;
    /// Empty disables the MessageFiler.
    std::filesystem::path data_root;
    std::vector<rts::ThresholdRule> rules;
    std::vector<rts::Route> routes;
    bool coffee = true;
    rts::CoffeeParams coffee_params;
    std::optional<std::filesystem::path> fleet_file;
    std::size_t monitor_queue_capacity = 1024;

    /// {"brokers":{"local":..,"ttn":..,"zigbee":..}, "monitor":.., "data_root":..,
    ///  "rules": [..] | "<file>", "routes": [..], "fleet": "<file>"}
    static StackConfig from_json(const nlohmann::json& j, const std::filesystem::path& base = {});
    static StackConfig load(const std::filesystem::path& path);
    /// Throws std::invalid_argument when fixed addresses collide.
    void validate() const;
};

class Stack {
public:
    explicit Stack(StackConfig config);
    ~Stack();
    Stack(const Stack&) = delete;
    Stack& operator=(const Stack&) = delete;

    /// Must be called before start().
    void set_broker_hooks(broker::Broker::PublishHook local, broker::Broker::PublishHook ttn,
                          broker::Broker::PublishHook zigbee);

    /// Throws net::AddressInUse when a port is taken.
    void start();
    bool wait_ready(std::chrono::milliseconds timeout);
    /// Waits until verticle queues are empty and the feed is quiet.
    bool drain(std::chrono::milliseconds timeout = std::chrono::seconds(5));
    void stop();

    /// Local/ttn/zigbee addresses; with an external broker all three are it.
    sim::BrokerAddresses brokers() const;
    net::Endpoint monitor_endpoint() const;

    rts::EventBus& bus() { return bus_; }
    rts::VerticleHost& host() { return *host_; }
    rts::FeedHandler& feed() { return *feed_; }
    rts::MessageFiler* filer() { return filer_.get(); }
    rts::DataMonitor& monitor() { return *monitor_; }
    /// Null with an external broker.
    broker::Broker* local_broker() { return local_.get(); }
    const StackConfig& config() const { return config_; }

    /// Every bus subscription the stack's verticles hold (for audits).
    std::vector<rts::SubscriptionPtr> subscriptions() const;

private:
    template <class Make>
    void start_brokers(Make make);
    void start_rts();

    StackConfig config_;
    broker::Broker::PublishHook hooks_[3];
    std::unique_ptr<broker::Broker> ttn_, zigbee_, local_;
    rts::EventBus bus_;
    std::unique_ptr<rts::VerticleHost> host_;
    std::shared_ptr<rts::FeedHandler> feed_;
    std::shared_ptr<rts::MessageFiler> filer_;
    std::shared_ptr<rts::ThresholdWatch> watch_;
    std::shared_ptr<rts::RTCoffee> coffee_;
    std::shared_ptr<rts::DataMonitor> monitor_;
    std::shared_ptr<rts::MessageRouter> router_;
    bool started_ = false;
};

}  // namespace sensert
