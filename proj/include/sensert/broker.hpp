// SPDX-License-Identifier: Apache-2.0
//
// QoS-0 publish/subscribe broker with broker-to-broker bridges.
#pragma once

#include "sensert/mqtt_client.hpp"
#include "sensert/net.hpp"
#include "sensert/topic.hpp"
#include "sensert/wire.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <condition_variable>
#include <deque>
#include <filesystem>
#include <functional>
#include <list>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

namespace sensert::broker {

using LinkId = std::uint64_t;
using SharedPublish = std::shared_ptr<const wire::Publish>;

enum class BridgeDirection { In, Out, Both };

BridgeDirection parse_direction(std::string_view s);
std::string_view to_string(BridgeDirection d);

struct BridgeRule {
    net::Endpoint remote;
    BridgeDirection direction = BridgeDirection::In;
    std::string filter = "#";
    /// Wildcard-free topic fragment prepended locally, e.g. "ttn".
    std::string local_prefix;

    /// Throws std::invalid_argument on a bad filter or prefix.
    void validate() const;
    std::string local_topic(std::string_view remote_topic) const;
    /// nullopt when the local topic lies outside the prefix.
    std::optional<std::string> remote_topic(std::string_view local_topic) const;
    std::string local_filter() const;
};

struct BrokerConfig {
    std::string name = "broker";
    net::Endpoint listen{"127.0.0.1", 1883};
    std::vector<BridgeRule> bridges;
    std::size_t session_queue_capacity = 1024;
    /// Used by bridges; tests shorten it.
    std::chrono::milliseconds bridge_backoff_base{500};

    static BrokerConfig from_json(const nlohmann::json& j);
    static BrokerConfig load(const std::filesystem::path& path);
};

struct BrokerStats {
    std::uint64_t msgs_in = 0;
    std::uint64_t msgs_out = 0;
    std::uint64_t drops = 0;
    std::uint64_t live_sessions = 0;
};

/// Bounded queue in front of one link's writer. Full queues drop their oldest
/// entry so publishers never wait.
class Outbox {
public:
    explicit Outbox(std::size_t capacity) : capacity_(capacity) {}

    /// Returns false when an older message had to be dropped.
    bool push(SharedPublish p);
    std::optional<SharedPublish> pop(std::chrono::milliseconds timeout);
    void close();
    std::uint64_t drops() const { return drops_.load(); }
    std::size_t size() const;

private:
    std::size_t capacity_;
    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::deque<SharedPublish> queue_;
    bool closed_ = false;
    std::atomic<std::uint64_t> drops_{0};
};

/// Subscription table and fan-out. Concurrent route_publish calls share a
/// read lock; (un)subscribe takes it exclusively.
class Router {
public:
    LinkId new_link_id() { return next_link_.fetch_add(1); }

    /// Registers a link. Returns the link previously holding `client_id`, if
    /// any; the caller must close it.
    std::optional<LinkId> attach(LinkId link, std::string client_id, std::shared_ptr<Outbox> outbox);
    void detach(LinkId link);

    /// One return code per filter: 0x00 accepted, 0x80 rejected.
    std::vector<std::uint8_t> subscribe(LinkId link, const std::vector<std::string>& filters);
    void unsubscribe(LinkId link, const std::vector<std::string>& filters);

    /// Enqueues one copy for every link (other than `origin`) holding at
    /// least one matching filter. Returns the number of links targeted.
    std::size_t route_publish(LinkId origin, const wire::Publish& p);

    /// Links that route_publish would target, without enqueuing.
    std::vector<LinkId> matching_links(LinkId origin, std::string_view topic) const;

    std::uint64_t drops() const { return drops_.load(); }
    std::size_t link_count() const;

private:
    struct Route {
        std::string client_id;
        std::vector<TopicFilter> filters;
        std::shared_ptr<Outbox> outbox;
    };

    mutable std::shared_mutex mutex_;
    std::unordered_map<LinkId, Route> routes_;
    std::atomic<LinkId> next_link_{1};
    std::atomic<std::uint64_t> drops_{0};
};

struct Ingress {
    LinkId link = 0;
    bool via_bridge = false;
};

class Broker {
public:
    /// Invoked for every publish entering this broker, before routing.
    using PublishHook = std::function<void(const wire::Publish&, const Ingress&)>;

    explicit Broker(BrokerConfig config);
    ~Broker();
    Broker(const Broker&) = delete;
    Broker& operator=(const Broker&) = delete;

    /// Binds the listener and starts bridges. Throws net::AddressInUse.
    void start();
    void stop();

    void set_publish_hook(PublishHook hook) { hook_ = std::move(hook); }

    net::Endpoint endpoint() const { return endpoint_; }
    const BrokerConfig& config() const { return config_; }
    BrokerStats stats() const;
    Router& router() { return router_; }

    /// Every bridge connected and subscribed.
    bool wait_bridges_ready(std::chrono::milliseconds timeout);

    /// Routes a publish as if it arrived on `ingress`.
    std::size_t ingest(wire::Publish p, const Ingress& ingress);

private:
    class Connection;
    class Bridge;

    void accept_loop();
    void reap(bool all);
    void close_link(LinkId link);

    BrokerConfig config_;
    net::Endpoint endpoint_;
    Router router_;
    PublishHook hook_;

    std::unique_ptr<net::Listener> listener_;
    std::thread accept_thread_;
    std::atomic<bool> running_{false};

    std::mutex connections_mutex_;
    std::list<std::shared_ptr<Connection>> connections_;
    std::vector<std::unique_ptr<Bridge>> bridges_;

    std::atomic<std::uint64_t> msgs_in_{0};
    std::atomic<std::uint64_t> msgs_out_{0};
    std::atomic<std::uint64_t> live_sessions_{0};

    friend class Connection;
    friend class Bridge;
};

/// Starts a broker and returns the running handle.
std::unique_ptr<Broker> serve(BrokerConfig config);

}  // namespace sensert::broker
