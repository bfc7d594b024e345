// SPDX-License-Identifier: Apache-2.0
//
// The shared event bus of the real-time server. All verticles publish to and
// subscribe from one bus; each subscription owns a bounded queue, so one slow
// consumer never holds up a publisher or another consumer.
#pragma once

#include "sensert/clock.hpp"
#include "sensert/decoders.hpp"
#include "sensert/topic.hpp"

#include <nlohmann/json.hpp>

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <shared_mutex>
#include <string>
#include <thread>
#include <variant>
#include <vector>

namespace sensert::rts {

struct DerivedEvent {
    std::string event_type;
    /// Device or container the event is about.
    std::string scope;
    EpochMs ts = 0;
    Cooked attributes;
    std::string source_verticle;

    bool operator==(const DerivedEvent&) const = default;
};

/// Throws std::invalid_argument for an unregistered event type or ts <= 0.
DerivedEvent make_event(std::string event_type, std::string scope, EpochMs ts, Cooked attributes,
                        std::string source_verticle);
void register_event_type(std::string event_type);
bool known_event_type(std::string_view event_type);

nlohmann::ordered_json to_json(const DerivedEvent& e);
DerivedEvent derived_event_from_json(const nlohmann::json& j);

using BusBody = std::variant<NormalizedMessage, DerivedEvent>;

struct BusEnvelope {
    std::string address;
    std::shared_ptr<const BusBody> body;
    EpochMs published_at = 0;
    std::uint64_t publisher = 0;
    /// Strictly increasing per publisher.
    std::uint64_t seq = 0;
    /// Set when delivered past its timeliness bound under DeliverFlagged.
    bool stale = false;

    const NormalizedMessage* message() const { return std::get_if<NormalizedMessage>(body.get()); }
    const DerivedEvent* event() const { return std::get_if<DerivedEvent>(body.get()); }
};

nlohmann::ordered_json body_to_json(const BusBody& b);
/// {"address":..., "published_at":N, "body":{...}} plus "stale":true when flagged.
nlohmann::ordered_json to_json(const BusEnvelope& e);

enum class Overflow { DropOldest, DropNewest };
enum class StaleAction { DropCounted, DeliverFlagged };

struct SubscriptionPolicy {
    std::vector<std::string> filters;
    std::size_t queue_capacity = 1024;
    Overflow overflow = Overflow::DropOldest;
    std::optional<std::chrono::milliseconds> timeliness_bound;
    StaleAction stale_action = StaleAction::DropCounted;

    static SubscriptionPolicy on(std::string filter) {
        SubscriptionPolicy p;
        p.filters.push_back(std::move(filter));
        return p;
    }
};

struct SubscriptionCounters {
    std::uint64_t matched = 0;
    std::uint64_t delivered = 0;
    std::uint64_t drops = 0;
    std::uint64_t stale_drops = 0;
    std::uint64_t queued = 0;

    /// matched == delivered + drops + stale_drops + queued.
    bool balanced() const { return matched == delivered + drops + stale_drops + queued; }
};

class EventBus;

class Subscription {
public:
    Subscription(std::uint64_t id, SubscriptionPolicy policy, ClockFn clock);

    /// Waits for the next envelope. Returns nullopt on timeout, or once the
    /// subscription is closed and drained.
    std::optional<BusEnvelope> receive(std::chrono::milliseconds timeout);
    std::optional<BusEnvelope> try_receive() { return receive(std::chrono::milliseconds(0)); }

    void add_filters(const std::vector<std::string>& filters);
    void remove_filters(const std::vector<std::string>& filters);
    std::vector<std::string> filters() const;

    SubscriptionCounters counters() const;
    std::uint64_t id() const { return id_; }
    bool closed() const;

private:
    friend class EventBus;
    bool offer(const BusEnvelope& env, const std::vector<std::string_view>& levels);
    void close();

    const std::uint64_t id_;
    const std::size_t capacity_;
    const Overflow overflow_;
    const std::optional<std::chrono::milliseconds> bound_;
    const StaleAction stale_action_;
    ClockFn clock_;

    mutable std::mutex mutex_;
    std::condition_variable cv_;
    std::vector<TopicFilter> filters_;
    std::deque<BusEnvelope> queue_;
    bool closed_ = false;
    SubscriptionCounters counters_;
};

using SubscriptionPtr = std::shared_ptr<Subscription>;

/// Identity plus sequence counter for one publishing task.
class Publisher {
public:
    explicit Publisher(std::uint64_t id) : id_(id) {}
    std::uint64_t id() const { return id_; }

private:
    friend class EventBus;
    std::uint64_t id_;
    std::atomic<std::uint64_t> next_seq_{1};
};

class EventBus {
public:
    explicit EventBus(ClockFn clock = now_ms);

    /// Throws InvalidFilter.
    SubscriptionPtr subscribe(SubscriptionPolicy policy);
    /// Detaches and closes; queued envelopes can still be drained.
    void unsubscribe(const SubscriptionPtr& sub);

    std::shared_ptr<Publisher> make_publisher();

    /// Enqueues to every matching subscription and returns how many matched.
    /// Never waits on a subscriber. Throws InvalidTopic on a bad address.
    std::size_t publish(Publisher& from, std::string address, BusBody body);
    std::size_t publish(std::string address, BusBody body);

    std::uint64_t published() const { return published_.load(); }
    std::size_t subscription_count() const;
    EpochMs now() const { return clock_(); }

private:
    ClockFn clock_;
    mutable std::shared_mutex mutex_;
    std::vector<SubscriptionPtr> subs_;
    std::atomic<std::uint64_t> next_sub_{1};
    std::atomic<std::uint64_t> next_publisher_{1};
    std::shared_ptr<Publisher> anonymous_;
    std::atomic<std::uint64_t> published_{0};
};

// ---------------------------------------------------------------- verticles

/// Independently deployable stream processor. Verticles talk to each other
/// only through the bus.
class Verticle {
public:
    virtual ~Verticle() = default;
    virtual std::string name() const = 0;
    virtual void start(EventBus& bus) = 0;
    /// Must stop all of the verticle's threads and subscriptions.
    virtual void stop() = 0;
};

/// Drains one subscription on a dedicated thread and hands each envelope to
/// handle().
class SubscriberVerticle : public Verticle {
public:
    SubscriberVerticle(std::string name, SubscriptionPolicy policy);
    ~SubscriberVerticle() override;

    std::string name() const override { return name_; }
    void start(EventBus& bus) override;
    void stop() override;

    SubscriptionPtr subscription() const { return sub_; }
    std::uint64_t handled() const { return handled_.load(); }

protected:
    virtual void handle(const BusEnvelope& env) = 0;
    EventBus& bus() { return *bus_; }
    Publisher& publisher() { return *publisher_; }
    bool stopping() const { return !running_.load(); }

private:
    void run();

    std::string name_;
    SubscriptionPolicy policy_;
    EventBus* bus_ = nullptr;
    std::shared_ptr<Publisher> publisher_;
    SubscriptionPtr sub_;
    std::thread thread_;
    std::atomic<bool> running_{false};
    std::atomic<std::uint64_t> handled_{0};
};

using DeploymentId = std::uint64_t;

class VerticleHost {
public:
    explicit VerticleHost(EventBus& bus) : bus_(bus) {}
    ~VerticleHost();
    VerticleHost(const VerticleHost&) = delete;
    VerticleHost& operator=(const VerticleHost&) = delete;

    DeploymentId deploy(std::shared_ptr<Verticle> v);
    /// Stops the verticle; other verticles' subscriptions are untouched.
    void undeploy(DeploymentId id);
    void undeploy_all();
    std::size_t deployed() const;
    EventBus& bus() { return bus_; }

private:
    EventBus& bus_;
    mutable std::mutex mutex_;
    std::map<DeploymentId, std::shared_ptr<Verticle>> verticles_;
    DeploymentId next_ = 1;
};

}  // namespace sensert::rts
