// SPDX-License-Identifier: Apache-2.0
#include "sensert/bus.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <set>

namespace sensert::rts {

namespace {

std::mutex& vocabulary_mutex() {
    static std::mutex m;
    return m;
}

std::set<std::string, std::less<>>& vocabulary() {
    static std::set<std::string, std::less<>> v{
        "coffee-grinding", "new-pot",           "pot-poured",  "pot-removed",
        "pot-empty",       "coffee-level",      "threshold-crossed",
        "threshold-cleared", "dead-letter",     "filer-error",
    };
    return v;
}

}  // namespace

void register_event_type(std::string event_type) {
    std::lock_guard lk(vocabulary_mutex());
    vocabulary().insert(std::move(event_type));
}

bool known_event_type(std::string_view event_type) {
    std::lock_guard lk(vocabulary_mutex());
    return vocabulary().find(event_type) != vocabulary().end();
}

DerivedEvent make_event(std::string event_type, std::string scope, EpochMs ts, Cooked attributes,
                        std::string source_verticle) {
    if (!known_event_type(event_type))
        throw std::invalid_argument("unregistered event type: " + event_type);
    if (ts <= 0) throw std::invalid_argument("event timestamp must be positive");
    return DerivedEvent{std::move(event_type), std::move(scope), ts, std::move(attributes),
                        std::move(source_verticle)};
}

nlohmann::ordered_json to_json(const DerivedEvent& e) {
    nlohmann::ordered_json j;
    j["event_type"] = e.event_type;
    j["scope"] = e.scope;
    j["ts"] = e.ts;
    nlohmann::ordered_json attrs = nlohmann::ordered_json::object();
    for (const auto& [k, v] : e.attributes) std::visit([&](const auto& x) { attrs[k] = x; }, v);
    j["attributes"] = std::move(attrs);
    j["source_verticle"] = e.source_verticle;
    return j;
}

DerivedEvent derived_event_from_json(const nlohmann::json& j) {
    DerivedEvent e;
    e.event_type = j.at("event_type").get<std::string>();
    e.scope = j.value("scope", std::string{});
    e.ts = j.at("ts").get<EpochMs>();
    if (auto it = j.find("attributes"); it != j.end())
        for (const auto& [k, v] : it->items()) flatten_into(e.attributes, v, k);
    e.source_verticle = j.value("source_verticle", std::string{});
    return e;
}

nlohmann::ordered_json body_to_json(const BusBody& b) {
    return std::visit([](const auto& x) { return to_json(x); }, b);
}

nlohmann::ordered_json to_json(const BusEnvelope& e) {
    nlohmann::ordered_json j;
    j["address"] = e.address;
    j["published_at"] = e.published_at;
    j["body"] = body_to_json(*e.body);
    if (e.stale) j["stale"] = true;
    return j;
}

// ---------------------------------------------------------------- Subscription

Subscription::Subscription(std::uint64_t id, SubscriptionPolicy policy, ClockFn clock)
    : id_(id),
      capacity_(std::max<std::size_t>(1, policy.queue_capacity)),
      overflow_(policy.overflow),
      bound_(policy.timeliness_bound),
      stale_action_(policy.stale_action),
      clock_(std::move(clock)) {
    for (const auto& f : policy.filters) filters_.push_back(TopicFilter::parse(f));
}

bool Subscription::offer(const BusEnvelope& env, const std::vector<std::string_view>& levels) {
    {
        std::lock_guard lk(mutex_);
        if (closed_) return false;
        if (!std::any_of(filters_.begin(), filters_.end(),
                         [&](const TopicFilter& f) { return topic_matches(f, levels); }))
            return false;
        ++counters_.matched;
        if (queue_.size() >= capacity_) {
            ++counters_.drops;
            if (overflow_ == Overflow::DropNewest) return true;
            queue_.pop_front();
        }
        queue_.push_back(env);
    }
    cv_.notify_one();
    return true;
}

std::optional<BusEnvelope> Subscription::receive(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::unique_lock lk(mutex_);
    for (;;) {
        if (!cv_.wait_until(lk, deadline, [this] { return !queue_.empty() || closed_; }))
            return std::nullopt;
        if (queue_.empty()) return std::nullopt;
        BusEnvelope env = std::move(queue_.front());
        queue_.pop_front();
        if (bound_ && clock_() - env.published_at > bound_->count()) {
            if (stale_action_ == StaleAction::DropCounted) {
                ++counters_.stale_drops;
                continue;
            }
            env.stale = true;
        }
        ++counters_.delivered;
        return env;
    }
}

void Subscription::add_filters(const std::vector<std::string>& filters) {
    std::vector<TopicFilter> parsed;
    for (const auto& f : filters) parsed.push_back(TopicFilter::parse(f));
    std::lock_guard lk(mutex_);
    for (auto& f : parsed) {
        if (std::find(filters_.begin(), filters_.end(), f) == filters_.end())
            filters_.push_back(std::move(f));
    }
}

void Subscription::remove_filters(const std::vector<std::string>& filters) {
    std::lock_guard lk(mutex_);
    std::erase_if(filters_, [&](const TopicFilter& f) {
        return std::find(filters.begin(), filters.end(), f.str()) != filters.end();
    });
}

std::vector<std::string> Subscription::filters() const {
    std::lock_guard lk(mutex_);
    std::vector<std::string> out;
    for (const auto& f : filters_) out.push_back(f.str());
    return out;
}

SubscriptionCounters Subscription::counters() const {
    std::lock_guard lk(mutex_);
    auto c = counters_;
    c.queued = queue_.size();
    return c;
}

bool Subscription::closed() const {
    std::lock_guard lk(mutex_);
    return closed_;
}

void Subscription::close() {
    {
        std::lock_guard lk(mutex_);
        closed_ = true;
    }
    cv_.notify_all();
}

// ---------------------------------------------------------------- EventBus

EventBus::EventBus(ClockFn clock) : clock_(std::move(clock)), anonymous_(make_publisher()) {}

SubscriptionPtr EventBus::subscribe(SubscriptionPolicy policy) {
    auto sub = std::make_shared<Subscription>(next_sub_++, std::move(policy), clock_);
    std::unique_lock lk(mutex_);
    subs_.push_back(sub);
    return sub;
}

void EventBus::unsubscribe(const SubscriptionPtr& sub) {
    if (!sub) return;
    {
        std::unique_lock lk(mutex_);
        std::erase(subs_, sub);
    }
    sub->close();
}

std::shared_ptr<Publisher> EventBus::make_publisher() {
    return std::make_shared<Publisher>(next_publisher_++);
}

std::size_t EventBus::publish(Publisher& from, std::string address, BusBody body) {
    TopicName::parse(address);
    BusEnvelope env;
    env.body = std::make_shared<const BusBody>(std::move(body));
    env.publisher = from.id();
    std::size_t matched = 0;
    std::shared_lock lk(mutex_);
    // Sequence and timestamp are taken under the lock so one publisher's
    // envelopes reach every queue in sequence order.
    env.seq = from.next_seq_++;
    env.published_at = clock_();
    env.address = std::move(address);
    const auto levels = split_levels(env.address);
    for (const auto& s : subs_) {
        if (s->offer(env, levels)) ++matched;
    }
    ++published_;
    return matched;
}

std::size_t EventBus::publish(std::string address, BusBody body) {
    return publish(*anonymous_, std::move(address), std::move(body));
}

std::size_t EventBus::subscription_count() const {
    std::shared_lock lk(mutex_);
    return subs_.size();
}

// ---------------------------------------------------------------- verticles

SubscriberVerticle::SubscriberVerticle(std::string name, SubscriptionPolicy policy)
    : name_(std::move(name)), policy_(std::move(policy)) {}

SubscriberVerticle::~SubscriberVerticle() { SubscriberVerticle::stop(); }

void SubscriberVerticle::start(EventBus& bus) {
    if (running_.exchange(true)) return;
    bus_ = &bus;
    publisher_ = bus.make_publisher();
    sub_ = bus.subscribe(policy_);
    thread_ = std::thread([this] { run(); });
}

void SubscriberVerticle::stop() {
    if (!running_.exchange(false)) return;
    bus_->unsubscribe(sub_);
    if (thread_.joinable()) thread_.join();
}

void SubscriberVerticle::run() {
    for (;;) {
        auto env = sub_->receive(std::chrono::milliseconds(500));
        if (!env) {
            if (sub_->closed()) return;
            continue;
        }
        try {
            handle(*env);
        } catch (const std::exception& e) {
            spdlog::error("{}: failed to handle {}: {}", name_, env->address, e.what());
        }
        ++handled_;
    }
}

VerticleHost::~VerticleHost() { undeploy_all(); }

DeploymentId VerticleHost::deploy(std::shared_ptr<Verticle> v) {
    v->start(bus_);
    std::lock_guard lk(mutex_);
    const DeploymentId id = next_++;
    verticles_[id] = std::move(v);
    return id;
}

void VerticleHost::undeploy(DeploymentId id) {
    std::shared_ptr<Verticle> v;
    {
        std::lock_guard lk(mutex_);
        auto it = verticles_.find(id);
        if (it == verticles_.end()) return;
        v = std::move(it->second);
        verticles_.erase(it);
    }
    v->stop();
}

void VerticleHost::undeploy_all() {
    std::map<DeploymentId, std::shared_ptr<Verticle>> all;
    {
        std::lock_guard lk(mutex_);
        all.swap(verticles_);
    }
    // Reverse deployment order, so producers stop after their consumers.
    for (auto it = all.rbegin(); it != all.rend(); ++it) it->second->stop();
}

std::size_t VerticleHost::deployed() const {
    std::lock_guard lk(mutex_);
    return verticles_.size();
}

}  // namespace sensert::rts
