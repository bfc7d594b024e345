// SPDX-License-Identifier: Apache-2.0
#include "sensert/stack.hpp"

#include <spdlog/spdlog.h>

#include <fstream>
#include <thread>

namespace sensert {

namespace fs = std::filesystem;
using nlohmann::json;
using namespace std::chrono_literals;

StackConfig StackConfig::from_json(const json& j, const fs::path& base) {
    StackConfig c;
    auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() || base.empty() ? fs::path(p) : base / p; };
    if (auto b = j.find("brokers"); b != j.end()) {
        if (b->contains("local")) c.local = net::Endpoint::parse((*b)["local"].get<std::string>());
        if (b->contains("ttn")) c.ttn = net::Endpoint::parse((*b)["ttn"].get<std::string>());
        if (b->contains("zigbee")) c.zigbee = net::Endpoint::parse((*b)["zigbee"].get<std::string>());
    }
    if (j.contains("broker")) c.external_broker = net::Endpoint::parse(j["broker"].get<std::string>());
    if (j.contains("monitor")) c.monitor = net::Endpoint::parse(j["monitor"].get<std::string>());
    if (j.contains("data_root")) c.data_root = resolve(j["data_root"].get<std::string>());
    if (auto r = j.find("rules"); r != j.end()) {
        c.rules = r->is_string() ? rts::load_rules(resolve(r->get<std::string>())) : rts::rules_from_json(*r);
    }
    if (auto r = j.find("routes"); r != j.end())
        for (const auto& x : *r) c.routes.push_back(rts::Route::from_json(x));
    if (j.contains("fleet")) c.fleet_file = resolve(j["fleet"].get<std::string>());
    c.coffee = j.value("coffee", true);
    c.monitor_queue_capacity = j.value("monitor_queue_capacity", c.monitor_queue_capacity);
    c.validate();
    return c;
}

StackConfig StackConfig::load(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    return from_json(json::parse(in), path.parent_path());
}

void StackConfig::validate() const {
    const net::Endpoint* eps[] = {&local, &ttn, &zigbee, &monitor};
    for (std::size_t i = 0; i < 4; ++i)
        for (std::size_t k = i + 1; k < 4; ++k)
            if (eps[i]->port != 0 && *eps[i] == *eps[k])
                throw std::invalid_argument("stack addresses must be distinct: " + eps[i]->str());
}

Stack::Stack(StackConfig config) : config_(std::move(config)) { config_.validate(); }

Stack::~Stack() { stop(); }

void Stack::set_broker_hooks(broker::Broker::PublishHook local, broker::Broker::PublishHook ttn,
                             broker::Broker::PublishHook zigbee) {
    hooks_[0] = std::move(local);
    hooks_[1] = std::move(ttn);
    hooks_[2] = std::move(zigbee);
}

void Stack::start() {
    if (started_) throw std::logic_error("stack already started");
    started_ = true;  // so a partial start is still torn down
    auto make = [](std::string name, net::Endpoint listen) {
        broker::BrokerConfig bc;
        bc.name = std::move(name);
        bc.listen = std::move(listen);
        bc.bridge_backoff_base = 100ms;
        return bc;
    };
    if (!config_.external_broker) start_brokers(make);
    start_rts();
}

template <class Make>
void Stack::start_brokers(Make make) {
    ttn_ = std::make_unique<broker::Broker>(make("ttn", config_.ttn));
    zigbee_ = std::make_unique<broker::Broker>(make("zigbee", config_.zigbee));
    if (hooks_[1]) ttn_->set_publish_hook(hooks_[1]);
    if (hooks_[2]) zigbee_->set_publish_hook(hooks_[2]);
    ttn_->start();
    zigbee_->start();

    auto lc = make("local", config_.local);
    for (const auto* remote : {ttn_.get(), zigbee_.get()}) {
        broker::BridgeRule r;
        r.remote = remote->endpoint();
        r.direction = broker::BridgeDirection::In;
        r.filter = "#";
        lc.bridges.push_back(r);
    }
    local_ = std::make_unique<broker::Broker>(lc);
    if (hooks_[0]) local_->set_publish_hook(hooks_[0]);
    local_->start();
}

void Stack::start_rts() {
    host_ = std::make_unique<rts::VerticleHost>(bus_);
    // Consumers first, so nothing the feed publishes goes unseen.
    rts::DataMonitorOptions mo;
    mo.listen = config_.monitor;
    mo.client_queue_capacity = config_.monitor_queue_capacity;
    monitor_ = std::make_shared<rts::DataMonitor>(mo);
    host_->deploy(monitor_);
    if (!config_.data_root.empty()) {
        fs::create_directories(config_.data_root);
        filer_ = std::make_shared<rts::MessageFiler>(config_.data_root);
        host_->deploy(filer_);
    }
    if (config_.coffee) {
        coffee_ = std::make_shared<rts::RTCoffee>(config_.coffee_params);
        host_->deploy(coffee_);
    }
    if (!config_.rules.empty()) {
        watch_ = std::make_shared<rts::ThresholdWatch>(config_.rules);
        host_->deploy(watch_);
    }
    if (!config_.routes.empty()) {
        router_ = std::make_shared<rts::MessageRouter>(config_.routes);
        host_->deploy(router_);
    }
    rts::FeedHandlerOptions fo;
    fo.broker = config_.external_broker ? *config_.external_broker : local_->endpoint();
    feed_ = std::make_shared<rts::FeedHandler>(fo, std::shared_ptr<DecoderRegistry>(DecoderRegistry::with_defaults()));
    host_->deploy(feed_);
    const auto b = brokers();
    if (config_.external_broker)
        spdlog::info("rts up: broker={} monitor={}", b.local.str(), monitor_->endpoint().str());
    else
        spdlog::info("stack up: local={} ttn={} zigbee={} monitor={}", b.local.str(), b.ttn.str(), b.zigbee.str(),
                 monitor_->endpoint().str());
}

bool Stack::wait_ready(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    if (local_ && !local_->wait_bridges_ready(timeout)) return false;
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(deadline - std::chrono::steady_clock::now());
    return feed_->wait_ready(std::max(left, 0ms));
}

std::vector<rts::SubscriptionPtr> Stack::subscriptions() const {
    std::vector<rts::SubscriptionPtr> out;
    for (const rts::SubscriberVerticle* v :
         {static_cast<const rts::SubscriberVerticle*>(filer_.get()), static_cast<const rts::SubscriberVerticle*>(coffee_.get()),
          static_cast<const rts::SubscriberVerticle*>(watch_.get())})
        if (v && v->subscription()) out.push_back(v->subscription());
    if (monitor_)
        for (auto& s : monitor_->subscriptions()) out.push_back(s);
    return out;
}

bool Stack::drain(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    std::uint64_t last_in = feed_ ? feed_->in() : 0;
    int quiet = 0;
    while (std::chrono::steady_clock::now() < deadline) {
        std::this_thread::sleep_for(50ms);
        bool empty = true;
        for (const rts::SubscriberVerticle* v :
             {static_cast<const rts::SubscriberVerticle*>(filer_.get()), static_cast<const rts::SubscriberVerticle*>(coffee_.get()),
              static_cast<const rts::SubscriberVerticle*>(watch_.get())})
            if (v && v->subscription() && v->subscription()->counters().queued > 0) empty = false;
        const std::uint64_t in = feed_ ? feed_->in() : 0;
        quiet = (empty && in == last_in) ? quiet + 1 : 0;
        last_in = in;
        if (quiet >= 4) return true;
    }
    return false;
}

void Stack::stop() {
    if (!started_) return;
    started_ = false;
    if (host_) host_->undeploy_all();
    if (local_) local_->stop();
    if (zigbee_) zigbee_->stop();
    if (ttn_) ttn_->stop();
}

sim::BrokerAddresses Stack::brokers() const {
    if (!local_) return sim::BrokerAddresses{*config_.external_broker, *config_.external_broker, *config_.external_broker};
    return sim::BrokerAddresses{local_->endpoint(), ttn_->endpoint(), zigbee_->endpoint()};
}

net::Endpoint Stack::monitor_endpoint() const { return monitor_->endpoint(); }

}  // namespace sensert
