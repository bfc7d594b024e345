// SPDX-License-Identifier: Apache-2.0
#include "sensert/broker.hpp"

#include <spdlog/spdlog.h>

#include <algorithm>
#include <fstream>

namespace sensert::broker {

using namespace std::chrono_literals;

BridgeDirection parse_direction(std::string_view s) {
    if (s == "in") return BridgeDirection::In;
    if (s == "out") return BridgeDirection::Out;
    if (s == "both") return BridgeDirection::Both;
    throw std::invalid_argument("bridge direction must be in|out|both, got '" + std::string(s) + "'");
}

std::string_view to_string(BridgeDirection d) {
    switch (d) {
        case BridgeDirection::In: return "in";
        case BridgeDirection::Out: return "out";
        case BridgeDirection::Both: return "both";
    }
    return "?";
}

void BridgeRule::validate() const {
    TopicFilter::parse(filter);
    if (!local_prefix.empty()) {
        // Validates UTF-8 and rejects wildcards.
        TopicName::parse(local_prefix);
    }
}

std::string BridgeRule::local_topic(std::string_view remote_topic) const {
    if (local_prefix.empty()) return std::string(remote_topic);
    return local_prefix + "/" + std::string(remote_topic);
}

std::optional<std::string> BridgeRule::remote_topic(std::string_view local) const {
    if (local_prefix.empty()) return std::string(local);
    const std::string head = local_prefix + "/";
    if (local.size() <= head.size() || local.substr(0, head.size()) != head) return std::nullopt;
    return std::string(local.substr(head.size()));
}

std::string BridgeRule::local_filter() const {
    return local_prefix.empty() ? filter : local_prefix + "/" + filter;
}

BrokerConfig BrokerConfig::from_json(const nlohmann::json& j) {
    BrokerConfig c;
    c.name = j.value("name", c.name);
    if (j.contains("listen")) c.listen = net::Endpoint::parse(j.at("listen").get<std::string>());
    for (const auto& b : j.value("bridges", nlohmann::json::array())) {
        BridgeRule r;
        r.remote = net::Endpoint::parse(b.at("remote").get<std::string>());
        r.direction = parse_direction(b.value("direction", "in"));
        r.filter = b.value("filter", "#");
        r.local_prefix = b.value("local_prefix", "");
        r.validate();
        c.bridges.push_back(std::move(r));
    }
    if (j.contains("session_queue_capacity"))
        c.session_queue_capacity = j.at("session_queue_capacity").get<std::size_t>();
    return c;
}

BrokerConfig BrokerConfig::load(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open broker config " + path.string());
    return from_json(nlohmann::json::parse(in));
}

// ---------------------------------------------------------------- Outbox

bool Outbox::push(SharedPublish p) {
    bool dropped = false;
    {
        std::lock_guard lk(mutex_);
        if (closed_) return true;
        if (queue_.size() >= capacity_) {
            queue_.pop_front();
            dropped = true;
        }
        queue_.push_back(std::move(p));
    }
    cv_.notify_one();
    if (dropped) ++drops_;
    return !dropped;
}

std::optional<SharedPublish> Outbox::pop(std::chrono::milliseconds timeout) {
    std::unique_lock lk(mutex_);
    if (!cv_.wait_for(lk, timeout, [this] { return !queue_.empty() || closed_; })) return std::nullopt;
    if (queue_.empty()) return std::nullopt;
    auto p = std::move(queue_.front());
    queue_.pop_front();
    return p;
}

void Outbox::close() {
    {
        std::lock_guard lk(mutex_);
        closed_ = true;
    }
    cv_.notify_all();
}

std::size_t Outbox::size() const {
    std::lock_guard lk(mutex_);
    return queue_.size();
}

// ---------------------------------------------------------------- Router

std::optional<LinkId> Router::attach(LinkId link, std::string client_id,
                                     std::shared_ptr<Outbox> outbox) {
    std::unique_lock lk(mutex_);
    std::optional<LinkId> previous;
    for (const auto& [id, route] : routes_) {
        if (route.client_id == client_id) {
            previous = id;
            break;
        }
    }
    if (previous) routes_.erase(*previous);
    routes_[link] = Route{std::move(client_id), {}, std::move(outbox)};
    return previous;
}

void Router::detach(LinkId link) {
    std::unique_lock lk(mutex_);
    routes_.erase(link);
}

std::vector<std::uint8_t> Router::subscribe(LinkId link, const std::vector<std::string>& filters) {
    std::vector<std::uint8_t> granted;
    granted.reserve(filters.size());
    std::unique_lock lk(mutex_);
    auto it = routes_.find(link);
    for (const auto& raw : filters) {
        if (it == routes_.end()) {
            granted.push_back(0x80);
            continue;
        }
        try {
            auto f = TopicFilter::parse(raw);
            auto& fs = it->second.filters;
            if (std::find(fs.begin(), fs.end(), f) == fs.end()) fs.push_back(std::move(f));
            granted.push_back(0x00);
        } catch (const InvalidFilter&) {
            granted.push_back(0x80);
        }
    }
    return granted;
}

void Router::unsubscribe(LinkId link, const std::vector<std::string>& filters) {
    std::unique_lock lk(mutex_);
    auto it = routes_.find(link);
    if (it == routes_.end()) return;
    auto& fs = it->second.filters;
    std::erase_if(fs, [&](const TopicFilter& f) {
        return std::find(filters.begin(), filters.end(), f.str()) != filters.end();
    });
}

std::size_t Router::route_publish(LinkId origin, const wire::Publish& p) {
    const auto levels = split_levels(p.topic);
    SharedPublish shared;
    std::size_t targeted = 0;
    std::shared_lock lk(mutex_);
    for (const auto& [id, route] : routes_) {
        if (id == origin) continue;
        const bool hit = std::any_of(route.filters.begin(), route.filters.end(),
                                     [&](const TopicFilter& f) { return topic_matches(f, levels); });
        if (!hit) continue;
        if (!shared) shared = std::make_shared<const wire::Publish>(p);
        if (!route.outbox->push(shared)) ++drops_;
        ++targeted;
    }
    return targeted;
}

std::vector<LinkId> Router::matching_links(LinkId origin, std::string_view topic) const {
    const auto levels = split_levels(topic);
    std::vector<LinkId> out;
    std::shared_lock lk(mutex_);
    for (const auto& [id, route] : routes_) {
        if (id == origin) continue;
        if (std::any_of(route.filters.begin(), route.filters.end(),
                        [&](const TopicFilter& f) { return topic_matches(f, levels); }))
            out.push_back(id);
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::size_t Router::link_count() const {
    std::shared_lock lk(mutex_);
    return routes_.size();
}

// ---------------------------------------------------------------- Connection

class Broker::Connection {
public:
    Connection(Broker& broker, net::Socket socket)
        : broker_(broker),
          socket_(std::move(socket)),
          link_(broker.router_.new_link_id()),
          outbox_(std::make_shared<Outbox>(broker.config_.session_queue_capacity)) {}

    void start() { reader_ = std::thread([this] { read_loop(); }); }
    void close() { socket_.shutdown(); }
    bool finished() const { return finished_.load(); }
    void join() {
        if (reader_.joinable()) reader_.join();
    }
    LinkId link() const { return link_; }

private:
    bool write(const wire::Packet& p) {
        const auto frame = wire::encode_packet(p);
        std::lock_guard lk(write_mutex_);
        return socket_.send_all(frame);
    }

    void write_loop() {
        while (auto m = outbox_->pop(std::chrono::hours(24))) {
            const auto frame = wire::encode_packet(**m);
            std::lock_guard lk(write_mutex_);
            if (!socket_.send_all(frame)) {
                socket_.shutdown();
                return;
            }
            ++broker_.msgs_out_;
        }
    }

    // Reads until one full packet is available; false on close, timeout or
    // garbage.
    std::optional<wire::Packet> next_packet(std::chrono::milliseconds idle_limit) {
        auto last_rx = std::chrono::steady_clock::now();
        for (;;) {
            auto r = reader_buf_.next();
            if (auto* d = std::get_if<wire::Decoded>(&r)) return std::move(d->packet);
            if (auto* m = std::get_if<wire::Malformed>(&r)) {
                spdlog::warn("{}: closing {} ({}): {}", broker_.config_.name, link_, client_id_,
                             m->reason);
                return std::nullopt;
            }
            auto n = socket_.recv_some(buf_, std::chrono::milliseconds(250));
            if (!n) {
                if (!broker_.running_) return std::nullopt;
                if (idle_limit.count() > 0 &&
                    std::chrono::steady_clock::now() - last_rx > idle_limit) {
                    spdlog::info("{}: keep-alive expired for '{}'", broker_.config_.name, client_id_);
                    return std::nullopt;
                }
                continue;
            }
            if (*n <= 0) return std::nullopt;
            last_rx = std::chrono::steady_clock::now();
            reader_buf_.feed(std::span<const std::uint8_t>(buf_.data(), static_cast<std::size_t>(*n)));
        }
    }

    void read_loop() {
        buf_.resize(16 * 1024);
        serve();
        if (attached_) {
            broker_.router_.detach(link_);
            --broker_.live_sessions_;
        }
        outbox_->close();
        socket_.shutdown();
        if (writer_.joinable()) writer_.join();
        finished_ = true;
    }

    void serve() {
        auto first = next_packet(10s);
        if (!first) return;
        auto* connect = std::get_if<wire::Connect>(&*first);
        if (connect == nullptr) {
            spdlog::warn("{}: first packet was {}, expected CONNECT", broker_.config_.name,
                         wire::to_string(wire::packet_type(*first)));
            return;
        }
        client_id_ = connect->client_id;
        if (client_id_.empty()) client_id_ = "anon-" + std::to_string(link_);
        const std::chrono::milliseconds idle_limit(connect->keep_alive_s * 1500);

        auto previous = broker_.router_.attach(link_, client_id_, outbox_);
        attached_ = true;
        ++broker_.live_sessions_;
        if (previous) broker_.close_link(*previous);
        writer_ = std::thread([this] { write_loop(); });
        if (!write(wire::Connack{0})) return;

        while (auto packet = next_packet(idle_limit)) {
            if (auto* p = std::get_if<wire::Publish>(&*packet)) {
                broker_.ingest(std::move(*p), Ingress{link_, false});
            } else if (auto* s = std::get_if<wire::Subscribe>(&*packet)) {
                auto granted = broker_.router_.subscribe(link_, s->filters);
                if (!write(wire::Suback{s->packet_id, std::move(granted)})) return;
            } else if (auto* u = std::get_if<wire::Unsubscribe>(&*packet)) {
                broker_.router_.unsubscribe(link_, u->filters);
                if (!write(wire::Unsuback{u->packet_id})) return;
            } else if (std::holds_alternative<wire::Pingreq>(*packet)) {
                if (!write(wire::Pingresp{})) return;
            } else if (std::holds_alternative<wire::Disconnect>(*packet)) {
                return;
            } else {
                spdlog::warn("{}: protocol violation from '{}': unexpected {}", broker_.config_.name,
                             client_id_, wire::to_string(wire::packet_type(*packet)));
                return;
            }
        }
    }

    Broker& broker_;
    net::Socket socket_;
    LinkId link_;
    std::shared_ptr<Outbox> outbox_;
    std::string client_id_;
    bool attached_ = false;

    wire::FrameReader reader_buf_;
    std::vector<std::uint8_t> buf_;
    std::mutex write_mutex_;
    std::thread reader_;
    std::thread writer_;
    std::atomic<bool> finished_{false};
};

// ---------------------------------------------------------------- Bridge

class Broker::Bridge {
public:
    Bridge(Broker& broker, BridgeRule rule, std::size_t index)
        : broker_(broker), rule_(std::move(rule)), link_(broker.router_.new_link_id()) {
        ClientOptions opts;
        opts.remote = rule_.remote;
        opts.client_id = "bridge-" + broker_.config_.name + "-" + std::to_string(index);
        opts.backoff_base = broker_.config_.bridge_backoff_base;
        if (rule_.direction != BridgeDirection::Out) opts.subscriptions = {rule_.filter};
        client_ = std::make_unique<MqttClient>(std::move(opts), [this](wire::Publish&& p) {
            p.topic = rule_.local_topic(p.topic);
            broker_.ingest(std::move(p), Ingress{link_, true});
        });
    }

    void start() {
        running_ = true;
        if (rule_.direction != BridgeDirection::In) {
            outbox_ = std::make_shared<Outbox>(broker_.config_.session_queue_capacity);
            broker_.router_.attach(link_, "$bridge/" + std::to_string(link_), outbox_);
            broker_.router_.subscribe(link_, {rule_.local_filter()});
            forwarder_ = std::thread([this] { forward_loop(); });
        }
        client_->start();
    }

    void stop() {
        running_ = false;
        if (outbox_) outbox_->close();
        if (forwarder_.joinable()) forwarder_.join();
        client_->stop();
        broker_.router_.detach(link_);
    }

    bool wait_ready(std::chrono::milliseconds timeout) { return client_->wait_ready(timeout); }

private:
    void forward_loop() {
        while (running_) {
            auto m = outbox_->pop(500ms);
            if (!m) continue;
            auto topic = rule_.remote_topic((*m)->topic);
            if (!topic) continue;
            while (running_ && !client_->publish(*topic, (*m)->payload, (*m)->retain))
                client_->wait_ready(500ms);
        }
    }

    Broker& broker_;
    BridgeRule rule_;
    LinkId link_;
    std::unique_ptr<MqttClient> client_;
    std::shared_ptr<Outbox> outbox_;
    std::thread forwarder_;
    std::atomic<bool> running_{false};
};

// ---------------------------------------------------------------- Broker

Broker::Broker(BrokerConfig config) : config_(std::move(config)) {
    for (const auto& b : config_.bridges) b.validate();
}

Broker::~Broker() { stop(); }

void Broker::start() {
    if (running_) return;
    listener_ = std::make_unique<net::Listener>(config_.listen);
    endpoint_ = listener_->local();
    running_ = true;
    accept_thread_ = std::thread([this] { accept_loop(); });
    for (std::size_t i = 0; i < config_.bridges.size(); ++i) {
        bridges_.push_back(std::make_unique<Bridge>(*this, config_.bridges[i], i));
        bridges_.back()->start();
    }
    spdlog::info("{}: listening on {} with {} bridge(s)", config_.name, endpoint_.str(),
                 bridges_.size());
}

void Broker::stop() {
    if (!running_.exchange(false)) return;
    if (accept_thread_.joinable()) accept_thread_.join();
    listener_->close();
    for (auto& b : bridges_) b->stop();
    bridges_.clear();
    reap(true);
}

BrokerStats Broker::stats() const {
    return BrokerStats{msgs_in_.load(), msgs_out_.load(), router_.drops(), live_sessions_.load()};
}

bool Broker::wait_bridges_ready(std::chrono::milliseconds timeout) {
    const auto deadline = std::chrono::steady_clock::now() + timeout;
    for (auto& b : bridges_) {
        const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
            deadline - std::chrono::steady_clock::now());
        if (left.count() <= 0 || !b->wait_ready(left)) return false;
    }
    return true;
}

std::size_t Broker::ingest(wire::Publish p, const Ingress& ingress) {
    ++msgs_in_;
    if (hook_) hook_(p, ingress);
    return router_.route_publish(ingress.link, p);
}

void Broker::accept_loop() {
    while (running_) {
        auto sock = listener_->accept(200ms);
        if (sock) {
            auto conn = std::make_shared<Connection>(*this, std::move(*sock));
            std::lock_guard lk(connections_mutex_);
            connections_.push_back(conn);
            conn->start();
        }
        reap(false);
    }
}

void Broker::reap(bool all) {
    std::list<std::shared_ptr<Connection>> done;
    {
        std::lock_guard lk(connections_mutex_);
        for (auto it = connections_.begin(); it != connections_.end();) {
            if (all) (*it)->close();
            if (all || (*it)->finished()) {
                done.push_back(*it);
                it = connections_.erase(it);
            } else {
                ++it;
            }
        }
    }
    for (auto& c : done) c->join();
}

void Broker::close_link(LinkId link) {
    std::lock_guard lk(connections_mutex_);
    for (auto& c : connections_) {
        if (c->link() == link) c->close();
    }
}

std::unique_ptr<Broker> serve(BrokerConfig config) {
    auto b = std::make_unique<Broker>(std::move(config));
    b->start();
    return b;
}

}  // namespace sensert::broker
