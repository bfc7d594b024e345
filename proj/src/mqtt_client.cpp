// SPDX-License-Identifier: Apache-2.0
#include "sensert/mqtt_client.hpp"

#include <spdlog/spdlog.h>

#include <array>

namespace sensert {

using namespace std::chrono_literals;

MqttClient::MqttClient(ClientOptions options, MessageHandler handler)
    : options_(std::move(options)), handler_(std::move(handler)) {}

MqttClient::~MqttClient() { stop(); }

void MqttClient::start() {
    if (running_.exchange(true)) return;
    thread_ = std::thread([this] { run(); });
}

void MqttClient::stop() {
    if (!running_.exchange(false)) return;
    {
        std::lock_guard lk(send_mutex_);
        if (connected_) {
            const auto frame = wire::encode_packet(wire::Disconnect{});
            socket_.send_all(frame);
        }
        socket_.shutdown();
    }
    state_cv_.notify_all();
    if (thread_.joinable()) thread_.join();
    inbox_cv_.notify_all();
}

bool MqttClient::send(const wire::Packet& p) {
    const auto frame = wire::encode_packet(p);
    std::lock_guard lk(send_mutex_);
    if (!socket_.valid()) return false;
    last_send_ = std::chrono::steady_clock::now();
    if (!socket_.send_all(frame)) {
        socket_.shutdown();
        return false;
    }
    return true;
}

bool MqttClient::publish(std::string_view topic, std::string_view payload, bool retain) {
    const auto frame =
        wire::encode_packet(wire::Publish{std::string(topic), std::string(payload), retain});
    std::lock_guard lk(send_mutex_);
    if (!connected_) return false;
    last_send_ = std::chrono::steady_clock::now();
    if (!socket_.send_all(frame)) {
        socket_.shutdown();
        connected_ = false;
        ready_ = false;
        return false;
    }
    return true;
}

bool MqttClient::wait_ready(std::chrono::milliseconds timeout) {
    std::unique_lock lk(state_mutex_);
    return state_cv_.wait_for(lk, timeout, [this] { return ready_.load() || !running_.load(); }) &&
           ready_.load();
}

std::optional<wire::Publish> MqttClient::receive(std::chrono::milliseconds timeout) {
    std::unique_lock lk(inbox_mutex_);
    if (!inbox_cv_.wait_for(lk, timeout, [this] { return !inbox_.empty() || !running_.load(); }))
        return std::nullopt;
    if (inbox_.empty()) return std::nullopt;
    auto p = std::move(inbox_.front());
    inbox_.pop_front();
    return p;
}

void MqttClient::deliver(wire::Publish&& p) {
    if (handler_) {
        handler_(std::move(p));
        return;
    }
    {
        std::lock_guard lk(inbox_mutex_);
        inbox_.push_back(std::move(p));
    }
    inbox_cv_.notify_one();
}

bool MqttClient::establish() {
    net::Socket sock;
    try {
        sock = net::connect_tcp(options_.remote);
    } catch (const net::NetError& e) {
        spdlog::debug("mqtt client {}: {}", options_.client_id, e.what());
        return false;
    }
    const auto connect = wire::encode_packet(
        wire::Connect{options_.client_id, options_.keep_alive_s, /*clean_session=*/true});
    if (!sock.send_all(connect)) return false;

    wire::FrameReader reader;
    std::array<std::uint8_t, 256> buf{};
    const auto deadline = std::chrono::steady_clock::now() + 5s;
    while (std::chrono::steady_clock::now() < deadline && running_) {
        auto r = reader.next();
        if (auto* d = std::get_if<wire::Decoded>(&r)) {
            auto* ack = std::get_if<wire::Connack>(&d->packet);
            if (ack == nullptr || ack->return_code != 0) return false;
            std::lock_guard lk(send_mutex_);
            socket_ = std::move(sock);
            connected_ = true;
            last_send_ = std::chrono::steady_clock::now();
            return true;
        }
        if (std::holds_alternative<wire::Malformed>(r)) return false;
        auto n = sock.recv_some(buf, 200ms);
        if (!n) continue;
        if (*n <= 0) return false;
        reader.feed(std::span<const std::uint8_t>(buf.data(), static_cast<std::size_t>(*n)));
    }
    return false;
}

void MqttClient::read_loop() {
    if (options_.subscriptions.empty()) {
        ready_ = true;
        ++sessions_;
        state_cv_.notify_all();
        if (on_ready_) on_ready_();
    } else if (!send(wire::Subscribe{1, options_.subscriptions})) {
        return;
    }

    wire::FrameReader reader;
    std::vector<std::uint8_t> buf(16 * 1024);
    const auto ping_every = std::chrono::milliseconds(options_.keep_alive_s * 1000 / 2);
    const auto poll_for =
        options_.keep_alive_s == 0 ? std::chrono::milliseconds(1000) : std::min(ping_every, std::chrono::milliseconds(1000));
    while (running_) {
        auto n = socket_.recv_some(buf, poll_for);
        if (!n) {
            if (options_.keep_alive_s > 0) {
                std::chrono::steady_clock::time_point last;
                {
                    std::lock_guard lk(send_mutex_);
                    last = last_send_;
                }
                if (std::chrono::steady_clock::now() - last >= ping_every && !send(wire::Pingreq{}))
                    return;
            }
            continue;
        }
        if (*n <= 0) return;
        reader.feed(std::span<const std::uint8_t>(buf.data(), static_cast<std::size_t>(*n)));
        for (;;) {
            auto r = reader.next();
            if (std::holds_alternative<wire::NeedMoreData>(r)) break;
            if (auto* m = std::get_if<wire::Malformed>(&r)) {
                spdlog::warn("mqtt client {}: malformed frame from broker: {}", options_.client_id,
                             m->reason);
                return;
            }
            auto& packet = std::get<wire::Decoded>(r).packet;
            if (auto* p = std::get_if<wire::Publish>(&packet)) {
                deliver(std::move(*p));
            } else if (std::holds_alternative<wire::Suback>(packet)) {
                ready_ = true;
                ++sessions_;
                state_cv_.notify_all();
                if (on_ready_) on_ready_();
            }
        }
    }
}

void MqttClient::run() {
    net::Backoff backoff(options_.backoff_base, options_.backoff_cap);
    while (running_) {
        if (establish()) {
            backoff.reset();
            read_loop();
            {
                std::lock_guard lk(send_mutex_);
                connected_ = false;
                ready_ = false;
                socket_.close();
            }
            state_cv_.notify_all();
            if (!running_) break;
            spdlog::debug("mqtt client {}: connection to {} lost", options_.client_id,
                          options_.remote.str());
            continue;
        }
        const auto delay = backoff.next();
        std::unique_lock lk(state_mutex_);
        state_cv_.wait_for(lk, delay, [this] { return !running_.load(); });
    }
}

}  // namespace sensert
