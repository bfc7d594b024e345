// SPDX-License-Identifier: Apache-2.0
#pragma once

#include "sensert/net.hpp"
#include "sensert/wire.hpp"

#include <atomic>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <functional>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace sensert {

struct ClientOptions {
    net::Endpoint remote;
    std::string client_id;
    /// Re-subscribed after every reconnect.
    std::vector<std::string> subscriptions;
    std::uint16_t keep_alive_s = 30;
    std::chrono::milliseconds backoff_base{500};
    std::chrono::milliseconds backoff_cap{30'000};
};

/// QoS-0 client that keeps itself connected. Incoming publishes go to the
/// handler (on the client's reader thread) or, without one, to an internal
/// queue drained by receive().
class MqttClient {
public:
    using MessageHandler = std::function<void(wire::Publish&&)>;
    using ConnectHandler = std::function<void()>;

    explicit MqttClient(ClientOptions options, MessageHandler handler = {});
    ~MqttClient();
    MqttClient(const MqttClient&) = delete;
    MqttClient& operator=(const MqttClient&) = delete;

    void start();
    void stop();

    /// Called each time a session (re)establishes and its subscriptions are
    /// acknowledged.
    void on_ready(ConnectHandler h) { on_ready_ = std::move(h); }

    /// False when not connected or when the write failed.
    bool publish(std::string_view topic, std::string_view payload, bool retain = false);

    /// Blocks until connected and every subscription acknowledged.
    bool wait_ready(std::chrono::milliseconds timeout);
    bool ready() const { return ready_.load(); }

    std::optional<wire::Publish> receive(std::chrono::milliseconds timeout);

    std::uint64_t sessions_established() const { return sessions_.load(); }
    const ClientOptions& options() const { return options_; }

private:
    void run();
    bool establish();
    void read_loop();
    bool send(const wire::Packet& p);
    void deliver(wire::Publish&& p);

    ClientOptions options_;
    MessageHandler handler_;
    ConnectHandler on_ready_;

    std::thread thread_;
    std::atomic<bool> running_{false};
    std::atomic<bool> ready_{false};
    std::atomic<std::uint64_t> sessions_{0};

    std::mutex send_mutex_;
    net::Socket socket_;
    bool connected_ = false;
    std::chrono::steady_clock::time_point last_send_;

    std::mutex state_mutex_;
    std::condition_variable state_cv_;

    std::mutex inbox_mutex_;
    std::condition_variable inbox_cv_;
    std::deque<wire::Publish> inbox_;
};

}  // namespace sensert
