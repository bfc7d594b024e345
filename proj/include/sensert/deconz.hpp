// SPDX-License-Identifier: Apache-2.0
//
// Stand-in for a deCONZ gateway: a websocket server pushing sensor change
// events, and the translator that republishes them on the zigbee broker.
#pragma once

#include "sensert/mqtt_client.hpp"
#include "sensert/net.hpp"

#include <atomic>
#include <memory>
#include <string_view>

namespace sensert::sim {

class DeconzEmulator {
public:
    explicit DeconzEmulator(net::Endpoint listen = {});
    ~DeconzEmulator();

    void start();
    void stop();
    net::Endpoint endpoint() const;

    /// Sends one text frame to every connected client; returns how many got it.
    std::size_t push(std::string_view text);
    std::size_t clients() const;

private:
    class Impl;
    std::unique_ptr<Impl> impl_;
};

/// Reads {"e":"changed","r":"sensors","id":...} events and publishes them
/// verbatim on "zigbee/<id>/state".
class DeconzTranslator {
public:
    DeconzTranslator(net::Endpoint websocket, net::Endpoint zigbee_broker);
    ~DeconzTranslator();

    void start();
    void stop();
    /// Websocket connected and broker session up.
    bool wait_ready(std::chrono::milliseconds timeout);

    std::uint64_t forwarded() const;
    std::uint64_t ignored() const;
    std::uint64_t lost() const;

private:
    class Impl;
    std::unique_ptr<Impl> impl_;
};

}  // namespace sensert::sim
