// SPDX-License-Identifier: Apache-2.0
//
// Thin RAII wrappers over POSIX TCP sockets.
#pragma once

#include <chrono>
#include <cstdint>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace sensert::net {

struct Endpoint {
    std::string host = "127.0.0.1";
    std::uint16_t port = 0;

    /// "host:port"; a bare port means 127.0.0.1.
    static Endpoint parse(std::string_view text);
    std::string str() const;
    bool operator==(const Endpoint&) const = default;
};

class NetError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

class ConnectFailed : public NetError {
public:
    using NetError::NetError;
};

class AddressInUse : public NetError {
public:
    using NetError::NetError;
};

class Socket {
public:
    Socket() = default;
    explicit Socket(int fd) noexcept : fd_(fd) {}
    ~Socket();
    Socket(Socket&& other) noexcept;
    Socket& operator=(Socket&& other) noexcept;
    Socket(const Socket&) = delete;
    Socket& operator=(const Socket&) = delete;

    bool valid() const noexcept { return fd_ >= 0; }
    int fd() const noexcept { return fd_; }

    /// Writes everything or returns false when the peer is gone.
    bool send_all(std::span<const std::uint8_t> data);
    bool send_all(std::string_view data);

    /// Waits up to `timeout` for readable data. Returns bytes read, 0 on
    /// orderly close, nullopt on timeout, -1 on error.
    std::optional<long> recv_some(std::span<std::uint8_t> buffer, std::chrono::milliseconds timeout);

    /// Wakes any thread blocked in recv/send on this socket. Safe to call
    /// from another thread.
    void shutdown() noexcept;
    void close() noexcept;

private:
    int fd_ = -1;
};

class Listener {
public:
    /// Binds and listens; port 0 picks an ephemeral port.
    explicit Listener(const Endpoint& at);
    ~Listener();
    Listener(const Listener&) = delete;
    Listener& operator=(const Listener&) = delete;

    std::optional<Socket> accept(std::chrono::milliseconds timeout);
    Endpoint local() const { return local_; }
    void close() noexcept;

private:
    int fd_ = -1;
    Endpoint local_;
};

Socket connect_tcp(const Endpoint& to, std::chrono::milliseconds timeout = std::chrono::seconds(2));

/// Exponential retry delay: base, 2*base, ... capped.
class Backoff {
public:
    explicit Backoff(std::chrono::milliseconds base = std::chrono::milliseconds(500),
                     std::chrono::milliseconds cap = std::chrono::seconds(30))
        : base_(base), cap_(cap), next_(base) {}

    std::chrono::milliseconds next() {
        const auto d = next_;
        next_ = std::min(cap_, next_ * 2);
        return d;
    }
    void reset() { next_ = base_; }

private:
    std::chrono::milliseconds base_;
    std::chrono::milliseconds cap_;
    std::chrono::milliseconds next_;
};

}  // namespace sensert::net
