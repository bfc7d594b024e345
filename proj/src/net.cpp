// SPDX-License-Identifier: Apache-2.0
#include "sensert/net.hpp"

#include <arpa/inet.h>
#include <cerrno>
#include <charconv>
#include <cstring>
#include <fcntl.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

namespace sensert::net {

Endpoint Endpoint::parse(std::string_view text) {
    Endpoint e;
    std::string_view port_part = text;
    const auto colon = text.rfind(':');
    if (colon != std::string_view::npos) {
        e.host = std::string(text.substr(0, colon));
        port_part = text.substr(colon + 1);
        if (e.host.empty()) e.host = "127.0.0.1";
    }
    unsigned port = 0;
    auto [ptr, ec] = std::from_chars(port_part.data(), port_part.data() + port_part.size(), port);
    if (ec != std::errc{} || ptr != port_part.data() + port_part.size() || port > 65535)
        throw std::invalid_argument("bad address: " + std::string(text));
    e.port = static_cast<std::uint16_t>(port);
    return e;
}

std::string Endpoint::str() const { return host + ":" + std::to_string(port); }

namespace {

sockaddr_in resolve(const Endpoint& e) {
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(e.port);
    const std::string host = e.host == "localhost" ? "127.0.0.1" : e.host;
    if (inet_pton(AF_INET, host.c_str(), &addr.sin_addr) == 1) return addr;
    addrinfo hints{};
    hints.ai_family = AF_INET;
    hints.ai_socktype = SOCK_STREAM;
    addrinfo* res = nullptr;
    if (getaddrinfo(host.c_str(), nullptr, &hints, &res) != 0 || res == nullptr)
        throw NetError("cannot resolve " + e.host);
    addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
    freeaddrinfo(res);
    return addr;
}

void set_nodelay(int fd) {
    int one = 1;
    ::setsockopt(fd, IPPROTO_TCP, TCP_NODELAY, &one, sizeof one);
}

}  // namespace

Socket::~Socket() { close(); }

Socket::Socket(Socket&& other) noexcept : fd_(other.fd_) { other.fd_ = -1; }

Socket& Socket::operator=(Socket&& other) noexcept {
    if (this != &other) {
        close();
        fd_ = other.fd_;
        other.fd_ = -1;
    }
    return *this;
}

bool Socket::send_all(std::span<const std::uint8_t> data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
        const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
        if (n < 0) {
            if (errno == EINTR) continue;
            return false;
        }
        sent += static_cast<std::size_t>(n);
    }
    return true;
}

bool Socket::send_all(std::string_view data) {
    return send_all(std::span<const std::uint8_t>(
        reinterpret_cast<const std::uint8_t*>(data.data()), data.size()));
}

std::optional<long> Socket::recv_some(std::span<std::uint8_t> buffer,
                                      std::chrono::milliseconds timeout) {
    pollfd pfd{fd_, POLLIN, 0};
    for (;;) {
        const int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
        if (rc == 0) return std::nullopt;
        if (rc < 0) {
            if (errno == EINTR) continue;
            return -1;
        }
        break;
    }
    for (;;) {
        const ssize_t n = ::recv(fd_, buffer.data(), buffer.size(), 0);
        if (n < 0 && errno == EINTR) continue;
        return n < 0 ? -1 : static_cast<long>(n);
    }
}

void Socket::shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
}

void Socket::close() noexcept {
    if (fd_ >= 0) {
        ::close(fd_);
        fd_ = -1;
    }
}

Listener::Listener(const Endpoint& at) {
    fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) throw NetError(std::string("socket: ") + std::strerror(errno));
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof one);
    sockaddr_in addr = resolve(at);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) != 0) {
        const int err = errno;
        ::close(fd_);
        fd_ = -1;
        if (err == EADDRINUSE) throw AddressInUse("address in use: " + at.str());
        throw NetError("bind " + at.str() + ": " + std::strerror(err));
    }
    if (::listen(fd_, 256) != 0) {
        ::close(fd_);
        fd_ = -1;
        throw NetError("listen failed on " + at.str());
    }
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    local_ = Endpoint{at.host, ntohs(addr.sin_port)};
}

Listener::~Listener() { close(); }

std::optional<Socket> Listener::accept(std::chrono::milliseconds timeout) {
    if (fd_ < 0) return std::nullopt;
    pollfd pfd{fd_, POLLIN, 0};
    const int rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
    if (rc <= 0 || (pfd.revents & POLLIN) == 0) return std::nullopt;
    const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
    if (fd < 0) return std::nullopt;
    set_nodelay(fd);
    return Socket(fd);
}

void Listener::close() noexcept {
    if (fd_ >= 0) {
        ::shutdown(fd_, SHUT_RDWR);
        ::close(fd_);
        fd_ = -1;
    }
}

Socket connect_tcp(const Endpoint& to, std::chrono::milliseconds timeout) {
    sockaddr_in addr = resolve(to);
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) throw ConnectFailed("socket failed");
    Socket sock(fd);
    const int flags = ::fcntl(fd, F_GETFL, 0);
    ::fcntl(fd, F_SETFL, flags | O_NONBLOCK);
    int rc = ::connect(fd, reinterpret_cast<sockaddr*>(&addr), sizeof addr);
    if (rc != 0 && errno != EINPROGRESS)
        throw ConnectFailed("connect " + to.str() + ": " + std::strerror(errno));
    if (rc != 0) {
        pollfd pfd{fd, POLLOUT, 0};
        rc = ::poll(&pfd, 1, static_cast<int>(timeout.count()));
        if (rc <= 0) throw ConnectFailed("connect " + to.str() + ": timed out");
        int err = 0;
        socklen_t len = sizeof err;
        ::getsockopt(fd, SOL_SOCKET, SO_ERROR, &err, &len);
        if (err != 0) throw ConnectFailed("connect " + to.str() + ": " + std::strerror(err));
    }
    ::fcntl(fd, F_SETFL, flags);
    set_nodelay(fd);
    return sock;
}

}  // namespace sensert::net
