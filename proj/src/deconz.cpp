// SPDX-License-Identifier: Apache-2.0
#include "sensert/deconz.hpp"

#include <boost/asio/connect.hpp>
#include <boost/asio/ip/tcp.hpp>
#include <boost/beast/core.hpp>
#include <boost/beast/websocket.hpp>
#include <nlohmann/json.hpp>
#include <spdlog/spdlog.h>

#include <poll.h>
#include <sys/socket.h>

#include <list>
#include <mutex>
#include <thread>

namespace sensert::sim {

namespace asio = boost::asio;
namespace beast = boost::beast;
namespace websocket = beast::websocket;
using tcp = asio::ip::tcp;
using namespace std::chrono_literals;

namespace {

bool wait_readable(int fd, std::chrono::milliseconds timeout) {
    pollfd p{fd, POLLIN, 0};
    return ::poll(&p, 1, static_cast<int>(timeout.count())) > 0;
}

}  // namespace

// ---------------------------------------------------------------- emulator

class DeconzEmulator::Impl {
public:
    explicit Impl(net::Endpoint listen) : listen_(std::move(listen)), acceptor_(ioc_) {}

    void start() {
        tcp::endpoint ep(asio::ip::make_address(listen_.host), listen_.port);
        acceptor_.open(ep.protocol());
        acceptor_.set_option(asio::socket_base::reuse_address(true));
        boost::system::error_code ec;
        acceptor_.bind(ep, ec);
        if (ec == asio::error::address_in_use) throw net::AddressInUse("deCONZ emulator: " + listen_.str() + " in use");
        if (ec) throw net::NetError("deCONZ emulator bind: " + ec.message());
        acceptor_.listen();
        endpoint_ = net::Endpoint{listen_.host, acceptor_.local_endpoint().port()};
        running_ = true;
        thread_ = std::thread([this] { accept_loop(); });
        spdlog::info("deCONZ emulator on ws://{}", endpoint_.str());
    }

    void stop() {
        if (!running_.exchange(false)) return;
        if (thread_.joinable()) thread_.join();
        boost::system::error_code ec;
        acceptor_.close(ec);
        std::lock_guard lk(mutex_);
        for (auto& c : clients_) c->next_layer().close(ec);
        clients_.clear();
    }

    std::size_t push(std::string_view text) {
        std::lock_guard lk(mutex_);
        std::size_t n = 0;
        for (auto it = clients_.begin(); it != clients_.end();) {
            boost::system::error_code ec;
            (*it)->write(asio::buffer(text.data(), text.size()), ec);
            if (ec) {
                it = clients_.erase(it);
                continue;
            }
            ++n;
            ++it;
        }
        return n;
    }

    std::size_t clients() const {
        std::lock_guard lk(mutex_);
        return clients_.size();
    }

    net::Endpoint endpoint_;

private:
    void accept_loop() {
        while (running_) {
            if (!wait_readable(acceptor_.native_handle(), 100ms)) continue;
            boost::system::error_code ec;
            tcp::socket sock(ioc_);
            acceptor_.accept(sock, ec);
            if (ec) continue;
            sock.set_option(tcp::no_delay(true), ec);
            auto ws = std::make_shared<websocket::stream<tcp::socket>>(std::move(sock));
            ws->set_option(websocket::stream_base::decorator([](websocket::response_type& res) {
                res.set(beast::http::field::server, "deconz-emulator");
            }));
            ws->accept(ec);
            if (ec) {
                spdlog::warn("deCONZ emulator: handshake failed: {}", ec.message());
                continue;
            }
            ws->text(true);
            std::lock_guard lk(mutex_);
            clients_.push_back(std::move(ws));
        }
    }

    net::Endpoint listen_;
    asio::io_context ioc_;
    tcp::acceptor acceptor_;
    std::thread thread_;
    std::atomic<bool> running_{false};
    mutable std::mutex mutex_;
    std::list<std::shared_ptr<websocket::stream<tcp::socket>>> clients_;
};

DeconzEmulator::DeconzEmulator(net::Endpoint listen) : impl_(std::make_unique<Impl>(std::move(listen))) {}
DeconzEmulator::~DeconzEmulator() { stop(); }
void DeconzEmulator::start() { impl_->start(); }
void DeconzEmulator::stop() { impl_->stop(); }
net::Endpoint DeconzEmulator::endpoint() const { return impl_->endpoint_; }
std::size_t DeconzEmulator::push(std::string_view text) { return impl_->push(text); }
std::size_t DeconzEmulator::clients() const { return impl_->clients(); }

// ---------------------------------------------------------------- translator

class DeconzTranslator::Impl {
public:
    Impl(net::Endpoint ws, net::Endpoint broker) : ws_ep_(std::move(ws)) {
        ClientOptions co;
        co.remote = std::move(broker);
        co.client_id = "deconz-translator";
        co.backoff_base = 100ms;
        co.backoff_cap = 2s;
        client_ = std::make_unique<MqttClient>(co);
    }

    void start() {
        client_->start();
        running_ = true;
        thread_ = std::thread([this] { run(); });
    }

    void stop() {
        if (!running_.exchange(false)) return;
        {
            std::lock_guard lk(fd_mutex_);
            if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
        }
        if (thread_.joinable()) thread_.join();
        client_->stop();
    }

    bool wait_ready(std::chrono::milliseconds timeout) {
        const auto deadline = std::chrono::steady_clock::now() + timeout;
        if (!client_->wait_ready(timeout)) return false;
        while (!connected_) {
            if (std::chrono::steady_clock::now() > deadline) return false;
            std::this_thread::sleep_for(10ms);
        }
        return true;
    }

    std::atomic<std::uint64_t> forwarded{0}, ignored{0}, lost{0};

private:
    void run() {
        net::Backoff backoff(100ms, 2s);
        while (running_) {
            try {
                session();
                backoff.reset();
            } catch (const std::exception& e) {
                spdlog::debug("deCONZ translator: {}", e.what());
            }
            connected_ = false;
            if (!running_) break;
            const auto delay = backoff.next();
            for (auto waited = 0ms; running_ && waited < delay; waited += 20ms) std::this_thread::sleep_for(20ms);
        }
    }

    void session() {
        asio::io_context ioc;
        websocket::stream<tcp::socket> ws(ioc);
        tcp::endpoint ep(asio::ip::make_address(ws_ep_.host), ws_ep_.port);
        ws.next_layer().connect(ep);
        ws.next_layer().set_option(tcp::no_delay(true));
        {
            std::lock_guard lk(fd_mutex_);
            fd_ = ws.next_layer().native_handle();
        }
        struct Reset {
            Impl* self;
            ~Reset() {
                std::lock_guard lk(self->fd_mutex_);
                self->fd_ = -1;
            }
        } reset{this};
        if (!running_) return;
        ws.handshake(ws_ep_.str(), "/");
        connected_ = true;
        beast::flat_buffer buffer;
        while (running_) {
            buffer.clear();
            ws.read(buffer);
            const std::string text = beast::buffers_to_string(buffer.data());
            auto j = nlohmann::json::parse(text, nullptr, false);
            if (j.is_discarded() || j.value("r", "") != "sensors" || j.value("e", "") != "changed" ||
                !j.contains("id") || !j["id"].is_string()) {
                ++ignored;
                continue;
            }
            const std::string topic = "zigbee/" + j["id"].get<std::string>() + "/state";
            if (client_->publish(topic, text)) ++forwarded;
            else ++lost;
        }
    }

    net::Endpoint ws_ep_;
    std::unique_ptr<MqttClient> client_;
    std::thread thread_;
    std::atomic<bool> running_{false};
    std::atomic<bool> connected_{false};
    std::mutex fd_mutex_;
    int fd_ = -1;
};

DeconzTranslator::DeconzTranslator(net::Endpoint websocket, net::Endpoint zigbee_broker)
    : impl_(std::make_unique<Impl>(std::move(websocket), std::move(zigbee_broker))) {}
DeconzTranslator::~DeconzTranslator() { stop(); }
void DeconzTranslator::start() { impl_->start(); }
void DeconzTranslator::stop() { impl_->stop(); }
bool DeconzTranslator::wait_ready(std::chrono::milliseconds timeout) { return impl_->wait_ready(timeout); }
std::uint64_t DeconzTranslator::forwarded() const { return impl_->forwarded.load(); }
std::uint64_t DeconzTranslator::ignored() const { return impl_->ignored.load(); }
std::uint64_t DeconzTranslator::lost() const { return impl_->lost.load(); }

}  // namespace sensert::sim
