#pragma once

// Transport for the live-session engine: a TCP listener carrying
// newline-delimited JSON records (one connection may drive any number of
// sessions) and an HTTP GET /health endpoint.

// Eigen must be seen before <resolv.h> (pulled in by httplib), which
// defines a `_res` macro that collides with Eigen parameter names.
#include "r2d2/error.hpp"
#include "r2d2/service.hpp"

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cerrno>
#include <cstring>
#include <memory>
#include <mutex>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>

namespace r2d2::service {

class WireServer {
 public:
  explicit WireServer(Engine& engine) : engine_(engine) {}
  WireServer(const WireServer&) = delete;
  WireServer& operator=(const WireServer&) = delete;
  ~WireServer() { stop(); }

  /// Binds to 127.0.0.1 (or `host`); port 0 picks a free port. Returns the
  /// bound port.
  int bind(int port, const std::string& host = "127.0.0.1") {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    if (fd_ < 0) throw DataError(std::string("socket: ") + std::strerror(errno));
    int yes = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &yes, sizeof yes);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_port = htons(static_cast<std::uint16_t>(port));
    if (::inet_pton(AF_INET, host.c_str(), &addr.sin_addr) != 1) throw ArgumentError("bad listen address " + host);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) < 0)
      throw DataError("bind port " + std::to_string(port) + ": " + std::strerror(errno));
    if (::listen(fd_, 16) < 0) throw DataError(std::string("listen: ") + std::strerror(errno));
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    return port_;
  }

  int port() const { return port_; }

  /// Accepts connections until stop(); each connection gets its own thread.
  void run() {
    running_ = true;
    while (running_) {
      const int client = ::accept(fd_, nullptr, nullptr);
      if (client < 0) {
        if (!running_) break;
        if (errno == EINTR) continue;
        break;
      }
      std::lock_guard lock(mutex_);
      clients_.push_back(client);
      workers_.emplace_back([this, client] { serve(client); });
    }
  }

  void stop() {
    if (!running_.exchange(false) && fd_ < 0) return;
    if (fd_ >= 0) {
      ::shutdown(fd_, SHUT_RDWR);
      ::close(fd_);
      fd_ = -1;
    }
    std::vector<std::thread> workers;
    {
      std::lock_guard lock(mutex_);
      for (int c : clients_) ::shutdown(c, SHUT_RDWR);
      workers.swap(workers_);
    }
    for (auto& t : workers)
      if (t.joinable()) t.join();
  }

 private:
  static bool send_all(int fd, const std::string& data) {
    std::size_t sent = 0;
    while (sent < data.size()) {
      const auto n = ::send(fd, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
      if (n <= 0) return false;
      sent += static_cast<std::size_t>(n);
    }
    return true;
  }

  void serve(int fd) {
    std::string buffer;
    char chunk[4096];
    bool open = true;
    while (open) {
      const auto n = ::recv(fd, chunk, sizeof chunk, 0);
      if (n <= 0) break;
      buffer.append(chunk, static_cast<std::size_t>(n));
      std::size_t nl;
      while ((nl = buffer.find('\n')) != std::string::npos) {
        std::string line = buffer.substr(0, nl);
        buffer.erase(0, nl + 1);
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (corpus::trim(line).empty()) continue;
        std::string out;
        for (const auto& reply : engine_.handle_line(line)) out += reply + '\n';
        if (!send_all(fd, out)) {
          open = false;
          break;
        }
      }
    }
    ::close(fd);
    std::lock_guard lock(mutex_);
    std::erase(clients_, fd);
  }

  Engine& engine_;
  int fd_ = -1;
  int port_ = 0;
  std::atomic<bool> running_{false};
  std::mutex mutex_;
  std::vector<int> clients_;
  std::vector<std::thread> workers_;
};

/// GET /health returns the engine's health record as JSON.
class HealthServer {
 public:
  explicit HealthServer(Engine& engine) : engine_(engine) {
    http_.Get("/health", [this](const httplib::Request&, httplib::Response& res) {
      res.set_content(engine_.health().dump(), "application/json");
    });
  }

  int bind(int port, const std::string& host = "127.0.0.1") {
    if (port == 0) return port_ = http_.bind_to_any_port(host);
    if (!http_.bind_to_port(host, port)) throw DataError("cannot bind health port " + std::to_string(port));
    return port_ = port;
  }

  void run() { http_.listen_after_bind(); }
  void stop() { http_.stop(); }
  int port() const { return port_; }

 private:
  Engine& engine_;
  httplib::Server http_;
  int port_ = 0;
};

}  // namespace r2d2::service
