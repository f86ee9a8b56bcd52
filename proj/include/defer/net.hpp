#pragma once

#include <arpa/inet.h>
#include <netdb.h>
#include <netinet/in.h>
#include <netinet/tcp.h>
#include <poll.h>
#include <sys/socket.h>
#include <unistd.h>

#include <cerrno>
#include <charconv>
#include <chrono>
#include <cstring>
#include <optional>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include "defer/wire.hpp"

namespace defer::net {

using namespace std::chrono_literals;

struct Endpoint {
  std::string host = "127.0.0.1";
  std::uint16_t port = 0;

  std::string str() const { return host + ":" + std::to_string(port); }

  /// Parses "host:port".
  static Endpoint parse(std::string_view s) {
    const auto colon = s.rfind(':');
    if (colon == std::string_view::npos || colon == 0) {
      fail(Errc::InvalidArgument, "expected host:port, got '" + std::string(s) + "'");
    }
    Endpoint ep;
    ep.host = std::string(s.substr(0, colon));
    auto digits = s.substr(colon + 1);
    unsigned port = 0;
    auto [p, ec] = std::from_chars(digits.data(), digits.data() + digits.size(), port);
    if (ec != std::errc{} || p != digits.data() + digits.size() || port > 65535 ||
        digits.empty()) {
      fail(Errc::InvalidArgument, "bad port in '" + std::string(s) + "'");
    }
    ep.port = static_cast<std::uint16_t>(port);
    return ep;
  }

  friend bool operator==(const Endpoint&, const Endpoint&) = default;
};

[[noreturn]] inline void io_error(const std::string& what) {
  fail(Errc::Io, what + ": " + std::strerror(errno));
}

inline sockaddr_in resolve(const Endpoint& ep) {
  sockaddr_in addr{};
  addr.sin_family = AF_INET;
  addr.sin_port = htons(ep.port);
  if (inet_pton(AF_INET, ep.host.c_str(), &addr.sin_addr) == 1) return addr;
  addrinfo hints{};
  hints.ai_family = AF_INET;
  hints.ai_socktype = SOCK_STREAM;
  addrinfo* res = nullptr;
  if (getaddrinfo(ep.host.c_str(), nullptr, &hints, &res) != 0 || !res) {
    fail(Errc::Io, "cannot resolve host '" + ep.host + "'");
  }
  addr.sin_addr = reinterpret_cast<sockaddr_in*>(res->ai_addr)->sin_addr;
  freeaddrinfo(res);
  return addr;
}

/// Connected TCP stream. Move-only; closes on destruction.
class Socket final : public ByteSource, public ByteSink {
 public:
  Socket() = default;
  explicit Socket(int fd) : fd_(fd) {
    int one = 1;
    ::setsockopt(fd_, IPPROTO_TCP, TCP_NODELAY, &one, sizeof(one));
  }
  Socket(Socket&& o) noexcept : fd_(std::exchange(o.fd_, -1)) {}
  Socket& operator=(Socket&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
    }
    return *this;
  }
  Socket(const Socket&) = delete;
  Socket& operator=(const Socket&) = delete;
  ~Socket() override { close(); }

  bool is_open() const noexcept { return fd_ >= 0; }
  int fd() const noexcept { return fd_; }

  std::size_t read_some(std::span<std::uint8_t> buf) override {
    while (true) {
      const ssize_t n = ::recv(fd_, buf.data(), buf.size(), 0);
      if (n >= 0) return static_cast<std::size_t>(n);
      if (errno == EINTR) continue;
      if (errno == ECONNRESET) return 0;
      io_error("recv");
    }
  }

  void write(ByteView data) override {
    std::size_t sent = 0;
    while (sent < data.size()) {
      const ssize_t n = ::send(fd_, data.data() + sent, data.size() - sent, MSG_NOSIGNAL);
      if (n < 0) {
        if (errno == EINTR) continue;
        io_error("send");
      }
      sent += static_cast<std::size_t>(n);
    }
  }

  /// Wakes any thread blocked in recv/send on this socket.
  void shutdown() noexcept {
    if (fd_ >= 0) ::shutdown(fd_, SHUT_RDWR);
  }

  void close() noexcept {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

  /// True if data (or EOF) is available within `timeout`.
  bool wait_readable(std::chrono::milliseconds timeout) const {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (r < 0 && errno != EINTR) io_error("poll");
    return r > 0;
  }

 private:
  int fd_ = -1;
};

class Listener {
 public:
  Listener() = default;

  /// Binds and listens; port 0 picks an ephemeral port.
  explicit Listener(const Endpoint& ep, int backlog = 64) {
    fd_ = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd_ < 0) io_error("socket");
    int one = 1;
    ::setsockopt(fd_, SOL_SOCKET, SO_REUSEADDR, &one, sizeof(one));
    sockaddr_in addr = resolve(ep);
    if (::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof(addr)) != 0) {
      const std::string msg = std::strerror(errno);
      close();
      fail(Errc::PortBindFailure, "cannot bind " + ep.str() + ": " + msg);
    }
    if (::listen(fd_, backlog) != 0) io_error("listen");
    socklen_t len = sizeof(addr);
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    endpoint_ = Endpoint{ep.host, ntohs(addr.sin_port)};
  }

  Listener(Listener&& o) noexcept
      : fd_(std::exchange(o.fd_, -1)), endpoint_(std::move(o.endpoint_)) {}
  Listener& operator=(Listener&& o) noexcept {
    if (this != &o) {
      close();
      fd_ = std::exchange(o.fd_, -1);
      endpoint_ = std::move(o.endpoint_);
    }
    return *this;
  }
  ~Listener() { close(); }

  const Endpoint& endpoint() const noexcept { return endpoint_; }
  std::uint16_t port() const noexcept { return endpoint_.port; }
  int fd() const noexcept { return fd_; }
  bool is_open() const noexcept { return fd_ >= 0; }

  /// Waits up to `timeout` for a connection.
  std::optional<Socket> accept(std::chrono::milliseconds timeout) {
    pollfd p{fd_, POLLIN, 0};
    const int r = ::poll(&p, 1, static_cast<int>(timeout.count()));
    if (r < 0 && errno != EINTR) io_error("poll");
    if (r <= 0) return std::nullopt;
    return accept();
  }

  Socket accept() {
    while (true) {
      const int fd = ::accept4(fd_, nullptr, nullptr, SOCK_CLOEXEC);
      if (fd >= 0) return Socket(fd);
      if (errno == EINTR || errno == ECONNABORTED) continue;
      io_error("accept");
    }
  }

  void close() noexcept {
    if (fd_ >= 0) {
      ::close(fd_);
      fd_ = -1;
    }
  }

 private:
  int fd_ = -1;
  Endpoint endpoint_;
};

/// Connects, retrying refused connections until `timeout` elapses.
inline Socket connect(const Endpoint& ep,
                      std::chrono::milliseconds timeout = 5000ms) {
  const sockaddr_in addr = resolve(ep);
  const auto deadline = std::chrono::steady_clock::now() + timeout;
  auto backoff = 2ms;
  while (true) {
    const int fd = ::socket(AF_INET, SOCK_STREAM | SOCK_CLOEXEC, 0);
    if (fd < 0) io_error("socket");
    if (::connect(fd, reinterpret_cast<const sockaddr*>(&addr), sizeof(addr)) == 0) {
      return Socket(fd);
    }
    const int err = errno;
    ::close(fd);
    if (std::chrono::steady_clock::now() + backoff >= deadline) {
      errno = err;
      io_error("connect " + ep.str());
    }
    std::this_thread::sleep_for(backoff);
    backoff = std::min(backoff * 2, std::chrono::milliseconds(50));
  }
}

/// Index of the first fd that becomes readable within `timeout`, if any.
inline std::optional<std::size_t> wait_any(const std::vector<int>& fds,
                                           std::chrono::milliseconds timeout) {
  std::vector<pollfd> p;
  for (int fd : fds) p.push_back(pollfd{fd, POLLIN, 0});
  const int r = ::poll(p.data(), p.size(), static_cast<int>(timeout.count()));
  if (r < 0 && errno != EINTR) io_error("poll");
  for (std::size_t i = 0; i < p.size() && r > 0; ++i) {
    if (p[i].revents) return i;
  }
  return std::nullopt;
}

}  // namespace defer::net
