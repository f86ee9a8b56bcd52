#pragma once

#include <array>
#include <atomic>
#include <memory>

#include "defer/link_shaper.hpp"
#include "defer/net.hpp"
#include "defer/wire.hpp"

namespace defer {

/// Framed bytes sent, per message class, as seen by the framing layer.
struct TrafficLedger {
  std::array<std::atomic<std::uint64_t>, kMsgClassCount> framed{};

  void add(MsgClass c, std::uint64_t n) {
    framed[static_cast<std::size_t>(c)].fetch_add(n, std::memory_order_relaxed);
  }
  std::uint64_t get(MsgClass c) const {
    return framed[static_cast<std::size_t>(c)].load(std::memory_order_relaxed);
  }
  std::uint64_t total() const {
    std::uint64_t t = 0;
    for (const auto& f : framed) t += f.load(std::memory_order_relaxed);
    return t;
  }
};

/// One TCP connection with framing, transport byte counting and optional
/// link shaping on the write path:
///
///   send -> frame_encode -> ShapedSink -> CountingSink -> Socket
///
/// One writer thread and one reader thread may use a channel concurrently.
class Channel {
 public:
  Channel(net::Socket socket, LinkParams link = {}, ChunkConfig chunk = {},
          TrafficLedger* ledger = nullptr)
      : socket_(std::move(socket)),
        counter_(socket_),
        shaper_(counter_, link),
        chunk_(chunk),
        ledger_(ledger) {}

  Channel(const Channel&) = delete;
  Channel& operator=(const Channel&) = delete;

  static std::unique_ptr<Channel> connect(const net::Endpoint& ep,
                                          std::chrono::milliseconds timeout,
                                          LinkParams link = {}, ChunkConfig chunk = {},
                                          TrafficLedger* ledger = nullptr) {
    return std::make_unique<Channel>(net::connect(ep, timeout), link, chunk, ledger);
  }

  /// Frames and writes `msg`; returns the framed size.
  std::uint64_t send(const Message& msg) {
    const std::uint64_t n = write_frame(shaper_, msg, chunk_);
    if (ledger_) ledger_->add(message_class(msg.kind), n);
    return n;
  }

  std::optional<Message> receive() { return frame_decode(socket_); }

  /// Waits until shaped writes have reached the socket.
  void flush() { shaper_.flush(); }

  /// Transport-level count of bytes written to the socket.
  std::uint64_t transport_bytes() const { return counter_.count_payload(); }

  net::Socket& socket() noexcept { return socket_; }
  void shutdown() noexcept { socket_.shutdown(); }

 private:
  net::Socket socket_;
  CountingSink counter_;
  ShapedSink shaper_;
  ChunkConfig chunk_;
  TrafficLedger* ledger_;
};

}  // namespace defer
