#pragma once

#include <algorithm>
#include <chrono>
#include <condition_variable>
#include <deque>
#include <exception>
#include <mutex>
#include <thread>

#include "defer/wire.hpp"

namespace defer {

/// Per-hop link emulation. bandwidth_mbps = 0 means unlimited.
struct LinkParams {
  double latency_ms = 0.0;
  double bandwidth_mbps = 0.0;

  bool pass_through() const { return latency_ms <= 0.0 && bandwidth_mbps <= 0.0; }
  friend bool operator==(const LinkParams&, const LinkParams&) = default;
};

class TokenBucket {
 public:
  using Clock = std::chrono::steady_clock;

  TokenBucket(double bytes_per_second, double burst_bytes)
      : rate_(bytes_per_second), burst_(burst_bytes), tokens_(burst_bytes),
        last_(Clock::now()) {}

  /// Blocks until `n` tokens (n <= burst) are available, then takes them.
  void acquire(double n) {
    refill();
    if (tokens_ < n) {
      const double wait_s = (n - tokens_) / rate_;
      std::this_thread::sleep_for(std::chrono::duration<double>(wait_s));
      refill();
    }
    tokens_ -= n;
  }

  double burst() const noexcept { return burst_; }

 private:
  void refill() {
    const auto now = Clock::now();
    tokens_ = std::min(burst_, tokens_ + std::chrono::duration<double>(now - last_).count() * rate_);
    last_ = now;
  }

  double rate_;
  double burst_;
  double tokens_;
  Clock::time_point last_;
};

/// Delays each write by the link latency and paces delivery to the link
/// bandwidth. Writes return once queued; a pump thread delivers them in order.
class ShapedSink final : public ByteSink {
 public:
  using Clock = std::chrono::steady_clock;
  static constexpr double kBurstBytes = 16 * 1024;
  static constexpr std::size_t kMaxQueuedBytes = 8 << 20;

  ShapedSink(ByteSink& inner, LinkParams link) : inner_(inner), link_(link) {
    if (!link_.pass_through()) pump_ = std::thread([this] { run(); });
  }

  ~ShapedSink() override {
    {
      std::lock_guard lock(mu_);
      stopping_ = true;
    }
    cv_.notify_all();
    if (pump_.joinable()) pump_.join();
  }

  void write(ByteView data) override {
    if (link_.pass_through()) {
      inner_.write(data);
      return;
    }
    std::unique_lock lock(mu_);
    cv_.wait(lock, [&] {
      return error_ || queued_bytes_ < kMaxQueuedBytes || queue_.empty();
    });
    if (error_) std::rethrow_exception(error_);
    const auto due = Clock::now() + std::chrono::duration_cast<Clock::duration>(
                                        std::chrono::duration<double, std::milli>(link_.latency_ms));
    queued_bytes_ += data.size();
    queue_.push_back(Item{due, Bytes(data.begin(), data.end())});
    cv_.notify_all();
  }

  /// Blocks until every queued byte reached the inner sink.
  void flush() override {
    if (!link_.pass_through()) {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return error_ || (queue_.empty() && !busy_); });
      if (error_) std::rethrow_exception(error_);
    }
    inner_.flush();
  }

  const LinkParams& link() const noexcept { return link_; }

 private:
  struct Item {
    Clock::time_point due;
    Bytes bytes;
  };

  void run() {
    std::optional<TokenBucket> bucket;
    if (link_.bandwidth_mbps > 0) bucket.emplace(link_.bandwidth_mbps * 1e6 / 8.0, kBurstBytes);
    while (true) {
      Item item;
      {
        std::unique_lock lock(mu_);
        cv_.wait(lock, [&] { return stopping_ || !queue_.empty(); });
        if (queue_.empty()) return;
        item = std::move(queue_.front());
        queue_.pop_front();
        busy_ = true;
      }
      std::this_thread::sleep_until(item.due);
      try {
        ByteView rest = item.bytes;
        while (!rest.empty()) {
          const std::size_t piece = bucket ? std::min<std::size_t>(rest.size(), std::size_t(kBurstBytes)) : rest.size();
          if (bucket) bucket->acquire(double(piece));
          inner_.write(rest.first(piece));
          rest = rest.subspan(piece);
        }
      } catch (...) {
        std::lock_guard lock(mu_);
        error_ = std::current_exception();
        queue_.clear();
      }
      {
        std::lock_guard lock(mu_);
        queued_bytes_ -= std::min(queued_bytes_, item.bytes.size());
        busy_ = false;
      }
      cv_.notify_all();
    }
  }

  ByteSink& inner_;
  LinkParams link_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::deque<Item> queue_;
  std::size_t queued_bytes_ = 0;
  bool busy_ = false;
  bool stopping_ = false;
  std::exception_ptr error_;
  std::thread pump_;
};

}  // namespace defer
