#pragma once

#include <condition_variable>
#include <functional>
#include <mutex>
#include <thread>

#include "defer/channel.hpp"
#include "defer/protocol.hpp"

namespace defer {

struct NodeAddress {
  std::string host = "127.0.0.1";
  std::uint16_t model_port = 0;
  std::uint16_t weights_port = 0;
  std::uint16_t data_port = 0;

  net::Endpoint model() const { return {host, model_port}; }
  net::Endpoint weights() const { return {host, weights_port}; }
  net::Endpoint data() const { return {host, data_port}; }
  std::string str() const {
    return host + ":" + std::to_string(model_port) + ":" + std::to_string(weights_port) + ":" +
           std::to_string(data_port);
  }

  /// Parses "host:model_port:weights_port:data_port".
  static NodeAddress parse(std::string_view s) {
    std::vector<std::string_view> parts;
    for (std::size_t start = 0;;) {
      const auto colon = s.find(':', start);
      parts.push_back(s.substr(start, colon - start));
      if (colon == std::string_view::npos) break;
      start = colon + 1;
    }
    if (parts.size() != 4 || parts[0].empty()) {
      fail(Errc::InvalidArgument, "expected host:mp:wp:dp, got '" + std::string(s) + "'");
    }
    NodeAddress a;
    a.host = std::string(parts[0]);
    std::uint16_t* ports[] = {&a.model_port, &a.weights_port, &a.data_port};
    for (int i = 0; i < 3; ++i) {
      *ports[i] = net::Endpoint::parse("h:" + std::string(parts[i + 1])).port;
    }
    if (a.model_port == a.weights_port || a.model_port == a.data_port ||
        a.weights_port == a.data_port) {
      fail(Errc::InvalidArgument, "ports must be distinct in '" + std::string(s) + "'");
    }
    return a;
  }
};

struct ChainConfig {
  std::vector<NodeAddress> nodes;
  ClassCodecs codecs;  // architecture uses only its compression stage
  ChunkConfig chunk;
  std::string result_host = "127.0.0.1";
  std::uint16_t result_port = 0;
  std::size_t window = 16;  // max inputs in flight
  LinkParams link;          // shaping on the dispatcher -> node 0 hop
  std::chrono::milliseconds connect_timeout{5000};
};

/// A configured inference chain owned by the dispatcher.
///
/// Configuration connects to every node before sending anything, sends each
/// node its weights, architecture and next hop, and returns once every node
/// has acknowledged. Streaming runs a sender thread and a result receiver
/// with at most `window` inputs in flight; results must come back with the
/// exact sequence numbers that were sent, in order.
class ConfiguredChain {
 public:
  static std::unique_ptr<ConfiguredChain> configure(const ModelGraph& graph, ChainConfig cfg) {
    if (cfg.nodes.empty()) fail(Errc::InvalidArgument, "chain needs at least one node");
    if (cfg.codecs.architecture.serialization != Serialization::TextArray) {
      fail(Errc::InvalidArgument, "architecture messages are always text");
    }
    std::unique_ptr<ConfiguredChain> chain(new ConfiguredChain(std::move(cfg)));
    chain->setup(graph);
    return chain;
  }

  ConfiguredChain(const ConfiguredChain&) = delete;
  ConfiguredChain& operator=(const ConfiguredChain&) = delete;

  ~ConfiguredChain() {
    if (data_) data_->shutdown();
    if (result_) result_->shutdown();
  }

  const std::vector<Partition>& partitions() const { return partitions_; }
  const std::vector<Bytes>& architecture_payloads() const { return arch_payloads_; }
  std::size_t size() const { return cfg_.nodes.size(); }

  /// Runs every input through the chain; results in input order.
  std::vector<Tensor> infer_stream(const std::vector<Tensor>& inputs) {
    std::vector<Tensor> out;
    out.reserve(inputs.size());
    const auto start = Clock::now();
    const auto n = stream(
        inputs.size(), std::nullopt, [&](std::size_t i) -> const Tensor& { return inputs[i]; },
        [&](std::size_t, Tensor t) { out.push_back(std::move(t)); });
    cycles_ += n;
    window_seconds_ += std::chrono::duration<double>(Clock::now() - start).count();
    return out;
  }

  /// Streaming form: `on_result(i, tensor)` is called in input order.
  void infer_stream(std::size_t count, const std::function<const Tensor&(std::size_t)>& input,
                    const std::function<void(std::size_t, Tensor)>& on_result) {
    const auto start = Clock::now();
    cycles_ += stream(count, std::nullopt, input, on_result);
    window_seconds_ += std::chrono::duration<double>(Clock::now() - start).count();
  }

  /// Streams `inputs` round-robin for `window_seconds`; returns the number of
  /// results fully received inside the window. In-flight work is drained
  /// afterwards but not counted.
  std::uint64_t measure_throughput(const std::vector<Tensor>& inputs, double window_seconds) {
    if (inputs.empty()) fail(Errc::InvalidArgument, "no inputs to cycle through");
    const auto start = Clock::now();
    const auto deadline =
        start + std::chrono::duration_cast<Clock::duration>(std::chrono::duration<double>(window_seconds));
    std::uint64_t in_window = 0;
    stream(std::nullopt, deadline,
           [&](std::size_t i) -> const Tensor& { return inputs[i % inputs.size()]; },
           [&](std::size_t, Tensor) {
             if (Clock::now() <= deadline) ++in_window;
           });
    cycles_ += in_window;
    window_seconds_ += window_seconds;
    return in_window;
  }

  /// Sends Shutdown down the chain and collects every node's metrics from it.
  MetricsReport shutdown() {
    if (shut_down_) fail(Errc::InvalidArgument, "chain already shut down");
    shut_down_ = true;
    data_->send({MessageKind::Shutdown, next_seq_, {}});
    data_->flush();
    MetricsReport report;
    report.dispatcher = own_metrics();
    while (true) {
      auto m = result_->receive();
      if (!m) fail_node(Errc::ChainBroken, size() - 1, "result connection closed during shutdown");
      if (m->kind != MessageKind::Shutdown) continue;
      auto doc = ShutdownDoc::decode(m->payload);
      if (doc.abort_node) {
        fail_node(Errc::ChainBroken, *doc.abort_node, "chain aborted: " + doc.abort_reason);
      }
      report.nodes = std::move(doc.nodes);
      break;
    }
    std::sort(report.nodes.begin(), report.nodes.end(),
              [](const auto& a, const auto& b) { return a.index < b.index; });
    report.cycles_completed = cycles_;
    report.window_seconds = window_seconds_;
    for (auto& c : model_) c->shutdown();
    for (auto& c : weights_) c->shutdown();
    return report;
  }

 private:
  using Clock = std::chrono::steady_clock;

  explicit ConfiguredChain(ChainConfig cfg) : cfg_(std::move(cfg)) {}

  NodeMetrics own_metrics() const {
    NodeMetrics m;
    m.index = NodeMetrics::kDispatcher;
    m.messages = next_seq_;
    for (std::size_t c = 0; c < kMsgClassCount; ++c) {
      m.overhead_ns[c] = meter_.nanos(MsgClass(c));
      m.framed_bytes[c] = ledger_.get(MsgClass(c));
    }
    for (const auto& ch : model_) m.transport_bytes += ch->transport_bytes();
    for (const auto& ch : weights_) m.transport_bytes += ch->transport_bytes();
    if (data_) m.transport_bytes += data_->transport_bytes();
    return m;
  }

  void setup(const ModelGraph& graph) {
    const std::size_t k = cfg_.nodes.size();
    partitions_ = partition_model(graph, auto_cuts(graph, k));
    result_listener_ = net::Listener(net::Endpoint{cfg_.result_host, cfg_.result_port});

    for (std::size_t i = 0; i < k; ++i) {
      try {
        model_.push_back(Channel::connect(cfg_.nodes[i].model(), cfg_.connect_timeout, {},
                                          cfg_.chunk, &ledger_));
        weights_.push_back(Channel::connect(cfg_.nodes[i].weights(), cfg_.connect_timeout, {},
                                            cfg_.chunk, &ledger_));
      } catch (const Error& e) {
        model_.clear();
        weights_.clear();
        fail_node(Errc::NodeUnreachable, i, std::string("cannot reach ") + cfg_.nodes[i].str() +
                                                ": " + e.what());
      }
    }

    for (std::size_t i = 0; i < k; ++i) {
      const auto& p = partitions_[i];
      Bytes w = meter_.time(MsgClass::Weights,
                            [&] { return encode_weight_set(p.graph.weights, cfg_.codecs.weights); });
      Bytes a = meter_.time(MsgClass::Architecture, [&] {
        return encode_architecture(p, k, cfg_.codecs.data, cfg_.codecs.architecture.compression);
      });
      const net::Endpoint hop = i + 1 < k ? cfg_.nodes[i + 1].data()
                                          : net::Endpoint{cfg_.result_host, result_listener_.port()};
      arch_payloads_.push_back(a);
      weights_[i]->send({MessageKind::Weights, 0, std::move(w)});
      model_[i]->send({MessageKind::Architecture, 0, std::move(a)});
      const std::string hop_text = hop.str();
      model_[i]->send({MessageKind::NextHop, 0, Bytes(hop_text.begin(), hop_text.end())});
      weights_[i]->flush();
      model_[i]->flush();
    }

    for (std::size_t i = 0; i < k; ++i) {
      const auto m = model_[i]->receive();
      if (!m) fail_node(Errc::ConfigRejected, i, "node closed the model connection");
      if (m->kind == MessageKind::Reject) {
        const auto r = parse_reject(m->payload);
        throw Error(Errc::ConfigRejected, "node " + std::to_string(i) + " rejected: " + r.message,
                    r.subject, i);
      }
      if (m->kind != MessageKind::Ack) {
        fail_node(Errc::ConfigRejected, i, "expected Ack, got " + std::string(to_string(m->kind)));
      }
    }

    try {
      data_ = Channel::connect(cfg_.nodes[0].data(), cfg_.connect_timeout, cfg_.link, cfg_.chunk,
                               &ledger_);
    } catch (const Error& e) {
      fail_node(Errc::NodeUnreachable, 0, std::string("data connection: ") + e.what());
    }
    auto sock = result_listener_.accept(std::chrono::milliseconds(30000));
    if (!sock) fail_node(Errc::ChainBroken, k - 1, "last node never connected back");
    result_ = std::make_unique<Channel>(std::move(*sock), LinkParams{}, cfg_.chunk);
  }

  /// Core streaming loop. Sends inputs until `count` are sent or `deadline`
  /// passes; returns the number of results received.
  std::uint64_t stream(std::optional<std::size_t> count,
                       std::optional<Clock::time_point> deadline,
                       const std::function<const Tensor&(std::size_t)>& input,
                       const std::function<void(std::size_t, Tensor)>& on_result) {
    if (shut_down_) fail(Errc::InvalidArgument, "chain already shut down");
    std::mutex mu;
    std::condition_variable cv;
    std::uint64_t in_flight = 0, sent = 0;
    bool sender_done = false, failed = false;
    std::exception_ptr send_error;
    const std::uint64_t base = next_seq_;

    std::thread sender([&] {
      try {
        for (std::size_t i = 0;; ++i) {
          if (count && i >= *count) break;
          if (deadline && Clock::now() >= *deadline) break;
          {
            std::unique_lock lock(mu);
            cv.wait(lock, [&] { return in_flight < cfg_.window || failed; });
            if (failed) break;
          }
          Bytes payload =
              meter_.time(MsgClass::Data, [&] { return encode_bytes(cfg_.codecs.data, input(i)); });
          {
            std::lock_guard lock(mu);
            ++in_flight;
            ++sent;
          }
          cv.notify_all();
          data_->send({MessageKind::InferenceData, base + i, std::move(payload)});
        }
      } catch (...) {
        std::lock_guard lock(mu);
        send_error = std::current_exception();
        failed = true;
        result_->shutdown();
      }
      {
        std::lock_guard lock(mu);
        sender_done = true;
      }
      cv.notify_all();
    });

    std::uint64_t received = 0;
    std::exception_ptr receive_error;
    try {
      while (true) {
        {
          std::unique_lock lock(mu);
          cv.wait(lock, [&] { return received < sent || sender_done; });
          if (received == sent && sender_done) break;
          if (send_error) break;
        }
        auto m = result_->receive();
        if (!m) fail_node(Errc::ChainBroken, size() - 1, "result connection closed");
        if (m->kind == MessageKind::Shutdown) {
          const auto doc = ShutdownDoc::decode(m->payload);
          fail_node(Errc::ChainBroken, doc.abort_node.value_or(size() - 1),
                    "chain aborted: " + doc.abort_reason);
        }
        if (m->kind != MessageKind::Result) {
          fail(Errc::OrderViolation, "unexpected " + std::string(to_string(m->kind)));
        }
        const std::uint64_t expected = base + received;
        if (m->sequence != expected) {
          fail(Errc::OrderViolation, "result sequence " + std::to_string(m->sequence) +
                                         ", expected " + std::to_string(expected));
        }
        Tensor t = meter_.time(MsgClass::Data, [&] { return decode_bytes(m->payload); });
        on_result(std::size_t(received), std::move(t));
        {
          std::lock_guard lock(mu);
          ++received;
          --in_flight;
        }
        cv.notify_all();
      }
    } catch (...) {
      receive_error = std::current_exception();
      {
        std::lock_guard lock(mu);
        failed = true;
      }
      cv.notify_all();
      data_->shutdown();
    }
    sender.join();
    next_seq_ = base + sent;
    if (receive_error || send_error) {
      shut_down_ = true;  // the chain is unusable now
      if (send_error && !receive_error) {
        try {
          std::rethrow_exception(send_error);
        } catch (const Error& e) {
          if (e.code() == Errc::Io) fail_node(Errc::ChainBroken, 0, e.what());
          throw;
        }
      }
      std::rethrow_exception(receive_error);
    }
    return received;
  }

  ChainConfig cfg_;
  std::vector<Partition> partitions_;
  std::vector<Bytes> arch_payloads_;
  net::Listener result_listener_;
  std::vector<std::unique_ptr<Channel>> model_;
  std::vector<std::unique_ptr<Channel>> weights_;
  std::unique_ptr<Channel> data_;
  std::unique_ptr<Channel> result_;
  TrafficLedger ledger_;
  OverheadMeter meter_;
  std::uint64_t next_seq_ = 0;
  std::uint64_t cycles_ = 0;
  double window_seconds_ = 0;
  bool shut_down_ = false;
};

}  // namespace defer
